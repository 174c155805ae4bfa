//! Adaptive time integration for the assembled systems.
//!
//! Two steppers share one driver:
//!
//! - an explicit Dormand and Prince 5(4) embedded pair with first-same-
//!   as-last reuse, the default for the mildly stiff diffusion scales of
//!   the reference grids;
//! - a variable-step BDF of order 1 to 2, solved by a matrix-free
//!   Newton iteration with finite difference directional derivatives
//!   and GMRES, for genuinely stiff parameterizations.
//!
//! `Auto` mode probes the right-hand side norm once at the start to pick
//! a stepper, and switches from explicit to implicit mid-run if the step
//! size collapses. Error control is a scaled RMS norm with an integral
//! controller in both steppers.
//!
//! Sampling is streaming: only the current step is kept, and requested
//! sample times are filled from a cubic Hermite interpolant as the
//! integration passes them, so memory does not grow with step count.
//! All reductions (norms, dot products) accumulate sequentially in index
//! order; results are bit-reproducible for a fixed input regardless of
//! thread count.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Flat autonomous-in-layout right-hand side: `dydt = f(t, y)`.
///
/// Implementations must be pure: the same `(t, y)` always produces the
/// same `dydt`, with no interior state.
pub trait OdeRhs: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMode {
    Explicit,
    Implicit,
    Auto,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    /// Upper step bound; `None` means a tenth of the time span.
    pub dt_max: Option<f64>,
    /// Attempted steps (accepted plus rejected) before giving up.
    pub max_steps: usize,
    /// Round negative values within `abs_tol` of zero up to zero after
    /// accepted steps and on emitted samples. Larger negatives are left
    /// visible. The rounded mass is tallied in the step stats.
    pub clip_negative: bool,
}

impl Default for SolverConfig {
    fn default() -> SolverConfig {
        SolverConfig {
            mode: SolverMode::Auto,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            dt_init: 1e-4,
            dt_min: 1e-12,
            dt_max: None,
            max_steps: 5_000_000,
            clip_negative: true,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: &str| Err(SolverError::BadConfig(msg.to_string()));
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return bad("rel_tol must be positive");
        }
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return bad("abs_tol must be positive");
        }
        if !(self.dt_init > 0.0 && self.dt_init.is_finite()) {
            return bad("dt_init must be positive");
        }
        if !(self.dt_min > 0.0 && self.dt_min.is_finite()) {
            return bad("dt_min must be positive");
        }
        if let Some(m) = self.dt_max {
            if !(m > self.dt_min && m.is_finite()) {
                return bad("dt_max must exceed dt_min");
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
    pub newton_iters: usize,
    pub gmres_iters: usize,
    /// Explicit-to-implicit handovers in `Auto` mode.
    pub mode_switches: usize,
    /// Controller step size after the last accepted step.
    pub final_dt: f64,
    /// Total magnitude rounded away by `clip_negative`.
    pub total_clamped: f64,
}

/// Sampled solution of one integration run. `times` and `states` pair
/// up; `final_state` is the state at `final_time` whether or not it was
/// sampled.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub stats: StepStats,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
    #[error("non-finite value in state at t = {t} (flat index {index})")]
    NonFinite { t: f64, index: usize },
    #[error("step size underflow at t = {t}: the controller needs steps below dt_min = {dt_min}")]
    StepSizeUnderflow { t: f64, dt_min: f64 },
    #[error("step budget of {steps} exhausted at t = {t_reached}; partial trajectory attached")]
    StepBudget {
        t_reached: f64,
        steps: usize,
        partial: Box<Trajectory>,
    },
}

// ---------------------------------------------------------------------------
// Shared numerics
// ---------------------------------------------------------------------------

/// RMS of `e` scaled by `abs_tol + rel_tol * max(|a|, |b|)` per entry;
/// an accepted step keeps this at or below one.
fn scaled_rms(e: &[f64], a: &[f64], b: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..e.len() {
        let sc = abs_tol + rel_tol * a[i].abs().max(b[i].abs());
        let r = e[i] / sc;
        s += r * r;
    }
    (s / e.len() as f64).sqrt()
}

fn l2(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

fn clamp_tiny_negatives(y: &mut [f64], width: f64) -> f64 {
    let mut total = 0.0;
    for v in y.iter_mut() {
        if *v < 0.0 && *v >= -width {
            total -= *v;
            *v = 0.0;
        }
    }
    total
}

/// Cubic Hermite interpolant over one accepted step.
fn hermite(t0: f64, h: f64, y0: &[f64], y1: &[f64], f0: &[f64], f1: &[f64], ts: f64) -> Vec<f64> {
    let th = ((ts - t0) / h).clamp(0.0, 1.0);
    let t2 = th * th;
    let t3 = t2 * th;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + th;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
        .collect()
}

/// Power iteration estimate of the right-hand side Jacobian norm at a
/// state, from finite difference directional derivatives. Returns the
/// norm of the last iterate image: an estimate of the largest curvature
/// rate, and zero for a flat right-hand side.
pub fn stiffness_probe<R: OdeRhs>(rhs: &R, t: f64, y: &[f64], iters: usize, seed: u64) -> f64 {
    let n = rhs.dim();
    assert_eq!(y.len(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let vn = l2(&v);
    if vn == 0.0 {
        v[0] = 1.0;
    } else {
        for x in v.iter_mut() {
            *x /= vn;
        }
    }
    let eps = f64::EPSILON.sqrt() * (1.0 + l2(y));
    let mut f0 = vec![0.0; n];
    rhs.eval(t, y, &mut f0);
    let mut yp = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        for i in 0..n {
            yp[i] = y[i] + eps * v[i];
        }
        rhs.eval(t, &yp, &mut w);
        for i in 0..n {
            w[i] = (w[i] - f0[i]) / eps;
        }
        let nrm = l2(&w);
        if !(nrm > 0.0) || !nrm.is_finite() {
            return 0.0;
        }
        est = nrm;
        for i in 0..n {
            v[i] = w[i] / nrm;
        }
    }
    est
}

// ---------------------------------------------------------------------------
// Explicit stepper: Dormand and Prince 5(4), FSAL
// ---------------------------------------------------------------------------

const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights; also the last stage row, which is what makes the
/// final stage evaluation reusable as the next step's first stage.
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Difference between the fifth and embedded fourth order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const C: [f64; 5] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0];

struct Dp5 {
    k: Vec<Vec<f64>>,
    ytmp: Vec<f64>,
}

impl Dp5 {
    fn new(n: usize) -> Dp5 {
        Dp5 {
            k: (0..7).map(|_| vec![0.0; n]).collect(),
            ytmp: vec![0.0; n],
        }
    }

    /// One attempted step; six evaluations, the first stage comes in as
    /// `f_curr`. Writes the candidate state and its derivative, returns
    /// the scaled error norm.
    #[allow(clippy::too_many_arguments)]
    fn attempt<R: OdeRhs>(
        &mut self,
        rhs: &R,
        t: f64,
        y: &[f64],
        f_curr: &[f64],
        h: f64,
        y_new: &mut [f64],
        f_new: &mut [f64],
        cfg: &SolverConfig,
        stats: &mut StepStats,
    ) -> f64 {
        let n = y.len();
        self.k[0].copy_from_slice(f_curr);
        let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
        for (stage, row) in rows.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in row.iter().enumerate() {
                    acc += a * self.k[j][i];
                }
                self.ytmp[i] = y[i] + h * acc;
            }
            let (head, tail) = self.k.split_at_mut(stage + 1);
            let _ = head;
            rhs.eval(t + C[stage] * h, &self.ytmp, &mut tail[0]);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, b) in B5.iter().enumerate() {
                acc += b * self.k[j][i];
            }
            y_new[i] = y[i] + h * acc;
        }
        rhs.eval(t + h, y_new, f_new);
        self.k[6].copy_from_slice(f_new);
        stats.rhs_evals += 6;

        let mut s = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, c) in E.iter().enumerate() {
                e += c * self.k[j][i];
            }
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            let r = h * e / sc;
            s += r * r;
        }
        (s / n as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Implicit stepper: variable-step BDF(1,2) with Newton and GMRES
// ---------------------------------------------------------------------------

const MAX_NEWTON: usize = 10;
const GMRES_MAX: usize = 40;
const GMRES_TOL: f64 = 1e-2;

/// Single-cycle GMRES for `A x = b` with `x0 = 0`, `A` given as a
/// matrix-vector closure. Returns the relative residual and the number
/// of inner iterations. Sequential inner products keep it reproducible.
fn gmres(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_m: usize,
) -> (f64, usize) {
    let n = b.len();
    x.iter_mut().for_each(|v| *v = 0.0);
    let beta = l2(b);
    if beta == 0.0 || !beta.is_finite() {
        return (0.0, 0);
    }
    let m = max_m.min(n);
    let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    v.push(b.iter().map(|x| x / beta).collect());
    let mut h = vec![vec![0.0; m]; m + 1];
    let mut cs = vec![0.0; m];
    let mut sn = vec![0.0; m];
    let mut g = vec![0.0; m + 1];
    g[0] = beta;
    let mut w = vec![0.0; n];
    let mut used = 0;
    let mut res = beta;

    for j in 0..m {
        apply(&v[j], &mut w);
        for (i, vi) in v.iter().enumerate().take(j + 1) {
            let mut dot = 0.0;
            for k in 0..n {
                dot += w[k] * vi[k];
            }
            h[i][j] = dot;
            for k in 0..n {
                w[k] -= dot * vi[k];
            }
        }
        let wn = l2(&w);
        h[j + 1][j] = wn;
        // Previous Givens rotations on the new column.
        for i in 0..j {
            let tmp = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
            h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
            h[i][j] = tmp;
        }
        let denom = (h[j][j] * h[j][j] + h[j + 1][j] * h[j + 1][j]).sqrt();
        if denom > 0.0 {
            cs[j] = h[j][j] / denom;
            sn[j] = h[j + 1][j] / denom;
        } else {
            cs[j] = 1.0;
            sn[j] = 0.0;
        }
        h[j][j] = cs[j] * h[j][j] + sn[j] * h[j + 1][j];
        h[j + 1][j] = 0.0;
        g[j + 1] = -sn[j] * g[j];
        g[j] *= cs[j];
        used = j + 1;
        res = g[j + 1].abs();
        let breakdown = wn <= 1e-14 * beta;
        if res <= rel_tol * beta || breakdown {
            break;
        }
        v.push(w.iter().map(|x| x / wn).collect());
    }

    // Back substitution for the least squares coefficients.
    let mut ycoef = vec![0.0; used];
    for i in (0..used).rev() {
        let mut acc = g[i];
        for j in (i + 1)..used {
            acc -= h[i][j] * ycoef[j];
        }
        ycoef[i] = if h[i][i] != 0.0 { acc / h[i][i] } else { 0.0 };
    }
    for (j, c) in ycoef.iter().enumerate() {
        for k in 0..n {
            x[k] += c * v[j][k];
        }
    }
    (res / beta, used)
}

struct Bdf {
    y_prev: Option<Vec<f64>>,
    h_old: f64,
    last_order: usize,
}

impl Bdf {
    fn new() -> Bdf {
        Bdf {
            y_prev: None,
            h_old: 0.0,
            last_order: 1,
        }
    }

    fn reset(&mut self) {
        self.y_prev = None;
        self.h_old = 0.0;
        self.last_order = 1;
    }

    fn error_exponent(&self) -> f64 {
        1.0 / (self.last_order as f64 + 1.0)
    }

    /// Records the pre-step state after an accepted step, enabling the
    /// second order formula from the next step on.
    fn advance(&mut self, y_old: &[f64], h: f64) {
        self.y_prev = Some(y_old.to_vec());
        self.h_old = h;
    }

    /// One attempted implicit step. `None` means the Newton iteration
    /// failed and the driver should retry with a smaller step.
    #[allow(clippy::too_many_arguments)]
    fn attempt<R: OdeRhs>(
        &mut self,
        rhs: &R,
        t: f64,
        y: &[f64],
        h: f64,
        y_new: &mut [f64],
        f_new: &mut [f64],
        cfg: &SolverConfig,
        stats: &mut StepStats,
    ) -> Option<f64> {
        let n = y.len();
        let t1 = t + h;
        // Variable-step BDF2: u - alpha y - beta y_prev = gamma h f(t1, u),
        // with rho the step ratio; rho -> BDF1 when no history exists.
        let (alpha, beta, gamma, order) = match &self.y_prev {
            Some(_) if self.h_old > 0.0 => {
                let rho = h / self.h_old;
                let den = 1.0 + 2.0 * rho;
                (
                    (1.0 + rho) * (1.0 + rho) / den,
                    -rho * rho / den,
                    (1.0 + rho) / den,
                    2,
                )
            }
            _ => (1.0, 0.0, 1.0, 1),
        };
        self.last_order = order;
        let gh = gamma * h;

        // Extrapolation predictor.
        let mut u0 = y.to_vec();
        if let Some(yp) = &self.y_prev {
            if order == 2 {
                let rho = h / self.h_old;
                for i in 0..n {
                    u0[i] = y[i] + rho * (y[i] - yp[i]);
                }
            }
        }
        let mut u = u0.clone();
        let mut f_base = vec![0.0; n];
        rhs.eval(t1, &u, &mut f_base);
        let evals = Cell::new(1usize);

        let mut resid = vec![0.0; n];
        let mut delta = vec![0.0; n];
        let mut converged = false;
        for _ in 0..MAX_NEWTON {
            for i in 0..n {
                let hist = match &self.y_prev {
                    Some(yp) if order == 2 => beta * yp[i],
                    _ => 0.0,
                };
                resid[i] = alpha * y[i] + hist + gh * f_base[i] - u[i];
            }
            if !resid.iter().all(|v| v.is_finite()) {
                break;
            }
            let rnorm = scaled_rms(&resid, y, &u, cfg.rel_tol, cfg.abs_tol);
            if rnorm <= 1e-3 {
                converged = true;
                break;
            }
            // Solve (I - gamma h J) delta = resid, J applied through
            // forward differences around u.
            let unorm = l2(&u);
            let sigma0 = f64::EPSILON.sqrt() * (1.0 + unorm);
            let mut scratch_y = vec![0.0; n];
            let mut scratch_f = vec![0.0; n];
            {
                let u_ref = &u;
                let f_ref = &f_base;
                let evals_ref = &evals;
                let mut apply = |vin: &[f64], out: &mut [f64]| {
                    let vn = l2(vin);
                    if vn == 0.0 {
                        out.iter_mut().for_each(|o| *o = 0.0);
                        return;
                    }
                    let sigma = sigma0 / vn;
                    for i in 0..n {
                        scratch_y[i] = u_ref[i] + sigma * vin[i];
                    }
                    rhs.eval(t1, &scratch_y, &mut scratch_f);
                    evals_ref.set(evals_ref.get() + 1);
                    for i in 0..n {
                        out[i] = vin[i] - gh * (scratch_f[i] - f_ref[i]) / sigma;
                    }
                };
                let (_res, iters) = gmres(&mut apply, &resid, &mut delta, GMRES_TOL, GMRES_MAX);
                stats.gmres_iters += iters;
            }
            stats.newton_iters += 1;
            if !delta.iter().all(|v| v.is_finite()) {
                break;
            }
            for i in 0..n {
                u[i] += delta[i];
            }
            rhs.eval(t1, &u, &mut f_base);
            evals.set(evals.get() + 1);
            let dnorm = scaled_rms(&delta, y, &u, cfg.rel_tol, cfg.abs_tol);
            if dnorm <= 0.05 {
                converged = true;
                break;
            }
        }
        stats.rhs_evals += evals.get();
        if !converged || !u.iter().all(|v| v.is_finite()) {
            return None;
        }

        y_new.copy_from_slice(&u);
        f_new.copy_from_slice(&f_base);
        // Predictor-corrector gap as the local error estimate.
        let c = if order == 1 { 0.5 } else { 1.0 / 3.0 };
        for i in 0..n {
            resid[i] = c * (u[i] - u0[i]);
        }
        Some(scaled_rms(&resid, y, &u, cfg.rel_tol, cfg.abs_tol))
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Method {
    Explicit,
    Implicit,
}

/// Estimated explicit step count above which `Auto` starts implicit.
const AUTO_IMPLICIT_STEPS: f64 = 500_000.0;
/// In `Auto` mode, an accepted explicit step below span divided by this
/// hands over to the implicit stepper.
const AUTO_SLOW_FRACTION: f64 = 2.0e6;

/// Integrates `rhs` from `t0` to `t_end`, recording the state at every
/// requested sample time inside the span (interpolated within accepted
/// steps, so sampling does not constrain the step size).
pub fn integrate<R: OdeRhs>(
    rhs: &R,
    y0: &[f64],
    t0: f64,
    t_end: f64,
    cfg: &SolverConfig,
    sample_times: &[f64],
) -> Result<Trajectory, SolverError> {
    cfg.validate()?;
    let n = rhs.dim();
    assert_eq!(y0.len(), n, "initial state length must match rhs dimension");
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(SolverError::BadConfig(
            "t_end must be finite and exceed t0".to_string(),
        ));
    }
    let span = t_end - t0;
    let dt_max = cfg.dt_max.unwrap_or(span / 10.0).min(span);
    let tiny = 1e-12 * span.max(1.0);

    let mut samples: Vec<f64> = sample_times
        .iter()
        .copied()
        .filter(|ts| ts.is_finite() && *ts >= t0 - tiny && *ts <= t_end + tiny)
        .collect();
    samples.sort_by(f64::total_cmp);
    samples.dedup_by(|a, b| (*a - *b).abs() <= tiny);

    let mut stats = StepStats::default();
    let mut y = y0.to_vec();
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite { t: t0, index });
    }
    if cfg.clip_negative {
        stats.total_clamped += clamp_tiny_negatives(&mut y, cfg.abs_tol);
    }

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut si = 0;
    while si < samples.len() && samples[si] <= t0 + tiny {
        times.push(samples[si]);
        states.push(y.clone());
        si += 1;
    }

    let mut f_curr = vec![0.0; n];
    rhs.eval(t0, &y, &mut f_curr);
    stats.rhs_evals += 1;

    let auto = cfg.mode == SolverMode::Auto;
    let mut method = match cfg.mode {
        SolverMode::Explicit => Method::Explicit,
        SolverMode::Implicit => Method::Implicit,
        SolverMode::Auto => {
            let lambda = stiffness_probe(rhs, t0, &y, 15, 0);
            stats.rhs_evals += 16;
            if lambda * span / 2.8 > AUTO_IMPLICIT_STEPS {
                Method::Implicit
            } else {
                Method::Explicit
            }
        }
    };

    let mut dp5 = Dp5::new(n);
    let mut bdf = Bdf::new();
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let mut t = t0;
    let mut dt = cfg.dt_init.clamp(cfg.dt_min, dt_max);
    let mut consecutive_rejects = 0usize;
    let slow_dt = span / AUTO_SLOW_FRACTION;

    while t < t_end - tiny {
        if stats.steps_accepted + stats.steps_rejected >= cfg.max_steps {
            let final_state = y.clone();
            return Err(SolverError::StepBudget {
                t_reached: t,
                steps: cfg.max_steps,
                partial: Box::new(Trajectory {
                    times,
                    states,
                    final_time: t,
                    final_state,
                    stats,
                }),
            });
        }
        let step_dt = dt.min(t_end - t);
        let last = step_dt >= t_end - t - tiny;

        let err = match method {
            Method::Explicit => {
                let e = dp5.attempt(
                    rhs, t, &y, &f_curr, step_dt, &mut y_new, &mut f_new, cfg, &mut stats,
                );
                if e.is_finite() {
                    e
                } else {
                    f64::INFINITY
                }
            }
            Method::Implicit => match bdf.attempt(
                rhs, t, &y, step_dt, &mut y_new, &mut f_new, cfg, &mut stats,
            ) {
                Some(e) if e.is_finite() => e,
                _ => f64::INFINITY,
            },
        };

        if err <= 1.0 {
            let t_new = if last { t_end } else { t + step_dt };
            while si < samples.len() && samples[si] <= t_new + tiny {
                let ts = samples[si];
                let mut ys = if (ts - t_new).abs() <= tiny {
                    y_new.clone()
                } else {
                    hermite(t, step_dt, &y, &y_new, &f_curr, &f_new, ts)
                };
                if cfg.clip_negative {
                    stats.total_clamped += clamp_tiny_negatives(&mut ys, cfg.abs_tol);
                }
                times.push(ts);
                states.push(ys);
                si += 1;
            }
            if cfg.clip_negative {
                stats.total_clamped += clamp_tiny_negatives(&mut y_new, cfg.abs_tol);
            }
            if method == Method::Implicit {
                bdf.advance(&y, step_dt);
            }
            std::mem::swap(&mut y, &mut y_new);
            f_curr.copy_from_slice(&f_new);
            t = t_new;
            stats.steps_accepted += 1;
            consecutive_rejects = 0;

            let exp = match method {
                Method::Explicit => 0.2,
                Method::Implicit => bdf.error_exponent(),
            };
            let fac = (0.9 * err.max(1e-10).powf(-exp)).clamp(0.2, 5.0);
            dt = (step_dt * fac).clamp(cfg.dt_min, dt_max);
            stats.final_dt = dt;

            if auto && method == Method::Explicit && dt < slow_dt && t < t_end - tiny {
                method = Method::Implicit;
                bdf.reset();
                stats.mode_switches += 1;
                dt = (dt * 10.0).min(dt_max);
            }
        } else {
            stats.steps_rejected += 1;
            consecutive_rejects += 1;
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.1, 0.7)
            } else {
                0.25
            };
            let can_switch = auto && method == Method::Explicit;
            if step_dt <= cfg.dt_min * (1.0 + 1e-9) && !can_switch {
                if let Some(index) = y_new.iter().position(|v| !v.is_finite()) {
                    return Err(SolverError::NonFinite { t, index });
                }
                return Err(SolverError::StepSizeUnderflow {
                    t,
                    dt_min: cfg.dt_min,
                });
            }
            dt = (step_dt * fac).max(cfg.dt_min);
            if can_switch
                && (consecutive_rejects >= 30 || step_dt <= cfg.dt_min * (1.0 + 1e-9))
            {
                method = Method::Implicit;
                bdf.reset();
                stats.mode_switches += 1;
                consecutive_rejects = 0;
            }
        }
    }

    Ok(Trajectory {
        times,
        states,
        final_time: t_end,
        final_state: y,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate_domain, laplacian_neumann, Field, Grid};
    use approx::assert_abs_diff_eq;

    /// `dydt = lambda * y` in one dimension.
    struct Linear {
        lambda: f64,
    }

    impl OdeRhs for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
            dydt[0] = self.lambda * y[0];
        }
    }

    /// `dydt = d * laplacian(y)` on a unit grid.
    struct Diffusion {
        grid: Grid,
        d: f64,
    }

    impl OdeRhs for Diffusion {
        fn dim(&self) -> usize {
            self.grid.nodes()
        }
        fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
            let f = Field::from_values(self.grid, y.to_vec()).unwrap();
            let lap = laplacian_neumann(&f);
            for (o, l) in dydt.iter_mut().zip(lap.values()) {
                *o = self.d * l;
            }
        }
    }

    fn explicit_cfg() -> SolverConfig {
        SolverConfig {
            mode: SolverMode::Explicit,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn exponential_decay_is_resolved_to_tolerance() {
        let rhs = Linear { lambda: -1.0 };
        let cfg = SolverConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            ..explicit_cfg()
        };
        let traj = integrate(&rhs, &[1.0], 0.0, 2.0, &cfg, &[]).unwrap();
        let exact = (-2.0f64).exp();
        assert!((traj.final_state[0] - exact).abs() / exact <= 1e-6);
        assert!(traj.stats.steps_rejected < traj.stats.steps_accepted);
    }

    #[test]
    fn sampled_values_track_the_solution() {
        let rhs = Linear { lambda: -1.0 };
        let cfg = SolverConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            dt_max: Some(0.1),
            ..explicit_cfg()
        };
        let wanted = [0.0, 0.3, 0.7, 1.5];
        let traj = integrate(&rhs, &[1.0], 0.0, 2.0, &cfg, &wanted).unwrap();
        assert_eq!(traj.times, wanted);
        for (ts, ys) in traj.times.iter().zip(&traj.states) {
            assert_abs_diff_eq!(ys[0], (-ts).exp(), epsilon = 1e-5);
        }
    }

    #[test]
    fn heat_mode_decays_at_the_discrete_rate() {
        // A discrete eigenvector decays exactly like exp(-d mu t), so
        // the only error is the time stepper's own.
        let g = Grid::unit(21).unwrap();
        let k = 3.0;
        let mu = 4.0 / (g.dx() * g.dx()) * (k * std::f64::consts::PI * g.dx() / 2.0).sin().powi(2);
        let d = 0.9;
        let y0 = Field::from_fn(g, |x, _| (k * std::f64::consts::PI * x).cos());
        let rhs = Diffusion { grid: g, d };
        let cfg = SolverConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            clip_negative: false,
            ..explicit_cfg()
        };
        let t_end = 0.1;
        let traj = integrate(&rhs, y0.values(), 0.0, t_end, &cfg, &[]).unwrap();
        let decay = (-d * mu * t_end).exp();
        for (num, init) in traj.final_state.iter().zip(y0.values()) {
            assert_abs_diff_eq!(*num, decay * init, epsilon = 1e-5);
        }
    }

    #[test]
    fn implicit_stepper_matches_the_discrete_rate() {
        let g = Grid::unit(9).unwrap();
        let k = 2.0;
        let mu = 4.0 / (g.dx() * g.dx()) * (k * std::f64::consts::PI * g.dx() / 2.0).sin().powi(2);
        let d = 0.9;
        let y0 = Field::from_fn(g, |x, _| (k * std::f64::consts::PI * x).cos());
        let rhs = Diffusion { grid: g, d };
        let cfg = SolverConfig {
            mode: SolverMode::Implicit,
            rel_tol: 1e-7,
            abs_tol: 1e-10,
            clip_negative: false,
            ..SolverConfig::default()
        };
        let t_end = 0.05;
        let traj = integrate(&rhs, y0.values(), 0.0, t_end, &cfg, &[]).unwrap();
        assert!(traj.stats.newton_iters > 0);
        let decay = (-d * mu * t_end).exp();
        for (num, init) in traj.final_state.iter().zip(y0.values()) {
            assert_abs_diff_eq!(*num, decay * init, epsilon = 5e-4);
        }
    }

    #[test]
    fn implicit_stepper_handles_a_stiff_relaxation() {
        // dydt = -1e6 (y - 1) from just off the fixed point: explicit
        // stepping would need about 1e6 * span / 2.8 steps for bare
        // stability; the implicit path rides through the fast transient
        // in a graded handful and then leaps.
        struct Relax;
        impl OdeRhs for Relax {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
                dydt[0] = -1e6 * (y[0] - 1.0);
            }
        }
        let cfg = SolverConfig {
            mode: SolverMode::Implicit,
            ..SolverConfig::default()
        };
        let traj = integrate(&Relax, &[1.001], 0.0, 1.0, &cfg, &[]).unwrap();
        assert_abs_diff_eq!(traj.final_state[0], 1.0, epsilon = 1e-4);
        assert!(traj.stats.newton_iters > 0);
        assert!(
            traj.stats.steps_accepted < 10_000,
            "steps {}",
            traj.stats.steps_accepted
        );
    }

    #[test]
    fn zero_rhs_keeps_the_state_exactly() {
        struct Still;
        impl OdeRhs for Still {
            fn dim(&self) -> usize {
                3
            }
            fn eval(&self, _t: f64, _y: &[f64], dydt: &mut [f64]) {
                dydt.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let y0 = [0.25, 1.5, 3.0];
        let traj = integrate(&Still, &y0, 0.0, 5.0, &explicit_cfg(), &[2.5]).unwrap();
        assert_eq!(traj.final_state, y0);
        assert_eq!(traj.states[0], y0);
        assert!(traj.stats.steps_accepted < 40);
    }

    #[test]
    fn diffusion_preserves_mass() {
        let g = Grid::unit(15).unwrap();
        let y0 = Field::from_fn(g, |x, y| 1.0 + 0.5 * (3.0 * x).sin() * (2.0 * y).cos());
        let rhs = Diffusion { grid: g, d: 0.5 };
        let traj = integrate(&rhs, y0.values(), 0.0, 10.0, &explicit_cfg(), &[]).unwrap();
        let m0 = integrate_domain(&y0);
        let m1 = integrate_domain(&Field::from_values(g, traj.final_state).unwrap());
        assert!((m1 - m0).abs() <= 1e-8, "mass drift {}", m1 - m0);
    }

    #[test]
    fn tighter_tolerance_gives_smaller_error() {
        let rhs = Linear { lambda: -1.0 };
        let exact = (-3.0f64).exp();
        let run = |rtol: f64| {
            let cfg = SolverConfig {
                rel_tol: rtol,
                abs_tol: 1e-12,
                ..explicit_cfg()
            };
            (integrate(&rhs, &[1.0], 0.0, 3.0, &cfg, &[]).unwrap().final_state[0] - exact).abs()
        };
        let loose = run(1e-3);
        let tight = run(1e-8);
        assert!(tight < loose, "loose {} tight {}", loose, tight);
        assert!(tight <= 1e-7);
    }

    #[test]
    fn probe_reports_unit_rate_for_unit_decay() {
        let rhs = Linear { lambda: -1.0 };
        let est = stiffness_probe(&rhs, 0.0, &[1.0], 20, 0);
        assert!((est - 1.0).abs() <= 0.1, "estimate {}", est);
    }

    #[test]
    fn probe_reports_the_diffusion_spectrum_edge() {
        // Largest 2D five-point eigenvalue at n = 21 is 2 * 4/dx^2, and
        // the scaled operator tops out at 0.6 * 3200 = 1920.
        let g = Grid::unit(21).unwrap();
        let rhs = Diffusion { grid: g, d: 0.6 };
        let y = vec![0.5; g.nodes()];
        let est = stiffness_probe(&rhs, 0.0, &y, 20, 0);
        assert!(
            (est - 1920.0).abs() <= 0.15 * 1920.0,
            "estimate {} expected near 1920",
            est
        );
    }

    #[test]
    fn probe_reports_zero_for_flat_rhs() {
        struct Still;
        impl OdeRhs for Still {
            fn dim(&self) -> usize {
                4
            }
            fn eval(&self, _t: f64, _y: &[f64], dydt: &mut [f64]) {
                dydt.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(stiffness_probe(&Still, 0.0, &[1.0; 4], 20, 0), 0.0);
    }

    #[test]
    fn auto_mode_starts_implicit_on_a_stiff_problem() {
        struct Relax;
        impl OdeRhs for Relax {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
                dydt[0] = -1e7 * (y[0] - 1.0);
            }
        }
        let cfg = SolverConfig::default();
        let traj = integrate(&Relax, &[1.001], 0.0, 1.0, &cfg, &[]).unwrap();
        assert_abs_diff_eq!(traj.final_state[0], 1.0, epsilon = 1e-3);
        assert_eq!(traj.stats.mode_switches, 0, "chosen up front, not switched");
        assert!(
            traj.stats.rhs_evals < 100_000,
            "evals {} suggest the explicit path ran",
            traj.stats.rhs_evals
        );
    }

    #[test]
    fn auto_mode_switches_when_stiffness_appears_mid_run() {
        // Mild until t = 0.5, then a fast relaxation: the start probe
        // sees nothing, the collapsing step size triggers the handover.
        // The floor is lowered so the implicit stepper may grade down
        // into the fresh transient it inherits at the switch point.
        struct Ramp;
        impl OdeRhs for Ramp {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
                let lambda = if t < 0.5 { 1.0 } else { 1e7 };
                dydt[0] = -lambda * y[0];
            }
        }
        let cfg = SolverConfig {
            abs_tol: 1e-6,
            dt_min: 1e-16,
            ..SolverConfig::default()
        };
        let traj = integrate(&Ramp, &[1.0], 0.0, 1.0, &cfg, &[]).unwrap();
        assert!(traj.stats.mode_switches >= 1);
        assert!(traj.final_state[0].abs() <= 1e-3);
        assert!(traj.stats.steps_accepted + traj.stats.steps_rejected < 100_000);
    }

    #[test]
    fn step_budget_exhaustion_returns_partial_progress() {
        let rhs = Linear { lambda: -1.0 };
        let cfg = SolverConfig {
            max_steps: 5,
            ..explicit_cfg()
        };
        match integrate(&rhs, &[1.0], 0.0, 100.0, &cfg, &[]) {
            Err(SolverError::StepBudget {
                t_reached, partial, ..
            }) => {
                assert!(t_reached < 100.0);
                assert_eq!(partial.final_time, t_reached);
                assert!(partial.final_state[0] <= 1.0);
            }
            other => panic!("expected step budget error, got {:?}", other.map(|t| t.final_time)),
        }
    }

    #[test]
    fn nan_rhs_is_reported_with_the_offending_index() {
        struct Poison;
        impl OdeRhs for Poison {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, _t: f64, _y: &[f64], dydt: &mut [f64]) {
                dydt[0] = 0.0;
                dydt[1] = f64::NAN;
            }
        }
        let cfg = SolverConfig {
            mode: SolverMode::Explicit,
            ..SolverConfig::default()
        };
        match integrate(&Poison, &[1.0, 1.0], 0.0, 1.0, &cfg, &[]) {
            Err(SolverError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected non-finite error, got {:?}", other.map(|t| t.final_time)),
        }
    }

    #[test]
    fn negative_rounding_is_tracked_and_optional() {
        // A weak constant sink leaks below zero by less than the noise
        // window per step; with clipping on the value pins at zero and
        // the removed mass is tallied.
        struct Sink(f64);
        impl OdeRhs for Sink {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, _y: &[f64], dydt: &mut [f64]) {
                dydt[0] = -self.0;
            }
        }
        let clipped = SolverConfig {
            abs_tol: 1e-3,
            ..explicit_cfg()
        };
        let traj = integrate(&Sink(1e-4), &[1e-10], 0.0, 1.0, &clipped, &[]).unwrap();
        assert_eq!(traj.final_state[0], 0.0);
        assert!(traj.stats.total_clamped > 0.0);

        let unclipped = SolverConfig {
            abs_tol: 1e-3,
            clip_negative: false,
            ..explicit_cfg()
        };
        let traj = integrate(&Sink(1e-4), &[1e-10], 0.0, 1.0, &unclipped, &[]).unwrap();
        assert_abs_diff_eq!(traj.final_state[0], -1e-4, epsilon = 1e-9);
        assert_eq!(traj.stats.total_clamped, 0.0);
    }

    #[test]
    fn clipping_never_masks_a_genuine_plunge() {
        // A strong sink outruns the noise window as soon as the step
        // size grows: clipping catches only the first hairline dips and
        // then lets the real excursion through.
        struct Sink;
        impl OdeRhs for Sink {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _t: f64, _y: &[f64], dydt: &mut [f64]) {
                dydt[0] = -0.5;
            }
        }
        let cfg = SolverConfig {
            abs_tol: 1e-3,
            ..explicit_cfg()
        };
        let traj = integrate(&Sink, &[1e-10], 0.0, 1.0, &cfg, &[]).unwrap();
        assert!(
            traj.final_state[0] < -0.45,
            "final {}",
            traj.final_state[0]
        );
        assert!(traj.stats.total_clamped < 1e-2);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let g = Grid::unit(11).unwrap();
        let y0 = Field::from_fn(g, |x, y| 1.0 + x * (1.0 - x) * y);
        let rhs = Diffusion { grid: g, d: 0.7 };
        let a = integrate(&rhs, y0.values(), 0.0, 0.5, &explicit_cfg(), &[0.25]).unwrap();
        let b = integrate(&rhs, y0.values(), 0.0, 0.5, &explicit_cfg(), &[0.25]).unwrap();
        assert_eq!(a.final_state.len(), b.final_state.len());
        for (x, y) in a.final_state.iter().zip(&b.final_state) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.states[0].iter().zip(&b.states[0]) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let rhs = Linear { lambda: -1.0 };
        let cfg = SolverConfig {
            rel_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(matches!(
            integrate(&rhs, &[1.0], 0.0, 1.0, &cfg, &[]),
            Err(SolverError::BadConfig(_))
        ));
        assert!(matches!(
            integrate(&rhs, &[1.0], 1.0, 1.0, &SolverConfig::default(), &[]),
            Err(SolverError::BadConfig(_))
        ));
    }
}
