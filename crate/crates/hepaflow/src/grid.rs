//! Spatial discretization of the unit square.
//!
//! Scalar fields live on a uniform tensor grid over `Ω = (0,1)²` with
//! second-order finite difference operators and zero-flux (homogeneous
//! Neumann) boundary handling. All flux operators are written in
//! finite-volume form: face fluxes are differenced and divided by the
//! node's cell width, which is a half cell on the boundary. Together with
//! trapezoidal quadrature this makes every flux operator discretely
//! conservative, not just consistent.
//!
//! Node storage is row-major with y ascending: index `k = j*nx + i`.

use std::io;

use thiserror::Error;

/// Nodes inside a [`Region`] are detected with this slack so that boxes
/// specified in decimal coordinates capture their boundary nodes.
const REGION_EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 3 nodes per direction, got {0}x{1}")]
    TooCoarse(usize, usize),
    #[error("field value count {got} does not match grid node count {expected}")]
    ValueCount { got: usize, expected: usize },
    #[error("region has no positive area: [{x_min}, {x_max}] x [{y_min}, {y_max}]")]
    EmptyRegion {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    },
    #[error("region covers no grid node, normalization impossible")]
    RegionNotResolved,
    #[error("anisotropy map is not positive definite at node ({i}, {j}): a11={a11}, det={det}")]
    NotPositiveDefinite { i: usize, j: usize, a11: f64, det: f64 },
    #[error("anisotropy map has {got} entries but the grid has {expected} nodes")]
    AnisotropySize { got: usize, expected: usize },
    #[error("diffusion coefficient must be nonnegative, got {0}")]
    NegativeCoefficient(f64),
}

/// Uniform tensor grid on the unit square.
///
/// The spacing is derived from the node counts, so `(nx-1)*dx = 1` holds
/// by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize) -> Result<Grid, GridError> {
        if nx < 3 || ny < 3 {
            return Err(GridError::TooCoarse(nx, ny));
        }
        Ok(Grid {
            nx,
            ny,
            dx: 1.0 / (nx - 1) as f64,
            dy: 1.0 / (ny - 1) as f64,
        })
    }

    /// Square grid with `n` nodes per direction; `n = 21` gives the
    /// reference spacing `Δx = 0.05`.
    pub fn unit(n: usize) -> Result<Grid, GridError> {
        Grid::new(n, n)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / (self.nx - 1) as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 / (self.ny - 1) as f64
    }

    /// Trapezoid weight of a node: 1/4 corner, 1/2 edge, 1 interior.
    /// This equals the node's finite-volume cell area divided by `dx*dy`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        wx * wy
    }

    /// Finite-volume cell width in x at column `i` (half cell on the boundary).
    fn hx(&self, i: usize) -> f64 {
        if i == 0 || i == self.nx - 1 {
            0.5 * self.dx
        } else {
            self.dx
        }
    }

    fn hy(&self, j: usize) -> f64 {
        if j == 0 || j == self.ny - 1 {
            0.5 * self.dy
        } else {
            self.dy
        }
    }
}

/// One real value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Field {
        Field::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Field {
        Field {
            grid,
            values: vec![c; grid.nodes()],
        }
    }

    /// Samples `f(x, y)` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Field {
        let mut values = Vec::with_capacity(grid.nodes());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                values.push(f(grid.x(i), grid.y(j)));
            }
        }
        Field { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Field, GridError> {
        if values.len() != grid.nodes() {
            return Err(GridError::ValueCount {
                got: values.len(),
                expected: grid.nodes(),
            });
        }
        Ok(Field { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.idx(i, j);
        self.values[k] = v;
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Maximum absolute node value.
    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned box inside the unit square, used for the portal field Θ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Region, GridError> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(GridError::EmptyRegion {
                x_min,
                x_max,
                y_min,
                y_max,
            });
        }
        Ok(Region {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min - REGION_EDGE_TOL
            && x <= self.x_max + REGION_EDGE_TOL
            && y >= self.y_min - REGION_EDGE_TOL
            && y <= self.y_max + REGION_EDGE_TOL
    }
}

/// Symmetric 2x2 matrix per node for direction-dependent diffusion.
///
/// The uniform variant stores one matrix for the whole grid; the per-node
/// variant stores the three entries nodewise in grid order.
#[derive(Clone, Debug, PartialEq)]
pub enum AnisotropyMap {
    Uniform {
        a11: f64,
        a12: f64,
        a22: f64,
    },
    PerNode {
        nx: usize,
        ny: usize,
        a11: Vec<f64>,
        a12: Vec<f64>,
        a22: Vec<f64>,
    },
}

impl AnisotropyMap {
    pub fn identity() -> AnisotropyMap {
        AnisotropyMap::Uniform {
            a11: 1.0,
            a12: 0.0,
            a22: 1.0,
        }
    }

    pub fn uniform(a11: f64, a12: f64, a22: f64) -> AnisotropyMap {
        AnisotropyMap::Uniform { a11, a12, a22 }
    }

    pub fn per_node(
        grid: Grid,
        a11: Vec<f64>,
        a12: Vec<f64>,
        a22: Vec<f64>,
    ) -> Result<AnisotropyMap, GridError> {
        let n = grid.nodes();
        for v in [&a11, &a12, &a22] {
            if v.len() != n {
                return Err(GridError::AnisotropySize {
                    got: v.len(),
                    expected: n,
                });
            }
        }
        Ok(AnisotropyMap::PerNode {
            nx: grid.nx(),
            ny: grid.ny(),
            a11,
            a12,
            a22,
        })
    }

    /// Checks positive definiteness at every node of `grid`.
    pub fn validate(&self, grid: Grid) -> Result<(), GridError> {
        let check = |i: usize, j: usize, a11: f64, a12: f64, a22: f64| {
            let det = a11 * a22 - a12 * a12;
            if a11 > 0.0 && det > 0.0 {
                Ok(())
            } else {
                Err(GridError::NotPositiveDefinite { i, j, a11, det })
            }
        };
        match self {
            AnisotropyMap::Uniform { a11, a12, a22 } => check(0, 0, *a11, *a12, *a22),
            AnisotropyMap::PerNode { nx, ny, a11, a12, a22 } => {
                if *nx != grid.nx() || *ny != grid.ny() {
                    return Err(GridError::AnisotropySize {
                        got: nx * ny,
                        expected: grid.nodes(),
                    });
                }
                for j in 0..grid.ny() {
                    for i in 0..grid.nx() {
                        let k = grid.idx(i, j);
                        check(i, j, a11[k], a12[k], a22[k])?;
                    }
                }
                Ok(())
            }
        }
    }

    /// Smallest eigenvalue over all nodes; the map must be valid.
    pub fn min_eigenvalue(&self, grid: Grid) -> f64 {
        let eig = |a11: f64, a12: f64, a22: f64| {
            let tr = a11 + a22;
            let disc = (0.25 * (a11 - a22) * (a11 - a22) + a12 * a12).sqrt();
            0.5 * tr - disc
        };
        match self {
            AnisotropyMap::Uniform { a11, a12, a22 } => eig(*a11, *a12, *a22),
            AnisotropyMap::PerNode { a11, a12, a22, .. } => {
                let mut m = f64::INFINITY;
                for k in 0..grid.nodes() {
                    m = m.min(eig(a11[k], a12[k], a22[k]));
                }
                m
            }
        }
    }

    pub(crate) fn at(&self, k: usize) -> (f64, f64, f64) {
        match self {
            AnisotropyMap::Uniform { a11, a12, a22 } => (*a11, *a12, *a22),
            AnisotropyMap::PerNode { a11, a12, a22, .. } => (a11[k], a12[k], a22[k]),
        }
    }
}

// ---------------------------------------------------------------------------
// Node kernels. Each computes the operator value at one node from the raw
// value slice; the public operators and the assembled right-hand side both
// map these over the grid, so parallel and sequential execution perform the
// identical arithmetic.
// ---------------------------------------------------------------------------

pub(crate) fn lap_node(g: &Grid, f: &[f64], i: usize, j: usize) -> f64 {
    let k = j * g.nx + i;
    // Face differences; a zero-flux boundary face contributes nothing.
    let fe = if i + 1 < g.nx { f[k + 1] - f[k] } else { 0.0 };
    let fw = if i > 0 { f[k] - f[k - 1] } else { 0.0 };
    let fn_ = if j + 1 < g.ny { f[k + g.nx] - f[k] } else { 0.0 };
    let fs = if j > 0 { f[k] - f[k - g.nx] } else { 0.0 };
    (fe - fw) / (g.dx * g.hx(i)) + (fn_ - fs) / (g.dy * g.hy(j))
}

/// Central y-derivative with mirror ghosts; zero on the y-boundaries.
fn dfdy_node(g: &Grid, f: &[f64], i: usize, j: usize) -> f64 {
    if j == 0 || j == g.ny - 1 {
        0.0
    } else {
        let k = j * g.nx + i;
        (f[k + g.nx] - f[k - g.nx]) / (2.0 * g.dy)
    }
}

fn dfdx_node(g: &Grid, f: &[f64], i: usize, j: usize) -> f64 {
    if i == 0 || i == g.nx - 1 {
        0.0
    } else {
        let k = j * g.nx + i;
        (f[k + 1] - f[k - 1]) / (2.0 * g.dx)
    }
}

pub(crate) fn aniso_node(g: &Grid, f: &[f64], a: &AnisotropyMap, d: f64, i: usize, j: usize) -> f64 {
    let k = j * g.nx + i;
    // x-face flux d*(a11 f_x + a12 f_y) with face-averaged coefficients
    // and face-averaged tangential derivative.
    let jx = |ka: usize, kb: usize, ia: usize, ib: usize, jj: usize| {
        let (a11a, a12a, _) = a.at(ka);
        let (a11b, a12b, _) = a.at(kb);
        let gx = (f[kb] - f[ka]) / g.dx;
        let gy = 0.5 * (dfdy_node(g, f, ia, jj) + dfdy_node(g, f, ib, jj));
        d * (0.5 * (a11a + a11b) * gx + 0.5 * (a12a + a12b) * gy)
    };
    let jy = |ka: usize, kb: usize, ii: usize, ja: usize, jb: usize| {
        let (_, a12a, a22a) = a.at(ka);
        let (_, a12b, a22b) = a.at(kb);
        let gy = (f[kb] - f[ka]) / g.dy;
        let gx = 0.5 * (dfdx_node(g, f, ii, ja) + dfdx_node(g, f, ii, jb));
        d * (0.5 * (a12a + a12b) * gx + 0.5 * (a22a + a22b) * gy)
    };
    let je = if i + 1 < g.nx { jx(k, k + 1, i, i + 1, j) } else { 0.0 };
    let jw = if i > 0 { jx(k - 1, k, i - 1, i, j) } else { 0.0 };
    let jn = if j + 1 < g.ny { jy(k, k + g.nx, i, j, j + 1) } else { 0.0 };
    let js = if j > 0 { jy(k - g.nx, k, i, j - 1, j) } else { 0.0 };
    (je - jw) / g.hx(i) + (jn - js) / g.hy(j)
}

pub(crate) fn chemotaxis_node(
    g: &Grid,
    carrier: &[f64],
    attractant: &[f64],
    d: f64,
    i: usize,
    j: usize,
) -> f64 {
    let k = j * g.nx + i;
    // Face flux d * carrier * grad(attractant), carrier taken from the
    // donor cell: cells flow up the attractant gradient, so the donor is
    // the low-attractant side. This keeps an empty cell from going
    // negative.
    let flux = |ka: usize, kb: usize, h: f64| {
        let grad = (attractant[kb] - attractant[ka]) / h;
        let c = if grad >= 0.0 { carrier[ka] } else { carrier[kb] };
        d * c * grad
    };
    let je = if i + 1 < g.nx { flux(k, k + 1, g.dx) } else { 0.0 };
    let jw = if i > 0 { flux(k - 1, k, g.dx) } else { 0.0 };
    let jn = if j + 1 < g.ny { flux(k, k + g.nx, g.dy) } else { 0.0 };
    let js = if j > 0 { flux(k - g.nx, k, g.dy) } else { 0.0 };
    -((je - jw) / g.hx(i) + (jn - js) / g.hy(j))
}

// ---------------------------------------------------------------------------
// Execution helpers. The parallel build maps node kernels with rayon; the
// kernels are pure per-node functions, so scheduling cannot change results.
// ---------------------------------------------------------------------------

#[cfg(feature = "parallel")]
pub(crate) fn fill_nodes(g: &Grid, out: &mut [f64], kernel: impl Fn(usize, usize) -> f64 + Sync) {
    use rayon::prelude::*;
    let nx = g.nx;
    out.par_iter_mut().enumerate().for_each(|(k, v)| {
        *v = kernel(k % nx, k / nx);
    });
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn fill_nodes(g: &Grid, out: &mut [f64], kernel: impl Fn(usize, usize) -> f64 + Sync) {
    fill_nodes_seq(g, out, kernel);
}

pub(crate) fn fill_nodes_seq(
    g: &Grid,
    out: &mut [f64],
    kernel: impl Fn(usize, usize) -> f64 + Sync,
) {
    let nx = g.nx;
    for (k, v) in out.iter_mut().enumerate() {
        *v = kernel(k % nx, k / nx);
    }
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// Five-point Laplacian with mirror ghosts enforcing `∂f/∂n = 0` on the
/// boundary. Constants are in its kernel and the quadrature-weighted sum
/// of the output vanishes for any input.
pub fn laplacian_neumann(f: &Field) -> Field {
    let g = f.grid;
    let mut out = vec![0.0; g.nodes()];
    fill_nodes(&g, &mut out, |i, j| lap_node(&g, &f.values, i, j));
    Field { grid: g, values: out }
}

/// Divergence form `∇·(d A(x) ∇f)` with face-averaged coefficients and
/// zero-flux boundary faces. For `A ≡ I` this reduces to
/// `d * laplacian_neumann(f)`.
pub fn aniso_diffusion(f: &Field, a: &AnisotropyMap, d: f64) -> Result<Field, GridError> {
    if d < 0.0 {
        return Err(GridError::NegativeCoefficient(d));
    }
    let g = f.grid;
    a.validate(g)?;
    let mut out = vec![0.0; g.nodes()];
    fill_nodes(&g, &mut out, |i, j| aniso_node(&g, &f.values, a, d, i, j));
    Ok(Field { grid: g, values: out })
}

/// Chemotactic transport `-∇·(d_chem * carrier * ∇attractant)` with
/// donor-cell upwinding of the carrier on each face. Positive where
/// carriers accumulate (attractant maxima), conservative over Ω.
pub fn chemotaxis_div(
    carrier: &Field,
    attractant: &Field,
    d_chem: f64,
) -> Result<Field, GridError> {
    if d_chem < 0.0 {
        return Err(GridError::NegativeCoefficient(d_chem));
    }
    assert_eq!(
        carrier.grid, attractant.grid,
        "carrier and attractant must share a grid"
    );
    let g = carrier.grid;
    let mut out = vec![0.0; g.nodes()];
    fill_nodes(&g, &mut out, |i, j| {
        chemotaxis_node(&g, &carrier.values, &attractant.values, d_chem, i, j)
    });
    Ok(Field { grid: g, values: out })
}

/// Trapezoidal quadrature over the unit square; exact for bilinear fields.
/// Sequential accumulation in node order keeps results bit-reproducible.
pub fn integrate_domain(f: &Field) -> f64 {
    let g = f.grid;
    let mut sum = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            sum += g.weight(i, j) * f.values[g.idx(i, j)];
        }
    }
    sum * g.dx * g.dy
}

/// Normalized sharp indicator of Θ: zero outside the region, constant
/// inside, scaled so the quadrature over Ω equals one.
pub fn chi_theta(grid: Grid, theta: &Region) -> Result<Field, GridError> {
    let mut ind = Field::from_fn(grid, |x, y| {
        if theta.contains(x, y) {
            1.0
        } else {
            0.0
        }
    });
    let mass = integrate_domain(&ind);
    if mass <= 0.0 {
        return Err(GridError::RegionNotResolved);
    }
    for v in ind.values.iter_mut() {
        *v /= mass;
    }
    Ok(ind)
}

/// Plain text snapshot: header line, then `ny` rows of `nx` values with
/// y ascending.
pub fn write_snapshot(
    w: &mut impl io::Write,
    t: f64,
    component: &str,
    f: &Field,
) -> io::Result<()> {
    let g = f.grid;
    writeln!(w, "# t={} component={} nx={} ny={}", t, component, g.nx, g.ny)?;
    for j in 0..g.ny {
        let row = &f.values[j * g.nx..(j + 1) * g.nx];
        let mut line = String::new();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{}", v));
        }
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

/// Reference sequential implementations of the flux operators.
///
/// The crate-level operators dispatch to rayon maps when the `parallel`
/// feature is on; these run the same node kernels in a plain loop and are
/// the baseline for the benchmark suite and the bit-equality tests.
pub mod serial {
    use super::*;

    pub fn laplacian_neumann(f: &Field) -> Field {
        let g = f.grid;
        let mut out = vec![0.0; g.nodes()];
        fill_nodes_seq(&g, &mut out, |i, j| lap_node(&g, &f.values, i, j));
        Field { grid: g, values: out }
    }

    pub fn aniso_diffusion(f: &Field, a: &AnisotropyMap, d: f64) -> Result<Field, GridError> {
        if d < 0.0 {
            return Err(GridError::NegativeCoefficient(d));
        }
        let g = f.grid;
        a.validate(g)?;
        let mut out = vec![0.0; g.nodes()];
        fill_nodes_seq(&g, &mut out, |i, j| aniso_node(&g, &f.values, a, d, i, j));
        Ok(Field { grid: g, values: out })
    }

    pub fn chemotaxis_div(
        carrier: &Field,
        attractant: &Field,
        d_chem: f64,
    ) -> Result<Field, GridError> {
        if d_chem < 0.0 {
            return Err(GridError::NegativeCoefficient(d_chem));
        }
        assert_eq!(carrier.grid, attractant.grid);
        let g = carrier.grid;
        let mut out = vec![0.0; g.nodes()];
        fill_nodes_seq(&g, &mut out, |i, j| {
            chemotaxis_node(&g, &carrier.values, &attractant.values, d_chem, i, j)
        });
        Ok(Field { grid: g, values: out })
    }
}
