//! Feasibility screening of model definitions.
//!
//! Nineteen rules, R.1.1 through R.3.6, encode what a biologically
//! plausible member of the model family must satisfy: growth laws anchor
//! at zero and at capacity, reduction and decay terms never act as
//! sources, recruitment responds monotonically to infection, taxis
//! carries the moving density itself, and every component's net reaction
//! eventually saturates.
//!
//! The checker works on term values and analytic derivatives sampled
//! over the feasible state box of each component. Structural facts
//! (declared capacities, matrix definiteness, carrier dependence) are
//! read off the definition directly; sign conditions are scanned over a
//! low-discrepancy sample of states, with canonical probe points first
//! so that witnesses of classic violations land on readable values.
//! Sampling lives in open boxes: degenerate corner states (for example
//! the pathogen pinned exactly at capacity, where decay terms vanish
//! identically) are never drawn, matching the family's reading of the
//! saturation rules as statements about the interior of the feasible
//! region.
//!
//! Every verdict is reproducible: the sample stream is fixed by the
//! budget and seed alone.

use std::fmt;

use crate::grid::{chi_theta, Grid};
use crate::mechanisms::{MechanismTerm, TermFamily, TermInputs, TermKind, TermVar};
use crate::model::{role_of, ComponentRole, ComponentSpec, ModelDefinition, ModelError, TaxisTerm};
use crate::sampling::HaltonSampler;

/// Slack for sampled sign conditions, absorbing roundoff in term
/// evaluation.
pub const SIGN_TOL: f64 = 1e-8;
/// Tolerance for exact anchor conditions (values that must vanish at a
/// specific state).
pub const ANCHOR_TOL: f64 = 1e-10;
/// State box top for components that declare no capacity.
const FALLBACK_CAP: f64 = 10.0;
/// Saturation searches double the candidate level this many times
/// before giving up.
const SATURATION_DOUBLINGS: i32 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// The rule's subject (a component role) is absent from the model.
    NotApplicable,
}

impl Verdict {
    pub fn token(&self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "N/A",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleResult {
    pub id: &'static str,
    pub description: &'static str,
    pub verdict: Verdict,
    /// On failure: the state and value that broke the rule. On passing
    /// saturation rules: the level found.
    pub witness: Option<String>,
    pub samples_used: usize,
}

/// Sampling effort for the sign scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub budget: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> SampleSpec {
        SampleSpec {
            budget: 800,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RequirementReport {
    pub model: String,
    pub budget: usize,
    pub seed: u64,
    pub results: Vec<RuleResult>,
}

impl RequirementReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.verdict != Verdict::Fail)
    }

    pub fn failures(&self) -> Vec<&RuleResult> {
        self.results
            .iter()
            .filter(|r| r.verdict == Verdict::Fail)
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&RuleResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

impl fmt::Display for RequirementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model: {}", self.model)?;
        writeln!(f, "budget: {}  seed: {}", self.budget, self.seed)?;
        for r in &self.results {
            writeln!(f, "{:<6} {:<4} {}", r.id, r.verdict.token(), r.description)?;
            if let Some(w) = &r.witness {
                writeln!(f, "       witness: {}", w)?;
            }
        }
        let applicable = self
            .results
            .iter()
            .filter(|r| r.verdict != Verdict::NotApplicable)
            .count();
        let failed = self.failures().len();
        write!(
            f,
            "result: {} ({} rules applicable, {} failed)",
            if failed == 0 { "PASS" } else { "FAIL" },
            applicable,
            failed
        )
    }
}

// ---------------------------------------------------------------------------
// Sampling helpers
// ---------------------------------------------------------------------------

/// Which inputs a kind actually reads; used to build sample dimensions
/// and keep witnesses free of irrelevant coordinates.
/// Order: (self, virus, partner, chi, integral).
fn used_inputs(kind: &TermKind) -> (bool, bool, bool, bool, bool) {
    use TermKind::*;
    match kind {
        M1Unbounded { .. } | M1Logistic { .. } | M1Allee { .. } => (true, false, false, false, false),
        M2LocalUnbounded { .. } => (false, true, false, false, false),
        M2LocalBounded { .. } => (true, true, false, false, false),
        M2Global { .. } => (false, false, false, true, true),
        M2GlobalSaturated { .. } => (true, false, false, true, true),
        M3VirusOnly { .. } => (false, true, false, false, false),
        M3HelperOnly { .. } => (false, false, true, false, false),
        M3Product { .. } => (false, true, true, false, false),
        M3HelperBounded { .. } => (true, false, true, false, false),
        M3ProductBounded { .. } => (true, true, true, false, false),
        M5Linear { .. } => (false, false, true, false, false),
        M5Bilinear { .. } => (true, false, true, false, false),
        M6NaturalDecay { .. } => (true, false, false, false, false),
        M6VirusDependent { .. } => (true, true, false, false, false),
        NdLinear { .. } | NdConstant { .. } => (true, false, false, false, false),
    }
}

/// Largest capacity any reaction term declares for the component.
pub(crate) fn cap_of(comp: &ComponentSpec) -> Option<f64> {
    comp.reaction
        .iter()
        .filter_map(|t| t.kind.capacity())
        .fold(None, |acc, c| Some(acc.map_or(c, |a: f64| a.max(c))))
}

fn box_top(def: &ModelDefinition, name: &str) -> f64 {
    def.component(name)
        .and_then(cap_of)
        .unwrap_or(FALLBACK_CAP)
}

/// Canonical probes, then low-discrepancy points, inside open boxes
/// `(0, hi)` per dimension. Probe zero puts every coordinate at one
/// (the classic witness state) where the box allows, probe one at the
/// box midpoints.
fn sample_coords(h: &mut HaltonSampler, bounds: &[(f64, f64)], idx: usize, out: &mut [f64]) {
    match idx {
        0 => {
            for (o, (lo, hi)) in out.iter_mut().zip(bounds) {
                *o = if 1.0 > *lo && 1.0 <= *hi {
                    1.0
                } else {
                    0.5 * (lo + hi)
                };
            }
        }
        1 => {
            for (o, (lo, hi)) in out.iter_mut().zip(bounds) {
                *o = 0.5 * (lo + hi);
            }
        }
        _ => h.next_in_box(bounds, out),
    }
}

/// Witness text: the term, the component it sits on, the coordinates it
/// read (plus any coordinate the rule pinned), and the offending value.
fn describe(
    term: &MechanismTerm,
    comp: &str,
    s: &TermInputs,
    pins: Pins,
    label: &str,
    value: f64,
) -> String {
    let (us, uv, up, uc, ui) = used_inputs(&term.kind);
    let mut parts = Vec::new();
    if us || pins.self_value.is_some() {
        parts.push(format!("{}={}", comp, s.self_value));
    }
    if uv {
        parts.push(format!("q1={}", s.virus));
    }
    if up {
        parts.push(format!(
            "{}={}",
            term.partner.as_deref().unwrap_or("partner"),
            s.partner
        ));
    }
    if uc {
        parts.push(format!("chi={}", s.chi));
    }
    if ui {
        parts.push(format!("int_q1={}", s.virus_integral));
    }
    format!(
        "{} on {} at ({}): {} = {}",
        term.kind.name(),
        comp,
        parts.join(", "),
        label,
        value
    )
}

/// Pinned coordinates for a scan; free ones are sampled.
#[derive(Clone, Copy, Default)]
struct Pins {
    self_value: Option<f64>,
    virus: Option<f64>,
}

/// Scans one term over sampled states and applies `test` to each; the
/// first offense becomes the witness. Returns (samples evaluated, witness).
fn scan_term(
    def: &ModelDefinition,
    chi_max: f64,
    spec: &SampleSpec,
    comp: &str,
    term: &MechanismTerm,
    pins: Pins,
    mut test: impl FnMut(&TermInputs) -> Option<(&'static str, f64)>,
) -> (usize, Option<String>) {
    let (us, uv, up, uc, ui) = used_inputs(&term.kind);
    let mut bounds: Vec<(f64, f64)> = Vec::new();
    // Dimension order: self, virus, partner, integral.
    let self_dim = (us && pins.self_value.is_none()).then(|| {
        bounds.push((0.0, box_top(def, comp)));
        bounds.len() - 1
    });
    let virus_dim = (uv && pins.virus.is_none()).then(|| {
        bounds.push((0.0, box_top(def, "q1")));
        bounds.len() - 1
    });
    let partner_dim = up.then(|| {
        let pname = term.partner.as_deref().unwrap_or("q1");
        bounds.push((0.0, box_top(def, pname)));
        bounds.len() - 1
    });
    let integral_dim = ui.then(|| {
        bounds.push((0.0, box_top(def, "q1")));
        bounds.len() - 1
    });
    let chi_probes: &[f64] = if uc { &[0.0, 1.0] } else { &[0.0] };

    let rounds = if bounds.is_empty() { 1 } else { spec.budget };
    let mut h = HaltonSampler::new(bounds.len().max(1), spec.seed);
    let mut point = vec![0.0; bounds.len().max(1)];
    let mut samples = 0;
    for idx in 0..rounds {
        if !bounds.is_empty() {
            sample_coords(&mut h, &bounds, idx, &mut point[..bounds.len()]);
        }
        for cp in chi_probes {
            let s = TermInputs {
                self_value: pins
                    .self_value
                    .unwrap_or_else(|| self_dim.map_or(0.0, |d| point[d])),
                virus: pins.virus.unwrap_or_else(|| virus_dim.map_or(0.0, |d| point[d])),
                partner: partner_dim.map_or(0.0, |d| point[d]),
                chi: cp * chi_max,
                virus_integral: integral_dim.map_or(0.0, |d| point[d]),
            };
            samples += 1;
            if let Some((label, value)) = test(&s) {
                return (samples, Some(describe(term, comp, &s, pins, label, value)));
            }
        }
    }
    (samples, None)
}

// ---------------------------------------------------------------------------
// Saturation search (R.2.5 and R.3.5)
// ---------------------------------------------------------------------------

/// Searches for a level beyond which the component's summed reaction is
/// nonpositive, by doubling from the declared capacity (or one) and
/// testing sampled states with the component above the candidate level.
/// Returns `Ok(level, samples)` or `Err(witness, samples)`.
pub(crate) fn saturation_level(
    def: &ModelDefinition,
    comp: &ComponentSpec,
    chi_max: f64,
    spec: &SampleSpec,
) -> Result<(f64, usize), (String, usize)> {
    let base = cap_of(comp).unwrap_or(1.0);
    let virus_top = box_top(def, "q1");
    // One sample dimension per distinct partner component.
    let mut partners: Vec<&str> = Vec::new();
    for t in &comp.reaction {
        if let Some(p) = t.partner.as_deref() {
            if !partners.contains(&p) {
                partners.push(p);
            }
        }
    }
    let uses_chi = comp.reaction.iter().any(|t| t.kind.uses_chi());
    let chi_probes: &[f64] = if uses_chi { &[0.0, 1.0] } else { &[0.0] };

    // Dimensions: self, virus, integral, then partners.
    let mut bounds = vec![(0.0, 1.0), (0.0, virus_top), (0.0, virus_top)];
    for p in &partners {
        bounds.push((0.0, box_top(def, p)));
    }

    let mut samples = 0;
    let mut last_witness = String::new();
    for k in 0..=SATURATION_DOUBLINGS {
        let level = base * f64::powi(2.0, k);
        if !level.is_finite() {
            break;
        }
        bounds[0] = (level, 10.0 * level);
        let mut h = HaltonSampler::new(bounds.len(), spec.seed.wrapping_add(k as u64));
        let mut point = vec![0.0; bounds.len()];
        let mut exceeded = false;
        // Interior points only: closed probes would pin the pathogen at
        // capacity, where capacity-gated decay vanishes identically.
        'level: for _ in 0..spec.budget {
            h.next_in_box(&bounds, &mut point);
            for cp in chi_probes {
                let mut total = 0.0;
                let mut magnitude = 0.0;
                for t in &comp.reaction {
                    let partner = t
                        .partner
                        .as_deref()
                        .map_or(0.0, |p| point[3 + partners.iter().position(|q| *q == p).unwrap()]);
                    let v = t.kind.eval(&TermInputs {
                        self_value: point[0],
                        virus: point[1],
                        partner,
                        chi: cp * chi_max,
                        virus_integral: point[2],
                    });
                    total += v;
                    magnitude += v.abs();
                }
                samples += 1;
                // Slack proportional to the cancelled magnitudes; a
                // level-sized slack would eventually swallow a bounded
                // positive net reaction and fake saturation.
                let tol = SIGN_TOL * (1.0 + magnitude);
                if total > tol {
                    exceeded = true;
                    last_witness = format!(
                        "net reaction of {} is {} at {}={} (q1={}, int_q1={}, chi={})",
                        comp.name,
                        total,
                        comp.name,
                        point[0],
                        point[1],
                        point[2],
                        cp * chi_max
                    );
                    break 'level;
                }
            }
        }
        if !exceeded {
            return Ok((level, samples));
        }
    }
    Err((
        format!(
            "no saturation level for {} up to {} doublings of {}; last offense: {}",
            comp.name, SATURATION_DOUBLINGS, base, last_witness
        ),
        samples,
    ))
}

// ---------------------------------------------------------------------------
// The checker
// ---------------------------------------------------------------------------

struct RuleSpec {
    id: &'static str,
    description: &'static str,
}

const RULES: [RuleSpec; 19] = [
    RuleSpec { id: "R.1.1", description: "pathogen growth does not turn negative above its activation threshold" },
    RuleSpec { id: "R.1.2", description: "pathogen growth vanishes at zero load" },
    RuleSpec { id: "R.1.3", description: "pathogen growth vanishes at a declared capacity" },
    RuleSpec { id: "R.1.4", description: "pathogen reduction is inactive when no pathogen is present" },
    RuleSpec { id: "R.1.5", description: "pathogen reduction never weakens with more killer cells" },
    RuleSpec { id: "R.1.6", description: "pathogen anisotropy matrices are positive definite" },
    RuleSpec { id: "R.2.1", description: "immune recruitment never decreases with infection" },
    RuleSpec { id: "R.2.2", description: "immune recruitment is nonnegative" },
    RuleSpec { id: "R.2.3", description: "immune decay is monotone in the cell count" },
    RuleSpec { id: "R.2.4", description: "immune decay is inactive without immune cells" },
    RuleSpec { id: "R.2.5", description: "immune net reaction saturates beyond some cell level" },
    RuleSpec { id: "R.2.6", description: "immune anisotropy matrices are positive definite" },
    RuleSpec { id: "R.2.7", description: "immune drift along an attractant carries the cell density itself" },
    RuleSpec { id: "R.3.1", description: "cytokine production never decreases with its drivers" },
    RuleSpec { id: "R.3.2", description: "cytokine production is nonnegative" },
    RuleSpec { id: "R.3.3", description: "cytokine decay never adds signal" },
    RuleSpec { id: "R.3.4", description: "cytokine decay is inactive at zero signal" },
    RuleSpec { id: "R.3.5", description: "cytokine net reaction saturates beyond some signal level" },
    RuleSpec { id: "R.3.6", description: "cytokine anisotropy matrices are positive definite" },
];

fn rule(id: &str) -> &'static RuleSpec {
    RULES.iter().find(|r| r.id == id).expect("known rule id")
}

fn result(id: &str, verdict: Verdict, witness: Option<String>, samples: usize) -> RuleResult {
    let r = rule(id);
    RuleResult {
        id: r.id,
        description: r.description,
        verdict,
        witness,
        samples_used: samples,
    }
}

fn not_applicable(id: &str) -> RuleResult {
    result(id, Verdict::NotApplicable, None, 0)
}

fn from_scan(id: &str, samples: usize, witness: Option<String>) -> RuleResult {
    match witness {
        Some(w) => result(id, Verdict::Fail, Some(w), samples),
        None => result(id, Verdict::Pass, None, samples),
    }
}

/// Positive definiteness of every anisotropic map on the listed
/// components.
fn aniso_rule(id: &str, comps: &[&ComponentSpec], grid: Grid) -> RuleResult {
    let mut checked = 0;
    for comp in comps {
        for tx in &comp.taxis {
            if let TaxisTerm::AnisoDiffusion { map, .. } = tx {
                checked += 1;
                let eig = map.min_eigenvalue(grid);
                if !(eig > 0.0) {
                    return result(
                        id,
                        Verdict::Fail,
                        Some(format!(
                            "anisotropy on {} has smallest eigenvalue {}",
                            comp.name, eig
                        )),
                        checked,
                    );
                }
            }
        }
    }
    result(id, Verdict::Pass, None, checked)
}

/// Runs every rule against the definition. The definition must be
/// structurally valid; the grid fixes the portal indicator scale used
/// by the nonlocal recruitment terms.
pub fn check_requirements(
    def: &ModelDefinition,
    grid: Grid,
    spec: &SampleSpec,
) -> Result<RequirementReport, ModelError> {
    def.validate()?;
    let needs_chi = def
        .components
        .iter()
        .flat_map(|c| &c.reaction)
        .any(|t| t.kind.uses_chi());
    let chi_max = if needs_chi {
        chi_theta(grid, &def.theta)?.max_value()
    } else {
        0.0
    };

    let pathogen: Vec<&ComponentSpec> = def
        .components
        .iter()
        .filter(|c| role_of(&c.name) == Some(ComponentRole::Pathogen))
        .collect();
    let immune: Vec<&ComponentSpec> = def
        .components
        .iter()
        .filter(|c| role_of(&c.name) == Some(ComponentRole::Immune))
        .collect();
    let cytokine: Vec<&ComponentSpec> = def
        .components
        .iter()
        .filter(|c| role_of(&c.name) == Some(ComponentRole::Cytokine))
        .collect();

    let mut results = Vec::with_capacity(RULES.len());

    // Scans a family of terms across components; the first offense ends
    // the scan.
    let family_scan =
        |comps: &[&ComponentSpec],
         family: TermFamily,
         pins: Pins,
         test: &mut dyn FnMut(&MechanismTerm, &TermInputs) -> Option<(&'static str, f64)>|
         -> (usize, Option<String>) {
            let mut samples = 0;
            for comp in comps {
                for term in comp.reaction.iter().filter(|t| t.kind.family() == family) {
                    let (s, w) = scan_term(def, chi_max, spec, &comp.name, term, pins, |inp| {
                        test(term, inp)
                    });
                    samples += s;
                    if w.is_some() {
                        return (samples, w);
                    }
                }
            }
            (samples, None)
        };

    // R.1.1: growth value test on the interval above the activation
    // threshold, up to capacity (or the fallback box).
    {
        let mut samples = 0;
        let mut witness = None;
        'outer: for comp in &pathogen {
            for term in comp
                .reaction
                .iter()
                .filter(|t| t.kind.family() == TermFamily::PathogenGrowth)
            {
                let lo = match term.kind {
                    TermKind::M1Allee { threshold, .. } => threshold,
                    _ => 0.0,
                };
                let hi = term.kind.capacity().unwrap_or(FALLBACK_CAP);
                let mut h = HaltonSampler::new(1, spec.seed);
                let mut u = [0.0];
                for idx in 0..spec.budget {
                    // Endpoint first, midpoint second, open interior after.
                    let q = match idx {
                        0 => hi,
                        1 => 0.5 * (lo + hi),
                        _ => {
                            h.next_unit(&mut u);
                            lo + u[0] * (hi - lo)
                        }
                    };
                    let s = TermInputs {
                        self_value: q,
                        ..TermInputs::default()
                    };
                    samples += 1;
                    let f = term.kind.eval(&s);
                    if f < -SIGN_TOL {
                        witness = Some(describe(term, &comp.name, &s, Pins::default(), "f", f));
                        break 'outer;
                    }
                }
            }
        }
        results.push(from_scan("R.1.1", samples, witness));
    }

    // R.1.2 and R.1.3: anchors of every growth term.
    {
        let mut samples = 0;
        let mut witness = None;
        for comp in &pathogen {
            for term in comp
                .reaction
                .iter()
                .filter(|t| t.kind.family() == TermFamily::PathogenGrowth)
            {
                let s = TermInputs::default();
                samples += 1;
                let f = term.kind.eval(&s);
                if f.abs() > ANCHOR_TOL && witness.is_none() {
                    witness = Some(describe(term, &comp.name, &s, Pins::default(), "f", f));
                }
            }
        }
        results.push(from_scan("R.1.2", samples, witness));

        let mut samples = 0;
        let mut witness = None;
        for comp in &pathogen {
            for term in comp
                .reaction
                .iter()
                .filter(|t| t.kind.family() == TermFamily::PathogenGrowth)
            {
                match term.kind.capacity() {
                    None => {
                        if witness.is_none() {
                            witness = Some(format!(
                                "{} on {} declares no capacity",
                                term.kind.name(),
                                comp.name
                            ));
                        }
                    }
                    Some(c) => {
                        let s = TermInputs {
                            self_value: c,
                            ..TermInputs::default()
                        };
                        samples += 1;
                        let f = term.kind.eval(&s);
                        if f.abs() > ANCHOR_TOL && witness.is_none() {
                            witness = Some(describe(term, &comp.name, &s, Pins::default(), "f", f));
                        }
                    }
                }
            }
        }
        results.push(from_scan("R.1.3", samples, witness));
    }

    // R.1.4: reduction at zero pathogen must not act.
    {
        let (samples, witness) = family_scan(
            &pathogen,
            TermFamily::PathogenReduction,
            Pins {
                self_value: Some(0.0),
                virus: Some(0.0),
            },
            &mut |term, s| {
                let f = term.kind.eval(s);
                (f < -SIGN_TOL).then_some(("f", f))
            },
        );
        results.push(from_scan("R.1.4", samples, witness));
    }

    // R.1.5: more killer cells never weaken the reduction.
    {
        let (samples, witness) = family_scan(
            &pathogen,
            TermFamily::PathogenReduction,
            Pins::default(),
            &mut |term, s| {
                let d = term.kind.derivative(s, TermVar::Partner);
                (d > SIGN_TOL).then_some(("df/dkiller", d))
            },
        );
        results.push(from_scan("R.1.5", samples, witness));
    }

    results.push(aniso_rule("R.1.6", &pathogen, grid));

    // R.2.*
    if immune.is_empty() {
        for id in ["R.2.1", "R.2.2", "R.2.3", "R.2.4", "R.2.5", "R.2.6", "R.2.7"] {
            results.push(not_applicable(id));
        }
    } else {
        let (samples, witness) = family_scan(
            &immune,
            TermFamily::ImmuneRecruitment,
            Pins::default(),
            &mut |term, s| {
                let dv = term.kind.derivative(s, TermVar::Virus);
                if dv < -SIGN_TOL {
                    return Some(("df/dq1", dv));
                }
                let di = term.kind.derivative(s, TermVar::VirusIntegral);
                (di < -SIGN_TOL).then_some(("df/dint_q1", di))
            },
        );
        results.push(from_scan("R.2.1", samples, witness));

        let (samples, witness) = family_scan(
            &immune,
            TermFamily::ImmuneRecruitment,
            Pins::default(),
            &mut |term, s| {
                let f = term.kind.eval(s);
                (f < -SIGN_TOL).then_some(("f", f))
            },
        );
        results.push(from_scan("R.2.2", samples, witness));

        let (samples, witness) = family_scan(
            &immune,
            TermFamily::ImmuneDecay,
            Pins::default(),
            &mut |term, s| {
                let d = term.kind.derivative(s, TermVar::SelfValue);
                (d > SIGN_TOL).then_some(("df/dself", d))
            },
        );
        results.push(from_scan("R.2.3", samples, witness));

        let (samples, witness) = family_scan(
            &immune,
            TermFamily::ImmuneDecay,
            Pins {
                self_value: Some(0.0),
                virus: None,
            },
            &mut |term, s| {
                let f = term.kind.eval(s);
                (f < -SIGN_TOL).then_some(("f", f))
            },
        );
        results.push(from_scan("R.2.4", samples, witness));

        // R.2.5: saturation per immune component.
        {
            let mut samples = 0;
            let mut levels = Vec::new();
            let mut witness = None;
            for comp in &immune {
                match saturation_level(def, comp, chi_max, spec) {
                    Ok((level, s)) => {
                        samples += s;
                        levels.push(format!("{} saturates beyond {}", comp.name, level));
                    }
                    Err((w, s)) => {
                        samples += s;
                        witness = Some(w);
                        break;
                    }
                }
            }
            match witness {
                Some(w) => results.push(result("R.2.5", Verdict::Fail, Some(w), samples)),
                None => results.push(result(
                    "R.2.5",
                    Verdict::Pass,
                    Some(levels.join("; ")),
                    samples,
                )),
            }
        }

        results.push(aniso_rule("R.2.6", &immune, grid));

        // R.2.7: structural carrier dependence of taxis.
        {
            let mut checked = 0;
            let mut witness = None;
            'taxis: for comp in &immune {
                for tx in &comp.taxis {
                    match tx {
                        TaxisTerm::Chemotaxis { .. } => checked += 1,
                        TaxisTerm::ChemotaxisNoCarrier { attractant, .. } => {
                            checked += 1;
                            witness = Some(format!(
                                "ChemotaxisNoCarrier on {} drifts along '{}' without the {} density factor",
                                comp.name, attractant, comp.name
                            ));
                            break 'taxis;
                        }
                        _ => {}
                    }
                }
            }
            results.push(from_scan("R.2.7", checked, witness));
        }
    }

    // R.3.*
    if cytokine.is_empty() {
        for id in ["R.3.1", "R.3.2", "R.3.3", "R.3.4", "R.3.5", "R.3.6"] {
            results.push(not_applicable(id));
        }
    } else {
        let (samples, witness) = family_scan(
            &cytokine,
            TermFamily::CytokineProduction,
            Pins::default(),
            &mut |term, s| {
                let dv = term.kind.derivative(s, TermVar::Virus);
                if dv < -SIGN_TOL {
                    return Some(("df/dq1", dv));
                }
                let dp = term.kind.derivative(s, TermVar::Partner);
                (dp < -SIGN_TOL).then_some(("df/dhelper", dp))
            },
        );
        results.push(from_scan("R.3.1", samples, witness));

        let (samples, witness) = family_scan(
            &cytokine,
            TermFamily::CytokineProduction,
            Pins::default(),
            &mut |term, s| {
                let f = term.kind.eval(s);
                (f < -SIGN_TOL).then_some(("f", f))
            },
        );
        results.push(from_scan("R.3.2", samples, witness));

        let (samples, witness) = family_scan(
            &cytokine,
            TermFamily::CytokineDecay,
            Pins::default(),
            &mut |term, s| {
                let f = term.kind.eval(s);
                (f > SIGN_TOL).then_some(("f", f))
            },
        );
        results.push(from_scan("R.3.3", samples, witness));

        let mut samples = 0;
        let mut witness = None;
        for comp in &cytokine {
            for term in comp
                .reaction
                .iter()
                .filter(|t| t.kind.family() == TermFamily::CytokineDecay)
            {
                let s = TermInputs::default();
                samples += 1;
                let f = term.kind.eval(&s);
                if f.abs() > ANCHOR_TOL && witness.is_none() {
                    witness = Some(describe(term, &comp.name, &s, Pins::default(), "f", f));
                }
            }
        }
        results.push(from_scan("R.3.4", samples, witness));

        {
            let mut samples = 0;
            let mut levels = Vec::new();
            let mut witness = None;
            for comp in &cytokine {
                match saturation_level(def, comp, chi_max, spec) {
                    Ok((level, s)) => {
                        samples += s;
                        levels.push(format!("{} saturates beyond {}", comp.name, level));
                    }
                    Err((w, s)) => {
                        samples += s;
                        witness = Some(w);
                        break;
                    }
                }
            }
            match witness {
                Some(w) => results.push(result("R.3.5", Verdict::Fail, Some(w), samples)),
                None => results.push(result(
                    "R.3.5",
                    Verdict::Pass,
                    Some(levels.join("; ")),
                    samples,
                )),
            }
        }

        results.push(aniso_rule("R.3.6", &cytokine, grid));
    }

    Ok(RequirementReport {
        model: def.name.clone(),
        budget: spec.budget,
        seed: spec.seed,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Course, PresetModel};
    use std::collections::BTreeMap;

    fn grid() -> Grid {
        Grid::unit(21).unwrap()
    }

    fn check(def: &ModelDefinition) -> RequirementReport {
        check_requirements(def, grid(), &SampleSpec::default()).unwrap()
    }

    #[test]
    fn reference_models_pass_every_applicable_rule() {
        for (m, c) in [
            (PresetModel::Model1, Course::Healing),
            (PresetModel::Model1, Course::Chronic),
            (PresetModel::Model2, Course::Healing),
            (PresetModel::Model2, Course::Chronic),
            (PresetModel::Model3, Course::Healing),
            (PresetModel::Model3, Course::Chronic),
        ] {
            let def = preset(m, c, &BTreeMap::new()).unwrap();
            let report = check(&def);
            assert!(
                report.all_passed(),
                "{}: {:?}",
                def.name,
                report.failures()
            );
        }
    }

    #[test]
    fn four_component_model_leaves_nothing_inapplicable() {
        let def = preset(PresetModel::Model1, Course::Healing, &BTreeMap::new()).unwrap();
        let report = check(&def);
        assert_eq!(report.results.len(), 19);
        assert!(report
            .results
            .iter()
            .all(|r| r.verdict != Verdict::NotApplicable));
    }

    #[test]
    fn cytokine_rules_are_inapplicable_without_a_cytokine_component() {
        let def = preset(PresetModel::Model3, Course::Chronic, &BTreeMap::new()).unwrap();
        let report = check(&def);
        for id in ["R.3.1", "R.3.2", "R.3.3", "R.3.4", "R.3.5", "R.3.6"] {
            assert_eq!(report.get(id).unwrap().verdict, Verdict::NotApplicable);
        }
        assert!(report.all_passed());
    }

    #[test]
    fn killer_independent_reduction_fails_exactly_the_zero_pathogen_rule() {
        let mut def = preset(PresetModel::Model3, Course::Healing, &BTreeMap::new()).unwrap();
        let q1 = &mut def.components[0];
        let slot = q1
            .reaction
            .iter_mut()
            .find(|t| t.kind.family() == TermFamily::PathogenReduction)
            .unwrap();
        *slot = MechanismTerm::with_partner(TermKind::M5Linear { rate: 2.0 }, "q2").unwrap();

        let report = check(&def);
        let failed: Vec<&str> = report.failures().iter().map(|r| r.id).collect();
        assert_eq!(failed, ["R.1.4"], "report:\n{}", report);
        let witness = report.get("R.1.4").unwrap().witness.as_deref().unwrap();
        assert!(witness.contains("M5_Linear"), "witness: {}", witness);
        assert!(witness.contains("q1=0"), "witness: {}", witness);
        assert!(witness.contains("q2=1"), "witness: {}", witness);
    }

    #[test]
    fn carrier_free_drift_fails_exactly_the_taxis_rule() {
        let mut def = preset(PresetModel::Model2, Course::Healing, &BTreeMap::new()).unwrap();
        let q2 = def
            .components
            .iter_mut()
            .find(|c| c.name == "q2")
            .unwrap();
        for tx in q2.taxis.iter_mut() {
            if let TaxisTerm::Chemotaxis { d, attractant } = tx {
                *tx = TaxisTerm::ChemotaxisNoCarrier {
                    d: *d,
                    attractant: attractant.clone(),
                };
            }
        }
        let report = check(&def);
        let failed: Vec<&str> = report.failures().iter().map(|r| r.id).collect();
        assert_eq!(failed, ["R.2.7"], "report:\n{}", report);
        let witness = report.get("R.2.7").unwrap().witness.as_deref().unwrap();
        assert!(witness.contains("q2"), "witness: {}", witness);
    }

    #[test]
    fn capacity_free_growth_fails_the_capacity_anchor() {
        let mut def = preset(PresetModel::Model3, Course::Healing, &BTreeMap::new()).unwrap();
        def.components[0].reaction[0] =
            MechanismTerm::local(TermKind::M1Unbounded { rate: 1.0 }).unwrap();
        let report = check(&def);
        let failed: Vec<&str> = report.failures().iter().map(|r| r.id).collect();
        assert!(failed.contains(&"R.1.3"), "failed: {:?}", failed);
        // Value-based rules stay satisfied: pure exponential growth is
        // nonnegative and anchored at zero.
        assert_eq!(report.get("R.1.1").unwrap().verdict, Verdict::Pass);
        assert_eq!(report.get("R.1.2").unwrap().verdict, Verdict::Pass);
    }

    #[test]
    fn saturation_rule_reports_the_level_it_found() {
        let def = preset(PresetModel::Model2, Course::Healing, &BTreeMap::new()).unwrap();
        let report = check(&def);
        let r25 = report.get("R.2.5").unwrap();
        assert_eq!(r25.verdict, Verdict::Pass);
        let w = r25.witness.as_deref().unwrap();
        assert!(w.contains("q2 saturates beyond"), "witness: {}", w);
        assert!(r25.samples_used > 0);

        // The nonlocal recruitment has no cell-count damping of its own,
        // so the level must come from the decay term and sit far above
        // the pathogen capacity.
        let level: f64 = w.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(level > 1e3, "level {}", level);
    }

    #[test]
    fn saturation_fails_without_any_decay() {
        let mut ov = BTreeMap::new();
        ov.insert("a6".to_string(), 0.0);
        let def = preset(PresetModel::Model3, Course::Healing, &ov).unwrap();
        let report = check(&def);
        let failed: Vec<&str> = report.failures().iter().map(|r| r.id).collect();
        assert_eq!(failed, ["R.2.5"], "report:\n{}", report);
    }

    #[test]
    fn minimal_pathogen_model_passes_vacuously() {
        let mut ov = BTreeMap::new();
        ov.insert("a5".to_string(), 0.0);
        ov.insert("a2".to_string(), 0.0);
        ov.insert("a6".to_string(), 0.0);
        ov.insert("d2".to_string(), 0.0);
        let def = preset(PresetModel::Model3, Course::Healing, &ov).unwrap();
        let report = check(&def);
        assert!(report.all_passed(), "report:\n{}", report);
        assert_eq!(report.get("R.1.4").unwrap().samples_used, 0);
        // q2 still exists (with no terms), so the immune rules stay
        // applicable and saturate trivially.
        assert_eq!(report.get("R.2.5").unwrap().verdict, Verdict::Pass);
    }

    #[test]
    fn reports_are_deterministic() {
        let def = preset(PresetModel::Model1, Course::Chronic, &BTreeMap::new()).unwrap();
        let a = check(&def);
        let b = check(&def);
        assert_eq!(a, b);
    }

    #[test]
    fn report_text_lists_all_rules_and_a_summary() {
        let def = preset(PresetModel::Model2, Course::Healing, &BTreeMap::new()).unwrap();
        let text = check(&def).to_string();
        for r in RULES.iter() {
            assert!(text.contains(r.id), "missing {}", r.id);
        }
        assert!(text.contains("result: PASS"));
        assert!(text.contains("model: model2-healing"));
    }
}
