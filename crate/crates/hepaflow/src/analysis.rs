//! Trajectory classification and the spectral decay certificate.
//!
//! Classification reads a finished trajectory and sorts the outcome
//! into healing (the pathogen is essentially gone), chronic (the
//! pathogen settled into a persistent, spatially structured profile),
//! or undetermined. The thresholds are explicit, configurable, and
//! echoed in the report so a classification is never an opaque yes/no.
//!
//! The decay certificate is a sufficient condition for spatial
//! perturbations to flatten out: comparing the slowest diffusive decay
//! rate (the first nonconstant mode of the domain, scaled by the
//! weakest diffusion among the components) against the strongest
//! reaction coupling the model can muster over its feasible region. A
//! positive margin certifies that inhomogeneity dies out; a negative
//! margin certifies nothing, which is exactly the regime where the
//! chronic profiles live. Drift terms fall outside the comparison, so
//! the certificate declares itself inapplicable when any are present.

use std::fmt;

use thiserror::Error;

use crate::grid::{Field, Grid};
use crate::mechanisms::{TermInputs, TermVar};
use crate::model::{ModelDefinition, ModelError, TaxisTerm};
use crate::requirements::{cap_of, saturation_level, SampleSpec};
use crate::sampling::HaltonSampler;
use crate::solver::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trajectory holds no states")]
    EmptyTrajectory,
    #[error("component '{0}' is not part of the trajectory")]
    UnknownComponent(String),
    #[error("state length {got} does not match {components} components on {nodes} nodes")]
    StateLength {
        got: usize,
        components: usize,
        nodes: usize,
    },
}

// ---------------------------------------------------------------------------
// Outcome classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Healing,
    Chronic,
    Undetermined,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Healing => "Healing",
            Outcome::Chronic => "Chronic",
            Outcome::Undetermined => "Undetermined",
        }
    }
}

/// Decision thresholds, all on the classified component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutcomeThresholds {
    /// Healing: final sup-norm below this.
    pub healing_linf: f64,
    /// Chronic: relative L1 drift across the tail below this.
    pub chronic_drift: f64,
    /// Chronic: final sup-norm at least this (protects the gap between
    /// "essentially zero" and "persistently present").
    pub chronic_floor: f64,
    /// Chronic: relative spread (max-min)/max of the final profile at
    /// least this, so flat steady states are not called structured.
    pub inhomogeneity_min: f64,
}

impl Default for OutcomeThresholds {
    fn default() -> OutcomeThresholds {
        OutcomeThresholds {
            healing_linf: 1e-3,
            chronic_drift: 1e-3,
            chronic_floor: 1e-2,
            inhomogeneity_min: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub component: String,
    pub outcome: Outcome,
    pub final_linf: f64,
    /// Largest relative L1 distance from the final state across the
    /// trailing fifth of the samples; absent with fewer than two samples.
    pub tail_drift: Option<f64>,
    pub inhomogeneity: f64,
    pub thresholds: OutcomeThresholds,
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "component: {}", self.component)?;
        writeln!(f, "outcome: {}", self.outcome.name())?;
        writeln!(f, "final_linf: {}", self.final_linf)?;
        match self.tail_drift {
            Some(d) => writeln!(f, "tail_drift: {}", d)?,
            None => writeln!(f, "tail_drift: n/a")?,
        }
        writeln!(f, "inhomogeneity: {}", self.inhomogeneity)?;
        write!(
            f,
            "thresholds: healing_linf={} chronic_drift={} chronic_floor={} inhomogeneity_min={}",
            self.thresholds.healing_linf,
            self.thresholds.chronic_drift,
            self.thresholds.chronic_floor,
            self.thresholds.inhomogeneity_min
        )
    }
}

/// Relative spread (max - min)/max of a field; zero for fields with no
/// positive part.
pub fn inhomogeneity_index(field: &Field) -> f64 {
    let max = field.max_value();
    if max <= 0.0 {
        0.0
    } else {
        (max - field.min_value()) / max
    }
}

fn block_linf(block: &[f64]) -> f64 {
    block.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Quadrature-weighted L1 norm of a nodal block.
fn block_l1(grid: Grid, block: &[f64]) -> f64 {
    let mut sum = 0.0;
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            sum += grid.weight(i, j) * block[grid.idx(i, j)].abs();
        }
    }
    sum
}

/// Classifies one component of a finished trajectory.
pub fn classify(
    traj: &Trajectory,
    grid: Grid,
    names: &[String],
    component: &str,
    thresholds: &OutcomeThresholds,
) -> Result<ClassificationReport, AnalysisError> {
    if traj.states.is_empty() {
        return Err(AnalysisError::EmptyTrajectory);
    }
    let nodes = grid.nodes();
    let slot = names
        .iter()
        .position(|n| n == component)
        .ok_or_else(|| AnalysisError::UnknownComponent(component.to_string()))?;
    for s in &traj.states {
        if s.len() != names.len() * nodes {
            return Err(AnalysisError::StateLength {
                got: s.len(),
                components: names.len(),
                nodes,
            });
        }
    }
    let block = |state: &[f64]| {
        let lo = slot * nodes;
        state[lo..lo + nodes].to_vec()
    };

    let last = block(traj.states.last().unwrap());
    let final_linf = block_linf(&last);
    let inhomogeneity = {
        let max = last.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let min = last.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if max <= 0.0 {
            0.0
        } else {
            (max - min) / max
        }
    };

    let tail_drift = if traj.states.len() >= 2 {
        let n_tail = (traj.states.len() / 5).max(2).min(traj.states.len());
        let denom = block_l1(grid, &last).max(f64::MIN_POSITIVE);
        let mut drift: f64 = 0.0;
        for s in &traj.states[traj.states.len() - n_tail..] {
            let b = block(s);
            let diff: Vec<f64> = b.iter().zip(&last).map(|(a, b)| a - b).collect();
            drift = drift.max(block_l1(grid, &diff) / denom);
        }
        Some(drift)
    } else {
        None
    };

    let outcome = if final_linf < thresholds.healing_linf {
        Outcome::Healing
    } else if tail_drift.is_some_and(|d| d < thresholds.chronic_drift)
        && final_linf >= thresholds.chronic_floor
        && inhomogeneity >= thresholds.inhomogeneity_min
    {
        Outcome::Chronic
    } else {
        Outcome::Undetermined
    };

    Ok(ClassificationReport {
        component: component.to_string(),
        outcome,
        final_linf,
        tail_drift,
        inhomogeneity,
        thresholds: *thresholds,
    })
}

// ---------------------------------------------------------------------------
// Spectral decay certificate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaReport {
    /// False when drift terms put the model outside the certificate's
    /// reach; the margin is then not computed.
    pub applicable: bool,
    /// First nonconstant diffusive mode of the unit domain.
    pub lambda: f64,
    /// Weakest total diffusion among the components.
    pub d_min: f64,
    /// Estimated strongest reaction coupling over the feasible region;
    /// reported even when the certificate is inapplicable.
    pub m_est: f64,
    /// lambda * d_min - m_est; positive certifies decay of inhomogeneity
    /// (only meaningful when applicable).
    pub sigma: f64,
    pub notes: Vec<String>,
    pub samples_used: usize,
}

impl fmt::Display for SigmaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "applicable: {}",
            if self.applicable { "yes" } else { "no" }
        )?;
        writeln!(f, "lambda: {}", self.lambda)?;
        writeln!(f, "d_min: {}", self.d_min)?;
        writeln!(f, "M_est: {}", self.m_est)?;
        writeln!(f, "sigma: {}", self.sigma)?;
        writeln!(
            f,
            "verdict: {}",
            if !self.applicable {
                "criterion does not cover drift terms"
            } else if self.sigma > 0.0 {
                "spatial perturbations decay; inhomogeneity is not sustained"
            } else {
                "no decay certificate; inhomogeneity may persist"
            }
        )?;
        write!(f, "samples: {}", self.samples_used)?;
        for n in &self.notes {
            write!(f, "\nnote: {}", n)?;
        }
        Ok(())
    }
}

/// Spectral norm of a small dense matrix via power iteration on the
/// normal matrix; exact enough for the handful of components a model
/// carries.
fn spectral_norm(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut w = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut norm = 0.0;
    for _ in 0..80 {
        // w = A v, u = A^T w
        for i in 0..n {
            w[i] = (0..n).map(|j| a[i][j] * v[j]).sum();
        }
        for j in 0..n {
            u[j] = (0..n).map(|i| a[i][j] * w[i]).sum();
        }
        let len = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len == 0.0 {
            return 0.0;
        }
        for j in 0..n {
            v[j] = u[j] / len;
        }
        norm = len.sqrt();
    }
    norm
}

/// Evaluates the decay certificate for a model on a grid. The sample
/// spec drives both the feasible-region truncation of unbounded
/// components and the search for the strongest coupling.
pub fn sigma_criterion(
    def: &ModelDefinition,
    grid: Grid,
    spec: &SampleSpec,
) -> Result<SigmaReport, ModelError> {
    def.validate()?;
    let lambda = std::f64::consts::PI.powi(2);
    let mut notes = Vec::new();

    let applicable = !def.components.iter().any(|c| {
        c.taxis.iter().any(|t| {
            matches!(
                t,
                TaxisTerm::Chemotaxis { .. } | TaxisTerm::ChemotaxisNoCarrier { .. }
            )
        })
    });

    let d_min = def
        .components
        .iter()
        .map(|c| {
            c.taxis
                .iter()
                .map(|t| match t {
                    TaxisTerm::Diffusion { d } => *d,
                    TaxisTerm::AnisoDiffusion { d, map } => d * map.min_eigenvalue(grid),
                    _ => 0.0,
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let d_min = if d_min.is_finite() { d_min } else { 0.0 };

    if !applicable {
        notes.push(
            "drift terms present; the coupling estimate is reported but certifies nothing"
                .to_string(),
        );
    }

    let needs_chi = def
        .components
        .iter()
        .flat_map(|c| &c.reaction)
        .any(|t| t.kind.uses_chi());
    let chi_max = if needs_chi {
        crate::grid::chi_theta(grid, &def.theta)?.max_value()
    } else {
        0.0
    };
    if needs_chi {
        notes.push(
            "nonlocal recruitment bounded pointwise by its portal maximum and total load"
                .to_string(),
        );
    }

    // Feasible box per component: a declared capacity, otherwise the
    // saturation level of its net reaction.
    let n = def.components.len();
    let mut samples_used = 0;
    let mut tops = Vec::with_capacity(n);
    for comp in &def.components {
        let top = match cap_of(comp) {
            Some(c) => c,
            None => match saturation_level(def, comp, chi_max, spec) {
                Ok((level, s)) => {
                    samples_used += s;
                    notes.push(format!("{} truncated at saturation level {}", comp.name, level));
                    level
                }
                Err((_, s)) => {
                    samples_used += s;
                    notes.push(format!(
                        "{} has no saturation level; truncated at its sample box",
                        comp.name
                    ));
                    10.0
                }
            },
        };
        tops.push(top);
    }

    let q1_idx = def
        .components
        .iter()
        .position(|c| c.name == "q1")
        .expect("validated models carry q1");
    let index_of = |name: &str| def.components.iter().position(|c| c.name == name);

    let bounds: Vec<(f64, f64)> = tops.iter().map(|t| (0.0, *t)).collect();
    let mut h = HaltonSampler::new(n, spec.seed);
    let mut point = vec![0.0; n];
    let mut jac = vec![vec![0.0; n]; n];
    let mut m_est: f64 = 0.0;
    for _ in 0..spec.budget {
        h.next_in_box(&bounds, &mut point);
        for row in jac.iter_mut() {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
        let virus = point[q1_idx];
        for (i, comp) in def.components.iter().enumerate() {
            for term in &comp.reaction {
                let partner_idx = term.partner.as_deref().and_then(index_of);
                let s = TermInputs {
                    self_value: point[i],
                    virus,
                    partner: partner_idx.map_or(0.0, |p| point[p]),
                    chi: chi_max,
                    // Pointwise surrogate: the total load behaves like
                    // the local value over the unit domain.
                    virus_integral: virus,
                };
                jac[i][i] += term.kind.derivative(&s, TermVar::SelfValue);
                jac[i][q1_idx] += term.kind.derivative(&s, TermVar::Virus);
                jac[i][q1_idx] += term.kind.derivative(&s, TermVar::VirusIntegral);
                if let Some(p) = partner_idx {
                    jac[i][p] += term.kind.derivative(&s, TermVar::Partner);
                }
            }
        }
        samples_used += 1;
        m_est = m_est.max(spectral_norm(&jac));
    }

    Ok(SigmaReport {
        applicable,
        lambda,
        d_min,
        m_est,
        sigma: lambda * d_min - m_est,
        notes,
        samples_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_theta, preset, ComponentSpec, Course, PresetModel};
    use crate::mechanisms::{MechanismTerm, TermKind};
    use crate::solver::{StepStats, Trajectory};
    use std::collections::BTreeMap;

    fn grid() -> Grid {
        Grid::unit(21).unwrap()
    }

    fn traj(_grid: Grid, blocks: Vec<Vec<f64>>) -> Trajectory {
        let times: Vec<f64> = (0..blocks.len()).map(|i| i as f64).collect();
        let final_state = blocks.last().unwrap().clone();
        Trajectory {
            final_time: *times.last().unwrap(),
            times,
            states: blocks,
            final_state,
            stats: StepStats::default(),
        }
    }

    fn names() -> Vec<String> {
        vec!["q1".to_string()]
    }

    #[test]
    fn vanishing_final_state_is_healing() {
        let g = grid();
        let hi = vec![1.0; g.nodes()];
        let lo = vec![1e-6; g.nodes()];
        let t = traj(g, vec![hi.clone(), hi, lo.clone(), lo.clone(), lo]);
        let r = classify(&t, g, &names(), "q1", &OutcomeThresholds::default()).unwrap();
        assert_eq!(r.outcome, Outcome::Healing);
        assert!(r.final_linf < 1e-3);
    }

    #[test]
    fn settled_structured_state_is_chronic() {
        let g = grid();
        let profile: Vec<f64> = {
            let f = Field::from_fn(g, |x, _| 1.0 + 0.5 * (std::f64::consts::PI * x).cos());
            f.values().to_vec()
        };
        let t = traj(g, vec![profile.clone(); 10]);
        let r = classify(&t, g, &names(), "q1", &OutcomeThresholds::default()).unwrap();
        assert_eq!(r.outcome, Outcome::Chronic);
        // (max - min)/max = (1.5 - 0.5)/1.5
        assert!((r.inhomogeneity - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.tail_drift, Some(0.0));
    }

    #[test]
    fn chronic_calls_ignore_early_transients() {
        let g = grid();
        let bump: Vec<f64> = Field::from_fn(g, |x, y| 2.0 + (x - y).abs())
            .values()
            .to_vec();
        let settled: Vec<f64> = Field::from_fn(g, |x, _| 1.0 + 0.5 * (std::f64::consts::PI * x).cos())
            .values()
            .to_vec();
        let mut blocks = vec![bump; 8];
        blocks.extend(vec![settled; 2]);
        let r = classify(&traj(g, blocks), g, &names(), "q1", &OutcomeThresholds::default())
            .unwrap();
        assert_eq!(r.outcome, Outcome::Chronic);
    }

    #[test]
    fn flat_persistent_state_is_undetermined() {
        let g = grid();
        let flat = vec![0.5; g.nodes()];
        let r = classify(
            &traj(g, vec![flat; 10]),
            g,
            &names(),
            "q1",
            &OutcomeThresholds::default(),
        )
        .unwrap();
        assert_eq!(r.outcome, Outcome::Undetermined);
        assert_eq!(r.inhomogeneity, 0.0);
    }

    #[test]
    fn still_moving_state_is_undetermined() {
        let g = grid();
        let a: Vec<f64> = Field::from_fn(g, |x, _| 1.0 + x).values().to_vec();
        let b: Vec<f64> = Field::from_fn(g, |x, _| 2.0 + x).values().to_vec();
        let blocks = vec![
            a.clone(),
            b.clone(),
            a.clone(),
            b.clone(),
            a.clone(),
            b.clone(),
            a.clone(),
            b.clone(),
            a,
            b,
        ];
        let r = classify(&traj(g, blocks), g, &names(), "q1", &OutcomeThresholds::default())
            .unwrap();
        assert_eq!(r.outcome, Outcome::Undetermined);
        assert!(r.tail_drift.unwrap() > 0.1);
    }

    #[test]
    fn classification_is_scale_free_for_chronic_profiles() {
        let g = grid();
        let profile: Vec<f64> = Field::from_fn(g, |x, _| 1.0 + 0.5 * (std::f64::consts::PI * x).cos())
            .values()
            .iter()
            .map(|v| v * 1000.0)
            .collect();
        let r = classify(
            &traj(g, vec![profile; 6]),
            g,
            &names(),
            "q1",
            &OutcomeThresholds::default(),
        )
        .unwrap();
        assert_eq!(r.outcome, Outcome::Chronic);
    }

    #[test]
    fn custom_thresholds_are_echoed_and_applied() {
        let g = grid();
        let flat = vec![0.5; g.nodes()];
        let thr = OutcomeThresholds {
            inhomogeneity_min: 0.0,
            ..OutcomeThresholds::default()
        };
        let r = classify(&traj(g, vec![flat; 6]), g, &names(), "q1", &thr).unwrap();
        // With the spread requirement disabled the flat state reads as
        // settled and present, hence chronic.
        assert_eq!(r.outcome, Outcome::Chronic);
        assert_eq!(r.thresholds, thr);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let g = grid();
        let flat = vec![0.5; g.nodes()];
        let t = traj(g, vec![flat.clone()]);
        assert_eq!(
            classify(&t, g, &names(), "q9", &OutcomeThresholds::default()),
            Err(AnalysisError::UnknownComponent("q9".to_string()))
        );
        let t2 = traj(g, vec![flat[..10].to_vec()]);
        assert!(matches!(
            classify(&t2, g, &names(), "q1", &OutcomeThresholds::default()),
            Err(AnalysisError::StateLength { .. })
        ));
    }

    #[test]
    fn index_oracle_for_a_half_cosine_profile() {
        let g = grid();
        let f = Field::from_fn(g, |x, _| 1.0 + 0.5 * (std::f64::consts::PI * x).cos());
        // Extrema 1.5 and 0.5 land exactly on nodes, so the spread is
        // (1.5 - 0.5)/1.5 to roundoff.
        assert!((inhomogeneity_index(&f) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(inhomogeneity_index(&Field::zeros(g)), 0.0);
    }

    #[test]
    fn pure_diffusion_has_a_clean_positive_margin() {
        let def = ModelDefinition {
            name: "diffusion-only".to_string(),
            components: vec![ComponentSpec {
                name: "q1".to_string(),
                reaction: vec![],
                taxis: vec![TaxisTerm::Diffusion { d: 0.5 }],
            }],
            theta: default_theta(),
        };
        let r = sigma_criterion(&def, grid(), &SampleSpec::default()).unwrap();
        assert!(r.applicable);
        assert_eq!(r.m_est, 0.0);
        let expected = 0.5 * std::f64::consts::PI.powi(2);
        assert!((r.sigma - expected).abs() < 1e-6);
    }

    #[test]
    fn chronic_reference_model_earns_no_certificate() {
        let def = preset(PresetModel::Model3, Course::Chronic, &BTreeMap::new()).unwrap();
        let r = sigma_criterion(&def, grid(), &SampleSpec::default()).unwrap();
        assert!(r.applicable);
        assert!(r.sigma < 0.0, "sigma: {}", r.sigma);
        assert!(
            r.notes.iter().any(|n| n.contains("nonlocal")),
            "notes: {:?}",
            r.notes
        );
    }

    #[test]
    fn drift_terms_disable_the_certificate() {
        let def = preset(PresetModel::Model1, Course::Healing, &BTreeMap::new()).unwrap();
        let r = sigma_criterion(&def, grid(), &SampleSpec::default()).unwrap();
        assert!(!r.applicable);
        // The coupling estimate is still reported; the flag alone says
        // it certifies nothing.
        assert!(r.m_est.is_finite() && r.m_est > 0.0);
        assert!(r.notes.iter().any(|n| n.contains("drift")), "{:?}", r.notes);
    }

    #[test]
    fn coupling_estimate_grows_with_the_sample_budget() {
        let def = ModelDefinition {
            name: "capped".to_string(),
            components: vec![
                ComponentSpec {
                    name: "q1".to_string(),
                    reaction: vec![MechanismTerm::local(TermKind::M1Logistic {
                        rate: 1.0,
                        capacity: 1.0,
                    })
                    .unwrap()],
                    taxis: vec![TaxisTerm::Diffusion { d: 0.3 }],
                },
                ComponentSpec {
                    name: "q2".to_string(),
                    reaction: vec![
                        MechanismTerm::local(TermKind::M2LocalBounded {
                            rate: 2.0,
                            capacity: 5.0,
                        })
                        .unwrap(),
                        MechanismTerm::local(TermKind::M6NaturalDecay { rate: 0.5 }).unwrap(),
                    ],
                    taxis: vec![TaxisTerm::Diffusion { d: 0.2 }],
                },
            ],
            theta: default_theta(),
        };
        let small = sigma_criterion(&def, grid(), &SampleSpec { budget: 200, seed: 7 }).unwrap();
        let large = sigma_criterion(&def, grid(), &SampleSpec { budget: 2000, seed: 7 }).unwrap();
        assert!(large.m_est >= small.m_est);
        assert!(large.sigma <= small.sigma);
    }

    #[test]
    fn sigma_report_text_names_its_parts() {
        let def = preset(PresetModel::Model3, Course::Healing, &BTreeMap::new()).unwrap();
        let text = sigma_criterion(&def, grid(), &SampleSpec::default())
            .unwrap()
            .to_string();
        for key in ["applicable:", "lambda:", "d_min:", "M_est:", "sigma:", "verdict:"] {
            assert!(text.contains(key), "missing {}", key);
        }
    }
}
