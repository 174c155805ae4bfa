//! The mechanism catalog.
//!
//! Every reaction right-hand side in the model family is a sum of terms
//! drawn from a fixed catalog. A term is a pointwise rate law over a
//! small set of inputs: the value of the component it is attached to, the
//! pathogen load at the node, an optional partner component (the helper
//! for cytokine production, the killer for pathogen reduction), the
//! portal indicator `chi`, and the domain integral of the pathogen for
//! the nonlocal recruitment kinds.
//!
//! Families:
//! - `M1_*`  pathogen growth (unbounded, logistic, strong Allee)
//! - `M2_*`  immune cell recruitment, local at the infection site or
//!   nonlocal through the portal field
//! - `M3_*`  cytokine production
//! - `M5_*`  pathogen reduction by killer cells
//! - `M6_*`  immune cell decay
//! - `ND_*`  cytokine decay
//!
//! Each kind provides its value and analytic partial derivatives; the
//! feasibility checker and the stiffness estimate consume both.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MechanismError {
    #[error("unknown mechanism kind '{0}'")]
    UnknownKind(String),
    #[error("{kind}: parameter '{param}' must be {requirement}, got {value}")]
    BadParameter {
        kind: &'static str,
        param: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("{kind}: missing parameter '{param}'")]
    MissingParameter { kind: &'static str, param: &'static str },
    #[error("{kind}: unknown parameter '{param}'")]
    UnknownParameter { kind: &'static str, param: String },
    #[error("{kind} needs a '{role}' component reference")]
    MissingPartner { kind: &'static str, role: &'static str },
    #[error("{kind} takes no '{key}' reference")]
    UnexpectedPartner { kind: &'static str, key: String },
}

/// Pointwise inputs a term may read. Terms attached to the pathogen see
/// their own component twice (`self_value` and `virus` coincide there);
/// each kind reads exactly one of the two, so no contribution is counted
/// twice.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermInputs {
    /// Value of the component the term is attached to.
    pub self_value: f64,
    /// Pathogen load at the node.
    pub virus: f64,
    /// Value of the partner component (helper or killer), if the kind
    /// uses one.
    pub partner: f64,
    /// Portal indicator at the node.
    pub chi: f64,
    /// Domain integral of the pathogen component.
    pub virus_integral: f64,
}

/// Input coordinate for partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermVar {
    SelfValue,
    Virus,
    Partner,
    VirusIntegral,
}

/// Broad role of a term in its component's budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermFamily {
    PathogenGrowth,
    ImmuneRecruitment,
    CytokineProduction,
    PathogenReduction,
    ImmuneDecay,
    CytokineDecay,
}

/// One rate law from the catalog, with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum TermKind {
    /// `rate * q`
    M1Unbounded { rate: f64 },
    /// `rate * q * (capacity - q)`
    M1Logistic { rate: f64, capacity: f64 },
    /// `rate * q * (capacity - q) * (q - threshold) / (q + shift)`:
    /// logistic growth with die-out below the threshold.
    M1Allee {
        rate: f64,
        capacity: f64,
        threshold: f64,
        shift: f64,
    },
    /// `rate * virus`
    M2LocalUnbounded { rate: f64 },
    /// `rate * virus * (capacity - q)`
    M2LocalBounded { rate: f64, capacity: f64 },
    /// `rate * chi * integral(virus)`: recruitment through the portal
    /// field, driven by the total load.
    M2Global { rate: f64 },
    /// `rate * chi * (capacity - q) * integral(virus)`
    M2GlobalSaturated { rate: f64, capacity: f64 },
    /// `rate * virus`
    M3VirusOnly { rate: f64 },
    /// `rate * helper`
    M3HelperOnly { rate: f64 },
    /// `rate * virus * helper`
    M3Product { rate: f64 },
    /// `rate * helper * (capacity - q)`
    M3HelperBounded { rate: f64, capacity: f64 },
    /// `rate * virus * helper * (capacity - q)`
    M3ProductBounded { rate: f64, capacity: f64 },
    /// `-rate * killer`
    M5Linear { rate: f64 },
    /// `-rate * q * killer`
    M5Bilinear { rate: f64 },
    /// `-rate * q`
    M6NaturalDecay { rate: f64 },
    /// `-rate * q * (virus_capacity - virus)`: decay suppressed while
    /// the infection is near capacity.
    M6VirusDependent { rate: f64, virus_capacity: f64 },
    /// `-rate * q`
    NdLinear { rate: f64 },
    /// `-rate` while `q > 0`, zero otherwise; discontinuous at zero.
    NdConstant { rate: f64 },
}

use TermKind::*;

impl TermKind {
    /// Canonical catalog name, as used in model files and reports.
    pub fn name(&self) -> &'static str {
        match self {
            M1Unbounded { .. } => "M1_Unbounded",
            M1Logistic { .. } => "M1_Logistic",
            M1Allee { .. } => "M1_Allee",
            M2LocalUnbounded { .. } => "M2_LocalUnbounded",
            M2LocalBounded { .. } => "M2_LocalBounded",
            M2Global { .. } => "M2_Global",
            M2GlobalSaturated { .. } => "M2_GlobalSaturated",
            M3VirusOnly { .. } => "M3_VirusOnly",
            M3HelperOnly { .. } => "M3_HelperOnly",
            M3Product { .. } => "M3_Product",
            M3HelperBounded { .. } => "M3_HelperBounded",
            M3ProductBounded { .. } => "M3_ProductBounded",
            M5Linear { .. } => "M5_Linear",
            M5Bilinear { .. } => "M5_Bilinear",
            M6NaturalDecay { .. } => "M6_NaturalDecay",
            M6VirusDependent { .. } => "M6_VirusDependent",
            NdLinear { .. } => "ND_Linear",
            NdConstant { .. } => "ND_Constant",
        }
    }

    pub fn family(&self) -> TermFamily {
        match self {
            M1Unbounded { .. } | M1Logistic { .. } | M1Allee { .. } => TermFamily::PathogenGrowth,
            M2LocalUnbounded { .. }
            | M2LocalBounded { .. }
            | M2Global { .. }
            | M2GlobalSaturated { .. } => TermFamily::ImmuneRecruitment,
            M3VirusOnly { .. }
            | M3HelperOnly { .. }
            | M3Product { .. }
            | M3HelperBounded { .. }
            | M3ProductBounded { .. } => TermFamily::CytokineProduction,
            M5Linear { .. } | M5Bilinear { .. } => TermFamily::PathogenReduction,
            M6NaturalDecay { .. } | M6VirusDependent { .. } => TermFamily::ImmuneDecay,
            NdLinear { .. } | NdConstant { .. } => TermFamily::CytokineDecay,
        }
    }

    /// Role name of the partner reference, if the kind uses one.
    pub fn partner_role(&self) -> Option<&'static str> {
        match self {
            M3HelperOnly { .. }
            | M3Product { .. }
            | M3HelperBounded { .. }
            | M3ProductBounded { .. } => Some("helper"),
            M5Linear { .. } | M5Bilinear { .. } => Some("killer"),
            _ => None,
        }
    }

    /// True for kinds coupling the node to the whole domain.
    pub fn is_nonlocal(&self) -> bool {
        matches!(self, M2Global { .. } | M2GlobalSaturated { .. })
    }

    pub fn uses_chi(&self) -> bool {
        self.is_nonlocal()
    }

    pub fn rate(&self) -> f64 {
        match *self {
            M1Unbounded { rate }
            | M1Logistic { rate, .. }
            | M1Allee { rate, .. }
            | M2LocalUnbounded { rate }
            | M2LocalBounded { rate, .. }
            | M2Global { rate }
            | M2GlobalSaturated { rate, .. }
            | M3VirusOnly { rate }
            | M3HelperOnly { rate }
            | M3Product { rate }
            | M3HelperBounded { rate, .. }
            | M3ProductBounded { rate, .. }
            | M5Linear { rate }
            | M5Bilinear { rate }
            | M6NaturalDecay { rate }
            | M6VirusDependent { rate, .. }
            | NdLinear { rate }
            | NdConstant { rate } => rate,
        }
    }

    /// Saturation level of the attached component declared by the term,
    /// if the kind bounds its own component.
    pub fn capacity(&self) -> Option<f64> {
        match *self {
            M1Logistic { capacity, .. }
            | M1Allee { capacity, .. }
            | M2LocalBounded { capacity, .. }
            | M2GlobalSaturated { capacity, .. }
            | M3HelperBounded { capacity, .. }
            | M3ProductBounded { capacity, .. } => Some(capacity),
            _ => None,
        }
    }

    /// Term value at the given inputs.
    pub fn eval(&self, s: &TermInputs) -> f64 {
        let q = s.self_value;
        match *self {
            M1Unbounded { rate } => rate * q,
            M1Logistic { rate, capacity } => rate * q * (capacity - q),
            M1Allee {
                rate,
                capacity,
                threshold,
                shift,
            } => rate * q * (capacity - q) * (q - threshold) / (q + shift),
            M2LocalUnbounded { rate } => rate * s.virus,
            M2LocalBounded { rate, capacity } => rate * s.virus * (capacity - q),
            M2Global { rate } => rate * s.chi * s.virus_integral,
            M2GlobalSaturated { rate, capacity } => {
                rate * s.chi * (capacity - q) * s.virus_integral
            }
            M3VirusOnly { rate } => rate * s.virus,
            M3HelperOnly { rate } => rate * s.partner,
            M3Product { rate } => rate * s.virus * s.partner,
            M3HelperBounded { rate, capacity } => rate * s.partner * (capacity - q),
            M3ProductBounded { rate, capacity } => rate * s.virus * s.partner * (capacity - q),
            M5Linear { rate } => -rate * s.partner,
            M5Bilinear { rate } => -rate * q * s.partner,
            M6NaturalDecay { rate } => -rate * q,
            M6VirusDependent {
                rate,
                virus_capacity,
            } => -rate * q * (virus_capacity - s.virus),
            NdLinear { rate } => -rate * q,
            NdConstant { rate } => {
                if q > 0.0 {
                    -rate
                } else {
                    0.0
                }
            }
        }
    }

    /// Analytic partial derivative with respect to one input coordinate.
    /// `ND_Constant` is flat away from its jump, so every derivative is
    /// zero almost everywhere.
    pub fn derivative(&self, s: &TermInputs, var: TermVar) -> f64 {
        use TermVar::*;
        let q = s.self_value;
        match *self {
            M1Unbounded { rate } => match var {
                SelfValue => rate,
                _ => 0.0,
            },
            M1Logistic { rate, capacity } => match var {
                SelfValue => rate * (capacity - 2.0 * q),
                _ => 0.0,
            },
            M1Allee {
                rate,
                capacity,
                threshold,
                shift,
            } => match var {
                SelfValue => {
                    // f = rate * u / (q + shift) with
                    // u = q (capacity - q) (q - threshold).
                    let u = q * (capacity - q) * (q - threshold);
                    let du = 2.0 * capacity * q - capacity * threshold - 3.0 * q * q
                        + 2.0 * threshold * q;
                    let den = q + shift;
                    rate * (du * den - u) / (den * den)
                }
                _ => 0.0,
            },
            M2LocalUnbounded { rate } => match var {
                Virus => rate,
                _ => 0.0,
            },
            M2LocalBounded { rate, capacity } => match var {
                Virus => rate * (capacity - q),
                SelfValue => -rate * s.virus,
                _ => 0.0,
            },
            M2Global { rate } => match var {
                VirusIntegral => rate * s.chi,
                _ => 0.0,
            },
            M2GlobalSaturated { rate, capacity } => match var {
                VirusIntegral => rate * s.chi * (capacity - q),
                SelfValue => -rate * s.chi * s.virus_integral,
                _ => 0.0,
            },
            M3VirusOnly { rate } => match var {
                Virus => rate,
                _ => 0.0,
            },
            M3HelperOnly { rate } => match var {
                Partner => rate,
                _ => 0.0,
            },
            M3Product { rate } => match var {
                Virus => rate * s.partner,
                Partner => rate * s.virus,
                _ => 0.0,
            },
            M3HelperBounded { rate, capacity } => match var {
                Partner => rate * (capacity - q),
                SelfValue => -rate * s.partner,
                _ => 0.0,
            },
            M3ProductBounded { rate, capacity } => match var {
                Virus => rate * s.partner * (capacity - q),
                Partner => rate * s.virus * (capacity - q),
                SelfValue => -rate * s.virus * s.partner,
                _ => 0.0,
            },
            M5Linear { rate } => match var {
                Partner => -rate,
                _ => 0.0,
            },
            M5Bilinear { rate } => match var {
                SelfValue => -rate * s.partner,
                Partner => -rate * q,
                _ => 0.0,
            },
            M6NaturalDecay { rate } => match var {
                SelfValue => -rate,
                _ => 0.0,
            },
            M6VirusDependent {
                rate,
                virus_capacity,
            } => match var {
                SelfValue => -rate * (virus_capacity - s.virus),
                Virus => rate * q,
                _ => 0.0,
            },
            NdLinear { rate } => match var {
                SelfValue => -rate,
                _ => 0.0,
            },
            NdConstant { .. } => 0.0,
        }
    }

    /// Checks parameter ranges: rates nonnegative, capacities positive,
    /// the Allee threshold strictly below capacity, the Allee shift
    /// strictly positive.
    pub fn validate(&self) -> Result<(), MechanismError> {
        let kind = self.name();
        let nonneg = |param: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(MechanismError::BadParameter {
                    kind,
                    param,
                    requirement: "finite and nonnegative",
                    value: v,
                })
            }
        };
        let positive = |param: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(MechanismError::BadParameter {
                    kind,
                    param,
                    requirement: "finite and positive",
                    value: v,
                })
            }
        };
        nonneg("rate", self.rate())?;
        if let Some(c) = self.capacity() {
            positive("capacity", c)?;
        }
        match *self {
            M1Allee {
                capacity,
                threshold,
                shift,
                ..
            } => {
                nonneg("threshold", threshold)?;
                if threshold >= capacity {
                    return Err(MechanismError::BadParameter {
                        kind,
                        param: "threshold",
                        requirement: "strictly below capacity",
                        value: threshold,
                    });
                }
                positive("shift", shift)
            }
            M6VirusDependent { virus_capacity, .. } => positive("virus_capacity", virus_capacity),
            _ => Ok(()),
        }
    }

    /// Named parameters in canonical order, for export and round-trips.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            M1Unbounded { rate }
            | M2LocalUnbounded { rate }
            | M2Global { rate }
            | M3VirusOnly { rate }
            | M3HelperOnly { rate }
            | M3Product { rate }
            | M5Linear { rate }
            | M5Bilinear { rate }
            | M6NaturalDecay { rate }
            | NdLinear { rate }
            | NdConstant { rate } => vec![("rate", rate)],
            M1Logistic { rate, capacity }
            | M2LocalBounded { rate, capacity }
            | M2GlobalSaturated { rate, capacity }
            | M3HelperBounded { rate, capacity }
            | M3ProductBounded { rate, capacity } => {
                vec![("rate", rate), ("capacity", capacity)]
            }
            M1Allee {
                rate,
                capacity,
                threshold,
                shift,
            } => vec![
                ("rate", rate),
                ("capacity", capacity),
                ("threshold", threshold),
                ("shift", shift),
            ],
            M6VirusDependent {
                rate,
                virus_capacity,
            } => vec![("rate", rate), ("virus_capacity", virus_capacity)],
        }
    }

    /// Constructs a kind from its catalog name and a parameter map,
    /// rejecting unknown names, missing parameters, and stray ones.
    pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<TermKind, MechanismError> {
        let template = match name {
            "M1_Unbounded" => M1Unbounded { rate: 0.0 },
            "M1_Logistic" => M1Logistic {
                rate: 0.0,
                capacity: 1.0,
            },
            "M1_Allee" => M1Allee {
                rate: 0.0,
                capacity: 1.0,
                threshold: 0.0,
                shift: 1.0,
            },
            "M2_LocalUnbounded" => M2LocalUnbounded { rate: 0.0 },
            "M2_LocalBounded" => M2LocalBounded {
                rate: 0.0,
                capacity: 1.0,
            },
            "M2_Global" => M2Global { rate: 0.0 },
            "M2_GlobalSaturated" => M2GlobalSaturated {
                rate: 0.0,
                capacity: 1.0,
            },
            "M3_VirusOnly" => M3VirusOnly { rate: 0.0 },
            "M3_HelperOnly" => M3HelperOnly { rate: 0.0 },
            "M3_Product" => M3Product { rate: 0.0 },
            "M3_HelperBounded" => M3HelperBounded {
                rate: 0.0,
                capacity: 1.0,
            },
            "M3_ProductBounded" => M3ProductBounded {
                rate: 0.0,
                capacity: 1.0,
            },
            "M5_Linear" => M5Linear { rate: 0.0 },
            "M5_Bilinear" => M5Bilinear { rate: 0.0 },
            "M6_NaturalDecay" => M6NaturalDecay { rate: 0.0 },
            "M6_VirusDependent" => M6VirusDependent {
                rate: 0.0,
                virus_capacity: 1.0,
            },
            "ND_Linear" => NdLinear { rate: 0.0 },
            "ND_Constant" => NdConstant { rate: 0.0 },
            _ => return Err(MechanismError::UnknownKind(name.to_string())),
        };
        let kind_name = template.name();
        let expected: Vec<&'static str> = template.params().iter().map(|(n, _)| *n).collect();
        for key in params.keys() {
            if !expected.contains(&key.as_str()) {
                return Err(MechanismError::UnknownParameter {
                    kind: kind_name,
                    param: key.clone(),
                });
            }
        }
        let get = |param: &'static str| {
            params
                .get(param)
                .copied()
                .ok_or(MechanismError::MissingParameter {
                    kind: kind_name,
                    param,
                })
        };
        let built = match template {
            M1Unbounded { .. } => M1Unbounded { rate: get("rate")? },
            M1Logistic { .. } => M1Logistic {
                rate: get("rate")?,
                capacity: get("capacity")?,
            },
            M1Allee { .. } => M1Allee {
                rate: get("rate")?,
                capacity: get("capacity")?,
                threshold: get("threshold")?,
                shift: get("shift")?,
            },
            M2LocalUnbounded { .. } => M2LocalUnbounded { rate: get("rate")? },
            M2LocalBounded { .. } => M2LocalBounded {
                rate: get("rate")?,
                capacity: get("capacity")?,
            },
            M2Global { .. } => M2Global { rate: get("rate")? },
            M2GlobalSaturated { .. } => M2GlobalSaturated {
                rate: get("rate")?,
                capacity: get("capacity")?,
            },
            M3VirusOnly { .. } => M3VirusOnly { rate: get("rate")? },
            M3HelperOnly { .. } => M3HelperOnly { rate: get("rate")? },
            M3Product { .. } => M3Product { rate: get("rate")? },
            M3HelperBounded { .. } => M3HelperBounded {
                rate: get("rate")?,
                capacity: get("capacity")?,
            },
            M3ProductBounded { .. } => M3ProductBounded {
                rate: get("rate")?,
                capacity: get("capacity")?,
            },
            M5Linear { .. } => M5Linear { rate: get("rate")? },
            M5Bilinear { .. } => M5Bilinear { rate: get("rate")? },
            M6NaturalDecay { .. } => M6NaturalDecay { rate: get("rate")? },
            M6VirusDependent { .. } => M6VirusDependent {
                rate: get("rate")?,
                virus_capacity: get("virus_capacity")?,
            },
            NdLinear { .. } => NdLinear { rate: get("rate")? },
            NdConstant { .. } => NdConstant { rate: get("rate")? },
        };
        built.validate()?;
        Ok(built)
    }
}

/// A catalog term bound into a model: the kind plus the name of the
/// component supplying its partner input, where the kind has one.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismTerm {
    pub kind: TermKind,
    pub partner: Option<String>,
}

impl MechanismTerm {
    /// Term without a partner reference; fails if the kind needs one.
    pub fn local(kind: TermKind) -> Result<MechanismTerm, MechanismError> {
        let term = MechanismTerm {
            kind,
            partner: None,
        };
        term.validate()?;
        Ok(term)
    }

    /// Term reading its partner input from the named component.
    pub fn with_partner(kind: TermKind, partner: &str) -> Result<MechanismTerm, MechanismError> {
        let term = MechanismTerm {
            kind,
            partner: Some(partner.to_string()),
        };
        term.validate()?;
        Ok(term)
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        self.kind.validate()?;
        match (self.kind.partner_role(), &self.partner) {
            (Some(_), Some(_)) | (None, None) => Ok(()),
            (Some(role), None) => Err(MechanismError::MissingPartner {
                kind: self.kind.name(),
                role,
            }),
            (None, Some(p)) => Err(MechanismError::UnexpectedPartner {
                kind: self.kind.name(),
                key: p.clone(),
            }),
        }
    }

    /// Builds a bound term from catalog name, parameters, and component
    /// references as they appear in a model file.
    pub fn build(
        name: &str,
        params: &BTreeMap<String, f64>,
        refs: &BTreeMap<String, String>,
    ) -> Result<MechanismTerm, MechanismError> {
        let kind = TermKind::build(name, params)?;
        let partner = match kind.partner_role() {
            Some(role) => {
                for key in refs.keys() {
                    if key != role {
                        return Err(MechanismError::UnexpectedPartner {
                            kind: kind.name(),
                            key: key.clone(),
                        });
                    }
                }
                Some(
                    refs.get(role)
                        .cloned()
                        .ok_or(MechanismError::MissingPartner {
                            kind: kind.name(),
                            role,
                        })?,
                )
            }
            None => {
                if let Some(key) = refs.keys().next() {
                    return Err(MechanismError::UnexpectedPartner {
                        kind: kind.name(),
                        key: key.clone(),
                    });
                }
                None
            }
        };
        Ok(MechanismTerm { kind, partner })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// One representative of every catalog kind with generic parameters.
    fn catalog() -> Vec<TermKind> {
        vec![
            M1Unbounded { rate: 1.2 },
            M1Logistic {
                rate: 1.0,
                capacity: 1.0,
            },
            M1Allee {
                rate: 1.0,
                capacity: 1.0,
                threshold: 0.05,
                shift: 0.01,
            },
            M2LocalUnbounded { rate: 2.0 },
            M2LocalBounded {
                rate: 2.0,
                capacity: 8.0,
            },
            M2Global { rate: 2.0 },
            M2GlobalSaturated {
                rate: 2.0,
                capacity: 8.0,
            },
            M3VirusOnly { rate: 0.8 },
            M3HelperOnly { rate: 0.8 },
            M3Product { rate: 0.8 },
            M3HelperBounded {
                rate: 0.8,
                capacity: 3.0,
            },
            M3ProductBounded {
                rate: 0.8,
                capacity: 3.0,
            },
            M5Linear { rate: 2.0 },
            M5Bilinear { rate: 2.0 },
            M6NaturalDecay { rate: 0.2 },
            M6VirusDependent {
                rate: 0.2,
                virus_capacity: 1.0,
            },
            NdLinear { rate: 0.6 },
            NdConstant { rate: 0.6 },
        ]
    }

    #[test]
    fn catalog_entries_validate_and_name_uniquely(// names double as file syntax, so collisions would corrupt round-trips
    ) {
        let names: Vec<&str> = catalog()
            .iter()
            .map(|k| {
                k.validate().unwrap();
                k.name()
            })
            .collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 18);
    }

    #[test]
    fn hand_computed_values() {
        let s = TermInputs {
            self_value: 0.5,
            virus: 0.5,
            partner: 2.0,
            chi: 3.0,
            virus_integral: 0.4,
        };
        let allee = M1Allee {
            rate: 1.0,
            capacity: 1.0,
            threshold: 0.05,
            shift: 0.01,
        };
        // 0.5 * 0.5 * 0.45 / 0.51
        assert_abs_diff_eq!(allee.eval(&s), 0.1125 / 0.51, epsilon = 1e-15);

        let recruit = M2GlobalSaturated {
            rate: 2.0,
            capacity: 8.0,
        };
        // 2 * 3 * (8 - 0.5) * 0.4
        assert_abs_diff_eq!(recruit.eval(&s), 18.0, epsilon = 1e-12);

        let kill = M5Bilinear { rate: 2.0 };
        assert_abs_diff_eq!(kill.eval(&s), -2.0, epsilon = 1e-15);

        let decay = M6VirusDependent {
            rate: 0.2,
            virus_capacity: 1.0,
        };
        // -0.2 * 0.5 * (1 - 0.5)
        assert_abs_diff_eq!(decay.eval(&s), -0.05, epsilon = 1e-15);

        let produce = M3Product { rate: 0.8 };
        assert_abs_diff_eq!(produce.eval(&s), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn growth_kinds_vanish_at_zero_state() {
        let zero = TermInputs::default();
        for kind in catalog() {
            match kind.family() {
                TermFamily::PathogenGrowth | TermFamily::CytokineDecay => {
                    assert_eq!(kind.eval(&zero), 0.0, "{}", kind.name());
                }
                _ => {}
            }
        }
    }

    #[test]
    fn reduction_and_decay_kinds_are_nonpositive_on_nonneg_states() {
        let states = [
            TermInputs {
                self_value: 0.3,
                virus: 0.7,
                partner: 1.5,
                chi: 2.0,
                virus_integral: 0.5,
            },
            TermInputs {
                self_value: 5.0,
                virus: 0.0,
                partner: 0.0,
                chi: 0.0,
                virus_integral: 0.0,
            },
        ];
        for kind in catalog() {
            if matches!(
                kind.family(),
                TermFamily::PathogenReduction | TermFamily::ImmuneDecay | TermFamily::CytokineDecay
            ) {
                for s in &states {
                    assert!(kind.eval(s) <= 0.0, "{} at {:?}", kind.name(), s);
                }
            }
        }
    }

    #[test]
    fn constant_decay_switches_off_at_zero() {
        let kind = NdConstant { rate: 0.6 };
        let mut s = TermInputs::default();
        assert_eq!(kind.eval(&s), 0.0);
        s.self_value = 1e-9;
        assert_eq!(kind.eval(&s), -0.6);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(M1Unbounded { rate: -1.0 }.validate().is_err());
        assert!(M1Logistic {
            rate: 1.0,
            capacity: 0.0
        }
        .validate()
        .is_err());
        assert!(M1Allee {
            rate: 1.0,
            capacity: 1.0,
            threshold: 1.5,
            shift: 0.01
        }
        .validate()
        .is_err());
        assert!(M1Allee {
            rate: 1.0,
            capacity: 1.0,
            threshold: 0.05,
            shift: 0.0
        }
        .validate()
        .is_err());
        assert!(M6VirusDependent {
            rate: 0.2,
            virus_capacity: f64::NAN
        }
        .validate()
        .is_err());
    }

    #[test]
    fn partner_binding_is_enforced() {
        assert!(matches!(
            MechanismTerm::local(M5Bilinear { rate: 1.0 }),
            Err(MechanismError::MissingPartner { role: "killer", .. })
        ));
        assert!(matches!(
            MechanismTerm::with_partner(M1Unbounded { rate: 1.0 }, "q2"),
            Err(MechanismError::UnexpectedPartner { .. })
        ));
        let ok = MechanismTerm::with_partner(M3Product { rate: 0.8 }, "Th").unwrap();
        assert_eq!(ok.partner.as_deref(), Some("Th"));
    }

    #[test]
    fn build_round_trips_every_kind() {
        for kind in catalog() {
            let params: BTreeMap<String, f64> = kind
                .params()
                .into_iter()
                .map(|(n, v)| (n.to_string(), v))
                .collect();
            let rebuilt = TermKind::build(kind.name(), &params).unwrap();
            assert_eq!(rebuilt, kind);
        }
    }

    #[test]
    fn build_rejects_malformed_input() {
        let mut params = BTreeMap::new();
        params.insert("rate".to_string(), 1.0);
        assert!(matches!(
            TermKind::build("M9_Nonsense", &params),
            Err(MechanismError::UnknownKind(_))
        ));
        assert!(matches!(
            TermKind::build("M1_Logistic", &params),
            Err(MechanismError::MissingParameter {
                param: "capacity",
                ..
            })
        ));
        params.insert("slope".to_string(), 2.0);
        assert!(matches!(
            TermKind::build("M1_Unbounded", &params),
            Err(MechanismError::UnknownParameter { .. })
        ));
    }

    /// Central finite difference of `eval` along one input coordinate.
    fn fd_derivative(kind: &TermKind, s: &TermInputs, var: TermVar, h: f64) -> f64 {
        let mut lo = *s;
        let mut hi = *s;
        let bump = |t: &mut TermInputs, d: f64| match var {
            TermVar::SelfValue => t.self_value += d,
            TermVar::Virus => t.virus += d,
            TermVar::Partner => t.partner += d,
            TermVar::VirusIntegral => t.virus_integral += d,
        };
        bump(&mut lo, -h);
        bump(&mut hi, h);
        (kind.eval(&hi) - kind.eval(&lo)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn analytic_derivatives_match_finite_differences(
            self_value in 0.02f64..3.0,
            virus in 0.0f64..3.0,
            partner in 0.0f64..3.0,
            chi in 0.0f64..4.0,
            virus_integral in 0.0f64..3.0,
        ) {
            // self_value stays away from 0 so the ND_Constant jump is
            // never straddled; everywhere else the laws are smooth.
            let s = TermInputs { self_value, virus, partner, chi, virus_integral };
            let h = 1e-6;
            for kind in catalog() {
                for var in [TermVar::SelfValue, TermVar::Virus, TermVar::Partner, TermVar::VirusIntegral] {
                    let analytic = kind.derivative(&s, var);
                    let fd = fd_derivative(&kind, &s, var, h);
                    prop_assert!(
                        (analytic - fd).abs() <= 1e-5 * (1.0 + analytic.abs()),
                        "{} d/d{:?}: analytic {} vs fd {}",
                        kind.name(), var, analytic, fd
                    );
                }
            }
        }
    }
}
