//! Model definitions, presets, and right-hand side assembly.
//!
//! A model is a set of named components on the unit square, each with a
//! list of catalog reaction terms and a list of transport terms, plus
//! the portal region Θ feeding the nonlocal recruitment kinds.
//! Component names fix their role: `q1` is the pathogen, `q2`, `Th` and
//! `Tc` are immune cell populations, `q3` is the cytokine signal. Term
//! families are only attachable to matching roles.
//!
//! [`assemble_rhs`] compiles a validated definition into a flat
//! right-hand side for the time integrator: one contiguous block of
//! node values per component, reaction terms and transport kernels
//! fused into one pass per component.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::grid::{
    self, chi_theta, AnisotropyMap, Field, Grid, GridError, Region,
};
use crate::mechanisms::{MechanismError, MechanismTerm, TermFamily, TermInputs, TermKind};
use crate::solver::OdeRhs;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model definition invalid:\n  {}", problems.join("\n  "))]
    Invalid { problems: Vec<String> },
    #[error("unknown parameter '{name}'; valid parameters: {valid}")]
    UnknownParameter { name: String, valid: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// What a component stands for, fixed by its canonical name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentRole {
    Pathogen,
    Immune,
    Cytokine,
}

/// Recognized component names and their roles.
pub fn role_of(name: &str) -> Option<ComponentRole> {
    match name {
        "q1" => Some(ComponentRole::Pathogen),
        "q2" | "Th" | "Tc" => Some(ComponentRole::Immune),
        "q3" => Some(ComponentRole::Cytokine),
        _ => None,
    }
}

/// Role a term family must be attached to.
fn family_role(family: TermFamily) -> ComponentRole {
    match family {
        TermFamily::PathogenGrowth | TermFamily::PathogenReduction => ComponentRole::Pathogen,
        TermFamily::ImmuneRecruitment | TermFamily::ImmuneDecay => ComponentRole::Immune,
        TermFamily::CytokineProduction | TermFamily::CytokineDecay => ComponentRole::Cytokine,
    }
}

/// One transport term of a component.
#[derive(Clone, Debug, PartialEq)]
pub enum TaxisTerm {
    /// `d * Δq`: isotropic diffusion.
    Diffusion { d: f64 },
    /// `∇·(d A(x) ∇q)`: diffusion along a node-dependent symmetric
    /// positive definite direction field.
    AnisoDiffusion { d: f64, map: AnisotropyMap },
    /// `-∇·(d q ∇attractant)`: drift of this component up the gradient
    /// of another one, carried by its own density.
    Chemotaxis { d: f64, attractant: String },
    /// `-∇·(d ∇attractant)`: the same drift with the carrier density
    /// dropped. Kept in the catalog as the canonical way to violate the
    /// carrier-dependence requirement on taxis.
    ChemotaxisNoCarrier { d: f64, attractant: String },
}

impl TaxisTerm {
    pub fn name(&self) -> &'static str {
        match self {
            TaxisTerm::Diffusion { .. } => "Diffusion",
            TaxisTerm::AnisoDiffusion { .. } => "AnisoDiffusion",
            TaxisTerm::Chemotaxis { .. } => "Chemotaxis",
            TaxisTerm::ChemotaxisNoCarrier { .. } => "ChemotaxisNoCarrier",
        }
    }

    pub fn coefficient(&self) -> f64 {
        match *self {
            TaxisTerm::Diffusion { d }
            | TaxisTerm::AnisoDiffusion { d, .. }
            | TaxisTerm::Chemotaxis { d, .. }
            | TaxisTerm::ChemotaxisNoCarrier { d, .. } => d,
        }
    }

    pub fn attractant(&self) -> Option<&str> {
        match self {
            TaxisTerm::Chemotaxis { attractant, .. }
            | TaxisTerm::ChemotaxisNoCarrier { attractant, .. } => Some(attractant),
            _ => None,
        }
    }
}

/// One named component with its reaction and transport terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSpec {
    pub name: String,
    pub reaction: Vec<MechanismTerm>,
    pub taxis: Vec<TaxisTerm>,
}

/// A complete model: components plus the portal region Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDefinition {
    pub name: String,
    pub components: Vec<ComponentSpec>,
    pub theta: Region,
}

/// Positive definiteness of every stored matrix, without a grid.
fn aniso_entries_ok(map: &AnisotropyMap) -> Result<(), String> {
    let check = |a11: f64, a12: f64, a22: f64, at: &str| {
        let det = a11 * a22 - a12 * a12;
        if a11 > 0.0 && det > 0.0 {
            Ok(())
        } else {
            Err(format!(
                "anisotropy matrix not positive definite {} (a11={}, det={})",
                at, a11, det
            ))
        }
    };
    match map {
        AnisotropyMap::Uniform { a11, a12, a22 } => check(*a11, *a12, *a22, "(uniform)"),
        AnisotropyMap::PerNode { a11, a12, a22, nx, ny } => {
            if a11.len() != nx * ny || a12.len() != nx * ny || a22.len() != nx * ny {
                return Err("anisotropy entry vectors do not match the declared node count".into());
            }
            for k in 0..a11.len() {
                check(a11[k], a12[k], a22[k], &format!("at node {}", k))?;
            }
            Ok(())
        }
    }
}

impl ModelDefinition {
    /// Structural validation. Collects every violation instead of
    /// stopping at the first, so a bad model file is fixable in one pass.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.components.is_empty() {
            problems.push("model has no components".to_string());
        }
        let mut seen: Vec<&str> = Vec::new();
        for comp in &self.components {
            if seen.contains(&comp.name.as_str()) {
                problems.push(format!("component '{}' declared twice", comp.name));
            }
            seen.push(&comp.name);
        }
        if !seen.contains(&"q1") && !self.components.is_empty() {
            problems.push("model needs the pathogen component 'q1'".to_string());
        }

        for comp in &self.components {
            let role = match role_of(&comp.name) {
                Some(r) => r,
                None => {
                    problems.push(format!(
                        "component '{}' is not one of q1, q2, Th, Tc, q3",
                        comp.name
                    ));
                    continue;
                }
            };
            for term in &comp.reaction {
                if let Err(e) = term.validate() {
                    problems.push(format!("component '{}': {}", comp.name, e));
                }
                let need = family_role(term.kind.family());
                if need != role {
                    problems.push(format!(
                        "component '{}': {} belongs on a {} component",
                        comp.name,
                        term.kind.name(),
                        match need {
                            ComponentRole::Pathogen => "pathogen",
                            ComponentRole::Immune => "immune",
                            ComponentRole::Cytokine => "cytokine",
                        }
                    ));
                }
                if let Some(p) = &term.partner {
                    match self.components.iter().find(|c| &c.name == p) {
                        None => problems.push(format!(
                            "component '{}': {} references missing component '{}'",
                            comp.name,
                            term.kind.name(),
                            p
                        )),
                        Some(_) => {
                            if role_of(p) != Some(ComponentRole::Immune) {
                                problems.push(format!(
                                    "component '{}': {} partner '{}' must be an immune component",
                                    comp.name,
                                    term.kind.name(),
                                    p
                                ));
                            }
                        }
                    }
                }
            }
            for tx in &comp.taxis {
                let d = tx.coefficient();
                if !(d.is_finite() && d >= 0.0) {
                    problems.push(format!(
                        "component '{}': {} coefficient must be finite and nonnegative, got {}",
                        comp.name,
                        tx.name(),
                        d
                    ));
                }
                if let TaxisTerm::AnisoDiffusion { map, .. } = tx {
                    if let Err(e) = aniso_entries_ok(map) {
                        problems.push(format!("component '{}': {}", comp.name, e));
                    }
                }
                if let Some(attr) = tx.attractant() {
                    if attr == comp.name {
                        problems.push(format!(
                            "component '{}': {} cannot use the component itself as attractant",
                            comp.name,
                            tx.name()
                        ));
                    } else if !self.components.iter().any(|c| c.name == attr) {
                        problems.push(format!(
                            "component '{}': {} references missing attractant '{}'",
                            comp.name,
                            tx.name(),
                            attr
                        ));
                    }
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid { problems })
        }
    }

    pub fn component(&self, name: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn component_names(&self) -> Vec<&str> {
        self.components.iter().map(|c| c.name.as_str()).collect()
    }
}

/// All component fields at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub t: f64,
    grid: Grid,
    names: Vec<String>,
    fields: Vec<Field>,
}

impl SystemState {
    pub fn zeros(t: f64, grid: Grid, names: Vec<String>) -> SystemState {
        let fields = names.iter().map(|_| Field::zeros(grid)).collect();
        SystemState {
            t,
            grid,
            names,
            fields,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn component(&self, name: &str) -> Option<&Field> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.fields[i])
    }

    pub fn component_mut(&mut self, name: &str) -> Option<&mut Field> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.fields[i])
    }

    /// Total unknowns: components times nodes.
    pub fn dim(&self) -> usize {
        self.names.len() * self.grid.nodes()
    }

    /// Concatenates the component blocks in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for f in &self.fields {
            out.extend_from_slice(f.values());
        }
        out
    }

    /// Rebuilds a state from a flat vector laid out as [`flatten`](Self::flatten).
    pub fn from_flat(t: f64, grid: Grid, names: &[String], flat: &[f64]) -> SystemState {
        let nodes = grid.nodes();
        assert_eq!(flat.len(), names.len() * nodes, "flat state length mismatch");
        let fields = (0..names.len())
            .map(|c| {
                Field::from_values(grid, flat[c * nodes..(c + 1) * nodes].to_vec()).unwrap()
            })
            .collect();
        SystemState {
            t,
            grid,
            names: names.to_vec(),
            fields,
        }
    }
}

/// Reference start state of the family: the liver fully infected, no
/// immune cells yet, a trace cytokine level.
pub fn initial_state(def: &ModelDefinition, grid: Grid) -> SystemState {
    let names: Vec<String> = def.components.iter().map(|c| c.name.clone()).collect();
    let mut st = SystemState::zeros(0.0, grid, names);
    for comp in &def.components {
        let v = match role_of(&comp.name) {
            Some(ComponentRole::Pathogen) => 1.0,
            Some(ComponentRole::Immune) | None => 0.0,
            Some(ComponentRole::Cytokine) => 0.1,
        };
        if v != 0.0 {
            let f = st.component_mut(&comp.name).unwrap();
            for x in f.values_mut() {
                *x = v;
            }
        }
    }
    st
}

/// A reaction term with its partner resolved to a component index.
#[derive(Clone, Debug)]
struct BoundTerm {
    kind: TermKind,
    partner: Option<usize>,
}

#[derive(Clone, Debug)]
enum BoundTaxis {
    Diffusion(f64),
    Aniso(f64, AnisotropyMap),
    Chemotaxis { d: f64, attractant: usize },
    ChemotaxisNoCarrier { d: f64, attractant: usize },
}

#[derive(Clone, Debug)]
struct BoundComponent {
    reaction: Vec<BoundTerm>,
    taxis: Vec<BoundTaxis>,
}

/// Compiled right-hand side of a model on a concrete grid.
///
/// Flat layout: component blocks in declaration order, each block in
/// grid node order. The pathogen integral and the portal indicator are
/// shared across components; everything else is evaluated nodewise.
pub struct Rhs {
    grid: Grid,
    names: Vec<String>,
    nodes: usize,
    virus: usize,
    chi: Option<Vec<f64>>,
    needs_integral: bool,
    comps: Vec<BoundComponent>,
}

/// Validates the definition, resolves references, and precomputes the
/// portal indicator on the grid.
pub fn assemble_rhs(def: &ModelDefinition, grid: Grid) -> Result<Rhs, ModelError> {
    def.validate()?;
    let names: Vec<String> = def.components.iter().map(|c| c.name.clone()).collect();
    let index = |name: &str| names.iter().position(|n| n == name).unwrap();
    let virus = index("q1");

    let mut needs_chi = false;
    let mut comps = Vec::with_capacity(def.components.len());
    for comp in &def.components {
        let mut reaction = Vec::with_capacity(comp.reaction.len());
        for term in &comp.reaction {
            needs_chi |= term.kind.uses_chi();
            reaction.push(BoundTerm {
                kind: term.kind.clone(),
                partner: term.partner.as_deref().map(&index),
            });
        }
        let mut taxis = Vec::with_capacity(comp.taxis.len());
        for tx in &comp.taxis {
            taxis.push(match tx {
                TaxisTerm::Diffusion { d } => BoundTaxis::Diffusion(*d),
                TaxisTerm::AnisoDiffusion { d, map } => {
                    map.validate(grid)?;
                    BoundTaxis::Aniso(*d, map.clone())
                }
                TaxisTerm::Chemotaxis { d, attractant } => BoundTaxis::Chemotaxis {
                    d: *d,
                    attractant: index(attractant),
                },
                TaxisTerm::ChemotaxisNoCarrier { d, attractant } => {
                    BoundTaxis::ChemotaxisNoCarrier {
                        d: *d,
                        attractant: index(attractant),
                    }
                }
            });
        }
        comps.push(BoundComponent { reaction, taxis });
    }

    let chi = if needs_chi {
        Some(chi_theta(grid, &def.theta)?.values().to_vec())
    } else {
        None
    };

    Ok(Rhs {
        grid,
        names,
        nodes: grid.nodes(),
        virus,
        chi,
        needs_integral: needs_chi,
        comps,
    })
}

impl Rhs {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn initial_flat(&self, def: &ModelDefinition) -> Vec<f64> {
        initial_state(def, self.grid).flatten()
    }

    pub fn state_from_flat(&self, t: f64, flat: &[f64]) -> SystemState {
        SystemState::from_flat(t, self.grid, &self.names, flat)
    }

    /// Trapezoid integral of the pathogen block of a flat state.
    fn virus_integral(&self, y: &[f64]) -> f64 {
        let g = &self.grid;
        let block = &y[self.virus * self.nodes..(self.virus + 1) * self.nodes];
        let mut sum = 0.0;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                sum += g.weight(i, j) * block[g.idx(i, j)];
            }
        }
        sum * g.dx() * g.dy()
    }
}

impl OdeRhs for Rhs {
    fn dim(&self) -> usize {
        self.names.len() * self.nodes
    }

    fn eval(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        let g = self.grid;
        let nodes = self.nodes;
        let nx = g.nx();
        let integral = if self.needs_integral {
            self.virus_integral(y)
        } else {
            0.0
        };
        let virus_block = &y[self.virus * nodes..(self.virus + 1) * nodes];

        for (c, (comp, out)) in self
            .comps
            .iter()
            .zip(dydt.chunks_mut(nodes))
            .enumerate()
        {
            let self_block = &y[c * nodes..(c + 1) * nodes];
            let chi = self.chi.as_deref();
            grid::fill_nodes(&g, out, |i, j| {
                let k = j * nx + i;
                let base = TermInputs {
                    self_value: self_block[k],
                    virus: virus_block[k],
                    partner: 0.0,
                    chi: chi.map_or(0.0, |v| v[k]),
                    virus_integral: integral,
                };
                let mut acc = 0.0;
                for term in &comp.reaction {
                    let mut s = base;
                    if let Some(p) = term.partner {
                        s.partner = y[p * nodes + k];
                    }
                    acc += term.kind.eval(&s);
                }
                for tx in &comp.taxis {
                    acc += match tx {
                        BoundTaxis::Diffusion(d) => d * grid::lap_node(&g, self_block, i, j),
                        BoundTaxis::Aniso(d, map) => {
                            grid::aniso_node(&g, self_block, map, *d, i, j)
                        }
                        BoundTaxis::Chemotaxis { d, attractant } => grid::chemotaxis_node(
                            &g,
                            self_block,
                            &y[attractant * nodes..(attractant + 1) * nodes],
                            *d,
                            i,
                            j,
                        ),
                        BoundTaxis::ChemotaxisNoCarrier { d, attractant } => {
                            -d * grid::lap_node(
                                &g,
                                &y[attractant * nodes..(attractant + 1) * nodes],
                                i,
                                j,
                            )
                        }
                    };
                }
                acc
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// The three reference models of the family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetModel {
    /// Four components: pathogen, helper and killer cells, cytokines.
    Model1,
    /// Three components: pathogen, one immune population, cytokines.
    Model2,
    /// Two components: pathogen and one immune population.
    Model3,
}

impl PresetModel {
    pub fn from_index(n: u8) -> Option<PresetModel> {
        match n {
            1 => Some(PresetModel::Model1),
            2 => Some(PresetModel::Model2),
            3 => Some(PresetModel::Model3),
            _ => None,
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            PresetModel::Model1 => 1,
            PresetModel::Model2 => 2,
            PresetModel::Model3 => 3,
        }
    }
}

/// Reference parameterizations: one set that clears the infection, one
/// that locks into a persistent inflamed state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Course {
    Healing,
    Chronic,
}

impl Course {
    pub fn name(&self) -> &'static str {
        match self {
            Course::Healing => "healing",
            Course::Chronic => "chronic",
        }
    }
}

/// Default portal region: a box in the lower right corner.
pub fn default_theta() -> Region {
    Region::new(0.8, 1.0, 0.0, 0.2).unwrap()
}

/// Builds a reference model. `overrides` replaces named preset
/// parameters; a rate or coefficient overridden to zero drops its term
/// entirely, so switching a mechanism off needs no file editing.
pub fn preset(
    model: PresetModel,
    course: Course,
    overrides: &BTreeMap<String, f64>,
) -> Result<ModelDefinition, ModelError> {
    let chronic = course == Course::Chronic;
    // (name, default) pairs; course picks the defaults that differ.
    let mut params: Vec<(&'static str, f64)> = match model {
        PresetModel::Model1 => vec![
            ("a1", 1.0),
            ("C1", 1.0),
            ("eps", 0.05),
            ("kappa", 0.01),
            ("d1", 0.6),
            ("d1_ecs", 0.0),
            ("a5", 2.0),
            ("a2h", 2.0),
            ("C_Th", 8.0),
            ("a2c", 2.0),
            ("C_Tc", 15.0),
            ("a6", 0.2),
            ("d_Th", 0.9),
            ("d_chem", if chronic { 8.0 } else { 1.0 }),
            ("a3", 0.8),
            ("a_nd", 0.6),
            ("d3", 0.5),
        ],
        PresetModel::Model2 => vec![
            ("a1", 1.0),
            ("C1", 1.0),
            ("eps", 0.05),
            ("kappa", 0.01),
            ("d1", 0.6),
            ("a5", if chronic { 0.5 } else { 1.0 }),
            ("a2", 2.0),
            ("a6", 0.2),
            ("d2", 0.9),
            ("d2_chem", 1.0),
            ("a3", 0.8),
            ("a_nd", 0.6),
            ("d3", 0.5),
        ],
        PresetModel::Model3 => vec![
            ("a1", 1.0),
            ("C1", 1.0),
            ("eps", 0.05),
            ("kappa", 0.01),
            ("d1", 0.6),
            ("a5", 0.5),
            ("a2", if chronic { 0.7 } else { 2.0 }),
            ("a6", 0.2),
            ("d2", 0.9),
        ],
    };

    for (key, value) in overrides {
        match params.iter_mut().find(|(n, _)| n == key) {
            Some(slot) => slot.1 = *value,
            None => {
                return Err(ModelError::UnknownParameter {
                    name: key.clone(),
                    valid: params
                        .iter()
                        .map(|(n, _)| *n)
                        .collect::<Vec<_>>()
                        .join(", "),
                })
            }
        }
    }
    let p = |name: &str| params.iter().find(|(n, _)| *n == name).unwrap().1;

    let allee = |terms: &mut Vec<MechanismTerm>| -> Result<(), ModelError> {
        if p("a1") > 0.0 {
            terms.push(MechanismTerm::local(TermKind::M1Allee {
                rate: p("a1"),
                capacity: p("C1"),
                threshold: p("eps"),
                shift: p("kappa"),
            })?);
        }
        Ok(())
    };
    let bilinear_kill = |terms: &mut Vec<MechanismTerm>, killer: &str| -> Result<(), ModelError> {
        if p("a5") > 0.0 {
            terms.push(MechanismTerm::with_partner(
                TermKind::M5Bilinear { rate: p("a5") },
                killer,
            )?);
        }
        Ok(())
    };
    let virus_decay = |terms: &mut Vec<MechanismTerm>| -> Result<(), ModelError> {
        if p("a6") > 0.0 {
            terms.push(MechanismTerm::local(TermKind::M6VirusDependent {
                rate: p("a6"),
                virus_capacity: p("C1"),
            })?);
        }
        Ok(())
    };
    let diffusion = |taxis: &mut Vec<TaxisTerm>, key: &str| {
        if p(key) > 0.0 {
            taxis.push(TaxisTerm::Diffusion { d: p(key) });
        }
    };

    let mut components = Vec::new();
    match model {
        PresetModel::Model1 => {
            let mut q1r = Vec::new();
            allee(&mut q1r)?;
            bilinear_kill(&mut q1r, "Tc")?;
            let mut q1t = Vec::new();
            diffusion(&mut q1t, "d1");
            if p("d1_ecs") > 0.0 {
                q1t.push(TaxisTerm::AnisoDiffusion {
                    d: p("d1_ecs"),
                    map: AnisotropyMap::identity(),
                });
            }
            components.push(ComponentSpec {
                name: "q1".into(),
                reaction: q1r,
                taxis: q1t,
            });

            let mut thr = Vec::new();
            if p("a2h") > 0.0 {
                thr.push(MechanismTerm::local(TermKind::M2GlobalSaturated {
                    rate: p("a2h"),
                    capacity: p("C_Th"),
                })?);
            }
            virus_decay(&mut thr)?;
            let mut tht = Vec::new();
            diffusion(&mut tht, "d_Th");
            components.push(ComponentSpec {
                name: "Th".into(),
                reaction: thr,
                taxis: tht,
            });

            let mut tcr = Vec::new();
            if p("a2c") > 0.0 {
                tcr.push(MechanismTerm::local(TermKind::M2GlobalSaturated {
                    rate: p("a2c"),
                    capacity: p("C_Tc"),
                })?);
            }
            virus_decay(&mut tcr)?;
            let mut tct = Vec::new();
            if p("d_chem") > 0.0 {
                tct.push(TaxisTerm::Chemotaxis {
                    d: p("d_chem"),
                    attractant: "q3".into(),
                });
            }
            components.push(ComponentSpec {
                name: "Tc".into(),
                reaction: tcr,
                taxis: tct,
            });

            let mut q3r = Vec::new();
            if p("a3") > 0.0 {
                q3r.push(MechanismTerm::with_partner(
                    TermKind::M3Product { rate: p("a3") },
                    "Th",
                )?);
            }
            if p("a_nd") > 0.0 {
                q3r.push(MechanismTerm::local(TermKind::NdLinear { rate: p("a_nd") })?);
            }
            let mut q3t = Vec::new();
            diffusion(&mut q3t, "d3");
            components.push(ComponentSpec {
                name: "q3".into(),
                reaction: q3r,
                taxis: q3t,
            });
        }
        PresetModel::Model2 => {
            let mut q1r = Vec::new();
            allee(&mut q1r)?;
            bilinear_kill(&mut q1r, "q2")?;
            let mut q1t = Vec::new();
            diffusion(&mut q1t, "d1");
            components.push(ComponentSpec {
                name: "q1".into(),
                reaction: q1r,
                taxis: q1t,
            });

            let mut q2r = Vec::new();
            if p("a2") > 0.0 {
                q2r.push(MechanismTerm::local(TermKind::M2Global { rate: p("a2") })?);
            }
            virus_decay(&mut q2r)?;
            let mut q2t = Vec::new();
            diffusion(&mut q2t, "d2");
            if p("d2_chem") > 0.0 {
                q2t.push(TaxisTerm::Chemotaxis {
                    d: p("d2_chem"),
                    attractant: "q3".into(),
                });
            }
            components.push(ComponentSpec {
                name: "q2".into(),
                reaction: q2r,
                taxis: q2t,
            });

            let mut q3r = Vec::new();
            if p("a3") > 0.0 {
                q3r.push(MechanismTerm::local(TermKind::M3VirusOnly { rate: p("a3") })?);
            }
            if p("a_nd") > 0.0 {
                q3r.push(MechanismTerm::local(TermKind::NdLinear { rate: p("a_nd") })?);
            }
            let mut q3t = Vec::new();
            diffusion(&mut q3t, "d3");
            components.push(ComponentSpec {
                name: "q3".into(),
                reaction: q3r,
                taxis: q3t,
            });
        }
        PresetModel::Model3 => {
            let mut q1r = Vec::new();
            allee(&mut q1r)?;
            bilinear_kill(&mut q1r, "q2")?;
            let mut q1t = Vec::new();
            diffusion(&mut q1t, "d1");
            components.push(ComponentSpec {
                name: "q1".into(),
                reaction: q1r,
                taxis: q1t,
            });

            let mut q2r = Vec::new();
            if p("a2") > 0.0 {
                q2r.push(MechanismTerm::local(TermKind::M2Global { rate: p("a2") })?);
            }
            virus_decay(&mut q2r)?;
            let mut q2t = Vec::new();
            diffusion(&mut q2t, "d2");
            components.push(ComponentSpec {
                name: "q2".into(),
                reaction: q2r,
                taxis: q2t,
            });
        }
    }

    let def = ModelDefinition {
        name: format!("model{}-{}", model.index(), course.name()),
        components,
        theta: default_theta(),
    };
    def.validate()?;
    Ok(def)
}
