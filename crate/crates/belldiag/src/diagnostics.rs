//! Sub-grouping enumeration, predicted family values as functions of the
//! noise parameters, parameter fitting with bootstrap uncertainties, and
//! link-strength reports.
//!
//! Group states are evaluated in the physical register frame: the noisy
//! chain state is conjugated by the stored frame map before exclusion
//! measurements, so measurement axes refer to the physical qubits.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    build_network_state, dephasing_pair_placement, to_physical_frame, NoiseModel, ParamVector,
    Topology,
};
use crate::quantum::{
    build_plus_state, project_qubit, BlochObservable, DensityMatrix, Ket, Unitary, C64,
};
use crate::wwzb::{
    correlation_tensor, mabk_sign_function, maximize_settings, wwzb_lhs, Restriction,
    SearchConfig, SettingsTable, SignFunction,
};

/// One excluded qubit: measurement axis and the post-selected outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExclusionStep {
    pub qubit: usize,
    pub observable: BlochObservable,
    pub outcome: i8,
}

/// A retained qubit subset plus the measurement plan for its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    keep: Vec<usize>,
    exclusions: Vec<ExclusionStep>,
}

impl Grouping {
    pub fn new(n_qubits: usize, keep: Vec<usize>, exclusions: Vec<ExclusionStep>) -> Result<Self> {
        let mut keep = keep;
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(Error::Dimension("keep set must be nonempty".into()));
        }
        if keep.iter().any(|&q| q == 0 || q > n_qubits) {
            return Err(Error::Dimension(format!("keep set outside 1..={n_qubits}")));
        }
        let mut exclusions = exclusions;
        exclusions.sort_by_key(|e| e.qubit);
        let excluded: Vec<usize> = exclusions.iter().map(|e| e.qubit).collect();
        let complement: Vec<usize> = (1..=n_qubits).filter(|q| !keep.contains(q)).collect();
        if excluded != complement {
            return Err(Error::Dimension(format!(
                "exclusion plan covers {excluded:?}, expected exactly {complement:?}"
            )));
        }
        if exclusions.iter().any(|e| e.outcome != 1 && e.outcome != -1) {
            return Err(Error::Domain("exclusion outcomes must be +1 or -1".into()));
        }
        Ok(Self { keep, exclusions })
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn exclusions(&self) -> &[ExclusionStep] {
        &self.exclusions
    }

    /// Stable identifier like "1-2-4".
    pub fn id(&self) -> String {
        self.keep.iter().map(|q| q.to_string()).collect::<Vec<_>>().join("-")
    }
}

/// The canonical evaluation order: the full register, then triples, then
/// pairs, matching the reference table layout.
pub const STANDARD_KEEPS: [&[usize]; 11] = [
    &[1, 2, 3, 4],
    &[1, 2, 4],
    &[1, 2, 3],
    &[1, 3, 4],
    &[2, 3, 4],
    &[1, 4],
    &[1, 3],
    &[2, 3],
    &[2, 4],
    &[1, 2],
    &[3, 4],
];

/// Default exclusion axis per (keep set, excluded qubit); frozen from the
/// configuration search over measurement plans and restrictions (see the
/// acceptance suite): z where the z-cut reproduces the reference maxima
/// and x everywhere the x-cut is closer or the z-cut disconnects the
/// group.
fn default_axis(keep: &[usize], excluded: usize) -> BlochObservable {
    let z = BlochObservable::z();
    let x = BlochObservable::x();
    match (keep, excluded) {
        ([1, 2, 4], 3) => z,
        ([1, 2, 3], 4) => z,
        ([1, 3, 4], 2) => x,
        ([2, 3, 4], 1) => x,
        ([1, 2], 3) => z,
        ([1, 2], 4) => x,
        ([3, 4], _) => z,
        _ => x,
    }
}

/// The 11 groupings of the 4-chain with their default exclusion plans
/// (outcome +1 post-selected).
pub fn standard_groupings(top: &Topology) -> Result<Vec<Grouping>> {
    if top.n_qubits() != 4 || !top.is_ascending_chain() {
        return Err(Error::Domain(
            "default plans exist only for the 4-qubit chain; supply explicit plans".into(),
        ));
    }
    STANDARD_KEEPS
        .iter()
        .map(|keep| {
            let exclusions = (1..=4)
                .filter(|q| !keep.contains(q))
                .map(|q| ExclusionStep {
                    qubit: q,
                    observable: default_axis(keep, q),
                    outcome: 1,
                })
                .collect();
            Grouping::new(4, keep.to_vec(), exclusions)
        })
        .collect()
}

/// Measures away the excluded qubits (ascending order) and returns the
/// renormalized kept-subset state.
pub fn extract_group_state(state: &DensityMatrix, g: &Grouping) -> Result<DensityMatrix> {
    let mut rho = state.clone();
    let mut register: Vec<usize> = (1..=state.n_qubits()).collect();
    for step in &g.exclusions {
        let pos = register
            .iter()
            .position(|&q| q == step.qubit)
            .ok_or_else(|| Error::Dimension(format!("qubit {} not in register", step.qubit)))?;
        match project_qubit(&rho, pos + 1, &step.observable, step.outcome) {
            Ok((next, _)) => rho = next,
            Err(Error::ZeroProbability(msg)) => {
                return Err(Error::ZeroProbability(format!(
                    "grouping {}: {msg}",
                    g.id()
                )))
            }
            Err(e) => return Err(e),
        }
        register.remove(pos);
    }
    Ok(rho)
}

/// One observed family value for a grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub keep: Vec<usize>,
    pub value: f64,
    pub sigma: f64,
}

/// Observations file: label map plus one entry per grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub observations: Vec<Observation>,
}

impl MeasurementSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let set: MeasurementSet =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("measurements: {e}")))?;
        for obs in &set.observations {
            if !obs.value.is_finite() {
                return Err(Error::Domain(format!(
                    "observation {:?} has non-finite value",
                    obs.keep
                )));
            }
            if !(obs.sigma >= 0.0) || !obs.sigma.is_finite() {
                return Err(Error::Domain(format!(
                    "observation {:?} has invalid sigma {}",
                    obs.keep, obs.sigma
                )));
            }
        }
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measurement set serializes")
    }
}

/// Which settings the evaluation uses at noisy parameter points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SettingsPolicy {
    /// Settings fixed at the ideal-state optimum per grouping.
    #[default]
    FrozenIdeal,
    /// Settings re-optimized at every parameter point.
    Reoptimized,
}

impl SettingsPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SettingsPolicy::FrozenIdeal => "frozen",
            SettingsPolicy::Reoptimized => "reoptimized",
        }
    }
}

impl std::str::FromStr for SettingsPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" | "frozenideal" | "frozen-ideal" => Ok(SettingsPolicy::FrozenIdeal),
            "reoptimized" => Ok(SettingsPolicy::Reoptimized),
            other => Err(Error::Parse(format!("unknown settings policy {other:?}"))),
        }
    }
}

/// Fit configuration; defaults follow the frozen configuration-search
/// winner (full-sphere settings, frozen-ideal policy, 0.02 grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub model: NoiseModel,
    pub restriction: Restriction,
    pub settings_policy: SettingsPolicy,
    pub grid_resolution: f64,
    pub refine_tolerance: f64,
    pub seed: u64,
    pub sigma_weighted: bool,
    pub search: SearchConfig,
}

impl FitConfig {
    pub fn new(model: NoiseModel) -> Self {
        Self {
            model,
            restriction: Restriction::FullSphere,
            settings_policy: SettingsPolicy::FrozenIdeal,
            grid_resolution: 0.02,
            refine_tolerance: 1e-5,
            seed: 0,
            sigma_weighted: false,
            search: SearchConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.grid_resolution > 0.0 && self.grid_resolution <= 0.5) {
            return Err(Error::Domain(format!(
                "grid resolution {} outside (0, 0.5]",
                self.grid_resolution
            )));
        }
        if !(self.refine_tolerance > 0.0) {
            return Err(Error::Domain(format!(
                "refine tolerance {} must be positive",
                self.refine_tolerance
            )));
        }
        Ok(())
    }
}

/// Per-grouping comparison of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub grouping: String,
    pub observed: f64,
    pub predicted: f64,
    pub residual: f64,
}

/// Serializable snapshot of the configuration a fit ran under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: String,
    pub restriction: String,
    pub settings_policy: String,
    pub grid_resolution: f64,
    pub refine_tolerance: f64,
    pub seed: u64,
    pub sigma_weighted: bool,
    pub starts: usize,
    pub plans: Vec<PlanEcho>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEcho {
    pub grouping: String,
    pub exclusions: Vec<ExclusionEcho>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionEcho {
    pub qubit: usize,
    pub axis: [f64; 3],
    pub outcome: i8,
}

fn echo_config(config: &FitConfig, groupings: &[Grouping]) -> ConfigEcho {
    ConfigEcho {
        model: config.model.to_string(),
        restriction: config.restriction.name().to_string(),
        settings_policy: config.settings_policy.name().to_string(),
        grid_resolution: config.grid_resolution,
        refine_tolerance: config.refine_tolerance,
        seed: config.seed,
        sigma_weighted: config.sigma_weighted,
        starts: config.search.starts,
        plans: groupings
            .iter()
            .map(|g| PlanEcho {
                grouping: g.id(),
                exclusions: g
                    .exclusions()
                    .iter()
                    .map(|e| ExclusionEcho {
                        qubit: e.qubit,
                        axis: e.observable.axis(),
                        outcome: e.outcome,
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Outcome of a parameter fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: NoiseModel,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub uncertainties: Option<Vec<f64>>,
    pub objective: f64,
    pub residuals: Vec<ResidualRow>,
    pub link_strengths: BTreeMap<String, f64>,
    pub global_depolarizing: Option<f64>,
    pub config: ConfigEcho,
}

/// Maps fitted parameters onto edges: per-edge probabilities for gate
/// failure, pair products for dephasing, and the hybrid layout on the
/// 4-chain. A global depolarizing parameter is reported separately.
fn link_strengths(
    model: &NoiseModel,
    top: &Topology,
    params: &[f64],
) -> (BTreeMap<String, f64>, Option<f64>) {
    match model {
        NoiseModel::GateFailure => (
            top.edges()
                .iter()
                .zip(params)
                .map(|(&(i, j), &p)| (format!("{i}-{j}"), p))
                .collect(),
            None,
        ),
        NoiseModel::QubitDephasing => {
            let mut map = BTreeMap::new();
            for (members, _) in dephasing_pair_placement(top.n_qubits()) {
                if members.len() == 2 {
                    let key = format!("{}-{}", members[0], members[1]);
                    map.insert(key, members.iter().map(|&q| params[q - 1]).product());
                }
            }
            (map, None)
        }
        NoiseModel::Hybrid => (
            [("1-2", params[0]), ("2-3", params[1]), ("3-4", params[2])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            None,
        ),
        NoiseModel::WithGlobalDepolarizing(inner) => {
            let split = params.len() - 1;
            let (map, _) = link_strengths(inner, top, &params[..split]);
            (map, Some(params[split]))
        }
    }
}

// ---------------------------------------------------------------------
// Frozen ideal settings
// ---------------------------------------------------------------------

fn plans_signature(groupings: &[Grouping]) -> String {
    let mut sig = String::new();
    for g in groupings {
        sig.push_str(&g.id());
        for e in g.exclusions() {
            let [x, y, z] = e.observable.axis();
            sig.push_str(&format!("|{}:{x:.12e},{y:.12e},{z:.12e}:{}", e.qubit, e.outcome));
        }
        sig.push(';');
    }
    sig
}

fn settings_cache() -> &'static Mutex<HashMap<String, Arc<Vec<SettingsTable>>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<Vec<SettingsTable>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// The ideal 4-chain cluster in the physical register frame.
pub fn ideal_physical_state() -> Result<DensityMatrix> {
    let ideal = DensityMatrix::from_ket(&crate::network::chain_cluster_ket(4)?);
    to_physical_frame(&ideal)
}

/// Per-grouping settings maximizing the family value on the ideal
/// post-exclusion states; computed once per (plans, restriction, search)
/// and cached for reuse across fits.
pub fn frozen_ideal_settings(
    groupings: &[Grouping],
    restriction: Restriction,
    search: &SearchConfig,
) -> Result<Arc<Vec<SettingsTable>>> {
    let key = format!(
        "{}/{}/{}/{}/{:.3e}/{}",
        restriction.name(),
        search.seed,
        search.starts,
        search.max_sweeps,
        search.angle_tolerance,
        plans_signature(groupings)
    );
    if let Some(hit) = settings_cache().lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let ideal = ideal_physical_state()?;
    let tables = groupings
        .iter()
        .map(|g| {
            let sub = extract_group_state(&ideal, g)?;
            let sign = mabk_sign_function(sub.n_qubits())?;
            let (table, _) = maximize_settings(&sub, &sign, restriction, search)?;
            Ok(table)
        })
        .collect::<Result<Vec<_>>>()?;
    let arc = Arc::new(tables);
    settings_cache().lock().expect("cache lock").insert(key, arc.clone());
    Ok(arc)
}

// ---------------------------------------------------------------------
// Exact prediction path
// ---------------------------------------------------------------------

/// Exclusion branches with probability at or below this predict 0.
const DEAD_BRANCH_FLOOR: f64 = 1e-12;

fn predict_exact(
    params: &ParamVector,
    config: &FitConfig,
    groupings: &[Grouping],
    frozen: Option<&[SettingsTable]>,
) -> Result<Vec<f64>> {
    let top = Topology::chain4();
    let state = build_network_state(&top, &config.model, params)?;
    let phys = to_physical_frame(&state)?;
    groupings
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let sub = match extract_group_state(&phys, g) {
                Ok(sub) => sub,
                // Dead exclusion branch: the conditional value defaults
                // to 0, matching the fast tables.
                Err(Error::ZeroProbability(_)) => return Ok(0.0),
                Err(e) => return Err(e),
            };
            let sign = mabk_sign_function(sub.n_qubits())?;
            match config.settings_policy {
                SettingsPolicy::FrozenIdeal => {
                    let table = &frozen.expect("frozen settings supplied")[gi];
                    let tensor = correlation_tensor(&sub, table)?;
                    Ok(wwzb_lhs(&tensor, &sign)?.value)
                }
                SettingsPolicy::Reoptimized => {
                    let (_, v) =
                        maximize_settings(&sub, &sign, config.restriction, &config.search)?;
                    Ok(v.value)
                }
            }
        })
        .collect()
}

/// Predicted family values (canonical grouping order) at the given
/// parameters under the fit configuration.
pub fn predicted_wwzb(
    params: &ParamVector,
    config: &FitConfig,
    groupings: &[Grouping],
) -> Result<Vec<f64>> {
    config.validate()?;
    let frozen = match config.settings_policy {
        SettingsPolicy::FrozenIdeal => {
            Some(frozen_ideal_settings(groupings, config.restriction, &config.search)?)
        }
        SettingsPolicy::Reoptimized => None,
    };
    predict_exact(params, config, groupings, frozen.as_ref().map(|a| a.as_slice()))
}

// ---------------------------------------------------------------------
// Fast prediction tables
// ---------------------------------------------------------------------

/// One multiplicative weight factor in a mixture term.
#[derive(Debug, Clone, Copy)]
enum Factor {
    P(usize),
    OneMinusP(usize),
    PairP(usize, usize),
    OneMinusPairP(usize, usize),
    /// ((1 + 3p)/4)^pow
    DepolKeep(usize, u32),
    /// ((1 - p)/4)^pow
    DepolFlip(usize, u32),
}

impl Factor {
    fn eval(self, params: &[f64]) -> f64 {
        match self {
            Factor::P(i) => params[i],
            Factor::OneMinusP(i) => 1.0 - params[i],
            Factor::PairP(i, j) => params[i] * params[j],
            Factor::OneMinusPairP(i, j) => 1.0 - params[i] * params[j],
            Factor::DepolKeep(i, pow) => ((1.0 + 3.0 * params[i]) / 4.0).powi(pow as i32),
            Factor::DepolFlip(i, pow) => ((1.0 - params[i]) / 4.0).powi(pow as i32),
        }
    }
}

struct PatternRow {
    weight: Vec<Factor>,
    /// Signed family functional of the unnormalized post-exclusion state,
    /// one per grouping.
    l: Vec<f64>,
    /// Exclusion branch probability of the pattern, one per grouping.
    q: Vec<f64>,
}

/// Mixture table: the state is a parameter-weighted mixture of fixed pure
/// patterns, so every predicted value is |Σ w·L| / Σ w·Q.
struct FastTable {
    rows: Vec<PatternRow>,
    n_groupings: usize,
}

impl FastTable {
    fn predict(&self, params: &[f64], out: &mut Vec<f64>) {
        let weights: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.weight.iter().map(|f| f.eval(params)).product())
            .collect();
        out.clear();
        for g in 0..self.n_groupings {
            let mut num = 0.0;
            let mut den = 0.0;
            for (r, w) in self.rows.iter().zip(&weights) {
                num += w * r.l[g];
                den += w * r.q[g];
            }
            // Dead exclusion branch: the conditional value defaults to 0.
            out.push(if den > DEAD_BRANCH_FLOOR { num.abs() / den } else { 0.0 });
        }
    }
}

/// Pure mixture component in the canonical frame.
struct PurePattern {
    weight: Vec<Factor>,
    ket: Ket,
}

fn pauli_unitaries() -> [Unitary; 4] {
    let c = C64::new;
    let m = |data: [C64; 4]| {
        Unitary::new(nalgebra::DMatrix::from_row_slice(2, 2, &data)).expect("pauli is unitary")
    };
    [
        m([c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]),
        m([c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]),
        m([c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)]),
        m([c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]),
    ]
}

/// Enumerates the pure mixture components of a model without a global
/// depolarizing wrapper.
fn plain_patterns(model: &NoiseModel, top: &Topology) -> Result<Vec<PurePattern>> {
    let n = top.n_qubits();
    let cz = Unitary::cz();
    let z = &pauli_unitaries()[3];
    match model {
        NoiseModel::GateFailure => {
            let edges = top.edges();
            let mut out = Vec::with_capacity(1 << edges.len());
            for mask in 0..(1u32 << edges.len()) {
                let mut ket = build_plus_state(n)?;
                let mut weight = Vec::new();
                for (e, &(i, j)) in edges.iter().enumerate() {
                    if (mask >> e) & 1 == 1 {
                        ket = ket.apply_unitary(&cz, &[i, j])?;
                        weight.push(Factor::P(e));
                    } else {
                        weight.push(Factor::OneMinusP(e));
                    }
                }
                out.push(PurePattern { weight, ket });
            }
            Ok(out)
        }
        NoiseModel::QubitDephasing => {
            let mut base = build_plus_state(n)?;
            for &(i, j) in top.edges() {
                base = base.apply_unitary(&cz, &[i, j])?;
            }
            let placements = dephasing_pair_placement(n);
            let mut out = Vec::with_capacity(1 << placements.len());
            for mask in 0..(1u32 << placements.len()) {
                let mut ket = base.clone();
                let mut weight = Vec::new();
                for (pi, (members, target)) in placements.iter().enumerate() {
                    let flip = (mask >> pi) & 1 == 1;
                    let factor = match (members.as_slice(), flip) {
                        ([a, b], false) => Factor::PairP(a - 1, b - 1),
                        ([a, b], true) => Factor::OneMinusPairP(a - 1, b - 1),
                        ([a], false) => Factor::P(a - 1),
                        ([a], true) => Factor::OneMinusP(a - 1),
                        _ => unreachable!("placements have one or two members"),
                    };
                    weight.push(factor);
                    if flip {
                        ket = ket.apply_unitary(z, &[*target])?;
                    }
                }
                out.push(PurePattern { weight, ket });
            }
            Ok(out)
        }
        NoiseModel::Hybrid => {
            let mut base = build_plus_state(4)?;
            base = base.apply_unitary(&cz, &[1, 2])?;
            base = base.apply_unitary(&cz, &[3, 4])?;
            let mut out = Vec::with_capacity(8);
            for mask in 0..8u32 {
                let mut ket = base.clone();
                let mut weight = Vec::new();
                if mask & 1 == 1 {
                    ket = ket.apply_unitary(z, &[1])?;
                    weight.push(Factor::OneMinusP(0));
                } else {
                    weight.push(Factor::P(0));
                }
                if (mask >> 1) & 1 == 1 {
                    ket = ket.apply_unitary(z, &[4])?;
                    weight.push(Factor::OneMinusP(2));
                } else {
                    weight.push(Factor::P(2));
                }
                if (mask >> 2) & 1 == 1 {
                    ket = ket.apply_unitary(&cz, &[2, 3])?;
                    weight.push(Factor::P(1));
                } else {
                    weight.push(Factor::OneMinusP(1));
                }
                out.push(PurePattern { weight, ket });
            }
            Ok(out)
        }
        NoiseModel::WithGlobalDepolarizing(_) => {
            Err(Error::Domain("global wrapper handled separately".into()))
        }
    }
}

/// Unnormalized projection through the exclusion plan; returns the kept
/// amplitudes and the branch probability.
fn contract_exclusions(ket: &Ket, g: &Grouping) -> (Vec<C64>, f64) {
    let mut amps: Vec<C64> = ket.amplitudes().iter().copied().collect();
    let mut n = ket.n_qubits();
    let mut register: Vec<usize> = (1..=n).collect();
    for step in g.exclusions() {
        let pos = register.iter().position(|&q| q == step.qubit).expect("qubit present");
        let v = step.observable.eigenvector(step.outcome);
        let shift = n - 1 - pos;
        let kept = 1usize << (n - 1);
        let mut next = vec![C64::new(0.0, 0.0); kept];
        for (a, slot) in next.iter_mut().enumerate() {
            let high = (a >> shift) << (shift + 1);
            let low = a & ((1usize << shift) - 1);
            for (bit, vb) in v.iter().enumerate() {
                *slot += vb.conj() * amps[high | (bit << shift) | low];
            }
        }
        amps = next;
        n -= 1;
        register.remove(pos);
    }
    let q: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
    (amps, q)
}

/// Signed (un-absolute) family functional of an unnormalized pure state.
fn signed_functional(amps: &[C64], settings: &SettingsTable, sign: &SignFunction) -> f64 {
    let m = settings.n_qubits();
    let dim = 1usize << m;
    debug_assert_eq!(amps.len(), dim);
    // Correlator per setting choice.
    let mut corr = vec![0.0f64; dim];
    for (kbits, entry) in corr.iter_mut().enumerate() {
        let ops: Vec<_> = (0..m)
            .map(|j| {
                let k = ((kbits >> (m - 1 - j)) & 1) + 1;
                settings.observable(j + 1, k).expect("valid").operator()
            })
            .collect();
        let mut acc = C64::new(0.0, 0.0);
        for r in 0..dim {
            for col in 0..dim {
                let mut prod = amps[r].conj() * amps[col];
                for (j, op) in ops.iter().enumerate() {
                    let rb = (r >> (m - 1 - j)) & 1;
                    let cb = (col >> (m - 1 - j)) & 1;
                    prod *= op[(rb, cb)];
                }
                acc += prod;
            }
        }
        *entry = acc.re;
    }
    let mut total = 0.0;
    for (sbits, sv) in sign.values().iter().enumerate() {
        let mut inner = 0.0;
        for (kbits, e) in corr.iter().enumerate() {
            let parity = (sbits & kbits).count_ones() & 1;
            inner += if parity == 0 { *e } else { -*e };
        }
        total += sv * inner;
    }
    total
}

fn pattern_row(
    ket_canonical: &Ket,
    weight: Vec<Factor>,
    groupings: &[Grouping],
    frozen: &[SettingsTable],
    signs: &HashMap<usize, SignFunction>,
) -> Result<PatternRow> {
    let map = crate::network::canonical_frame_map()?;
    let mut ket = ket_canonical.clone();
    for (j, w) in map.iter().enumerate() {
        ket = ket.apply_unitary(&w.adjoint(), &[j + 1])?;
    }
    let mut l = Vec::with_capacity(groupings.len());
    let mut q = Vec::with_capacity(groupings.len());
    for (gi, g) in groupings.iter().enumerate() {
        let (amps, qg) = contract_exclusions(&ket, g);
        let sign = &signs[&g.keep().len()];
        l.push(signed_functional(&amps, &frozen[gi], sign));
        q.push(qg);
    }
    Ok(PatternRow { weight, l, q })
}

fn build_fast_table(
    config: &FitConfig,
    groupings: &[Grouping],
    frozen: &[SettingsTable],
) -> Result<FastTable> {
    let top = Topology::chain4();
    let mut signs = HashMap::new();
    for g in groupings {
        let m = g.keep().len();
        signs.entry(m).or_insert(mabk_sign_function(m)?);
    }
    let mut rows = Vec::new();
    match &config.model {
        NoiseModel::WithGlobalDepolarizing(inner) => {
            let inner_patterns = plain_patterns(inner, &top)?;
            let inner_arity = inner.arity(&top)?;
            let paulis = pauli_unitaries();
            let n = top.n_qubits();
            // Collapse the 4^n Pauli words by weight class per inner
            // pattern: equal-m words share the same parameter factor.
            for (io, pat) in inner_patterns.iter().enumerate() {
                let mut class_l = vec![vec![0.0; groupings.len()]; n + 1];
                let mut class_q = vec![vec![0.0; groupings.len()]; n + 1];
                for word in 0..(4usize.pow(n as u32)) {
                    let mut ket = pat.ket.clone();
                    let mut m = 0usize;
                    let mut rem = word;
                    for qubit in 1..=n {
                        let a = rem % 4;
                        rem /= 4;
                        if a != 0 {
                            m += 1;
                            ket = ket.apply_unitary(&paulis[a], &[qubit])?;
                        }
                    }
                    let row = pattern_row(&ket, Vec::new(), groupings, frozen, &signs)?;
                    for g in 0..groupings.len() {
                        class_l[m][g] += row.l[g];
                        class_q[m][g] += row.q[g];
                    }
                }
                for (m, (l, q)) in class_l.into_iter().zip(class_q).enumerate() {
                    let mut weight = inner_patterns[io].weight.clone();
                    weight.push(Factor::DepolKeep(inner_arity, (n - m) as u32));
                    weight.push(Factor::DepolFlip(inner_arity, m as u32));
                    rows.push(PatternRow { weight, l, q });
                }
            }
        }
        model => {
            for pat in plain_patterns(model, &top)? {
                rows.push(pattern_row(&pat.ket, pat.weight, groupings, frozen, &signs)?);
            }
        }
    }
    Ok(FastTable { rows, n_groupings: groupings.len() })
}

// ---------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------

fn match_observations(obs: &[Observation], groupings: &[Grouping]) -> Result<Vec<Observation>> {
    if obs.len() != groupings.len() {
        return Err(Error::Dimension(format!(
            "expected {} observations, got {}",
            groupings.len(),
            obs.len()
        )));
    }
    groupings
        .iter()
        .map(|g| {
            let mut matches = obs.iter().filter(|o| {
                let mut keep = o.keep.clone();
                keep.sort_unstable();
                keep == g.keep()
            });
            let found = matches
                .next()
                .ok_or_else(|| Error::Dimension(format!("no observation for grouping {}", g.id())))?
                .clone();
            if matches.next().is_some() {
                return Err(Error::Dimension(format!(
                    "duplicate observation for grouping {}",
                    g.id()
                )));
            }
            if !found.value.is_finite() {
                return Err(Error::Domain(format!(
                    "observation for grouping {} is not finite",
                    g.id()
                )));
            }
            if !(found.sigma >= 0.0) || !found.sigma.is_finite() {
                return Err(Error::Domain(format!(
                    "sigma for grouping {} is invalid",
                    g.id()
                )));
            }
            Ok(found)
        })
        .collect()
}

fn grid_points(step: f64) -> Vec<f64> {
    let count = (1.0 / step).ceil() as usize;
    let mut points: Vec<f64> = (0..count).map(|i| (i as f64) * step).collect();
    points.push(1.0);
    points.dedup();
    points
}

struct ObjectiveEval<'a> {
    table: Option<&'a FastTable>,
    config: &'a FitConfig,
    groupings: &'a [Grouping],
    frozen: Option<&'a [SettingsTable]>,
    observed: &'a [f64],
    weights: &'a [f64],
}

impl ObjectiveEval<'_> {
    fn predictions(&self, params: &[f64]) -> Result<Vec<f64>> {
        if let Some(table) = self.table {
            let mut out = Vec::new();
            table.predict(params, &mut out);
            Ok(out)
        } else {
            let clamped: Vec<f64> = params.iter().map(|p| p.clamp(0.0, 1.0)).collect();
            predict_exact(
                &ParamVector::new(clamped)?,
                self.config,
                self.groupings,
                self.frozen,
            )
        }
    }

    fn objective(&self, params: &[f64]) -> Result<f64> {
        let pred = self.predictions(params)?;
        Ok(pred
            .iter()
            .zip(self.observed)
            .zip(self.weights)
            .map(|((p, o), w)| (p - o).abs() * w)
            .sum())
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Downhill simplex on [0,1]^k; returns the best point seen anywhere
/// during the walk (so the result can only improve on its start).
fn nelder_mead(
    eval: &ObjectiveEval<'_>,
    start: &[f64],
    scale: f64,
    tolerance: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = start.len();
    let clamp = |p: &mut Vec<f64>| {
        for v in p.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k + 1);
    let mut first = start.to_vec();
    clamp(&mut first);
    simplex.push((first.clone(), eval.objective(&first)?));
    for d in 0..k {
        let mut p = first.clone();
        p[d] = if p[d] + scale <= 1.0 { p[d] + scale } else { p[d] - scale };
        clamp(&mut p);
        let f = eval.objective(&p)?;
        simplex.push((p, f));
    }
    let mut best_seen = simplex[0].clone();
    for entry in &simplex {
        if entry.1 < best_seen.1 || (entry.1 == best_seen.1 && lex_less(&entry.0, &best_seen.0)) {
            best_seen = entry.clone();
        }
    }
    let max_iters = 2000 * k.max(1);
    for _ in 0..max_iters {
        simplex.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
        });
        let spread = (0..k)
            .map(|d| {
                let lo = simplex.iter().map(|(p, _)| p[d]).fold(f64::INFINITY, f64::min);
                let hi = simplex.iter().map(|(p, _)| p[d]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0f64, f64::max);
        if spread < tolerance {
            return Ok(best_seen);
        }
        let worst = simplex[k].clone();
        let centroid: Vec<f64> = (0..k)
            .map(|d| simplex[..k].iter().map(|(p, _)| p[d]).sum::<f64>() / k as f64)
            .collect();
        let make = |alpha: f64| {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + alpha * (c - w))
                .collect();
            clamp(&mut p);
            p
        };
        let track = |cand: &(Vec<f64>, f64), best: &mut (Vec<f64>, f64)| {
            if cand.1 < best.1 || (cand.1 == best.1 && lex_less(&cand.0, &best.0)) {
                *best = cand.clone();
            }
        };
        let reflected = make(1.0);
        let fr = eval.objective(&reflected)?;
        let cand = (reflected, fr);
        track(&cand, &mut best_seen);
        if cand.1 < simplex[0].1 {
            let expanded = make(2.0);
            let fe = eval.objective(&expanded)?;
            let e = (expanded, fe);
            track(&e, &mut best_seen);
            simplex[k] = if e.1 < cand.1 { e } else { cand };
            continue;
        }
        if cand.1 < simplex[k - 1].1 {
            simplex[k] = cand;
            continue;
        }
        let contracted = make(-0.5);
        let fc = eval.objective(&contracted)?;
        let c = (contracted, fc);
        track(&c, &mut best_seen);
        if c.1 < worst.1 {
            simplex[k] = c;
            continue;
        }
        // Shrink toward the best vertex.
        let anchor = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let mut p: Vec<f64> = anchor
                .iter()
                .zip(&entry.0)
                .map(|(a, v)| a + 0.5 * (v - a))
                .collect();
            clamp(&mut p);
            let f = eval.objective(&p)?;
            *entry = (p, f);
            track(entry, &mut best_seen);
        }
    }
    Err(Error::NonConverged(format!(
        "simplex did not reach tolerance {tolerance}; best objective so far {:.6} at {:?}",
        best_seen.1, best_seen.0
    )))
}

/// Fits model parameters to the observations: exhaustive coarse grid over
/// [0,1]^k (ties to the lexicographically smallest point), then simplex
/// refinement. The objective is the plain L1 distance unless
/// `sigma_weighted` scales each term by 1/σ.
pub fn fit(obs: &[Observation], config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let top = Topology::chain4();
    let groupings = standard_groupings(&top)?;
    let matched = match_observations(obs, &groupings)?;
    let observed: Vec<f64> = matched.iter().map(|o| o.value).collect();
    let weights: Vec<f64> = if config.sigma_weighted {
        if matched.iter().any(|o| o.sigma == 0.0) {
            return Err(Error::Domain(
                "sigma-weighted objective needs strictly positive sigmas".into(),
            ));
        }
        matched.iter().map(|o| 1.0 / o.sigma).collect()
    } else {
        vec![1.0; matched.len()]
    };

    let arity = config.model.arity(&top)?;
    let frozen_arc = match config.settings_policy {
        SettingsPolicy::FrozenIdeal => {
            Some(frozen_ideal_settings(&groupings, config.restriction, &config.search)?)
        }
        SettingsPolicy::Reoptimized => None,
    };
    let frozen_slice = frozen_arc.as_ref().map(|a| a.as_slice());
    let table = match (&config.settings_policy, frozen_slice) {
        (SettingsPolicy::FrozenIdeal, Some(frozen)) => {
            Some(build_fast_table(config, &groupings, frozen)?)
        }
        _ => None,
    };
    let eval = ObjectiveEval {
        table: table.as_ref(),
        config,
        groupings: &groupings,
        frozen: frozen_slice,
        observed: &observed,
        weights: &weights,
    };

    let axis = grid_points(config.grid_resolution);
    let total: usize = axis.len().pow(arity as u32);
    let decode = |mut idx: usize| -> Vec<f64> {
        let mut p = vec![0.0; arity];
        for d in (0..arity).rev() {
            p[d] = axis[idx % axis.len()];
            idx /= axis.len();
        }
        p
    };
    let chunk = 4096usize;
    let chunk_best: Vec<(f64, Vec<f64>)> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| -> Result<(f64, Vec<f64>)> {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(total);
            let mut best: Option<(f64, Vec<f64>)> = None;
            for idx in lo..hi {
                let p = decode(idx);
                let f = eval.objective(&p)?;
                let better = match &best {
                    None => true,
                    Some((bf, bp)) => f < *bf || (f == *bf && lex_less(&p, bp)),
                };
                if better {
                    best = Some((f, p));
                }
            }
            Ok(best.expect("chunks are nonempty"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid_best = chunk_best[0].clone();
    for cand in &chunk_best[1..] {
        if cand.0 < grid_best.0 || (cand.0 == grid_best.0 && lex_less(&cand.1, &grid_best.1)) {
            grid_best = cand.clone();
        }
    }

    let (params, objective) = nelder_mead(
        &eval,
        &grid_best.1,
        0.5 * config.grid_resolution,
        config.refine_tolerance,
    )?;
    debug_assert!(objective <= grid_best.0 + 1e-12);

    let predictions = eval.predictions(&params)?;
    let residuals: Vec<ResidualRow> = groupings
        .iter()
        .zip(&predictions)
        .zip(&observed)
        .map(|((g, p), o)| ResidualRow {
            grouping: g.id(),
            observed: *o,
            predicted: *p,
            residual: p - o,
        })
        .collect();
    let (links, global) = link_strengths(&config.model, &top, &params);
    Ok(FitResult {
        model: config.model.clone(),
        param_names: config.model.param_names(&top)?,
        params,
        uncertainties: None,
        objective,
        residuals,
        link_strengths: links,
        global_depolarizing: global,
        config: echo_config(config, &groupings),
    })
}

/// Parametric bootstrap: resample each observation from N(value, sigma),
/// refit, and report the per-parameter sample standard deviation
/// (n−1 denominator). Returns the stds and whether the bootstrap was
/// degenerate (all sigmas zero).
pub fn estimate_uncertainty(
    obs: &[Observation],
    config: &FitConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<(Vec<f64>, bool)> {
    if n_resamples < 100 {
        return Err(Error::Domain(format!(
            "need at least 100 resamples, got {n_resamples}"
        )));
    }
    let top = Topology::chain4();
    let groupings = standard_groupings(&top)?;
    let matched = match_observations(obs, &groupings)?;
    let arity = config.model.arity(&top)?;
    if matched.iter().all(|o| o.sigma == 0.0) {
        return Ok((vec![0.0; arity], true));
    }
    // Draws are assigned to groupings in canonical order, so shuffling
    // the observation list cannot change the resampled values.
    let samples: Vec<Vec<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let perturbed: Vec<Observation> = matched
                .iter()
                .map(|o| {
                    let value = if o.sigma > 0.0 {
                        Normal::new(o.value, o.sigma).expect("sigma validated").sample(&mut rng)
                    } else {
                        o.value
                    };
                    Observation { keep: o.keep.clone(), value, sigma: o.sigma }
                })
                .collect();
            Ok(fit(&perturbed, config)?.params)
        })
        .collect::<Result<Vec<_>>>()?;
    let stds = (0..arity)
        .map(|d| {
            let mean = samples.iter().map(|s| s[d]).sum::<f64>() / n_resamples as f64;
            let var = samples.iter().map(|s| (s[d] - mean).powi(2)).sum::<f64>()
                / (n_resamples as f64 - 1.0);
            var.sqrt()
        })
        .collect();
    Ok((stds, false))
}

/// Recovery report of a round-trip on synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub true_params: Vec<f64>,
    pub recovered: Vec<f64>,
    pub errors: Vec<f64>,
    pub mean_abs_error: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Generates predictions at `true_params`, perturbs them with
/// N(0, noise_sigma), fits, and reports per-parameter recovery error.
pub fn synthetic_selftest(
    true_params: &ParamVector,
    noise_sigma: f64,
    seed: u64,
    config: &FitConfig,
) -> Result<SelftestReport> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Domain(format!("noise sigma {noise_sigma} invalid")));
    }
    let top = Topology::chain4();
    let groupings = standard_groupings(&top)?;
    let ideal = predicted_wwzb(true_params, config, &groupings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs: Vec<Observation> = groupings
        .iter()
        .zip(&ideal)
        .map(|(g, v)| {
            let value = if noise_sigma > 0.0 {
                Normal::new(*v, noise_sigma).expect("sigma checked").sample(&mut rng)
            } else {
                *v
            };
            Observation { keep: g.keep().to_vec(), value, sigma: noise_sigma }
        })
        .collect();
    let result = fit(&obs, config)?;
    let errors: Vec<f64> = result
        .params
        .iter()
        .zip(true_params.values())
        .map(|(r, t)| (r - t).abs())
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(SelftestReport {
        true_params: true_params.values().to_vec(),
        recovered: result.params,
        errors,
        mean_abs_error: mean,
        noise_sigma,
        seed,
    })
}

/// Human- and machine-readable diagnosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub uncertainties: Option<Vec<f64>>,
    pub objective: f64,
    pub residuals: Vec<ResidualRow>,
    pub link_strengths: BTreeMap<String, f64>,
    pub global_depolarizing: Option<f64>,
    pub weakest_link: Option<String>,
    pub config: ConfigEcho,
}

/// Labels link strengths with the topology's qubit names and flags the
/// weakest link (ties resolve to the lowest edge index).
pub fn render_report(fit: &FitResult, top: &Topology) -> Report {
    let labeled: BTreeMap<String, f64> = fit
        .link_strengths
        .iter()
        .map(|(k, v)| {
            let pretty = k
                .split('-')
                .map(|q| q.parse::<usize>().map(|qi| top.label(qi)).unwrap_or_else(|_| q.into()))
                .collect::<Vec<_>>()
                .join("-");
            (pretty, *v)
        })
        .collect();
    let weakest = top
        .edges()
        .iter()
        .filter_map(|&(i, j)| {
            let key = format!("{i}-{j}");
            fit.link_strengths.get(&key).map(|v| ((i, j), key, *v))
        })
        .fold(None::<((usize, usize), String, f64)>, |acc, cand| match acc {
            None => Some(cand),
            Some(best) => {
                if cand.2 < best.2 {
                    Some(cand)
                } else {
                    Some(best)
                }
            }
        })
        .map(|(_, key, _)| {
            key.split('-')
                .map(|q| q.parse::<usize>().map(|qi| top.label(qi)).unwrap_or_else(|_| q.into()))
                .collect::<Vec<_>>()
                .join("-")
        });
    Report {
        model: fit.model.to_string(),
        param_names: fit.param_names.clone(),
        params: fit.params.clone(),
        uncertainties: fit.uncertainties.clone(),
        objective: fit.objective,
        residuals: fit.residuals.clone(),
        link_strengths: labeled,
        global_depolarizing: fit.global_depolarizing,
        weakest_link: weakest,
        config: fit.config.clone(),
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table mirroring the reference layout.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model: {}\n", self.model));
        out.push_str("parameters:\n");
        for (i, name) in self.param_names.iter().enumerate() {
            match &self.uncertainties {
                Some(u) => out.push_str(&format!(
                    "  {name} = {:.4} +/- {:.4}\n",
                    self.params[i], u[i]
                )),
                None => out.push_str(&format!("  {name} = {:.4}\n", self.params[i])),
            }
        }
        out.push_str(&format!("objective (L1): {:.4}\n", self.objective));
        out.push_str("grouping        observed   predicted  residual\n");
        for r in &self.residuals {
            out.push_str(&format!(
                "{:<15} {:>8.3} {:>11.3} {:>9.3}\n",
                r.grouping, r.observed, r.predicted, r.residual
            ));
        }
        out.push_str("link strengths:\n");
        for (k, v) in &self.link_strengths {
            out.push_str(&format!("  {k}: {v:.4}\n"));
        }
        if let Some(g) = self.global_depolarizing {
            out.push_str(&format!("global depolarizing: {g:.4}\n"));
        }
        if let Some(w) = &self.weakest_link {
            out.push_str(&format!("weakest link: {w}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::chain_cluster_ket;
    use crate::wwzb::all_mabk_groupwise_maxima;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn quick_search() -> SearchConfig {
        SearchConfig { starts: 24, ..Default::default() }
    }

    fn quick_config(model: NoiseModel) -> FitConfig {
        FitConfig { search: quick_search(), ..FitConfig::new(model) }
    }

    #[test]
    fn standard_groupings_cover_the_table() {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        assert_eq!(groupings.len(), 11);
        assert_eq!(groupings[0].id(), "1-2-3-4");
        assert!(groupings[0].exclusions().is_empty());

        let g124 = groupings.iter().find(|g| g.id() == "1-2-4").unwrap();
        assert_eq!(g124.exclusions().len(), 1);
        assert_eq!(g124.exclusions()[0].qubit, 3);
        assert_eq!(g124.exclusions()[0].observable, BlochObservable::z());

        for g in &groupings {
            let excluded: Vec<usize> = g.exclusions().iter().map(|e| e.qubit).collect();
            let complement: Vec<usize> =
                (1..=4).filter(|q| !g.keep().contains(q)).collect();
            assert_eq!(excluded, complement);
        }

        assert!(standard_groupings(&Topology::chain(3).unwrap()).is_err());
    }

    #[test]
    fn grouping_validation() {
        assert!(Grouping::new(4, vec![], vec![]).is_err());
        assert!(Grouping::new(4, vec![1, 2, 3, 4], vec![]).is_ok());
        // Plan must cover the complement exactly.
        assert!(Grouping::new(4, vec![1, 2], vec![]).is_err());
        let bad_outcome = Grouping::new(
            4,
            vec![1, 2, 3],
            vec![ExclusionStep { qubit: 4, observable: BlochObservable::z(), outcome: 0 }],
        );
        assert!(bad_outcome.is_err());
    }

    #[test]
    fn extract_group_state_examples() {
        let canon = DensityMatrix::from_ket(&chain_cluster_ket(4).unwrap());
        let keep_all = Grouping::new(4, vec![1, 2, 3, 4], vec![]).unwrap();
        let same = extract_group_state(&canon, &keep_all).unwrap();
        assert_abs_diff_eq!(
            crate::quantum::fidelity(&same, &chain_cluster_ket(4).unwrap()).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        // Cutting an end qubit along z keeps the remainder pure.
        let end_cut = Grouping::new(
            4,
            vec![1, 2, 3],
            vec![ExclusionStep { qubit: 4, observable: BlochObservable::z(), outcome: 1 }],
        )
        .unwrap();
        let sub = extract_group_state(&canon, &end_cut).unwrap();
        assert_eq!(sub.n_qubits(), 3);
        assert_abs_diff_eq!(sub.purity(), 1.0, epsilon = 1e-9);

        // Cutting an interior qubit along z disconnects the chain; the
        // three-party maximum collapses to twice the two-party one.
        let interior_cut = Grouping::new(
            4,
            vec![1, 3, 4],
            vec![ExclusionStep { qubit: 2, observable: BlochObservable::z(), outcome: 1 }],
        )
        .unwrap();
        let sub = extract_group_state(&canon, &interior_cut).unwrap();
        let sign = mabk_sign_function(3).unwrap();
        let (_, v) =
            maximize_settings(&sub, &sign, Restriction::FullSphere, &quick_search()).unwrap();
        assert_abs_diff_eq!(v.value, 8.0 * std::f64::consts::SQRT_2, epsilon = 1e-3);
    }

    #[test]
    fn predicted_ideal_params_match_group_maxima() {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let config = quick_config(NoiseModel::GateFailure);
        let predicted = predicted_wwzb(
            &ParamVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
            &config,
            &groupings,
        )
        .unwrap();

        let ideal = ideal_physical_state().unwrap();
        let states: Vec<(String, DensityMatrix)> = groupings
            .iter()
            .map(|g| (g.id(), extract_group_state(&ideal, g).unwrap()))
            .collect();
        let maxima =
            all_mabk_groupwise_maxima(&states, config.restriction, &config.search).unwrap();
        for (p, m) in predicted.iter().zip(&maxima) {
            assert_abs_diff_eq!(*p, m.value.value, epsilon = 1e-6);
        }
        // The full register reaches the known quantum maximum.
        assert_abs_diff_eq!(predicted[0], 16.0 * std::f64::consts::SQRT_2, epsilon = 1e-4);
    }

    #[test]
    fn predicted_dead_network_respects_classical_bounds() {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let config = quick_config(NoiseModel::GateFailure);
        let predicted = predicted_wwzb(
            &ParamVector::new(vec![0.0, 0.0, 0.0]).unwrap(),
            &config,
            &groupings,
        )
        .unwrap();
        for (g, p) in groupings.iter().zip(&predicted) {
            let bound = (1u64 << g.keep().len()) as f64;
            assert!(*p <= bound + 1e-9, "grouping {} exceeds bound: {p}", g.id());
        }
    }

    #[test]
    fn dephasing_predictions_depend_only_on_products() {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let config = quick_config(NoiseModel::QubitDephasing);
        let a = predicted_wwzb(
            &ParamVector::new(vec![0.9, 0.8, 0.85, 0.6]).unwrap(),
            &config,
            &groupings,
        )
        .unwrap();
        let b = predicted_wwzb(
            &ParamVector::new(vec![0.72, 1.0, 0.51, 1.0]).unwrap(),
            &config,
            &groupings,
        )
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
        }
    }

    #[test]
    fn fast_tables_match_the_exact_path() {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let models = [
            NoiseModel::GateFailure,
            NoiseModel::QubitDephasing,
            NoiseModel::Hybrid,
            NoiseModel::WithGlobalDepolarizing(Box::new(NoiseModel::Hybrid)),
            NoiseModel::WithGlobalDepolarizing(Box::new(NoiseModel::GateFailure)),
        ];
        for model in models {
            let config = quick_config(model.clone());
            let arity = model.arity(&top).unwrap();
            let frozen =
                frozen_ideal_settings(&groupings, config.restriction, &config.search).unwrap();
            let table = build_fast_table(&config, &groupings, &frozen).unwrap();
            for _ in 0..4 {
                let params: Vec<f64> = (0..arity).map(|_| rng.gen_range(0.05..1.0)).collect();
                let mut fast = Vec::new();
                table.predict(&params, &mut fast);
                let exact = predict_exact(
                    &ParamVector::new(params.clone()).unwrap(),
                    &config,
                    &groupings,
                    Some(frozen.as_slice()),
                )
                .unwrap();
                for (f, e) in fast.iter().zip(&exact) {
                    assert_abs_diff_eq!(*f, *e, epsilon = 1e-12);
                }
            }
        }
    }

    fn synthetic_observations(
        params: &[f64],
        config: &FitConfig,
    ) -> Vec<Observation> {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let values = predicted_wwzb(
            &ParamVector::new(params.to_vec()).unwrap(),
            config,
            &groupings,
        )
        .unwrap();
        groupings
            .iter()
            .zip(&values)
            .map(|(g, v)| Observation { keep: g.keep().to_vec(), value: *v, sigma: 0.1 })
            .collect()
    }

    #[test]
    fn fit_recovers_synthetic_parameters() {
        let config = quick_config(NoiseModel::GateFailure);
        let truth = [0.9, 0.8, 0.7];
        let obs = synthetic_observations(&truth, &config);
        let result = fit(&obs, &config).unwrap();
        for (got, want) in result.params.iter().zip(&truth) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-3);
        }
        assert!(result.objective < 1e-3);
        assert_eq!(result.residuals.len(), 11);
        assert_eq!(result.param_names, vec!["p12", "p23", "p34"]);
    }

    #[test]
    fn fit_dominates_its_grid_trace() {
        let config = FitConfig {
            grid_resolution: 0.25,
            ..quick_config(NoiseModel::GateFailure)
        };
        let obs = synthetic_observations(&[0.85, 0.65, 0.95], &config);
        let result = fit(&obs, &config).unwrap();
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let observed: Vec<f64> = result.residuals.iter().map(|r| r.observed).collect();
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for b in [0.0, 0.25, 0.5, 0.75, 1.0] {
                for c in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    let pred = predicted_wwzb(
                        &ParamVector::new(vec![a, b, c]).unwrap(),
                        &config,
                        &groupings,
                    )
                    .unwrap();
                    let obj: f64 = pred
                        .iter()
                        .zip(&observed)
                        .map(|(p, o)| (p - o).abs())
                        .sum();
                    assert!(result.objective <= obj + 1e-9);
                }
            }
        }
    }

    #[test]
    fn fit_rejects_bad_observation_sets() {
        let config = quick_config(NoiseModel::GateFailure);
        let obs = synthetic_observations(&[0.9, 0.9, 0.9], &config);
        assert!(fit(&obs[..10], &config).is_err());

        let mut dupes = obs.clone();
        dupes[1] = dupes[2].clone();
        assert!(fit(&dupes, &config).is_err());

        let mut weighted = quick_config(NoiseModel::GateFailure);
        weighted.sigma_weighted = true;
        let mut zero_sigma = obs.clone();
        for o in &mut zero_sigma {
            o.sigma = 0.0;
        }
        assert!(fit(&zero_sigma, &weighted).is_err());
    }

    #[test]
    fn prediction_is_continuous_in_parameters() {
        let top = Topology::chain4();
        let groupings = standard_groupings(&top).unwrap();
        let config = quick_config(NoiseModel::GateFailure);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.9)).collect();
            let delta = 1e-4;
            let mut shifted = base.clone();
            shifted[rng.gen_range(0..3)] += delta;
            let a = predicted_wwzb(&ParamVector::new(base).unwrap(), &config, &groupings)
                .unwrap();
            let b = predicted_wwzb(&ParamVector::new(shifted).unwrap(), &config, &groupings)
                .unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 100.0 * delta);
            }
        }
    }

    #[test]
    fn uncertainty_estimates_behave() {
        let config = quick_config(NoiseModel::GateFailure);
        let obs = synthetic_observations(&[0.9, 0.85, 0.8], &config);

        let mut zero = obs.clone();
        for o in &mut zero {
            o.sigma = 0.0;
        }
        let (stds, degenerate) = estimate_uncertainty(&zero, &config, 100, 7).unwrap();
        assert!(degenerate);
        assert!(stds.iter().all(|s| *s == 0.0));

        assert!(estimate_uncertainty(&obs, &config, 50, 7).is_err());

        let (stds, degenerate) = estimate_uncertainty(&obs, &config, 120, 7).unwrap();
        assert!(!degenerate);
        assert!(stds.iter().all(|s| *s > 0.0));

        // Reordering observations must not move the estimates.
        let mut shuffled = obs.clone();
        shuffled.reverse();
        let (stds2, _) = estimate_uncertainty(&shuffled, &config, 120, 7).unwrap();
        for (a, b) in stds.iter().zip(&stds2) {
            assert_eq!(a, b);
        }

        // Doubling every sigma inflates the spread.
        let mut doubled = obs.clone();
        for o in &mut doubled {
            o.sigma *= 2.0;
        }
        let (stds3, _) = estimate_uncertainty(&doubled, &config, 120, 7).unwrap();
        assert!(stds3.iter().sum::<f64>() > stds.iter().sum::<f64>());
    }

    #[test]
    fn selftest_round_trips() {
        let config = quick_config(NoiseModel::GateFailure);
        let clean = synthetic_selftest(
            &ParamVector::new(vec![0.9, 0.8, 0.85]).unwrap(),
            0.0,
            1,
            &config,
        )
        .unwrap();
        assert!(clean.errors.iter().all(|e| *e < 1e-3), "errors {:?}", clean.errors);

        let boundary = synthetic_selftest(
            &ParamVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
            0.0,
            1,
            &config,
        )
        .unwrap();
        assert!(boundary.recovered.iter().all(|p| *p <= 1.0));
    }

    #[test]
    fn reports_label_links_and_flag_the_weakest() {
        let config = quick_config(NoiseModel::GateFailure);
        let obs = synthetic_observations(&[0.95, 0.9, 0.6], &config);
        let result = fit(&obs, &config).unwrap();
        let top = Topology::chain4();
        let report = render_report(&result, &top);
        assert_eq!(report.weakest_link.as_deref(), Some("k_A-k_B"));
        assert!(report.link_strengths.contains_key("pi_A-pi_B"));

        // Argmin agreement, exactly.
        let min_key = result
            .link_strengths
            .iter()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
            .clone();
        assert_eq!(min_key, "3-4");

        // Tie on equal strengths resolves to the lowest edge.
        let mut tied = result.clone();
        tied.link_strengths =
            [("1-2", 0.5), ("2-3", 0.5), ("3-4", 0.5)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        let tied_report = render_report(&tied, &top);
        assert_eq!(tied_report.weakest_link.as_deref(), Some("pi_A-pi_B"));

        // Lossless round trip of the serialized report.
        let json = report.to_json();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.to_text().contains("weakest link"));
    }

    #[test]
    fn measurement_sets_parse_and_validate() {
        let text = r#"{
            "labels": {"1": "pi_A", "2": "pi_B", "3": "k_A", "4": "k_B"},
            "observations": [
                {"keep": [1, 2, 3, 4], "value": 18.53, "sigma": 0.23},
                {"keep": [1, 2, 4], "value": 9.32, "sigma": 0.19}
            ]
        }"#;
        let set = MeasurementSet::from_json(text).unwrap();
        assert_eq!(set.observations.len(), 2);
        assert_eq!(set.observations[0].keep, vec![1, 2, 3, 4]);
        let round = MeasurementSet::from_json(&set.to_json()).unwrap();
        assert_eq!(round, set);

        assert!(MeasurementSet::from_json("{\"observations\": [{\"keep\": [1], \"value\": 1e999, \"sigma\": 0}]}").is_err());
        assert!(MeasurementSet::from_json("{\"observations\": [{\"keep\": [1], \"value\": 1.0, \"sigma\": -0.1}]}").is_err());
    }
}
