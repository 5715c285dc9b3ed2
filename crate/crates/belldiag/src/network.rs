//! Network topologies, noise channels, and construction of ideal and
//! noise-corrupted linear cluster states, plus the local-frame bridge
//! between the physical photon-pair state and the abstract CZ chain.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::quantum::{
    apply_channel, apply_unitary, build_plus_state, DensityMatrix, Ket, KrausChannel, Unitary, C64,
};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Qubit network: labeled qubits and an ordered edge list (order is the
/// gate application order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n_qubits: usize,
    edges: Vec<(usize, usize)>,
    labels: BTreeMap<usize, String>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRaw {
    n: usize,
    edges: Vec<[usize; 2]>,
    labels: BTreeMap<String, String>,
}

impl Topology {
    pub fn new(
        n_qubits: usize,
        edges: Vec<(usize, usize)>,
        labels: BTreeMap<usize, String>,
    ) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 12 {
            return Err(Error::Dimension(format!("qubit count {n_qubits} outside 1..=12")));
        }
        let mut seen: Vec<(usize, usize)> = Vec::new();
        for &(i, j) in &edges {
            if i == 0 || j == 0 || i > n_qubits || j > n_qubits {
                return Err(Error::Dimension(format!(
                    "edge ({i},{j}) references qubits outside 1..={n_qubits}"
                )));
            }
            if i == j {
                return Err(Error::Dimension(format!("edge ({i},{j}) joins a qubit to itself")));
            }
            let key = (i.min(j), i.max(j));
            if seen.contains(&key) {
                return Err(Error::Dimension(format!("duplicate edge ({i},{j})")));
            }
            seen.push(key);
        }
        for &q in labels.keys() {
            if q == 0 || q > n_qubits {
                return Err(Error::Dimension(format!("label for qubit {q} outside 1..={n_qubits}")));
            }
        }
        Ok(Self { n_qubits, edges, labels })
    }

    /// Linear chain 1-2-…-n with edges in ascending order.
    pub fn chain(n_qubits: usize) -> Result<Self> {
        let edges = (1..n_qubits).map(|i| (i, i + 1)).collect();
        Self::new(n_qubits, edges, BTreeMap::new())
    }

    /// The four-qubit chain with the photon-pair register names.
    pub fn chain4() -> Self {
        let labels = [(1, "pi_A"), (2, "pi_B"), (3, "k_A"), (4, "k_B")]
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect();
        Self::new(4, vec![(1, 2), (2, 3), (3, 4)], labels).expect("static topology is valid")
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn label(&self, qubit: usize) -> String {
        self.labels.get(&qubit).cloned().unwrap_or_else(|| format!("q{qubit}"))
    }

    /// True for edges [(1,2),(2,3),…] in ascending order.
    pub fn is_ascending_chain(&self) -> bool {
        self.edges.len() + 1 == self.n_qubits
            && self.edges.iter().enumerate().all(|(i, &(a, b))| a == i + 1 && b == i + 2)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: TopologyRaw =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("topology: {e}")))?;
        raw.try_into()
    }

    pub fn to_json(&self) -> String {
        let raw = TopologyRaw {
            n: self.n_qubits,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            labels: self.labels.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("topology serializes")
    }
}

impl TryFrom<TopologyRaw> for Topology {
    type Error = Error;

    fn try_from(raw: TopologyRaw) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (k, v) in raw.labels {
            let q: usize = k
                .parse()
                .map_err(|_| Error::Parse(format!("label key {k:?} is not a qubit index")))?;
            labels.insert(q, v);
        }
        Topology::new(raw.n, raw.edges.into_iter().map(|[i, j]| (i, j)).collect(), labels)
    }
}

/// Noise model shape; parameter values travel separately in [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoiseModel {
    /// Each entangling gate fires with probability p_e (one per edge).
    GateFailure,
    /// Ideal gates; dephasing with per-qubit parameters whose disjoint
    /// neighboring pairs enter only through their products.
    QubitDephasing,
    /// 4-chain refinement: dephasing on the outer links, gate failure on
    /// the middle link; parameters (p_1, p_2, p_3).
    Hybrid,
    /// Wraps another model and appends one global depolarizing parameter.
    WithGlobalDepolarizing(Box<NoiseModel>),
}

impl NoiseModel {
    pub fn arity(&self, top: &Topology) -> Result<usize> {
        match self {
            NoiseModel::GateFailure => Ok(top.edges.len()),
            NoiseModel::QubitDephasing => Ok(top.n_qubits),
            NoiseModel::Hybrid => {
                require_chain4(top)?;
                Ok(3)
            }
            NoiseModel::WithGlobalDepolarizing(inner) => Ok(inner.arity(top)? + 1),
        }
    }

    pub fn param_names(&self, top: &Topology) -> Result<Vec<String>> {
        match self {
            NoiseModel::GateFailure => {
                Ok(top.edges.iter().map(|&(i, j)| format!("p{i}{j}")).collect())
            }
            NoiseModel::QubitDephasing => {
                Ok((1..=top.n_qubits).map(|j| format!("p{j}")).collect())
            }
            NoiseModel::Hybrid => {
                require_chain4(top)?;
                Ok(vec!["p1".into(), "p2".into(), "p3".into()])
            }
            NoiseModel::WithGlobalDepolarizing(inner) => {
                let mut names = inner.param_names(top)?;
                names.push("pg".into());
                Ok(names)
            }
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::GateFailure => write!(f, "gate-failure"),
            NoiseModel::QubitDephasing => write!(f, "qubit-dephasing"),
            NoiseModel::Hybrid => write!(f, "hybrid"),
            NoiseModel::WithGlobalDepolarizing(inner) => write!(f, "{inner}+global"),
        }
    }
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if let Some(prefix) = lower.strip_suffix("+global") {
            return Ok(NoiseModel::WithGlobalDepolarizing(Box::new(prefix.parse()?)));
        }
        match lower.as_str() {
            "gate-failure" | "gate_failure" | "gatefailure" => Ok(NoiseModel::GateFailure),
            "qubit-dephasing" | "qubit_dephasing" | "dephasing" => Ok(NoiseModel::QubitDephasing),
            "hybrid" => Ok(NoiseModel::Hybrid),
            other => Err(Error::Parse(format!("unknown noise model {other:?}"))),
        }
    }
}

impl Serialize for NoiseModel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NoiseModel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

fn require_chain4(top: &Topology) -> Result<()> {
    if top.n_qubits == 4 && top.is_ascending_chain() {
        Ok(())
    } else {
        Err(Error::Domain("this model requires the 4-qubit ascending chain".into()))
    }
}

/// Ordered model parameters, each in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(Error::Domain(format!("parameter {i} = {v} outside [0,1]")));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0,1]")));
    }
    Ok(())
}

fn sigma_z() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)])
}

/// ε(ρ) = p·ρ + (1−p)·σ_z ρ σ_z.
pub fn dephasing_channel(p: f64) -> Result<KrausChannel> {
    check_probability(p)?;
    let keep = DMatrix::from_diagonal_element(2, 2, c(p.sqrt(), 0.0));
    let flip = sigma_z().map(|e| e * (1.0 - p).sqrt());
    KrausChannel::new(vec![keep, flip])
}

/// ρ → p·ρ + (1−p)·I/2.
pub fn depolarizing_channel(p: f64) -> Result<KrausChannel> {
    check_probability(p)?;
    let a = ((1.0 + 3.0 * p) / 4.0).sqrt();
    let b = ((1.0 - p) / 4.0).sqrt();
    let sx = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
    let sy = DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(0.0, 0.0)]);
    KrausChannel::new(vec![
        DMatrix::from_diagonal_element(2, 2, c(a, 0.0)),
        sx.map(|e| e * b),
        sy.map(|e| e * b),
        sigma_z().map(|e| e * b),
    ])
}

/// M(ρ) = p·(CZ ρ CZ†) + (1−p)·ρ; the entangling gate fires with
/// probability p.
pub fn gate_failure_map(p: f64) -> Result<KrausChannel> {
    check_probability(p)?;
    let fire = Unitary::cz().matrix().map(|e| e * p.sqrt());
    let skip = DMatrix::from_diagonal_element(4, 4, c((1.0 - p).sqrt(), 0.0));
    KrausChannel::new(vec![fire, skip])
}

/// CZ-chain cluster ket on |+⟩^⊗n with edges applied in ascending order.
pub fn chain_cluster_ket(n: usize) -> Result<Ket> {
    let mut ket = build_plus_state(n)?;
    let cz = Unitary::cz();
    for q in 1..n {
        ket = ket.apply_unitary(&cz, &[q, q + 1])?;
    }
    Ok(ket)
}

/// Disjoint neighboring pairs (1,2), (3,4), … used by the dephasing
/// model; the pair channel acts on the outer member so the 4-chain
/// matches the hybrid model's placement. A trailing unpaired qubit keeps
/// its own parameter.
pub(crate) fn dephasing_pair_placement(n: usize) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut q = 1;
    while q + 1 <= n {
        let target = if q == 1 { 1 } else if q + 1 == n { n } else { q };
        out.push((vec![q, q + 1], target));
        q += 2;
    }
    if q == n {
        out.push((vec![n], n));
    }
    out
}

/// Builds the network state from |+⟩^⊗n under the given noise model.
///
/// Model application order:
/// - `GateFailure`: one probabilistic gate per edge, in edge order.
/// - `QubitDephasing`: perfect gates, then one dephasing channel per
///   disjoint neighboring qubit pair with parameter equal to the product
///   of the pair's entries (predictions depend on the per-qubit
///   parameters only through those products).
/// - `Hybrid`: perfect gates on (1,2) and (3,4), dephasing p_1 on qubit 1
///   and p_3 on qubit 4, probabilistic gate p_2 on (2,3).
/// - `WithGlobalDepolarizing`: the inner model, then one depolarizing
///   channel (last parameter) on every qubit.
pub fn build_network_state(
    top: &Topology,
    model: &NoiseModel,
    params: &ParamVector,
) -> Result<DensityMatrix> {
    let arity = model.arity(top)?;
    if params.len() != arity {
        return Err(Error::Dimension(format!(
            "model {model} on this topology takes {arity} parameters, got {}",
            params.len()
        )));
    }
    let n = top.n_qubits;
    match model {
        NoiseModel::GateFailure => {
            let mut rho = DensityMatrix::from_ket(&build_plus_state(n)?);
            for (e, &(i, j)) in top.edges.iter().enumerate() {
                let ch = gate_failure_map(params[e])?;
                rho = apply_channel(&rho, &ch, &[i, j])?;
            }
            Ok(rho)
        }
        NoiseModel::QubitDephasing => {
            let mut rho = perfect_cluster(top)?;
            for (members, target) in dephasing_pair_placement(n) {
                let product: f64 = members.iter().map(|&q| params[q - 1]).product();
                let ch = dephasing_channel(product)?;
                rho = apply_channel(&rho, &ch, &[target])?;
            }
            Ok(rho)
        }
        NoiseModel::Hybrid => {
            let cz = Unitary::cz();
            let mut rho = DensityMatrix::from_ket(&build_plus_state(4)?);
            rho = apply_unitary(&rho, &cz, &[1, 2])?;
            rho = apply_unitary(&rho, &cz, &[3, 4])?;
            rho = apply_channel(&rho, &dephasing_channel(params[0])?, &[1])?;
            rho = apply_channel(&rho, &dephasing_channel(params[2])?, &[4])?;
            apply_channel(&rho, &gate_failure_map(params[1])?, &[2, 3])
        }
        NoiseModel::WithGlobalDepolarizing(inner) => {
            let split = params.len() - 1;
            let inner_params = ParamVector::new(params.values()[..split].to_vec())?;
            let mut rho = build_network_state(top, inner, &inner_params)?;
            let ch = depolarizing_channel(params[split])?;
            for q in 1..=n {
                rho = apply_channel(&rho, &ch, &[q])?;
            }
            Ok(rho)
        }
    }
}

fn perfect_cluster(top: &Topology) -> Result<DensityMatrix> {
    let cz = Unitary::cz();
    let mut rho = DensityMatrix::from_ket(&build_plus_state(top.n_qubits)?);
    for &(i, j) in &top.edges {
        rho = apply_unitary(&rho, &cz, &[i, j])?;
    }
    Ok(rho)
}

/// The photon-pair source state in the register (π_A, π_B, k_A, k_B)
/// with H,r ↦ 0 and V,ℓ ↦ 1: ½(|HH⟩+|VV⟩)⊗(|ℓr⟩+|rℓ⟩) followed by the
/// conditional sign flip on basis states with qubit 1 = V and
/// qubit 3 = ℓ. Equals ½(|0001⟩+|0010⟩+|1101⟩−|1110⟩).
pub fn build_hyperentangled_cluster() -> Ket {
    let mut amps = vec![c(0.0, 0.0); 16];
    for pol in [0usize, 0b11] {
        for path in [0b01usize, 0b10] {
            let idx = (pol << 2) | path;
            let sign = if (idx >> 3) & 1 == 1 && (idx >> 1) & 1 == 1 { -0.5 } else { 0.5 };
            amps[idx] = c(sign, 0.0);
        }
    }
    Ket::new(4, amps).expect("static state is normalized")
}

fn clifford_group() -> &'static Vec<Unitary> {
    static GROUP: OnceLock<Vec<Unitary>> = OnceLock::new();
    GROUP.get_or_init(|| {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let h = DMatrix::from_row_slice(2, 2, &[c(r, 0.0), c(r, 0.0), c(r, 0.0), c(-r, 0.0)]);
        let s = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 1.0)]);
        let key = |m: &DMatrix<C64>| -> [(i64, i64); 4] {
            // Normalize the global phase: first sizable entry made real
            // positive, then snap to a coarse grid.
            let pivot = m.iter().find(|z| z.norm() > 1e-6).copied().unwrap();
            let phase = pivot / pivot.norm();
            let mut out = [(0i64, 0i64); 4];
            for (i, z) in m.iter().enumerate() {
                let w = z / phase;
                out[i] = ((w.re * 1e6).round() as i64, (w.im * 1e6).round() as i64);
            }
            out
        };
        let mut members: Vec<DMatrix<C64>> = vec![DMatrix::identity(2, 2)];
        let mut keys = vec![key(&members[0])];
        let mut cursor = 0;
        while cursor < members.len() {
            let base = members[cursor].clone();
            cursor += 1;
            for gen in [&h, &s] {
                let cand = gen * &base;
                let k = key(&cand);
                if !keys.contains(&k) {
                    keys.push(k);
                    members.push(cand);
                }
            }
        }
        assert_eq!(members.len(), 24, "single-qubit Clifford group size");
        members
            .into_iter()
            .map(|m| Unitary::new(m).expect("Clifford generators are unitary"))
            .collect()
    })
}

/// Per-qubit unitaries W_1..W_4 with (⊗W_j)|source⟩ equal to the
/// canonical chain cluster up to global phase; found once by exhaustive
/// search over single-qubit Cliffords (first match in a fixed order) and
/// cached.
pub fn canonical_frame_map() -> Result<&'static [Unitary; 4]> {
    static MAP: OnceLock<std::result::Result<Box<[Unitary; 4]>, String>> = OnceLock::new();
    let cached = MAP.get_or_init(|| {
        let group = clifford_group();
        let source = build_hyperentangled_cluster();
        let target = chain_cluster_ket(4).expect("chain size is valid");
        let overlap = |ket: &Ket| -> f64 {
            let mut dot = c(0.0, 0.0);
            for i in 0..16 {
                dot += target.amplitude(i).conj() * ket.amplitude(i);
            }
            dot.norm_sqr()
        };
        for w1 in group {
            let k1 = source.apply_unitary(w1, &[1]).expect("dims fixed");
            for w2 in group {
                let k2 = k1.apply_unitary(w2, &[2]).expect("dims fixed");
                for w3 in group {
                    let k3 = k2.apply_unitary(w3, &[3]).expect("dims fixed");
                    for w4 in group {
                        let k4 = k3.apply_unitary(w4, &[4]).expect("dims fixed");
                        if overlap(&k4) >= 1.0 - 1e-9 {
                            return Ok(Box::new([
                                w1.clone(),
                                w2.clone(),
                                w3.clone(),
                                w4.clone(),
                            ]));
                        }
                    }
                }
            }
        }
        Err("no single-qubit Clifford frame maps the source state to the chain cluster".into())
    });
    match cached {
        Ok(map) => Ok(map),
        Err(msg) => Err(Error::NonConverged(msg.clone())),
    }
}

/// Conjugates a 4-qubit state from the abstract chain frame into the
/// physical register frame (ρ_phys = (⊗W)† ρ (⊗W)).
pub fn to_physical_frame(state: &DensityMatrix) -> Result<DensityMatrix> {
    if state.n_qubits() != 4 {
        return Err(Error::Dimension(format!(
            "frame map covers 4 qubits, state has {}",
            state.n_qubits()
        )));
    }
    let map = canonical_frame_map()?;
    let mut rho = state.clone();
    for (j, w) in map.iter().enumerate() {
        rho = apply_unitary(&rho, &w.adjoint(), &[j + 1])?;
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::fidelity;
    use approx::assert_abs_diff_eq;

    fn camax(m: &DMatrix<C64>) -> f64 {
        m.iter().fold(0.0f64, |a, z| a.max(z.norm()))
    }

    fn plus_density(n: usize) -> DensityMatrix {
        DensityMatrix::from_ket(&build_plus_state(n).unwrap())
    }

    #[test]
    fn topology_validation_and_json() {
        let top = Topology::chain4();
        assert_eq!(top.n_qubits(), 4);
        assert_eq!(top.edges(), &[(1, 2), (2, 3), (3, 4)]);
        assert_eq!(top.label(1), "pi_A");
        assert_eq!(top.label(4), "k_B");
        assert!(top.is_ascending_chain());

        let round = Topology::from_json(&top.to_json()).unwrap();
        assert_eq!(round, top);

        assert!(Topology::new(4, vec![(1, 5)], BTreeMap::new()).is_err());
        assert!(Topology::new(4, vec![(2, 2)], BTreeMap::new()).is_err());
        assert!(Topology::new(4, vec![(1, 2), (2, 1)], BTreeMap::new()).is_err());
        assert!(Topology::from_json("{\"n\":4}").is_err());
    }

    #[test]
    fn model_names_round_trip() {
        let models = [
            NoiseModel::GateFailure,
            NoiseModel::QubitDephasing,
            NoiseModel::Hybrid,
            NoiseModel::WithGlobalDepolarizing(Box::new(NoiseModel::Hybrid)),
        ];
        for m in models {
            let parsed: NoiseModel = m.to_string().parse().unwrap();
            assert_eq!(parsed, m);
        }
        assert!("chromatic".parse::<NoiseModel>().is_err());

        let top = Topology::chain4();
        assert_eq!(NoiseModel::GateFailure.arity(&top).unwrap(), 3);
        assert_eq!(NoiseModel::QubitDephasing.arity(&top).unwrap(), 4);
        assert_eq!(NoiseModel::Hybrid.arity(&top).unwrap(), 3);
        assert_eq!(
            NoiseModel::WithGlobalDepolarizing(Box::new(NoiseModel::Hybrid))
                .arity(&top)
                .unwrap(),
            4
        );
        assert_eq!(
            NoiseModel::GateFailure.param_names(&top).unwrap(),
            vec!["p12", "p23", "p34"]
        );
        assert!(NoiseModel::Hybrid.arity(&Topology::chain(3).unwrap()).is_err());
    }

    #[test]
    fn dephasing_channel_examples() {
        let plus = plus_density(1);
        let id = apply_channel(&plus, &dephasing_channel(1.0).unwrap(), &[1]).unwrap();
        assert!(camax(&(id.matrix() - plus.matrix())) < 1e-12);

        let flipped = apply_channel(&plus, &dephasing_channel(0.0).unwrap(), &[1]).unwrap();
        assert_abs_diff_eq!(flipped.matrix()[(0, 1)].re, -0.5, epsilon = 1e-12);

        let mixed = apply_channel(&plus, &dephasing_channel(0.5).unwrap(), &[1]).unwrap();
        assert!(camax(&(mixed.matrix() - DensityMatrix::maximally_mixed(1).matrix())) < 1e-12);

        assert!(dephasing_channel(-0.1).is_err());
        assert!(dephasing_channel(1.1).is_err());
    }

    #[test]
    fn depolarizing_channel_examples() {
        let plus = plus_density(1);
        let id = apply_channel(&plus, &depolarizing_channel(1.0).unwrap(), &[1]).unwrap();
        assert!(camax(&(id.matrix() - plus.matrix())) < 1e-12);

        let wiped = apply_channel(&plus, &depolarizing_channel(0.0).unwrap(), &[1]).unwrap();
        assert!(camax(&(wiped.matrix() - DensityMatrix::maximally_mixed(1).matrix())) < 1e-12);

        let zero = DensityMatrix::new(
            1,
            DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]),
        )
        .unwrap();
        let half = apply_channel(&zero, &depolarizing_channel(0.5).unwrap(), &[1]).unwrap();
        assert_abs_diff_eq!(half.matrix()[(0, 0)].re, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(half.matrix()[(1, 1)].re, 0.25, epsilon = 1e-12);

        assert!(depolarizing_channel(2.0).is_err());
    }

    #[test]
    fn gate_failure_map_examples() {
        let plus2 = plus_density(2);
        let cz = Unitary::cz();
        let fired = apply_channel(&plus2, &gate_failure_map(1.0).unwrap(), &[1, 2]).unwrap();
        let cluster2 = apply_unitary(&plus2, &cz, &[1, 2]).unwrap();
        assert!(camax(&(fired.matrix() - cluster2.matrix())) < 1e-12);

        let skipped = apply_channel(&plus2, &gate_failure_map(0.0).unwrap(), &[1, 2]).unwrap();
        assert!(camax(&(skipped.matrix() - plus2.matrix())) < 1e-12);

        let half = apply_channel(&plus2, &gate_failure_map(0.5).unwrap(), &[1, 2]).unwrap();
        let expect = cluster2.matrix().map(|z| z * 0.5) + plus2.matrix().map(|z| z * 0.5);
        assert!(camax(&(half.matrix() - &expect)) < 1e-12);
    }

    #[test]
    fn gate_failure_network_endpoints() {
        let top = Topology::chain4();
        let ideal = chain_cluster_ket(4).unwrap();

        let all_on = build_network_state(
            &top,
            &NoiseModel::GateFailure,
            &ParamVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(fidelity(&all_on, &ideal).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(all_on.purity(), 1.0, epsilon = 1e-9);

        let all_off = build_network_state(
            &top,
            &NoiseModel::GateFailure,
            &ParamVector::new(vec![0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!(camax(&(all_off.matrix() - plus_density(4).matrix())) < 1e-12);

        // A dead link equals the cluster built without that edge.
        let missing_middle = build_network_state(
            &top,
            &NoiseModel::GateFailure,
            &ParamVector::new(vec![1.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let sparse =
            Topology::new(4, vec![(1, 2), (3, 4)], BTreeMap::new()).unwrap();
        let expect = perfect_cluster(&sparse).unwrap();
        assert!(camax(&(missing_middle.matrix() - expect.matrix())) < 1e-12);

        // Frozen oracle: p = (0.5, 1, 1) leaves fidelity 0.5 + 0.5/4.
        let half_first = build_network_state(
            &top,
            &NoiseModel::GateFailure,
            &ParamVector::new(vec![0.5, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(fidelity(&half_first, &ideal).unwrap(), 0.625, epsilon = 1e-12);
    }

    #[test]
    fn gate_failure_states_are_pattern_mixtures() {
        let top = Topology::chain4();
        let params = [0.9f64, 0.4, 0.7];
        let built = build_network_state(
            &top,
            &NoiseModel::GateFailure,
            &ParamVector::new(params.to_vec()).unwrap(),
        )
        .unwrap();

        let cz = Unitary::cz();
        let mut acc = DMatrix::<C64>::zeros(16, 16);
        for pattern in 0..8u32 {
            let mut weight = 1.0;
            let mut ket = build_plus_state(4).unwrap();
            for (e, &(i, j)) in top.edges().iter().enumerate() {
                if (pattern >> e) & 1 == 1 {
                    weight *= params[e];
                    ket = ket.apply_unitary(&cz, &[i, j]).unwrap();
                } else {
                    weight *= 1.0 - params[e];
                }
            }
            let rho = DensityMatrix::from_ket(&ket);
            acc += rho.matrix().map(|z| z * weight);
        }
        assert!(camax(&(built.matrix() - &acc)) < 1e-12);
    }

    #[test]
    fn dephasing_network_depends_only_on_pair_products() {
        let top = Topology::chain4();
        let build = |ps: [f64; 4]| {
            build_network_state(
                &top,
                &NoiseModel::QubitDephasing,
                &ParamVector::new(ps.to_vec()).unwrap(),
            )
            .unwrap()
        };
        let a = build([0.8, 0.9, 0.6, 0.7]);
        let b = build([0.72, 1.0, 0.42, 1.0]);
        let c_state = build([0.9, 0.8, 0.7, 0.6]);
        assert!(camax(&(a.matrix() - b.matrix())) < 1e-12);
        assert!(camax(&(a.matrix() - c_state.matrix())) < 1e-12);

        let ideal = build([1.0, 1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(
            fidelity(&ideal, &chain_cluster_ket(4).unwrap()).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn hybrid_and_global_models_build() {
        let top = Topology::chain4();
        let ideal = chain_cluster_ket(4).unwrap();

        let hybrid_pure = build_network_state(
            &top,
            &NoiseModel::Hybrid,
            &ParamVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(fidelity(&hybrid_pure, &ideal).unwrap(), 1.0, epsilon = 1e-12);

        let global = NoiseModel::WithGlobalDepolarizing(Box::new(NoiseModel::GateFailure));
        let pure = build_network_state(
            &top,
            &global,
            &ParamVector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(fidelity(&pure, &ideal).unwrap(), 1.0, epsilon = 1e-12);

        let wiped = build_network_state(
            &top,
            &global,
            &ParamVector::new(vec![1.0, 1.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!(camax(&(wiped.matrix() - DensityMatrix::maximally_mixed(4).matrix())) < 1e-12);

        let wrong_arity = build_network_state(
            &top,
            &NoiseModel::Hybrid,
            &ParamVector::new(vec![1.0, 1.0]).unwrap(),
        );
        assert!(wrong_arity.is_err());
        assert!(ParamVector::new(vec![1.2]).is_err());
    }

    #[test]
    fn hyperentangled_cluster_amplitudes() {
        let ket = build_hyperentangled_cluster();
        assert_abs_diff_eq!(ket.amplitude(0b0001).re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ket.amplitude(0b0010).re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ket.amplitude(0b1101).re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ket.amplitude(0b1110).re, -0.5, epsilon = 1e-15);
        let norm: f64 = (0..16).map(|i| ket.amplitude(i).norm_sqr()).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn frame_map_reaches_the_canonical_cluster() {
        let map = canonical_frame_map().unwrap();
        let mut ket = build_hyperentangled_cluster();
        for (j, w) in map.iter().enumerate() {
            ket = ket.apply_unitary(w, &[j + 1]).unwrap();
        }
        let rho = DensityMatrix::from_ket(&ket);
        assert!(fidelity(&rho, &chain_cluster_ket(4).unwrap()).unwrap() >= 1.0 - 1e-9);

        // Without the map the two states disagree.
        let raw = DensityMatrix::from_ket(&build_hyperentangled_cluster());
        assert!(fidelity(&raw, &chain_cluster_ket(4).unwrap()).unwrap() < 0.999);
    }

    #[test]
    fn physical_frame_round_trip() {
        let canon = DensityMatrix::from_ket(&chain_cluster_ket(4).unwrap());
        let phys = to_physical_frame(&canon).unwrap();
        assert_abs_diff_eq!(
            fidelity(&phys, &build_hyperentangled_cluster()).unwrap(),
            1.0,
            epsilon = 1e-9
        );
    }
}
