//! Two-setting full-correlation Bell inequalities: correlation tensors,
//! sign functions, the family value and its local-hidden-variable bound,
//! and seeded multi-start maximization over measurement settings.
//!
//! Index conventions (shared with [`crate::quantum`]):
//! - Correlation tensors are stored flat; the bit for qubit j (qubit 1 =
//!   MSB) is k_j - 1, where k_j in {1,2} selects the setting.
//! - Sign functions are stored flat over s in {-1,+1}^N; bit 0 means
//!   s_j = +1, bit 1 means s_j = -1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantum::{expectation, BlochObservable, DensityMatrix};

/// Two measurement directions per qubit.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingsTable {
    observables: Vec<[BlochObservable; 2]>,
}

impl SettingsTable {
    pub fn new(observables: Vec<[BlochObservable; 2]>) -> Result<Self> {
        if observables.is_empty() {
            return Err(Error::Dimension("settings table must cover at least one qubit".into()));
        }
        Ok(Self { observables })
    }

    pub fn n_qubits(&self) -> usize {
        self.observables.len()
    }

    /// Observable for 1-based qubit and setting index in {1,2}.
    pub fn observable(&self, qubit: usize, setting: usize) -> Result<&BlochObservable> {
        if qubit == 0 || qubit > self.observables.len() {
            return Err(Error::Dimension(format!("qubit {qubit} out of range")));
        }
        if setting != 1 && setting != 2 {
            return Err(Error::Dimension(format!("setting {setting} not in {{1,2}}")));
        }
        Ok(&self.observables[qubit - 1][setting - 1])
    }
}

/// Expectation values of setting-choice products, one per k in {1,2}^N.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    n_qubits: usize,
    values: Vec<f64>,
}

impl CorrelationTensor {
    pub fn new(n_qubits: usize, values: Vec<f64>) -> Result<Self> {
        let dim = 1usize << n_qubits;
        if values.len() != dim {
            return Err(Error::Dimension(format!(
                "expected {dim} entries for {n_qubits} qubits, got {}",
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
                return Err(Error::Invariant(format!("entry {i} = {v} outside [-1, 1]")));
            }
        }
        Ok(Self { n_qubits, values })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entry for explicit setting choices, each in {1,2} (qubit 1 first).
    pub fn value(&self, choices: &[usize]) -> Result<f64> {
        if choices.len() != self.n_qubits {
            return Err(Error::Dimension(format!(
                "expected {} setting choices, got {}",
                self.n_qubits,
                choices.len()
            )));
        }
        let mut idx = 0usize;
        for (j, &k) in choices.iter().enumerate() {
            if k != 1 && k != 2 {
                return Err(Error::Dimension(format!("setting choice {k} not in {{1,2}}")));
            }
            idx |= (k - 1) << (self.n_qubits - 1 - j);
        }
        Ok(self.values[idx])
    }

    /// Swaps the two setting labels on every qubit.
    pub fn with_all_settings_swapped(&self) -> CorrelationTensor {
        let dim = self.values.len();
        let mask = dim - 1;
        let mut out = vec![0.0; dim];
        for (i, &v) in self.values.iter().enumerate() {
            out[i ^ mask] = v;
        }
        CorrelationTensor { n_qubits: self.n_qubits, values: out }
    }
}

/// Real-valued weight per s-assignment; the evaluation accepts any reals,
/// the constructor enforces the ±1 range used for bound statements.
#[derive(Debug, Clone, PartialEq)]
pub struct SignFunction {
    n_qubits: usize,
    values: Vec<f64>,
}

impl SignFunction {
    pub fn new(n_qubits: usize, values: Vec<f64>) -> Result<Self> {
        let dim = 1usize << n_qubits;
        if values.len() != dim {
            return Err(Error::Dimension(format!(
                "expected {dim} sign values for {n_qubits} qubits, got {}",
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if (v.abs() - 1.0).abs() > 1e-12 {
                return Err(Error::Invariant(format!("sign value {i} = {v} not in {{-1,+1}}")));
            }
        }
        Ok(Self { n_qubits, values })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A family value together with the local-realistic bound 2^N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WwzbValue {
    pub value: f64,
    pub classical_bound: f64,
    pub n_qubits: usize,
}

impl WwzbValue {
    fn new(value: f64, n_qubits: usize) -> Self {
        Self { value, classical_bound: (1u64 << n_qubits) as f64, n_qubits }
    }

    pub fn violates(&self) -> bool {
        self.value > self.classical_bound + 1e-9
    }
}

/// Measures every setting-choice product on the state.
pub fn correlation_tensor(
    state: &DensityMatrix,
    settings: &SettingsTable,
) -> Result<CorrelationTensor> {
    let n = state.n_qubits();
    if settings.n_qubits() != n {
        return Err(Error::Dimension(format!(
            "settings cover {} qubits, state has {n}",
            settings.n_qubits()
        )));
    }
    let dim = 1usize << n;
    let mut values = Vec::with_capacity(dim);
    for kbits in 0..dim {
        let obs: Vec<BlochObservable> = (0..n)
            .map(|j| {
                let k = ((kbits >> (n - 1 - j)) & 1) + 1;
                *settings.observable(j + 1, k).expect("validated indices")
            })
            .collect();
        values.push(expectation(state, &obs)?);
    }
    CorrelationTensor::new(n, values)
}

/// | Σ_s S(s) Σ_k (Π_j s_j^(k_j-1)) E(k) |, evaluated term by term.
pub fn wwzb_lhs(e: &CorrelationTensor, s: &SignFunction) -> Result<WwzbValue> {
    if e.n_qubits != s.n_qubits {
        return Err(Error::Dimension(format!(
            "tensor covers {} qubits, sign function {}",
            e.n_qubits, s.n_qubits
        )));
    }
    let dim = e.values.len();
    let mut total = 0.0;
    for sbits in 0..dim {
        let mut inner = 0.0;
        for kbits in 0..dim {
            let parity = (sbits & kbits).count_ones() & 1;
            let factor = if parity == 0 { 1.0 } else { -1.0 };
            inner += factor * e.values[kbits];
        }
        total += s.values[sbits] * inner;
    }
    Ok(WwzbValue::new(total.abs(), e.n_qubits))
}

/// The member selected by √2·cos[π/4(Σ_j s_j - N - 1)]; the argument is
/// always an odd multiple of π/4, so every value is exactly ±1.
pub fn mabk_sign_function(n: usize) -> Result<SignFunction> {
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 qubits, got {n}")));
    }
    let dim = 1usize << n;
    let mut values = Vec::with_capacity(dim);
    for sbits in 0..dim {
        let minus_count = (sbits as u64).count_ones() as i64;
        let sum: i64 = n as i64 - 2 * minus_count;
        let units = sum - n as i64 - 1;
        let octant = units.rem_euclid(8);
        let v = match octant {
            1 | 7 => 1.0,
            3 | 5 => -1.0,
            _ => unreachable!("argument parity is fixed by the qubit count"),
        };
        values.push(v);
    }
    SignFunction::new(n, values)
}

/// Maximum of the family value over all sign functions:
/// Σ_s | Σ_k (Π_j s_j^(k_j-1)) E(k) |. At most 2^N exactly when the full
/// correlation function admits a local-hidden-variable model.
pub fn lhv_max(e: &CorrelationTensor) -> WwzbValue {
    let dim = e.values.len();
    let mut total = 0.0;
    for sbits in 0..dim {
        let mut inner = 0.0;
        for kbits in 0..dim {
            let parity = (sbits & kbits).count_ones() & 1;
            let factor = if parity == 0 { 1.0 } else { -1.0 };
            inner += factor * e.values[kbits];
        }
        total += inner.abs();
    }
    WwzbValue::new(total, e.n_qubits)
}

/// Allowed measurement directions during maximization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Restriction {
    /// axis = (cos φ, sin φ, 0); one angle per setting.
    #[default]
    Equatorial,
    /// axis = (sin θ cos φ, sin θ sin φ, cos θ); two angles per setting.
    FullSphere,
}

impl Restriction {
    pub fn angles_per_setting(self) -> usize {
        match self {
            Restriction::Equatorial => 1,
            Restriction::FullSphere => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Restriction::Equatorial => "equatorial",
            Restriction::FullSphere => "fullsphere",
        }
    }
}

impl std::str::FromStr for Restriction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "equatorial" => Ok(Restriction::Equatorial),
            "fullsphere" | "full-sphere" | "full_sphere" => Ok(Restriction::FullSphere),
            other => Err(Error::Parse(format!("unknown restriction {other:?}"))),
        }
    }
}

/// Multi-start search budget; each start owns the RNG substream keyed by
/// (seed, start index) and results reduce deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub starts: usize,
    pub seed: u64,
    pub angle_tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { starts: 64, seed: 0, angle_tolerance: 1e-7, max_sweeps: 40 }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.starts == 0 {
            return Err(Error::SearchBudget("zero starts".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::SearchBudget("zero sweeps".into()));
        }
        if !(self.angle_tolerance > 0.0) {
            return Err(Error::Domain(format!(
                "angle tolerance {} must be positive",
                self.angle_tolerance
            )));
        }
        Ok(())
    }
}

/// Pauli-word expectations Tr(ρ · σ_{a_1} ⊗ … ⊗ σ_{a_N}), a_j in {x,y,z};
/// caches the 3^N reals so setting sweeps only pay tensor contractions.
struct PauliTensor {
    n: usize,
    values: Vec<f64>,
}

impl PauliTensor {
    fn build(state: &DensityMatrix) -> Result<Self> {
        let n = state.n_qubits();
        let count = 3usize.pow(n as u32);
        let axes = [BlochObservable::x(), BlochObservable::y(), BlochObservable::z()];
        let mut values = Vec::with_capacity(count);
        for word in 0..count {
            let mut obs = Vec::with_capacity(n);
            let mut rem = word;
            for _ in 0..n {
                obs.push(axes[rem % 3]);
                rem /= 3;
            }
            obs.reverse();
            values.push(expectation(state, &obs)?);
        }
        Ok(Self { n, values })
    }

    /// Contracts each qubit's Pauli index with its two setting axes and
    /// returns the 2^N correlation values (k-bit layout).
    fn correlations(&self, axes: &[[[f64; 3]; 2]], out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        let n = self.n;
        out.clear();
        out.extend_from_slice(&self.values);
        for (j, qubit_axes) in axes.iter().enumerate() {
            let processed = 1usize << j;
            let remaining = 3usize.pow((n - 1 - j) as u32);
            scratch.clear();
            scratch.resize(processed * 2 * remaining, 0.0);
            for p in 0..processed {
                for k in 0..2 {
                    let ax = &qubit_axes[k];
                    for r in 0..remaining {
                        let mut acc = 0.0;
                        for a in 0..3 {
                            acc += ax[a] * out[p * 3 * remaining + a * remaining + r];
                        }
                        scratch[(p * 2 + k) * remaining + r] = acc;
                    }
                }
            }
            std::mem::swap(out, scratch);
        }
    }
}

fn axes_from_params(n: usize, restriction: Restriction, params: &[f64]) -> Vec<[[f64; 3]; 2]> {
    let per = restriction.angles_per_setting();
    (0..n)
        .map(|j| {
            let mut pair = [[0.0; 3]; 2];
            for (k, axis) in pair.iter_mut().enumerate() {
                let base = (j * 2 + k) * per;
                *axis = match restriction {
                    Restriction::Equatorial => {
                        let phi = params[base];
                        [phi.cos(), phi.sin(), 0.0]
                    }
                    Restriction::FullSphere => {
                        let (theta, phi) = (params[base], params[base + 1]);
                        let st = theta.sin();
                        [st * phi.cos(), st * phi.sin(), theta.cos()]
                    }
                };
            }
            pair
        })
        .collect()
}

/// In-place transform from k-indexed correlations to s-indexed inner sums.
fn s_transform(values: &mut [f64], n: usize) {
    for bit in 0..n {
        let stride = 1usize << (n - 1 - bit);
        let mut base = 0;
        while base < values.len() {
            for i in base..base + stride {
                let a = values[i];
                let b = values[i + stride];
                values[i] = a + b;
                values[i + stride] = a - b;
            }
            base += 2 * stride;
        }
    }
}

struct Objective<'a> {
    pauli: &'a PauliTensor,
    sign: &'a [f64],
    restriction: Restriction,
}

impl Objective<'_> {
    fn eval(&self, params: &[f64], buf: &mut Vec<f64>, scratch: &mut Vec<f64>) -> f64 {
        let axes = axes_from_params(self.pauli.n, self.restriction, params);
        self.pauli.correlations(&axes, buf, scratch);
        s_transform(buf, self.pauli.n);
        let mut total = 0.0;
        for (s, f) in self.sign.iter().zip(buf.iter()) {
            total += s * f;
        }
        total.abs()
    }
}

const GOLDEN_RATIO_CONJ: f64 = 0.618_033_988_749_894_9;

/// Finds the maximizer of the given start's coordinate sweep; returns
/// (params, value).
fn refine_start(
    obj: &Objective<'_>,
    mut params: Vec<f64>,
    tol: f64,
    max_sweeps: usize,
) -> (Vec<f64>, f64) {
    let mut buf = Vec::new();
    let mut scratch = Vec::new();
    let mut best = obj.eval(&params, &mut buf, &mut scratch);
    for _ in 0..max_sweeps {
        let before = best;
        for coord in 0..params.len() {
            let mut lo = 0.0f64;
            let mut hi = std::f64::consts::TAU;
            let eval_at = |angle: f64, params: &mut Vec<f64>, buf: &mut Vec<f64>, scratch: &mut Vec<f64>| {
                let old = params[coord];
                params[coord] = angle;
                let v = obj.eval(params, buf, scratch);
                params[coord] = old;
                v
            };
            let mut c = hi - (hi - lo) * GOLDEN_RATIO_CONJ;
            let mut d = lo + (hi - lo) * GOLDEN_RATIO_CONJ;
            let mut fc = eval_at(c, &mut params, &mut buf, &mut scratch);
            let mut fd = eval_at(d, &mut params, &mut buf, &mut scratch);
            while hi - lo > tol {
                if fc > fd {
                    hi = d;
                    d = c;
                    fd = fc;
                    c = hi - (hi - lo) * GOLDEN_RATIO_CONJ;
                    fc = eval_at(c, &mut params, &mut buf, &mut scratch);
                } else {
                    lo = c;
                    c = d;
                    fc = fd;
                    d = lo + (hi - lo) * GOLDEN_RATIO_CONJ;
                    fd = eval_at(d, &mut params, &mut buf, &mut scratch);
                }
            }
            let candidate = 0.5 * (lo + hi);
            let fcand = eval_at(candidate, &mut params, &mut buf, &mut scratch);
            if fcand > best {
                best = fcand;
                params[coord] = candidate;
            }
        }
        if best - before < 1e-11 {
            break;
        }
    }
    (params, best)
}

/// Maximizes the family value over measurement settings by seeded
/// multi-start coordinate search. Deterministic for a fixed config: each
/// start draws from its own substream and ties break toward the lowest
/// start index.
pub fn maximize_settings(
    state: &DensityMatrix,
    sign: &SignFunction,
    restriction: Restriction,
    config: &SearchConfig,
) -> Result<(SettingsTable, WwzbValue)> {
    let n = state.n_qubits();
    if sign.n_qubits != n {
        return Err(Error::Dimension(format!(
            "sign function covers {} qubits, state has {n}",
            sign.n_qubits
        )));
    }
    if n == 0 {
        return Err(Error::Dimension("cannot optimize settings on an empty register".into()));
    }
    config.validate()?;
    let pauli = PauliTensor::build(state)?;
    let obj = Objective { pauli: &pauli, sign: &sign.values, restriction };
    let n_params = n * 2 * restriction.angles_per_setting();
    let results: Vec<(Vec<f64>, f64)> = (0..config.starts)
        .into_par_iter()
        .map(|start| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(start as u64);
            let init: Vec<f64> = (0..n_params)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            refine_start(&obj, init, config.angle_tolerance, config.max_sweeps)
        })
        .collect();
    let mut best_idx = 0;
    for (i, r) in results.iter().enumerate() {
        if r.1 > results[best_idx].1 {
            best_idx = i;
        }
    }
    let axes = axes_from_params(n, restriction, &results[best_idx].0);
    let observables = axes
        .iter()
        .map(|pair| -> Result<[BlochObservable; 2]> {
            Ok([normalized_observable(pair[0])?, normalized_observable(pair[1])?])
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SettingsTable::new(observables)?;
    let tensor = correlation_tensor(state, &table)?;
    let value = wwzb_lhs(&tensor, sign)?;
    Ok((table, value))
}

fn normalized_observable(axis: [f64; 3]) -> Result<BlochObservable> {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    BlochObservable::new([axis[0] / norm, axis[1] / norm, axis[2] / norm])
}

/// One grouping's maximized value and the settings achieving it.
#[derive(Debug, Clone)]
pub struct GroupMaximum {
    pub label: String,
    pub value: WwzbValue,
    pub settings: SettingsTable,
}

/// Maximizes the matching-size MABK member on each prepared group state.
pub fn all_mabk_groupwise_maxima(
    groups: &[(String, DensityMatrix)],
    restriction: Restriction,
    config: &SearchConfig,
) -> Result<Vec<GroupMaximum>> {
    groups
        .iter()
        .map(|(label, state)| {
            let sign = mabk_sign_function(state.n_qubits())?;
            let (settings, value) = maximize_settings(state, &sign, restriction, config)?;
            Ok(GroupMaximum { label: label.clone(), value, settings })
        })
        .collect()
}
