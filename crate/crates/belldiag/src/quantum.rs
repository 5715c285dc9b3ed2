//! Dense state-vector and density-matrix primitives for small qubit
//! registers, with Kraus channels, projective exclusion of qubits, and
//! Bloch-axis observables.
//!
//! Conventions used across the crate:
//! - Qubits are labeled 1..=n; qubit 1 is the most significant bit of a
//!   computational-basis index.
//! - All tolerances are fixed: states are validated on construction.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub(crate) const HERMITICITY_TOL: f64 = 1e-10;
pub(crate) const TRACE_TOL: f64 = 1e-10;
pub(crate) const EIGENVALUE_FLOOR: f64 = -1e-9;
pub(crate) const NORM_TOL: f64 = 1e-10;
pub(crate) const AXIS_TOL: f64 = 1e-12;
pub(crate) const BRANCH_PROB_FLOOR: f64 = 1e-12;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Pure state on `n_qubits` qubits; unit norm within 1e-10.
#[derive(Debug, Clone, PartialEq)]
pub struct Ket {
    n_qubits: usize,
    amplitudes: DVector<C64>,
}

impl Ket {
    pub fn new(n_qubits: usize, amplitudes: Vec<C64>) -> Result<Self> {
        let dim = 1usize
            .checked_shl(n_qubits as u32)
            .ok_or_else(|| Error::Dimension(format!("{n_qubits} qubits overflow")))?;
        if amplitudes.len() != dim {
            return Err(Error::Dimension(format!(
                "expected 2^{n_qubits} = {dim} amplitudes, got {}",
                amplitudes.len()
            )));
        }
        let amplitudes = DVector::from_vec(amplitudes);
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Invariant(format!("ket norm {norm} differs from 1")));
        }
        Ok(Self { n_qubits, amplitudes })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn amplitude(&self, basis_index: usize) -> C64 {
        self.amplitudes[basis_index]
    }

    /// Applies a unitary on the given target qubits (1-based, in the order
    /// of the unitary's own qubit indexing).
    pub fn apply_unitary(&self, u: &Unitary, targets: &[usize]) -> Result<Ket> {
        check_targets(self.n_qubits, targets, u.dim())?;
        let out = apply_matrix_to_vector(&u.matrix, &self.amplitudes, self.n_qubits, targets);
        Ok(Ket { n_qubits: self.n_qubits, amplitudes: out })
    }
}

/// Mixed state; Hermitian within 1e-10, unit trace within 1e-10, eigenvalues
/// above -1e-9. A zero-qubit register is the scalar state [[1]].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    matrix: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(n_qubits: usize, matrix: DMatrix<C64>) -> Result<Self> {
        let dim = 1usize << n_qubits;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::Dimension(format!(
                "expected {dim}x{dim} matrix for {n_qubits} qubits, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let herm_dev = (&matrix - matrix.adjoint()).camax();
        if herm_dev > HERMITICITY_TOL {
            return Err(Error::Invariant(format!(
                "matrix deviates from Hermitian by {herm_dev}"
            )));
        }
        let trace = matrix.trace();
        if (trace.re - 1.0).abs() > TRACE_TOL || trace.im.abs() > TRACE_TOL {
            return Err(Error::Invariant(format!("trace {trace} differs from 1")));
        }
        let min_eig = matrix
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < EIGENVALUE_FLOOR {
            return Err(Error::Invariant(format!(
                "minimum eigenvalue {min_eig} below floor"
            )));
        }
        Ok(Self { n_qubits, matrix })
    }

    pub fn from_ket(ket: &Ket) -> Self {
        let v = &ket.amplitudes;
        Self {
            n_qubits: ket.n_qubits,
            matrix: v * v.adjoint(),
        }
    }

    pub fn maximally_mixed(n_qubits: usize) -> Self {
        let dim = 1usize << n_qubits;
        Self {
            n_qubits,
            matrix: DMatrix::from_diagonal_element(dim, dim, c(1.0 / dim as f64, 0.0)),
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    /// Tr(rho^2); 1 for pure states.
    pub fn purity(&self) -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..self.matrix.nrows() {
            for j in 0..self.matrix.ncols() {
                acc += self.matrix[(i, j)] * self.matrix[(j, i)];
            }
        }
        acc.re
    }
}

/// Unitary operator on a power-of-two dimension; U†U = I within 1e-10.
#[derive(Debug, Clone, PartialEq)]
pub struct Unitary {
    dim: usize,
    matrix: DMatrix<C64>,
}

impl Unitary {
    pub fn new(matrix: DMatrix<C64>) -> Result<Self> {
        let dim = matrix.nrows();
        if dim == 0 || matrix.ncols() != dim || !dim.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "unitary must be square with power-of-two size, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let dev = (matrix.adjoint() * &matrix - DMatrix::<C64>::identity(dim, dim)).camax();
        if dev > 1e-10 {
            return Err(Error::Invariant(format!(
                "U'U deviates from identity by {dev}"
            )));
        }
        Ok(Self { dim, matrix })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    /// Controlled-phase gate: flips the sign of |11⟩.
    pub fn cz() -> Self {
        let mut m = DMatrix::<C64>::identity(4, 4);
        m[(3, 3)] = c(-1.0, 0.0);
        Self { dim: 4, matrix: m }
    }

    pub fn adjoint(&self) -> Self {
        Self { dim: self.dim, matrix: self.matrix.adjoint() }
    }
}

/// Completely positive trace-preserving map given by Kraus operators;
/// sum of K†K equals identity within 1e-10.
#[derive(Debug, Clone)]
pub struct KrausChannel {
    dim: usize,
    operators: Vec<DMatrix<C64>>,
}

impl KrausChannel {
    pub fn new(operators: Vec<DMatrix<C64>>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| Error::Dimension("channel needs at least one operator".into()))?;
        let dim = first.nrows();
        if dim == 0 || !dim.is_power_of_two() {
            return Err(Error::Dimension(format!("operator size {dim} not a power of two")));
        }
        let mut acc = DMatrix::<C64>::zeros(dim, dim);
        for op in &operators {
            if op.nrows() != dim || op.ncols() != dim {
                return Err(Error::Dimension("mismatched Kraus operator sizes".into()));
            }
            acc += op.adjoint() * op;
        }
        let dev = (acc - DMatrix::<C64>::identity(dim, dim)).camax();
        if dev > 1e-10 {
            return Err(Error::Invariant(format!(
                "channel is not trace-preserving; completeness deviates by {dev}"
            )));
        }
        Ok(Self { dim, operators })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn operators(&self) -> &[DMatrix<C64>] {
        &self.operators
    }
}

/// A ±1 observable n·σ given by a unit Bloch vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochObservable {
    axis: [f64; 3],
}

impl BlochObservable {
    pub fn new(axis: [f64; 3]) -> Result<Self> {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if (norm - 1.0).abs() > AXIS_TOL {
            return Err(Error::Invariant(format!("axis norm {norm} differs from 1")));
        }
        Ok(Self { axis })
    }

    pub fn x() -> Self {
        Self { axis: [1.0, 0.0, 0.0] }
    }

    pub fn y() -> Self {
        Self { axis: [0.0, 1.0, 0.0] }
    }

    pub fn z() -> Self {
        Self { axis: [0.0, 0.0, 1.0] }
    }

    pub fn axis(&self) -> [f64; 3] {
        self.axis
    }

    /// The 2x2 Hermitian operator n·σ (traceless, squares to identity).
    pub fn operator(&self) -> DMatrix<C64> {
        let [x, y, z] = self.axis;
        DMatrix::from_row_slice(2, 2, &[c(z, 0.0), c(x, -y), c(x, y), c(-z, 0.0)])
    }

    /// Normalized eigenvector of n·σ for the given outcome (+1 or -1).
    pub fn eigenvector(&self, outcome: i8) -> [C64; 2] {
        let [x, y, z] = self.axis;
        let theta = z.clamp(-1.0, 1.0).acos();
        let phi = y.atan2(x);
        let (ht_sin, ht_cos) = (theta / 2.0).sin_cos();
        let phase = c(phi.cos(), phi.sin());
        if outcome >= 0 {
            [c(ht_cos, 0.0), phase * ht_sin]
        } else {
            [c(ht_sin, 0.0), -phase * ht_cos]
        }
    }
}

fn check_targets(n_qubits: usize, targets: &[usize], op_dim: usize) -> Result<()> {
    if op_dim != 1usize << targets.len() {
        return Err(Error::Dimension(format!(
            "operator dimension {op_dim} does not match {} target(s)",
            targets.len()
        )));
    }
    let mut seen = vec![false; n_qubits + 1];
    for &t in targets {
        if t == 0 || t > n_qubits {
            return Err(Error::Dimension(format!(
                "target qubit {t} out of range 1..={n_qubits}"
            )));
        }
        if seen[t] {
            return Err(Error::Dimension(format!("repeated target qubit {t}")));
        }
        seen[t] = true;
    }
    Ok(())
}

/// Scatters `rest` bits over non-target positions and `small` bits over
/// target positions (qubit 1 = MSB; `small` is indexed in target order).
struct Embedding {
    n: usize,
    target_shifts: Vec<usize>,
    rest_shifts: Vec<usize>,
}

impl Embedding {
    fn new(n: usize, targets: &[usize]) -> Self {
        let target_shifts: Vec<usize> = targets.iter().map(|&t| n - t).collect();
        let rest_shifts: Vec<usize> = (1..=n)
            .filter(|q| !targets.contains(q))
            .map(|q| n - q)
            .collect();
        Self { n, target_shifts, rest_shifts }
    }

    fn k(&self) -> usize {
        self.target_shifts.len()
    }

    fn rest_count(&self) -> usize {
        self.n - self.k()
    }

    fn full_index(&self, rest: usize, small: usize) -> usize {
        let mut idx = 0usize;
        for (i, &shift) in self.target_shifts.iter().enumerate() {
            idx |= ((small >> (self.k() - 1 - i)) & 1) << shift;
        }
        for (i, &shift) in self.rest_shifts.iter().enumerate() {
            idx |= ((rest >> (self.rest_count() - 1 - i)) & 1) << shift;
        }
        idx
    }
}

fn apply_matrix_to_vector(
    m: &DMatrix<C64>,
    v: &DVector<C64>,
    n: usize,
    targets: &[usize],
) -> DVector<C64> {
    let emb = Embedding::new(n, targets);
    let small_dim = 1usize << emb.k();
    let rest_dim = 1usize << emb.rest_count();
    let mut out = DVector::<C64>::zeros(v.len());
    for rest in 0..rest_dim {
        for tr in 0..small_dim {
            let mut acc = C64::new(0.0, 0.0);
            for tc in 0..small_dim {
                acc += m[(tr, tc)] * v[emb.full_index(rest, tc)];
            }
            out[emb.full_index(rest, tr)] = acc;
        }
    }
    out
}

/// Computes M ρ M'† embedded on targets (M applied to rows, M' to columns).
fn sandwich(
    m: &DMatrix<C64>,
    rho: &DMatrix<C64>,
    n: usize,
    targets: &[usize],
) -> DMatrix<C64> {
    let emb = Embedding::new(n, targets);
    let small_dim = 1usize << emb.k();
    let rest_dim = 1usize << emb.rest_count();
    let dim = rho.nrows();
    let mut left = DMatrix::<C64>::zeros(dim, dim);
    for rest in 0..rest_dim {
        for tr in 0..small_dim {
            let row = emb.full_index(rest, tr);
            for col in 0..dim {
                let mut acc = C64::new(0.0, 0.0);
                for tc in 0..small_dim {
                    acc += m[(tr, tc)] * rho[(emb.full_index(rest, tc), col)];
                }
                left[(row, col)] = acc;
            }
        }
    }
    let mut out = DMatrix::<C64>::zeros(dim, dim);
    for rest in 0..rest_dim {
        for tc in 0..small_dim {
            let col = emb.full_index(rest, tc);
            for row in 0..dim {
                let mut acc = C64::new(0.0, 0.0);
                for tcp in 0..small_dim {
                    acc += left[(row, emb.full_index(rest, tcp))] * m[(tc, tcp)].conj();
                }
                out[(row, col)] = acc;
            }
        }
    }
    out
}

/// Uniform superposition |+⟩^⊗n; every amplitude 2^(-n/2). Supports
/// 1 ≤ n ≤ 12.
pub fn build_plus_state(n: usize) -> Result<Ket> {
    if n == 0 || n > 12 {
        return Err(Error::Dimension(format!("qubit count {n} outside 1..=12")));
    }
    let dim = 1usize << n;
    let amp = c((dim as f64).sqrt().recip(), 0.0);
    Ket::new(n, vec![amp; dim])
}

/// Conjugates a state by a unitary embedded on the given target qubits.
pub fn apply_unitary(state: &DensityMatrix, u: &Unitary, targets: &[usize]) -> Result<DensityMatrix> {
    check_targets(state.n_qubits, targets, u.dim)?;
    let out = sandwich(&u.matrix, &state.matrix, state.n_qubits, targets);
    DensityMatrix::new(state.n_qubits, out)
}

/// Applies a Kraus channel embedded on the given target qubits.
pub fn apply_channel(
    state: &DensityMatrix,
    ch: &KrausChannel,
    targets: &[usize],
) -> Result<DensityMatrix> {
    check_targets(state.n_qubits, targets, ch.dim)?;
    let dim = state.matrix.nrows();
    let mut acc = DMatrix::<C64>::zeros(dim, dim);
    for op in &ch.operators {
        acc += sandwich(op, &state.matrix, state.n_qubits, targets);
    }
    DensityMatrix::new(state.n_qubits, acc)
}

/// Expectation value Tr(ρ · ⊗_j n_j·σ) with one observable per qubit.
pub fn expectation(state: &DensityMatrix, observables: &[BlochObservable]) -> Result<f64> {
    let n = state.n_qubits;
    if observables.len() != n {
        return Err(Error::Dimension(format!(
            "expected {n} observables, got {}",
            observables.len()
        )));
    }
    let ops: Vec<DMatrix<C64>> = observables.iter().map(|o| o.operator()).collect();
    let dim = state.matrix.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for r in 0..dim {
        for col in 0..dim {
            let mut prod = state.matrix[(col, r)];
            if prod.norm_sqr() == 0.0 {
                continue;
            }
            for (j, op) in ops.iter().enumerate() {
                let rb = (r >> (n - 1 - j)) & 1;
                let cb = (col >> (n - 1 - j)) & 1;
                prod *= op[(rb, cb)];
            }
            acc += prod;
        }
    }
    Ok(acc.re)
}

/// Measures one qubit along a Bloch axis, post-selects the outcome, and
/// removes the measured qubit from the register. Returns the renormalized
/// remainder and the outcome probability.
pub fn project_qubit(
    state: &DensityMatrix,
    qubit: usize,
    obs: &BlochObservable,
    outcome: i8,
) -> Result<(DensityMatrix, f64)> {
    let n = state.n_qubits;
    if qubit == 0 || qubit > n {
        return Err(Error::Dimension(format!("qubit {qubit} out of range 1..={n}")));
    }
    let v = obs.eigenvector(outcome);
    let kept_dim = 1usize << (n - 1);
    let shift = n - qubit;
    let expand = |kept: usize, bit: usize| -> usize {
        let high = (kept >> shift) << (shift + 1);
        let low = kept & ((1usize << shift) - 1);
        high | (bit << shift) | low
    };
    let mut m = DMatrix::<C64>::zeros(kept_dim, kept_dim);
    for a in 0..kept_dim {
        for b in 0..kept_dim {
            let mut acc = C64::new(0.0, 0.0);
            for s in 0..2 {
                for t in 0..2 {
                    acc += v[s].conj() * state.matrix[(expand(a, s), expand(b, t))] * v[t];
                }
            }
            m[(a, b)] = acc;
        }
    }
    let prob = m.trace().re;
    if prob < BRANCH_PROB_FLOOR {
        return Err(Error::ZeroProbability(format!(
            "outcome {outcome:+} on qubit {qubit} has probability {prob:.3e}"
        )));
    }
    let rho = DensityMatrix::new(n - 1, m.map(|z| z / prob))?;
    Ok((rho, prob))
}

/// Partial trace onto the kept qubits (ascending register order preserved).
pub fn partial_trace(state: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let n = state.n_qubits;
    if keep.is_empty() {
        return Err(Error::Dimension("keep set must be nonempty".into()));
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    if keep_sorted.len() != keep.len() {
        return Err(Error::Dimension("keep set contains duplicates".into()));
    }
    if keep_sorted.iter().any(|&q| q == 0 || q > n) {
        return Err(Error::Dimension(format!("keep set outside 1..={n}")));
    }
    let traced: Vec<usize> = (1..=n).filter(|q| !keep_sorted.contains(q)).collect();
    let emb = Embedding::new(n, &traced);
    let kept_dim = 1usize << keep_sorted.len();
    let env_dim = 1usize << traced.len();
    let mut m = DMatrix::<C64>::zeros(kept_dim, kept_dim);
    for a in 0..kept_dim {
        for b in 0..kept_dim {
            let mut acc = C64::new(0.0, 0.0);
            for e in 0..env_dim {
                acc += state.matrix[(emb.full_index(a, e), emb.full_index(b, e))];
            }
            m[(a, b)] = acc;
        }
    }
    DensityMatrix::new(keep_sorted.len(), m)
}

/// Overlap ⟨b|a|b⟩ of a mixed state with a pure reference; lies in [0, 1].
pub fn fidelity(a: &DensityMatrix, b: &Ket) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "state dimension {} does not match reference dimension {}",
            a.dim(),
            b.dim()
        )));
    }
    let v = &b.amplitudes;
    let f = (v.adjoint() * &a.matrix * v)[(0, 0)].re;
    Ok(f.clamp(0.0, 1.0))
}
