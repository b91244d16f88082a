//! Master-equation integration and observables.
//!
//! [`lindblad_rhs`] is the dense reference form of the generator. The
//! integrator uses [`Liouvillian`], a precompiled sparse form of the same
//! generator that folds the anticommutator into a non-Hermitian effective
//! Hamiltonian and evaluates only one operator product per call. Both are
//! checked against each other in the tests.

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::model::{Basis, NamedState};
use crate::qops::{commutator, hermitian_eigen, ComplexMatrix, Ket, QopsError, I, ZERO};

/// Largest allowed `|Tr ρ − 1|` before an integration is aborted.
pub const TRACE_ABORT: f64 = 1e-6;
/// Most negative allowed eigenvalue before an integration is aborted.
pub const MIN_EIG_ABORT: f64 = -1e-6;
/// Per-step trace drift above which the state is renormalized (and the
/// event counted).
pub const TRACE_RENORM_STEP: f64 = 1e-10;

/// Largest Hilbert-space dimension handled by [`Liouvillian`].
pub const MAX_DIM: usize = 9;

const STATE_TRACE_TOL: f64 = 1e-8;
const STATE_HERMITIAN_TOL: f64 = 1e-10;
const STATE_MIN_EIG_TOL: f64 = -1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Qops(#[from] QopsError),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
    #[error("invalid integration settings: {0}")]
    InvalidSettings(String),
    #[error("invariant breach at t = {t:.6}: {what} = {value:.3e}")]
    InvariantBreach {
        t: f64,
        what: &'static str,
        value: f64,
    },
}

/// Density operator together with the basis it is written in.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: ComplexMatrix,
    basis: Basis,
}

impl DensityMatrix {
    /// Validates trace, Hermiticity and positivity and stores the exactly
    /// Hermitian part.
    pub fn new(mat: ComplexMatrix, basis: Basis) -> Result<Self, DynamicsError> {
        if mat.dim() != basis.dim() {
            return Err(QopsError::DimensionMismatch {
                op: "DensityMatrix::new",
                left: basis.dim(),
                right: mat.dim(),
            }
            .into());
        }
        let herm = mat.hermiticity_error();
        if herm > STATE_HERMITIAN_TOL {
            return Err(DynamicsError::InvalidState(format!(
                "not Hermitian (‖ρ − ρ†‖ = {herm:.3e})"
            )));
        }
        let mat = hermitian_part(&mat);
        let tr = mat.trace().re;
        if (tr - 1.0).abs() > STATE_TRACE_TOL {
            return Err(DynamicsError::InvalidState(format!("trace is {tr}")));
        }
        let min_eig = hermitian_eigen(&mat)?.min_eigenvalue();
        if min_eig < STATE_MIN_EIG_TOL {
            return Err(DynamicsError::InvalidState(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { mat, basis })
    }

    pub fn pure(ket: &Ket, basis: Basis) -> Result<Self, DynamicsError> {
        if !ket.is_normalized() {
            return Err(DynamicsError::InvalidState(format!(
                "ket norm is {}",
                ket.norm()
            )));
        }
        Self::new(ket.projector(), basis)
    }

    pub fn named(state: NamedState, basis: Basis) -> Self {
        Self::pure(&state.ket(basis), basis).expect("named states are normalized")
    }

    /// `Σ w_k |ψ_k⟩⟨ψ_k|`.
    pub fn mixture(components: &[(f64, Ket)], basis: Basis) -> Result<Self, DynamicsError> {
        let mut mat = ComplexMatrix::zeros(basis.dim());
        for (w, ket) in components {
            if *w < 0.0 {
                return Err(DynamicsError::InvalidState(format!("negative weight {w}")));
            }
            mat.add_scaled_assign(C64::new(*w, 0.0), &ket.projector())?;
        }
        Self::new(mat, basis)
    }

    /// Builds a state without validation. The caller guarantees the
    /// density-matrix invariants (used inside integrators).
    pub(crate) fn from_trusted(mat: ComplexMatrix, basis: Basis) -> Self {
        Self { mat, basis }
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.mat
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.mat
    }
}

fn hermitian_part(m: &ComplexMatrix) -> ComplexMatrix {
    let n = m.dim();
    let mut out = m.clone();
    for r in 0..n {
        out[(r, r)] = C64::new(m[(r, r)].re, 0.0);
        for c in (r + 1)..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)].conj());
            out[(r, c)] = v;
            out[(c, r)] = v.conj();
        }
    }
    out
}

/// One sample of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    /// Dimensionless time `Ω_r t`.
    pub t: f64,
    /// `Tr[ρ|D⟩⟨D|]`.
    pub p_d: f64,
    /// `⟨D|ρ|D⟩`.
    pub fidelity: f64,
    pub purity: f64,
    pub f1: f64,
    pub f2: f64,
    /// `Im⟨11|ρ|D⟩`.
    pub a1: f64,
    /// `Im⟨D|ρ|00⟩`.
    pub a2: f64,
    /// `Tr ρ − 1`.
    pub trace_err: f64,
    pub min_eig: f64,
}

impl Record {
    pub fn t_over_2pi(&self) -> f64 {
        self.t / std::f64::consts::TAU
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<Record>,
    /// Number of per-step trace corrections applied.
    pub renormalizations: usize,
    pub final_state: DensityMatrix,
    pub dt: f64,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn last(&self) -> &Record {
        self.records
            .last()
            .expect("trajectories hold at least one record")
    }

    /// Record closest to dimensionless time `t`.
    pub fn at(&self, t: f64) -> &Record {
        self.records
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("non-empty")
    }

    /// Record closest to `Ω_r t/2π = t_over_2pi`.
    pub fn at_over_2pi(&self, t_over_2pi: f64) -> &Record {
        self.at(t_over_2pi * std::f64::consts::TAU)
    }

    /// First recorded time (in units of `2π/Ω_r`) with fidelity `≥ level`.
    pub fn first_crossing_over_2pi(&self, level: f64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.fidelity >= level)
            .map(|r| r.t_over_2pi())
    }

    pub fn max_trace_err(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.trace_err.abs())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.min_eig)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Probe states used to evaluate observables.
#[derive(Debug, Clone)]
pub struct Observer {
    dark: Ket,
    s11: Ket,
    s00: Ket,
}

impl Observer {
    pub fn new(dark: Ket, s11: Ket, s00: Ket) -> Self {
        Self { dark, s11, s00 }
    }

    pub fn for_basis(basis: Basis) -> Self {
        Self::new(
            NamedState::Dark.ket(basis),
            NamedState::S11.ket(basis),
            NamedState::S00.ket(basis),
        )
    }

    /// Probes transformed into the basis `u†·(old basis)`, where the columns
    /// of `u` are the new basis vectors.
    pub fn rotated(&self, u: &ComplexMatrix) -> Self {
        let ud = u.adjoint();
        Self::new(
            ud.apply(&self.dark).expect("dims"),
            ud.apply(&self.s11).expect("dims"),
            ud.apply(&self.s00).expect("dims"),
        )
    }

    pub fn dark(&self) -> &Ket {
        &self.dark
    }

    /// `⟨D|ρ|D⟩`.
    pub fn fidelity(&self, rho: &ComplexMatrix) -> f64 {
        sandwich(rho, &self.dark, &self.dark).re
    }

    pub fn observe(
        &self,
        t: f64,
        rho: &ComplexMatrix,
        controls: [f64; 2],
    ) -> Result<Record, QopsError> {
        let fidelity = self.fidelity(rho);
        let purity = rho.as_slice().iter().map(|z| z.norm_sqr()).sum();
        Ok(Record {
            t,
            p_d: fidelity,
            fidelity,
            purity,
            f1: controls[0],
            f2: controls[1],
            a1: sandwich(rho, &self.s11, &self.dark).im,
            a2: sandwich(rho, &self.dark, &self.s00).im,
            trace_err: rho.trace().re - 1.0,
            min_eig: hermitian_eigen(rho)?.min_eigenvalue(),
        })
    }
}

/// `⟨a|ρ|b⟩` without allocating.
fn sandwich(rho: &ComplexMatrix, a: &Ket, b: &Ket) -> C64 {
    let n = rho.dim();
    let m = rho.as_slice();
    let mut acc = ZERO;
    for r in 0..n {
        let ar = a[r].conj();
        if ar == ZERO {
            continue;
        }
        let mut row = ZERO;
        for c in 0..n {
            row += m[r * n + c] * b[c];
        }
        acc += ar * row;
    }
    acc
}

/// Observables of `rho` with zero control fields.
pub fn observables(rho: &DensityMatrix) -> Record {
    Observer::for_basis(rho.basis())
        .observe(0.0, rho.matrix(), [0.0, 0.0])
        .expect("basis-consistent probes")
}

/// `−i[H,ρ] + Σ_L (LρL† − ½{L†L, ρ})`, dense reference form.
pub fn lindblad_rhs(
    rho: &DensityMatrix,
    h: &ComplexMatrix,
    collapse: &[ComplexMatrix],
) -> Result<ComplexMatrix, DynamicsError> {
    let r = rho.matrix();
    let mut out = commutator(h, r)?.scale(-I);
    for l in collapse {
        let ld = l.adjoint();
        let ldl = ld.matmul(l)?;
        out = out.add(&l.matmul(r)?.matmul(&ld)?)?;
        out.add_scaled_assign(C64::new(-0.5, 0.0), &ldl.matmul(r)?)?;
        out.add_scaled_assign(C64::new(-0.5, 0.0), &r.matmul(&ldl)?)?;
    }
    Ok(out)
}

/// Sparse operator as a list of `(row, col, value)` entries.
#[derive(Debug, Clone, Default)]
pub struct SparseOp {
    entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    pub fn from_dense(m: &ComplexMatrix) -> Self {
        Self::from_dense_pruned(m, 0.0)
    }

    /// Keeps entries with `|v| > tol`.
    pub fn from_dense_pruned(m: &ComplexMatrix, tol: f64) -> Self {
        let n = m.dim();
        let mut entries = Vec::new();
        for r in 0..n {
            for c in 0..n {
                let v = m[(r, c)];
                if v != ZERO && v.norm() > tol {
                    entries.push((r, c, v));
                }
            }
        }
        Self { entries }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `out += s·(self · rho)`.
    #[inline]
    fn mul_acc(&self, s: C64, rho: &[C64], n: usize, out: &mut [C64]) {
        for &(r, c, v) in &self.entries {
            let w = s * v;
            let src = &rho[c * n..(c + 1) * n];
            let dst = &mut out[r * n..(r + 1) * n];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += w * x;
            }
        }
    }

    /// `out += self · rho · self†`.
    #[inline]
    fn sandwich_acc(&self, rho: &[C64], n: usize, out: &mut [C64]) {
        for &(a, i, v1) in &self.entries {
            for &(b, j, v2) in &self.entries {
                out[a * n + b] += v1 * v2.conj() * rho[i * n + j];
            }
        }
    }
}

/// Precompiled Lindblad generator with optional externally weighted
/// Hermitian drive terms:
/// `ρ̇ = −i[H + Σ_k c_k G_k, ρ] + Σ_L D_L[ρ]`.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    dim: usize,
    h_eff: SparseOp,
    jumps: Vec<SparseOp>,
    drives: Vec<SparseOp>,
}

impl Liouvillian {
    pub fn new(
        h: &ComplexMatrix,
        collapse: &[ComplexMatrix],
        drives: &[ComplexMatrix],
    ) -> Result<Self, DynamicsError> {
        Self::with_tolerance(h, collapse, drives, 0.0)
    }

    /// Like [`Liouvillian::new`] but drops operator entries with modulus at
    /// most `tol`, for operators carrying round-off from a basis change.
    pub fn with_tolerance(
        h: &ComplexMatrix,
        collapse: &[ComplexMatrix],
        drives: &[ComplexMatrix],
        tol: f64,
    ) -> Result<Self, DynamicsError> {
        let dim = h.dim();
        if dim > MAX_DIM {
            return Err(DynamicsError::InvalidSettings(format!(
                "dimension {dim} exceeds {MAX_DIM}"
            )));
        }
        let mut h_eff = h.clone();
        for l in collapse {
            if l.dim() != dim {
                return Err(QopsError::DimensionMismatch {
                    op: "Liouvillian collapse",
                    left: dim,
                    right: l.dim(),
                }
                .into());
            }
            let ldl = l.adjoint().matmul(l)?;
            h_eff.add_scaled_assign(C64::new(0.0, -0.5), &ldl)?;
        }
        for d in drives {
            if d.dim() != dim {
                return Err(QopsError::DimensionMismatch {
                    op: "Liouvillian drive",
                    left: dim,
                    right: d.dim(),
                }
                .into());
            }
        }
        Ok(Self {
            dim,
            h_eff: SparseOp::from_dense_pruned(&h_eff, tol),
            jumps: collapse
                .iter()
                .map(|l| SparseOp::from_dense_pruned(l, tol))
                .collect(),
            drives: drives
                .iter()
                .map(|d| SparseOp::from_dense_pruned(d, tol))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_drives(&self) -> usize {
        self.drives.len()
    }

    /// Writes `ρ̇` into `out`. `rho` must be Hermitian; the result is
    /// Hermitian by construction.
    pub fn apply(&self, rho: &ComplexMatrix, coeffs: &[f64], out: &mut ComplexMatrix) {
        let n = self.dim;
        assert!(rho.dim() == n && out.dim() == n);
        assert_eq!(coeffs.len(), self.drives.len(), "one coefficient per drive");
        let r = rho.as_slice();
        let mut buf = [ZERO; MAX_DIM * MAX_DIM];
        let x = &mut buf[..n * n];
        self.h_eff.mul_acc(C64::new(1.0, 0.0), r, n, x);
        for (d, &c) in self.drives.iter().zip(coeffs) {
            if c != 0.0 {
                d.mul_acc(C64::new(c, 0.0), r, n, x);
            }
        }
        let o = out.as_mut_slice();
        o.fill(ZERO);
        for jump in &self.jumps {
            jump.sandwich_acc(r, n, o);
        }
        // −i(H_eff ρ − ρ H_eff†) = −iX + (−iX)† with X = H_eff ρ.
        for a in 0..n {
            for b in a..n {
                let v = o[a * n + b] - I * x[a * n + b] + I * x[b * n + a].conj();
                o[a * n + b] = v;
                o[b * n + a] = v.conj();
            }
            o[a * n + a].im = 0.0;
        }
    }
}

/// State-and-time dependent right-hand side `ρ̇ = G(t, ρ)`.
pub trait Generator: Sync {
    fn dim(&self) -> usize;

    /// Writes `G(t, ρ)` into `out`.
    fn rhs(&self, t: f64, rho: &ComplexMatrix, out: &mut ComplexMatrix);

    /// Control field values `(f₁, f₂)` in effect at `(t, ρ)`.
    fn controls(&self, _t: f64, _rho: &ComplexMatrix) -> [f64; 2] {
        [0.0, 0.0]
    }
}

/// Time-independent generator without drives.
#[derive(Debug, Clone)]
pub struct StaticGenerator {
    liouvillian: Liouvillian,
}

impl StaticGenerator {
    pub fn new(h: &ComplexMatrix, collapse: &[ComplexMatrix]) -> Result<Self, DynamicsError> {
        Ok(Self {
            liouvillian: Liouvillian::new(h, collapse, &[])?,
        })
    }
}

impl Generator for StaticGenerator {
    fn dim(&self) -> usize {
        self.liouvillian.dim()
    }

    fn rhs(&self, _t: f64, rho: &ComplexMatrix, out: &mut ComplexMatrix) {
        self.liouvillian.apply(rho, &[], out);
    }
}

/// Adapts a closure `(t, ρ) → ρ̇` into a [`Generator`].
pub struct FnGenerator<F> {
    dim: usize,
    f: F,
}

impl<F> FnGenerator<F>
where
    F: Fn(f64, &ComplexMatrix) -> ComplexMatrix + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Generator for FnGenerator<F>
where
    F: Fn(f64, &ComplexMatrix) -> ComplexMatrix + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, rho: &ComplexMatrix, out: &mut ComplexMatrix) {
        *out = (self.f)(t, rho);
    }
}

/// Time grid and sampling for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    /// Final dimensionless time `Ω_r t`.
    pub t_end: f64,
    /// Largest admissible step. The step actually used divides
    /// `record_interval` evenly.
    pub max_dt: f64,
    /// Sampling interval in dimensionless time.
    pub record_interval: f64,
}

impl IntegrationOptions {
    pub fn new(t_end: f64, max_dt: f64) -> Self {
        Self {
            t_end,
            max_dt,
            record_interval: std::f64::consts::TAU,
        }
    }

    /// `(dt, steps per record, total steps)`. The last step is shortened
    /// when `t_end` is not a whole number of steps; see [`Self::step`].
    pub fn grid(&self) -> Result<(f64, usize, usize), DynamicsError> {
        if !(self.max_dt > 0.0 && self.max_dt.is_finite()) {
            return Err(DynamicsError::InvalidSettings(format!(
                "dt = {}",
                self.max_dt
            )));
        }
        if !(self.record_interval > 0.0 && self.record_interval.is_finite()) {
            return Err(DynamicsError::InvalidSettings(format!(
                "record interval = {}",
                self.record_interval
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(DynamicsError::InvalidSettings(format!(
                "t_end = {}",
                self.t_end
            )));
        }
        let stride = (self.record_interval / self.max_dt * (1.0 - 1e-12))
            .ceil()
            .max(1.0) as usize;
        let dt = self.record_interval / stride as f64;
        let x = self.t_end / dt;
        let steps = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) {
            x.round()
        } else {
            x.ceil()
        } as usize;
        Ok((dt, stride, steps))
    }

    /// Start time and length of step `n` on the grid `dt`.
    pub fn step(&self, dt: f64, n: usize) -> (f64, f64) {
        let t = n as f64 * dt;
        (t, dt.min(self.t_end - t))
    }

    /// Time reached after `n` steps.
    pub fn time_after(&self, dt: f64, n: usize) -> f64 {
        (n as f64 * dt).min(self.t_end)
    }
}

/// Buffers for one RK4 step.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k: [ComplexMatrix; 4],
    stage: ComplexMatrix,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| ComplexMatrix::zeros(dim)),
            stage: ComplexMatrix::zeros(dim),
        }
    }
}

/// Advances `rho` by one classical RK4 step. Each stage re-evaluates the
/// generator at the stage state.
pub fn rk4_step<G: Generator + ?Sized>(
    gen: &G,
    t: f64,
    dt: f64,
    rho: &mut ComplexMatrix,
    ws: &mut Rk4Workspace,
) {
    let half = 0.5 * dt;
    let Rk4Workspace { k, stage } = ws;
    let [k1, k2, k3, k4] = k;

    gen.rhs(t, rho, k1);
    axpy_into(stage, rho, half, k1);
    gen.rhs(t + half, stage, k2);
    axpy_into(stage, rho, half, k2);
    gen.rhs(t + half, stage, k3);
    axpy_into(stage, rho, dt, k3);
    gen.rhs(t + dt, stage, k4);

    let w = dt / 6.0;
    let r = rho.as_mut_slice();
    let (a, b, c, d) = (k1.as_slice(), k2.as_slice(), k3.as_slice(), k4.as_slice());
    for i in 0..r.len() {
        r[i] += w * (a[i] + 2.0 * (b[i] + c[i]) + d[i]);
    }
}

/// `out = x + s·y`.
#[inline]
fn axpy_into(out: &mut ComplexMatrix, x: &ComplexMatrix, s: f64, y: &ComplexMatrix) {
    for ((o, a), b) in out
        .as_mut_slice()
        .iter_mut()
        .zip(x.as_slice())
        .zip(y.as_slice())
    {
        *o = a + s * b;
    }
}

/// Integrates `ρ̇ = G(t, ρ)` with fixed-step RK4 from `t = 0`, sampling
/// observables every `record_interval`.
pub fn integrate<G: Generator + ?Sized>(
    rho0: &DensityMatrix,
    gen: &G,
    opts: &IntegrationOptions,
) -> Result<Trajectory, DynamicsError> {
    integrate_observed(rho0, gen, opts, &Observer::for_basis(rho0.basis()))
}

/// [`integrate`] with explicit observable probes.
pub fn integrate_observed<G: Generator + ?Sized>(
    rho0: &DensityMatrix,
    gen: &G,
    opts: &IntegrationOptions,
    observer: &Observer,
) -> Result<Trajectory, DynamicsError> {
    if gen.dim() != rho0.dim() {
        return Err(QopsError::DimensionMismatch {
            op: "integrate",
            left: gen.dim(),
            right: rho0.dim(),
        }
        .into());
    }
    let (dt, stride, steps) = opts.grid()?;
    let mut rho = rho0.matrix().clone();
    let mut ws = Rk4Workspace::new(rho.dim());
    let mut records = Vec::with_capacity(steps / stride + 2);
    let mut renormalizations = 0;
    let mut prev_trace = rho.trace().re;

    let mut sample = |step: usize, rho: &ComplexMatrix| -> Result<(), DynamicsError> {
        let t = opts.time_after(dt, step);
        let rec = observer.observe(t, rho, gen.controls(t, rho))?;
        if rec.min_eig < MIN_EIG_ABORT {
            return Err(DynamicsError::InvariantBreach {
                t,
                what: "minimum eigenvalue",
                value: rec.min_eig,
            });
        }
        records.push(rec);
        Ok(())
    };

    sample(0, &rho)?;
    for step in 0..steps {
        let (t, h) = opts.step(dt, step);
        rk4_step(gen, t, h, &mut rho, &mut ws);
        let tr = rho.trace().re;
        if !tr.is_finite() || (tr - 1.0).abs() > TRACE_ABORT {
            return Err(DynamicsError::InvariantBreach {
                t: t + h,
                what: "trace error",
                value: tr - 1.0,
            });
        }
        if (tr - prev_trace).abs() > TRACE_RENORM_STEP {
            log::warn!(
                "trace drifted by {:.3e} at t = {:.4}; renormalizing",
                tr - prev_trace,
                t + h
            );
            let inv = 1.0 / tr;
            rho.as_mut_slice().iter_mut().for_each(|z| *z *= inv);
            renormalizations += 1;
            prev_trace = 1.0;
        } else {
            prev_trace = tr;
        }
        let done = step + 1;
        if done % stride == 0 || done == steps {
            sample(done, &rho)?;
        }
    }

    Ok(Trajectory {
        records,
        renormalizations,
        final_state: DensityMatrix::from_trusted(rho, rho0.basis()),
        dt,
    })
}

/// Largest step allowed by `dt ≤ 0.05/ω_max`, capped at `cap`.
pub fn step_for_frequency(omega_max: f64, cap: f64) -> f64 {
    if omega_max > 0.0 {
        (0.05 / omega_max).min(cap)
    } else {
        cap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_collapse_ops, model_hamiltonian, Model, SystemParams};
    use crate::qops::test_util::{random_hermitian, random_matrix};
    use approx::assert_abs_diff_eq;

    fn random_state(dim: usize, basis: Basis, seed: u64) -> DensityMatrix {
        let a = random_matrix(dim, seed);
        let m = a.matmul(&a.adjoint()).unwrap();
        let tr = m.trace().re;
        DensityMatrix::new(m.scale_real(1.0 / tr), basis).unwrap()
    }

    #[test]
    fn observables_of_dark_state() {
        for basis in [Basis::Product, Basis::Collective, Basis::Reduced] {
            let rec = observables(&DensityMatrix::named(NamedState::Dark, basis));
            assert_abs_diff_eq!(rec.p_d, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(rec.fidelity, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(rec.purity, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn observables_of_maximally_mixed_reduced_state() {
        let rho =
            DensityMatrix::new(ComplexMatrix::identity(5).scale_real(0.2), Basis::Reduced).unwrap();
        let rec = observables(&rho);
        assert_abs_diff_eq!(rec.fidelity, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(rec.purity, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(rec.min_eig, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn observables_of_product_state_10() {
        // |10⟩ = (|B⟩ + |D⟩)/√2: F = 1/2 and no coherence with |00⟩ or |11⟩.
        for basis in [Basis::Product, Basis::Collective] {
            let rec = observables(&DensityMatrix::named(NamedState::S10, basis));
            assert_abs_diff_eq!(rec.fidelity, 0.5, epsilon = 1e-15);
            assert_eq!(rec.a1, 0.0);
            assert_eq!(rec.a2, 0.0);
        }
    }

    #[test]
    fn density_matrix_validation() {
        let bad_trace = ComplexMatrix::identity(5).scale_real(0.3);
        assert!(DensityMatrix::new(bad_trace, Basis::Reduced).is_err());
        let negative = ComplexMatrix::from_real_diagonal(&[1.5, -0.5, 0.0, 0.0, 0.0]);
        assert!(DensityMatrix::new(negative, Basis::Reduced).is_err());
        let wrong_dim = ComplexMatrix::identity(4).scale_real(0.25);
        assert!(DensityMatrix::new(wrong_dim, Basis::Reduced).is_err());
        let mut non_herm = ComplexMatrix::identity(5).scale_real(0.2);
        non_herm[(0, 1)] = C64::new(0.1, 0.0);
        assert!(DensityMatrix::new(non_herm, Basis::Reduced).is_err());
    }

    #[test]
    fn dark_state_is_steady_under_effective_generators() {
        let p = SystemParams::reference();
        for model in [Model::Effective, Model::EffectiveDirect] {
            let h = model_hamiltonian(&p, model).unwrap();
            let ls = build_collapse_ops(&p, model);
            let rho = DensityMatrix::named(NamedState::Dark, model.basis());
            let d = lindblad_rhs(&rho, &h, &ls).unwrap();
            assert!(d.max_abs() <= 1e-12, "{model}: {}", d.max_abs());
        }
    }

    #[test]
    fn commuting_state_without_decay_is_stationary() {
        let h5 = ComplexMatrix::from_real_diagonal(&[0.3, -1.0, 2.0, 0.1, 0.0]);
        let rho = DensityMatrix::new(
            ComplexMatrix::from_real_diagonal(&[0.2, 0.5, 0.3, 0.0, 0.0]),
            Basis::Reduced,
        )
        .unwrap();
        assert_eq!(lindblad_rhs(&rho, &h5, &[]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn generator_is_trace_preserving() {
        for seed in 0..10 {
            let h = random_hermitian(9, seed);
            let ls: Vec<_> = (0..3).map(|k| random_matrix(9, 100 * seed + k)).collect();
            let rho = random_state(9, Basis::Product, 7 + seed);
            let d = lindblad_rhs(&rho, &h, &ls).unwrap();
            assert!(d.trace().norm() <= 1e-12);
        }
    }

    #[test]
    fn sparse_kernel_matches_dense_reference() {
        let p = SystemParams::reference();
        for model in [Model::Full, Model::Effective, Model::EffectiveDirect] {
            let h = model_hamiltonian(&p, model).unwrap();
            let ls = build_collapse_ops(&p, model);
            let drive = random_hermitian(model.dim(), 3);
            let liou = Liouvillian::new(&h, &ls, std::slice::from_ref(&drive)).unwrap();
            let rho = random_state(model.dim(), model.basis(), 42);
            let mut out = ComplexMatrix::zeros(model.dim());
            liou.apply(rho.matrix(), &[0.7], &mut out);
            let mut htot = h.clone();
            htot.add_scaled_assign(C64::new(0.7, 0.0), &drive).unwrap();
            let reference = lindblad_rhs(&rho, &htot, &ls).unwrap();
            let diff = out.sub(&reference).unwrap().max_abs();
            assert!(diff < 1e-14, "{model}: {diff}");
            assert_eq!(out.hermiticity_error(), 0.0);
        }
    }

    #[test]
    fn final_step_lands_on_t_end() {
        let opts = IntegrationOptions::new(100.0, 0.1);
        let (dt, _, steps) = opts.grid().unwrap();
        assert!((steps as f64 - 1.0) * dt < 100.0 && steps as f64 * dt > 100.0);
        assert_eq!(opts.time_after(dt, steps), 100.0);
        let (t, last) = opts.step(dt, steps - 1);
        assert!((t + last - 100.0).abs() < 1e-12 && last < dt);
    }

    #[test]
    fn grid_divides_record_interval() {
        let opts = IntegrationOptions::new(std::f64::consts::TAU * 10.0, 0.1);
        let (dt, stride, steps) = opts.grid().unwrap();
        assert_eq!(stride, 63);
        assert!(dt <= 0.1);
        assert_eq!(steps, 630);
        let bad = IntegrationOptions::new(1.0, 0.0);
        assert!(bad.grid().is_err());
    }

    #[test]
    fn dark_state_trajectory_is_constant() {
        let p = SystemParams::reference();
        let model = Model::Effective;
        let gen = StaticGenerator::new(
            &model_hamiltonian(&p, model).unwrap(),
            &build_collapse_ops(&p, model),
        )
        .unwrap();
        let rho0 = DensityMatrix::named(NamedState::Dark, model.basis());
        let traj = integrate(
            &rho0,
            &gen,
            &IntegrationOptions::new(200.0 * std::f64::consts::TAU, 0.1),
        )
        .unwrap();
        assert_eq!(traj.records.len(), 201);
        for r in &traj.records {
            assert_abs_diff_eq!(r.fidelity, 1.0, epsilon = 1e-12);
        }
        assert_eq!(traj.renormalizations, 0);
    }

    #[test]
    fn rk4_matches_closed_form_two_level_decay() {
        // Pure decay |rr⟩ → shelves: population of |rr⟩ is exp(−2γt).
        let p = SystemParams {
            omega_m: 0.0,
            omega_r: 0.0,
            delta_m: 0.0,
            ..SystemParams::reference()
        };
        let p = SystemParams { gamma: 0.05, ..p };
        let model = Model::EffectiveDirect;
        let gen =
            StaticGenerator::new(&ComplexMatrix::zeros(5), &build_collapse_ops(&p, model)).unwrap();
        let rho0 = DensityMatrix::named(NamedState::RR, model.basis());
        let opts = IntegrationOptions {
            t_end: 20.0,
            max_dt: 0.1,
            record_interval: 20.0,
        };
        let traj = integrate(&rho0, &gen, &opts).unwrap();
        let pop_rr = traj.final_state.matrix()[(4, 4)].re;
        assert_abs_diff_eq!(pop_rr, (-2.0 * 0.05 * 20.0f64).exp(), epsilon = 1e-9);
        // A quarter of the decayed population lands in |D⟩.
        assert_abs_diff_eq!(traj.last().fidelity, 0.25 * (1.0 - pop_rr), epsilon = 1e-9);
    }

    #[test]
    fn lossless_effective_evolution_matches_eigen_expansion() {
        let p = SystemParams {
            gamma: 0.0,
            ..SystemParams::reference()
        };
        let model = Model::EffectiveDirect;
        let gen = StaticGenerator::new(&model_hamiltonian(&p, model).unwrap(), &[]).unwrap();
        let psi0 = NamedState::S10.ket(Basis::Reduced);
        let rho0 = DensityMatrix::pure(&psi0, Basis::Reduced).unwrap();
        let t_end = 300.0 * std::f64::consts::TAU;
        let traj = integrate(&rho0, &gen, &IntegrationOptions::new(t_end, 0.1)).unwrap();
        let psi = crate::model::coherent_evolve_analytic(&psi0, &p, t_end).unwrap();
        let diff = traj
            .final_state
            .matrix()
            .sub(&psi.projector())
            .unwrap()
            .max_abs();
        assert!(diff <= 1e-8, "{diff}");
    }

    #[test]
    fn halving_the_step_changes_little() {
        let p = SystemParams::reference();
        let model = Model::Effective;
        let gen = StaticGenerator::new(
            &model_hamiltonian(&p, model).unwrap(),
            &build_collapse_ops(&p, model),
        )
        .unwrap();
        let rho0 = DensityMatrix::named(NamedState::S10, model.basis());
        let t_end = 200.0 * std::f64::consts::TAU;
        let coarse = integrate(&rho0, &gen, &IntegrationOptions::new(t_end, 0.1)).unwrap();
        let fine = integrate(&rho0, &gen, &IntegrationOptions::new(t_end, 0.05)).unwrap();
        assert_eq!(coarse.records.len(), fine.records.len());
        for (a, b) in coarse.records.iter().zip(&fine.records) {
            assert_abs_diff_eq!(a.t, b.t, epsilon = 1e-9);
            assert_abs_diff_eq!(a.fidelity, b.fidelity, epsilon = 1e-8);
        }
    }

    #[test]
    fn full_and_effective_models_agree_at_short_times() {
        let p = SystemParams::reference();
        let t_end = 50.0 * std::f64::consts::TAU;
        let run = |model: Model, dt: f64| {
            let gen = StaticGenerator::new(
                &model_hamiltonian(&p, model).unwrap(),
                &build_collapse_ops(&p, model),
            )
            .unwrap();
            let rho0 = DensityMatrix::named(NamedState::S10, model.basis());
            integrate(&rho0, &gen, &IntegrationOptions::new(t_end, dt)).unwrap()
        };
        let full = run(Model::Full, 5e-4);
        let eff = run(Model::Effective, 0.1);
        for (a, b) in full.records.iter().zip(&eff.records) {
            assert_abs_diff_eq!(a.fidelity, b.fidelity, epsilon = 2e-3);
        }
    }

    #[test]
    fn closure_generator_is_accepted() {
        let gen = FnGenerator::new(5, |_t, rho: &ComplexMatrix| ComplexMatrix::zeros(rho.dim()));
        let rho0 = DensityMatrix::named(NamedState::S00, Basis::Reduced);
        let traj = integrate(&rho0, &gen, &IntegrationOptions::new(10.0, 0.5)).unwrap();
        assert_eq!(traj.final_state, rho0);
    }

    #[test]
    fn invariant_breach_aborts() {
        // A generator that pumps trace in violates trace preservation.
        let gen = FnGenerator::new(5, |_t, _rho: &ComplexMatrix| {
            ComplexMatrix::identity(5).scale_real(1e-3)
        });
        let rho0 = DensityMatrix::named(NamedState::S00, Basis::Reduced);
        let err = integrate(&rho0, &gen, &IntegrationOptions::new(10.0, 0.1)).unwrap_err();
        assert!(matches!(
            err,
            DynamicsError::InvariantBreach {
                what: "trace error",
                ..
            }
        ));
    }

    #[test]
    fn generator_dimension_must_match_state() {
        let gen = FnGenerator::new(9, |_t, rho: &ComplexMatrix| ComplexMatrix::zeros(rho.dim()));
        let rho0 = DensityMatrix::named(NamedState::S00, Basis::Reduced);
        assert!(integrate(&rho0, &gen, &IntegrationOptions::new(1.0, 0.1)).is_err());
    }
}
