//! Amplitude noise on the control parameters.
//!
//! Channel `k` adds `η_k ξ(t) H_sk` to the Hamiltonian, with `ξ` Gaussian
//! white noise. Averaged over realizations this produces the dissipator
//! `−(η_k²/2)[H_sk, [H_sk, ρ]]`, which is the Lindblad term of the single
//! Hermitian jump operator `η_k H_sk`. [`averaged_dissipator`] evaluates the
//! double commutator directly; the master-equation path uses the Lindblad
//! form; [`StochasticProblem`] samples the noise explicitly and serves as an
//! independent check of both.
//!
//! Sampled trajectories run in the eigenbasis of `H_sk`, where the exact
//! noise propagator `exp(−iη ΔW H_sk)` is a diagonal phase. Each step is a
//! symmetric split: half-step noise, an RK4 step of the deterministic
//! generator, half-step noise. Trajectory `i` draws from
//! `ChaCha8Rng::seed_from_u64(base_seed + i)`.

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::control::{control_hamiltonians, ControlConfig, ControlError};
use crate::dynamics::{
    integrate_observed, rk4_step, DensityMatrix, DynamicsError, Generator, IntegrationOptions,
    Liouvillian, Observer, Record, Rk4Workspace, Trajectory, MIN_EIG_ABORT, TRACE_ABORT,
};
use crate::model::{
    build_collapse_ops, level_op, model_hamiltonian, on_atom, product_index, Basis, Model,
    ModelError, SystemParams, LEVEL_0, LEVEL_1, LEVEL_R,
};
use crate::par::{map_indexed, Execution};
use crate::qops::{commutator, hermitian_eigen, ComplexMatrix, QopsError};

/// Trajectories per reduction chunk. Fixed so that ensemble sums do not
/// depend on the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise channel index must be 1..=4, got {0}")]
    UnknownChannel(usize),
    #[error("noise amplitude η must be finite and non-negative, got {0}")]
    InvalidEta(f64),
    #[error("control replay ends at t = {available:.6} but t_end = {required:.6}")]
    ReplayTooShort { available: f64, required: f64 },
    #[error("control replay needs at least two samples with increasing times")]
    InvalidReplay,
    #[error("an ensemble needs at least one trajectory")]
    EmptyEnsemble,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Qops(#[from] QopsError),
}

/// One noise channel: amplitude `η` and operator `H_s` in the product basis.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseChannel {
    pub index: usize,
    pub eta: f64,
    pub h_s: ComplexMatrix,
}

impl NoiseChannel {
    pub fn new(p: &SystemParams, index: usize, eta: f64) -> Result<Self, NoiseError> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(NoiseError::InvalidEta(eta));
        }
        let h_s = match index {
            1 => sum_over_atoms(&flip(LEVEL_0, LEVEL_1)).scale_real(0.5 * p.omega_m),
            2 => sum_over_atoms(&level_op(LEVEL_0, LEVEL_0)).scale_real(p.delta_m),
            3 => sum_over_atoms(&flip(LEVEL_1, LEVEL_R)).scale_real(0.5 * p.omega_r),
            4 => {
                let rr = product_index(LEVEL_R, LEVEL_R);
                ComplexMatrix::unit(9, rr, rr).scale_real(p.u_rr)
            }
            other => return Err(NoiseError::UnknownChannel(other)),
        };
        Ok(Self { index, eta, h_s })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self, NoiseError> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(NoiseError::InvalidEta(eta));
        }
        self.eta = eta;
        Ok(self)
    }

    /// `H_s` written in `basis`.
    pub fn operator_in(&self, basis: Basis) -> ComplexMatrix {
        basis.express_operator(&self.h_s)
    }

    /// Jump operator `η H_s` of the equivalent Lindblad term.
    pub fn jump_operator_in(&self, basis: Basis) -> ComplexMatrix {
        self.operator_in(basis).scale_real(self.eta)
    }
}

fn flip(a: usize, b: usize) -> ComplexMatrix {
    level_op(a, b).add(&level_op(b, a)).unwrap()
}

fn sum_over_atoms(op: &ComplexMatrix) -> ComplexMatrix {
    on_atom(op, 1).add(&on_atom(op, 2)).unwrap()
}

/// The four channels `(Ω_m, Δ_m, Ω_r, U_rr)` with `η = 0`.
pub fn build_noise_hamiltonians(p: &SystemParams) -> [NoiseChannel; 4] {
    std::array::from_fn(|k| NoiseChannel::new(p, k + 1, 0.0).expect("valid channel"))
}

/// `Σ_k −(η_k²/2)[H_sk, [H_sk, ρ]]` in the basis of `rho`.
pub fn averaged_dissipator(
    rho: &DensityMatrix,
    channels: &[NoiseChannel],
) -> Result<ComplexMatrix, NoiseError> {
    let mut out = ComplexMatrix::zeros(rho.dim());
    for ch in channels {
        if ch.eta == 0.0 {
            continue;
        }
        let h = ch.operator_in(rho.basis());
        let inner = commutator(&h, rho.matrix())?;
        let outer = commutator(&h, &inner)?;
        out.add_scaled_assign(C64::new(-0.5 * ch.eta * ch.eta, 0.0), &outer)?;
    }
    Ok(out)
}

/// Recorded control fields replayed by linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlReplay {
    times: Vec<f64>,
    values: Vec<[f64; 2]>,
}

impl ControlReplay {
    pub fn new(times: Vec<f64>, values: Vec<[f64; 2]>) -> Result<Self, NoiseError> {
        if times.len() < 2
            || times.len() != values.len()
            || times.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(NoiseError::InvalidReplay);
        }
        Ok(Self { times, values })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, NoiseError> {
        Self::new(
            traj.records.iter().map(|r| r.t).collect(),
            traj.records.iter().map(|r| [r.f1, r.f2]).collect(),
        )
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("at least two samples")
    }

    pub fn ensure_covers(&self, t_end: f64) -> Result<(), NoiseError> {
        if t_end > self.end() * (1.0 + 1e-12) {
            return Err(NoiseError::ReplayTooShort {
                available: self.end(),
                required: t_end,
            });
        }
        Ok(())
    }

    /// Interpolated `(f₁, f₂)` at `t`, held constant outside the sampled
    /// range.
    pub fn at(&self, t: f64) -> [f64; 2] {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        let (a, b) = (self.values[lo], self.values[hi]);
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }
}

/// Generator whose control fields follow a fixed time series.
#[derive(Debug, Clone)]
pub struct ReplayGenerator {
    liouvillian: Liouvillian,
    replay: Option<ControlReplay>,
}

impl ReplayGenerator {
    fn fields(&self, t: f64) -> [f64; 2] {
        self.replay.as_ref().map_or([0.0, 0.0], |r| r.at(t))
    }
}

impl Generator for ReplayGenerator {
    fn dim(&self) -> usize {
        self.liouvillian.dim()
    }

    fn rhs(&self, t: f64, rho: &ComplexMatrix, out: &mut ComplexMatrix) {
        let f = self.fields(t);
        self.liouvillian.apply(rho, &f, out);
    }

    fn controls(&self, t: f64, _rho: &ComplexMatrix) -> [f64; 2] {
        self.fields(t)
    }
}

/// `ρ̇ = −i[H + Σ_j f_j(t) H_j, ρ] + Σ_L D_L[ρ] + Σ_k D_k[ρ]` with `f_j`
/// replayed and the noise channels in Lindblad form.
pub fn noisy_controlled_generator(
    p: &SystemParams,
    cfg: &ControlConfig,
    replay: Option<ControlReplay>,
    channels: &[NoiseChannel],
    model: Model,
) -> Result<ReplayGenerator, NoiseError> {
    p.validate()?;
    cfg.validate()?;
    let basis = model.basis();
    let h = model_hamiltonian(p, model)?;
    let mut collapse = build_collapse_ops(p, model);
    for ch in channels.iter().filter(|c| c.eta > 0.0) {
        collapse.push(ch.jump_operator_in(basis));
    }
    let (h1, h2) = control_hamiltonians(cfg, model);
    Ok(ReplayGenerator {
        liouvillian: Liouvillian::new(&h, &collapse, &[h1, h2])?,
        replay,
    })
}

/// Integrates the noise-averaged master equation, returning an error if a
/// replay does not cover `opts.t_end`.
pub fn integrate_averaged(
    rho0: &DensityMatrix,
    gen: &ReplayGenerator,
    opts: &IntegrationOptions,
) -> Result<Trajectory, NoiseError> {
    if let Some(r) = &gen.replay {
        r.ensure_covers(opts.t_end)?;
    }
    Ok(integrate_observed(
        rho0,
        gen,
        opts,
        &Observer::for_basis(rho0.basis()),
    )?)
}

/// Everything needed to sample trajectories of one noise channel.
#[derive(Debug, Clone)]
pub struct StochasticProblem {
    basis: Basis,
    eta: f64,
    /// Eigenvalues of `H_s`.
    levels: Vec<f64>,
    /// Columns are the eigenvectors of `H_s` in the model basis.
    rotation: ComplexMatrix,
    generator: ReplayGenerator,
    observer: Observer,
}

impl StochasticProblem {
    pub fn new(
        p: &SystemParams,
        model: Model,
        channel: &NoiseChannel,
        cfg: &ControlConfig,
        replay: Option<ControlReplay>,
    ) -> Result<Self, NoiseError> {
        p.validate()?;
        cfg.validate()?;
        let basis = model.basis();
        let hs = channel.operator_in(basis);
        let eig = hermitian_eigen(&hs)?;
        let u = eig.vectors_as_columns();

        let h = model_hamiltonian(p, model)?.conjugate_by(&u)?;
        let collapse: Vec<_> = build_collapse_ops(p, model)
            .iter()
            .map(|l| l.conjugate_by(&u))
            .collect::<Result<_, _>>()?;
        let (h1, h2) = control_hamiltonians(cfg, model);
        let drives = [h1.conjugate_by(&u)?, h2.conjugate_by(&u)?];
        let scale = h.max_abs().max(1.0);
        let liouvillian = Liouvillian::with_tolerance(&h, &collapse, &drives, 1e-15 * scale)?;

        Ok(Self {
            basis,
            eta: channel.eta,
            levels: eig.eigenvalues,
            observer: Observer::for_basis(basis).rotated(&u),
            rotation: u,
            generator: ReplayGenerator {
                liouvillian,
                replay,
            },
        })
    }

    /// Runs one realization with seed `seed`, calling `visit(k, t, ρ)` at
    /// each sample with `ρ` in the noise eigenbasis.
    fn run(
        &self,
        rho0: &DensityMatrix,
        seed: u64,
        opts: &IntegrationOptions,
        mut visit: impl FnMut(usize, f64, &ComplexMatrix) -> Result<(), NoiseError>,
    ) -> Result<ComplexMatrix, NoiseError> {
        if rho0.basis() != self.basis {
            return Err(QopsError::DimensionMismatch {
                op: "stochastic trajectory",
                left: self.basis.dim(),
                right: rho0.dim(),
            }
            .into());
        }
        if let Some(r) = &self.generator.replay {
            r.ensure_covers(opts.t_end)?;
        }
        let (dt, stride, steps) = opts.grid()?;
        let n = rho0.dim();
        let mut rho = rho0.matrix().conjugate_by(&self.rotation)?;
        let mut ws = Rk4Workspace::new(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phases = vec![C64::new(1.0, 0.0); n];

        // Half-step kick: ΔW ~ N(0, h/2).
        let mut kick = |rho: &mut ComplexMatrix, rng: &mut ChaCha8Rng, h: f64| {
            if self.eta == 0.0 {
                return;
            }
            let dw: f64 = StandardNormal.sample(rng);
            let theta = -self.eta * (0.5 * h).sqrt() * dw;
            for (ph, e) in phases.iter_mut().zip(&self.levels) {
                *ph = C64::from_polar(1.0, theta * e);
            }
            let m = rho.as_mut_slice();
            for a in 0..n {
                for b in 0..n {
                    m[a * n + b] *= phases[a] * phases[b].conj();
                }
            }
        };

        visit(0, 0.0, &rho)?;
        let mut sample = 1;
        for step in 0..steps {
            let (t, h) = opts.step(dt, step);
            kick(&mut rho, &mut rng, h);
            rk4_step(&self.generator, t, h, &mut rho, &mut ws);
            kick(&mut rho, &mut rng, h);
            let tr = rho.trace().re;
            if !tr.is_finite() || (tr - 1.0).abs() > TRACE_ABORT {
                return Err(DynamicsError::InvariantBreach {
                    t: t + h,
                    what: "trace error",
                    value: tr - 1.0,
                }
                .into());
            }
            let done = step + 1;
            if done % stride == 0 || done == steps {
                visit(sample, opts.time_after(dt, done), &rho)?;
                sample += 1;
            }
        }
        Ok(rho)
    }

    fn observe(&self, t: f64, rho: &ComplexMatrix) -> Result<Record, NoiseError> {
        let rec = self.observer.observe(t, rho, self.generator.fields(t))?;
        if rec.min_eig < MIN_EIG_ABORT {
            return Err(DynamicsError::InvariantBreach {
                t,
                what: "minimum eigenvalue",
                value: rec.min_eig,
            }
            .into());
        }
        Ok(rec)
    }

    /// One sampled realization, with records and final state in the model
    /// basis convention.
    pub fn trajectory(
        &self,
        rho0: &DensityMatrix,
        seed: u64,
        opts: &IntegrationOptions,
    ) -> Result<Trajectory, NoiseError> {
        let mut records = Vec::new();
        let last = self.run(rho0, seed, opts, |_, t, rho| {
            records.push(self.observe(t, rho)?);
            Ok(())
        })?;
        let back = last.conjugate_by(&self.rotation.adjoint())?;
        Ok(Trajectory {
            records,
            renormalizations: 0,
            final_state: DensityMatrix::from_trusted(back, self.basis),
            dt: opts.grid()?.0,
        })
    }

    /// Mean over `n` realizations with seeds `base_seed + i`.
    pub fn ensemble(
        &self,
        rho0: &DensityMatrix,
        n: usize,
        base_seed: u64,
        opts: &IntegrationOptions,
        exec: Execution,
    ) -> Result<EnsembleSummary, NoiseError> {
        if n == 0 {
            return Err(NoiseError::EmptyEnsemble);
        }
        let n_chunks = n.div_ceil(CHUNK);
        let partials = map_indexed(exec, n_chunks, |c| {
            let mut acc = Accumulator::default();
            for i in (c * CHUNK)..((c + 1) * CHUNK).min(n) {
                let seed = base_seed.wrapping_add(i as u64);
                acc.add_trajectory(self, rho0, seed, opts)?;
            }
            Ok::<_, NoiseError>(acc)
        });
        let mut total = Accumulator::default();
        for part in partials {
            total.merge(part?);
        }
        total.finish(self, n)
    }
}

/// Ordered running sums of sampled states and fidelities.
#[derive(Debug, Default)]
struct Accumulator {
    times: Vec<f64>,
    rho_sum: Vec<ComplexMatrix>,
    f_sum: Vec<f64>,
    f_sq_sum: Vec<f64>,
}

impl Accumulator {
    fn add_trajectory(
        &mut self,
        problem: &StochasticProblem,
        rho0: &DensityMatrix,
        seed: u64,
        opts: &IntegrationOptions,
    ) -> Result<(), NoiseError> {
        let first = self.times.is_empty();
        problem.run(rho0, seed, opts, |k, t, rho| {
            let f = problem.observer.fidelity(rho);
            if first {
                self.times.push(t);
                self.rho_sum.push(rho.clone());
                self.f_sum.push(f);
                self.f_sq_sum.push(f * f);
            } else {
                self.rho_sum[k].add_scaled_assign(C64::new(1.0, 0.0), rho)?;
                self.f_sum[k] += f;
                self.f_sq_sum[k] += f * f;
            }
            Ok(())
        })?;
        Ok(())
    }

    fn merge(&mut self, other: Accumulator) {
        if self.times.is_empty() {
            *self = other;
            return;
        }
        for k in 0..self.times.len() {
            self.rho_sum[k]
                .add_scaled_assign(C64::new(1.0, 0.0), &other.rho_sum[k])
                .expect("same dims");
            self.f_sum[k] += other.f_sum[k];
            self.f_sq_sum[k] += other.f_sq_sum[k];
        }
    }

    fn finish(self, problem: &StochasticProblem, n: usize) -> Result<EnsembleSummary, NoiseError> {
        let nf = n as f64;
        let mut records = Vec::with_capacity(self.times.len());
        let mut f_std_err = Vec::with_capacity(self.times.len());
        for k in 0..self.times.len() {
            let mean = self.rho_sum[k].scale_real(1.0 / nf);
            records.push(problem.observe(self.times[k], &mean)?);
            let m = self.f_sum[k] / nf;
            let var = if n > 1 {
                ((self.f_sq_sum[k] - nf * m * m) / (nf - 1.0)).max(0.0)
            } else {
                0.0
            };
            f_std_err.push((var / nf).sqrt());
        }
        Ok(EnsembleSummary {
            records,
            f_std_err,
            trajectories: n,
        })
    }
}

/// Observables of the ensemble-mean state and the Monte Carlo standard
/// error of the fidelity at each sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub records: Vec<Record>,
    pub f_std_err: Vec<f64>,
    pub trajectories: usize,
}

impl EnsembleSummary {
    pub fn last(&self) -> (&Record, f64) {
        let k = self.records.len() - 1;
        (&self.records[k], self.f_std_err[k])
    }
}

/// One sampled realization of a single noise channel without control.
pub fn stochastic_trajectory(
    rho0: &DensityMatrix,
    p: &SystemParams,
    model: Model,
    channel: &NoiseChannel,
    seed: u64,
    opts: &IntegrationOptions,
) -> Result<Trajectory, NoiseError> {
    StochasticProblem::new(p, model, channel, &ControlConfig::off(), None)?
        .trajectory(rho0, seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{controlled_generator, ControlMode};
    use crate::dynamics::{integrate, lindblad_rhs, StaticGenerator};
    use crate::model::{build_full_hamiltonian, NamedState};
    use crate::qops::test_util::random_matrix;
    use crate::qops::Ket;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn random_state(basis: Basis, seed: u64) -> DensityMatrix {
        let a = random_matrix(basis.dim(), seed);
        let m = a.matmul(&a.adjoint()).unwrap();
        let tr = m.trace().re;
        DensityMatrix::new(m.scale_real(1.0 / tr), basis).unwrap()
    }

    fn channel(k: usize, eta: f64) -> NoiseChannel {
        NoiseChannel::new(&SystemParams::reference(), k, eta).unwrap()
    }

    #[test]
    fn noise_operators() {
        let p = SystemParams::reference();
        let chans = build_noise_hamiltonians(&p);
        for ch in &chans {
            assert_eq!(ch.h_s.hermiticity_error(), 0.0);
            assert_eq!(ch.eta, 0.0);
        }
        let rr = product_index(LEVEL_R, LEVEL_R);
        assert_eq!(chans[3].h_s[(rr, rr)].re, 100.0);
        // H_s1 is the microwave coupling with every other term switched off.
        let mw_only = SystemParams {
            omega_r: 0.0,
            delta_r: 0.0,
            delta_m: 0.0,
            u_rr: 0.0,
            ..p
        };
        assert_eq!(chans[0].h_s, build_full_hamiltonian(&mw_only));
        // Δ_m Σ|0⟩⟨0|: |00⟩ gets 2Δ_m.
        assert_abs_diff_eq!(chans[1].h_s[(0, 0)].re, 2.0 * p.delta_m);
    }

    #[test]
    fn channel_validation() {
        let p = SystemParams::reference();
        assert!(matches!(
            NoiseChannel::new(&p, 5, 0.1),
            Err(NoiseError::UnknownChannel(5))
        ));
        assert!(NoiseChannel::new(&p, 1, -0.1).is_err());
        assert!(channel(1, 0.0).with_eta(f64::INFINITY).is_err());
    }

    #[test]
    fn zero_amplitude_contributes_nothing() {
        let rho = random_state(Basis::Product, 1);
        let chans = build_noise_hamiltonians(&SystemParams::reference());
        assert_eq!(averaged_dissipator(&rho, &chans).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn dissipator_is_traceless_and_hermitian() {
        let chans: Vec<_> = (1..=4).map(|k| channel(k, 0.05 * k as f64)).collect();
        for seed in 0..10 {
            let rho = random_state(Basis::Product, 10 + seed);
            let d = averaged_dissipator(&rho, &chans).unwrap();
            assert!(d.trace().norm() <= 1e-12);
            assert!(d.hermiticity_error() <= 1e-12);
        }
    }

    #[test]
    fn dissipator_equals_lindblad_form() {
        let chans: Vec<_> = (1..=4).map(|k| channel(k, 0.03)).collect();
        for basis in [Basis::Product, Basis::Collective] {
            let rho = random_state(basis, 77);
            let d = averaged_dissipator(&rho, &chans).unwrap();
            let jumps: Vec<_> = chans.iter().map(|c| c.jump_operator_in(basis)).collect();
            let l = lindblad_rhs(&rho, &ComplexMatrix::zeros(9), &jumps).unwrap();
            assert!(d.sub(&l).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn dissipator_damps_eigenbasis_coherence() {
        // Coherence between H_s eigenstates with gap δ decays at η²δ²/2.
        let ch = channel(4, 0.1);
        let rr = product_index(LEVEL_R, LEVEL_R);
        let a = Ket::basis(9, 0);
        let b = Ket::basis(9, rr);
        let coh = ComplexMatrix::outer(&a, &b).unwrap();
        let mut m = a
            .projector()
            .scale_real(0.5)
            .add(&b.projector().scale_real(0.5))
            .unwrap();
        m.add_scaled_assign(C64::new(0.5, 0.0), &coh).unwrap();
        m.add_scaled_assign(C64::new(0.5, 0.0), &coh.adjoint())
            .unwrap();
        let rho = DensityMatrix::new(m, Basis::Product).unwrap();
        let d = averaged_dissipator(&rho, &[ch]).unwrap();
        let rate = -d[(0, rr)].re / rho.matrix()[(0, rr)].re;
        assert_abs_diff_eq!(rate, 0.5 * 0.01 * 100.0 * 100.0, epsilon = 1e-9);
        assert_eq!(d[(0, 0)].re, 0.0);
    }

    #[test]
    fn dark_state_is_immune_to_microwave_amplitude_noise() {
        let ch = channel(1, 0.5);
        let d = NamedState::Dark.ket(Basis::Product);
        assert!(ch.h_s.apply(&d).unwrap().norm() < 1e-15);
    }

    #[test]
    fn replay_interpolates_and_checks_coverage() {
        let r = ControlReplay::new(
            vec![0.0, 1.0, 3.0],
            vec![[0.0, 1.0], [2.0, 0.0], [4.0, 4.0]],
        )
        .unwrap();
        assert_eq!(r.at(0.5), [1.0, 0.5]);
        assert_eq!(r.at(2.0), [3.0, 2.0]);
        assert_eq!(r.at(1.0), [2.0, 0.0]);
        assert_eq!(r.at(10.0), [4.0, 4.0]);
        assert!(r.ensure_covers(3.0).is_ok());
        assert!(matches!(
            r.ensure_covers(3.5),
            Err(NoiseError::ReplayTooShort { .. })
        ));
        assert!(ControlReplay::new(vec![0.0], vec![[0.0, 0.0]]).is_err());
        assert!(ControlReplay::new(vec![0.0, 0.0], vec![[0.0, 0.0]; 2]).is_err());
    }

    #[test]
    fn noiseless_replay_reproduces_feedback_run() {
        let p = SystemParams::reference();
        let model = Model::Effective;
        let cfg = ControlConfig::new(0.08, 0.08, ControlMode::OnlyH1).unwrap();
        let rho0 = DensityMatrix::named(NamedState::S10, model.basis());
        let t_end = 300.0 * TAU;
        let fine = IntegrationOptions {
            t_end,
            max_dt: 0.1,
            record_interval: TAU / 16.0,
        };
        let closed = integrate(
            &rho0,
            &controlled_generator(&p, &cfg, model).unwrap(),
            &fine,
        )
        .unwrap();
        let replay = ControlReplay::from_trajectory(&closed).unwrap();
        let gen =
            noisy_controlled_generator(&p, &cfg, Some(replay), &[channel(1, 0.0)], model).unwrap();
        let open = integrate_averaged(&rho0, &gen, &IntegrationOptions::new(t_end, 0.1)).unwrap();
        assert_abs_diff_eq!(open.last().fidelity, closed.last().fidelity, epsilon = 1e-4);

        let short = ControlReplay::new(vec![0.0, 1.0], vec![[0.0, 0.0]; 2]).unwrap();
        let gen = noisy_controlled_generator(&p, &cfg, Some(short), &[], model).unwrap();
        assert!(integrate_averaged(&rho0, &gen, &IntegrationOptions::new(t_end, 0.1)).is_err());
    }

    #[test]
    fn zero_amplitude_sample_equals_deterministic_run() {
        let p = SystemParams::reference();
        for model in [Model::Effective, Model::EffectiveDirect] {
            let rho0 = DensityMatrix::named(NamedState::S10, model.basis());
            let opts = IntegrationOptions::new(100.0 * TAU, 0.1);
            let det = integrate(
                &rho0,
                &StaticGenerator::new(
                    &model_hamiltonian(&p, model).unwrap(),
                    &build_collapse_ops(&p, model),
                )
                .unwrap(),
                &opts,
            )
            .unwrap();
            for k in 1..=4 {
                let sto =
                    stochastic_trajectory(&rho0, &p, model, &channel(k, 0.0), 9, &opts).unwrap();
                for (a, b) in det.records.iter().zip(&sto.records) {
                    assert_abs_diff_eq!(a.fidelity, b.fidelity, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let p = SystemParams::reference();
        let model = Model::Effective;
        let rho0 = DensityMatrix::named(NamedState::S10, model.basis());
        let opts = IntegrationOptions::new(20.0 * TAU, TAU / 16.0);
        let ch = channel(3, 0.05);
        let a = stochastic_trajectory(&rho0, &p, model, &ch, 1234, &opts).unwrap();
        let b = stochastic_trajectory(&rho0, &p, model, &ch, 1234, &opts).unwrap();
        let c = stochastic_trajectory(&rho0, &p, model, &ch, 1235, &opts).unwrap();
        assert_eq!(a.records, b.records);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn ensemble_is_independent_of_execution_strategy() {
        let p = SystemParams::reference();
        let model = Model::EffectiveDirect;
        let rho0 = DensityMatrix::named(NamedState::S10, model.basis());
        let opts = IntegrationOptions::new(5.0 * TAU, TAU / 16.0);
        let prob = StochasticProblem::new(&p, model, &channel(2, 0.3), &ControlConfig::off(), None)
            .unwrap();
        let seq = prob
            .ensemble(&rho0, 150, 7, &opts, Execution::Sequential)
            .unwrap();
        let par = prob
            .ensemble(&rho0, 150, 7, &opts, Execution::Parallel)
            .unwrap();
        assert_eq!(seq, par);
        assert!(prob
            .ensemble(&rho0, 0, 7, &opts, Execution::Sequential)
            .is_err());
    }

    #[test]
    fn strong_noise_ensemble_matches_averaged_equation() {
        // A test-only channel σz on atom 1 turns |D⟩ into |B⟩, so noise
        // acts on F directly and strongly over a short horizon.
        let p = SystemParams::reference();
        let model = Model::EffectiveDirect;
        let sz = level_op(LEVEL_0, LEVEL_0)
            .sub(&level_op(LEVEL_1, LEVEL_1))
            .unwrap();
        let ch = NoiseChannel {
            index: 0,
            eta: 0.3,
            h_s: on_atom(&sz, 1),
        };
        let rho0 = DensityMatrix::named(NamedState::Dark, model.basis());
        let opts = IntegrationOptions {
            t_end: 10.0,
            max_dt: 0.05,
            record_interval: 2.5,
        };
        let gen = noisy_controlled_generator(
            &p,
            &ControlConfig::off(),
            None,
            std::slice::from_ref(&ch),
            model,
        )
        .unwrap();
        let avg = integrate_averaged(&rho0, &gen, &opts).unwrap();
        // Pure dephasing of the |10⟩/|01⟩ coherence (gap 2) dominates.
        assert!((avg.last().fidelity - 0.5 * (1.0 + (-2.0 * 0.09 * 10.0f64).exp())).abs() < 0.01);
        let prob = StochasticProblem::new(&p, model, &ch, &ControlConfig::off(), None).unwrap();
        let ens = prob
            .ensemble(&rho0, 2000, 11, &opts, Execution::Parallel)
            .unwrap();
        for (k, (a, b)) in avg.records.iter().zip(&ens.records).enumerate().skip(1) {
            let se = ens.f_std_err[k];
            assert!(se > 0.0);
            assert!(
                (a.fidelity - b.fidelity).abs() <= 3.0 * se,
                "t={} {} {} se={}",
                a.t,
                a.fidelity,
                b.fidelity,
                se
            );
            assert!(b.min_eig >= -1e-10);
        }
    }
}
