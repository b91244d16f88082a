//! Lyapunov feedback on the singlet fidelity.
//!
//! Each atom gets a ground-state coupling `H_j = λ_j(|0⟩_j⟨1| + h.c.)` whose
//! amplitude is set from the current state by
//! `f_j = −i⟨D|[H_j, ρ]|D⟩`. With that choice the coherent contribution to
//! `dF/dt` is `Σ_j f_j² ≥ 0`, so the distance `1 − F` never grows.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::dynamics::{DensityMatrix, DynamicsError, Generator, Liouvillian};
use crate::model::{
    build_collapse_ops, level_op, model_hamiltonian, on_atom, Basis, Model, ModelError, NamedState,
    SystemParams, LEVEL_0, LEVEL_1,
};
use crate::qops::{commutator, ComplexMatrix, Ket, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid control setting {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Which of the two control Hamiltonians is switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlMode {
    Both,
    OnlyH1,
    OnlyH2,
    Off,
}

impl ControlMode {
    pub fn name(self) -> &'static str {
        match self {
            ControlMode::Both => "both",
            ControlMode::OnlyH1 => "only_H1",
            ControlMode::OnlyH2 => "only_H2",
            ControlMode::Off => "off",
        }
    }

    /// Whether channel `j` (1 or 2) is enabled.
    pub fn enables(self, j: usize) -> bool {
        match self {
            ControlMode::Both => true,
            ControlMode::OnlyH1 => j == 1,
            ControlMode::OnlyH2 => j == 2,
            ControlMode::Off => false,
        }
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "both" => Ok(ControlMode::Both),
            "only_h1" => Ok(ControlMode::OnlyH1),
            "only_h2" => Ok(ControlMode::OnlyH2),
            "off" => Ok(ControlMode::Off),
            _ => Err(format!(
                "unknown control mode '{s}' (expected both, only_H1, only_H2 or off)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: ControlMode,
}

impl ControlConfig {
    pub fn new(lambda1: f64, lambda2: f64, mode: ControlMode) -> Result<Self, ControlError> {
        let cfg = Self {
            lambda1,
            lambda2,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn off() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            mode: ControlMode::Off,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ControlError::InvalidConfig {
                    field,
                    reason: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }

    pub fn lambda(&self, j: usize) -> f64 {
        match j {
            1 => self.lambda1,
            2 => self.lambda2,
            _ => panic!("control channel must be 1 or 2, got {j}"),
        }
    }

    /// Largest frequency the controls can add: `|f_j| ≤ 2λ_j` and
    /// `‖H_j‖ = λ_j`.
    pub fn max_frequency(&self) -> f64 {
        [1, 2]
            .into_iter()
            .filter(|&j| self.mode.enables(j))
            .map(|j| 2.0 * self.lambda(j) * self.lambda(j))
            .fold(0.0, f64::max)
    }
}

/// `(H₁, H₂)` written in `basis`.
pub fn control_hamiltonians_in(
    cfg: &ControlConfig,
    basis: Basis,
) -> (ComplexMatrix, ComplexMatrix) {
    let flip = level_op(LEVEL_0, LEVEL_1)
        .add(&level_op(LEVEL_1, LEVEL_0))
        .unwrap();
    let h = |j: usize| basis.express_operator(&on_atom(&flip, j).scale_real(cfg.lambda(j)));
    (h(1), h(2))
}

/// `(H₁, H₂)` written in the basis of `model`.
pub fn control_hamiltonians(cfg: &ControlConfig, model: Model) -> (ComplexMatrix, ComplexMatrix) {
    control_hamiltonians_in(cfg, model.basis())
}

/// `f_j = −i⟨D|[H_j, ρ]|D⟩`, evaluated literally from the commutator, with
/// disabled channels set to zero.
pub fn control_law(rho: &DensityMatrix, cfg: &ControlConfig) -> [f64; 2] {
    let (h1, h2) = control_hamiltonians_in(cfg, rho.basis());
    let dark = NamedState::Dark.ket(rho.basis());
    let f = |j: usize, h: &ComplexMatrix| {
        if !cfg.mode.enables(j) {
            return 0.0;
        }
        let c = commutator(h, rho.matrix()).expect("basis-consistent");
        let v = c.sandwich(&dark, &dark).expect("basis-consistent");
        (C64::new(0.0, -1.0) * v).re
    };
    [f(1, &h1), f(2, &h2)]
}

/// Precomputed form of [`control_law`]. Since `H_j` is Hermitian,
/// `f_j = 2 Im⟨w_j|ρ|D⟩` with `|w_j⟩ = H_j|D⟩`.
#[derive(Debug, Clone)]
pub struct ControlLaw {
    dark: Ket,
    w: [Ket; 2],
    enabled: [bool; 2],
}

impl ControlLaw {
    pub fn new(cfg: &ControlConfig, basis: Basis) -> Self {
        let (h1, h2) = control_hamiltonians_in(cfg, basis);
        let dark = NamedState::Dark.ket(basis);
        let w = [h1.apply(&dark).unwrap(), h2.apply(&dark).unwrap()];
        Self {
            dark,
            w,
            enabled: [cfg.mode.enables(1), cfg.mode.enables(2)],
        }
    }

    pub fn eval(&self, rho: &ComplexMatrix) -> [f64; 2] {
        let n = rho.dim();
        let m = rho.as_slice();
        // ρ|D⟩ once, then the two overlaps.
        let mut rd = [ZERO; crate::dynamics::MAX_DIM];
        for (r, out) in rd.iter_mut().enumerate().take(n) {
            let row = &m[r * n..(r + 1) * n];
            *out = row
                .iter()
                .zip(self.dark.amplitudes())
                .map(|(a, b)| a * b)
                .sum();
        }
        let mut f = [0.0; 2];
        for j in 0..2 {
            if self.enabled[j] {
                let z: C64 = self.w[j]
                    .amplitudes()
                    .iter()
                    .zip(&rd[..n])
                    .map(|(w, x)| w.conj() * x)
                    .sum();
                f[j] = 2.0 * z.im;
            }
        }
        f
    }
}

/// `ρ̇ = −i[H + Σ_j f_j(ρ) H_j, ρ] + Σ_L D_L[ρ]` with the feedback
/// re-evaluated at every call.
#[derive(Debug, Clone)]
pub struct ControlledGenerator {
    liouvillian: Liouvillian,
    law: ControlLaw,
}

impl ControlledGenerator {
    pub fn liouvillian(&self) -> &Liouvillian {
        &self.liouvillian
    }

    pub fn law(&self) -> &ControlLaw {
        &self.law
    }
}

impl Generator for ControlledGenerator {
    fn dim(&self) -> usize {
        self.liouvillian.dim()
    }

    fn rhs(&self, _t: f64, rho: &ComplexMatrix, out: &mut ComplexMatrix) {
        let f = self.law.eval(rho);
        self.liouvillian.apply(rho, &f, out);
    }

    fn controls(&self, _t: f64, rho: &ComplexMatrix) -> [f64; 2] {
        self.law.eval(rho)
    }
}

pub fn controlled_generator(
    p: &SystemParams,
    cfg: &ControlConfig,
    model: Model,
) -> Result<ControlledGenerator, ControlError> {
    p.validate()?;
    cfg.validate()?;
    let h = model_hamiltonian(p, model)?;
    let (h1, h2) = control_hamiltonians(cfg, model);
    let liouvillian = Liouvillian::new(&h, &build_collapse_ops(p, model), &[h1, h2])?;
    Ok(ControlledGenerator {
        liouvillian,
        law: ControlLaw::new(cfg, model.basis()),
    })
}

/// Instantaneous speed of the fidelity: `V = −⟨D|ρ̇|D⟩` together with its
/// control part `V_a = −Σ_j f_j²` and dissipative part
/// `V_b = −Σ_L ⟨D|LρL†|D⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovDiagnostics {
    pub v: f64,
    pub v_a: f64,
    pub v_b: f64,
}

pub fn lyapunov_diagnostics(
    rho: &DensityMatrix,
    p: &SystemParams,
    cfg: &ControlConfig,
) -> Result<LyapunovDiagnostics, ControlError> {
    let model = model_for_basis(rho.basis());
    let gen = controlled_generator(p, cfg, model)?;
    let mut rhs = ComplexMatrix::zeros(model.dim());
    gen.rhs(0.0, rho.matrix(), &mut rhs);
    let dark = NamedState::Dark.ket(model.basis());
    let v = -rhs.sandwich(&dark, &dark).unwrap().re;

    let (h1, h2) = control_hamiltonians(cfg, model);
    let f = control_law(rho, cfg);
    let mut v_a = 0.0;
    for (fj, hj) in f.iter().zip([&h1, &h2]) {
        let c = commutator(hj, rho.matrix()).unwrap();
        let g = (C64::new(0.0, -1.0) * c.sandwich(&dark, &dark).unwrap()).re;
        v_a -= fj * g;
    }

    let mut v_b = 0.0;
    for l in build_collapse_ops(p, model) {
        let ld = l.adjoint().apply(&dark).unwrap();
        v_b -= rho.matrix().sandwich(&ld, &ld).unwrap().re;
    }
    Ok(LyapunovDiagnostics { v, v_a, v_b })
}

fn model_for_basis(basis: Basis) -> Model {
    match basis {
        Basis::Product => Model::Full,
        Basis::Collective => Model::Effective,
        Basis::Reduced => Model::EffectiveDirect,
    }
}
