//! Hamiltonians, collapse operators and named states of the two-atom
//! ground/ground/Rydberg system, plus the closed-form spectrum of the
//! resonant effective model.
//!
//! Single-atom levels are ordered `(|0⟩, |1⟩, |r⟩)`; two-atom product states
//! use atom 1 as the major index. Three bases are used for dynamics:
//!
//! * [`Basis::Product`]: the 9 product states `|ab⟩`, used by the full model.
//! * [`Basis::Collective`]: `(|00⟩, |B⟩, |D⟩, |11⟩, |rr⟩, |0r⟩, |1r⟩, |r0⟩,
//!   |r1⟩)`, used by the effective model. The first five states carry the
//!   effective Hamiltonian; the single-excitation states are undriven and
//!   only receive and release population through spontaneous decay.
//! * [`Basis::Reduced`]: the leading five collective states, used by the
//!   analytic solution and by the direct-branching dissipator variant.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::qops::{tensor, ComplexMatrix, EigenDecomposition, Ket, QopsError};

pub const LEVEL_0: usize = 0;
pub const LEVEL_1: usize = 1;
pub const LEVEL_R: usize = 2;

/// Relative tolerance of the antiblockade condition `U_rr = 2Δ_r`.
const ANTIBLOCKADE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("optical detuning Δ_r must be nonzero")]
    ZeroDetuning,
    #[error("effective spectrum is degenerate (a² = b²); both Ω_m and Ω_e must be positive")]
    DegenerateSpectrum,
    #[error("invalid parameter {field}: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error(transparent)]
    Qops(#[from] QopsError),
}

/// Which master equation is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    /// Nine-level Hamiltonian with per-atom Rydberg decay.
    Full,
    /// Effective Hamiltonian on the five coherent states with decay through
    /// the single-excitation shelf states.
    Effective,
    /// Effective Hamiltonian with `|rr⟩` branching directly into the four
    /// ground-manifold states.
    EffectiveDirect,
}

impl Model {
    pub fn basis(self) -> Basis {
        match self {
            Model::Full => Basis::Product,
            Model::Effective => Basis::Collective,
            Model::EffectiveDirect => Basis::Reduced,
        }
    }

    pub fn dim(self) -> usize {
        self.basis().dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::Full => "full",
            Model::Effective => "effective",
            Model::EffectiveDirect => "effective-direct",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Model::Full),
            "effective" => Ok(Model::Effective),
            "effective-direct" => Ok(Model::EffectiveDirect),
            other => Err(format!(
                "unknown model '{other}' (expected full, effective or effective-direct)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Product,
    Collective,
    Reduced,
}

impl Basis {
    pub fn dim(self) -> usize {
        match self {
            Basis::Product | Basis::Collective => 9,
            Basis::Reduced => 5,
        }
    }

    /// Expresses a product-basis operator in this basis. For
    /// [`Basis::Reduced`] the result is the compression onto the five
    /// coherent collective states.
    pub fn express_operator(self, product_op: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(product_op.dim(), 9, "expected a product-basis operator");
        match self {
            Basis::Product => product_op.clone(),
            Basis::Collective => product_op
                .conjugate_by(&collective_to_product())
                .expect("9x9 operands"),
            Basis::Reduced => product_op
                .conjugate_by(&collective_to_product())
                .expect("9x9 operands")
                .leading_block(5),
        }
    }

    /// Expresses a product-basis ket in this basis. Components outside the
    /// reduced subspace are dropped for [`Basis::Reduced`].
    pub fn express_ket(self, product_ket: &Ket) -> Ket {
        assert_eq!(product_ket.dim(), 9, "expected a product-basis ket");
        match self {
            Basis::Product => product_ket.clone(),
            Basis::Collective | Basis::Reduced => {
                let full = collective_to_product()
                    .adjoint()
                    .apply(product_ket)
                    .expect("9-dim");
                Ket::new(full.amplitudes()[..self.dim()].to_vec())
            }
        }
    }
}

/// Index of `|ab⟩` in the product basis.
pub fn product_index(a: usize, b: usize) -> usize {
    3 * a + b
}

pub fn product_ket(a: usize, b: usize) -> Ket {
    Ket::basis(9, product_index(a, b))
}

/// Unitary whose columns are the collective basis states written in the
/// product basis.
pub fn collective_to_product() -> ComplexMatrix {
    let s = FRAC_1_SQRT_2;
    let columns: [Vec<(usize, f64)>; 9] = [
        vec![(product_index(0, 0), 1.0)],
        vec![(product_index(0, 1), s), (product_index(1, 0), s)],
        vec![(product_index(1, 0), s), (product_index(0, 1), -s)],
        vec![(product_index(1, 1), 1.0)],
        vec![(product_index(2, 2), 1.0)],
        vec![(product_index(0, 2), 1.0)],
        vec![(product_index(1, 2), 1.0)],
        vec![(product_index(2, 0), 1.0)],
        vec![(product_index(2, 1), 1.0)],
    ];
    let mut t = ComplexMatrix::zeros(9);
    for (col, entries) in columns.iter().enumerate() {
        for &(row, v) in entries {
            t[(row, col)] = C64::new(v, 0.0);
        }
    }
    t
}

/// Single-atom operator `op` acting on atom `j` (1 or 2) of the pair.
pub fn on_atom(op: &ComplexMatrix, j: usize) -> ComplexMatrix {
    let id = ComplexMatrix::identity(3);
    match j {
        1 => tensor(op, &id),
        2 => tensor(&id, op),
        _ => panic!("atom index must be 1 or 2, got {j}"),
    }
}

/// `|a⟩⟨b|` on a single three-level atom.
pub fn level_op(a: usize, b: usize) -> ComplexMatrix {
    ComplexMatrix::unit(3, a, b)
}

/// Physical rates and detunings in units of `Ω_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub omega_r: f64,
    pub delta_r: f64,
    pub omega_m: f64,
    pub delta_m: f64,
    pub u_rr: f64,
    pub gamma: f64,
}

impl SystemParams {
    /// Antiblockade configuration with the Stark-compensating microwave
    /// detuning `Δ_m = Ω_r²/4Δ_r`.
    pub fn compensated(delta_r: f64, omega_m: f64, gamma: f64) -> Self {
        Self {
            omega_r: 1.0,
            delta_r,
            omega_m,
            delta_m: 1.0 / (4.0 * delta_r),
            u_rr: 2.0 * delta_r,
            gamma,
        }
    }

    /// `(Δ_r, γ, Ω_m, Δ_m) = (50, 0.002, 0.01, 0.005)` with `U_rr = 2Δ_r`.
    pub fn reference() -> Self {
        Self {
            omega_r: 1.0,
            delta_r: 50.0,
            omega_m: 0.01,
            delta_m: 0.005,
            u_rr: 100.0,
            gamma: 0.002,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("omega_r", self.omega_r),
            ("delta_r", self.delta_r),
            ("omega_m", self.omega_m),
            ("delta_m", self.delta_m),
            ("u_rr", self.u_rr),
            ("gamma", self.gamma),
        ];
        for (field, v) in fields {
            if !v.is_finite() {
                return Err(ModelError::InvalidParams {
                    field,
                    reason: format!("must be finite, got {v}"),
                });
            }
        }
        for (field, v) in [
            ("omega_r", self.omega_r),
            ("omega_m", self.omega_m),
            ("u_rr", self.u_rr),
            ("gamma", self.gamma),
        ] {
            if v < 0.0 {
                return Err(ModelError::InvalidParams {
                    field,
                    reason: format!("must be non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Whether `U_rr = 2Δ_r` holds to relative `1e-12`.
    pub fn is_antiblockade(&self) -> bool {
        let target = 2.0 * self.delta_r;
        (self.u_rr - target).abs() <= ANTIBLOCKADE_RTOL * target.abs().max(self.u_rr.abs())
    }

    /// `Ω_e = Ω_r²/Δ_r`.
    pub fn omega_e(&self) -> f64 {
        self.omega_r * self.omega_r / self.delta_r
    }

    /// Microwave detuning that cancels the dispersive Stark shifts.
    pub fn compensating_delta_m(&self) -> f64 {
        self.omega_r * self.omega_r / (4.0 * self.delta_r)
    }

    pub fn a(&self) -> f64 {
        let half_e = 0.5 * self.omega_e();
        (self.omega_m * self.omega_m + half_e * half_e).sqrt()
    }

    /// `b²`; `b` itself is never needed.
    pub fn b_squared(&self) -> f64 {
        let half_e = 0.5 * self.omega_e();
        (self.omega_m.powi(4) + half_e.powi(4)).sqrt()
    }

    pub fn c(&self) -> f64 {
        let oe = self.omega_e();
        (self.omega_m * self.omega_m + 0.5 * oe * oe).sqrt()
    }
}

/// States with a name in the two-atom problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NamedState {
    S00,
    S01,
    S10,
    S11,
    /// `(|01⟩ + |10⟩)/√2`
    Bright,
    /// `(|10⟩ − |01⟩)/√2`
    Dark,
    RR,
}

impl NamedState {
    pub const ALL: [NamedState; 7] = [
        NamedState::S00,
        NamedState::S01,
        NamedState::S10,
        NamedState::S11,
        NamedState::Bright,
        NamedState::Dark,
        NamedState::RR,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NamedState::S00 => "|00>",
            NamedState::S01 => "|01>",
            NamedState::S10 => "|10>",
            NamedState::S11 => "|11>",
            NamedState::Bright => "|B>",
            NamedState::Dark => "|D>",
            NamedState::RR => "|rr>",
        }
    }

    pub fn product_ket(self) -> Ket {
        let s = C64::new(FRAC_1_SQRT_2, 0.0);
        match self {
            NamedState::S00 => product_ket(0, 0),
            NamedState::S01 => product_ket(0, 1),
            NamedState::S10 => product_ket(1, 0),
            NamedState::S11 => product_ket(1, 1),
            NamedState::Bright => product_ket(0, 1).add(&product_ket(1, 0)).unwrap().scale(s),
            NamedState::Dark => product_ket(1, 0).sub(&product_ket(0, 1)).unwrap().scale(s),
            NamedState::RR => product_ket(2, 2),
        }
    }

    pub fn ket(self, basis: Basis) -> Ket {
        basis.express_ket(&self.product_ket())
    }
}

impl fmt::Display for NamedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NamedState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s.trim().trim_start_matches('|').trim_end_matches('>');
        match inner {
            "00" => Ok(NamedState::S00),
            "01" => Ok(NamedState::S01),
            "10" => Ok(NamedState::S10),
            "11" => Ok(NamedState::S11),
            "B" => Ok(NamedState::Bright),
            "D" => Ok(NamedState::Dark),
            "rr" => Ok(NamedState::RR),
            _ => Err(format!(
                "unknown state '{s}' (expected one of |00>, |01>, |10>, |11>, |B>, |D>, |rr>)"
            )),
        }
    }
}

/// Nine-level Hamiltonian `H_l + H_m` in the product basis.
pub fn build_full_hamiltonian(p: &SystemParams) -> ComplexMatrix {
    let half = |x: f64| C64::new(0.5 * x, 0.0);
    let mut single = ComplexMatrix::zeros(3);
    // Laser: −Δ_r|r⟩⟨r| + (Ω_r/2)(|r⟩⟨1| + h.c.)
    single[(LEVEL_R, LEVEL_R)] += C64::new(-p.delta_r, 0.0);
    single[(LEVEL_R, LEVEL_1)] += half(p.omega_r);
    single[(LEVEL_1, LEVEL_R)] += half(p.omega_r);
    // Microwave: Δ_m|0⟩⟨0| + (Ω_m/2)(|1⟩⟨0| + h.c.)
    single[(LEVEL_0, LEVEL_0)] += C64::new(p.delta_m, 0.0);
    single[(LEVEL_1, LEVEL_0)] += half(p.omega_m);
    single[(LEVEL_0, LEVEL_1)] += half(p.omega_m);

    let mut h = on_atom(&single, 1).add(&on_atom(&single, 2)).unwrap();
    let rr = product_index(LEVEL_R, LEVEL_R);
    h[(rr, rr)] += C64::new(p.u_rr, 0.0);
    h
}

/// Per-atom decay operators `√(γ/2)|k⟩_j⟨r|` in the product basis, ordered
/// `(j, k) = (1,0), (1,1), (2,0), (2,1)`.
pub fn product_collapse_ops(p: &SystemParams) -> Vec<ComplexMatrix> {
    let amp = (0.5 * p.gamma).sqrt();
    let mut ops = Vec::with_capacity(4);
    for j in [1, 2] {
        for k in [LEVEL_0, LEVEL_1] {
            ops.push(on_atom(&level_op(k, LEVEL_R), j).scale_real(amp));
        }
    }
    ops
}

/// Collapse operators of `model`, expressed in its basis.
///
/// For [`Model::EffectiveDirect`] the four operators are
/// `√(γ/2)|x⟩⟨rr|` with `x ∈ {|00⟩, |B⟩, |D⟩, |11⟩}`: total decay rate `2γ`
/// split evenly.
pub fn build_collapse_ops(p: &SystemParams, model: Model) -> Vec<ComplexMatrix> {
    match model {
        Model::Full | Model::Effective => product_collapse_ops(p)
            .iter()
            .map(|l| model.basis().express_operator(l))
            .collect(),
        Model::EffectiveDirect => {
            let amp = (0.5 * p.gamma).sqrt();
            (0..4)
                .map(|x| ComplexMatrix::unit(5, x, 4).scale_real(amp))
                .collect()
        }
    }
}

/// Effective five-state Hamiltonian in the reduced basis
/// `(|00⟩, |B⟩, |D⟩, |11⟩, |rr⟩)`, in the frame rotating at `Ω_r²/2Δ_r`.
///
/// At `Δ_m = Ω_r²/4Δ_r` every diagonal entry vanishes and this is
/// `(Ω_m/√2)(|11⟩+|00⟩)⟨B| + (Ω_e/2)|11⟩⟨rr| + h.c.`; other microwave
/// detunings leave the residual diagonal Stark/detuning terms in place.
pub fn build_effective_hamiltonian(p: &SystemParams) -> Result<ComplexMatrix, ModelError> {
    if p.delta_r == 0.0 {
        return Err(ModelError::ZeroDetuning);
    }
    let shift = p.omega_r * p.omega_r / p.delta_r;
    let frame = 0.5 * shift;
    let mw = p.omega_m * FRAC_1_SQRT_2;
    let mut h = ComplexMatrix::from_real_diagonal(&[
        2.0 * p.delta_m - frame,
        p.delta_m + 0.25 * shift - frame,
        p.delta_m + 0.25 * shift - frame,
        0.5 * shift - frame,
        0.5 * shift - frame,
    ]);
    for (r, c, v) in [(0, 1, mw), (3, 1, mw), (3, 4, 0.5 * shift)] {
        h[(r, c)] = C64::new(v, 0.0);
        h[(c, r)] = C64::new(v, 0.0);
    }
    Ok(h)
}

/// Hamiltonian of `model` in its own basis.
pub fn model_hamiltonian(p: &SystemParams, model: Model) -> Result<ComplexMatrix, ModelError> {
    match model {
        Model::Full => Ok(build_full_hamiltonian(p)),
        Model::Effective => Ok(build_effective_hamiltonian(p)?.embed(9)),
        Model::EffectiveDirect => build_effective_hamiltonian(p),
    }
}

/// Closed-form eigensystem of the resonant effective Hamiltonian, in the
/// labelling `E₁ = 0`, `E₂,₃ = +√((a² ± b²)/2)`, `E₄,₅ = −E₂,₃`.
#[derive(Debug, Clone)]
pub struct AnalyticEigensystem {
    pub energies: [f64; 5],
    /// Normalized eigenvectors in the reduced basis.
    pub states: [Ket; 5],
}

impl AnalyticEigensystem {
    /// The same spectrum with eigenvalues in ascending order.
    pub fn to_decomposition(&self) -> EigenDecomposition {
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&i, &j| self.energies[i].total_cmp(&self.energies[j]));
        EigenDecomposition {
            eigenvalues: order.iter().map(|&k| self.energies[k]).collect(),
            eigenvectors: order.iter().map(|&k| self.states[k].clone()).collect(),
        }
    }
}

pub fn analytic_eigensystem(p: &SystemParams) -> Result<AnalyticEigensystem, ModelError> {
    if p.delta_r == 0.0 {
        return Err(ModelError::ZeroDetuning);
    }
    let om = p.omega_m;
    let oe = p.omega_e();
    if om <= 0.0 || oe <= 0.0 {
        return Err(ModelError::DegenerateSpectrum);
    }
    let a2 = p.a().powi(2);
    let b2 = p.b_squared();
    let c2 = p.c().powi(2);
    if a2 - b2 <= 0.0 {
        return Err(ModelError::DegenerateSpectrum);
    }

    // Unnormalized |φ⟩ for q = a² ± b² and branch sign σ (σ = +1 → E > 0).
    let phi = |q: f64, sigma: f64| {
        let r = q.sqrt();
        Ket::from_real(&[
            sigma * (-2.0 * c2 * r + 2.0 * q.powf(1.5)),
            2.0 * om * q - om * oe * oe,
            0.0,
            sigma * 2.0 * r * om * om,
            std::f64::consts::SQRT_2 * om * om * oe,
        ])
        .normalized()
    };

    let e2 = (0.5 * (a2 + b2)).sqrt();
    let e3 = (0.5 * (a2 - b2)).sqrt();
    Ok(AnalyticEigensystem {
        energies: [0.0, e2, e3, -e2, -e3],
        states: [
            NamedState::Dark.ket(Basis::Reduced),
            phi(a2 + b2, 1.0),
            phi(a2 - b2, 1.0),
            phi(a2 + b2, -1.0),
            phi(a2 - b2, -1.0),
        ],
    })
}

/// `|ψ(t)⟩ = Σ_k ⟨φ_k|ψ(0)⟩ e^{−iE_k t} |φ_k⟩` in the reduced basis.
pub fn coherent_evolve_analytic(psi0: &Ket, p: &SystemParams, t: f64) -> Result<Ket, ModelError> {
    if psi0.dim() != 5 {
        return Err(QopsError::DimensionMismatch {
            op: "coherent_evolve_analytic",
            left: 5,
            right: psi0.dim(),
        }
        .into());
    }
    let sys = analytic_eigensystem(p)?;
    let mut out = Ket::new(vec![C64::new(0.0, 0.0); 5]);
    for (e, phi) in sys.energies.iter().zip(&sys.states) {
        let ck = phi.inner(psi0)?;
        let phase = C64::from_polar(1.0, -e * t);
        out = out.add(&phi.scale(ck * phase))?;
    }
    Ok(out)
}
