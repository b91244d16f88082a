//! Run descriptions, built-in presets, parameter sweeps and CSV output.
//!
//! A scenario is written as flat `key = value` text. Lines starting with
//! `#` are comments. Recognized keys:
//!
//! ```text
//! name = fig3e
//! model = effective               # full | effective | effective-direct
//! params.omega_r = 1              # every rate is in units of Ω_r
//! params.delta_r = 50
//! params.omega_m = 0.01
//! params.delta_m = 0.005
//! params.u_rr = 100
//! params.gamma = 0.002
//! initial = |10>                  # see below
//! initial.eta = 0.3               # only for `pair` initial states
//! control.mode = both             # both | only_H1 | only_H2 | off
//! control.lambda1 = 0.08
//! control.lambda2 = 0.08
//! noise.channel = 1               # 0 = no noise, 1..4 = Ω_m, Δ_m, Ω_r, U_rr
//! noise.eta = 0.05
//! noise.trajectories = 2000       # Monte Carlo defaults for `noise`
//! noise.seed = 1
//! time.t_end_over_2pi = 1500      # or time.t_end (dimensionless Ω_r t)
//! time.dt = 0.1                   # optional largest step; default from the step rule
//! time.record_over_2pi = 1        # sampling interval
//! sweep.axis1 = params.omega_m    # any numeric key, `t` or `t_over_2pi`
//! sweep.axis1.min = 0
//! sweep.axis1.max = 0.03
//! sweep.axis1.points = 50         # or sweep.axis1.step
//! sweep.axis2 = params.gamma
//! sweep.axis2.min = 0.0005
//! sweep.axis2.max = 0.01
//! sweep.axis2.points = 20
//! sweep.observable = P_D          # P_D | F
//! ```
//!
//! Initial states: a named state (`|00>`, `|01>`, `|10>`, `|11>`, `|B>`,
//! `|D>`, `|rr>`); `superposition c1 |a>; c2 |b>; ...` with complex
//! amplitudes such as `0.5`, `-0.5i` or `0.3+0.4i`; `mixture w1 |a>; w2
//! |b>; ...`; or `pair |a> |b>`, meaning `(1 − η)|a⟩⟨a| + η|b⟩⟨b|` with
//! `η = initial.eta`.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::control::{controlled_generator, ControlConfig, ControlError, ControlMode};
use crate::dynamics::{
    integrate, step_for_frequency, DensityMatrix, DynamicsError, IntegrationOptions, Record,
    Trajectory,
};
use crate::model::{model_hamiltonian, Model, ModelError, NamedState, SystemParams};
use crate::noise::{
    integrate_averaged, noisy_controlled_generator, ControlReplay, EnsembleSummary, NoiseChannel,
    NoiseError, StochasticProblem,
};
use crate::par::{map_indexed, Execution};
use crate::qops::{hermitian_eigen, ComplexMatrix, Ket};

/// Largest number of grid points a sweep may have.
pub const MAX_GRID_POINTS: usize = 10_000;
/// Tolerance on mixture weight sums and superposition norms.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Largest `|Tr ρ − 1|` and most negative eigenvalue accepted as healthy.
pub const HEALTH_TOL: f64 = 1e-8;
/// Replay samples per record interval when control fields are recorded
/// for an open-loop noisy run.
const REPLAY_SAMPLES_PER_RECORD: f64 = 16.0;
/// Largest step of sampled noise trajectories. The noise increment is
/// exact, so only the deterministic dynamics limits the step.
const STOCHASTIC_MAX_DT: f64 = TAU / 16.0;

pub const TRAJECTORY_HEADER: &str =
    "t_dimensionless, t_over_2pi, P_D, F, purity, f1, f2, A1, A2, trace_err, min_eig";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { key: String, line: usize },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("unknown preset '{0}' (run `presets` for the list)")]
    UnknownPreset(String),
    #[error("sweep grid has {points} points, more than the limit of {max}")]
    GridTooLarge { points: usize, max: usize },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Named(NamedState),
    Superposition(Vec<(C64, NamedState)>),
    Mixture(Vec<(f64, NamedState)>),
    /// `(1 − η)|a⟩⟨a| + η|b⟩⟨b|`.
    Pair {
        first: NamedState,
        second: NamedState,
        eta: f64,
    },
}

impl InitialState {
    /// `(|00⟩ + |01⟩ + |10⟩ + |11⟩)/2`.
    pub fn uniform_superposition() -> Self {
        let h = C64::new(0.5, 0.0);
        InitialState::Superposition(vec![
            (h, NamedState::S00),
            (h, NamedState::S01),
            (h, NamedState::S10),
            (h, NamedState::S11),
        ])
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        match self {
            InitialState::Named(_) => Ok(()),
            InitialState::Superposition(terms) => {
                if terms.is_empty() {
                    return Err(invalid("initial", "superposition has no terms"));
                }
                let norm = self.superposition_ket(terms).norm();
                if (norm - 1.0).abs() > WEIGHT_TOL {
                    return Err(invalid(
                        "initial",
                        format!("superposition norm is {norm}, not 1"),
                    ));
                }
                Ok(())
            }
            InitialState::Mixture(terms) => {
                if terms.is_empty() {
                    return Err(invalid("initial", "mixture has no terms"));
                }
                if let Some((w, _)) = terms.iter().find(|(w, _)| !(*w >= 0.0)) {
                    return Err(invalid(
                        "initial",
                        format!("mixture weight {w} is negative"),
                    ));
                }
                let sum: f64 = terms.iter().map(|(w, _)| w).sum();
                if (sum - 1.0).abs() > WEIGHT_TOL {
                    return Err(invalid(
                        "initial",
                        format!("mixture weights sum to {sum}, not 1"),
                    ));
                }
                Ok(())
            }
            InitialState::Pair { eta, .. } => {
                if !(0.0..=1.0).contains(eta) {
                    return Err(invalid(
                        "initial.eta",
                        format!("must lie in [0, 1], got {eta}"),
                    ));
                }
                Ok(())
            }
        }
    }

    fn superposition_ket(&self, terms: &[(C64, NamedState)]) -> Ket {
        let mut ket = Ket::new(vec![C64::new(0.0, 0.0); 9]);
        for (c, s) in terms {
            ket = ket.add(&s.product_ket().scale(*c)).unwrap();
        }
        ket
    }

    pub fn density(&self, model: Model) -> Result<DensityMatrix, ScenarioError> {
        self.validate()?;
        let basis = model.basis();
        let rho = match self {
            InitialState::Named(s) => DensityMatrix::named(*s, basis),
            InitialState::Superposition(terms) => {
                let ket = basis.express_ket(&self.superposition_ket(terms));
                DensityMatrix::pure(&ket, basis)?
            }
            InitialState::Mixture(terms) => {
                let parts: Vec<_> = terms.iter().map(|(w, s)| (*w, s.ket(basis))).collect();
                DensityMatrix::mixture(&parts, basis)?
            }
            InitialState::Pair { first, second, eta } => DensityMatrix::mixture(
                &[(1.0 - eta, first.ket(basis)), (*eta, second.ket(basis))],
                basis,
            )?,
        };
        Ok(rho)
    }

    fn parse(value: &str) -> Result<(Self, bool), String> {
        let value = value.trim();
        let (kind, rest) = value.split_once(char::is_whitespace).unwrap_or((value, ""));
        match kind {
            "superposition" => {
                let terms = parse_terms(rest, |s| C64::from_str(s).map_err(|e| e.to_string()))?;
                Ok((InitialState::Superposition(terms), false))
            }
            "mixture" => {
                let terms = parse_terms(rest, |s| f64::from_str(s).map_err(|e| e.to_string()))?;
                Ok((InitialState::Mixture(terms), false))
            }
            "pair" => {
                let states: Vec<&str> = rest.split_whitespace().collect();
                if states.len() != 2 {
                    return Err(format!("`pair` needs two states, got '{rest}'"));
                }
                Ok((
                    InitialState::Pair {
                        first: states[0].parse()?,
                        second: states[1].parse()?,
                        eta: 0.0,
                    },
                    true,
                ))
            }
            _ => Ok((InitialState::Named(value.parse()?), false)),
        }
    }

    fn to_config_value(&self) -> String {
        match self {
            InitialState::Named(s) => s.label().to_string(),
            InitialState::Superposition(terms) => format!(
                "superposition {}",
                terms
                    .iter()
                    .map(|(c, s)| format!("{} {}", format_complex(*c), s.label()))
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
            InitialState::Mixture(terms) => format!(
                "mixture {}",
                terms
                    .iter()
                    .map(|(w, s)| format!("{w} {}", s.label()))
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
            InitialState::Pair { first, second, .. } => {
                format!("pair {} {}", first.label(), second.label())
            }
        }
    }
}

fn format_complex(c: C64) -> String {
    if c.im == 0.0 {
        format!("{}", c.re)
    } else if c.im.is_sign_negative() {
        format!("{}-{}i", c.re, -c.im)
    } else {
        format!("{}+{}i", c.re, c.im)
    }
}

fn parse_terms<T>(
    text: &str,
    coeff: impl Fn(&str) -> Result<T, String>,
) -> Result<Vec<(T, NamedState)>, String> {
    text.split(';')
        .map(|term| {
            let term = term.trim();
            let (c, s) = term
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| format!("expected '<coefficient> <state>', got '{term}'"))?;
            let c = coeff(c.trim()).map_err(|e| format!("bad coefficient '{}': {e}", c.trim()))?;
            Ok((c, s.parse()?))
        })
        .collect()
}

/// Single-channel amplitude noise and Monte Carlo defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// 0 = off, 1..4 = `Ω_m`, `Δ_m`, `Ω_r`, `U_rr`.
    pub channel: usize,
    pub eta: f64,
    pub trajectories: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            channel: 0,
            eta: 0.0,
            trajectories: 2000,
            seed: 1,
        }
    }
}

impl NoiseSpec {
    pub fn is_active(&self) -> bool {
        self.channel != 0 && self.eta > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    PD,
    F,
}

impl Observable {
    pub fn name(self) -> &'static str {
        match self {
            Observable::PD => "P_D",
            Observable::F => "F",
        }
    }

    pub fn of(self, r: &Record) -> f64 {
        match self {
            Observable::PD => r.p_d,
            Observable::F => r.fidelity,
        }
    }
}

impl FromStr for Observable {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "P_D" => Ok(Observable::PD),
            "F" => Ok(Observable::F),
            _ => Err(format!("unknown observable '{s}' (expected P_D or F)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Spacing {
    Points(usize),
    Step(f64),
}

/// One sweep axis: a numeric scenario key (or `t` / `t_over_2pi`) and an
/// evenly spaced range.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub min: f64,
    pub max: f64,
    spacing: Spacing,
}

impl Axis {
    pub fn with_points(key: &str, min: f64, max: f64, points: usize) -> Self {
        Self {
            key: key.to_string(),
            min,
            max,
            spacing: Spacing::Points(points),
        }
    }

    pub fn with_step(key: &str, min: f64, max: f64, step: f64) -> Self {
        Self {
            key: key.to_string(),
            min,
            max,
            spacing: Spacing::Step(step),
        }
    }

    fn is_time(&self) -> bool {
        self.key == "t" || self.key == "t_over_2pi"
    }

    /// Factor converting axis values to dimensionless time.
    fn time_scale(&self) -> f64 {
        if self.key == "t_over_2pi" {
            TAU
        } else {
            1.0
        }
    }

    pub fn len(&self) -> usize {
        match self.spacing {
            Spacing::Points(n) => n,
            Spacing::Step(h) => ((self.max - self.min) / h + 1e-9).floor() as usize + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.len();
        match self.spacing {
            Spacing::Points(1) => vec![self.min],
            Spacing::Points(_) => (0..n)
                .map(|i| {
                    let (k, m) = (i as f64, (n - 1) as f64);
                    (self.min * (m - k) + self.max * k) / m
                })
                .collect(),
            Spacing::Step(h) => (0..n).map(|i| self.min + i as f64 * h).collect(),
        }
    }

    fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.max >= self.min) {
            return Err(invalid(
                field,
                format!("range [{}, {}] is empty", self.min, self.max),
            ));
        }
        match self.spacing {
            Spacing::Points(0) => Err(invalid(field, "needs at least one point")),
            Spacing::Points(1) if self.max != self.min => {
                Err(invalid(field, "a single point needs min = max"))
            }
            Spacing::Step(h) if !(h > 0.0 && h.is_finite()) => {
                Err(invalid(field, format!("step must be positive, got {h}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis1: Axis,
    pub axis2: Axis,
    pub observable: Observable,
}

impl SweepSpec {
    pub fn grid_size(&self) -> usize {
        self.axis1.len().saturating_mul(self.axis2.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub model: Model,
    pub params: SystemParams,
    pub initial: InitialState,
    pub control: ControlConfig,
    pub noise: NoiseSpec,
    /// Dimensionless final time `Ω_r t`.
    pub t_end: f64,
    /// Largest step; `None` applies the step rule.
    pub dt: Option<f64>,
    /// Sampling interval in dimensionless time.
    pub record_interval: f64,
    pub sweep: Option<SweepSpec>,
}

impl Scenario {
    pub fn new(
        name: &str,
        params: SystemParams,
        initial: InitialState,
        t_end_over_2pi: f64,
    ) -> Self {
        Self {
            name: name.to_string(),
            model: Model::Effective,
            params,
            initial,
            control: ControlConfig::off(),
            noise: NoiseSpec::default(),
            t_end: t_end_over_2pi * TAU,
            dt: None,
            record_interval: TAU,
            sweep: None,
        }
    }

    pub fn with_control(mut self, lambda1: f64, lambda2: f64, mode: ControlMode) -> Self {
        self.control = ControlConfig {
            lambda1,
            lambda2,
            mode,
        };
        self
    }

    pub fn with_model(mut self, model: Model) -> Self {
        self.model = model;
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.params.validate()?;
        self.control.validate()?;
        self.initial.validate()?;
        if self.noise.channel > 4 {
            return Err(invalid(
                "noise.channel",
                format!("must be 0..4, got {}", self.noise.channel),
            ));
        }
        if !(self.noise.eta >= 0.0 && self.noise.eta.is_finite()) {
            return Err(invalid(
                "noise.eta",
                format!("must be non-negative, got {}", self.noise.eta),
            ));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(invalid(
                "time.t_end",
                format!("must be positive, got {}", self.t_end),
            ));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(invalid("time.dt", format!("must be positive, got {dt}")));
            }
        }
        if !(self.record_interval > 0.0 && self.record_interval.is_finite()) {
            return Err(invalid("time.record_over_2pi", "must be positive"));
        }
        if self.model != Model::Full && self.params.delta_r == 0.0 {
            return Err(invalid(
                "params.delta_r",
                "effective models need a nonzero detuning",
            ));
        }
        if let Some(sw) = &self.sweep {
            sw.axis1.validate("sweep.axis1")?;
            sw.axis2.validate("sweep.axis2")?;
            for (field, axis) in [("sweep.axis1", &sw.axis1), ("sweep.axis2", &sw.axis2)] {
                if !axis.is_time() && !NUMERIC_KEYS.contains(&axis.key.as_str()) {
                    return Err(invalid(
                        field,
                        format!("'{}' is not a numeric key", axis.key),
                    ));
                }
            }
            if sw.axis1.key == sw.axis2.key {
                return Err(invalid("sweep.axis2", "must differ from sweep.axis1"));
            }
            if sw.axis1.is_time() && sw.axis2.is_time() {
                return Err(invalid("sweep.axis2", "only one axis may be time"));
            }
            let points = sw.grid_size();
            if points > MAX_GRID_POINTS {
                return Err(ScenarioError::GridTooLarge {
                    points,
                    max: MAX_GRID_POINTS,
                });
            }
        }
        Ok(())
    }

    /// Noise channel selected by the scenario, if any.
    pub fn noise_channel(&self) -> Result<Option<NoiseChannel>, ScenarioError> {
        if !self.noise.is_active() {
            return Ok(None);
        }
        Ok(Some(NoiseChannel::new(
            &self.params,
            self.noise.channel,
            self.noise.eta,
        )?))
    }

    /// Largest admissible step: `0.05/ω_max`, where `ω_max` covers the
    /// Hamiltonian spectrum, the detunings, the control amplitude and the
    /// noise dephasing rate. Effective models are capped at 0.1.
    pub fn max_dt(&self) -> Result<f64, ScenarioError> {
        if let Some(dt) = self.dt {
            return Ok(dt);
        }
        let mut omega = self.coherent_frequency()?;
        if let Some(ch) = self.noise_channel()? {
            let r = spectral_radius(&ch.operator_in(self.model.basis()))?;
            omega = omega.max(ch.eta * ch.eta * r * r);
        }
        let cap = if self.model == Model::Full {
            f64::INFINITY
        } else {
            0.1
        };
        Ok(step_for_frequency(omega, cap))
    }

    /// Fastest deterministic rate, without noise.
    fn coherent_frequency(&self) -> Result<f64, ScenarioError> {
        let h = model_hamiltonian(&self.params, self.model)?;
        let mut omega = spectral_radius(&h)?
            .max(self.params.delta_m.abs())
            .max(self.control.max_frequency())
            .max(self.params.gamma);
        if self.model == Model::Full {
            omega = omega
                .max(self.params.delta_r.abs())
                .max(self.params.u_rr.abs());
        }
        Ok(omega)
    }

    pub fn options(&self) -> Result<IntegrationOptions, ScenarioError> {
        Ok(IntegrationOptions {
            t_end: self.t_end,
            max_dt: self.max_dt()?,
            record_interval: self.record_interval,
        })
    }

    /// Sets a numeric key (the keys accepted by sweeps).
    pub fn set_numeric(&mut self, key: &str, v: f64) -> Result<(), ScenarioError> {
        match key {
            "params.omega_r" => self.params.omega_r = v,
            "params.delta_r" => self.params.delta_r = v,
            "params.omega_m" => self.params.omega_m = v,
            "params.delta_m" => self.params.delta_m = v,
            "params.u_rr" => self.params.u_rr = v,
            "params.gamma" => self.params.gamma = v,
            "control.lambda1" => self.control.lambda1 = v,
            "control.lambda2" => self.control.lambda2 = v,
            "noise.eta" => self.noise.eta = v,
            "noise.channel" => {
                if v.fract() != 0.0 || !(0.0..=4.0).contains(&v) {
                    return Err(invalid(
                        "noise.channel",
                        format!("must be an integer 0..4, got {v}"),
                    ));
                }
                self.noise.channel = v as usize;
            }
            "initial.eta" => match &mut self.initial {
                InitialState::Pair { eta, .. } => *eta = v,
                _ => {
                    return Err(invalid(
                        "initial.eta",
                        "only applies to `pair` initial states",
                    ))
                }
            },
            "time.t_end" => self.t_end = v,
            "time.t_end_over_2pi" => self.t_end = v * TAU,
            "time.dt" => self.dt = Some(v),
            "time.record_over_2pi" => self.record_interval = v * TAU,
            _ => return Err(invalid(key, "not a numeric key")),
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    /// Serializes to the config format; parsing the result gives back an
    /// equal scenario.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("model", self.model.name().to_string());
        kv("params.omega_r", p.omega_r.to_string());
        kv("params.delta_r", p.delta_r.to_string());
        kv("params.omega_m", p.omega_m.to_string());
        kv("params.delta_m", p.delta_m.to_string());
        kv("params.u_rr", p.u_rr.to_string());
        kv("params.gamma", p.gamma.to_string());
        kv("initial", self.initial.to_config_value());
        if let InitialState::Pair { eta, .. } = self.initial {
            kv("initial.eta", eta.to_string());
        }
        kv("control.mode", self.control.mode.name().to_string());
        kv("control.lambda1", self.control.lambda1.to_string());
        kv("control.lambda2", self.control.lambda2.to_string());
        kv("noise.channel", self.noise.channel.to_string());
        kv("noise.eta", self.noise.eta.to_string());
        kv("noise.trajectories", self.noise.trajectories.to_string());
        kv("noise.seed", self.noise.seed.to_string());
        kv("time.t_end", self.t_end.to_string());
        if let Some(dt) = self.dt {
            kv("time.dt", dt.to_string());
        }
        kv(
            "time.record_over_2pi",
            (self.record_interval / TAU).to_string(),
        );
        if let Some(sw) = &self.sweep {
            for (name, axis) in [("sweep.axis1", &sw.axis1), ("sweep.axis2", &sw.axis2)] {
                kv(name, axis.key.clone());
                kv(&format!("{name}.min"), axis.min.to_string());
                kv(&format!("{name}.max"), axis.max.to_string());
                match axis.spacing {
                    Spacing::Points(n) => kv(&format!("{name}.points"), n.to_string()),
                    Spacing::Step(h) => kv(&format!("{name}.step"), h.to_string()),
                }
            }
            kv("sweep.observable", sw.observable.name().to_string());
        }
        s
    }

    /// One-line summary of the physical parameters.
    pub fn summary(&self) -> String {
        let p = &self.params;
        format!(
            "(Δ_r, γ, Ω_m, Δ_m, U_rr, λ1, λ2)/Ω_r = ({}, {}, {}, {}, {}, {}, {}); model {}; initial {}; control {}; noise {}; Ω_r t/2π up to {}{}",
            p.delta_r,
            p.gamma,
            p.omega_m,
            p.delta_m,
            p.u_rr,
            self.control.lambda1,
            self.control.lambda2,
            self.model,
            self.initial.to_config_value(),
            self.control.mode,
            if self.noise.channel == 0 {
                "off".to_string()
            } else {
                format!("channel {} η = {}", self.noise.channel, self.noise.eta)
            },
            self.t_end / TAU,
            match &self.sweep {
                Some(sw) => format!(
                    "; sweep {} × {} ({} points) of {}",
                    sw.axis1.key,
                    sw.axis2.key,
                    sw.grid_size(),
                    sw.observable.name()
                ),
                None => String::new(),
            }
        )
    }
}

fn spectral_radius(h: &ComplexMatrix) -> Result<f64, ScenarioError> {
    Ok(hermitian_eigen(h)
        .map_err(|e| ScenarioError::Dynamics(e.into()))?
        .max_abs_eigenvalue())
}

const NUMERIC_KEYS: &[&str] = &[
    "params.omega_r",
    "params.delta_r",
    "params.omega_m",
    "params.delta_m",
    "params.u_rr",
    "params.gamma",
    "control.lambda1",
    "control.lambda2",
    "noise.eta",
    "noise.channel",
    "initial.eta",
    "time.t_end",
    "time.t_end_over_2pi",
    "time.dt",
    "time.record_over_2pi",
];

#[derive(Default)]
struct AxisDraft {
    key: Option<String>,
    min: Option<f64>,
    max: Option<f64>,
    points: Option<usize>,
    step: Option<f64>,
}

impl AxisDraft {
    fn is_empty(&self) -> bool {
        self.key.is_none()
            && self.min.is_none()
            && self.max.is_none()
            && self.points.is_none()
            && self.step.is_none()
    }

    fn build(self, field: &str) -> Result<Axis, ScenarioError> {
        let key = self.key.ok_or_else(|| invalid(field, "missing axis key"))?;
        let min = self
            .min
            .ok_or_else(|| invalid(&format!("{field}.min"), "missing"))?;
        let max = self
            .max
            .ok_or_else(|| invalid(&format!("{field}.max"), "missing"))?;
        let spacing = match (self.points, self.step) {
            (Some(n), None) => Spacing::Points(n),
            (None, Some(h)) => Spacing::Step(h),
            _ => return Err(invalid(field, "give exactly one of .points and .step")),
        };
        Ok(Axis {
            key,
            min,
            max,
            spacing,
        })
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut s = Scenario::new(
            "custom",
            SystemParams::reference(),
            InitialState::Named(NamedState::S10),
            1500.0,
        );
        let mut seen = HashSet::new();
        let mut axes = [AxisDraft::default(), AxisDraft::default()];
        let mut observable = None;
        let mut initial_eta = None;
        let mut t_end_keys = 0;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ScenarioError::Parse {
                    line,
                    message: format!("expected 'key = value', got '{content}'"),
                })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ScenarioError::Parse {
                    line,
                    message: format!("duplicate key '{key}'"),
                });
            }
            let perr = |message: String| ScenarioError::Parse { line, message };
            let num = |v: &str| -> Result<f64, ScenarioError> {
                v.parse::<f64>()
                    .map_err(|e| perr(format!("'{key}' expects a number, got '{v}' ({e})")))
            };
            let int = |v: &str| -> Result<u64, ScenarioError> {
                v.parse::<u64>().map_err(|e| {
                    perr(format!(
                        "'{key}' expects a non-negative integer, got '{v}' ({e})"
                    ))
                })
            };

            match key {
                "name" => s.name = value.to_string(),
                "model" => s.model = value.parse().map_err(perr)?,
                "initial" => {
                    let (state, _) = InitialState::parse(value).map_err(perr)?;
                    s.initial = state;
                }
                "initial.eta" => initial_eta = Some(num(value)?),
                "control.mode" => s.control.mode = value.parse().map_err(perr)?,
                "noise.trajectories" => s.noise.trajectories = int(value)? as usize,
                "noise.seed" => s.noise.seed = int(value)?,
                "noise.channel" => s.noise.channel = int(value)? as usize,
                "time.t_end" | "time.t_end_over_2pi" => {
                    t_end_keys += 1;
                    s.set_numeric(key, num(value)?)?;
                }
                "sweep.observable" => observable = Some(value.parse::<Observable>().map_err(perr)?),
                _ if key.starts_with("sweep.axis") => {
                    let rest = &key["sweep.axis".len()..];
                    let (which, field) = rest.split_once('.').unwrap_or((rest, ""));
                    let i = match which {
                        "1" => 0,
                        "2" => 1,
                        _ => {
                            return Err(ScenarioError::UnknownKey {
                                key: key.to_string(),
                                line,
                            })
                        }
                    };
                    let a = &mut axes[i];
                    match field {
                        "" => a.key = Some(value.to_string()),
                        "min" => a.min = Some(num(value)?),
                        "max" => a.max = Some(num(value)?),
                        "step" => a.step = Some(num(value)?),
                        "points" => a.points = Some(int(value)? as usize),
                        _ => {
                            return Err(ScenarioError::UnknownKey {
                                key: key.to_string(),
                                line,
                            })
                        }
                    }
                }
                _ if NUMERIC_KEYS.contains(&key) => s.set_numeric(key, num(value)?)?,
                _ => {
                    return Err(ScenarioError::UnknownKey {
                        key: key.to_string(),
                        line,
                    })
                }
            }
        }

        if t_end_keys > 1 {
            return Err(invalid(
                "time.t_end",
                "give either time.t_end or time.t_end_over_2pi",
            ));
        }
        match (&mut s.initial, initial_eta) {
            (InitialState::Pair { eta, .. }, Some(v)) => *eta = v,
            (InitialState::Pair { .. }, None) => {
                return Err(invalid("initial.eta", "required for `pair` initial states"))
            }
            (_, Some(_)) => {
                return Err(invalid(
                    "initial.eta",
                    "only applies to `pair` initial states",
                ))
            }
            _ => {}
        }
        let [a1, a2] = axes;
        if !(a1.is_empty() && a2.is_empty() && observable.is_none()) {
            s.sweep = Some(SweepSpec {
                axis1: a1.build("sweep.axis1")?,
                axis2: a2.build("sweep.axis2")?,
                observable: observable.unwrap_or(Observable::F),
            });
        }
        s.validate()?;
        Ok(s)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_config_string())
    }
}

/// Built-in scenarios.
pub const PRESET_NAMES: [&str; 11] = [
    "fig2a", "fig2b", "fig3a", "fig3e", "fig3i", "fig4a", "fig4b", "fig5a", "fig5b", "fig5c",
    "fig6",
];

pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let base = SystemParams::reference();
    let fig3 = |n: &str, s: NamedState| {
        Scenario::new(n, base, InitialState::Named(s), 1500.0).with_control(
            0.08,
            0.08,
            ControlMode::Both,
        )
    };
    let fig4 = |n: &str, first: NamedState, second: NamedState| {
        let mut s = Scenario::new(
            n,
            base,
            InitialState::Pair {
                first,
                second,
                eta: 0.5,
            },
            1500.0,
        )
        .with_control(0.08, 0.0, ControlMode::OnlyH1);
        s.sweep = Some(SweepSpec {
            axis1: Axis::with_points("initial.eta", 0.0, 1.0, 11),
            axis2: Axis::with_step("t_over_2pi", 0.0, 1500.0, 100.0),
            observable: Observable::F,
        });
        s
    };
    let fig5 = |n: &str, s: NamedState| {
        let mut sc = Scenario::new(n, base, InitialState::Named(s), 1500.0).with_control(
            0.08,
            0.08,
            ControlMode::Both,
        );
        sc.sweep = Some(SweepSpec {
            axis1: Axis::with_points("control.lambda1", 0.0, 0.8, 17),
            axis2: Axis::with_points("control.lambda2", 0.0, 0.8, 17),
            observable: Observable::F,
        });
        sc
    };
    let s = match name {
        "fig2a" => Scenario::new(name, base, InitialState::uniform_superposition(), 1500.0),
        "fig2b" => {
            let mut s = Scenario::new(name, base, InitialState::uniform_superposition(), 1500.0);
            s.sweep = Some(SweepSpec {
                axis1: Axis::with_points("params.omega_m", 0.0, 0.03, 50),
                axis2: Axis::with_points("params.gamma", 0.0005, 0.01, 20),
                observable: Observable::PD,
            });
            s
        }
        "fig3a" => fig3(name, NamedState::S00),
        "fig3e" => fig3(name, NamedState::S10),
        "fig3i" => fig3(name, NamedState::S11),
        "fig4a" => fig4(name, NamedState::S00, NamedState::S10),
        "fig4b" => fig4(name, NamedState::S10, NamedState::S01),
        "fig5a" => fig5(name, NamedState::S01),
        "fig5b" => fig5(name, NamedState::S10),
        "fig5c" => {
            let mut s = Scenario::new(name, base, InitialState::Named(NamedState::S10), 1500.0)
                .with_control(0.08, 0.0, ControlMode::OnlyH1);
            s.sweep = Some(SweepSpec {
                axis1: Axis::with_points("params.gamma", 0.001, 0.01, 19),
                axis2: Axis::with_step("t", 0.0, 1500.0 * TAU, 50.0 * TAU),
                observable: Observable::F,
            });
            s
        }
        "fig6" => {
            let mut s = Scenario::new(name, base, InitialState::Named(NamedState::S10), 2500.0)
                .with_control(0.08, 0.0, ControlMode::OnlyH1);
            s.noise = NoiseSpec {
                channel: 1,
                eta: 0.05,
                trajectories: 2000,
                seed: 1,
            };
            s.sweep = Some(SweepSpec {
                axis1: Axis::with_points("noise.channel", 1.0, 4.0, 4),
                axis2: Axis::with_points("noise.eta", 0.0, 0.1, 11),
                observable: Observable::F,
            });
            s
        }
        _ => return Err(ScenarioError::UnknownPreset(name.to_string())),
    };
    Ok(s)
}

/// Health of a finished run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Health {
    pub max_trace_err: f64,
    pub min_eig: f64,
    pub renormalizations: usize,
}

impl Health {
    pub fn of(traj: &Trajectory) -> Self {
        Self {
            max_trace_err: traj.max_trace_err(),
            min_eig: traj.min_eigenvalue(),
            renormalizations: traj.renormalizations,
        }
    }

    pub fn ok(&self) -> bool {
        self.max_trace_err <= HEALTH_TOL
            && self.min_eig >= -HEALTH_TOL
            && self.renormalizations == 0
    }

    fn merge(self, other: Health) -> Health {
        Health {
            max_trace_err: self.max_trace_err.max(other.max_trace_err),
            min_eig: self.min_eig.min(other.min_eig),
            renormalizations: self.renormalizations + other.renormalizations,
        }
    }
}

impl fmt::Display for Health {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max |Tr ρ − 1| = {:.3e}, min eigenvalue = {:.3e}, renormalizations = {}",
            self.max_trace_err, self.min_eig, self.renormalizations
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub health: Health,
}

/// Records the feedback fields of the noiseless controlled run on a fine
/// grid for open-loop replay.
pub fn record_control(s: &Scenario) -> Result<ControlReplay, ScenarioError> {
    let mut quiet = s.clone();
    quiet.noise.eta = 0.0;
    let rho0 = s.initial.density(s.model)?;
    let mut opts = quiet.options()?;
    opts.record_interval = s.record_interval / REPLAY_SAMPLES_PER_RECORD;
    let gen = controlled_generator(&s.params, &s.control, s.model)?;
    let traj = integrate(&rho0, &gen, &opts)?;
    Ok(ControlReplay::from_trajectory(&traj)?)
}

/// Integrates the scenario's master equation. With noise enabled the
/// averaged equation is used and any control fields are replayed from the
/// noiseless feedback run.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, ScenarioError> {
    s.validate()?;
    let rho0 = s.initial.density(s.model)?;
    let opts = s.options()?;
    let trajectory = match s.noise_channel()? {
        None => {
            let gen = controlled_generator(&s.params, &s.control, s.model)?;
            integrate(&rho0, &gen, &opts)?
        }
        Some(ch) => {
            let replay = if s.control.mode == ControlMode::Off {
                None
            } else {
                Some(record_control(s)?)
            };
            let gen = noisy_controlled_generator(&s.params, &s.control, replay, &[ch], s.model)?;
            integrate_averaged(&rho0, &gen, &opts)?
        }
    };
    let health = Health::of(&trajectory);
    Ok(RunOutput { trajectory, health })
}

/// Monte Carlo ensemble of the scenario's noise channel.
pub fn run_noise_ensemble(
    s: &Scenario,
    trajectories: usize,
    seed: u64,
    exec: Execution,
) -> Result<EnsembleSummary, ScenarioError> {
    s.validate()?;
    let ch = s.noise_channel()?.ok_or_else(|| {
        invalid(
            "noise.channel",
            "a noise run needs noise.channel in 1..4 and noise.eta > 0",
        )
    })?;
    let replay = if s.control.mode == ControlMode::Off {
        None
    } else {
        Some(record_control(s)?)
    };
    let problem = StochasticProblem::new(&s.params, s.model, &ch, &s.control, replay)?;
    let rho0 = s.initial.density(s.model)?;
    let mut opts = s.options()?;
    if s.dt.is_none() {
        opts.max_dt = step_for_frequency(s.coherent_frequency()?, STOCHASTIC_MAX_DT);
    }
    Ok(problem.ensemble(&rho0, trajectories, seed, &opts, exec)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub axis1: String,
    pub axis2: String,
    pub observable: Observable,
    /// `(axis1, axis2, value)` in axis1-major order.
    pub rows: Vec<(f64, f64, f64)>,
    pub health: Health,
}

/// Evaluates the sweep grid. A time axis is read off a single run per value
/// of the other axis; otherwise every grid point is an independent run to
/// `t_end`.
pub fn run_sweep(s: &Scenario, exec: Execution) -> Result<SweepOutput, ScenarioError> {
    s.validate()?;
    let sw = s
        .sweep
        .as_ref()
        .ok_or_else(|| invalid("sweep.axis1", "scenario has no sweep"))?;
    let v1 = sw.axis1.values();
    let v2 = sw.axis2.values();

    let time_axis = if sw.axis2.is_time() {
        Some(2)
    } else if sw.axis1.is_time() {
        Some(1)
    } else {
        None
    };

    let grid: Vec<((f64, f64, f64), Health)> = match time_axis {
        None => {
            let results = map_indexed(exec, v1.len() * v2.len(), |k| {
                let (a, b) = (v1[k / v2.len()], v2[k % v2.len()]);
                let mut point = s.clone();
                point.sweep = None;
                point.set_numeric(&sw.axis1.key, a)?;
                point.set_numeric(&sw.axis2.key, b)?;
                let out = run_scenario(&point)?;
                Ok::<_, ScenarioError>((
                    (a, b, sw.observable.of(out.trajectory.last())),
                    out.health,
                ))
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
        Some(which) => {
            let (param_axis, time) = if which == 2 {
                (&sw.axis1, &sw.axis2)
            } else {
                (&sw.axis2, &sw.axis1)
            };
            let pvals = param_axis.values();
            let tvals = time.values();
            let scale = time.time_scale();
            let step = match time.spacing {
                Spacing::Step(h) => h,
                Spacing::Points(n) if n > 1 => (time.max - time.min) / (n - 1) as f64,
                Spacing::Points(_) => time.max.max(1.0),
            };
            let ratio = time.min / step;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(invalid(
                    "sweep time axis",
                    "min must be a multiple of the spacing",
                ));
            }
            let per_param = map_indexed(exec, pvals.len(), |i| {
                let mut point = s.clone();
                point.sweep = None;
                point.set_numeric(&param_axis.key, pvals[i])?;
                point.t_end = time.max * scale;
                point.record_interval = step * scale;
                let out = run_scenario(&point)?;
                let values: Vec<f64> = tvals
                    .iter()
                    .map(|&t| sw.observable.of(out.trajectory.at(t * scale)))
                    .collect();
                Ok::<_, ScenarioError>((values, out.health))
            });
            let per_param: Vec<_> = per_param.into_iter().collect::<Result<_, _>>()?;
            let mut grid = Vec::with_capacity(v1.len() * v2.len());
            for (i, a) in v1.iter().enumerate() {
                for (j, b) in v2.iter().enumerate() {
                    let (pi, ti) = if which == 2 { (i, j) } else { (j, i) };
                    let (values, health) = &per_param[pi];
                    grid.push(((*a, *b, values[ti]), *health));
                }
            }
            grid
        }
    };

    let mut health = Health {
        max_trace_err: 0.0,
        min_eig: f64::INFINITY,
        renormalizations: 0,
    };
    let mut rows = Vec::with_capacity(grid.len());
    for (row, h) in grid {
        rows.push(row);
        health = health.merge(h);
    }
    Ok(SweepOutput {
        axis1: sw.axis1.key.clone(),
        axis2: sw.axis2.key.clone(),
        observable: sw.observable,
        rows,
        health,
    })
}

fn sci(x: f64) -> String {
    format!("{x:.16e}")
}

fn record_fields(r: &Record) -> [f64; 11] {
    [
        r.t,
        r.t_over_2pi(),
        r.p_d,
        r.fidelity,
        r.purity,
        r.f1,
        r.f2,
        r.a1,
        r.a2,
        r.trace_err,
        r.min_eig,
    ]
}

/// Trajectory CSV with [`TRAJECTORY_HEADER`], every value with 17
/// significant digits.
pub fn trajectory_csv(records: &[Record]) -> String {
    let mut out = String::with_capacity(records.len() * 260);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in records {
        let fields: Vec<String> = record_fields(r).iter().map(|&x| sci(x)).collect();
        out.push_str(&fields.join(", "));
        out.push('\n');
    }
    out
}

/// Ensemble CSV: the trajectory columns of the mean state plus the
/// standard error of `F`.
pub fn ensemble_csv(summary: &EnsembleSummary) -> String {
    let mut out = String::new();
    out.push_str(TRAJECTORY_HEADER);
    out.push_str(", F_std_err\n");
    for (r, se) in summary.records.iter().zip(&summary.f_std_err) {
        let mut fields: Vec<String> = record_fields(r).iter().map(|&x| sci(x)).collect();
        fields.push(sci(*se));
        out.push_str(&fields.join(", "));
        out.push('\n');
    }
    out
}

/// Parses a trajectory CSV written by [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<Record>, ScenarioError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
        _ => {
            return Err(ScenarioError::Parse {
                line: 1,
                message: "missing trajectory header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ScenarioError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if v.len() != 11 {
                return Err(ScenarioError::Parse {
                    line: i + 1,
                    message: format!("expected 11 columns, got {}", v.len()),
                });
            }
            Ok(Record {
                t: v[0],
                p_d: v[2],
                fidelity: v[3],
                purity: v[4],
                f1: v[5],
                f2: v[6],
                a1: v[7],
                a2: v[8],
                trace_err: v[9],
                min_eig: v[10],
            })
        })
        .collect()
}

pub fn sweep_csv(out: &SweepOutput) -> String {
    let mut s = format!("{}, {}, {}\n", out.axis1, out.axis2, out.observable.name());
    for (a, b, v) in &out.rows {
        let _ = writeln!(s, "{}, {}, {}", sci(*a), sci(*b), sci(*v));
    }
    s
}

/// Conversion between dimensionless and laboratory time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabUnits {
    /// `Ω_r/2π` in MHz.
    pub omega_r_over_2pi_mhz: f64,
    /// `γ/2π` in MHz.
    pub gamma_over_2pi_mhz: f64,
}

impl LabUnits {
    /// `Ω_r/2π = 4 MHz`, `γ/2π = 0.007 MHz`.
    pub fn cesium_64p() -> Self {
        Self {
            omega_r_over_2pi_mhz: 4.0,
            gamma_over_2pi_mhz: 0.007,
        }
    }

    /// Laboratory time in ms for dimensionless time `Ω_r t`.
    pub fn time_ms(&self, t_dimensionless: f64) -> f64 {
        to_physical_units(t_dimensionless, self.omega_r_over_2pi_mhz * 1e6 * TAU)
    }

    /// `γ/Ω_r`.
    pub fn gamma_ratio(&self) -> f64 {
        self.gamma_over_2pi_mhz / self.omega_r_over_2pi_mhz
    }
}

/// `t / Ω_r` in ms, with `omega_r` the angular Rabi frequency in rad/s.
pub fn to_physical_units(t_dimensionless: f64, omega_r: f64) -> f64 {
    assert!(omega_r > 0.0, "Rabi frequency must be positive");
    t_dimensionless / omega_r * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn every_preset_is_valid_and_round_trips() {
        for name in PRESET_NAMES {
            let s = preset(name).unwrap();
            s.validate().unwrap();
            let back: Scenario = s.to_config_string().parse().unwrap();
            assert_eq!(back, s, "{name}");
        }
        assert!(matches!(
            preset("fig7"),
            Err(ScenarioError::UnknownPreset(_))
        ));
    }

    #[test]
    fn fig2a_preset_parameters() {
        let s = preset("fig2a").unwrap();
        let p = s.params;
        assert_eq!(
            (p.delta_r, p.gamma, p.omega_m, p.delta_m),
            (50.0, 0.002, 0.01, 0.005)
        );
        assert_eq!(s.initial, InitialState::uniform_superposition());
        assert_eq!(s.control.mode, ControlMode::Off);
    }

    #[test]
    fn fig3e_preset() {
        let s = preset("fig3e").unwrap();
        assert_eq!(s.initial, InitialState::Named(NamedState::S10));
        assert_eq!(
            (s.control.lambda1, s.control.lambda2, s.control.mode),
            (0.08, 0.08, ControlMode::Both)
        );
    }

    #[test]
    fn parse_errors_are_distinct() {
        let e = "model = effective\nfoo = 1\n"
            .parse::<Scenario>()
            .unwrap_err();
        assert_eq!(
            e,
            ScenarioError::UnknownKey {
                key: "foo".into(),
                line: 2
            }
        );
        let e = "params.gamma = fast\n".parse::<Scenario>().unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 1, .. }));
        let e = "no equals sign\n".parse::<Scenario>().unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 1, .. }));
        let e = "initial = mixture 0.6 |00>; 0.3 |10>\n"
            .parse::<Scenario>()
            .unwrap_err();
        match e {
            ScenarioError::Validation { field, .. } => assert_eq!(field, "initial"),
            other => panic!("{other:?}"),
        }
        let e = "params.gamma = 0.1\nparams.gamma = 0.2\n"
            .parse::<Scenario>()
            .unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 2, .. }));
        let e = "params.gamma = -1\n".parse::<Scenario>().unwrap_err();
        assert!(matches!(e, ScenarioError::Model(_)));
    }

    #[test]
    fn initial_state_forms() {
        let s: Scenario = "initial = superposition 0.6 |00>; 0.8i |D>\n"
            .parse()
            .unwrap();
        let rho = s.initial.density(Model::EffectiveDirect).unwrap();
        assert_abs_diff_eq!(rho.matrix()[(2, 2)].re, 0.64, epsilon = 1e-15);
        let s: Scenario = "initial = pair |10> |01>\ninitial.eta = 0.5\n"
            .parse()
            .unwrap();
        let rho = s.initial.density(Model::Effective).unwrap();
        // Equal mixture of |10⟩ and |01⟩ has no B–D coherence.
        assert_abs_diff_eq!(rho.matrix()[(1, 2)].norm(), 0.0, epsilon = 1e-15);
        assert!("initial = pair |10> |01>\n".parse::<Scenario>().is_err());
        assert!("initial = superposition 0.6 |00>; 0.6 |11>\n"
            .parse::<Scenario>()
            .is_err());
        assert!("initial = |xy>\n".parse::<Scenario>().is_err());
    }

    #[test]
    fn grid_bound_is_enforced() {
        let mut s = preset("fig2b").unwrap();
        s.sweep.as_mut().unwrap().axis1 = Axis::with_points("params.omega_m", 0.0, 0.03, 501);
        assert!(matches!(
            s.validate(),
            Err(ScenarioError::GridTooLarge { points: 10020, .. })
        ));
    }

    #[test]
    fn axis_values() {
        let a = Axis::with_step("t_over_2pi", 0.0, 1500.0, 100.0);
        assert_eq!(a.len(), 16);
        assert_eq!(a.values()[15], 1500.0);
        let b = Axis::with_points("initial.eta", 0.0, 1.0, 11);
        assert_eq!(b.values()[5], 0.5);
        assert_eq!(b.values()[10], 1.0);
    }

    #[test]
    fn step_rule() {
        let s = preset("fig2a").unwrap();
        assert_eq!(s.max_dt().unwrap(), 0.1);
        let full = s.clone().with_model(Model::Full);
        let dt = full.max_dt().unwrap();
        assert!(dt <= 5e-4 && dt > 4.5e-4, "{dt}");
    }

    #[test]
    fn lab_units() {
        let u = LabUnits::cesium_64p();
        assert_abs_diff_eq!(u.time_ms(1600.0 * TAU), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(u.time_ms(600.0 * TAU), 0.15, epsilon = 1e-12);
        assert_eq!(u.time_ms(0.0), 0.0);
        assert_abs_diff_eq!(u.gamma_ratio(), 0.00175, epsilon = 1e-15);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut s = preset("fig3e").unwrap();
        s.t_end = 50.0 * TAU;
        let out = run_scenario(&s).unwrap();
        let text = trajectory_csv(&out.trajectory.records);
        assert!(text.starts_with(TRAJECTORY_HEADER));
        let back = parse_trajectory_csv(&text).unwrap();
        assert_eq!(back.len(), out.trajectory.records.len());
        for (a, b) in back.iter().zip(&out.trajectory.records) {
            assert_eq!(record_fields(a), record_fields(b));
        }
    }

    #[test]
    fn dark_initial_state_stays_dark() {
        let mut s = preset("fig3e").unwrap();
        s.initial = InitialState::Named(NamedState::Dark);
        s.t_end = 100.0 * TAU;
        let out = run_scenario(&s).unwrap();
        assert!(out.health.ok());
        for r in &out.trajectory.records {
            assert_abs_diff_eq!(r.fidelity, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn sweep_is_deterministic_and_axis1_major() {
        let mut s = preset("fig2b").unwrap();
        s.t_end = 20.0 * TAU;
        s.sweep = Some(SweepSpec {
            axis1: Axis::with_points("params.omega_m", 0.005, 0.015, 3),
            axis2: Axis::with_points("params.gamma", 0.001, 0.002, 2),
            observable: Observable::PD,
        });
        let a = run_sweep(&s, Execution::Parallel).unwrap();
        let b = run_sweep(&s, Execution::Sequential).unwrap();
        assert_eq!(sweep_csv(&a), sweep_csv(&b));
        let keys: Vec<(f64, f64)> = a.rows.iter().map(|r| (r.0, r.1)).collect();
        assert_eq!(keys[0], (0.005, 0.001));
        assert_eq!(keys[1], (0.005, 0.002));
        assert_eq!(keys[2].0, 0.01);
        assert!(a.health.ok());
    }

    #[test]
    fn time_axis_sweep_matches_direct_runs() {
        let mut s = preset("fig4a").unwrap();
        s.sweep = Some(SweepSpec {
            axis1: Axis::with_points("initial.eta", 0.0, 1.0, 3),
            axis2: Axis::with_step("t_over_2pi", 0.0, 40.0, 20.0),
            observable: Observable::F,
        });
        let out = run_sweep(&s, Execution::Sequential).unwrap();
        assert_eq!(out.rows.len(), 9);
        let mut direct = s.clone();
        direct.sweep = None;
        direct.set_numeric("initial.eta", 1.0).unwrap();
        direct.t_end = 40.0 * TAU;
        direct.record_interval = 20.0 * TAU;
        let f = run_scenario(&direct).unwrap().trajectory.last().fidelity;
        assert_eq!(out.rows[8], (1.0, 40.0, f));
    }

    #[test]
    fn noise_ensemble_needs_a_channel() {
        let s = preset("fig3e").unwrap();
        assert!(run_noise_ensemble(&s, 10, 1, Execution::Sequential).is_err());
    }
}
