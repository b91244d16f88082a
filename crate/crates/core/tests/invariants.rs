use std::f64::consts::TAU;

use proptest::prelude::*;

use rydberg_singlet::control::{ControlConfig, ControlMode};
use rydberg_singlet::model::{Model, NamedState, SystemParams};
use rydberg_singlet::scenarios::{run_scenario, InitialState, Scenario};

const STATES: [NamedState; 7] = [
    NamedState::S00,
    NamedState::S01,
    NamedState::S10,
    NamedState::S11,
    NamedState::Bright,
    NamedState::Dark,
    NamedState::RR,
];

fn params() -> impl Strategy<Value = SystemParams> {
    (20.0..80.0f64, 0.002..0.03f64, 0.0005..0.01f64, 0.0..0.02f64).prop_map(|(dr, om, g, dm)| {
        let mut p = SystemParams::compensated(dr, om, g);
        p.delta_m = dm;
        p
    })
}

fn mixture() -> impl Strategy<Value = InitialState> {
    prop::collection::vec((0.05..1.0f64, 0usize..7), 1..4).prop_map(|terms| {
        let total: f64 = terms.iter().map(|(w, _)| w).sum();
        let mut weights: Vec<(f64, NamedState)> =
            terms.iter().map(|(w, k)| (w / total, STATES[*k])).collect();
        // Put the rounding residue on the first weight.
        let rest: f64 = weights[1..].iter().map(|(w, _)| w).sum();
        weights[0].0 = 1.0 - rest;
        InitialState::Mixture(weights)
    })
}

fn mode() -> impl Strategy<Value = ControlMode> {
    prop::sample::select(vec![
        ControlMode::Off,
        ControlMode::Both,
        ControlMode::OnlyH1,
        ControlMode::OnlyH2,
    ])
}

fn scenario(p: SystemParams, init: InitialState, l1: f64, l2: f64, mode: ControlMode) -> Scenario {
    let mut s = Scenario::new("prop", p, init, 20.0);
    s.control = ControlConfig {
        lambda1: l1,
        lambda2: l2,
        mode,
    };
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectories_stay_physical(
        p in params(),
        init in mixture(),
        l1 in 0.0..0.3f64,
        l2 in 0.0..0.3f64,
        mode in mode(),
        model in prop::sample::select(vec![Model::Effective, Model::EffectiveDirect]),
    ) {
        let s = scenario(p, init, l1, l2, mode).with_model(model);
        let out = run_scenario(&s).unwrap();
        prop_assert!(out.health.ok(), "{}", out.health);
        for r in &out.trajectory.records {
            prop_assert!((-1e-8..=1.0 + 1e-8).contains(&r.p_d));
            prop_assert!((-1e-8..=1.0 + 1e-8).contains(&r.fidelity));
            prop_assert!(r.purity > 0.0 && r.purity <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn feedback_never_lowers_fidelity(
        p in params(),
        init in mixture(),
        l1 in 0.0..0.3f64,
        l2 in 0.0..0.3f64,
        mode in mode(),
    ) {
        let s = scenario(p, init, l1, l2, mode);
        let out = run_scenario(&s).unwrap();
        for w in out.trajectory.records.windows(2) {
            prop_assert!(w[1].fidelity >= w[0].fidelity - 1e-9, "{} -> {}", w[0].fidelity, w[1].fidelity);
        }
    }

    #[test]
    fn config_text_round_trips(
        p in params(),
        init in mixture(),
        l1 in 0.0..1.0f64,
        mode in mode(),
        t in 1.0..3000.0f64,
        eta in 0.0..0.2f64,
        channel in 0usize..5,
    ) {
        let mut s = scenario(p, init, l1, 0.08, mode);
        s.t_end = t * TAU;
        s.noise.channel = channel;
        s.noise.eta = eta;
        let back: Scenario = s.to_config_string().parse().unwrap();
        prop_assert_eq!(back, s);
    }
}
