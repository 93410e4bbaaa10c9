use std::sync::Arc;

use stiffswitch::env::{feature_dim, Action, Env, EnvConfig, EnvError, FeatureNorm};
use stiffswitch::kinetics::{Condition, ProblemSpec};
use stiffswitch::reference::{generate_for, ReferenceKey, ReferenceSettings};

fn nominal_env() -> Env {
    let settings = ReferenceSettings { t_stop: 2000.0, stop_margin_windows: 10, ..Default::default() };
    let key = ReferenceKey { problem: ProblemSpec::default(), condition: Condition::nominal(), settings };
    let reference = Arc::new(generate_for(&key).unwrap());
    let problem = key.problem.instantiate(&key.condition).unwrap();
    let n_key = problem.observables().key_species.len();
    let config = EnvConfig { reference: settings, ..Default::default() };
    Env::new(problem, reference, config, Arc::new(FeatureNorm::identity(feature_dim(n_key)))).unwrap()
}

fn run(env: &mut Env, choose: impl Fn(usize) -> Action) -> Vec<stiffswitch::env::Transition> {
    env.reset();
    let mut out = Vec::new();
    while !env.is_done() {
        let k = out.len();
        out.push(env.step(choose(k), 1.0).unwrap());
    }
    out
}

#[test]
fn always_bdf_has_unit_mean_cost() {
    let mut env = nominal_env();
    let tr = run(&mut env, |_| Action::Bdf);
    assert_eq!(tr.len(), env.n_windows());
    let mean = tr.iter().map(|t| t.cost_norm).sum::<f64>() / tr.len() as f64;
    assert!((mean - 1.0).abs() <= 0.05, "mean normalized cost {mean}");
    // the production tolerances drift slightly through the runaway, but only
    // for a handful of windows
    let mean_err = tr.iter().map(|t| t.error).sum::<f64>() / tr.len() as f64;
    let mean_nu = tr.iter().map(|t| t.violation).sum::<f64>() / tr.len() as f64;
    assert!(mean_err < 1e-3, "operational BDF mean error {mean_err}");
    assert!(mean_nu < 1e-3, "operational BDF mean violation {mean_nu}");
}

#[test]
fn first_observation_has_zero_gradients() {
    let mut env = nominal_env();
    let obs = env.reset();
    let n_key = env.problem().observables().key_species.len();
    assert!(obs.raw[2 + n_key..].iter().all(|&v| v == 0.0), "{:?}", obs.raw);
    assert_eq!(obs.features.len(), feature_dim(n_key));
}

#[test]
fn episodes_are_deterministic() {
    let mut env = nominal_env();
    let pattern = |k: usize| if k.is_multiple_of(3) { Action::Bdf } else { Action::Qss };
    let a = run(&mut env, pattern);
    let b = run(&mut env, pattern);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.reward.to_bits(), y.reward.to_bits());
        assert_eq!(x.state, y.state);
    }
}

#[test]
fn stepping_after_done_is_an_error() {
    let mut env = nominal_env();
    run(&mut env, |_| Action::Qss);
    assert!(matches!(env.step(Action::Bdf, 0.0), Err(EnvError::EpisodeDone)));
    assert!(Action::from_index(2).is_err());
}

#[test]
fn qss_is_cheaper_during_induction() {
    let mut env = nominal_env();
    let tr = run(&mut env, |_| Action::Qss);
    assert!(tr[0].cost_norm < 0.5, "{}", tr[0].cost_norm);
    assert!(tr[0].error < 1e-3);
}

#[test]
fn qss_runaway_falls_back_to_bdf() {
    // coarse windows, where QSS cannot follow the thermal runaway
    let settings = ReferenceSettings { dt_dec: 2.5e-5, t_stop: 2000.0, stop_margin_windows: 5, ..Default::default() };
    let key = ReferenceKey { problem: ProblemSpec::default(), condition: Condition::nominal(), settings };
    let reference = Arc::new(generate_for(&key).unwrap());
    let problem = key.problem.instantiate(&key.condition).unwrap();
    let config = EnvConfig { reference: settings, qss_substeps: 80, ..Default::default() };
    let norm = Arc::new(FeatureNorm::identity(feature_dim(3)));
    let mut env = Env::new(problem.clone(), reference.clone(), config, norm.clone()).unwrap();
    let tr = run(&mut env, |_| Action::Qss);
    let fallbacks: Vec<_> = tr.iter().filter(|t| t.info.fallback).collect();
    assert!(!fallbacks.is_empty());
    let t_max = reference.states.iter().map(|s| s.temp).fold(0.0, f64::max);
    for t in &tr {
        assert!(t.state.temp <= 1.01 * t_max, "T = {}", t.state.temp);
        assert!(t.error < 1e-2, "E = {}", t.error);
    }

    // without the conservation check the same window returns garbage
    let loose = EnvConfig { qss_max_drift: f64::MAX, ..config };
    let mut env = Env::new(problem, reference, loose, norm).unwrap();
    let tr = run(&mut env, |_| Action::Qss);
    assert!(tr.iter().all(|t| !t.info.fallback));
    assert!(tr.iter().any(|t| t.state.temp > 10.0 * t_max));
}
