use std::fs;

use stiffswitch::eval::ignition_delay;
use stiffswitch::kinetics::{Condition, OdeProblem, ProblemSpec, Robertson};
use stiffswitch::reference::{generate_for, generate_reference, ReferenceError, ReferenceKey, ReferenceSettings, ReferenceTrajectory};

fn rk4(p: &dyn OdeProblem, x0: &[f64], t_end: f64, n_steps: usize) -> Vec<f64> {
    let n = x0.len();
    let h = t_end / n_steps as f64;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for i in 0..n_steps {
        let t = i as f64 * h;
        p.rhs(t, &x, &mut k1);
        (0..n).for_each(|j| tmp[j] = x[j] + 0.5 * h * k1[j]);
        p.rhs(t + 0.5 * h, &tmp, &mut k2);
        (0..n).for_each(|j| tmp[j] = x[j] + 0.5 * h * k2[j]);
        p.rhs(t + 0.5 * h, &tmp, &mut k3);
        (0..n).for_each(|j| tmp[j] = x[j] + h * k3[j]);
        p.rhs(t + h, &tmp, &mut k4);
        (0..n).for_each(|j| x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));
    }
    x
}

fn ignition_key() -> ReferenceKey {
    ReferenceKey {
        problem: ProblemSpec::default(),
        condition: Condition::nominal(),
        settings: ReferenceSettings { t_stop: 2000.0, stop_margin_windows: 10, ..Default::default() },
    }
}

#[test]
fn zero_problem_has_constant_baseline() {
    let key = ReferenceKey {
        problem: ProblemSpec::Constant { rates: vec![0.0, 0.0, 0.0] },
        condition: Condition::nominal(),
        settings: ReferenceSettings { t_final: 1.0, dt_dec: 0.1, ..Default::default() },
    };
    let r = generate_for(&key).unwrap();
    assert_eq!(r.n_windows(), 10);
    let c0 = r.baseline_costs[0];
    assert!(c0 > 0.0);
    assert!(r.baseline_costs.iter().all(|&c| c == c0), "{:?}", r.baseline_costs);
    assert!(r.states.iter().all(|s| s.y == r.states[0].y));
    assert!(r.ignition_delay.is_none());
}

#[test]
fn robertson_reference_matches_oracle() {
    let settings = ReferenceSettings { t_final: 0.4, dt_dec: 0.004, ..Default::default() };
    let p = Robertson::new();
    let r = generate_reference(&p, &ProblemSpec::Robertson.initial_state(&Condition::nominal()), &settings).unwrap();
    assert_eq!(r.n_windows(), 100);
    let x0 = [1.0, 0.0, 0.0, 1.0];
    let coarse = rk4(&p, &x0, 0.4, 40_000);
    let fine = rk4(&p, &x0, 0.4, 80_000);
    let last = r.states.last().unwrap();
    // y1 tightly, the small product y3 more loosely
    for (i, tol) in [(0, 1e-8), (2, 1e-7)] {
        let oracle = fine[i] + (fine[i] - coarse[i]) / 15.0;
        let rel = (last.y[i] - oracle).abs() / oracle;
        assert!(rel < tol, "species {i}: {} vs {oracle} (rel {rel:e})", last.y[i]);
    }
}

#[test]
fn ignition_reference_is_bitwise_deterministic() {
    let a = generate_for(&ignition_key()).unwrap();
    let b = generate_for(&ignition_key()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.ignition_delay.is_some());
    assert!(a.n_windows() < ignition_key().settings.n_windows());
}

#[test]
fn save_load_round_trip_and_corruption() {
    let key = ignition_key();
    let r = generate_for(&key).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(key.file_name());
    r.save(&path).unwrap();
    let back = ReferenceTrajectory::load(&path, Some(&key.params_hash())).unwrap();
    assert_eq!(back.states, r.states);
    assert_eq!(back.baseline_costs, r.baseline_costs);

    let mut other = key.clone();
    other.condition.temperature += 1.0;
    assert!(matches!(
        ReferenceTrajectory::load(&path, Some(&other.params_hash())),
        Err(ReferenceError::HashMismatch { .. })
    ));

    let text = fs::read_to_string(&path).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["baseline_costs"][3] = serde_json::json!(1.0);
    fs::write(&path, serde_json::to_vec(&value).unwrap()).unwrap();
    assert!(matches!(ReferenceTrajectory::load(&path, None), Err(ReferenceError::Corrupt)));
}

#[test]
fn ignition_delay_is_stable_under_grid_refinement() {
    let key = ignition_key();
    let coarse = generate_for(&key).unwrap();
    let mut fine_key = key.clone();
    fine_key.settings.dt_dec /= 10.0;
    let fine = generate_for(&fine_key).unwrap();
    let t_coarse = coarse.ignition_delay.unwrap();
    let t_fine = ignition_delay(&fine.times, &fine.temperatures()).unwrap();
    assert!((t_coarse - t_fine).abs() <= key.settings.dt_dec, "{t_coarse} vs {t_fine}");
}
