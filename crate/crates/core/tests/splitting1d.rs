use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stiffswitch::env::{feature_dim, Action, FeatureNorm};
use stiffswitch::eval::{run_policy_episode, Mode};
use stiffswitch::experiment::RunConfig;
use stiffswitch::policy::{Checkpoint, PolicyParams};
use stiffswitch::reference::{generate_for, ReferenceKey};
use stiffswitch::splitting1d::{run_1d_case, run_split, Chooser, Demo1dConfig};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

fn desk() -> RunConfig {
    RunConfig::load(Path::new(DESK)).unwrap()
}

fn checkpoint(cfg: &RunConfig, action: Option<Action>, seed: u64) -> Checkpoint {
    let dim = feature_dim(cfg.problem.instantiate(&cfg.demo1d.background).unwrap().observables().key_species.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = cfg.train.ppo.hidden;
    let params = match action {
        Some(a) => PolicyParams::forced(dim, hidden, a.index(), &mut rng),
        None => PolicyParams::init(dim, hidden, &mut rng),
    };
    Checkpoint::new(params, FeatureNorm::identity(dim), 0.0, 0, cfg.problem.id())
}

fn small(cfg: &RunConfig) -> Demo1dConfig {
    Demo1dConfig { n_cells: 16, n_steps: 30, ..cfg.demo1d }
}

#[test]
fn uniform_grid_without_diffusion_is_independent_0d_episodes() {
    let cfg = desk();
    let demo = Demo1dConfig { n_cells: 4, kappa: 0.0, hot_temperature: cfg.demo1d.background.temperature, n_steps: 120, ..cfg.demo1d };
    // a random policy, so that both solvers are exercised
    let ck = checkpoint(&cfg, None, 3);
    let problem = cfg.problem.instantiate(&demo.background).unwrap();
    let grid = demo.initial_grid(&cfg.problem).unwrap();
    let run = run_split(grid, problem.as_ref(), Chooser::Policy(&ck), &cfg.env, demo.dt(&cfg.env), demo.n_steps).unwrap();

    let key = ReferenceKey { problem: cfg.problem.clone(), condition: demo.background, settings: cfg.env.reference };
    let reference = Arc::new(generate_for(&key).unwrap());
    let (_, tr) = run_policy_episode(problem, reference, &cfg.env, &ck, Mode::Greedy).unwrap();
    let n = tr.len().min(demo.n_steps);
    assert!(n > 50);
    let n_bdf = tr[..n].iter().filter(|t| t.action == Action::Bdf).count();
    assert!(n_bdf > 0 && n_bdf < n, "policy should mix solvers");
    for (k, t) in tr.iter().take(n).enumerate() {
        for i in 0..demo.n_cells {
            assert_eq!(run.choices[k][i], t.action, "step {k} cell {i}");
            assert_eq!(run.temperature[k + 1][i].to_bits(), t.state.temp.to_bits(), "step {k} cell {i}");
            assert_eq!(run.work[k][i], t.info.work);
        }
    }
}

#[test]
fn forced_bdf_is_its_own_reference() {
    let cfg = desk();
    let (report, rl, bdf) = run_1d_case(&cfg.problem, &small(&cfg), &cfg.env, &checkpoint(&cfg, Some(Action::Bdf), 1)).unwrap();
    assert_eq!(report.temperature_rmse, 0.0);
    assert_eq!(report.speedup, 1.0);
    assert_eq!(report.bdf_usage_fraction, 1.0);
    assert_eq!(rl.temperature, bdf.temperature);
}

#[test]
fn forced_qss_follows_the_qss_path() {
    let cfg = desk();
    let demo = small(&cfg);
    let ck = checkpoint(&cfg, Some(Action::Qss), 1);
    let (report, _, _) = run_1d_case(&cfg.problem, &demo, &cfg.env, &ck).unwrap();
    assert_eq!(report.work_policy, report.work_qss);
    assert_eq!(report.temperature_rmse, report.temperature_rmse_qss);
    assert_eq!(report.bdf_usage_fraction, 0.0);
    let mixed = run_1d_case(&cfg.problem, &demo, &cfg.env, &checkpoint(&cfg, None, 2)).unwrap().0;
    assert!(mixed.work_policy > report.work_qss);
}

#[test]
fn per_cell_work_sums_to_the_total() {
    let cfg = desk();
    let demo = small(&cfg);
    let (report, rl, bdf) = run_1d_case(&cfg.problem, &demo, &cfg.env, &checkpoint(&cfg, None, 4)).unwrap();
    for run in [&rl, &bdf] {
        assert_eq!(run.work.len(), demo.n_steps);
        let total: f64 = run.work.iter().map(|row| row.iter().sum::<f64>()).sum();
        assert_eq!(total, run.total_work);
    }
    assert_eq!(report.work_policy, rl.total_work);
    assert_eq!(report.work_bdf, bdf.total_work);
}

#[test]
fn csvs_have_one_row_per_step() {
    let cfg = desk();
    let demo = small(&cfg);
    let (_, rl, _) = run_1d_case(&cfg.problem, &demo, &cfg.env, &checkpoint(&cfg, None, 4)).unwrap();
    let dir = tempfile::TempDir::new().unwrap();
    let names = cfg.problem.instantiate(&demo.background).unwrap().observables().key_species_names();
    rl.write_csvs(dir.path(), &names).unwrap();
    let rows = |f: &str| csv::Reader::from_path(dir.path().join(f)).unwrap().records().count();
    assert_eq!(rows("temperature.csv"), demo.n_steps + 1);
    assert_eq!(rows("choices.csv"), demo.n_steps);
    assert_eq!(rows("work.csv"), demo.n_steps);
    for name in &names {
        assert_eq!(rows(&format!("species_{name}.csv")), demo.n_steps + 1);
    }
}
