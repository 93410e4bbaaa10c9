use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stiffswitch::env::FeatureNorm;
use stiffswitch::policy::{log_softmax, softmax, Activation, Checkpoint, PolicyParams};

/// `L = A * log pi(a) - 0.5 * (V - R)^2` for one sample.
fn loss(p: &PolicyParams, x: &[f64], a: usize, adv: f64, ret: f64) -> f64 {
    let out = p.forward(x).unwrap();
    adv * log_softmax(&out.logits)[a] - 0.5 * (out.value - ret).powi(2)
}

fn analytic_grad(p: &PolicyParams, x: &[f64], a: usize, adv: f64, ret: f64) -> Vec<f64> {
    let out = p.forward(x).unwrap();
    let pr = softmax(&out.logits);
    let mut dl = [-adv * pr[0], -adv * pr[1]];
    dl[a] += adv;
    let mut g = vec![0.0; p.n_params()];
    p.backward(&out.cache, &dl, -(out.value - ret), &mut g).unwrap();
    g
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut p = PolicyParams::init(9, [128, 128], &mut rng);
    // a larger actor head so its gradients are not vanishingly small
    let actor = p.layers()[2];
    for v in &mut p.theta_mut()[actor.offset..actor.offset + actor.n_params()] {
        *v *= 50.0;
    }
    let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (a, adv, ret) = (1, 0.7, 1.3);
    let g = analytic_grad(&p, &x, a, adv, ret);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for layer in p.layers() {
        for _ in 0..50 {
            let i = layer.offset + rng.gen_range(0..layer.n_params());
            let orig = p.theta()[i];
            p.theta_mut()[i] = orig + h;
            let up = loss(&p, &x, a, adv, ret);
            p.theta_mut()[i] = orig - h;
            let down = loss(&p, &x, a, adv, ret);
            p.theta_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-7 {
                worst = worst.max((fd - g[i]).abs() / scale);
            } else {
                assert!((fd - g[i]).abs() < 1e-9);
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn zero_adjoints_give_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = PolicyParams::init(5, [16, 16], &mut rng);
    let out = p.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let mut g = vec![0.0; p.n_params()];
    p.backward(&out.cache, &[0.0, 0.0], 0.0, &mut g).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn linear_network_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = PolicyParams::init(4, [6, 5], &mut rng);
    p.activation = Activation::Identity;
    let theta = p.theta().to_vec();
    let [l1, l2, _, lc] = p.layers();
    let w1 = DMatrix::from_row_slice(6, 4, &theta[l1.offset..l1.offset + 24]);
    let b1 = DVector::from_row_slice(&theta[l1.offset + 24..l1.offset + 30]);
    let w2 = DMatrix::from_row_slice(5, 6, &theta[l2.offset..l2.offset + 30]);
    let wc = DVector::from_row_slice(&theta[lc.offset..lc.offset + 5]);
    let x = DVector::from_row_slice(&[0.3, -1.2, 2.0, 0.5]);
    let y = 0.25;

    // loss 0.5 (V - y)^2
    let out = p.forward(x.as_slice()).unwrap();
    let r = out.value - y;
    let mut g = vec![0.0; p.n_params()];
    p.backward(&out.cache, &[0.0, 0.0], r, &mut g).unwrap();

    let h1 = &w1 * &x + &b1;
    let dz1 = w2.transpose() * &wc * r;
    let expect_w1 = &dz1 * x.transpose();
    for i in 0..6 {
        for j in 0..4 {
            assert!((g[l1.offset + i * 4 + j] - expect_w1[(i, j)]).abs() < 1e-10);
        }
        assert!((g[l1.offset + 24 + i] - dz1[i]).abs() < 1e-10);
    }
    let expect_w2 = &wc * h1.transpose() * r;
    for i in 0..5 {
        for j in 0..6 {
            assert!((g[l2.offset + i * 6 + j] - expect_w2[(i, j)]).abs() < 1e-10);
        }
    }
    assert!((g[lc.offset + 5] - r).abs() < 1e-10);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PolicyParams::init(9, [32, 32], &mut rng);
    let norm = FeatureNorm { mean: vec![0.1; 9], std: vec![2.0 / 3.0; 9], clip: 10.0 };
    let ck = Checkpoint::new(p, norm, 1.2345678901234567, 4096, "two_step_ignition");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let x: Vec<f64> = (0..9).map(|i| (i as f64).sin() * 3.0).collect();
    let a = ck.params.forward(&x).unwrap();
    let b = back.params.forward(&x).unwrap();
    assert_eq!(a.logits.map(f64::to_bits), b.logits.map(f64::to_bits));
    assert_eq!(a.value.to_bits(), b.value.to_bits());

    let ck = Checkpoint::new(back.params, FeatureNorm::identity(9), 0.0, 0, "two_step_ignition");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}
