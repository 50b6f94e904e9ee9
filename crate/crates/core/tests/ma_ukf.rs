mod common;

use maukf::linalg::{Eager, Matrix, Tape};
use maukf::ma_ukf::{ma_step_graph, run_ma_ukf, MaUkf};
use maukf::policy::{init_params, Dims, Param, PolicyParams};
use maukf::rng;
use maukf::train::{episode_loss, LossConfig};
use maukf::ukf::{initial_belief, run_ukf, FilterModel, GaussianBelief, UtWeights, P0_DIAG};

use common::{model, random_params, train_episodes, weave_episodes};

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_heads_reproduce_uniform_ukf_bit_exactly() {
    let m = model();
    let uniform = UtWeights::uniform(5, 3.0);
    let mut eps = train_episodes(500, 10, 60);
    eps.extend(weave_episodes(501, 10, 60));
    for (i, ep) in eps.iter().enumerate() {
        let params = init_params(&mut rng::stream(i as u64), Dims::default()).unwrap();
        let f = MaUkf::new(m.clone(), &params, 3.0).unwrap();
        let b0 = initial_belief(ep, &P0_DIAG);
        let a = run_ma_ukf(ep, &f, &b0, true).unwrap();
        let b = run_ukf(ep, &uniform, &m, &b0).unwrap();
        for (x, y) in a.track.beliefs.iter().zip(&b.beliefs) {
            assert_eq!(bits(&x.mean), bits(&y.mean));
            assert_eq!(bits(&x.cov), bits(&y.cov));
        }
        assert!(a.weights.iter().all(|w| *w == uniform));
    }
}

#[test]
fn repeated_runs_are_identical() {
    let ep = &train_episodes(510, 1, 60)[0];
    let f = MaUkf::new(model(), &random_params(3), 3.0).unwrap();
    let b0 = initial_belief(ep, &P0_DIAG);
    assert_eq!(run_ma_ukf(ep, &f, &b0, true).unwrap(), run_ma_ukf(ep, &f, &b0, true).unwrap());
}

#[test]
fn weight_log_rows_are_convex() {
    let f = MaUkf::new(model(), &random_params(4), 3.0).unwrap();
    for ep in &train_episodes(520, 5, 60) {
        let t = run_ma_ukf(ep, &f, &initial_belief(ep, &P0_DIAG), true).unwrap();
        assert_eq!(t.weights.len(), ep.steps());
        for w in &t.weights {
            assert!((w.w_mean.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!((w.w_cov.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            w.check_convex().unwrap();
        }
        let csv = t.weights_csv();
        assert_eq!(csv.lines().count(), ep.steps() + 1);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 23);
    }
}

#[test]
fn centre_covariance_weight_leaves_only_process_noise() {
    let base = model();
    // an uninformative sensor keeps the posterior at the prior
    let m = FilterModel::ct(0.1, base.q.clone(), base.r.scale(1e12));
    let mut p = PolicyParams::zeros(Dims::default());
    p[Param::BPiM].set(0, 0, 60.0);
    p[Param::BPiC].set(0, 0, 60.0);
    let f = MaUkf::new(m.clone(), &p, 3.0).unwrap();
    let b = GaussianBelief::new(Matrix::col_vector(&[800.0, 10.0, -300.0, 5.0, 0.2]), Matrix::from_diag(&P0_DIAG)).unwrap();
    let (post, _, diag) = f.step(&b, &f.initial_state(), &[850.0, -0.36]).unwrap();
    assert!(diag.weights.w_cov[0] > 1.0 - 1e-15);
    let scale = m.q.max_abs();
    assert!(post.cov.max_abs_diff(&m.q) < 1e-6 * scale, "{}", post.cov.max_abs_diff(&m.q));
}

#[test]
fn taped_unroll_matches_eager_unroll() {
    let m = model();
    let p = random_params(5);
    let cfg = LossConfig {
        lambda_aux: 0.1,
        truncation: 0,
        state_weights: None,
        gamma: 3.0,
    };
    for ep in &train_episodes(530, 3, 60) {
        let b0 = initial_belief(ep, &P0_DIAG);
        let mut tape = Tape::new();
        let tv = p.load(&mut tape);
        let taped = episode_loss(&mut tape, &m, &tv, &p.dims, ep, &b0, &cfg).unwrap();
        let ev = p.load(&mut Eager);
        let eager = episode_loss(&mut Eager, &m, &ev, &p.dims, ep, &b0, &cfg).unwrap();
        assert_eq!(tape.value(taped.total).get(0, 0), eager.total.get(0, 0));

        // step by step against the eager filter
        let f = MaUkf::new(m.clone(), &p, 3.0).unwrap();
        let track = run_ma_ukf(ep, &f, &b0, false).unwrap();
        let mut t2 = Tape::new();
        let v2 = p.load(&mut t2);
        let mut mean = t2.constant(b0.mean.clone());
        let mut cov = t2.constant(b0.cov.clone());
        let mut h = t2.constant(Matrix::zeros(32, 1));
        let mut w = t2.constant(UtWeights::uniform(5, 3.0).mean_column());
        for (k, z) in ep.measurements.iter().enumerate() {
            let zv = t2.constant(Matrix::col_vector(z));
            let out = ma_step_graph(&mut t2, &m, &v2, &mean, &cov, &h, &w, 3.0, &zv).unwrap();
            assert!(t2.value(out.mean).max_abs_diff(&track.track.beliefs[k].mean) <= 1e-12);
            (mean, cov, h, w) = (out.mean, out.cov, out.h, out.w_mean);
        }
    }
}

#[test]
fn rejects_mismatched_dims() {
    let p = PolicyParams::zeros(Dims {
        n_x: 4,
        ..Dims::default()
    });
    assert!(MaUkf::new(model(), &p, 3.0).is_err());
    assert!(MaUkf::new(model(), &PolicyParams::zeros(Dims::default()), 0.0).is_err());
}
