use maukf::dynamics::{
    ct_transition, gen_train_episode, gen_weave_episode, generate, radar_measure, read_dataset, regenerate,
    sample_glint_noise, write_dataset, NoiseConfig, NoiseModel, Regime, State,
};
use maukf::linalg::Matrix;
use maukf::rng;
use proptest::prelude::*;

fn rk4_turn(x: State, dt: f64, substeps: usize) -> State {
    let w = x[4];
    let f = |s: [f64; 4]| [s[1], -w * s[3], s[3], w * s[1]];
    let mut s = [x[0], x[1], x[2], x[3]];
    let h = dt / substeps as f64;
    for _ in 0..substeps {
        let k1 = f(s);
        let k2 = f(std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]));
        let k3 = f(std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]));
        let k4 = f(std::array::from_fn(|i| s[i] + h * k3[i]));
        s = std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    [s[0], s[1], s[2], s[3], w]
}

#[test]
fn ct_matches_fine_integration() {
    let x0 = [0.0, 10.0, 0.0, 10.0, 0.3];
    let exact = ct_transition(&x0, 0.1);
    let fine = rk4_turn(x0, 0.1, 1000);
    assert!((exact[0] - fine[0]).abs() < 1e-9);
    assert!((exact[2] - fine[2]).abs() < 1e-9);
}

#[test]
fn ct_series_branch_is_continuous() {
    let x0 = [5.0, 12.0, -3.0, 7.0, 0.0];
    for w in [9.9e-4, 1.0001e-3] {
        let a = ct_transition(&[x0[0], x0[1], x0[2], x0[3], w], 0.1);
        let b = rk4_turn([x0[0], x0[1], x0[2], x0[3], w], 0.1, 100);
        for i in 0..5 {
            assert!((a[i] - b[i]).abs() < 1e-10, "{w}: {a:?} vs {b:?}");
        }
    }
}

proptest! {
    #[test]
    fn ct_preserves_speed(vx in -50.0..50.0f64, vy in -50.0..50.0f64, w in -3.0..3.0f64, dt in 0.01..1.0f64) {
        let x = ct_transition(&[1.0, vx, 2.0, vy, w], dt);
        let before = vx.hypot(vy);
        prop_assert!((x[1].hypot(x[3]) - before).abs() <= 1e-12 * before.max(1.0));
        prop_assert_eq!(x[4], w);
    }

    #[test]
    fn bearings_in_range(px in -1e4..1e4f64, py in -1e4..1e4f64) {
        prop_assume!(px != 0.0 || py != 0.0);
        let z = radar_measure(&[px, 0.0, py, 0.0, 0.0]).unwrap();
        prop_assert!(z[1] > -std::f64::consts::PI && z[1] <= std::f64::consts::PI);
    }
}

fn mixture_check(eps: f64, eta: f64) {
    let r = Matrix::from_diag(&[100.0, 1e-4]);
    let model = NoiseModel::new(r.clone(), Matrix::zeros(5, 5), eps, eta).unwrap();
    let mut s = rng::stream(0xa11ce ^ eta as u64);
    let n = 1_000_000;
    let mut acc = [0.0f64; 3];
    for _ in 0..n {
        let v = sample_glint_noise(&model, &mut s);
        acc[0] += v[0] * v[0];
        acc[1] += v[1] * v[1];
        acc[2] += v[0] * v[1];
    }
    let expect = 1.0 - eps + eps * eta;
    let c00 = acc[0] / n as f64 / r.get(0, 0);
    let c11 = acc[1] / n as f64 / r.get(1, 1);
    assert!((c00 / expect - 1.0).abs() < 0.02, "({eps},{eta}) range {c00} vs {expect}");
    assert!((c11 / expect - 1.0).abs() < 0.02, "({eps},{eta}) bearing {c11} vs {expect}");
    assert!((acc[2] / n as f64).abs() < 0.02 * expect * (r.get(0, 0) * r.get(1, 1)).sqrt());
}

#[test]
fn glint_mixture_moments() {
    mixture_check(0.0, 20.0);
    mixture_check(1.0, 20.0);
    mixture_check(0.1, 20.0);
}

#[test]
fn train_turn_rates_avoid_gap() {
    let model = NoiseConfig::default().train_model(0.1).unwrap();
    let eps = generate(Regime::TrainCt, 77, 10_000, 1, 0.1, &model).unwrap();
    assert!(eps.iter().all(|e| e.truth[0][4].abs() >= 0.1 && e.truth[0][4].abs() <= 0.5));
    let left = eps.iter().filter(|e| e.truth[0][4] > 0.0).count();
    assert!((4500..5500).contains(&left));
}

#[test]
fn episodes_regenerate_bit_exactly() {
    let cfg = NoiseConfig::default();
    let train = cfg.train_model(0.1).unwrap();
    let eval = cfg.eval_model(0.1).unwrap();
    let a = gen_train_episode(123, 60, 0.1, &train).unwrap();
    assert_eq!(a, gen_train_episode(123, 60, 0.1, &train).unwrap());
    assert_eq!(a, regenerate(&a, &train).unwrap());
    let w = gen_weave_episode(321, 60, 0.1, &eval).unwrap();
    assert_eq!(w, regenerate(&w, &eval).unwrap());
    assert_eq!(a.truth.len(), a.measurements.len() + 1);
    for z in a.measurements.iter().chain(&w.measurements) {
        assert!(z[0] >= 0.0 && z[1] > -std::f64::consts::PI && z[1] <= std::f64::consts::PI);
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = NoiseConfig::default().train_model(0.1).unwrap();
    let eps = generate(Regime::TrainCt, 5, 3, 10, 0.1, &model).unwrap();
    let m = write_dataset(dir.path(), Regime::TrainCt, 5, "abc", &eps).unwrap();
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(eps, back);
}
