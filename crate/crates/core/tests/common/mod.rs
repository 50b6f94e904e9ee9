#![allow(dead_code)]

use maukf::dynamics::{gen_train_episode, generate, Episode, NoiseConfig, Regime};
use maukf::linalg::Matrix;
use maukf::policy::{init_params, Dims, Param, PolicyParams};
use maukf::rng;
use maukf::ukf::FilterModel;

pub const DT: f64 = 0.1;

pub fn model() -> FilterModel {
    let n = NoiseConfig::default();
    FilterModel::ct(DT, n.q(DT), n.r())
}

pub fn train_episodes(base: u64, count: usize, steps: usize) -> Vec<Episode> {
    let world = NoiseConfig::default().train_model(DT).unwrap();
    generate(Regime::TrainCt, base, count, steps, DT, &world).unwrap()
}

pub fn weave_episodes(base: u64, count: usize, steps: usize) -> Vec<Episode> {
    let world = NoiseConfig::default().eval_model(DT).unwrap();
    generate(Regime::EvalWeave, base, count, steps, DT, &world).unwrap()
}

pub fn train_episode(seed: u64, steps: usize) -> Episode {
    gen_train_episode(seed, steps, DT, &NoiseConfig::default().train_model(DT).unwrap()).unwrap()
}

/// Initialized parameters with every zero-initialized tensor perturbed, so all paths carry gradient.
pub fn random_params(seed: u64) -> PolicyParams {
    let mut r = rng::stream(seed);
    let mut p = init_params(&mut r, Dims::default()).unwrap();
    for param in Param::ALL {
        let t = &mut p[param];
        let scale = match param {
            Param::LnInGain | Param::LnProjGain => 0.2,
            _ => 0.1,
        };
        for v in t.data_mut() {
            *v += scale * rng::normal(&mut r);
        }
    }
    p
}

pub fn random_column(r: &mut rng::Stream, n: usize, scale: f64) -> Matrix {
    Matrix::from_fn(n, 1, |_, _| scale * rng::normal(r))
}
