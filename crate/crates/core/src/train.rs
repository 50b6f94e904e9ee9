//! End-to-end policy training: taped episode unrolls, the tracking plus
//! auxiliary reconstruction loss, Adam with global-norm clipping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{evaluate, summarize, Filter, Setup};
use crate::dynamics::{Episode, State, NX};
use crate::error::{Error, Result};
use crate::linalg::{backward, Graph, Matrix, Tape};
use crate::ma_ukf::{ma_step_graph, MaUkf};
use crate::policy::{self, decode_matrix, encode_values, init_params, Checkpoint, Dims, PolicyParams, PolicyVars};
use crate::rng::{self, Split};
use crate::ukf::{initial_belief, FilterModel, GaussianBelief, UtWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Generated episodes, split into training and validation.
    pub episodes: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub lambda_aux: f64,
    /// Steps per truncated backpropagation window; 0 unrolls the whole episode.
    pub truncation: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub checkpoint_every: usize,
    /// Optional per-component weights on the squared state error.
    pub state_weights: Option<[f64; NX]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            episodes: 2000,
            seq_len: 60,
            lr: 1e-3,
            lambda_aux: 0.1,
            truncation: 0,
            clip_norm: 10.0,
            val_fraction: 0.1,
            checkpoint_every: 10,
            state_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.epochs == 0 || self.batch_size == 0 || self.seq_len == 0 || self.episodes < 2 {
            return bad("epochs, batch_size, seq_len must be positive and episodes ≥ 2");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.lr >= 0.0) || !(self.lambda_aux >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and lambda_aux must be ≥ 0 and clip_norm > 0");
        }
        if let Some(w) = self.state_weights {
            if w.iter().any(|v| !(*v >= 0.0)) {
                return bad("state_weights must be non-negative");
            }
        }
        let (tr, va) = self.split_sizes();
        if tr == 0 || va == 0 {
            return bad("val_fraction leaves an empty split");
        }
        Ok(())
    }

    /// `(training, validation)` episode counts.
    pub fn split_sizes(&self) -> (usize, usize) {
        let va = ((self.episodes as f64) * self.val_fraction).round() as usize;
        (self.episodes.saturating_sub(va), va)
    }

    pub fn loss(&self, gamma: f64) -> LossConfig {
        LossConfig {
            lambda_aux: self.lambda_aux,
            truncation: self.truncation,
            state_weights: self.state_weights,
            gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_aux: f64,
    pub truncation: usize,
    pub state_weights: Option<[f64; NX]>,
    pub gamma: f64,
}

/// Loss node and its two parts.
pub struct LossTerms<V> {
    pub total: V,
    pub tracking: V,
    pub aux: V,
}

/// `Σᵢ wᵢ (xᵢ − x̂ᵢ)²`, unweighted when `weights` is `None`.
pub fn tracking_term<G: Graph>(g: &mut G, xhat: &G::Var, truth: &State, weights: Option<&[f64; NX]>) -> Result<G::Var> {
    let x = g.constant(Matrix::col_vector(truth));
    let d = g.sub(&x, xhat)?;
    match weights {
        None => g.sum_squares(&d),
        Some(w) => {
            let s = g.constant(Matrix::col_vector(&w.map(f64::sqrt)));
            let dw = g.hadamard(&d, &s)?;
            g.sum_squares(&dw)
        }
    }
}

/// Unrolls the filter over an episode and accumulates
/// `Σₖ ‖xₖ − x̂ₖ‖² + λ ‖ν̃ₖ − g(cₖ)‖²`.
pub fn episode_loss<G: Graph>(
    g: &mut G,
    model: &FilterModel,
    p: &PolicyVars<G::Var>,
    dims: &Dims,
    ep: &Episode,
    belief0: &GaussianBelief,
    cfg: &LossConfig,
) -> Result<LossTerms<G::Var>> {
    let mut mean = g.constant(belief0.mean.clone());
    let mut cov = g.constant(belief0.cov.clone());
    let mut h = g.constant(Matrix::zeros(dims.d_h, 1));
    let mut w_prev = g.constant(UtWeights::uniform(dims.n_x, cfg.gamma).mean_column());
    let mut tracking = g.constant(Matrix::scalar(0.0));
    let mut aux = g.constant(Matrix::scalar(0.0));
    for (k, z) in ep.measurements.iter().enumerate() {
        if cfg.truncation > 0 && k > 0 && k % cfg.truncation == 0 {
            mean = g.detach(&mean);
            cov = g.detach(&cov);
            h = g.detach(&h);
            w_prev = g.detach(&w_prev);
        }
        let zv = g.constant(Matrix::col_vector(z));
        let out = ma_step_graph(g, model, p, &mean, &cov, &h, &w_prev, cfg.gamma, &zv).map_err(|e| e.at_step(k + 1))?;
        let t = tracking_term(g, &out.mean, &ep.truth[k + 1], cfg.state_weights.as_ref())?;
        tracking = g.add(&tracking, &t)?;
        let recon = policy::aux_decode(g, p, &out.context)?;
        let r = g.sub(&out.proxy, &recon)?;
        let a = g.sum_squares(&r)?;
        aux = g.add(&aux, &a)?;
        mean = out.mean;
        cov = out.cov;
        h = out.h;
        w_prev = out.w_mean;
    }
    let scaled = g.scale(&aux, cfg.lambda_aux)?;
    let total = g.add(&tracking, &scaled)?;
    Ok(LossTerms { total, tracking, aux })
}

/// Loss value and parameter gradients of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeGrad {
    pub loss: f64,
    pub tracking: f64,
    pub aux: f64,
    pub grads: Vec<Matrix>,
}

pub fn episode_gradient(params: &PolicyParams, model: &FilterModel, ep: &Episode, p0: &[f64; NX], cfg: &LossConfig) -> Result<EpisodeGrad> {
    let mut tape = Tape::with_capacity(200 * ep.steps() + 64);
    let vars = params.load(&mut tape);
    let terms = episode_loss(&mut tape, model, &vars, &params.dims, ep, &initial_belief(ep, p0), cfg)?;
    let value = |id| tape.value(id).get(0, 0);
    let (loss, tracking, aux) = (value(terms.total), value(terms.tracking), value(terms.aux));
    if !loss.is_finite() {
        return Err(Error::NonFinite("episode loss"));
    }
    let mut g = backward(&tape, terms.total, &vars.vars)?;
    let grads: Vec<Matrix> = vars.vars.iter().map(|id| g.take(*id).expect("requested gradient")).collect();
    if grads.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("episode gradient"));
    }
    Ok(EpisodeGrad { loss, tracking, aux, grads })
}

/// Scales `grads` to global norm at most `max`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} tensors", grads.len(), self.m.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            p.same_shape(&grads[i], "adam")?;
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub train_loss: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub val_armse: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub grad_norm: f64,
    pub skipped: usize,
    pub wall_time: f64,
}

// serde_json writes non-finite floats as null
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_armse,grad_norm,skipped,wall_time\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.epoch, r.train_loss, r.val_armse, r.grad_norm, r.skipped, r.wall_time
        );
    }
    out
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub params: PolicyParams,
    pub adam: Adam,
    pub best: PolicyParams,
    pub best_val: f64,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    best_val: f64,
    best_epoch: usize,
    params: String,
    best: String,
    adam_t: u64,
    adam_m: Vec<String>,
    adam_v: Vec<String>,
    log: Vec<LogRow>,
}

impl TrainState {
    pub fn to_json(&self, seed: u64) -> Result<String> {
        let enc = |v: &[Matrix]| v.iter().map(|m| encode_values(m.data())).collect();
        let file = StateFile {
            epoch: self.epoch,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            params: Checkpoint::new(self.params.clone(), seed).to_json()?,
            best: Checkpoint::new(self.best.clone(), seed).to_json()?,
            adam_t: self.adam.t,
            adam_m: enc(&self.adam.m),
            adam_v: enc(&self.adam.v),
            log: self.log.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: StateFile = serde_json::from_str(text)?;
        let params = Checkpoint::from_json(&f.params)?.params;
        let best = Checkpoint::from_json(&f.best)?.params;
        let dec = |v: &[String]| -> Result<Vec<Matrix>> {
            if v.len() != params.tensors().len() {
                return Err(Error::Format("optimizer state does not match the parameters".into()));
            }
            v.iter()
                .zip(params.tensors())
                .map(|(s, t)| decode_matrix([t.rows(), t.cols()], s))
                .collect()
        };
        let mut adam = Adam::new(&params);
        adam.t = f.adam_t;
        adam.m = dec(&f.adam_m)?;
        adam.v = dec(&f.adam_v)?;
        Ok(Self {
            epoch: f.epoch,
            params,
            adam,
            best,
            best_val: f.best_val,
            best_epoch: f.best_epoch,
            log: f.log,
        })
    }
}

/// Training and validation episodes for a config and seed, from disjoint seed splits.
pub fn training_data(cfg: &TrainConfig, seed: u64, dt: f64, world: &crate::dynamics::NoiseModel) -> Result<(Vec<Episode>, Vec<Episode>)> {
    use crate::dynamics::{generate, Regime};
    let (n_train, n_val) = cfg.split_sizes();
    let train = generate(Regime::TrainCt, rng::split_seed(seed, Split::Train), n_train, cfg.seq_len, dt, world)?;
    let val = generate(Regime::TrainCt, rng::split_seed(seed, Split::Validation), n_val, cfg.seq_len, dt, world)?;
    Ok((train, val))
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub setup: Setup,
    pub gamma: f64,
    pub dims: Dims,
    pub train: &'a [Episode],
    pub val: &'a [Episode],
}

impl<'a> Trainer<'a> {
    /// Mean capped ARMSE of the filter on the validation split.
    pub fn validate(&self, params: &PolicyParams) -> Result<f64> {
        let f = Filter::Ma(MaUkf::new(self.setup.model.clone(), params, self.gamma)?);
        Ok(summarize(&evaluate(&f, &self.setup, self.val)).mean)
    }

    /// Fresh parameters from the init stream, validated once as epoch 0.
    pub fn init_state(&self) -> Result<TrainState> {
        self.cfg.validate()?;
        let params = init_params(&mut rng::stream(rng::split_seed(self.seed, Split::Init)), self.dims)?;
        let val = self.validate(&params)?;
        info!("epoch 0: validation ARMSE {val:.3}");
        Ok(TrainState {
            epoch: 0,
            adam: Adam::new(&params),
            best: params.clone(),
            params,
            best_val: val,
            best_epoch: 0,
            log: vec![LogRow {
                epoch: 0,
                train_loss: f64::NAN,
                val_armse: val,
                grad_norm: f64::NAN,
                skipped: 0,
                wall_time: 0.0,
            }],
        })
    }

    /// Batch gradient: the sum of per-episode gradients in batch order.
    fn batch_gradient(&self, params: &PolicyParams, batch: &[usize]) -> Result<(Vec<Matrix>, f64, usize)> {
        let loss_cfg = self.cfg.loss(self.gamma);
        let results: Vec<Result<EpisodeGrad>> = batch
            .par_iter()
            .map(|&i| episode_gradient(params, &self.setup.model, &self.train[i], &self.setup.p0, &loss_cfg))
            .collect();
        let mut sum: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        let mut loss = 0.0;
        let mut skipped = 0;
        for (r, &i) in results.into_iter().zip(batch) {
            match r {
                Ok(eg) => {
                    loss += eg.loss;
                    for (s, g) in sum.iter_mut().zip(&eg.grads) {
                        s.add_assign(g)?;
                    }
                }
                Err(e) => {
                    warn!("skipping training episode {i} (seed {}): {e}", self.train[i].seed);
                    skipped += 1;
                }
            }
        }
        if skipped * 10 > batch.len() {
            return Err(Error::TrainingAborted(format!(
                "{skipped} of {} episodes in a batch produced non-finite losses or gradients",
                batch.len()
            )));
        }
        Ok((sum, loss, skipped))
    }

    pub fn run_epoch(&self, st: &mut TrainState, started: Instant) -> Result<()> {
        let epoch = st.epoch + 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut r = rng::stream(rng::episode_seed(rng::split_seed(self.seed, Split::Shuffle), epoch as u64));
        order.shuffle(&mut r);
        let (mut loss, mut norm, mut skipped, mut batches, mut counted) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let (mut grads, l, s) = self.batch_gradient(&st.params, batch)?;
            norm += clip_global_norm(&mut grads, self.cfg.clip_norm);
            st.adam.step(&mut st.params, &grads, self.cfg.lr)?;
            loss += l;
            skipped += s;
            counted += batch.len() - s;
            batches += 1;
        }
        let val = self.validate(&st.params)?;
        st.epoch = epoch;
        if val < st.best_val {
            st.best_val = val;
            st.best = st.params.clone();
            st.best_epoch = epoch;
        }
        let row = LogRow {
            epoch,
            train_loss: loss / counted.max(1) as f64,
            val_armse: val,
            grad_norm: norm / batches.max(1) as f64,
            skipped,
            wall_time: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.2} val ARMSE {val:.3} (best {:.3} @ {}) |g| {:.1}",
            row.train_loss, st.best_val, st.best_epoch, row.grad_norm
        );
        st.log.push(row);
        Ok(())
    }

    /// Runs until `cfg.epochs`, writing checkpoints and the resume state into `out` when given.
    pub fn train(&self, st: &mut TrainState, out: Option<&Path>) -> Result<()> {
        let started = Instant::now();
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        while st.epoch < self.cfg.epochs {
            self.run_epoch(st, started)?;
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && st.epoch % every == 0) || st.epoch == self.cfg.epochs {
                    self.write_outputs(st, dir)?;
                }
            }
        }
        Ok(())
    }

    fn write_outputs(&self, st: &TrainState, dir: &Path) -> Result<()> {
        let val = st.log.last().map_or(f64::NAN, |r| r.val_armse);
        let mut ck = Checkpoint::new(st.params.clone(), self.seed);
        ck.meta.insert("epoch".into(), st.epoch.into());
        ck.meta.insert("val_armse".into(), val.into());
        ck.save(&dir.join(format!("ckpt_epoch{:04}_val{val:.3}.json", st.epoch)))?;
        let mut best = Checkpoint::new(st.best.clone(), self.seed);
        best.meta.insert("epoch".into(), st.best_epoch.into());
        best.meta.insert("val_armse".into(), st.best_val.into());
        best.save(&dir.join("best.json"))?;
        fs::write(dir.join("train_state.json"), st.to_json(self.seed)?)?;
        fs::write(dir.join("training_log.csv"), log_csv(&st.log))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![Matrix::col_vector(&[3.0, 4.0]), Matrix::scalar(12.0)];
        let n = clip_global_norm(&mut g, 6.5);
        assert_eq!(n, 13.0);
        assert_eq!(g[0].data(), &[1.5, 2.0]);
        assert_eq!(g[1].get(0, 0), 6.0);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut p = PolicyParams::zeros(Dims { n_x: 1, n_z: 1, d_h: 1, d_p: 1 });
        let grads: Vec<Matrix> = p.tensors().iter().map(|t| Matrix::filled(t.rows(), t.cols(), 0.5)).collect();
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &grads, 1e-3).unwrap();
        // m̂ = g, v̂ = g², Δ = −lr g / (|g| + ε)
        let expect = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!(p.tensors().iter().all(|t| t.data().iter().all(|v| (v - expect).abs() < 1e-18)));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = PolicyParams::zeros(Dims::default());
        p[policy::Param::WIn].set(0, 0, 0.7);
        let before = p.clone();
        let zeros: Vec<Matrix> = p.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        let mut adam = Adam::new(&p);
        adam.m[0].set(0, 0, 1.0);
        adam.step(&mut p, &zeros, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.m[0].get(0, 0), 0.9);
    }

    #[test]
    fn config_rejects_bad_split() {
        let c = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().split_sizes(), (1800, 200));
    }
}
