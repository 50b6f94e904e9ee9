//! Ground-truth motion, the range/bearing sensor, glint noise and episode generation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky::psd_factor;
use crate::linalg::prim::{ct_step, wrap_angle};
use crate::linalg::Matrix;
use crate::rng::{self, Stream};

pub const NX: usize = 5;
pub const NZ: usize = 2;

/// `[p_x, v_x, p_y, v_y, ω]` in m, m/s, rad/s.
pub type State = [f64; NX];
/// `[range, bearing]` in m and rad, bearing in `(-π, π]`.
pub type Measurement = [f64; NZ];

/// Sensor and process noise magnitudes, as read from config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_r: f64,
    pub sigma_b: f64,
    pub sigma_a: f64,
    pub sigma_omega: f64,
    pub glint_prob: f64,
    pub glint_scale_train: f64,
    pub glint_scale_eval: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_r: 10.0,
            sigma_b: 0.01,
            sigma_a: 0.5,
            sigma_omega: 0.05,
            glint_prob: 0.1,
            glint_scale_train: 20.0,
            glint_scale_eval: 40.0,
        }
    }
}

impl NoiseConfig {
    pub fn r(&self) -> Matrix {
        Matrix::from_diag(&[self.sigma_r * self.sigma_r, self.sigma_b * self.sigma_b])
    }

    pub fn q(&self, dt: f64) -> Matrix {
        process_noise(dt, self.sigma_a, self.sigma_omega)
    }

    pub fn train_model(&self, dt: f64) -> Result<NoiseModel> {
        NoiseModel::new(self.r(), self.q(dt), self.glint_prob, self.glint_scale_train)
    }

    pub fn eval_model(&self, dt: f64) -> Result<NoiseModel> {
        NoiseModel::new(self.r(), self.q(dt), self.glint_prob, self.glint_scale_eval)
    }
}

/// Discretized white-noise acceleration on each axis plus turn-rate diffusion.
pub fn process_noise(dt: f64, sigma_a: f64, sigma_omega: f64) -> Matrix {
    let qa = sigma_a * sigma_a;
    let (p, c, v) = (dt.powi(3) / 3.0 * qa, dt.powi(2) / 2.0 * qa, dt * qa);
    let mut q = Matrix::zeros(NX, NX);
    for base in [0, 2] {
        q.set(base, base, p);
        q.set(base, base + 1, c);
        q.set(base + 1, base, c);
        q.set(base + 1, base + 1, v);
    }
    q.set(4, 4, sigma_omega * sigma_omega * dt);
    q
}

/// Measurement noise `(1-ε) N(0, R) + ε N(0, ηR)` and process noise `N(0, Q)`.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub r: Matrix,
    pub q: Matrix,
    pub glint_prob: f64,
    pub glint_scale: f64,
    r_factor: Matrix,
    q_factor: Matrix,
}

impl NoiseModel {
    pub fn new(r: Matrix, q: Matrix, glint_prob: f64, glint_scale: f64) -> Result<Self> {
        if r.shape() != (NZ, NZ) || q.shape() != (NX, NX) {
            return Err(Error::InvalidArgument(format!(
                "noise shapes R {:?}, Q {:?}",
                r.shape(),
                q.shape()
            )));
        }
        if !(0.0..=1.0).contains(&glint_prob) {
            return Err(Error::InvalidArgument(format!("glint probability {glint_prob} outside [0, 1]")));
        }
        if !(glint_scale >= 1.0) {
            return Err(Error::InvalidArgument(format!("glint scale {glint_scale} below 1")));
        }
        let r_factor = psd_factor(&r)?;
        let q_factor = psd_factor(&q)?;
        Ok(Self {
            r,
            q,
            glint_prob,
            glint_scale,
            r_factor,
            q_factor,
        })
    }

    /// Mixture second moment `(1 - ε + εη) R`.
    pub fn mixture_covariance(&self) -> Matrix {
        self.r.scale(1.0 - self.glint_prob + self.glint_prob * self.glint_scale)
    }

    /// One measurement-noise draw; returns the sample and whether it came from the glint component.
    pub fn sample_glint(&self, rng: &mut Stream) -> ([f64; NZ], bool) {
        let glint = rng.gen::<f64>() < self.glint_prob;
        let s = rng::correlated_normal(rng, &self.r_factor);
        let k = if glint { self.glint_scale.sqrt() } else { 1.0 };
        ([k * s[0], k * s[1]], glint)
    }

    pub fn sample_process(&self, rng: &mut Stream) -> State {
        let w = rng::correlated_normal(rng, &self.q_factor);
        [w[0], w[1], w[2], w[3], w[4]]
    }
}

/// Draws one measurement-noise sample.
pub fn sample_glint_noise(model: &NoiseModel, rng: &mut Stream) -> [f64; NZ] {
    model.sample_glint(rng).0
}

/// Exact coordinated-turn step.
pub fn ct_transition(x: &State, dt: f64) -> State {
    ct_step(x, dt)
}

/// Noiseless range and bearing of a state.
pub fn radar_measure(x: &State) -> Result<Measurement> {
    let (px, py) = (x[0], x[2]);
    if px == 0.0 && py == 0.0 {
        return Err(Error::TargetAtOrigin);
    }
    Ok([px.hypot(py), wrap_angle(py.atan2(px))])
}

/// Inverts a measurement to a Cartesian position.
pub fn measurement_to_position(z: &Measurement) -> (f64, f64) {
    (z[0] * z[1].cos(), z[0] * z[1].sin())
}

fn noisy_measurement(x: &State, model: &NoiseModel, rng: &mut Stream) -> Result<(Measurement, bool)> {
    let h = radar_measure(x)?;
    let (n, glint) = model.sample_glint(rng);
    Ok(([(h[0] + n[0]).max(0.0), wrap_angle(h[1] + n[1])], glint))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    TrainCt,
    EvalWeave,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::TrainCt => "train-ct",
            Regime::EvalWeave => "eval-weave",
        }
    }
}

/// Sinusoidal acceleration `a(t) = [A_x sin(ω_x t), A_y cos(ω_y t)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeaveParams {
    pub ax: f64,
    pub ay: f64,
    pub wx: f64,
    pub wy: f64,
}

impl WeaveParams {
    pub fn accel(&self, t: f64) -> (f64, f64) {
        (self.ax * (self.wx * t).sin(), self.ay * (self.wy * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub regime: Regime,
    pub dt: f64,
    pub seed: u64,
    /// `x_0 ..= x_T`.
    pub truth: Vec<State>,
    /// `z_1 ..= z_T`.
    pub measurements: Vec<Measurement>,
    /// Steps (1-based) whose measurement came from the glint component.
    #[serde(default)]
    pub glint_steps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weave: Option<WeaveParams>,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.measurements.len()
    }

    /// One row per step: `k, x (5), z (2)`. Row 0 has empty measurement fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,px,vx,py,vy,omega,range,bearing\n");
        for (k, x) in self.truth.iter().enumerate() {
            let _ = write!(out, "{k},{},{},{},{},{}", x[0], x[1], x[2], x[3], x[4]);
            match k.checked_sub(1).and_then(|i| self.measurements.get(i)) {
                Some(z) => {
                    let _ = writeln!(out, ",{},{}", z[0], z[1]);
                }
                None => out.push_str(",,\n"),
            }
        }
        out
    }
}

fn initial_state(rng: &mut Stream) -> (f64, f64, f64, f64) {
    let px = rng::uniform(rng, -1000.0, 1000.0);
    let py = rng::uniform(rng, -1000.0, 1000.0);
    let speed = rng::uniform(rng, 10.0, 30.0);
    let heading = rng::uniform(rng, 0.0, 2.0 * PI);
    (px, py, speed * heading.cos(), speed * heading.sin())
}

/// Coordinated-turn episode with process noise and glint measurements.
pub fn gen_train_episode(seed: u64, steps: usize, dt: f64, model: &NoiseModel) -> Result<Episode> {
    check_horizon(steps, dt)?;
    let mut rng = rng::stream(seed);
    let (px, py, vx, vy) = initial_state(&mut rng);
    let omega = rng::signed_uniform(&mut rng, 0.1, 0.5);
    let mut x = [px, vx, py, vy, omega];
    let mut truth = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut glint_steps = Vec::new();
    truth.push(x);
    for k in 1..=steps {
        let w = model.sample_process(&mut rng);
        let next = ct_transition(&x, dt);
        x = std::array::from_fn(|i| next[i] + w[i]);
        let (z, glint) = noisy_measurement(&x, model, &mut rng)?;
        if glint {
            glint_steps.push(k);
        }
        truth.push(x);
        measurements.push(z);
    }
    Ok(Episode {
        regime: Regime::TrainCt,
        dt,
        seed,
        truth,
        measurements,
        glint_steps,
        weave: None,
    })
}

/// Series-safe `sin θ / θ`, `(1 - cos θ)/θ`, `(1 - cos θ)/θ²`, `(θ - sin θ)/θ²`.
fn weave_kernels(theta: f64) -> [f64; 4] {
    if theta.abs() < 1e-3 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        [
            1.0 - t2 / 6.0 + t4 / 120.0,
            theta * (0.5 - t2 / 24.0 + t4 / 720.0),
            0.5 - t2 / 24.0 + t4 / 720.0,
            theta * (1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0),
        ]
    } else {
        let (s, c) = theta.sin_cos();
        [s / theta, (1.0 - c) / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta * theta)]
    }
}

/// Velocity and position increments from `a(τ) = A sin(ω τ)` (or `A cos(ω τ)`)
/// integrated exactly over `[t, t + Δt]`.
fn sinusoid_increments(amp: f64, omega: f64, t: f64, dt: f64, cosine: bool) -> (f64, f64) {
    let [sinc, omc1, omc2, tms2] = weave_kernels(omega * dt);
    let (s, c) = (omega * t).sin_cos();
    let dt2 = dt * dt;
    if cosine {
        (amp * dt * (c * sinc - s * omc1), amp * dt2 * (c * omc2 - s * tms2))
    } else {
        (amp * dt * (s * sinc + c * omc1), amp * dt2 * (s * omc2 + c * tms2))
    }
}

/// Advances position and velocity through one weave step. The ω channel is
/// the instantaneous turn rate implied by velocity and acceleration at the
/// end of the step.
pub fn weave_step(x: &State, params: &WeaveParams, t: f64, dt: f64) -> State {
    let (dvx, dpx) = sinusoid_increments(params.ax, params.wx, t, dt, false);
    let (dvy, dpy) = sinusoid_increments(params.ay, params.wy, t, dt, true);
    let vx = x[1] + dvx;
    let vy = x[3] + dvy;
    let (ax, ay) = params.accel(t + dt);
    let speed2 = vx * vx + vy * vy;
    let omega = if speed2 > 0.0 { (vx * ay - vy * ax) / speed2 } else { 0.0 };
    [x[0] + x[1] * dt + dpx, vx, x[2] + x[3] * dt + dpy, vy, omega]
}

fn draw_weave(rng: &mut Stream) -> (State, WeaveParams) {
    let (px, py, vx, vy) = initial_state(rng);
    let params = WeaveParams {
        ax: rng::signed_uniform(rng, 10.0, 20.0),
        ay: rng::signed_uniform(rng, 10.0, 20.0),
        wx: rng::uniform(rng, -2.0, 2.0),
        wy: rng::uniform(rng, -2.0, 2.0),
    };
    ([px, vx, py, vy, 0.0], params)
}

/// Out-of-distribution weave episode. Truth has no process noise.
pub fn gen_weave_episode(seed: u64, steps: usize, dt: f64, model: &NoiseModel) -> Result<Episode> {
    let (x0, params) = draw_weave(&mut rng::stream(seed));
    gen_weave_episode_with(seed, x0, params, steps, dt, model)
}

/// Weave episode with caller-chosen initial position/velocity and acceleration
/// law. Measurement noise comes from the same stream position as in
/// [`gen_weave_episode`], so both agree when given the drawn values.
pub fn gen_weave_episode_with(
    seed: u64,
    x0: State,
    params: WeaveParams,
    steps: usize,
    dt: f64,
    model: &NoiseModel,
) -> Result<Episode> {
    check_horizon(steps, dt)?;
    let mut rng = rng::stream(seed);
    let _ = draw_weave(&mut rng);
    let mut x = x0;
    let (ax, ay) = params.accel(0.0);
    let speed2 = x[1] * x[1] + x[3] * x[3];
    x[4] = if speed2 > 0.0 { (x[1] * ay - x[3] * ax) / speed2 } else { 0.0 };
    let mut truth = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut glint_steps = Vec::new();
    truth.push(x);
    for k in 1..=steps {
        x = weave_step(&x, &params, (k - 1) as f64 * dt, dt);
        let (z, glint) = noisy_measurement(&x, model, &mut rng)?;
        if glint {
            glint_steps.push(k);
        }
        truth.push(x);
        measurements.push(z);
    }
    Ok(Episode {
        regime: Regime::EvalWeave,
        dt,
        seed,
        truth,
        measurements,
        glint_steps,
        weave: Some(params),
    })
}

fn check_horizon(steps: usize, dt: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument("episode needs at least one step".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
    }
    Ok(())
}

/// Generates `count` episodes of a regime from a split base seed.
pub fn generate(regime: Regime, base_seed: u64, count: usize, steps: usize, dt: f64, model: &NoiseModel) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            let seed = rng::episode_seed(base_seed, i as u64);
            match regime {
                Regime::TrainCt => gen_train_episode(seed, steps, dt, model),
                Regime::EvalWeave => gen_weave_episode(seed, steps, dt, model),
            }
        })
        .collect()
}

/// Regenerates an episode from its recorded seed, regime and parameters.
pub fn regenerate(ep: &Episode, model: &NoiseModel) -> Result<Episode> {
    match ep.weave {
        Some(p) if ep.regime == Regime::EvalWeave => {
            gen_weave_episode_with(ep.seed, ep.truth[0], p, ep.steps(), ep.dt, model)
        }
        _ => gen_train_episode(ep.seed, ep.steps(), ep.dt, model),
    }
}

/// On-disk dataset index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub regime: Regime,
    pub config_hash: String,
    pub base_seed: u64,
    pub files: Vec<String>,
}

/// Writes one JSON file per episode plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, regime: Regime, base_seed: u64, config_hash: &str, episodes: &[Episode]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let name = format!("episode_{i:05}.json");
        fs::write(dir.join(&name), serde_json::to_string(ep)?)?;
        files.push(name);
    }
    let manifest = Manifest {
        regime,
        config_hash: config_hash.to_string(),
        base_seed,
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Episode>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let episodes = manifest
        .files
        .iter()
        .map(|f| -> Result<Episode> {
            let path: PathBuf = dir.join(f);
            let ep: Episode = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if ep.truth.len() != ep.measurements.len() + 1 {
                return Err(Error::Format(format!("{}: truth/measurement length mismatch", path.display())));
            }
            Ok(ep)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> NoiseModel {
        NoiseModel::new(Matrix::zeros(2, 2), Matrix::zeros(5, 5), 0.0, 1.0).unwrap()
    }

    #[test]
    fn cv_limit() {
        let x = ct_transition(&[0.0, 10.0, 0.0, 0.0, 0.0], 0.1);
        assert_eq!(x, [1.0, 10.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn half_turn_negates_velocity() {
        let x = ct_transition(&[0.0, 10.0, 0.0, 0.0, 10.0 * PI], 0.1);
        assert!((x[1] + 10.0).abs() < 1e-12);
        assert!(x[3].abs() < 1e-12);
    }

    #[test]
    fn radar_examples() {
        let z = radar_measure(&[3.0, 0.0, 4.0, 0.0, 0.0]).unwrap();
        assert!((z[0] - 5.0).abs() < 1e-15 && (z[1] - 0.92729522).abs() < 1e-8);
        assert_eq!(radar_measure(&[-1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), [1.0, PI]);
        assert_eq!(radar_measure(&[0.0, 0.0, -2.0, 0.0, 0.0]).unwrap(), [2.0, -PI / 2.0]);
        assert!(matches!(radar_measure(&[0.0; 5]), Err(Error::TargetAtOrigin)));
    }

    #[test]
    fn q_blocks() {
        let q = process_noise(0.1, 0.5, 0.05);
        assert!((q.get(0, 0) - 0.001 / 3.0 * 0.25).abs() < 1e-18);
        assert!((q.get(1, 3)).abs() == 0.0);
        assert!((q.get(4, 4) - 0.0025 * 0.1).abs() < 1e-18);
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let ep = gen_train_episode(17, 30, 0.1, &quiet()).unwrap();
        for (k, z) in ep.measurements.iter().enumerate() {
            assert_eq!(*z, radar_measure(&ep.truth[k + 1]).unwrap());
        }
    }

    #[test]
    fn zero_acceleration_weave_is_straight() {
        let x0 = [100.0, 3.0, -50.0, 4.0, 0.0];
        let p = WeaveParams { ax: 0.0, ay: 0.0, wx: 1.3, wy: -0.7 };
        let ep = gen_weave_episode_with(1, x0, p, 20, 0.1, &quiet()).unwrap();
        for (k, x) in ep.truth.iter().enumerate() {
            let t = k as f64 * 0.1;
            assert!((x[0] - (100.0 + 3.0 * t)).abs() < 1e-9);
            assert!((x[2] - (-50.0 + 4.0 * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_acceleration_limit() {
        let p = WeaveParams { ax: 10.0, ay: 10.0, wx: 0.0, wy: 0.0 };
        let x = weave_step(&[0.0, 1.0, 0.0, 1.0, 0.0], &p, 0.0, 0.1);
        // sin(0·t) = 0 so x is unforced; cos(0·t) = 1 so y sees constant 10 m/s²
        assert_eq!(x[1], 1.0);
        assert!((x[3] - (1.0 + 10.0 * 0.1)).abs() < 1e-15);
        assert!((x[2] - (0.1 + 0.5 * 10.0 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn episode_csv_rows() {
        let ep = gen_train_episode(3, 4, 0.1, &quiet()).unwrap();
        let csv = ep.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
    }
}
