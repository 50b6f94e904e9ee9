//! Unscented Kalman filter.
//!
//! The recursion is written once over [`Graph`], so the same code runs
//! tape-free for baselines and on a tape for training.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dynamics::{measurement_to_position, Episode, Measurement, State, NX, NZ};
use crate::error::{Error, Result};
use crate::linalg::cholesky::cholesky_ladder;
use crate::linalg::{Eager, Graph, Matrix, Prim};

/// Tolerance on weight sums.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Mean and covariance weights of the `2n+1` sigma points plus the spread `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtWeights {
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
    pub gamma: f64,
}

impl UtWeights {
    /// Scaled unscented weights for `(α, β, κ)`.
    pub fn classic(alpha: f64, beta: f64, kappa: f64, n: usize) -> Result<Self> {
        let nf = n as f64;
        let lambda = alpha * alpha * (nf + kappa) - nf;
        let gamma = nf + lambda;
        if gamma == 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("n + λ = {gamma} for α={alpha}, κ={kappa}")));
        }
        let wi = 1.0 / (2.0 * gamma);
        let w0 = lambda / gamma;
        let mut w_mean = vec![wi; 2 * n + 1];
        let mut w_cov = w_mean.clone();
        w_mean[0] = w0;
        w_cov[0] = w0 + (1.0 - alpha * alpha + beta);
        Ok(Self { w_mean, w_cov, gamma })
    }

    /// Equal weights `1/(2n+1)` on both heads.
    pub fn uniform(n: usize, gamma: f64) -> Self {
        let m = 2 * n + 1;
        let w = vec![1.0 / m as f64; m];
        Self {
            w_mean: w.clone(),
            w_cov: w,
            gamma,
        }
    }

    /// Validated strictly positive weights summing to one on both heads.
    pub fn convex(w_mean: Vec<f64>, w_cov: Vec<f64>, gamma: f64) -> Result<Self> {
        let w = Self { w_mean, w_cov, gamma };
        w.check_convex()?;
        Ok(w)
    }

    pub fn points(&self) -> usize {
        self.w_mean.len()
    }

    pub fn check_convex(&self) -> Result<()> {
        if self.w_mean.len() != self.w_cov.len() || self.w_mean.len() % 2 == 0 {
            return Err(Error::InvalidArgument("weight heads must have equal odd length".into()));
        }
        for (name, w) in [("mean", &self.w_mean), ("cov", &self.w_cov)] {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOL || w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} weights not convex (sum {s})")));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("spread γ = {} must be positive", self.gamma)));
        }
        Ok(())
    }

    pub fn mean_column(&self) -> Matrix {
        Matrix::col_vector(&self.w_mean)
    }

    pub fn cov_column(&self) -> Matrix {
        Matrix::col_vector(&self.w_cov)
    }
}

/// How bearings are treated in the measurement space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleMode {
    /// Wrap bearing innovations and sigma deviations into `(-π, π]`.
    pub wrap_innovation: bool,
    /// Recombine bearing images with a weighted circular mean.
    pub circular_mean: bool,
}

impl Default for AngleMode {
    fn default() -> Self {
        Self {
            wrap_innovation: true,
            circular_mean: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Ct { dt: f64 },
    Linear(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sensor {
    RangeBearing,
    Linear(Matrix),
}

/// Everything the recursion needs besides weights and data.
#[derive(Clone, Debug)]
pub struct FilterModel {
    pub motion: Motion,
    pub sensor: Sensor,
    pub q: Matrix,
    pub r: Matrix,
    pub angles: AngleMode,
}

impl FilterModel {
    /// Coordinated-turn motion with the radar sensor.
    pub fn ct(dt: f64, q: Matrix, r: Matrix) -> Self {
        Self {
            motion: Motion::Ct { dt },
            sensor: Sensor::RangeBearing,
            q,
            r,
            angles: AngleMode::default(),
        }
    }

    pub fn with_angles(mut self, angles: AngleMode) -> Self {
        self.angles = angles;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.q.rows()
    }

    pub fn meas_dim(&self) -> usize {
        self.r.rows()
    }

    fn bearing_row(&self) -> Option<usize> {
        match self.sensor {
            Sensor::RangeBearing => Some(1),
            Sensor::Linear(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    /// `n×1`.
    pub mean: Matrix,
    pub cov: Matrix,
}

impl GaussianBelief {
    pub fn new(mean: Matrix, cov: Matrix) -> Result<Self> {
        if mean.cols() != 1 || cov.shape() != (mean.rows(), mean.rows()) {
            return Err(Error::Shape {
                op: "belief",
                lhs: mean.shape(),
                rhs: cov.shape(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn state(&self) -> State {
        std::array::from_fn(|i| self.mean.get(i, 0))
    }

    /// Position from `z` inverted through the sensor, zero velocity and turn rate.
    pub fn from_measurement(z: &Measurement, p0_diag: &[f64; NX]) -> Self {
        let (px, py) = measurement_to_position(z);
        Self {
            mean: Matrix::col_vector(&[px, 0.0, py, 0.0, 0.0]),
            cov: Matrix::from_diag(p0_diag),
        }
    }
}

/// Default initial covariance diagonal.
pub const P0_DIAG: [f64; NX] = [100.0 * 100.0, 30.0 * 30.0, 100.0 * 100.0, 30.0 * 30.0, 0.5 * 0.5];

/// Initial belief for an episode, from its first measurement.
pub fn initial_belief(ep: &Episode, p0_diag: &[f64; NX]) -> GaussianBelief {
    GaussianBelief::from_measurement(&ep.measurements[0], p0_diag)
}

/// Sigma points as the columns of an `n × (2n+1)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSet {
    pub points: Matrix,
    pub propagated: Option<Matrix>,
    pub measured: Option<Matrix>,
}

// ---------------------------------------------------------------------------
// generic recursion

/// `[x, x + √(γP)ᵢ, x − √(γP)ᵢ]`.
pub fn sigma_points<G: Graph>(g: &mut G, mean: &G::Var, cov: &G::Var, gamma: f64) -> Result<G::Var> {
    let n = g.value(mean).rows();
    let scaled = g.scale(cov, gamma)?;
    let l = g.cholesky(&scaled)?;
    let neg = g.scale(&l, -1.0)?;
    let zero = g.constant(Matrix::zeros(n, 1));
    let offsets = g.concat_cols(&[&zero, &l, &neg])?;
    g.add_col(&offsets, mean)
}

pub fn propagate<G: Graph>(g: &mut G, model: &FilterModel, points: &G::Var) -> Result<G::Var> {
    match &model.motion {
        Motion::Ct { dt } => g.apply(Prim::CtTransition { dt: *dt }, &[points]),
        Motion::Linear(f) => {
            let f = g.constant(f.clone());
            g.matmul(&f, points)
        }
    }
}

pub fn measure<G: Graph>(g: &mut G, model: &FilterModel, points: &G::Var) -> Result<G::Var> {
    match &model.sensor {
        Sensor::RangeBearing => g.apply(Prim::RangeBearing, &[points]),
        Sensor::Linear(h) => {
            let h = g.constant(h.clone());
            g.matmul(&h, points)
        }
    }
}

/// Weighted mean of measurement images; the bearing row uses a circular mean when enabled.
pub fn measurement_mean<G: Graph>(g: &mut G, model: &FilterModel, images: &G::Var, w_mean: &G::Var) -> Result<G::Var> {
    match model.bearing_row() {
        Some(b) if model.angles.circular_mean => {
            let (rows, cols) = g.value(images).shape();
            let mut parts = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = g.slice(images, (r, r + 1), (0, cols))?;
                if r == b {
                    let s = g.sin(&row)?;
                    let c = g.cos(&row)?;
                    let sw = g.matmul(&s, w_mean)?;
                    let cw = g.matmul(&c, w_mean)?;
                    parts.push(g.atan2(&sw, &cw)?);
                } else {
                    parts.push(g.matmul(&row, w_mean)?);
                }
            }
            let refs: Vec<&G::Var> = parts.iter().collect();
            g.concat_rows(&refs)
        }
        _ => g.matmul(images, w_mean),
    }
}

fn wrap_bearing<G: Graph>(g: &mut G, model: &FilterModel, v: G::Var) -> Result<G::Var> {
    match model.bearing_row() {
        Some(b) if model.angles.wrap_innovation => g.wrap_row(&v, b),
        _ => Ok(v),
    }
}

/// `z − ẑ` with the bearing wrapped when enabled.
pub fn innovation<G: Graph>(g: &mut G, model: &FilterModel, z: &G::Var, zhat: &G::Var) -> Result<G::Var> {
    let nu = g.sub(z, zhat)?;
    wrap_bearing(g, model, nu)
}

/// Prior moments after propagation.
pub struct Prior<V> {
    pub mean: V,
    pub cov: V,
    /// Propagated sigma points.
    pub points: V,
    /// Propagated points minus the prior mean.
    pub dev: V,
}

/// Recombines propagated points into the prior mean and covariance (`+Q`).
pub fn recombine_state<G: Graph>(
    g: &mut G,
    model: &FilterModel,
    points: G::Var,
    w_mean: &G::Var,
    w_cov: &G::Var,
) -> Result<Prior<G::Var>> {
    let mean = g.matmul(&points, w_mean)?;
    let dev = g.sub_col(&points, &mean)?;
    let spread = g.weighted_outer(&dev, w_cov, &dev)?;
    let q = g.constant(model.q.clone());
    let cov = g.add(&spread, &q)?;
    Ok(Prior { mean, cov, points, dev })
}

/// Posterior after one measurement.
pub struct Posterior<V> {
    pub mean: V,
    pub cov: V,
    pub innovation: V,
    pub pzz: V,
}

/// Gain and update given measurement images of the propagated points.
pub fn correct<G: Graph>(
    g: &mut G,
    model: &FilterModel,
    prior: &Prior<G::Var>,
    images: &G::Var,
    w_mean: &G::Var,
    w_cov: &G::Var,
    z: &G::Var,
) -> Result<Posterior<G::Var>> {
    let zhat = measurement_mean(g, model, images, w_mean)?;
    let dz = g.sub_col(images, &zhat)?;
    let dz = wrap_bearing(g, model, dz)?;
    let spread = g.weighted_outer(&dz, w_cov, &dz)?;
    let r = g.constant(model.r.clone());
    let pzz = g.add(&spread, &r)?;
    let pxz = g.weighted_outer(&prior.dev, w_cov, &dz)?;
    let pzx = g.transpose(&pxz)?;
    let kt = g.solve_spd(&pzz, &pzx)?;
    let k = g.transpose(&kt)?;
    let nu = innovation(g, model, z, &zhat)?;
    let step = g.matmul(&k, &nu)?;
    let mean = g.add(&prior.mean, &step)?;
    let kp = g.matmul(&k, &pzz)?;
    let kpk = g.matmul(&kp, &kt)?;
    let raw = g.sub(&prior.cov, &kpk)?;
    let rawt = g.transpose(&raw)?;
    let both = g.add(&raw, &rawt)?;
    let cov = g.scale(&both, 0.5)?;
    Ok(Posterior {
        mean,
        cov,
        innovation: nu,
        pzz,
    })
}

/// One full predict/update step with fixed weights.
pub fn step<G: Graph>(
    g: &mut G,
    model: &FilterModel,
    mean: &G::Var,
    cov: &G::Var,
    w_mean: &G::Var,
    w_cov: &G::Var,
    gamma: f64,
    z: &G::Var,
) -> Result<Posterior<G::Var>> {
    let points = sigma_points(g, mean, cov, gamma)?;
    let moved = propagate(g, model, &points)?;
    let prior = recombine_state(g, model, moved, w_mean, w_cov)?;
    let images = measure(g, model, &prior.points)?;
    correct(g, model, &prior, &images, w_mean, w_cov, z)
}

// ---------------------------------------------------------------------------
// eager API

pub fn make_sigma(belief: &GaussianBelief, w: &UtWeights) -> Result<SigmaSet> {
    let points = sigma_points(&mut Eager, &belief.mean, &belief.cov, w.gamma)?;
    Ok(SigmaSet {
        points,
        propagated: None,
        measured: None,
    })
}

/// Prior belief and the sigma set carrying propagated points.
pub fn predict(belief: &GaussianBelief, w: &UtWeights, model: &FilterModel) -> Result<(GaussianBelief, SigmaSet)> {
    let g = &mut Eager;
    let mut sigma = make_sigma(belief, w)?;
    let moved = propagate(g, model, &sigma.points)?;
    let prior = recombine_state(g, model, moved, &w.mean_column(), &w.cov_column())?;
    sigma.propagated = Some(prior.points);
    Ok((GaussianBelief::new(prior.mean, prior.cov)?, sigma))
}

/// Result of one eager update.
#[derive(Clone, Debug)]
pub struct Update {
    pub belief: GaussianBelief,
    pub innovation: [f64; NZ],
    pub pzz: Matrix,
}

pub fn update(prior: &GaussianBelief, sigma: &mut SigmaSet, w: &UtWeights, z: &Measurement, model: &FilterModel) -> Result<Update> {
    let g = &mut Eager;
    let points = sigma
        .propagated
        .clone()
        .ok_or_else(|| Error::InvalidArgument("sigma set has not been propagated".into()))?;
    let dev = g.sub_col(&points, &prior.mean)?;
    let pr = Prior {
        mean: prior.mean.clone(),
        cov: prior.cov.clone(),
        points,
        dev,
    };
    let images = measure(g, model, &pr.points)?;
    let post = correct(g, model, &pr, &images, &w.mean_column(), &w.cov_column(), &Matrix::col_vector(z))?;
    sigma.measured = Some(images);
    finish(post)
}

fn finish(post: Posterior<Matrix>) -> Result<Update> {
    check_posterior(&post.cov)?;
    let nu = post.innovation.data();
    Ok(Update {
        innovation: [nu[0], nu[1]],
        pzz: post.pzz,
        belief: GaussianBelief::new(post.mean, post.cov)?,
    })
}

/// The posterior must stay factorizable; surfaced here instead of at the next step.
fn check_posterior(cov: &Matrix) -> Result<()> {
    cholesky_ladder(cov).map(|_| ())
}

/// Predict and update with fixed weights.
pub fn ukf_step(belief: &GaussianBelief, w: &UtWeights, z: &Measurement, model: &FilterModel) -> Result<Update> {
    let post = step(
        &mut Eager,
        model,
        &belief.mean,
        &belief.cov,
        &w.mean_column(),
        &w.cov_column(),
        w.gamma,
        &Matrix::col_vector(z),
    )?;
    finish(post)
}

/// Filtered beliefs for `k = 1..=T` and the innovation log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Track {
    pub beliefs: Vec<GaussianBelief>,
    pub innovations: Vec<[f64; NZ]>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        self.beliefs.iter().map(GaussianBelief::state)
    }

    /// `k, x̂ (5), diag P (5), ν (2), position error`.
    pub fn to_csv(&self, ep: &Episode) -> String {
        let mut out = String::from("k,px,vx,py,vy,omega,var_px,var_vx,var_py,var_vy,var_omega,nu_range,nu_bearing,pos_err\n");
        for (i, b) in self.beliefs.iter().enumerate() {
            let x = b.state();
            let d = b.cov.diag();
            let t = ep.truth[i + 1];
            let err = (x[0] - t[0]).hypot(x[2] - t[2]);
            let nu = self.innovations[i];
            let _ = write!(out, "{}", i + 1);
            for v in x.iter().chain(&d).chain(&nu) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{err}");
        }
        out
    }
}

/// Runs the filter over every measurement of an episode.
pub fn run_ukf(ep: &Episode, w: &UtWeights, model: &FilterModel, belief0: &GaussianBelief) -> Result<Track> {
    if ep.measurements.is_empty() {
        return Err(Error::InvalidArgument("episode has no measurements".into()));
    }
    let mut belief = belief0.clone();
    let mut track = Track {
        beliefs: Vec::with_capacity(ep.steps()),
        innovations: Vec::with_capacity(ep.steps()),
    };
    for (k, z) in ep.measurements.iter().enumerate() {
        let u = ukf_step(&belief, w, z, model).map_err(|e| e.at_step(k + 1))?;
        belief = u.belief;
        track.beliefs.push(belief.clone());
        track.innovations.push(u.innovation);
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_weights() {
        let w = UtWeights::classic(1.0, 2.0, -2.0, 5).unwrap();
        assert_eq!(w.gamma, 3.0);
        assert!((w.w_mean[0] + 2.0 / 3.0).abs() < 1e-15);
        assert!((w.w_cov[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!(w.w_mean[1..].iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!((w.w_mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_weights() {
        let w = UtWeights::classic(1.0, 0.0, 0.0, 1).unwrap();
        assert_eq!(w.w_mean, vec![0.0, 0.5, 0.5]);
        assert_eq!(w.gamma, 1.0);
    }

    #[test]
    fn tuned_reference_weights_sum_to_one() {
        let w = UtWeights::classic(17.26, 2.59, 0.15, 5).unwrap();
        assert!((w.w_mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w.gamma - 17.26f64.powi(2) * 5.15).abs() < 1e-9);
    }

    #[test]
    fn degenerate_spread_rejected() {
        assert!(UtWeights::classic(1.0, 2.0, -5.0, 5).is_err());
    }

    #[test]
    fn convex_validation() {
        assert!(UtWeights::convex(vec![0.5, 0.25, 0.25], vec![0.2, 0.4, 0.4], 3.0).is_ok());
        assert!(UtWeights::convex(vec![1.0, 0.0, 0.0], vec![0.2, 0.4, 0.4], 3.0).is_err());
        assert!(UtWeights::convex(vec![0.5, 0.3, 0.3], vec![0.2, 0.4, 0.4], 3.0).is_err());
    }

    #[test]
    fn sigma_offsets() {
        let b = GaussianBelief::new(Matrix::zeros(2, 1), Matrix::identity(2)).unwrap();
        let s = make_sigma(&b, &UtWeights::uniform(2, 3.0)).unwrap();
        let r3 = 3f64.sqrt();
        assert_eq!(s.points.column(1), vec![r3, 0.0]);
        assert_eq!(s.points.column(4), vec![0.0, -r3]);

        let b = GaussianBelief::new(Matrix::col_vector(&[1.0, -1.0]), Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let s = make_sigma(&b, &UtWeights::uniform(2, 1.0)).unwrap();
        assert_eq!(s.points.column(0), vec![1.0, -1.0]);
        assert_eq!(s.points.column(1), vec![3.0, -1.0]);
        assert_eq!(s.points.column(2), vec![1.0, 0.0]);
        assert_eq!(s.points.column(3), vec![-1.0, -1.0]);
    }

    #[test]
    fn identity_predict_keeps_belief() {
        let model = FilterModel {
            motion: Motion::Linear(Matrix::identity(2)),
            sensor: Sensor::Linear(Matrix::identity(2)),
            q: Matrix::zeros(2, 2),
            r: Matrix::identity(2),
            angles: AngleMode::default(),
        };
        let b = GaussianBelief::new(
            Matrix::col_vector(&[1.0, 2.0]),
            Matrix::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]]).unwrap(),
        )
        .unwrap();
        let w = UtWeights::classic(0.5, 2.0, 1.0, 2).unwrap();
        let (prior, _) = predict(&b, &w, &model).unwrap();
        assert!(prior.mean.max_abs_diff(&b.mean) < 1e-12);
        assert!(prior.cov.max_abs_diff(&b.cov) < 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let model = FilterModel::ct(0.1, Matrix::identity(5).scale(0.01), Matrix::from_diag(&[100.0, 1e-4]));
        let b = GaussianBelief::new(Matrix::col_vector(&[500.0, 10.0, 300.0, -5.0, 0.1]), Matrix::from_diag(&P0_DIAG)).unwrap();
        let w = UtWeights::uniform(5, 3.0);
        let (prior, mut sigma) = predict(&b, &w, &model).unwrap();
        let zhat = measurement_mean(&mut Eager, &model, &measure(&mut Eager, &model, sigma.propagated.as_ref().unwrap()).unwrap(), &w.mean_column()).unwrap();
        let z = [zhat.get(0, 0), zhat.get(1, 0)];
        let u = update(&prior, &mut sigma, &w, &z, &model).unwrap();
        assert!(u.belief.mean.max_abs_diff(&prior.mean) < 1e-9);
        for i in 0..5 {
            assert!(u.belief.cov.get(i, i) <= prior.cov.get(i, i) + 1e-9);
        }
    }
}
