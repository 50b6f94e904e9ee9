//! Two-mode interacting multiple model filter (constant velocity + coordinated turn).

use std::fmt::Write as _;

use log::debug;

use crate::dynamics::{Episode, Measurement, NX, NZ};
use crate::error::{Error, Result};
use crate::linalg::cholesky::{cholesky_ladder, cholesky_solve, log_det_from_factor};
use crate::linalg::Matrix;
use crate::ukf::{ukf_step, FilterModel, GaussianBelief, Motion, Track, UtWeights};

/// Log-likelihood below which every mode is treated as having underflowed.
pub const UNDERFLOW_LOG_LIKELIHOOD: f64 = -700.0;

/// Default turn-rate variance kept in the constant-velocity mode.
pub const CV_OMEGA_VAR: f64 = 1e-4;

/// One mode: a filter model and its sigma-point weights.
#[derive(Clone, Debug)]
pub struct ImmMode {
    pub model: FilterModel,
    pub weights: UtWeights,
}

/// Constant-velocity model in the 5-D state: ω is driven to zero each step.
pub fn cv_model(ct: &FilterModel, omega_var: f64) -> Result<FilterModel> {
    let Motion::Ct { dt } = ct.motion else {
        return Err(Error::InvalidArgument("constant-velocity mode is derived from a turn model".into()));
    };
    let f = Matrix::from_rows(&[
        &[1.0, dt, 0.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 1.0, dt, 0.0],
        &[0.0, 0.0, 0.0, 1.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0, 0.0],
    ])?;
    let mut q = ct.q.clone();
    for i in 0..NX {
        q.set(4, i, 0.0);
        q.set(i, 4, 0.0);
    }
    q.set(4, 4, omega_var);
    Ok(FilterModel {
        motion: Motion::Linear(f),
        sensor: ct.sensor.clone(),
        q,
        r: ct.r.clone(),
        angles: ct.angles,
    })
}

/// `[CV, CT]` modes sharing one set of weights.
pub fn cv_ct_modes(ct: &FilterModel, weights: &UtWeights) -> Result<Vec<ImmMode>> {
    Ok(vec![
        ImmMode {
            model: cv_model(ct, CV_OMEGA_VAR)?,
            weights: weights.clone(),
        },
        ImmMode {
            model: ct.clone(),
            weights: weights.clone(),
        },
    ])
}

/// Row-stochastic matrix with `stay` on the diagonal.
pub fn transition_matrix(m: usize, stay: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&stay) || m == 0 {
        return Err(Error::InvalidArgument(format!("Π_ii = {stay} for {m} modes")));
    }
    if m == 1 {
        return Ok(Matrix::identity(1));
    }
    let off = (1.0 - stay) / (m - 1) as f64;
    Ok(Matrix::from_fn(m, m, |i, j| if i == j { stay } else { off }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImmState {
    pub beliefs: Vec<GaussianBelief>,
    pub mu: Vec<f64>,
    pub pi: Matrix,
}

impl ImmState {
    pub fn new(belief: &GaussianBelief, mu: Vec<f64>, pi: Matrix) -> Result<Self> {
        let m = mu.len();
        if pi.shape() != (m, m) {
            return Err(Error::Shape {
                op: "imm",
                lhs: pi.shape(),
                rhs: (m, m),
            });
        }
        for r in 0..m {
            let s: f64 = pi.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-12 || pi.row(r).iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidArgument(format!("Π row {r} is not stochastic")));
            }
        }
        if (mu.iter().sum::<f64>() - 1.0).abs() > 1e-12 || mu.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("μ is not on the simplex".into()));
        }
        Ok(Self {
            beliefs: vec![belief.clone(); m],
            mu,
            pi,
        })
    }
}

/// Output of one IMM cycle.
#[derive(Clone, Debug)]
pub struct ImmStep {
    pub state: ImmState,
    pub combined: GaussianBelief,
    pub innovation: [f64; NZ],
    pub log_likelihoods: Vec<f64>,
    /// True when every mode underflowed and μ was reset to uniform.
    pub reset: bool,
}

/// Moment-matched single Gaussian of a weighted mixture.
pub fn moment_match(beliefs: &[GaussianBelief], weights: &[f64]) -> Result<GaussianBelief> {
    if let Some(i) = weights.iter().position(|w| *w == 1.0) {
        return Ok(beliefs[i].clone());
    }
    let n = beliefs[0].mean.rows();
    let mut mean = Matrix::zeros(n, 1);
    for (b, w) in beliefs.iter().zip(weights) {
        if *w != 0.0 {
            mean.add_assign(&b.mean.scale(*w))?;
        }
    }
    let mut cov = Matrix::zeros(n, n);
    for (b, w) in beliefs.iter().zip(weights) {
        if *w == 0.0 {
            continue;
        }
        let d = b.mean.sub(&mean)?;
        let spread = b.cov.add(&d.matmul(&d.transpose())?)?;
        cov.add_assign(&spread.scale(*w))?;
    }
    GaussianBelief::new(mean, cov)
}

/// `log N(ν; 0, S)`.
pub fn gaussian_log_density(nu: &[f64], s: &Matrix) -> Result<f64> {
    let (l, _) = cholesky_ladder(s)?;
    let x = cholesky_solve(&l, &Matrix::col_vector(nu))?;
    let maha: f64 = nu.iter().zip(x.data()).map(|(a, b)| a * b).sum();
    let k = nu.len() as f64;
    Ok(-0.5 * (maha + log_det_from_factor(&l) + k * (2.0 * std::f64::consts::PI).ln()))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn imm_step(s: &ImmState, z: &Measurement, modes: &[ImmMode]) -> Result<ImmStep> {
    let m = modes.len();
    if s.beliefs.len() != m {
        return Err(Error::InvalidArgument(format!("{} beliefs for {m} modes", s.beliefs.len())));
    }
    // mixing
    let c: Vec<f64> = (0..m).map(|j| (0..m).map(|i| s.pi.get(i, j) * s.mu[i]).sum()).collect();
    let mut mixed = Vec::with_capacity(m);
    for j in 0..m {
        if c[j] == 0.0 {
            mixed.push(s.beliefs[j].clone());
            continue;
        }
        let w: Vec<f64> = (0..m).map(|i| s.pi.get(i, j) * s.mu[i] / c[j]).collect();
        mixed.push(moment_match(&s.beliefs, &w)?);
    }
    // mode-conditioned filtering
    let mut beliefs = Vec::with_capacity(m);
    let mut log_l = Vec::with_capacity(m);
    let mut innovations = Vec::with_capacity(m);
    for (mode, b) in modes.iter().zip(&mixed) {
        let u = ukf_step(b, &mode.weights, z, &mode.model)?;
        log_l.push(gaussian_log_density(&u.innovation, &u.pzz)?);
        innovations.push(u.innovation);
        beliefs.push(u.belief);
    }
    // mode probabilities
    let max_l = log_l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let reset = !(max_l >= UNDERFLOW_LOG_LIKELIHOOD);
    let mu = if reset {
        debug!("imm: all mode likelihoods underflowed (max log L {max_l}); resetting μ");
        vec![1.0 / m as f64; m]
    } else {
        let logs: Vec<f64> = (0..m)
            .map(|j| if c[j] > 0.0 { c[j].ln() + log_l[j] } else { f64::NEG_INFINITY })
            .collect();
        let norm = log_sum_exp(&logs);
        let mut mu: Vec<f64> = logs.iter().map(|v| (v - norm).exp()).collect();
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|v| *v /= total);
        mu
    };
    let combined = moment_match(&beliefs, &mu)?;
    let mut innovation = [0.0; NZ];
    for (nu, w) in innovations.iter().zip(&mu) {
        for k in 0..NZ {
            innovation[k] += w * nu[k];
        }
    }
    Ok(ImmStep {
        state: ImmState {
            beliefs,
            mu,
            pi: s.pi.clone(),
        },
        combined,
        innovation,
        log_likelihoods: log_l,
        reset,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImmTrack {
    pub track: Track,
    pub mu: Vec<Vec<f64>>,
    pub resets: usize,
}

impl ImmTrack {
    /// Track CSV with one `mu_j` column per mode appended.
    pub fn to_csv(&self, ep: &Episode) -> String {
        let base = self.track.to_csv(ep);
        let mut out = String::new();
        for (i, line) in base.lines().enumerate() {
            out.push_str(line);
            if i == 0 {
                for j in 0..self.mu.first().map_or(0, Vec::len) {
                    let _ = write!(out, ",mu_{j}");
                }
            } else {
                for v in &self.mu[i - 1] {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn run_imm(ep: &Episode, modes: &[ImmMode], init: &ImmState) -> Result<ImmTrack> {
    if ep.measurements.is_empty() {
        return Err(Error::InvalidArgument("episode has no measurements".into()));
    }
    let mut s = init.clone();
    let mut out = ImmTrack::default();
    for (k, z) in ep.measurements.iter().enumerate() {
        let step = imm_step(&s, z, modes).map_err(|e| e.at_step(k + 1))?;
        out.track.beliefs.push(step.combined);
        out.track.innovations.push(step.innovation);
        out.mu.push(step.state.mu.clone());
        out.resets += step.reset as usize;
        s = step.state;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct() {
        let v = [-1.0, -2.0, -0.5];
        let direct = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-15);
        assert!(log_sum_exp(&[-1e4, -1e4]).is_finite());
    }

    #[test]
    fn transition_rows() {
        let p = transition_matrix(2, 0.95).unwrap();
        assert_eq!(p.row(0), &[0.95, 0.050000000000000044]);
        assert!((p.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_density() {
        let l = gaussian_log_density(&[0.0, 0.0], &Matrix::identity(2)).unwrap();
        assert!((l + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn moment_match_two_points() {
        let a = GaussianBelief::new(Matrix::col_vector(&[1.0]), Matrix::scalar(1.0)).unwrap();
        let b = GaussianBelief::new(Matrix::col_vector(&[-1.0]), Matrix::scalar(1.0)).unwrap();
        let m = moment_match(&[a, b], &[0.5, 0.5]).unwrap();
        assert_eq!(m.mean.get(0, 0), 0.0);
        assert_eq!(m.cov.get(0, 0), 2.0);
    }
}
