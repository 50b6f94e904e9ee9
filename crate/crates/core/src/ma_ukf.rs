//! Meta-adaptive UKF: sigma points at fixed γ, policy inference from the
//! proxy innovation, and recombination with the freshly synthesized weights.

use std::fmt::Write as _;

use crate::dynamics::{Episode, Measurement, NX, NZ};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_ladder, Eager, Graph, Matrix};
use crate::policy::{self, Dims, PolicyParams, PolicyVars};
use crate::ukf::{
    correct, innovation, measure, measurement_mean, propagate, recombine_state, sigma_points, FilterModel, GaussianBelief,
    Track, UtWeights,
};

/// Fixed sigma-point spread.
pub const DEFAULT_GAMMA: f64 = 3.0;

/// Everything one recursive step produces, on any graph.
pub struct MaOutputs<V> {
    pub mean: V,
    pub cov: V,
    pub h: V,
    pub w_mean: V,
    pub w_cov: V,
    /// `ν̃ = z − Σ W_{k−1}^(m) Zⁱ`.
    pub proxy: V,
    pub context: V,
    pub innovation: V,
}

/// One step. `w_prev` is the mean-weight column from the previous step.
#[allow(clippy::too_many_arguments)]
pub fn ma_step_graph<G: Graph>(
    g: &mut G,
    model: &FilterModel,
    p: &PolicyVars<G::Var>,
    mean: &G::Var,
    cov: &G::Var,
    h: &G::Var,
    w_prev: &G::Var,
    gamma: f64,
    z: &G::Var,
) -> Result<MaOutputs<G::Var>> {
    let points = sigma_points(g, mean, cov, gamma)?;
    let moved = propagate(g, model, &points)?;
    let images = measure(g, model, &moved)?;
    let zhat_prev = measurement_mean(g, model, &images, w_prev)?;
    let proxy = innovation(g, model, z, &zhat_prev)?;
    let e = policy::encode(g, p, &proxy)?;
    let h = policy::gru_step(g, p, &e, h)?;
    let syn = policy::synthesize_weights(g, p, &h)?;
    let prior = recombine_state(g, model, moved, &syn.w_mean, &syn.w_cov)?;
    let post = correct(g, model, &prior, &images, &syn.w_mean, &syn.w_cov, z)?;
    Ok(MaOutputs {
        mean: post.mean,
        cov: post.cov,
        h,
        w_mean: syn.w_mean,
        w_cov: syn.w_cov,
        proxy,
        context: syn.context,
        innovation: post.innovation,
    })
}

/// Recurrent policy state carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub h: Matrix,
    pub w_prev: UtWeights,
}

impl PolicyState {
    /// `h₀ = 0` and uniform previous weights.
    pub fn initial(dims: &Dims, gamma: f64) -> Self {
        Self {
            h: Matrix::zeros(dims.d_h, 1),
            w_prev: UtWeights::uniform(dims.n_x, gamma),
        }
    }
}

/// Per-step quantities kept for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub proxy: [f64; NZ],
    /// Innovation against the prediction made with the new weights.
    pub innovation: [f64; NZ],
    pub context: Matrix,
    pub weights: UtWeights,
}

/// Policy parameters bound to a filter model.
#[derive(Clone, Debug)]
pub struct MaUkf {
    pub model: FilterModel,
    pub gamma: f64,
    vars: PolicyVars<Matrix>,
    dims: Dims,
}

impl MaUkf {
    pub fn new(model: FilterModel, params: &PolicyParams, gamma: f64) -> Result<Self> {
        if params.dims.n_x != model.state_dim() || params.dims.n_z != model.meas_dim() {
            return Err(Error::InvalidArgument(format!(
                "policy dims {:?} do not fit a {}-state/{}-measurement model",
                params.dims,
                model.state_dim(),
                model.meas_dim()
            )));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("γ = {gamma}")));
        }
        Ok(Self {
            model,
            gamma,
            vars: params.load(&mut Eager),
            dims: params.dims,
        })
    }

    pub fn initial_state(&self) -> PolicyState {
        PolicyState::initial(&self.dims, self.gamma)
    }

    pub fn step(&self, belief: &GaussianBelief, ps: &PolicyState, z: &Measurement) -> Result<(GaussianBelief, PolicyState, Diagnostics)> {
        let out = ma_step_graph(
            &mut Eager,
            &self.model,
            &self.vars,
            &belief.mean,
            &belief.cov,
            &ps.h,
            &ps.w_prev.mean_column(),
            self.gamma,
            &Matrix::col_vector(z),
        )?;
        if !out.h.is_finite() || !out.w_mean.is_finite() || !out.w_cov.is_finite() {
            return Err(Error::PolicyNonFinite(0));
        }
        cholesky_ladder(&out.cov)?;
        let weights = UtWeights {
            w_mean: out.w_mean.into_data(),
            w_cov: out.w_cov.into_data(),
            gamma: self.gamma,
        };
        let p = out.proxy.data();
        let nu = out.innovation.data();
        let diag = Diagnostics {
            proxy: [p[0], p[1]],
            innovation: [nu[0], nu[1]],
            context: out.context,
            weights: weights.clone(),
        };
        let state = PolicyState { h: out.h, w_prev: weights };
        Ok((GaussianBelief::new(out.mean, out.cov)?, state, diag))
    }
}

/// Filtered track plus the optional weight log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaTrack {
    pub track: Track,
    pub weights: Vec<UtWeights>,
    pub proxies: Vec<[f64; NZ]>,
}

impl MaTrack {
    /// `k, wm_0..wm_10, wc_0..wc_10`.
    pub fn weights_csv(&self) -> String {
        let m = self.weights.first().map_or(2 * NX + 1, UtWeights::points);
        let mut out = String::from("k");
        for prefix in ["wm", "wc"] {
            for i in 0..m {
                let _ = write!(out, ",{prefix}_{i}");
            }
        }
        out.push('\n');
        for (k, w) in self.weights.iter().enumerate() {
            let _ = write!(out, "{}", k + 1);
            for v in w.w_mean.iter().chain(&w.w_cov) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn run_ma_ukf(ep: &Episode, filter: &MaUkf, belief0: &GaussianBelief, log_weights: bool) -> Result<MaTrack> {
    if ep.measurements.is_empty() {
        return Err(Error::InvalidArgument("episode has no measurements".into()));
    }
    let mut out = MaTrack::default();
    let mut belief = belief0.clone();
    let mut ps = filter.initial_state();
    for (k, z) in ep.measurements.iter().enumerate() {
        let (b, next, diag) = filter.step(&belief, &ps, z).map_err(|e| match e {
            Error::PolicyNonFinite(_) => Error::PolicyNonFinite(k + 1),
            other => other.at_step(k + 1),
        })?;
        out.track.innovations.push(diag.innovation);
        if log_weights {
            out.weights.push(diag.weights);
            out.proxies.push(diag.proxy);
        }
        belief = b;
        out.track.beliefs.push(belief.clone());
        ps = next;
    }
    Ok(out)
}
