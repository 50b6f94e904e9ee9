//! Recurrent weight policy: innovation encoder, GRU, context projection,
//! softmax weight heads and the auxiliary innovation decoder.

use std::fs;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Graph, Matrix};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_z: usize,
    pub d_h: usize,
    pub d_p: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            n_x: 5,
            n_z: 2,
            d_h: 32,
            d_p: 16,
        }
    }
}

impl Dims {
    pub fn points(&self) -> usize {
        2 * self.n_x + 1
    }
}

/// Every learnable tensor, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    WIn,
    BIn,
    LnInGain,
    LnInBias,
    WU,
    WR,
    WH,
    UU,
    UR,
    UH,
    BU,
    BR,
    BH,
    WProj,
    BProj,
    LnProjGain,
    LnProjBias,
    WPiM,
    BPiM,
    WPiC,
    BPiC,
    WG,
    BG,
}

impl Param {
    pub const ALL: [Param; 23] = [
        Param::WIn,
        Param::BIn,
        Param::LnInGain,
        Param::LnInBias,
        Param::WU,
        Param::WR,
        Param::WH,
        Param::UU,
        Param::UR,
        Param::UH,
        Param::BU,
        Param::BR,
        Param::BH,
        Param::WProj,
        Param::BProj,
        Param::LnProjGain,
        Param::LnProjBias,
        Param::WPiM,
        Param::BPiM,
        Param::WPiC,
        Param::BPiC,
        Param::WG,
        Param::BG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::WIn => "w_in",
            Param::BIn => "b_in",
            Param::LnInGain => "ln_in_gain",
            Param::LnInBias => "ln_in_bias",
            Param::WU => "w_u",
            Param::WR => "w_r",
            Param::WH => "w_h",
            Param::UU => "u_u",
            Param::UR => "u_r",
            Param::UH => "u_h",
            Param::BU => "b_u",
            Param::BR => "b_r",
            Param::BH => "b_h",
            Param::WProj => "w_proj",
            Param::BProj => "b_proj",
            Param::LnProjGain => "ln_proj_gain",
            Param::LnProjBias => "ln_proj_bias",
            Param::WPiM => "w_pi_m",
            Param::BPiM => "b_pi_m",
            Param::WPiC => "w_pi_c",
            Param::BPiC => "b_pi_c",
            Param::WG => "w_g",
            Param::BG => "b_g",
        }
    }

    pub fn shape(self, d: &Dims) -> (usize, usize) {
        let m = d.points();
        match self {
            Param::WIn => (d.d_h, d.n_z),
            Param::BIn | Param::LnInGain | Param::LnInBias | Param::BU | Param::BR | Param::BH => (d.d_h, 1),
            Param::WU | Param::WR | Param::WH | Param::UU | Param::UR | Param::UH => (d.d_h, d.d_h),
            Param::WProj => (d.d_p, d.d_h),
            Param::BProj | Param::LnProjGain | Param::LnProjBias => (d.d_p, 1),
            Param::WPiM | Param::WPiC => (m, d.d_p),
            Param::BPiM | Param::BPiC => (m, 1),
            Param::WG => (d.n_z, d.d_p),
            Param::BG => (d.n_z, 1),
        }
    }
}

/// All policy tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub dims: Dims,
    tensors: Vec<Matrix>,
}

impl Index<Param> for PolicyParams {
    type Output = Matrix;
    fn index(&self, p: Param) -> &Matrix {
        &self.tensors[p as usize]
    }
}

impl IndexMut<Param> for PolicyParams {
    fn index_mut(&mut self, p: Param) -> &mut Matrix {
        &mut self.tensors[p as usize]
    }
}

impl PolicyParams {
    pub fn zeros(dims: Dims) -> Self {
        let tensors = Param::ALL
            .iter()
            .map(|p| {
                let (r, c) = p.shape(&dims);
                Matrix::zeros(r, c)
            })
            .collect();
        Self { dims, tensors }
    }

    pub fn from_tensors(dims: Dims, tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() != Param::ALL.len() {
            return Err(Error::Format(format!("expected {} tensors, got {}", Param::ALL.len(), tensors.len())));
        }
        for (p, t) in Param::ALL.iter().zip(&tensors) {
            if t.shape() != p.shape(&dims) {
                return Err(Error::Format(format!("{}: shape {:?}, expected {:?}", p.name(), t.shape(), p.shape(&dims))));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("{}: non-finite entries", p.name())));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (Param, &Matrix)> {
        Param::ALL.iter().copied().zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Places every tensor on a graph as a parameter.
    pub fn load<G: Graph>(&self, g: &mut G) -> PolicyVars<G::Var> {
        PolicyVars {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }
}

/// Policy tensors living on a graph.
#[derive(Clone, Debug)]
pub struct PolicyVars<V> {
    pub vars: Vec<V>,
}

impl<V> Index<Param> for PolicyVars<V> {
    type Output = V;
    fn index(&self, p: Param) -> &V {
        &self.vars[p as usize]
    }
}

/// Fan-in uniform inputs and projections, orthogonal recurrent matrices,
/// unit layer-norm gains, and zero biases and weight heads (uniform weights).
pub fn init_params(rng: &mut Stream, dims: Dims) -> Result<PolicyParams> {
    if dims.n_x == 0 || dims.n_z == 0 || dims.d_h == 0 || dims.d_p == 0 {
        return Err(Error::InvalidArgument(format!("policy dims must be positive: {dims:?}")));
    }
    let mut p = PolicyParams::zeros(dims);
    for param in Param::ALL {
        let (r, c) = param.shape(&dims);
        p[param] = match param {
            Param::WIn | Param::WU | Param::WR | Param::WH | Param::WProj | Param::WG => {
                let bound = 1.0 / (c as f64).sqrt();
                Matrix::from_fn(r, c, |_, _| rng::uniform(rng, -bound, bound))
            }
            Param::UU | Param::UR | Param::UH => orthogonal(rng, r),
            Param::LnInGain | Param::LnProjGain => Matrix::filled(r, c, 1.0),
            _ => Matrix::zeros(r, c),
        };
    }
    Ok(p)
}

/// Q factor of a Gaussian matrix by modified Gram–Schmidt, with the sign
/// convention `diag(R) > 0`.
fn orthogonal(rng: &mut Stream, n: usize) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| rng::normal(rng));
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    for j in 0..n {
        for i in 0..j {
            let (head, tail) = cols.split_at_mut(j);
            let qi = &head[i];
            let dot: f64 = qi.iter().zip(&tail[0]).map(|(x, y)| x * y).sum();
            for (v, q) in tail[0].iter_mut().zip(qi) {
                *v -= dot * q;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Matrix::from_fn(n, n, |r, c| cols[c][r])
}

/// `e = ReLU(LayerNorm(W_in ν̃ + b_in))`.
pub fn encode<G: Graph>(g: &mut G, p: &PolicyVars<G::Var>, nu: &G::Var) -> Result<G::Var> {
    let a = g.affine(&p[Param::WIn], nu, &p[Param::BIn])?;
    let n = g.layer_norm(&a, &p[Param::LnInGain], &p[Param::LnInBias])?;
    g.relu(&n)
}

/// One GRU update.
pub fn gru_step<G: Graph>(g: &mut G, p: &PolicyVars<G::Var>, e: &G::Var, h: &G::Var) -> Result<G::Var> {
    let gate = |g: &mut G, w: Param, u: Param, b: Param, h: &G::Var| -> Result<G::Var> {
        let we = g.matmul(&p[w], e)?;
        let uh = g.matmul(&p[u], h)?;
        let s = g.add(&we, &uh)?;
        g.add(&s, &p[b])
    };
    let u_pre = gate(g, Param::WU, Param::UU, Param::BU, h)?;
    let u = g.sigmoid(&u_pre)?;
    let r_pre = gate(g, Param::WR, Param::UR, Param::BR, h)?;
    let r = g.sigmoid(&r_pre)?;
    let rh = g.hadamard(&r, h)?;
    let cand_pre = gate(g, Param::WH, Param::UH, Param::BH, &rh)?;
    let cand = g.tanh(&cand_pre)?;
    // (1 − u) ⊙ h + u ⊙ h̃ = h + u ⊙ (h̃ − h)
    let diff = g.sub(&cand, h)?;
    let step = g.hadamard(&u, &diff)?;
    g.add(h, &step)
}

/// `c = ReLU(LayerNorm(W_proj h + b_proj))`.
pub fn project<G: Graph>(g: &mut G, p: &PolicyVars<G::Var>, h: &G::Var) -> Result<G::Var> {
    let a = g.affine(&p[Param::WProj], h, &p[Param::BProj])?;
    let n = g.layer_norm(&a, &p[Param::LnProjGain], &p[Param::LnProjBias])?;
    g.relu(&n)
}

fn softmax_head<G: Graph>(g: &mut G, w: &G::Var, b: &G::Var, c: &G::Var) -> Result<G::Var> {
    let logits = g.affine(w, c, b)?;
    let row = g.transpose(&logits)?;
    let soft = g.softmax_rows(&row)?;
    g.transpose(&soft)
}

/// Mean and covariance weight columns from the context.
pub fn weight_heads<G: Graph>(g: &mut G, p: &PolicyVars<G::Var>, c: &G::Var) -> Result<(G::Var, G::Var)> {
    let wm = softmax_head(g, &p[Param::WPiM], &p[Param::BPiM], c)?;
    let wc = softmax_head(g, &p[Param::WPiC], &p[Param::BPiC], c)?;
    Ok((wm, wc))
}

/// `g(c) = W_g c + b_g`.
pub fn aux_decode<G: Graph>(g: &mut G, p: &PolicyVars<G::Var>, c: &G::Var) -> Result<G::Var> {
    g.affine(&p[Param::WG], c, &p[Param::BG])
}

/// Synthesized weights and the context they came from.
pub struct Synthesis<V> {
    pub context: V,
    pub w_mean: V,
    pub w_cov: V,
}

/// Projection and both heads from a hidden state.
pub fn synthesize_weights<G: Graph>(g: &mut G, p: &PolicyVars<G::Var>, h: &G::Var) -> Result<Synthesis<G::Var>> {
    let context = project(g, p, h)?;
    let (w_mean, w_cov) = weight_heads(g, p, &context)?;
    Ok(Synthesis { context, w_mean, w_cov })
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_FORMAT: &str = "maukf-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex of the big-endian IEEE-754 bits of each value.
pub fn encode_values(values: &[f64]) -> String {
    hex::encode(values.iter().flat_map(|v| v.to_bits().to_be_bytes()).collect::<Vec<u8>>())
}

pub fn decode_matrix(shape: [usize; 2], text: &str) -> Result<Matrix> {
    let bytes = hex::decode(text).map_err(|e| Error::Format(e.to_string()))?;
    if bytes.len() != shape[0] * shape[1] * 8 {
        return Err(Error::Format(format!("payload of {} bytes for shape {shape:?}", bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().expect("chunk of 8"))))
        .collect();
    Matrix::new(shape[0], shape[1], data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    /// Big-endian IEEE-754 bits of the row-major entries, hex encoded.
    data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dims: Dims,
    seed: u64,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

/// Parameters plus the provenance stored alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub seed: u64,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, seed: u64) -> Self {
        Self {
            params,
            seed,
            meta: serde_json::Map::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .params
            .iter()
            .map(|(p, t)| TensorRecord {
                name: p.name().to_string(),
                shape: [t.rows(), t.cols()],
                data: encode_values(t.data()),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.params.dims,
            seed: self.seed,
            meta: self.meta.clone(),
            tensors,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", file.format, file.version)));
        }
        let mut tensors = Vec::with_capacity(file.tensors.len());
        for (p, rec) in Param::ALL.iter().zip(&file.tensors) {
            if rec.name != p.name() {
                return Err(Error::Format(format!("expected tensor {}, found {}", p.name(), rec.name)));
            }
            let m = decode_matrix(rec.shape, &rec.data).map_err(|e| Error::Format(format!("{}: {e}", rec.name)))?;
            tensors.push(m);
        }
        Ok(Self {
            params: PolicyParams::from_tensors(file.dims, tensors)?,
            seed: file.seed,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
