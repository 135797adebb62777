use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lora::LoraAdapter;
use super::Condition;
use crate::autodiff::{sinusoidal_embedding, Gradients, Graph, NodeId, Tensor};
use crate::diffusion::{Denoiser, PredictionMode};
use crate::error::{Error, Result};

pub const DEFAULT_TIME_DIM: usize = 32;
pub const DEFAULT_COND_DIM: usize = 16;

/// Architecture of the fully-connected residual denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub widths: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
    /// Largest timestep; sets the slowest embedding frequency.
    pub max_time: usize,
}

fn default_time_dim() -> usize {
    DEFAULT_TIME_DIM
}
fn default_cond_dim() -> usize {
    DEFAULT_COND_DIM
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, widths: Vec<usize>, classes: usize, max_time: usize) -> Self {
        Self {
            data_dim,
            widths,
            classes,
            time_dim: DEFAULT_TIME_DIM,
            cond_dim: DEFAULT_COND_DIM,
            max_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.classes == 0 || self.time_dim < 2 || self.cond_dim == 0 {
            return Err(Error::config("net", "dimensions must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("net.widths", "need at least one positive width"));
        }
        if self.max_time == 0 {
            return Err(Error::config("net.max_time", "must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// Width of the trunk's output features.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Number of parameter tensors in the trunk: embedding table, input
    /// affine, then (gain, bias, weight, bias) per hidden block.
    pub fn trunk_tensor_count(&self) -> usize {
        3 + 4 * self.hidden_layers()
    }

    /// Shapes of every parameter tensor in declared order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            vec![self.classes + 1, self.cond_dim],
            vec![self.input_dim(), self.widths[0]],
            vec![self.widths[0]],
        ];
        for w in self.widths.windows(2) {
            shapes.extend([vec![w[0]], vec![w[0]], vec![w[0], w[1]], vec![w[1]]]);
        }
        let last = self.feature_dim();
        shapes.extend([vec![last], vec![last], vec![last, self.data_dim], vec![self.data_dim]]);
        shapes
    }

    /// `(inputs, outputs)` of each hidden affine (the layers that take adapters).
    pub fn hidden_affine_dims(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Initialization role of every parameter tensor, aligned with `param_shapes`.
    pub(crate) fn param_roles(&self) -> Vec<ParamRole> {
        let mut roles = vec![
            ParamRole::Embedding,
            ParamRole::Weight,
            ParamRole::Bias(self.input_dim()),
        ];
        for w in self.widths.windows(2) {
            roles.extend([
                ParamRole::Gain,
                ParamRole::Shift,
                ParamRole::Weight,
                ParamRole::Bias(w[0]),
            ]);
        }
        roles.extend([
            ParamRole::Gain,
            ParamRole::Shift,
            ParamRole::Weight,
            ParamRole::Bias(self.feature_dim()),
        ]);
        roles
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamRole {
    Embedding,
    /// `[fan_in, fan_out]` matrix.
    Weight,
    /// Affine bias with the fan-in of its weight.
    Bias(usize),
    Gain,
    Shift,
}

impl ParamRole {
    pub(crate) fn init(self, shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let uniform = |fan_in: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>()
        };
        match self {
            ParamRole::Embedding => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            ParamRole::Weight => uniform(shape[0], rng),
            ParamRole::Bias(fan_in) => uniform(fan_in, rng),
            ParamRole::Gain => vec![1.0; n],
            ParamRole::Shift => vec![0.0; n],
        }
    }
}

/// Condition one-hots `[B, C+1]`.
pub(crate) fn condition_one_hot(c: &[Condition], classes: usize) -> Result<Tensor> {
    let width = classes + 1;
    let mut data = vec![0.0; c.len() * width];
    for (i, cond) in c.iter().enumerate() {
        let row = cond.row(classes);
        if row > classes {
            return Err(Error::Usage(format!("class {row} out of range for {classes} classes")));
        }
        data[i * width + row] = 1.0;
    }
    Tensor::new(vec![c.len(), width], data)
}

/// Shared trunk forward: `[x, time-embedding, condition-embedding]` through
/// the input affine and the residual hidden blocks.
pub(crate) fn trunk_forward(
    g: &mut Graph,
    cfg: &DenoiserConfig,
    params: &[NodeId],
    lora: &[(NodeId, NodeId, f64)],
    x: NodeId,
    t: &[usize],
    c: &[Condition],
) -> Result<NodeId> {
    let rows = g.value(x).rows();
    if t.len() != rows || c.len() != rows {
        return Err(Error::Shape(format!(
            "batch of {rows} rows with {} times and {} conditions",
            t.len(),
            c.len()
        )));
    }
    if g.value(x).cols() != cfg.data_dim {
        return Err(Error::Shape(format!(
            "input width {} vs data dimension {}",
            g.value(x).cols(),
            cfg.data_dim
        )));
    }
    let temb = g.constant(sinusoidal_embedding(t, cfg.time_dim, cfg.max_time as f64));
    let onehot = g.constant(condition_one_hot(c, cfg.classes)?);
    let cemb = g.affine(onehot, params[0], None)?;
    let inp = g.concat(&[x, temb, cemb])?;
    let pre = g.affine(inp, params[1], Some(params[2]))?;
    let mut h = g.silu(pre)?;
    for (i, w) in cfg.widths.windows(2).enumerate() {
        let base = 3 + 4 * i;
        let normed = g.layer_norm(h, params[base], params[base + 1])?;
        let mut z = g.affine(normed, params[base + 2], Some(params[base + 3]))?;
        if let Some(&(a, b, scale)) = lora.get(i) {
            let low = g.affine(normed, a, None)?;
            let up = g.affine(low, b, None)?;
            let up = if scale == 1.0 { up } else { g.scale(up, scale)? };
            z = g.add(z, up)?;
        }
        let z = g.silu(z)?;
        h = if w[0] == w[1] { g.add(h, z)? } else { z };
    }
    Ok(h)
}

/// Graph handles for one binding of a denoiser's parameters.
#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    pub params: Vec<NodeId>,
    pub lora: Vec<(NodeId, NodeId, f64)>,
    trainable: Vec<NodeId>,
}

impl BoundDenoiser {
    /// Gradients of the trainable tensors, in [`DenoiserNet::trainable_params_mut`] order.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.trainable.iter().map(|&id| grads.get_or_zeros(g, id)).collect()
    }
}

/// Conditional network `f(x_t, t, c)` with a declared output meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    mode: PredictionMode,
    params: Vec<Tensor>,
    lora: Option<Vec<LoraAdapter>>,
}

impl DenoiserNet {
    /// Uniform fan-in initialization; deterministic in `seed`.
    pub fn init(config: DenoiserConfig, mode: PredictionMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .zip(config.param_roles())
            .map(|(shape, role)| {
                let data = role.init(&shape, &mut rng);
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            mode,
            params,
            lora: None,
        })
    }

    /// Rebuilds a network from stored tensors (checkpoint loading).
    pub fn from_parts(config: DenoiserConfig, mode: PredictionMode, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::Shape("parameter tensors do not match architecture".into()));
        }
        Ok(Self {
            config,
            mode,
            params,
            lora: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    pub(crate) fn relabel_x0(&mut self) {
        self.mode = PredictionMode::X0;
    }

    /// Base tensors in declared layer order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn trunk_params(&self) -> &[Tensor] {
        &self.params[..self.config.trunk_tensor_count()]
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn lora(&self) -> Option<&[LoraAdapter]> {
        self.lora.as_deref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut [LoraAdapter]> {
        self.lora.as_deref_mut()
    }

    /// Base weights, whether or not adapters are attached.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Base weights when no adapters are attached, otherwise adapters only.
    pub fn trainable_params(&self) -> Vec<&Tensor> {
        match &self.lora {
            None => self.params.iter().collect(),
            Some(ad) => ad.iter().flat_map(|a| [&a.a, &a.b]).collect(),
        }
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.lora {
            None => self.params.iter_mut().collect(),
            Some(ad) => ad.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_params().iter().map(|t| t.len()).sum()
    }

    /// Inserts the parameters into `g`; `train` makes the trainable set differentiable.
    pub fn bind(&self, g: &mut Graph, train: bool) -> BoundDenoiser {
        let base_train = train && self.lora.is_none();
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if base_train {
                    g.parameter(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let mut lora = Vec::new();
        if let Some(ad) = &self.lora {
            for a in ad {
                let (na, nb) = if train {
                    (g.parameter(a.a.clone()), g.parameter(a.b.clone()))
                } else {
                    (g.constant(a.a.clone()), g.constant(a.b.clone()))
                };
                lora.push((na, nb, a.scale));
            }
        }
        let trainable = if !train {
            Vec::new()
        } else if self.lora.is_some() {
            lora.iter().flat_map(|&(a, b, _)| [a, b]).collect()
        } else {
            params.clone()
        };
        BoundDenoiser {
            params,
            lora,
            trainable,
        }
    }

    /// Raw network output `u_t`, shape `[B, data_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundDenoiser,
        x: NodeId,
        t: &[usize],
        c: &[Condition],
    ) -> Result<NodeId> {
        let n_trunk = self.config.trunk_tensor_count();
        let h = trunk_forward(g, &self.config, &bound.params, &bound.lora, x, t, c)?;
        let p = &bound.params[n_trunk..];
        let normed = g.layer_norm(h, p[0], p[1])?;
        g.affine(normed, p[2], Some(p[3]))
    }

    /// Raw output evaluated outside of any training graph.
    pub fn denoise(&self, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xn, t, c)?;
        Ok(g.value(out).clone())
    }

    /// Attaches zero-initialized adapters to every hidden affine layer.
    pub fn attach_lora(&mut self, rank: usize, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Usage("adapters already attached".into()));
        }
        if rank == 0 {
            return Err(Error::config("lora_rank", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = self
            .config
            .hidden_affine_dims()
            .into_iter()
            .map(|(i, o)| LoraAdapter::new(i, o, rank, &mut rng))
            .collect();
        self.lora = Some(adapters);
        Ok(())
    }

    /// Folds adapters into the base weights (`W += scale A B`) and drops them.
    pub fn merge_lora(&mut self) -> Result<()> {
        let adapters = self
            .lora
            .take()
            .ok_or_else(|| Error::Usage("no adapters to merge".into()))?;
        for (i, ad) in adapters.iter().enumerate() {
            let w = &mut self.params[3 + 4 * i + 2];
            w.add_assign(&ad.delta())?;
        }
        Ok(())
    }
}

impl Denoiser for DenoiserNet {
    fn prediction_mode(&self) -> PredictionMode {
        self.mode
    }

    fn predict(&self, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor> {
        self.denoise(x, t, c)
    }
}
