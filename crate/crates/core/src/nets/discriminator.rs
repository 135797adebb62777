use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{trunk_forward, DenoiserConfig, DenoiserNet};
use super::Condition;
use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_HEAD_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorForm {
    /// Sees the jump result and the starting point.
    Conditional,
    /// Sees only the jump result.
    Unconditional,
}

impl DiscriminatorForm {
    fn trunk_passes(self) -> usize {
        match self {
            DiscriminatorForm::Conditional => 2,
            DiscriminatorForm::Unconditional => 1,
        }
    }
}

/// Trunk copied from a denoiser plus a small head producing one logit.
///
/// The head is two affine+SiLU layers and a final scalar affine that starts
/// at zero, so an untrained discriminator outputs exactly 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    form: DiscriminatorForm,
    config: DenoiserConfig,
    trunk: Vec<Tensor>,
    head: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    trunk: Vec<NodeId>,
    head: Vec<NodeId>,
}

impl BoundDiscriminator {
    /// Gradients in [`Discriminator::params_mut`] order.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.trunk
            .iter()
            .chain(&self.head)
            .map(|&id| grads.get_or_zeros(g, id))
            .collect()
    }

    pub fn trunk_nodes(&self) -> &[NodeId] {
        &self.trunk
    }
}

impl Discriminator {
    /// Copies `net`'s trunk (adapters folded in) and draws a fresh head.
    pub fn init_from(net: &DenoiserNet, form: DiscriminatorForm, head_width: usize, seed: u64) -> Result<Self> {
        if head_width == 0 {
            return Err(Error::config("head_width", "must be positive"));
        }
        let mut effective = net.clone();
        if effective.lora().is_some() {
            effective.merge_lora()?;
        }
        let config = net.config().clone();
        let trunk = effective.trunk_params().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = config.feature_dim() * form.trunk_passes();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            if rows == 1 {
                Tensor::new(vec![cols], data)
            } else {
                Tensor::new(vec![rows, cols], data)
            }
        };
        let head = vec![
            uniform(feat, head_width, feat)?,
            uniform(1, head_width, feat)?,
            uniform(head_width, head_width, head_width)?,
            uniform(1, head_width, head_width)?,
            Tensor::zeros(&[head_width, 1]),
            Tensor::zeros(&[1]),
        ];
        Ok(Self {
            form,
            config,
            trunk,
            head,
        })
    }

    pub fn form(&self) -> DiscriminatorForm {
        self.form
    }

    pub fn trunk(&self) -> &[Tensor] {
        &self.trunk
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.trunk.iter().chain(&self.head).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk.iter_mut().chain(self.head.iter_mut()).collect()
    }

    pub fn bind(&self, g: &mut Graph, train: bool) -> BoundDiscriminator {
        let mut put = |t: &Tensor| {
            if train {
                g.parameter(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundDiscriminator {
            trunk: self.trunk.iter().map(&mut put).collect(),
            head: self.head.iter().map(&mut put).collect(),
        }
    }

    fn head_forward(&self, g: &mut Graph, b: &BoundDiscriminator, feat: NodeId) -> Result<NodeId> {
        let h = &b.head;
        let z = g.affine(feat, h[0], Some(h[1]))?;
        let z = g.silu(z)?;
        let z = g.affine(z, h[2], Some(h[3]))?;
        let z = g.silu(z)?;
        let logit = g.affine(z, h[4], Some(h[5]))?;
        g.sigmoid(logit)
    }

    fn expect_form(&self, form: DiscriminatorForm) -> Result<()> {
        if self.form != form {
            return Err(Error::Usage(format!(
                "{:?} discriminator used in {:?} form",
                self.form, form
            )));
        }
        Ok(())
    }

    /// Probability `[B, 1]` that `x_jump` is the teacher's move from `x_t`.
    ///
    /// The trunk runs on both inputs with shared weights; jump features come
    /// first in the concatenation.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_conditional(
        &self,
        g: &mut Graph,
        b: &BoundDiscriminator,
        x_t: NodeId,
        x_jump: NodeId,
        t: &[usize],
        t_jump: &[usize],
        c: &[Condition],
    ) -> Result<NodeId> {
        self.expect_form(DiscriminatorForm::Conditional)?;
        if t.iter().zip(t_jump).any(|(a, b)| b > a) {
            return Err(Error::Domain("jump time after start time".into()));
        }
        let fj = trunk_forward(g, &self.config, &b.trunk, &[], x_jump, t_jump, c)?;
        let fs = trunk_forward(g, &self.config, &b.trunk, &[], x_t, t, c)?;
        let feat = g.concat(&[fj, fs])?;
        self.head_forward(g, b, feat)
    }

    /// Probability `[B, 1]` that `x_jump` is a teacher sample, ignoring the start point.
    pub fn forward_unconditional(
        &self,
        g: &mut Graph,
        b: &BoundDiscriminator,
        x_jump: NodeId,
        t_jump: &[usize],
        c: &[Condition],
    ) -> Result<NodeId> {
        self.expect_form(DiscriminatorForm::Unconditional)?;
        let f = trunk_forward(g, &self.config, &b.trunk, &[], x_jump, t_jump, c)?;
        self.head_forward(g, b, f)
    }

    pub fn discriminate_conditional(
        &self,
        x_t: &Tensor,
        x_jump: &Tensor,
        t: &[usize],
        t_jump: &[usize],
        c: &[Condition],
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xt = g.constant(x_t.clone());
        let xj = g.constant(x_jump.clone());
        let p = self.forward_conditional(&mut g, &b, xt, xj, t, t_jump, c)?;
        Ok(g.value(p).clone())
    }

    pub fn discriminate_unconditional(&self, x_jump: &Tensor, t_jump: &[usize], c: &[Condition]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xj = g.constant(x_jump.clone());
        let p = self.forward_unconditional(&mut g, &b, xj, t_jump, c)?;
        Ok(g.value(p).clone())
    }
}
