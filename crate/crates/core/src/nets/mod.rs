//! Conditional denoiser, shared-trunk discriminator, guidance, and low-rank adapters.

mod denoiser;
mod discriminator;
mod lora;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::Result;

pub use denoiser::{BoundDenoiser, DenoiserConfig, DenoiserNet, DEFAULT_COND_DIM, DEFAULT_TIME_DIM};
pub use discriminator::{BoundDiscriminator, Discriminator, DiscriminatorForm, DEFAULT_HEAD_WIDTH};
pub use lora::{LoraAdapter, DEFAULT_LORA_RANK};

/// Class label or the unconditional token.
///
/// `Null` has its own embedding row (index `C`), distinct from every class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    /// Embedding-table row for a model with `classes` classes.
    pub fn row(self, classes: usize) -> usize {
        match self {
            Condition::Class(k) => k,
            Condition::Null => classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
}

pub const DEFAULT_GUIDANCE_SCALE: f64 = 6.0;

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_GUIDANCE_SCALE,
        }
    }
}

/// Classifier-free guidance: `u_uncond + w (u_cond - u_uncond)`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        cond.expect_same_shape(uncond)?;
        return Ok(cond.clone());
    }
    uncond.zip_map(cond, |u, c| u + w * (c - u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_endpoints_and_scale_six() {
        let c = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let u = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 6.0).unwrap().data(), &[7.0]);
        assert_eq!(GuidanceConfig::default().scale, 6.0);
    }

    #[test]
    fn null_row_is_after_classes() {
        assert_eq!(Condition::Null.row(8), 8);
        assert_eq!(Condition::Class(0).row(8), 0);
    }
}
