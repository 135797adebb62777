use rand::Rng;

use crate::autodiff::Tensor;

pub const DEFAULT_LORA_RANK: usize = 4;

/// Low-rank additive update `scale * A B` for one affine weight.
///
/// `B` starts at zero so a freshly attached adapter is a no-op.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(inputs: usize, outputs: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let a = (0..inputs * rank).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            a: Tensor::new(vec![inputs, rank], a).expect("adapter A shape"),
            b: Tensor::zeros(&[rank, outputs]),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense `scale * A B`, shaped like the adapted weight.
    pub fn delta(&self) -> Tensor {
        let (n_in, r) = (self.a.rows(), self.a.cols());
        let n_out = self.b.cols();
        let mut out = vec![0.0; n_in * n_out];
        for i in 0..n_in {
            for k in 0..r {
                let aik = self.a.data()[i * r + k] * self.scale;
                if aik == 0.0 {
                    continue;
                }
                let brow = &self.b.data()[k * n_out..(k + 1) * n_out];
                for (o, b) in out[i * n_out..(i + 1) * n_out].iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Tensor::new(vec![n_in, n_out], out).expect("delta shape")
    }
}
