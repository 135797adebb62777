use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    EightGaussians,
    TwoMoons,
    Spiral,
    Checkerboard,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::EightGaussians,
        DatasetKind::TwoMoons,
        DatasetKind::Spiral,
        DatasetKind::Checkerboard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::EightGaussians => "eight-gaussians",
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::Spiral => "spiral",
            DatasetKind::Checkerboard => "checkerboard",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::EightGaussians => 8,
            _ => 1,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("dataset.kind", format!("unknown dataset kind `{s}`")))
    }
}

/// Points `[n, 2]` with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoints {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

/// A 2-D toy distribution with a closed-form sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyDataset {
    kind: DatasetKind,
}

impl ToyDataset {
    pub fn new(kind: DatasetKind) -> Self {
        Self { kind }
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.kind.classes()
    }

    /// Mode centers, for the kinds that have isolated modes.
    pub fn mode_centers(&self) -> Option<Vec<[f64; 2]>> {
        match self.kind {
            DatasetKind::EightGaussians => Some(
                (0..8)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / 8.0;
                        [EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin()]
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Per-coordinate standard deviation around each mode center.
    pub fn mode_std(&self) -> Option<f64> {
        match self.kind {
            DatasetKind::EightGaussians => Some(EIGHT_GAUSSIANS_STD),
            _ => None,
        }
    }

    /// Draws `n >= 1` points.
    ///
    /// - eight-gaussians: class `k` uniform, point `2 (cos 2pi k/8, sin 2pi k/8) + 0.15 z`.
    /// - two-moons: `s ~ U(0, pi)`; upper arc `(cos s, sin s)`, lower arc
    ///   `(1 - cos s, 0.5 - sin s)`, recentred, scaled by 1.5, plus `0.05 z`.
    /// - spiral: `r = 3 sqrt(u)`, angle `3 pi sqrt(u)`, plus `0.05 z`.
    /// - checkerboard: uniform on the four dark cells of a 4x4 board over `[-2, 2]^2`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> LabeledPoints {
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        let gauss = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
        for _ in 0..n {
            let (x, y, label) = match self.kind {
                DatasetKind::EightGaussians => {
                    let k = rng.random_range(0..8);
                    let a = 2.0 * PI * k as f64 / 8.0;
                    let (zx, zy) = (gauss(rng), gauss(rng));
                    (
                        EIGHT_GAUSSIANS_RADIUS * a.cos() + EIGHT_GAUSSIANS_STD * zx,
                        EIGHT_GAUSSIANS_RADIUS * a.sin() + EIGHT_GAUSSIANS_STD * zy,
                        k,
                    )
                }
                DatasetKind::TwoMoons => {
                    let s = rng.random_range(0.0..PI);
                    let upper: bool = rng.random();
                    let (mx, my) = if upper {
                        (s.cos(), s.sin())
                    } else {
                        (1.0 - s.cos(), 0.5 - s.sin())
                    };
                    let (zx, zy) = (gauss(rng), gauss(rng));
                    (1.5 * (mx - 0.5) + 0.05 * zx, 1.5 * (my - 0.25) + 0.05 * zy, 0)
                }
                DatasetKind::Spiral => {
                    let u: f64 = rng.random();
                    let r = 3.0 * u.sqrt();
                    let a = 3.0 * PI * u.sqrt();
                    let (zx, zy) = (gauss(rng), gauss(rng));
                    (r * a.cos() + 0.05 * zx, r * a.sin() + 0.05 * zy, 0)
                }
                DatasetKind::Checkerboard => {
                    let col = rng.random_range(0..4usize);
                    let row = 2 * rng.random_range(0..2usize) + (col % 2);
                    let x = -2.0 + col as f64 + rng.random::<f64>();
                    let y = -2.0 + row as f64 + rng.random::<f64>();
                    (x, y, 0)
                }
            };
            data.push(x);
            data.push(y);
            labels.push(label);
        }
        LabeledPoints {
            points: Tensor::new(vec![n, 2], data).expect("sample count must be positive"),
            labels,
        }
    }
}

/// `n` labeled points of `kind`, deterministic in `seed`.
pub fn generate_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<LabeledPoints> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ToyDataset::new(kind).sample(n, &mut rng))
}
