//! Independent brute-force oracles for the diffusion targets and metrics.

use padd::autodiff::Tensor;
use padd::diffusion::analytic::GaussianDenoiser;
use padd::diffusion::{Schedule, ScheduleParams, TimeGrid};
use padd::distill::teacher_multistep_target;
use padd::eval::{mmd_rbf, mode_coverage, per_mode_variance_ratio, sliced_wasserstein};
use padd::nets::Condition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{gaussian, gaussian_chain_oracle, oracle_alpha_bars};

/// Worst absolute gap between `teacher_multistep_target` and the chained
/// oracle over random grid starts, for each `(grid steps, n)` pair.
pub fn gaussian_target_gap(sigma: f64, seed: u64) -> f64 {
    let sch = Schedule::default();
    let p = ScheduleParams::default();
    let ab = oracle_alpha_bars(p.timesteps, p.beta_start, p.beta_end);
    let mu = vec![1.5, -0.5];
    let teacher = GaussianDenoiser::new(mu.clone(), sigma, sch.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (steps, n) in [(128, 4), (32, 4), (8, 2), (4, 2), (2, 2)] {
        let grid = TimeGrid::new(steps, sch.timesteps()).unwrap();
        let times = grid.times();
        let rows = 16;
        let starts: Vec<usize> = (0..rows).map(|_| rng.random_range(0..steps)).collect();
        let t: Vec<usize> = starts.iter().map(|&i| times[i]).collect();
        let x = gaussian(rows, 2, &mut rng);
        let c = vec![Condition::Null; rows];
        let spacing = sch.timesteps() as f64 / steps as f64;
        let got = teacher_multistep_target(&teacher, &x, &t, &c, n, spacing, None, &sch).unwrap();
        for (r, &i) in starts.iter().enumerate() {
            let end = (i + n).min(steps);
            let want = gaussian_chain_oracle(x.row(r), &times[i..=end], &mu, sigma, &ab);
            for (g, w) in got.row(r).iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    worst
}

pub fn random_set(n: usize, seed: u64, shift: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = gaussian(n, 2, &mut rng);
    t.data_mut().iter_mut().for_each(|v| *v += shift);
    t
}

/// 1-D W1 as the integral of |F_a - F_b| over the merged support.
fn w1_by_cdf(a: &[f64], b: &[f64]) -> f64 {
    let mut events: Vec<(f64, usize)> = a.iter().map(|&v| (v, 0)).chain(b.iter().map(|&v| (v, 1))).collect();
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut fa, mut fb, mut total) = (0.0, 0.0, 0.0);
    for w in 0..events.len() {
        match events[w].1 {
            0 => fa += 1.0 / na,
            _ => fb += 1.0 / nb,
        }
        if w + 1 < events.len() {
            total += (fa - fb).abs() * (events[w + 1].0 - events[w].0);
        }
    }
    total
}

/// Replays the documented direction protocol (ChaCha8 from `seed`, one
/// normalized Gaussian draw per direction) and integrates CDF gaps.
pub fn sliced_wasserstein_oracle(a: &Tensor, b: &Tensor, k: usize, seed: u64) -> f64 {
    assert_eq!(a.rows(), b.rows(), "oracle covers equal sizes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..k {
        let d: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let proj = |x: &Tensor| -> Vec<f64> {
            (0..x.rows())
                .map(|i| (x.row(i)[0] * d[0] + x.row(i)[1] * d[1]) / norm)
                .collect()
        };
        total += w1_by_cdf(&proj(a), &proj(b));
    }
    total / k as f64
}

/// Unbiased MMD² from an ordered double loop and a brute-force median.
pub fn mmd_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let pts: Vec<Vec<f64>> = (0..a.rows())
        .map(|i| a.row(i).to_vec())
        .chain((0..b.rows()).map(|i| b.row(i).to_vec()))
        .collect();
    let dist = |p: &[f64], q: &[f64]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let mut all = Vec::new();
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i < j {
                all.push(dist(&pts[i], &pts[j]));
            }
        }
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    let h = if m % 2 == 1 {
        all[m / 2]
    } else {
        (all[m / 2 - 1] + all[m / 2]) / 2.0
    };
    let k = |p: &[f64], q: &[f64]| (-dist(p, q).powi(2) / (2.0 * h * h)).exp();
    let (na, nb) = (a.rows(), b.rows());
    let mut xx = 0.0;
    for i in 0..na {
        for j in 0..na {
            if i != j {
                xx += k(a.row(i), a.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..nb {
        for j in 0..nb {
            if i != j {
                yy += k(b.row(i), b.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..na {
        for j in 0..nb {
            xy += k(a.row(i), b.row(j));
        }
    }
    xx / (na * (na - 1)) as f64 + yy / (nb * (nb - 1)) as f64 - 2.0 * xy / (na * nb) as f64
}

pub fn ring(n: usize, seed: u64, spread: f64) -> (Tensor, Vec<[f64; 2]>) {
    let centers: Vec<[f64; 2]> = (0..8)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 8.0;
            [2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..6)];
            let e: f64 = StandardNormal.sample(&mut rng);
            let f: f64 = StandardNormal.sample(&mut rng);
            vec![c[0] + spread * e, c[1] + spread * f]
        })
        .collect();
    (Tensor::from_rows(&rows).unwrap(), centers)
}

/// Nearest-center assignment within `radius`, then the coverage fraction
/// and the mean per-mode standard-deviation ratio.
pub fn mode_oracle(x: &Tensor, centers: &[[f64; 2]], radius: f64, threshold: f64, data_std: f64) -> (f64, f64) {
    let mut groups: Vec<Vec<[f64; 2]>> = vec![Vec::new(); centers.len()];
    for i in 0..x.rows() {
        let p = x.row(i);
        let mut best = None;
        for (k, c) in centers.iter().enumerate() {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        if let Some((k, _)) = best {
            groups[k].push([p[0], p[1]]);
        }
    }
    let assigned: usize = groups.iter().map(Vec::len).sum();
    let covered = groups
        .iter()
        .filter(|g| assigned > 0 && g.len() as f64 >= threshold * assigned as f64)
        .count();
    let mut ratios = Vec::new();
    for g in groups.iter().filter(|g| g.len() >= 2) {
        let n = g.len() as f64;
        let mut var = 0.0;
        for j in 0..2 {
            let m = g.iter().map(|p| p[j]).sum::<f64>() / n;
            var += g.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
        }
        ratios.push((var / 2.0).sqrt() / data_std);
    }
    (
        covered as f64 / centers.len() as f64,
        ratios.iter().sum::<f64>() / ratios.len() as f64,
    )
}

/// Worst gap between each metric and its oracle over several random sets
/// of at most 200 points.
pub fn metric_oracle_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for (n, seed) in [(2, 1), (17, 2), (64, 3), (200, 4)] {
        let a = random_set(n, seed, 0.0);
        let b = random_set(n, seed + 100, 0.7);
        let sw = sliced_wasserstein(&a, &b, 32, seed).unwrap();
        worst = worst.max((sw - sliced_wasserstein_oracle(&a, &b, 32, seed)).abs());
        let mmd = mmd_rbf(&a, &b, None).unwrap();
        worst = worst.max((mmd - mmd_oracle(&a, &b)).abs());
    }
    for (n, seed, spread) in [(40, 7, 0.1), (200, 8, 0.15), (150, 9, 0.3)] {
        let (x, centers) = ring(n, seed, spread);
        let radius = 0.45;
        let cov = mode_coverage(&x, &centers, radius, 0.02).unwrap();
        let ratio = per_mode_variance_ratio(&x, &centers, radius, 0.15).unwrap();
        let (oc, or) = mode_oracle(&x, &centers, radius, 0.02, 0.15);
        worst = worst.max((cov.fraction - oc).abs()).max((ratio - or).abs());
    }
    worst
}
