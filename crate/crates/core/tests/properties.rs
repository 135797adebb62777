//! Algebraic invariants of the diffusion ops, networks and metrics.

mod common;

use common::{conditions, gaussian, oracle_alpha_bars};
use padd::autodiff::{Tensor, PROB_CLAMP};
use padd::diffusion::{
    forward_fixed, move_coefficients, move_sample, pred_to_eps, pred_to_x0, step_back, PredictionMode, Schedule,
    ScheduleParams, TimeGrid,
};
use padd::distill::{d_loss_value, draw_disc_noise, g_loss_value};
use padd::eval::{mmd_rbf, sliced_wasserstein};
use padd::nets::{cfg_combine, Condition, DenoiserConfig, DenoiserNet, Discriminator, DiscriminatorForm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(seed: u64, rows: usize, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(rows, 2, &mut rng).scale(scale)
}

fn max_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn small_net(seed: u64) -> DenoiserNet {
    DenoiserNet::init(
        DenoiserConfig::new(2, vec![16, 16], 8, 1000),
        PredictionMode::Epsilon,
        seed,
    )
    .unwrap()
}

/// Randomizes the adapters so they are no longer neutral.
fn perturb_adapters(net: &mut DenoiserNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ad in net.lora_mut().unwrap() {
        for v in ad.b.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_conversions_round_trip(seed in any::<u64>(), t in 1usize..=1000) {
        let sch = Schedule::default();
        let x = tensor(seed, 5, 2.0);
        let u = tensor(seed ^ 1, 5, 1.0);
        let back = pred_to_eps(&x, &pred_to_x0(&x, &u, t, &sch).unwrap(), t, &sch).unwrap();
        prop_assert!(max_gap(&back, &u) < 1e-9);
        let back = pred_to_x0(&x, &pred_to_eps(&x, &u, t, &sch).unwrap(), t, &sch).unwrap();
        prop_assert!(max_gap(&back, &u) < 1e-9);
    }

    #[test]
    fn terminal_forward_is_pure_noise(seed in any::<u64>()) {
        let sch = Schedule::default();
        let x0 = tensor(seed, 4, 3.0);
        let eps = tensor(seed ^ 7, 4, 1.0);
        let out = forward_fixed(&x0, &eps, sch.timesteps(), &sch).unwrap();
        prop_assert_eq!(out.data(), eps.data());
    }

    #[test]
    fn move_to_same_time_is_identity(seed in any::<u64>(), t in 1usize..=1000, x0_mode in any::<bool>()) {
        let sch = Schedule::default();
        let mode = if x0_mode { PredictionMode::X0 } else { PredictionMode::Epsilon };
        let x = tensor(seed, 3, 1.5);
        let u = tensor(seed ^ 3, 3, 1.0);
        prop_assert!(max_gap(&move_sample(&x, &u, t, t, &sch, mode).unwrap(), &x) < 1e-9);
    }

    #[test]
    fn move_coefficients_agree_with_move(seed in any::<u64>(), t in 1usize..=1000, back in 0usize..1000, x0_mode in any::<bool>()) {
        let sch = Schedule::default();
        let tp = t.saturating_sub(back);
        let mode = if x0_mode { PredictionMode::X0 } else { PredictionMode::Epsilon };
        let x = tensor(seed, 3, 1.5);
        let u = tensor(seed ^ 5, 3, 1.0);
        let (a, b) = move_coefficients(t, tp, &sch, mode).unwrap();
        let lin = x.zip_map(&u, |p, q| a * p + b * q).unwrap();
        let moved = move_sample(&x, &u, t, tp, &sch, mode).unwrap();
        prop_assert!(max_gap(&lin, &moved) < 1e-9);
    }

    #[test]
    fn schedule_is_monotone_and_matches_oracle(b0 in 1e-5f64..1e-3, extra in 1e-3f64..0.02, t_max in 10usize..1200) {
        let p = ScheduleParams { timesteps: t_max, beta_start: b0, beta_end: b0 + extra };
        let sch = Schedule::new(p).unwrap();
        let ab = sch.alpha_bars();
        prop_assert_eq!(ab[0], 1.0);
        prop_assert!(ab[t_max] > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        let oracle = oracle_alpha_bars(t_max, p.beta_start, p.beta_end);
        for (x, y) in ab.iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn step_back_walks_the_grid(steps in prop::sample::select(vec![1usize, 2, 4, 8, 32, 128]), k in 0usize..6) {
        let grid = TimeGrid::new(steps, 1000).unwrap();
        let times = grid.times();
        for (i, &t) in times.iter().enumerate() {
            let want = times.get(i + k).copied().unwrap_or(0);
            prop_assert_eq!(step_back(t, k, grid.spacing()), want);
        }
    }

    #[test]
    fn unit_guidance_is_the_conditional_prediction(seed in any::<u64>()) {
        let c = tensor(seed, 4, 1.0);
        let u = tensor(seed ^ 9, 4, 1.0);
        prop_assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert!(max_gap(&cfg_combine(&c, &u, 0.0).unwrap(), &u) < 1e-15);
    }

    #[test]
    fn fresh_adapters_are_neutral(seed in any::<u64>()) {
        let net = small_net(seed);
        let mut adapted = net.clone();
        adapted.attach_lora(4, seed ^ 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(20, 2, &mut rng);
        let t: Vec<usize> = (0..20).map(|_| rng.random_range(1..=1000)).collect();
        let c = conditions(20, 8, &mut rng);
        let gap = max_gap(&net.denoise(&x, &t, &c).unwrap(), &adapted.denoise(&x, &t, &c).unwrap());
        prop_assert!(gap <= 1e-12);
    }

    #[test]
    fn merged_adapters_match_applied_adapters(seed in any::<u64>()) {
        let mut net = small_net(seed);
        net.attach_lora(3, seed ^ 13).unwrap();
        perturb_adapters(&mut net, seed);
        let mut merged = net.clone();
        merged.merge_lora().unwrap();
        prop_assert!(merged.lora().is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 17);
        let x = gaussian(100, 2, &mut rng);
        let t: Vec<usize> = (0..100).map(|_| rng.random_range(1..=1000)).collect();
        let c = conditions(100, 8, &mut rng);
        let gap = max_gap(&net.denoise(&x, &t, &c).unwrap(), &merged.denoise(&x, &t, &c).unwrap());
        prop_assert!(gap < 1e-9);
    }

    #[test]
    fn discriminator_outputs_are_probabilities(seed in any::<u64>(), conditional in any::<bool>()) {
        let net = small_net(seed);
        let form = if conditional { DiscriminatorForm::Conditional } else { DiscriminatorForm::Unconditional };
        let mut d = Discriminator::init_from(&net, form, 8, seed ^ 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::jitter(&mut d.params_mut(), 2.0, &mut rng);
        let x = gaussian(16, 2, &mut rng).scale(5.0);
        let xj = gaussian(16, 2, &mut rng).scale(5.0);
        let t: Vec<usize> = (0..16).map(|_| rng.random_range(1..=1000)).collect();
        let tj: Vec<usize> = t.iter().map(|&v| rng.random_range(0..=v)).collect();
        let c = conditions(16, 8, &mut rng);
        let p = if conditional {
            d.discriminate_conditional(&x, &xj, &t, &tj, &c).unwrap()
        } else {
            d.discriminate_unconditional(&xj, &tj, &c).unwrap()
        };
        // Raw sigmoids may round to 0 or 1; the losses see clamped values.
        for &v in p.data() {
            prop_assert!((0.0..=1.0).contains(&v));
            let c = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            prop_assert!(c > 0.0 && c < 1.0);
            prop_assert!(d_loss_value(v, v).is_finite() && g_loss_value(v).is_finite());
        }
    }

    #[test]
    fn metrics_vanish_on_identical_sets(seed in any::<u64>(), n in 2usize..80) {
        let a = tensor(seed, n, 1.0);
        prop_assert_eq!(sliced_wasserstein(&a, &a, 8, seed).unwrap(), 0.0);
        prop_assert!(mmd_rbf(&a, &a, None).unwrap() <= 1e-12);
    }

    #[test]
    fn capped_noise_never_exceeds_the_cap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jump: Vec<usize> = (0..64).map(|_| if rng.random_bool(0.7) { 0 } else { 125 }).collect();
        let caps: Vec<usize> = (0..64).map(|_| rng.random_range(1..=1000)).collect();
        let noise = draw_disc_noise(&jump, &[10, 250, 500, 750], &[5, 1, 1, 1], Some(&caps), 2, &mut rng).unwrap();
        for ((t, &j), &cap) in noise.t_star.iter().zip(&jump).zip(&caps) {
            match t {
                Some(v) => prop_assert!(j == 0 && *v <= cap),
                None => prop_assert!(j != 0 || cap < 10),
            }
        }
    }
}

#[test]
fn null_condition_is_distinct_from_every_class() {
    let net = small_net(3);
    let x = tensor(1, 8, 1.0);
    let t = vec![500; 8];
    let null = net.denoise(&x, &t, &[Condition::Null; 8]).unwrap();
    for k in 0..8 {
        let cls = net.denoise(&x, &t, &[Condition::Class(k); 8]).unwrap();
        assert!(max_gap(&null, &cls) > 0.0);
    }
}
