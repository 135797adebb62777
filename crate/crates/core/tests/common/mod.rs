//! Helpers shared by the integration tests and the acceptance gate.

#![allow(dead_code)]

pub mod oracle;

use padd::autodiff::{finite_difference_gradient, relative_error, Graph, NodeId, Tensor};
use padd::diffusion::PredictionMode;
use padd::nets::{Condition, DenoiserConfig, DenoiserNet, Discriminator, DiscriminatorForm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn conditions(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<Condition> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..=classes);
            if k == classes {
                Condition::Null
            } else {
                Condition::Class(k)
            }
        })
        .collect()
}

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `loss` around `theta`.
pub fn coordinate_error(analytic: &Tensor, theta: &Tensor, loss: impl FnMut(&Tensor) -> f64) -> f64 {
    let numeric = finite_difference_gradient(loss, theta, FD_STEP).unwrap();
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// A small denoiser config with at most ~200 weights.
pub fn tiny_config(rng: &mut impl Rng) -> DenoiserConfig {
    let depth = rng.random_range(1..=2);
    let widths = (0..depth).map(|_| rng.random_range(3..=5)).collect();
    DenoiserConfig {
        data_dim: 2,
        widths,
        classes: rng.random_range(1..=3),
        time_dim: 2 * rng.random_range(1..=2),
        cond_dim: rng.random_range(1..=2),
        max_time: 1000,
    }
}

/// Perturbs every weight so no gradient path is degenerate (zeroed output
/// layers, identity norms).
pub fn jitter(params: &mut [&mut Tensor], scale: f64, rng: &mut impl Rng) {
    for p in params {
        for v in p.data_mut() {
            *v += scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }
}

type GraphBuilder = Box<dyn Fn(&[Tensor]) -> (Graph, NodeId, Vec<NodeId>)>;

/// Random free-form graph over the primitive ops: affine, layer norm, SiLU,
/// sigmoid, concat, add/sub/mul/scale and one of three loss reductions.
fn random_op_graph(case: u64) -> (Vec<Tensor>, GraphBuilder) {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let n = rng.random_range(2..=4);
    let d_in = rng.random_range(2..=3);
    let h = rng.random_range(3..=5);
    let x = gaussian(n, d_in, &mut rng);
    let target = gaussian(n, 1, &mut rng);
    let vector = |scale: f64, shift: f64, rng: &mut ChaCha8Rng| {
        Tensor::new(vec![h], gaussian(1, h, rng).scale(scale).map(|v| v + shift).into_data()).unwrap()
    };
    let params = vec![
        gaussian(d_in, h, &mut rng).scale(0.7),
        vector(0.3, 0.0, &mut rng),
        vector(0.2, 1.0, &mut rng),
        vector(0.2, 0.0, &mut rng),
        gaussian(h + d_in, 1, &mut rng).scale(0.5),
    ];
    let variant = rng.random_range(0..3);
    let build = move |ps: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.parameter(p.clone())).collect();
        let xn = g.constant(x.clone());
        let a = g.affine(xn, ids[0], Some(ids[1])).unwrap();
        let ln = g.layer_norm(a, ids[2], ids[3]).unwrap();
        let act = g.silu(ln).unwrap();
        let gate = g.sigmoid(a).unwrap();
        let mixed = g.mul(act, gate).unwrap();
        let shifted = g.sub(mixed, a).unwrap();
        let summed = g.add(shifted, ln).unwrap();
        let cat = g.concat(&[summed, xn]).unwrap();
        let out = g.affine(cat, ids[4], None).unwrap();
        let loss = match variant {
            0 => {
                let t = g.constant(target.clone());
                g.mse(out, t).unwrap()
            }
            1 => {
                let p = g.sigmoid(out).unwrap();
                g.log_loss(p, 1.0).unwrap()
            }
            _ => {
                let sq = g.mul(out, out).unwrap();
                let m = g.mean(sq).unwrap();
                g.scale(m, 0.5).unwrap()
            }
        };
        (g, loss, ids)
    };
    (params, Box::new(build))
}

fn op_graph_error(case: u64) -> f64 {
    let (params, build) = random_op_graph(case);
    let (g, loss, ids) = build(&params);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *id);
        let err = coordinate_error(&analytic, &params[i], |theta| {
            let mut ps = params.clone();
            ps[i] = theta.clone();
            let (g, l, _) = build(&ps);
            g.value(l).data()[0]
        });
        worst = worst.max(err);
    }
    worst
}

struct DenoiserCase {
    net: DenoiserNet,
    x: Tensor,
    t: Vec<usize>,
    c: Vec<Condition>,
    target: Tensor,
}

fn denoiser_case(case: u64, with_lora: bool) -> DenoiserCase {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let cfg = tiny_config(&mut rng);
    let mode = if rng.random() {
        PredictionMode::Epsilon
    } else {
        PredictionMode::X0
    };
    let mut net = DenoiserNet::init(cfg.clone(), mode, case).unwrap();
    jitter(&mut net.trainable_params_mut(), 0.2, &mut rng);
    if with_lora {
        net.attach_lora(2, case).unwrap();
        jitter(&mut net.trainable_params_mut(), 0.3, &mut rng);
    }
    let n = rng.random_range(2..=3);
    DenoiserCase {
        x: gaussian(n, 2, &mut rng),
        t: (0..n).map(|_| rng.random_range(1..=1000)).collect(),
        c: conditions(n, cfg.classes, &mut rng),
        target: gaussian(n, 2, &mut rng),
        net,
    }
}

fn denoiser_loss(net: &DenoiserNet, k: &DenoiserCase) -> f64 {
    let out = net.denoise(&k.x, &k.t, &k.c).unwrap();
    out.data()
        .iter()
        .zip(k.target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / out.len() as f64
}

fn denoiser_error(case: u64, with_lora: bool) -> f64 {
    let k = denoiser_case(case, with_lora);
    let mut g = Graph::new();
    let bound = k.net.bind(&mut g, true);
    let xn = g.constant(k.x.clone());
    let out = k.net.forward(&mut g, &bound, xn, &k.t, &k.c).unwrap();
    let tn = g.constant(k.target.clone());
    let loss = g.mse(out, tn).unwrap();
    let grads = bound.grads(&g, &g.backward(loss).unwrap());
    let trainable: Vec<Tensor> = k.net.trainable_params().into_iter().cloned().collect();
    let mut worst: f64 = 0.0;
    for (i, analytic) in grads.iter().enumerate() {
        let err = coordinate_error(analytic, &trainable[i], |theta| {
            let mut n = k.net.clone();
            *n.trainable_params_mut()[i] = theta.clone();
            denoiser_loss(&n, &k)
        });
        worst = worst.max(err);
    }
    worst
}

fn discriminator_error(case: u64, form: DiscriminatorForm) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let cfg = tiny_config(&mut rng);
    let net = DenoiserNet::init(cfg.clone(), PredictionMode::Epsilon, case).unwrap();
    let mut d = Discriminator::init_from(&net, form, 3, case).unwrap();
    jitter(&mut d.params_mut(), 0.3, &mut rng);
    let n = rng.random_range(2..=3);
    let x_t = gaussian(n, 2, &mut rng);
    let x_j = gaussian(n, 2, &mut rng);
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(500..=1000)).collect();
    let tj: Vec<usize> = t.iter().map(|&v| rng.random_range(0..=v)).collect();
    let c = conditions(n, cfg.classes, &mut rng);
    let label = if rng.random() { 1.0 } else { 0.0 };
    let loss_of = |d: &Discriminator, g: &mut Graph| {
        let b = d.bind(g, true);
        let xt = g.constant(x_t.clone());
        let xj = g.constant(x_j.clone());
        let p = match form {
            DiscriminatorForm::Conditional => d.forward_conditional(g, &b, xt, xj, &t, &tj, &c),
            DiscriminatorForm::Unconditional => d.forward_unconditional(g, &b, xj, &tj, &c),
        }
        .unwrap();
        (b, g.log_loss(p, label).unwrap())
    };
    let mut g = Graph::new();
    let (b, loss) = loss_of(&d, &mut g);
    let per_param = b.grads(&g, &g.backward(loss).unwrap());
    let params: Vec<Tensor> = d.params().into_iter().cloned().collect();
    let mut worst: f64 = 0.0;
    for (i, analytic) in per_param.iter().enumerate() {
        let err = coordinate_error(analytic, &params[i], |theta| {
            let mut d2 = d.clone();
            *d2.params_mut()[i] = theta.clone();
            let mut g = Graph::new();
            let (_, l) = loss_of(&d2, &mut g);
            g.value(l).data()[0]
        });
        worst = worst.max(err);
    }
    worst
}

/// Worst per-coordinate relative gradient error for each of `cases` random
/// networks, cycling through free-form op graphs, denoisers (with and
/// without adapters) and both discriminator forms.
pub fn gradcheck_suite(cases: u64, seed: u64) -> Vec<(String, f64)> {
    (0..cases)
        .map(|i| {
            let case = seed.wrapping_mul(1000).wrapping_add(i);
            match i % 5 {
                0 => (format!("op-graph #{case}"), op_graph_error(case)),
                1 => (format!("denoiser #{case}"), denoiser_error(case, false)),
                2 => (format!("denoiser+lora #{case}"), denoiser_error(case, true)),
                3 => (
                    format!("cond-disc #{case}"),
                    discriminator_error(case, DiscriminatorForm::Conditional),
                ),
                _ => (
                    format!("uncond-disc #{case}"),
                    discriminator_error(case, DiscriminatorForm::Unconditional),
                ),
            }
        })
        .collect()
}

/// `ᾱ_t` for the scaled-linear schedule, computed from scratch.
pub fn oracle_alpha_bars(t_max: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
    let mut out = vec![1.0];
    let mut prod = 1.0;
    for i in 0..t_max {
        let r = a + (b - a) * i as f64 / (t_max - 1) as f64;
        prod *= 1.0 - r * r;
        out.push(prod);
    }
    out
}

/// Brute-force multi-step target on `N(mu, sigma² I)` data: chains DDIM
/// steps through `times` with the closed-form ε of the Gaussian, one scalar
/// at a time.
pub fn gaussian_chain_oracle(x: &[f64], times: &[usize], mu: &[f64], sigma: f64, ab: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    for w in times.windows(2) {
        let (a, a2) = (ab[w[0]], ab[w[1]]);
        for (j, v) in x.iter_mut().enumerate() {
            let var = a * sigma * sigma + 1.0 - a;
            let eps = (1.0 - a).sqrt() * (*v - a.sqrt() * mu[j]) / var;
            let x0 = (*v - (1.0 - a).sqrt() * eps) / a.sqrt();
            *v = a2.sqrt() * x0 + (1.0 - a2).sqrt() * eps;
        }
    }
    x
}

/// A full six-level pipeline config small enough to run in seconds.
///
/// `iters` sets every training loop; 0 exercises the plumbing only.
pub fn tiny_pipeline_toml(iters: usize) -> String {
    let mut s = format!(
        "seed = 7\n\
         [dataset]\nkind = \"eight-gaussians\"\nsize = 64\n\
         [net]\nwidths = [16, 16]\n\
         [teacher]\niterations = {iters}\nbatch_size = 16\nheldout_size = 16\n\
         [conversion]\niterations = {iters}\nbatch_size = 16\n\
         [probes]\nsize = 8\nevery = 2\n\
         [[stages]]\nteacher_steps = 128\nstudent_steps = 32\nobjective = \"mse\"\niterations = {iters}\nbatch_size = 16\n"
    );
    for (t, st) in [(32, 8), (8, 4), (4, 2), (2, 1)] {
        s += &format!(
            "[[stages]]\nteacher_steps = {t}\nstudent_steps = {st}\nconditional_iterations = {iters}\n\
             unconditional_iterations = {iters}\nfull_iterations = {iters}\nbatch_size = 16\nhead_width = 8\n"
        );
    }
    s
}
