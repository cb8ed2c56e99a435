#![allow(dead_code)]

use std::path::PathBuf;

use fetsim::autodiff::{Tape, Var};
use fetsim::config::RunConfig;
use fetsim::linkage::{self, LinkedBatch, LinkedParty, RawTable};
use fetsim::model::{FetModel, ForwardCtx, ModelConfig};
use fetsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn mnist_path() -> PathBuf {
    manifest_dir().join("data/mnist_5k.csv.gz")
}

/// The six-party MNIST setting shipped in `configs/mnist_desk.toml`.
pub fn desk_config() -> RunConfig {
    let cfg = RunConfig::load(&manifest_dir().join("configs/mnist_desk.toml")).unwrap();
    cfg.validate().unwrap();
    cfg
}

pub fn desk_raw(cfg: &RunConfig) -> RawTable {
    linkage::load_raw_table(cfg.data.raw.as_ref().unwrap(), cfg.data.rows, cfg.data.feature_scale).unwrap()
}

/// Gradients whose norm is below this are compared in absolute terms;
/// central differences carry roundoff of about 1e-10.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(GRAD_FLOOR)
}

/// Checks the tape gradient of `f` against central differences.
///
/// `f` maps leaf variables (one per input) to an arbitrary tensor; the
/// scalar loss is its dot product with a fixed random weight tensor.
/// Returns the worst relative error over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let weights = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        randn(t.shape(out), &mut rng(99))
    };
    let loss_of = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = f(&mut t, &vars);
    let weighted = t.mul_const(out, weights.clone()).unwrap();
    let loss = t.sum(weighted);
    let grads = t.backward(loss).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut numeric = Vec::with_capacity(x.numel());
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + h;
            let up = loss_of(&xs);
            xs[i].data_mut()[j] = x.data()[j] - h;
            let down = loss_of(&xs);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// A random batch for a model with the given config and input widths.
pub fn random_batch(cfg: &ModelConfig, input_dims: &[usize], b: usize, seed: u64) -> LinkedBatch {
    let mut r = rng(seed);
    let k = cfg.num_neighbors;
    let d = cfg.key_dims;
    let parties = input_dims[1..]
        .iter()
        .map(|&w| LinkedParty {
            features: randn(&[b, k, w], &mut r),
            keys: randn(&[b, k, d], &mut r),
            sample_ids: (0..b * k).collect(),
        })
        .collect();
    LinkedBatch {
        primary_rows: (0..b).collect(),
        primary_features: randn(&[b, 1, input_dims[0]], &mut r),
        primary_keys: randn(&[b, 1, d], &mut r),
        labels: (0..b).map(|i| (i % 3) as f64).collect(),
        parties,
    }
}

/// Moves every parameter away from its initial value so that zero-initialized
/// projections take part in the gradient check.
pub fn jitter(model: &mut FetModel, seed: u64) {
    let mut r = rng(seed);
    for p in &mut model.parties {
        for param in p.params.iter_mut() {
            for v in param.value.data_mut() {
                *v += 0.1 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Cross-entropy of the model on `batch`.
pub fn model_loss(model: &FetModel, batch: &LinkedBatch, ctx: &ForwardCtx) -> f64 {
    let mut t = Tape::new();
    let out = model.forward(&mut t, batch, ctx).unwrap();
    let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
    let loss = t.cross_entropy(out.prediction, &labels).unwrap();
    t.value(loss).item()
}

/// Worst relative error between backprop and central differences over every
/// parameter tensor of every party.
pub fn model_gradcheck(model: &FetModel, batch: &LinkedBatch, ctx: &ForwardCtx) -> f64 {
    let mut t = Tape::new();
    let out = model.forward(&mut t, batch, ctx).unwrap();
    let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
    let loss = t.cross_entropy(out.prediction, &labels).unwrap();
    let grads = t.backward(loss).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (pi, party) in model.parties.iter().enumerate() {
        for (j, param) in party.params.iter().enumerate() {
            let analytic = grads
                .get(out.param_vars[pi][j])
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; param.value.numel()]);
            let mut numeric = Vec::with_capacity(param.value.numel());
            for e in 0..param.value.numel() {
                let x = param.value.data()[e];
                probe.parties[pi].params.get_mut(j).value.data_mut()[e] = x + h;
                let up = model_loss(&probe, batch, ctx);
                probe.parties[pi].params.get_mut(j).value.data_mut()[e] = x - h;
                let down = model_loss(&probe, batch, ctx);
                probe.parties[pi].params.get_mut(j).value.data_mut()[e] = x;
                numeric.push((up - down) / (2.0 * h));
            }
            let err = rel_err(&analytic, &numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// A small two-party (one secondary) model config.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        num_heads: 2,
        num_blocks: 1,
        ffn_size: 12,
        num_neighbors: 3,
        num_parties: 1,
        key_dims: 2,
        mask_hidden: 6,
        ..ModelConfig::default()
    }
}

/// Finite-difference checks of every tape operation. Returns the worst
/// relative error per case.
pub fn op_gradient_suite() -> Vec<(&'static str, f64)> {
    let mut r = rng(7);
    let mut g = |s: &[usize]| randn(s, &mut r);
    let a23 = g(&[2, 3]);
    let b34 = g(&[3, 4]);
    let x243 = g(&[2, 4, 3]);
    let w35 = g(&[3, 5]);
    let b5 = g(&[5]);
    let p234 = g(&[2, 3, 4]);
    let q245 = g(&[2, 4, 5]);
    let q254 = g(&[2, 5, 4]);
    let e1 = g(&[2, 3, 4]);
    let e2 = g(&[2, 3, 4]);
    let logits = g(&[2, 3, 5]);
    let full_mask = g(&[2, 3, 5]);
    let key_mask = g(&[2, 5]);
    let ln_x = g(&[3, 6]);
    let ln_gain = g(&[6]);
    let ln_bias = g(&[6]);
    let perm = g(&[2, 3, 4, 5]);
    let cls = g(&[4, 3]);
    let target = g(&[4, 3]);
    let c = g(&[2, 3, 4]);
    let cat2 = g(&[2, 3, 2]);
    let cat3 = g(&[2, 3, 3]);
    // Rows of very different norms so that some are clipped and some are not.
    let mut clip_in = g(&[4, 6]);
    for (i, row) in clip_in.data_mut().chunks_exact_mut(6).enumerate() {
        let s = [0.1, 3.0, 0.5, 10.0][i];
        row.iter_mut().for_each(|v| *v *= s);
    }
    // Keep relu inputs away from the kink.
    let relu_in = e1.map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });

    vec![
        ("matmul", gradcheck(&[a23.clone(), b34.clone()], |t, v| t.matmul(v[0], v[1]).unwrap())),
        (
            "linear",
            gradcheck(&[x243.clone(), w35.clone(), b5.clone()], |t, v| {
                t.linear(v[0], v[1], Some(v[2])).unwrap()
            }),
        ),
        ("linear_no_bias", gradcheck(&[x243.clone(), w35.clone()], |t, v| t.linear(v[0], v[1], None).unwrap())),
        ("bmm", gradcheck(&[p234.clone(), q245], |t, v| t.bmm(v[0], v[1], false).unwrap())),
        ("bmm_trans_b", gradcheck(&[p234.clone(), q254], |t, v| t.bmm(v[0], v[1], true).unwrap())),
        ("add", gradcheck(&[e1.clone(), e2.clone()], |t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", gradcheck(&[e1.clone(), e2.clone()], |t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", gradcheck(&[e1.clone(), e2.clone()], |t, v| t.mul(v[0], v[1]).unwrap())),
        ("mul_self", gradcheck(&[e1.clone()], |t, v| t.mul(v[0], v[0]).unwrap())),
        ("scale", gradcheck(&[e1.clone()], |t, v| t.scale(v[0], -2.5))),
        ("add_const", gradcheck(&[e1.clone()], |t, v| t.add_const(v[0], &c).unwrap())),
        ("mul_const", gradcheck(&[e1.clone()], |t, v| t.mul_const(v[0], c.clone()).unwrap())),
        ("relu", gradcheck(&[relu_in], |t, v| t.relu(v[0]))),
        ("softmax", gradcheck(&[logits.clone()], |t, v| t.softmax(v[0], None).unwrap())),
        (
            "softmax_full_mask",
            gradcheck(&[logits.clone(), full_mask], |t, v| t.softmax(v[0], Some(v[1])).unwrap()),
        ),
        (
            "softmax_key_mask",
            gradcheck(&[logits.clone(), key_mask], |t, v| t.softmax(v[0], Some(v[1])).unwrap()),
        ),
        (
            "layer_norm",
            gradcheck(&[ln_x, ln_gain, ln_bias], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        ("reshape", gradcheck(&[e1.clone()], |t, v| t.reshape(v[0], &[6, 4]).unwrap())),
        ("permute_0213", gradcheck(&[perm], |t, v| t.permute_0213(v[0]).unwrap())),
        ("sum", gradcheck(&[e1.clone()], |t, v| t.sum(v[0]))),
        ("mean", gradcheck(&[e1.clone()], |t, v| t.mean(v[0]))),
        ("mse", gradcheck(&[cls.clone()], |t, v| t.mse(v[0], &target).unwrap())),
        ("cross_entropy", gradcheck(&[cls], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap())),
        ("clip_rows", gradcheck(&[clip_in], |t, v| t.clip_rows(v[0], 1.0).unwrap())),
        (
            "concat",
            gradcheck(&[cat2, e1.clone(), cat3], |t, v| t.concat(&[v[0], v[1], v[2]]).unwrap()),
        ),
        (
            "sum_list",
            gradcheck(&[e1.clone(), e2.clone(), c.clone()], |t, v| t.sum_list(&[v[0], v[1], v[2]]).unwrap()),
        ),
    ]
}

/// Finite-difference check of the full two-party model under several
/// configurations. Returns the worst relative error per case.
pub fn model_gradient_suite() -> Vec<(&'static str, f64)> {
    use fetsim::model::MaskInput;
    use fetsim::splitavg::PrivacySpec;

    let plain = PrivacySpec::default();
    let clipped = PrivacySpec {
        enabled: true,
        noise_multiplier: 0.5,
        clip_norm: 1.0,
        ..PrivacySpec::default()
    };
    let cases: [(&str, MaskInput, bool, &PrivacySpec); 4] = [
        ("fet_encoded_mask", MaskInput::Encoded, true, &plain),
        ("fet_neighborhood_mask", MaskInput::Neighborhood, true, &plain),
        ("fet_no_mask", MaskInput::Encoded, false, &plain),
        ("fet_clipped_noisy", MaskInput::Raw, true, &clipped),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, mask_input, dm, privacy))| {
            let cfg = ModelConfig {
                mask_input,
                dynamic_mask: dm,
                ..tiny_config()
            };
            let dims = [3, 4];
            let mut model = FetModel::new(cfg.clone(), &dims, 3, i as u64).unwrap();
            jitter(&mut model, 100 + i as u64);
            let batch = random_batch(&cfg, &dims, 4, 200 + i as u64);
            let ctx = ForwardCtx {
                add_noise: privacy.enabled,
                seed: 5,
                step: 3,
                ..ForwardCtx::eval(privacy)
            };
            (name, model_gradcheck(&model, &batch, &ctx))
        })
        .collect()
}

/// `erfc` from the positive-term series of `erf` near zero and the
/// continued fraction `e^{-t²}/√π · 1/(t + ½/(t + 1/(t + 3⁄2/(t + …))))`
/// in the tail.
pub fn erfc_oracle(t: f64) -> f64 {
    if t < 0.0 {
        return 2.0 - erfc_oracle(-t);
    }
    let pi_sqrt = std::f64::consts::PI.sqrt();
    if t < 2.0 {
        let mut term = t;
        let mut sum = t;
        let mut n = 0.0;
        while term > 1e-18 * sum {
            n += 1.0;
            term *= 2.0 * t * t / (2.0 * n + 1.0);
            sum += term;
        }
        1.0 - 2.0 / pi_sqrt * (-t * t).exp() * sum
    } else {
        let mut f = t;
        for n in (1..=300).rev() {
            f = t + (n as f64 / 2.0) / f;
        }
        (-t * t).exp() / pi_sqrt / f
    }
}

/// Standard normal CDF from [`erfc_oracle`].
pub fn phi(x: f64) -> f64 {
    0.5 * erfc_oracle(-x / std::f64::consts::SQRT_2)
}

/// The analytic Gaussian condition's δ at noise `sigma`.
pub fn gaussian_delta(epsilon: f64, sigma: f64, sensitivity: f64) -> f64 {
    let a = sensitivity / (2.0 * sigma);
    let b = epsilon * sigma / sensitivity;
    phi(a - b) - epsilon.exp() * phi(-a - b)
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Rényi divergence of the sampled Gaussian mechanism at order `alpha`,
/// integrated numerically: `log E_{z~N(0,σ²)}[((1−q) + q·e^{(2z−1)/2σ²})^α] / (α−1)`
/// by Simpson's rule in the log domain.
pub fn reference_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    let s2 = sigma * sigma;
    let lo = -14.0 * sigma - 1.0;
    let hi = a + 14.0 * sigma + 1.0;
    let mut n = (((hi - lo) / (sigma / 40.0)).ceil() as usize).max(200);
    if n % 2 == 1 {
        n += 1;
    }
    let h = (hi - lo) / n as f64;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let terms: Vec<f64> = (0..=n)
        .map(|i| {
            let z = lo + i as f64 * h;
            let u = (2.0 * z - 1.0) / (2.0 * s2);
            let mix = if u > 0.0 {
                u + (q + (1.0 - q) * (-u).exp()).ln()
            } else {
                ((1.0 - q) + q * u.exp()).ln()
            };
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            -z * z / (2.0 * s2) + log_norm + a * mix + (w * h / 3.0f64).ln()
        })
        .collect();
    logsumexp(&terms) / (a - 1.0)
}

/// ε of `steps` sampled Gaussian releases from the quadrature moments,
/// converted with `ε = R + log((α−1)/α) − (log δ + log α)/(α−1)` and
/// minimized over integer orders 2..=256.
pub fn reference_epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    (2..=256u32)
        .map(|alpha| {
            let a = alpha as f64;
            let r = steps as f64 * reference_rdp(q, sigma, alpha);
            (r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0)).max(0.0)
        })
        .fold(f64::INFINITY, f64::min)
}
