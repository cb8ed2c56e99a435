mod common;

use common::{randn, random_batch, rng, tiny_config};
use fetsim::autodiff::Tape;
use fetsim::model::{
    self, aggregate_concat, pe_average, AggregatorMode, FetModel, ForwardCtx, MaskInput, ModelConfig,
    PositionalEncoding,
};
use fetsim::optim::ParamSet;
use fetsim::splitavg::PrivacySpec;
use fetsim::Tensor;

fn multi_config(k: usize) -> ModelConfig {
    ModelConfig {
        num_parties: k,
        ..tiny_config()
    }
}

fn dims(k: usize) -> Vec<usize> {
    (0..=k).map(|i| 3 + i % 2).collect()
}

#[test]
fn positional_encoding_matches_formula() {
    let (d, h) = (2, 10);
    let mut ps = ParamSet::new();
    let pe = PositionalEncoding::new(&mut ps, d, h, 0.5, 8.0);
    // Three log-spaced frequencies between 0.5 and 8.
    let freqs = [0.5, 2.0, 8.0];
    let keys = Tensor::new(&[1, 2, d], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
    let base = pe.base(&keys).unwrap();
    for (row, key) in keys.data().chunks(d).enumerate() {
        let mut want = Vec::new();
        for &x in key {
            for f in freqs {
                want.push((f * x).sin());
                want.push((f * x).cos());
            }
        }
        want.truncate(h);
        let got = &base.data()[row * h..(row + 1) * h];
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "row {row}: {got:?} vs {want:?}");
        }
    }

    // With a nonzero projection the encoding is S + S·W + b.
    let w = randn(&[h, h], &mut rng(1));
    let b = randn(&[h], &mut rng(2));
    ps.get_mut(pe.proj.w).value = w.clone();
    ps.get_mut(pe.proj.b).value = b.clone();
    let mut t = Tape::new();
    let p = ps.bind(&mut t);
    let out = pe.forward(&mut t, &p, &keys).unwrap();
    let got = t.value(out).clone();
    for r in 0..2 {
        let s = &base.data()[r * h..(r + 1) * h];
        for j in 0..h {
            let proj: f64 = (0..h).map(|i| s[i] * w.data()[i * h + j]).sum::<f64>() + b.data()[j];
            assert!((got.data()[r * h + j] - (s[j] + proj)).abs() < 1e-12);
        }
    }
}

#[test]
fn raw_mask_matches_hand_computed_mlp() {
    let cfg = ModelConfig {
        mask_input: MaskInput::Raw,
        ..tiny_config()
    };
    let m = FetModel::new(cfg.clone(), &[3, 4], 3, 5).unwrap();
    let party = &m.parties[1];
    let mlp = party.mask_mlp.as_ref().unwrap();
    let keys = randn(&[2, cfg.num_neighbors, cfg.key_dims], &mut rng(3));
    let mut t = Tape::new();
    let p = party.params.bind(&mut t);
    let pe = party.pe.forward(&mut t, &p, &keys).unwrap();
    let mask = party.dynamic_mask(&mut t, &p, &keys, pe, MaskInput::Raw).unwrap().unwrap();
    assert_eq!(t.shape(mask), &[2, cfg.num_neighbors]);
    let got = t.value(mask).clone();

    for (r, key) in keys.data().chunks(cfg.key_dims).enumerate() {
        let mut x = key.to_vec();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let w = &party.params.get(layer.w).value;
            let b = &party.params.get(layer.b).value;
            let mut y: Vec<f64> = (0..layer.out)
                .map(|j| (0..layer.inp).map(|i| x[i] * w.data()[i * layer.out + j]).sum::<f64>() + b.data()[j])
                .collect();
            if li + 1 < mlp.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        assert!((got.data()[r] - x[0]).abs() < 1e-12);
    }
}

#[test]
fn pe_average_is_elementwise_mean() {
    let mut m = FetModel::new(multi_config(3), &dims(3), 3, 1).unwrap();
    common::jitter(&mut m, 4);
    let before: Vec<Vec<Tensor>> = m.parties.iter().map(|p| p.pe_params()).collect();
    m.average_pe().unwrap();
    for j in 0..before[0].len() {
        for e in 0..before[0][j].numel() {
            let mean = before.iter().map(|l| l[j].data()[e]).sum::<f64>() / before.len() as f64;
            for p in &m.parties {
                assert!((p.pe_params()[j].data()[e] - mean).abs() < 1e-15);
            }
        }
    }
    assert!(pe_average(&[]).is_err());
    assert!(pe_average(&[vec![Tensor::zeros(&[2])], vec![Tensor::zeros(&[3])]]).is_err());
}

#[test]
fn dropout_drops_each_party_at_the_stated_rate() {
    let (k, rate, trials) = (10, 0.5, 10_000);
    let mut r = rng(11);
    let mut survived = vec![0usize; k];
    for _ in 0..trials {
        let keep = model::secondary_survivors(k, rate, true, &mut r).unwrap();
        assert_eq!(keep.len(), 5);
        for i in keep {
            survived[i] += 1;
        }
    }
    for (i, &s) in survived.iter().enumerate() {
        assert!((4850..=5150).contains(&s), "party {i} survived {s} times");
    }
    // Nothing is dropped at evaluation time.
    assert_eq!(model::secondary_survivors(k, rate, false, &mut r).unwrap(), (0..k).collect::<Vec<_>>());
}

#[test]
fn masked_record_has_no_influence() {
    let cfg = multi_config(2);
    let d = dims(2);
    let mut m = FetModel::new(cfg.clone(), &d, 3, 2).unwrap();
    common::jitter(&mut m, 8);
    let batch = random_batch(&cfg, &d, 3, 6);
    let (b, kn) = (3, cfg.num_neighbors);
    let mut extra = vec![Tensor::zeros(&[b, kn]); 2];
    for e in &mut extra {
        e.data_mut()[1] = -1e9;
    }
    let privacy = PrivacySpec::default();
    let ctx = ForwardCtx {
        extra_mask: Some(&extra),
        ..ForwardCtx::eval(&privacy)
    };
    let before = m.predict(&batch, &ctx).unwrap();
    let mut moved = batch.clone();
    for p in &mut moved.parties {
        let w = p.features.last_dim();
        for v in &mut p.features.data_mut()[w..2 * w] {
            *v += 5.0;
        }
        let dk = cfg.key_dims;
        for v in &mut p.keys.data_mut()[dk..2 * dk] {
            *v -= 3.0;
        }
    }
    let after = m.predict(&moved, &ctx).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-12, "{}", before.max_abs_diff(&after));

    // Without the mask the same change is visible.
    let plain = ForwardCtx::eval(&privacy);
    assert!(m.predict(&batch, &plain).unwrap().max_abs_diff(&m.predict(&moved, &plain).unwrap()) > 1e-6);
}

#[test]
fn neighbor_order_does_not_matter() {
    let cfg = ModelConfig {
        mask_input: MaskInput::Encoded,
        ..multi_config(2)
    };
    let d = dims(2);
    let mut m = FetModel::new(cfg.clone(), &d, 3, 3).unwrap();
    common::jitter(&mut m, 9);
    let batch = random_batch(&cfg, &d, 2, 7);
    let perm = [2, 0, 1];
    let mut shuffled = batch.clone();
    for p in &mut shuffled.parties {
        for t in [&mut p.features, &mut p.keys] {
            let s = t.shape().to_vec();
            let w = s[2];
            let old = t.clone();
            for bi in 0..s[0] {
                for (to, &from) in perm.iter().enumerate() {
                    let dst = (bi * s[1] + to) * w;
                    let src = (bi * s[1] + from) * w;
                    t.data_mut()[dst..dst + w].copy_from_slice(&old.data()[src..src + w]);
                }
            }
        }
    }
    let privacy = PrivacySpec::default();
    let ctx = ForwardCtx::eval(&privacy);
    let a = m.predict(&batch, &ctx).unwrap();
    let b = m.predict(&shuffled, &ctx).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn concat_stacks_hidden_axis() {
    let mut r = rng(5);
    let parts: Vec<Tensor> = (0..3).map(|_| randn(&[2, 3, 4], &mut r)).collect();
    let mut t = Tape::new();
    let vars: Vec<_> = parts.iter().map(|p| t.constant(p.clone())).collect();
    let out = aggregate_concat(&mut t, &vars).unwrap();
    assert_eq!(t.shape(out), &[2, 3, 12]);
    let v = t.value(out);
    for row in 0..6 {
        for (pi, p) in parts.iter().enumerate() {
            assert_eq!(&v.data()[row * 12 + pi * 4..row * 12 + pi * 4 + 4], &p.data()[row * 4..row * 4 + 4]);
        }
    }
}

#[test]
fn concat_model_has_wider_memory() {
    let cfg = ModelConfig {
        aggregator_mode: AggregatorMode::Concat,
        ..multi_config(3)
    };
    let d = dims(3);
    let m = FetModel::new(cfg.clone(), &d, 2, 0).unwrap();
    let batch = random_batch(&cfg, &d, 4, 1);
    let privacy = PrivacySpec::default();
    let out = m.predict(&batch, &ForwardCtx::eval(&privacy)).unwrap();
    assert_eq!(out.shape(), &[4, 2]);
    let norm = &m.parties[0].decoder.as_ref().unwrap().memory_norm;
    assert_eq!(m.parties[0].params.get(norm.gain).value.shape(), &[3 * cfg.hidden_size]);
}

#[test]
fn identical_parties_make_dropout_invisible() {
    let cfg = ModelConfig {
        party_dropout: 0.5,
        ..multi_config(4)
    };
    let d = vec![3; 5];
    let mut m = FetModel::new(cfg.clone(), &d, 3, 4).unwrap();
    common::jitter(&mut m, 10);
    for i in 2..5 {
        m.parties[i] = m.parties[1].clone();
    }
    let mut batch = random_batch(&cfg, &d, 3, 2);
    for i in 1..4 {
        batch.parties[i] = batch.parties[0].clone();
    }
    let privacy = PrivacySpec::default();
    let eval = m.predict(&batch, &ForwardCtx::eval(&privacy)).unwrap();
    for step in 0..5 {
        let ctx = ForwardCtx {
            training: true,
            step,
            ..ForwardCtx::eval(&privacy)
        };
        let mut t = Tape::new();
        let out = m.forward(&mut t, &batch, &ctx).unwrap();
        assert_eq!(out.active.len(), 2);
        assert!(t.value(out.prediction).max_abs_diff(&eval) < 1e-12);
    }
}

#[test]
fn single_party_mean_equals_concat() {
    let cfg = multi_config(1);
    let concat = ModelConfig {
        aggregator_mode: AggregatorMode::Concat,
        ..cfg.clone()
    };
    let a = FetModel::new(cfg.clone(), &[3, 4], 3, 12).unwrap();
    let b = FetModel::new(concat, &[3, 4], 3, 12).unwrap();
    let batch = random_batch(&cfg, &[3, 4], 5, 3);
    let privacy = PrivacySpec::default();
    let ctx = ForwardCtx::eval(&privacy);
    assert!(a.predict(&batch, &ctx).unwrap().max_abs_diff(&b.predict(&batch, &ctx).unwrap()) < 1e-15);
}

#[test]
fn full_dropout_keeps_primary_path() {
    let cfg = ModelConfig {
        party_dropout: 1.0,
        ..multi_config(2)
    };
    let d = dims(2);
    let m = FetModel::new(cfg.clone(), &d, 3, 6).unwrap();
    let batch = random_batch(&cfg, &d, 3, 4);
    let privacy = PrivacySpec::default();
    let ctx = ForwardCtx {
        training: true,
        ..ForwardCtx::eval(&privacy)
    };
    let mut t = Tape::new();
    let out = m.forward(&mut t, &batch, &ctx).unwrap();
    assert!(out.active.is_empty());
    assert_eq!(out.upload_bytes, 0);
    assert!(t.value(out.prediction).is_finite());
    // Secondary inputs are irrelevant when every secondary party is dropped.
    let mut other = batch.clone();
    other.parties[0].features = other.parties[0].features.map(|x| x * 3.0 + 1.0);
    let mut t2 = Tape::new();
    let out2 = m.forward(&mut t2, &other, &ctx).unwrap();
    assert_eq!(t.value(out.prediction), t2.value(out2.prediction));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = multi_config(2);
    let d = dims(2);
    let mut m = FetModel::new(cfg.clone(), &d, 3, 7).unwrap();
    common::jitter(&mut m, 1);
    let back = FetModel::from_checkpoint(&m.checkpoint()).unwrap();
    let batch = random_batch(&cfg, &d, 4, 9);
    let privacy = PrivacySpec::default();
    let ctx = ForwardCtx::eval(&privacy);
    assert_eq!(m.predict(&batch, &ctx).unwrap(), back.predict(&batch, &ctx).unwrap());
}

#[test]
fn shape_errors_are_reported() {
    let cfg = multi_config(2);
    let d = dims(2);
    let m = FetModel::new(cfg.clone(), &d, 3, 7).unwrap();
    let mut batch = random_batch(&cfg, &d, 2, 9);
    batch.parties.pop();
    let privacy = PrivacySpec::default();
    assert!(m.predict(&batch, &ForwardCtx::eval(&privacy)).is_err());
    assert!(FetModel::new(cfg, &[3, 4], 3, 0).is_err());
}
