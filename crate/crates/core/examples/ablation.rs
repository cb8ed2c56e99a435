//! A miniature party-dropout sweep on synthetic data, printed as CSV.

use fetsim::experiments::{run_ablation, AblationSuite, Experiment, TrainConfig};
use fetsim::linkage::{RawTable, SynthConfig};
use fetsim::model::ModelConfig;
use fetsim::splitavg::PrivacySpec;
use fetsim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fetsim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (600, 12);
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Tensor::new(&[n, d], data)?;
    let labels = (0..n)
        .map(|i| {
            let r = features.row(i);
            f64::from(r[0] + r[5] + r[9] > 0.0)
        })
        .collect();
    let raw = RawTable {
        feature_names: (0..d).map(|i| format!("f{i}")).collect(),
        features,
        labels,
    };
    let base = Experiment {
        synth: SynthConfig {
            parties: 4,
            key_dims: 2,
            key_noise: 0.0,
            ..SynthConfig::default()
        },
        model: ModelConfig {
            hidden_size: 16,
            num_heads: 2,
            num_blocks: 1,
            ffn_size: 32,
            num_neighbors: 3,
            num_parties: 3,
            key_dims: 2,
            mask_hidden: 16,
            ..ModelConfig::default()
        },
        privacy: PrivacySpec::default(),
        train: TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            ..TrainConfig::default()
        },
    };
    let rows = run_ablation(AblationSuite::PartyDropout, &[0.0, 0.34, 0.67], &base, &raw, &[0, 1], 1)?;
    println!("suite,value,model,runs,mean,std");
    for r in rows {
        println!("{},{},{},{},{:.4},{:.4}", r.suite, r.value, r.model, r.runs, r.mean, r.std);
    }
    Ok(())
}
