//! Trains the federated transformer on a small fuzzy split of the digits and
//! compares it with the primary party training alone.

use fetsim::experiments::{train_fet_with, train_solo, Federation, TrainConfig};
use fetsim::linkage::{load_raw_table, synthesize, SynthConfig};
use fetsim::model::ModelConfig;
use fetsim::splitavg::PrivacySpec;
use std::path::Path;

fn main() -> fetsim::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist_5k.csv.gz");
    let raw = load_raw_table(&path, None, Some(255.0))?;
    let synth = SynthConfig {
        parties: 3,
        reduce_primary: true,
        ..SynthConfig::default()
    };
    let fed = Federation::new(synthesize(&raw, &synth)?)?;
    let train = TrainConfig {
        epochs: 4,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        hidden_size: 32,
        num_blocks: 1,
        ffn_size: 64,
        mask_hidden: 32,
        num_parties: fed.num_secondaries(),
        pe_max_freq: 3.0,
        ..ModelConfig::default()
    };
    let (fet, _) = train_fet_with(&train, &fed, &model, &PrivacySpec::default(), |e| {
        println!("epoch {:>2}  loss {:.4}  val acc {:.3}", e.epoch, e.train_loss, e.val_metric)
    })?;
    let (solo, _) = train_solo(&train, &fed.primary)?;
    println!("test accuracy: FeT {:.3}, primary alone {:.3}", fet.test_metric, solo.test_metric);
    println!("uploaded {} bytes", fet.upload_bytes);
    Ok(())
}
