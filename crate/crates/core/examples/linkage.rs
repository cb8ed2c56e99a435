//! Splits the bundled digits into three fuzzy parties and measures how often
//! the true partner record is among the K nearest keys.

use fetsim::experiments::Federation;
use fetsim::linkage::{load_raw_table, synthesize, SynthConfig};
use std::path::Path;

fn main() -> fetsim::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist_5k.csv.gz");
    let raw = load_raw_table(&path, None, Some(255.0))?;
    for noise in [0.0, 0.02, 0.05, 0.1] {
        let synth = SynthConfig {
            parties: 3,
            key_noise: noise,
            ..SynthConfig::default()
        };
        let fed = Federation::new(synthesize(&raw, &synth)?)?;
        let links = fed.link_all(10)?;
        let (mut top1, mut top10, mut total) = (0, 0, 0);
        for (party, link) in fed.secondaries.iter().zip(&links) {
            for r in 0..link.rows {
                let want = fed.primary.row_ids[r];
                let pos = link.row(r).iter().position(|&j| party.row_ids[j] == want);
                top1 += usize::from(pos == Some(0));
                top10 += usize::from(pos.is_some());
                total += 1;
            }
        }
        println!(
            "key noise {noise:<5} top-1 {:5.1}%  top-10 {:5.1}%",
            100.0 * top1 as f64 / total as f64,
            100.0 * top10 as f64 / total as f64
        );
    }
    Ok(())
}
