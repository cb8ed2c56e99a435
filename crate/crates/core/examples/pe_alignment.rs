//! Shows that the positional encoding of a fuzzy key stays close to the
//! encoding of the exact key for small noise and decorrelates for large.

use fetsim::model::PositionalEncoding;
use fetsim::optim::ParamSet;
use fetsim::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> fetsim::Result<()> {
    let mut ps = ParamSet::new();
    let pe = PositionalEncoding::new(&mut ps, 4, 32, 1.0, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = 500;
    let keys: Vec<f64> = (0..n * 4).map(|_| unit.sample(&mut rng)).collect();
    let exact = pe.base(&Tensor::new(&[n, 4], keys.clone())?)?;
    for noise in [0.01, 0.05, 0.2, 0.5, 1.0, 2.0] {
        let fuzzy: Vec<f64> = keys.iter().map(|k| k + noise * unit.sample(&mut rng)).collect();
        let enc = pe.base(&Tensor::new(&[n, 4], fuzzy)?)?;
        let mean = (0..n).map(|i| cosine(exact.row(i), enc.row(i))).sum::<f64>() / n as f64;
        println!("key noise {noise:<5} mean cosine {mean:.4}");
    }
    Ok(())
}
