//! SplitAvg: norm-clipped party representations averaged under secure
//! summation with distributed Gaussian noise.
//!
//! Each secondary party clips every sample of its representation to L2 norm
//! `C/k`, so the sum over `k` parties is bounded by `C`. Each of the
//! `k_active` participating parties adds noise with per-coordinate variance
//! `C²σ²/k_active`, making the noise in the securely computed sum exactly
//! `N(0, C²σ²)`. The aggregator divides by the active count.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySpec {
    pub enabled: bool,
    /// Target ε; only used for budget caps and reporting.
    pub epsilon: f64,
    pub delta: f64,
    /// Noise multiplier σ.
    pub noise_multiplier: f64,
    /// Clipping threshold C on the aggregate.
    pub clip_norm: f64,
    /// Secondary subsampling rate q.
    pub subsample_rate: f64,
    /// Route the aggregation through the secret-sharing simulation.
    pub use_mpc: bool,
    /// Fractional bits of the fixed-point encoding under MPC.
    pub frac_bits: u32,
    /// Add noise to representations at evaluation time as well.
    pub noise_at_inference: bool,
    /// Halt training once ε exceeds this value.
    pub epsilon_cap: Option<f64>,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 1.0,
            delta: 1e-5,
            noise_multiplier: 0.0,
            clip_norm: 1.0,
            subsample_rate: 1.0,
            use_mpc: false,
            frac_bits: mpc::DEFAULT_FRAC_BITS,
            noise_at_inference: true,
            epsilon_cap: None,
        }
    }
}

impl PrivacySpec {
    /// Checks these settings against the linkage it will be used with: `candidates`
    /// records per secondary party and `neighbors` links per primary record.
    pub fn validate(&self, candidates: usize, neighbors: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.subsample_rate > 0.0 && self.subsample_rate <= 1.0) {
            problems.push(format!("subsample_rate {} outside (0, 1]", self.subsample_rate));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            problems.push(format!("delta {} outside (0, 1)", self.delta));
        }
        if self.epsilon < 0.0 {
            problems.push(format!("epsilon {} is negative", self.epsilon));
        }
        if self.noise_multiplier < 0.0 {
            problems.push(format!("noise_multiplier {} is negative", self.noise_multiplier));
        }
        if self.enabled && !(self.noise_multiplier > 0.0 && self.clip_norm > 0.0) {
            problems.push("privacy enabled requires noise_multiplier > 0 and clip_norm > 0".into());
        }
        let sampled = (self.subsample_rate * candidates as f64).floor() as usize;
        if sampled < neighbors {
            problems.push(format!(
                "subsample of {sampled} records cannot supply {neighbors} neighbors"
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Per-party clipping bound `C/k`.
    pub fn party_bound(&self, num_parties: usize) -> f64 {
        clip_bound(self.clip_norm, num_parties)
    }

    /// Per-coordinate standard deviation each active party contributes.
    pub fn party_noise_std(&self, active: usize) -> f64 {
        party_noise_std(self.clip_norm, self.noise_multiplier, active)
    }
}

/// Relative slack taken off `C/k` so that rounding in the sum of `k`
/// clipped representations cannot carry its norm past `C`.
pub const CLIP_SLACK: f64 = 1e-12;

pub fn clip_bound(clip_norm: f64, num_parties: usize) -> f64 {
    clip_norm / num_parties.max(1) as f64 * (1.0 - CLIP_SLACK)
}

/// `√(C²σ²/k_active)`, so the sum of the active parties' noise has
/// variance `C²σ²` per coordinate.
pub fn party_noise_std(clip_norm: f64, sigma: f64, active: usize) -> f64 {
    clip_norm * sigma / (active.max(1) as f64).sqrt()
}

/// Scales each sample (leading axis) of `r` to flattened L2 norm at most
/// `C/k`; samples already inside the ball are returned unchanged.
pub fn clip_representation(r: &Tensor, clip_norm: f64, num_parties: usize) -> Result<Tensor> {
    if !(clip_norm > 0.0) || num_parties == 0 {
        return Err(Error::contract(format!(
            "clipping needs C > 0 and k ≥ 1, got C={clip_norm}, k={num_parties}"
        )));
    }
    let bound = clip_bound(clip_norm, num_parties);
    let width = r.row_width();
    let mut out = r.clone();
    for row in out.data_mut().chunks_exact_mut(width.max(1)) {
        Tensor::clip_slice(row, bound);
    }
    Ok(out)
}

/// One party's Gaussian noise draw shaped like its representation.
pub fn draw_noise(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

/// How the aggregate is computed.
#[derive(Clone, Copy, Debug)]
pub enum AggregationBackend {
    /// Exact floating-point sum.
    Plaintext,
    /// Fixed-point secret sharing; shares for party `i` come from the
    /// stream `(seed, Shares, round, i)`.
    Mpc { frac_bits: u32, seed: u64, round: u64 },
}

#[derive(Clone, Debug)]
pub struct Aggregate {
    /// `Σ clipped + Σ noise` over active parties: the only value the
    /// aggregator learns.
    pub noisy_sum: Tensor,
    /// `noisy_sum / active_count`, the dropout-corrected mean.
    pub mean: Tensor,
    pub active_count: usize,
}

/// Averages the clipped representations of the active parties together with
/// their noise draws. `noise` is either empty (no noise) or one tensor per
/// input.
pub fn secure_aggregate(
    clipped: &[Tensor],
    noise: &[Tensor],
    backend: AggregationBackend,
) -> Result<Aggregate> {
    let active_count = clipped.len();
    if active_count == 0 {
        return Err(Error::contract("secure aggregation with zero active parties"));
    }
    if !noise.is_empty() && noise.len() != active_count {
        return Err(Error::contract(format!(
            "{} noise draws for {active_count} parties",
            noise.len()
        )));
    }
    let shape = clipped[0].shape().to_vec();
    for t in clipped.iter().chain(noise) {
        if t.shape() != shape.as_slice() {
            return Err(Error::dim(format!("aggregate inputs {:?} vs {shape:?}", t.shape())));
        }
    }
    // Noise is added to each party's plaintext before it is shared.
    let contributions: Vec<Tensor> = if noise.is_empty() {
        clipped.to_vec()
    } else {
        clipped
            .iter()
            .zip(noise)
            .map(|(c, z)| c.zip_map(z, |a, b| a + b))
            .collect::<Result<_>>()?
    };
    let noisy_sum = match backend {
        AggregationBackend::Plaintext => {
            let mut acc = contributions[0].clone();
            for c in &contributions[1..] {
                acc.add_assign(c);
            }
            acc
        }
        AggregationBackend::Mpc {
            frac_bits,
            seed,
            round,
        } => {
            if active_count == 1 {
                // A lone party has nobody to share with; its contribution is
                // still rounded to the ring encoding.
                let enc = mpc::FixedPointVector::encode(contributions[0].data(), frac_bits)?;
                Tensor::new(&shape, enc.decode())?
            } else {
                let views: Vec<&[f64]> = contributions.iter().map(Tensor::data).collect();
                let out = mpc::secure_sum_plaintexts(&views, frac_bits, seed, round, false)?;
                Tensor::new(&shape, out.result.decode())?
            }
        }
    };
    let mean = noisy_sum.scale(1.0 / active_count as f64);
    Ok(Aggregate {
        noisy_sum,
        mean,
        active_count,
    })
}

/// Privacy amplification by subsampling: `(ε, δ) → (qε, qδ)`.
pub fn amplify_by_subsampling(epsilon: f64, delta: f64, q: f64) -> Result<(f64, f64)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("subsample rate {q} outside (0, 1]")));
    }
    Ok((q * epsilon, q * delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(row: &[f64]) -> f64 {
        row.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn clip_large_sample_to_half() {
        let r = Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap();
        let c = clip_representation(&r, 1.0, 2).unwrap();
        assert!((norm(c.data()) - 0.5).abs() < 1e-12);
        assert!((c.data()[0] / c.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_sample() {
        let r = Tensor::new(&[1, 2], vec![0.18, 0.24]).unwrap();
        assert_eq!(clip_representation(&r, 1.0, 2).unwrap(), r);
    }

    #[test]
    fn mean_of_equal_and_opposite() {
        let v = Tensor::new(&[1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let agg = secure_aggregate(&[v.clone(), v.clone()], &[], AggregationBackend::Plaintext).unwrap();
        assert_eq!(agg.mean, v);
        let neg = v.scale(-1.0);
        let agg = secure_aggregate(&[v, neg], &[], AggregationBackend::Plaintext).unwrap();
        assert!(agg.mean.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_active_parties_is_an_error() {
        assert!(matches!(
            secure_aggregate(&[], &[], AggregationBackend::Plaintext),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn amplification() {
        let (e, d) = amplify_by_subsampling(2.0, 1e-5, 0.5).unwrap();
        assert_eq!(e, 1.0);
        assert!((d - 5e-6).abs() < 1e-20);
        assert_eq!(amplify_by_subsampling(0.7, 1e-6, 1.0).unwrap(), (0.7, 1e-6));
        assert!(amplify_by_subsampling(1.0, 1e-5, 0.0).is_err());
        assert!(amplify_by_subsampling(1.0, 1e-5, 1.5).is_err());
    }

    #[test]
    fn validate_flags_every_problem() {
        let privacy = PrivacySpec {
            enabled: true,
            noise_multiplier: 0.0,
            subsample_rate: 0.01,
            ..PrivacySpec::default()
        };
        match privacy.validate(100, 5) {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
