//! Simulated secure summation with additive secret sharing over `Z/2^64`.
//!
//! Each party encodes its vector in fixed point, splits it into one share per
//! party, and sends share `j` to party `j`. Every party adds the shares it
//! received and forwards that partial sum to the aggregator, which learns
//! only the total. The network is simulated in-process; messages can be
//! recorded into a [`Transcript`] and serialized with the wire layout
//! documented on [`Message`].

use rand::RngCore;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_FRAC_BITS: u32 = 24;

/// Receiver id used for messages addressed to the aggregator.
pub const AGGREGATOR: u32 = u32::MAX;

/// A vector of ring elements carrying `frac_bits` fractional bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointVector {
    pub values: Vec<u64>,
    pub frac_bits: u32,
}

impl FixedPointVector {
    /// Rounds each value to the nearest multiple of `2^-frac_bits`.
    ///
    /// Magnitudes must stay below `2^(63 - frac_bits)` so that sums of a
    /// moderate number of parties cannot wrap.
    pub fn encode(x: &[f64], frac_bits: u32) -> Result<Self> {
        if frac_bits >= 62 {
            return Err(Error::contract(format!("{frac_bits} fractional bits leaves no headroom")));
        }
        let scale = (frac_bits as f64).exp2();
        let limit = ((63 - frac_bits) as f64).exp2();
        let values = x
            .iter()
            .map(|&v| {
                if !v.is_finite() || v.abs() >= limit {
                    return Err(Error::numeric(format!(
                        "value {v} outside fixed-point range ±2^{}",
                        63 - frac_bits
                    )));
                }
                Ok((v * scale).round() as i64 as u64)
            })
            .collect::<Result<_>>()?;
        Ok(Self { values, frac_bits })
    }

    pub fn decode(&self) -> Vec<f64> {
        let scale = (-(self.frac_bits as f64)).exp2();
        self.values.iter().map(|&v| v as i64 as f64 * scale).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Additive shares of one party's vector; `shares[j]` is destined for party `j`.
#[derive(Clone, Debug)]
pub struct ShareVector {
    pub owner: usize,
    pub shares: Vec<Vec<u64>>,
    pub frac_bits: u32,
}

impl ShareVector {
    pub fn num_parties(&self) -> usize {
        self.shares.len()
    }

    pub fn len(&self) -> usize {
        self.shares.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of all shares, which is the owner's encoded plaintext.
    pub fn reconstruct(&self) -> FixedPointVector {
        let mut values = vec![0u64; self.len()];
        for s in &self.shares {
            for (acc, &v) in values.iter_mut().zip(s) {
                *acc = acc.wrapping_add(v);
            }
        }
        FixedPointVector {
            values,
            frac_bits: self.frac_bits,
        }
    }
}

/// Splits `x` into `k` shares: `k − 1` uniform ring elements per coordinate
/// and one correction share so that all shares sum to `x` modulo `2^64`.
///
/// The correction share is the owner's own, so every share that leaves the
/// owner is uniformly random.
pub fn share(x: &FixedPointVector, k: usize, owner: usize, rng: &mut impl RngCore) -> Result<ShareVector> {
    if k < 2 {
        return Err(Error::contract(format!("secret sharing needs at least 2 parties, got {k}")));
    }
    if owner >= k {
        return Err(Error::contract(format!("owner {owner} not among {k} parties")));
    }
    let n = x.len();
    let mut shares = vec![Vec::new(); k];
    let mut residual = x.values.clone();
    for (j, s) in shares.iter_mut().enumerate() {
        if j == owner {
            continue;
        }
        let r: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
        for (acc, &v) in residual.iter_mut().zip(&r) {
            *acc = acc.wrapping_sub(v);
        }
        *s = r;
    }
    shares[owner] = residual;
    Ok(ShareVector {
        owner,
        shares,
        frac_bits: x.frac_bits,
    })
}

/// One simulated network message.
///
/// Wire layout, all integers little-endian:
///
/// | offset | size | field                                  |
/// |--------|------|----------------------------------------|
/// | 0      | 8    | round id (`u64`)                       |
/// | 8      | 4    | sender id (`u32`)                      |
/// | 12     | 4    | receiver id (`u32`, `u32::MAX` = aggregator) |
/// | 16     | 8    | vector length `n` (`u64`)              |
/// | 24     | 4    | fractional bits (`u32`)                |
/// | 28     | 8·n  | payload ring elements (`u64` each)     |
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub round: u64,
    pub sender: u32,
    pub receiver: u32,
    pub frac_bits: u32,
    pub payload: Vec<u64>,
}

pub const MESSAGE_HEADER_LEN: usize = 28;

impl Message {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MESSAGE_HEADER_LEN + 8 * self.payload.len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.frac_bits.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MESSAGE_HEADER_LEN {
            return Err(Error::contract("message shorter than header"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let n = u64_at(16) as usize;
        if bytes.len() != MESSAGE_HEADER_LEN + 8 * n {
            return Err(Error::contract(format!(
                "message declares {n} elements but carries {} payload bytes",
                bytes.len() - MESSAGE_HEADER_LEN
            )));
        }
        Ok(Self {
            round: u64_at(0),
            sender: u32_at(8),
            receiver: u32_at(12),
            frac_bits: u32_at(24),
            payload: (0..n).map(|i| u64_at(MESSAGE_HEADER_LEN + 8 * i)).collect(),
        })
    }

    pub fn wire_len(&self) -> usize {
        MESSAGE_HEADER_LEN + 8 * self.payload.len()
    }
}

/// Every message exchanged in a recorded run.
#[derive(Clone, Debug, Default)]
pub struct Transcript {
    pub messages: Vec<Message>,
}

impl Transcript {
    /// Bytes of every payload party `sender` put on the wire.
    pub fn outgoing_payload_bytes(&self, sender: u32) -> Vec<u8> {
        self.messages
            .iter()
            .filter(|m| m.sender == sender)
            .flat_map(|m| m.payload.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(Message::wire_len).sum()
    }
}

/// Incremental secure summation: parties submit their share vectors one at
/// a time, so only `k` partial sums are held in memory.
pub struct SecureSumSession {
    k: usize,
    len: usize,
    frac_bits: u32,
    round: u64,
    partials: Vec<Vec<u64>>,
    submitted: Vec<bool>,
    transcript: Option<Transcript>,
}

impl SecureSumSession {
    pub fn new(k: usize, len: usize, frac_bits: u32, round: u64, record: bool) -> Result<Self> {
        if k < 2 {
            return Err(Error::contract(format!("secure sum needs at least 2 parties, got {k}")));
        }
        Ok(Self {
            k,
            len,
            frac_bits,
            round,
            partials: vec![vec![0u64; len]; k],
            submitted: vec![false; k],
            transcript: record.then(Transcript::default),
        })
    }

    /// Delivers `shares.shares[j]` to party `j` for every `j`.
    pub fn submit(&mut self, shares: &ShareVector) -> Result<()> {
        if shares.num_parties() != self.k || shares.len() != self.len {
            return Err(Error::contract(format!(
                "share vector for {} parties × {} values, session expects {} × {}",
                shares.num_parties(),
                shares.len(),
                self.k,
                self.len
            )));
        }
        if shares.frac_bits != self.frac_bits {
            return Err(Error::contract(format!(
                "fractional bits {} differ from session's {}",
                shares.frac_bits, self.frac_bits
            )));
        }
        if std::mem::replace(&mut self.submitted[shares.owner], true) {
            return Err(Error::contract(format!("party {} submitted twice", shares.owner)));
        }
        for (j, s) in shares.shares.iter().enumerate() {
            for (acc, &v) in self.partials[j].iter_mut().zip(s) {
                *acc = acc.wrapping_add(v);
            }
            if j != shares.owner {
                if let Some(t) = &mut self.transcript {
                    t.messages.push(Message {
                        round: self.round,
                        sender: shares.owner as u32,
                        receiver: j as u32,
                        frac_bits: self.frac_bits,
                        payload: s.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Parties forward their partial sums; the aggregator adds them.
    pub fn finish(mut self) -> Result<SecureSum> {
        if let Some(missing) = self.submitted.iter().position(|&s| !s) {
            return Err(Error::contract(format!("party {missing} never submitted shares")));
        }
        let mut total = vec![0u64; self.len];
        for (j, partial) in self.partials.iter().enumerate() {
            for (acc, &v) in total.iter_mut().zip(partial) {
                *acc = acc.wrapping_add(v);
            }
            if let Some(t) = &mut self.transcript {
                t.messages.push(Message {
                    round: self.round + 1,
                    sender: j as u32,
                    receiver: AGGREGATOR,
                    frac_bits: self.frac_bits,
                    payload: partial.clone(),
                });
            }
        }
        Ok(SecureSum {
            result: FixedPointVector {
                values: total,
                frac_bits: self.frac_bits,
            },
            transcript: self.transcript,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SecureSum {
    pub result: FixedPointVector,
    pub transcript: Option<Transcript>,
}

/// Sums the plaintexts behind one share vector per party.
pub fn secure_sum(inputs: &[ShareVector], record: bool) -> Result<SecureSum> {
    let first = inputs.first().ok_or_else(|| Error::contract("secure sum of no inputs"))?;
    let mut session = SecureSumSession::new(first.num_parties(), first.len(), first.frac_bits, 0, record)?;
    for s in inputs {
        session.submit(s)?;
    }
    session.finish()
}

/// Encodes, shares and securely sums real vectors, one per party. Party `i`
/// draws its shares from the stream `(seed, Shares, round, i)`.
pub fn secure_sum_plaintexts(
    plaintexts: &[&[f64]],
    frac_bits: u32,
    seed: u64,
    round: u64,
    record: bool,
) -> Result<SecureSum> {
    let k = plaintexts.len();
    let len = plaintexts.first().map_or(0, |p| p.len());
    let mut session = SecureSumSession::new(k, len, frac_bits, round, record)?;
    for (i, p) in plaintexts.iter().enumerate() {
        if p.len() != len {
            return Err(Error::contract("plaintext vectors differ in length"));
        }
        let encoded = FixedPointVector::encode(p, frac_bits)?;
        let mut r = rng::stream(seed, Purpose::Shares, &[round, i as u64]);
        session.submit(&share(&encoded, k, i, &mut r)?)?;
    }
    session.finish()
}

/// Outcome of [`transcript_leakage_check`].
#[derive(Clone, Debug)]
pub struct LeakageReport {
    /// Chi-square p-value of each sender's outgoing byte histogram against
    /// the uniform distribution on 256 symbols. `None` for senders with no
    /// outgoing bytes.
    pub uniformity_p_values: Vec<Option<f64>>,
    /// `(message index, coordinate)` pairs where a share equals the sender's
    /// encoded plaintext at the same coordinate.
    pub verbatim_hits: Vec<(usize, usize)>,
    pub alpha: f64,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.verbatim_hits.is_empty()
            && self
                .uniformity_p_values
                .iter()
                .flatten()
                .all(|&p| p > self.alpha)
    }
}

/// Chi-square p-value for `bytes` under the uniform byte distribution.
pub fn byte_uniformity_p_value(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let expected = bytes.len() as f64 / 256.0;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new(255.0).expect("valid degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// Checks a recorded share round for the two leaks an honest-but-curious
/// receiver could exploit: non-uniform share streams and plaintext values
/// sent in the clear. `plaintexts[i]` is party `i`'s encoded input.
pub fn transcript_leakage_check(
    transcript: &Transcript,
    plaintexts: &[FixedPointVector],
    alpha: f64,
) -> LeakageReport {
    let uniformity_p_values = (0..plaintexts.len())
        .map(|i| {
            let bytes: Vec<u8> = transcript
                .messages
                .iter()
                .filter(|m| m.sender == i as u32 && m.receiver != AGGREGATOR)
                .flat_map(|m| m.payload.iter().flat_map(|v| v.to_le_bytes()))
                .collect();
            (!bytes.is_empty()).then(|| byte_uniformity_p_value(&bytes))
        })
        .collect();
    let mut verbatim_hits = Vec::new();
    for (mi, m) in transcript.messages.iter().enumerate() {
        let Some(plain) = plaintexts.get(m.sender as usize) else { continue };
        for (c, (&v, &p)) in m.payload.iter().zip(&plain.values).enumerate() {
            if v == p {
                verbatim_hits.push((mi, c));
            }
        }
    }
    LeakageReport {
        uniformity_p_values,
        verbatim_hits,
        alpha,
    }
}
