//! The Federated Transformer.
//!
//! Every party embeds its records, adds a positional encoding of their
//! fuzzy keys and runs a stack of encoder blocks. Secondary parties encode
//! the `K` records linked to each primary record; their representations are
//! clipped, passed through party dropout and averaged under SplitAvg. The
//! primary party's representation (sequence length one) then cross-attends
//! over the aggregated sequence in its decoder, with a learned per-record
//! mask added to the attention logits.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linkage::{LinkedBatch, Role};
use crate::nn::{DecoderBlock, EncoderBlock, LayerNorm, Linear, Mlp};
use crate::optim::ParamSet;
use crate::rng::{self, Purpose};
use crate::splitavg::{self, AggregationBackend, PrivacySpec};
use crate::tensor::Tensor;

/// Prefix shared by every positional-encoding parameter.
pub const PE_PREFIX: &str = "pe.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    SumAvg,
    Concat,
}

/// What the mask MLP sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInput {
    /// The positional encoding of the record's key.
    Encoded,
    /// The raw key.
    Raw,
    /// All `K` raw keys of the record's neighborhood at once, one logit per
    /// record out.
    Neighborhood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Linked records per primary record (`K`).
    pub num_neighbors: usize,
    /// Number of secondary parties (`k`).
    pub num_parties: usize,
    pub key_dims: usize,
    /// Fraction `r_d` of secondary parties dropped per training step.
    pub party_dropout: f64,
    /// Average positional-encoding layers every this many epochs (0 = never).
    pub pe_avg_frequency: usize,
    pub aggregator_mode: AggregatorMode,
    pub ffn_size: usize,
    pub pe_min_freq: f64,
    pub pe_max_freq: f64,
    pub dynamic_mask: bool,
    pub mask_input: MaskInput,
    pub mask_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            num_heads: 4,
            num_blocks: 6,
            num_neighbors: 10,
            num_parties: 1,
            key_dims: 4,
            party_dropout: 0.0,
            pe_avg_frequency: 0,
            aggregator_mode: AggregatorMode::SumAvg,
            ffn_size: 128,
            pe_min_freq: 1.0,
            pe_max_freq: 1e4,
            dynamic_mask: true,
            mask_input: MaskInput::Encoded,
            mask_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.hidden_size == 0 || self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            p.push(format!(
                "hidden_size {} must be a positive multiple of num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        for (name, v) in [
            ("num_blocks", self.num_blocks),
            ("num_neighbors", self.num_neighbors),
            ("num_parties", self.num_parties),
            ("key_dims", self.key_dims),
            ("ffn_size", self.ffn_size),
            ("mask_hidden", self.mask_hidden),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.party_dropout) {
            p.push(format!("party_dropout {} outside [0, 1]", self.party_dropout));
        }
        if !(self.pe_min_freq > 0.0 && self.pe_max_freq >= self.pe_min_freq) {
            p.push(format!(
                "pe frequencies must satisfy 0 < pe_min_freq ≤ pe_max_freq, got {} and {}",
                self.pe_min_freq, self.pe_max_freq
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// Fixed sinusoids of every key coordinate followed by a learnable linear
/// map; the encoding is `S(key) + W·S(key) + b` with `S` truncated to `H`.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub proj: Linear,
    pub freqs: Vec<f64>,
    pub key_dims: usize,
    pub hidden: usize,
}

impl PositionalEncoding {
    pub fn new(ps: &mut ParamSet, key_dims: usize, hidden: usize, min_freq: f64, max_freq: f64) -> Self {
        let n = hidden.div_ceil(2 * key_dims);
        let freqs = log_spaced(min_freq, max_freq, n);
        let w = ps.add(format!("{PE_PREFIX}proj.w"), Tensor::zeros(&[hidden, hidden]));
        let b = ps.add(format!("{PE_PREFIX}proj.b"), Tensor::zeros(&[hidden]));
        Self {
            proj: Linear {
                w,
                b,
                inp: hidden,
                out: hidden,
            },
            freqs,
            key_dims,
            hidden,
        }
    }

    /// The fixed part `S(key)` for keys of shape `[..., d_k]`.
    ///
    /// Coordinate `j` contributes `sin(f·x_j), cos(f·x_j)` for every
    /// frequency `f`, ordered by coordinate, then frequency.
    pub fn base(&self, keys: &Tensor) -> Result<Tensor> {
        if keys.last_dim() != self.key_dims {
            return Err(Error::dim(format!(
                "keys have {} dims, encoding expects {}",
                keys.last_dim(),
                self.key_dims
            )));
        }
        let rows = keys.numel() / self.key_dims;
        let mut out = Vec::with_capacity(rows * self.hidden);
        for key in keys.data().chunks_exact(self.key_dims) {
            let start = out.len();
            'fill: for &x in key {
                for &f in &self.freqs {
                    for v in [(f * x).sin(), (f * x).cos()] {
                        if out.len() - start == self.hidden {
                            break 'fill;
                        }
                        out.push(v);
                    }
                }
            }
        }
        let mut shape = keys.shape().to_vec();
        *shape.last_mut().unwrap() = self.hidden;
        Tensor::new(&shape, out)
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], keys: &Tensor) -> Result<Var> {
        let s = t.constant(self.base(keys)?);
        let proj = self.proj.forward(t, p, s)?;
        t.add(s, proj)
    }
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Elementwise mean of structurally identical parameter lists.
pub fn pe_average(layers: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = layers.first().ok_or_else(|| Error::contract("averaging zero layers"))?;
    for (i, l) in layers.iter().enumerate() {
        if l.len() != first.len() || l.iter().zip(first).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::contract(format!("layer {i} differs in structure from layer 0")));
        }
    }
    let n = layers.len() as f64;
    Ok((0..first.len())
        .map(|j| {
            let mut acc = Tensor::zeros(first[j].shape());
            for l in layers {
                acc.add_assign(&l[j]);
            }
            acc.scale(1.0 / n)
        })
        .collect())
}

/// Number of parties dropped out of `k` at rate `r_d`: `round(r_d·k)`.
pub fn dropped_count(k: usize, rate: f64) -> usize {
    ((rate * k as f64).round() as usize).min(k)
}

/// Indices (ascending) of the secondary parties that survive dropout this
/// step. May be empty at `r_d = 1`; the primary party always survives.
pub fn secondary_survivors(k: usize, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("party dropout rate {rate} outside [0, 1]")));
    }
    let drop = if training { dropped_count(k, rate) } else { 0 };
    if drop == 0 {
        return Ok((0..k).collect());
    }
    let mut keep = index::sample(rng, k, k - drop).into_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Like [`secondary_survivors`], but at least one of the `k` parties must
/// survive.
pub fn dropout_survivors(k: usize, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::contract("party dropout over zero parties"));
    }
    let keep = secondary_survivors(k, rate, training, rng)?;
    if keep.is_empty() {
        return Err(Error::contract(format!("party dropout rate {rate} drops all {k} parties")));
    }
    Ok(keep)
}

/// Zeroes out `round(r_d·k)` of `reps` during training. Returns the
/// survivors in party order and the active count.
pub fn party_dropout<T>(reps: Vec<T>, rate: f64, training: bool, rng: &mut impl Rng) -> Result<(Vec<T>, usize)> {
    let keep = dropout_survivors(reps.len(), rate, training, rng)?;
    let survivors: Vec<T> = reps
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.binary_search(i).is_ok())
        .map(|(_, r)| r)
        .collect();
    let n = survivors.len();
    Ok((survivors, n))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub memory_norm: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

/// One party's share of the model.
#[derive(Clone, Debug)]
pub struct PartyModel {
    pub role: Role,
    pub params: ParamSet,
    pub embed: Linear,
    pub pe: PositionalEncoding,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub mask_mlp: Option<Mlp>,
    pub decoder: Option<Decoder>,
}

impl PartyModel {
    fn new(cfg: &ModelConfig, role: Role, input_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let h = cfg.hidden_size;
        let mut ps = ParamSet::new();
        let embed = Linear::new(&mut ps, "embed", input_dim, h, rng);
        let pe = PositionalEncoding::new(&mut ps, cfg.key_dims, h, cfg.pe_min_freq, cfg.pe_max_freq);
        let blocks = (0..cfg.num_blocks)
            .map(|i| EncoderBlock::new(&mut ps, &format!("enc.{i}"), h, cfg.num_heads, cfg.ffn_size, rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(&mut ps, "enc.norm", h);
        let mask_mlp = (role == Role::Secondary && cfg.dynamic_mask).then(|| {
            let (inp, out) = match cfg.mask_input {
                MaskInput::Encoded => (h, 1),
                MaskInput::Raw => (cfg.key_dims, 1),
                MaskInput::Neighborhood => (cfg.key_dims * cfg.num_neighbors, cfg.num_neighbors),
            };
            Mlp::new(&mut ps, "mask", &[inp, cfg.mask_hidden, cfg.mask_hidden, out], rng)
        });
        let decoder = if role == Role::Primary {
            let mem = match cfg.aggregator_mode {
                AggregatorMode::SumAvg => h,
                AggregatorMode::Concat => h * cfg.num_parties,
            };
            let blocks = (0..cfg.num_blocks)
                .map(|i| DecoderBlock::new(&mut ps, &format!("dec.{i}"), h, mem, cfg.num_heads, cfg.ffn_size, rng))
                .collect::<Result<_>>()?;
            Some(Decoder {
                memory_norm: LayerNorm::new(&mut ps, "dec.memory_norm", mem),
                blocks,
                head_norm: LayerNorm::new(&mut ps, "dec.head_norm", h),
                head: Linear::new(&mut ps, "dec.head", h, out_dim, rng),
            })
        } else {
            None
        };
        Ok(Self {
            role,
            params: ps,
            embed,
            pe,
            blocks,
            final_norm,
            mask_mlp,
            decoder,
        })
    }

    fn pe_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(PE_PREFIX))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn pe_params(&self) -> Vec<Tensor> {
        self.pe_indices().into_iter().map(|i| self.params.get(i).value.clone()).collect()
    }

    fn set_pe_params(&mut self, values: &[Tensor]) {
        for (i, v) in self.pe_indices().into_iter().zip(values) {
            self.params.get_mut(i).value = v.clone();
        }
    }

    /// Learned mask logits `[B, L]` for a secondary party.
    pub fn dynamic_mask(&self, t: &mut Tape, p: &[Var], keys: &Tensor, encoded: Var, input: MaskInput) -> Result<Option<Var>> {
        let Some(mlp) = &self.mask_mlp else {
            return Ok(None);
        };
        let s = keys.shape();
        let x = match input {
            MaskInput::Encoded => encoded,
            MaskInput::Raw => t.constant(keys.clone()),
            MaskInput::Neighborhood => t.constant(keys.clone().reshape(&[s[0], 1, s[1] * s[2]])?),
        };
        let m = mlp.forward(t, p, x)?;
        if input == MaskInput::Neighborhood {
            return Ok(Some(t.reshape(m, &[s[0], s[1]])?));
        }
        let s = t.shape(m).to_vec();
        Ok(Some(t.reshape(m, &s[..s.len() - 1])?))
    }

    /// Encodes `[B, L, d_f]` features with keys `[B, L, d_k]` into
    /// `[B, L, H]`; `key_bias` masks attention to individual records.
    pub fn encode(&self, t: &mut Tape, p: &[Var], features: &Tensor, pe: Var, key_bias: Option<Var>) -> Result<Var> {
        let x = t.constant(features.clone());
        let x = self.embed.forward(t, p, x)?;
        let mut h = t.add(x, pe)?;
        for blk in &self.blocks {
            h = blk.forward(t, p, h, key_bias)?;
        }
        self.final_norm.forward(t, p, h)
    }
}

/// Per-call settings of [`FetModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub privacy: &'a PrivacySpec,
    /// Draw DP noise (only meaningful with privacy enabled).
    pub add_noise: bool,
    pub seed: u64,
    /// Step counter, used to derive the noise, dropout and share streams.
    pub step: u64,
    /// Optional extra `[B, K]` logits per secondary party, added to the
    /// learned mask (e.g. `-1e9` to exclude a record outright).
    pub extra_mask: Option<&'a [Tensor]>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(privacy: &'a PrivacySpec) -> Self {
        Self {
            training: false,
            privacy,
            add_noise: false,
            seed: 0,
            step: 0,
            extra_mask: None,
        }
    }
}

pub struct ForwardOutput {
    /// `[B, out]`
    pub prediction: Var,
    /// Tape leaves for every party's parameters, in party order.
    pub param_vars: Vec<Vec<Var>>,
    /// Secondary parties (0-based among secondaries) that took part.
    pub active: Vec<usize>,
    /// Bytes of representations sent to the aggregator.
    pub upload_bytes: u64,
}

/// All parties' models: index 0 is the primary party.
#[derive(Clone, Debug)]
pub struct FetModel {
    pub config: ModelConfig,
    pub parties: Vec<PartyModel>,
    pub input_dims: Vec<usize>,
    pub out_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct FetMeta {
    config: ModelConfig,
    input_dims: Vec<usize>,
    out_dim: usize,
}

impl FetModel {
    /// `input_dims[0]` is the primary party's feature width, followed by one
    /// width per secondary party.
    pub fn new(config: ModelConfig, input_dims: &[usize], out_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dims.len() != config.num_parties + 1 {
            return Err(Error::dim(format!(
                "{} input widths for 1 primary + {} secondary parties",
                input_dims.len(),
                config.num_parties
            )));
        }
        let parties = input_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let role = if i == 0 { Role::Primary } else { Role::Secondary };
                let mut r = rng::stream(seed, Purpose::Init, &[i as u64]);
                PartyModel::new(&config, role, d, out_dim, &mut r)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            parties,
            input_dims: input_dims.to_vec(),
            out_dim,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.parties.iter().map(|p| p.params.num_scalars()).sum()
    }

    /// Replaces every party's positional-encoding parameters by their mean.
    pub fn average_pe(&mut self) -> Result<()> {
        let layers: Vec<Vec<Tensor>> = self.parties.iter().map(PartyModel::pe_params).collect();
        let mean = pe_average(&layers)?;
        for p in &mut self.parties {
            p.set_pe_params(&mean);
        }
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, batch: &LinkedBatch, ctx: &ForwardCtx) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let k = cfg.num_parties;
        let b = batch.len();
        let kn = cfg.num_neighbors;
        let h = cfg.hidden_size;
        if batch.parties.len() != k {
            return Err(Error::dim(format!("batch has {} secondary parties, model {k}", batch.parties.len())));
        }
        if batch.primary_features.last_dim() != self.input_dims[0] {
            return Err(Error::dim(format!(
                "primary features have width {}, model expects {}",
                batch.primary_features.last_dim(),
                self.input_dims[0]
            )));
        }
        for (i, lp) in batch.parties.iter().enumerate() {
            if lp.features.shape() != [b, kn, self.input_dims[i + 1]] {
                return Err(Error::dim(format!(
                    "party {} features {:?}, expected [{b}, {kn}, {}]",
                    i + 1,
                    lp.features.shape(),
                    self.input_dims[i + 1]
                )));
            }
        }
        if let Some(extra) = ctx.extra_mask {
            if extra.len() != k || extra.iter().any(|m| m.shape() != [b, kn]) {
                return Err(Error::dim(format!("extra mask must be {k} tensors of shape [{b}, {kn}]")));
            }
        }
        let privacy = ctx.privacy;
        if privacy.enabled && cfg.aggregator_mode == AggregatorMode::Concat {
            return Err(Error::contract("concat aggregation has no privacy analysis; disable privacy"));
        }

        let param_vars: Vec<Vec<Var>> = self.parties.iter().map(|p| p.params.bind(t)).collect();

        // Primary representation, sequence length one.
        let primary = &self.parties[0];
        let pp = &param_vars[0];
        let pe = primary.pe.forward(t, pp, &batch.primary_keys)?;
        let query = primary.encode(t, pp, &batch.primary_features, pe, None)?;

        let active = secondary_survivors(
            k,
            cfg.party_dropout,
            ctx.training,
            &mut rng::stream(ctx.seed, Purpose::PartyDropout, &[ctx.step]),
        )?;

        let mut reps = Vec::with_capacity(active.len());
        let mut masks = Vec::with_capacity(active.len());
        for &i in &active {
            let party = &self.parties[i + 1];
            let pv = &param_vars[i + 1];
            let lp = &batch.parties[i];
            let pe = party.pe.forward(t, pv, &lp.keys)?;
            let mut mask = party.dynamic_mask(t, pv, &lp.keys, pe, cfg.mask_input)?;
            if let Some(extra) = ctx.extra_mask {
                mask = Some(match mask {
                    Some(m) => t.add_const(m, &extra[i])?,
                    None => t.constant(extra[i].clone()),
                });
            }
            reps.push(party.encode(t, pv, &lp.features, pe, mask)?);
            if let Some(m) = mask {
                masks.push(m);
            }
        }
        let n_active = active.len();
        let upload_bytes = (n_active * b * kn * h * std::mem::size_of::<f64>()) as u64;

        let memory = match cfg.aggregator_mode {
            AggregatorMode::SumAvg if active.is_empty() => t.constant(Tensor::zeros(&[b, kn, h])),
            AggregatorMode::SumAvg => self.aggregate(t, &reps, &active, b, ctx)?,
            AggregatorMode::Concat => {
                let mut parts = Vec::with_capacity(k);
                let mut it = reps.iter();
                for i in 0..k {
                    parts.push(if active.contains(&i) {
                        *it.next().unwrap()
                    } else {
                        t.constant(Tensor::zeros(&[b, kn, h]))
                    });
                }
                aggregate_concat(t, &parts)?
            }
        };
        let mask = if masks.is_empty() {
            None
        } else {
            let s = t.sum_list(&masks)?;
            Some(t.scale(s, 1.0 / masks.len() as f64))
        };

        let dec = primary.decoder.as_ref().expect("primary party has a decoder");
        let memory = dec.memory_norm.forward(t, pp, memory)?;
        let mut q = query;
        for blk in &dec.blocks {
            q = blk.forward(t, pp, q, memory, mask)?;
        }
        let q = dec.head_norm.forward(t, pp, q)?;
        let out = dec.head.forward(t, pp, q)?;
        let prediction = t.reshape(out, &[b, self.out_dim])?;
        Ok(ForwardOutput {
            prediction,
            param_vars,
            active,
            upload_bytes,
        })
    }

    /// SplitAvg over the active parties' `[B, K, H]` representations.
    fn aggregate(&self, t: &mut Tape, reps: &[Var], active: &[usize], b: usize, ctx: &ForwardCtx) -> Result<Var> {
        let cfg = &self.config;
        let privacy = ctx.privacy;
        let shape = [b, cfg.num_neighbors, cfg.hidden_size];
        let flat = [b, cfg.num_neighbors * cfg.hidden_size];
        let mut clipped = Vec::with_capacity(reps.len());
        for &r in reps {
            let r = t.reshape(r, &flat)?;
            clipped.push(if privacy.enabled {
                t.clip_rows(r, privacy.party_bound(cfg.num_parties))?
            } else {
                r
            });
        }
        let sum = t.sum_list(&clipped)?;
        let noisy = privacy.enabled && ctx.add_noise && privacy.noise_multiplier > 0.0;
        let noise: Vec<Tensor> = if noisy {
            let std = privacy.party_noise_std(active.len());
            active
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(ctx.seed, Purpose::DpNoise, &[ctx.step, i as u64]);
                    splitavg::draw_noise(&flat, std, &mut r)
                })
                .collect()
        } else {
            Vec::new()
        };
        let offset = if privacy.use_mpc {
            let values: Vec<Tensor> = clipped.iter().map(|&c| t.value(c).clone()).collect();
            let backend = AggregationBackend::Mpc {
                frac_bits: privacy.frac_bits,
                seed: ctx.seed,
                round: ctx.step,
            };
            let agg = splitavg::secure_aggregate(&values, &noise, backend)?;
            Some(agg.noisy_sum.zip_map(t.value(sum), |a, b| a - b)?)
        } else if noisy {
            let mut acc = noise[0].clone();
            for z in &noise[1..] {
                acc.add_assign(z);
            }
            Some(acc)
        } else {
            None
        };
        let sum = match offset {
            Some(o) => t.add_const(sum, &o)?,
            None => sum,
        };
        let mean = t.scale(sum, 1.0 / active.len() as f64);
        t.reshape(mean, &shape)
    }

    /// Predictions `[B, out]` without recording gradients for later use.
    pub fn predict(&self, batch: &LinkedBatch, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut t = Tape::new();
        let out = self.forward(&mut t, batch, ctx)?;
        Ok(t.value(out.prediction).clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = FetMeta {
            config: self.config.clone(),
            input_dims: self.input_dims.clone(),
            out_dim: self.out_dim,
        };
        Checkpoint::new(
            "fet",
            serde_json::to_value(meta).expect("config serializes"),
            self.parties.iter().map(|p| &p.params),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != "fet" {
            return Err(Error::contract(format!("checkpoint holds a `{}` model, not fet", ck.model)));
        }
        let meta: FetMeta = serde_json::from_value(ck.meta.clone())?;
        let mut model = Self::new(meta.config, &meta.input_dims, meta.out_dim, 0)?;
        ck.restore(model.parties.iter_mut().map(|p| &mut p.params))?;
        Ok(model)
    }
}

/// Concatenates `[B, K, H]` representations along the hidden axis.
pub fn aggregate_concat(t: &mut Tape, reps: &[Var]) -> Result<Var> {
    t.concat(reps)
}
