//! Training loops, baselines, metrics and ablation sweeps.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::accountant::{AccountantState, AccountingMethod};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linkage::{self, LinkIndex, LinkedBatch, PartyDataset, RawTable, Role, SynthConfig};
use crate::model::{FetModel, ForwardCtx, ModelConfig};
use crate::nn::Mlp;
use crate::optim::{Optimizer, OptimizerKind, ParamSet};
use crate::rng::{self, Purpose};
use crate::splitavg::PrivacySpec;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fet,
    Solo,
    Top1sim,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fet => "fet",
            ModelKind::Solo => "solo",
            ModelKind::Top1sim => "top1sim",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Epochs without validation improvement before stopping (0 = never).
    pub early_stop_patience: usize,
    /// Add DP noise to representations during validation and test.
    pub eval_noise: bool,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub accountant: AccountingMethod,
    /// Hidden widths of the solo baseline.
    pub solo_hidden: Vec<usize>,
    /// Hidden widths of the Top1Sim baseline.
    pub top1sim_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Fet,
            task: Task::Classification,
            epochs: 50,
            batch_size: 8192,
            lr: 1e-3,
            weight_decay: 1e-5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            early_stop_patience: 0,
            eval_noise: false,
            val_fraction: 0.15,
            test_fraction: 0.15,
            accountant: AccountingMethod::Rdp,
            solo_hidden: vec![400, 400],
            top1sim_hidden: vec![200],
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be ≥ 1".into());
        }
        if !(self.lr > 0.0) {
            p.push(format!("lr {} must be positive", self.lr));
        }
        if self.weight_decay < 0.0 {
            p.push(format!("weight_decay {} is negative", self.weight_decay));
        }
        let held = self.val_fraction + self.test_fraction;
        if self.val_fraction <= 0.0 || self.test_fraction <= 0.0 || held >= 1.0 {
            p.push(format!(
                "val_fraction {} and test_fraction {} must be positive and sum below 1",
                self.val_fraction, self.test_fraction
            ));
        }
        p
    }
}

/// The primary party's labels and the train/validation/test partition.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified (classification) or plain random split of `labels`.
pub fn split_rows(labels: &[f64], task: Task, val: f64, test: f64, seed: u64) -> Split {
    let mut rng = rng::stream(seed, Purpose::Split, &[1]);
    let mut groups: Vec<Vec<usize>> = match task {
        Task::Regression => vec![(0..labels.len()).collect()],
        Task::Classification => {
            let mut classes: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
            classes.sort_unstable();
            classes.dedup();
            classes
                .iter()
                .map(|&c| (0..labels.len()).filter(|&i| labels[i] as i64 == c).collect())
                .collect()
        }
    };
    let mut s = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for g in &mut groups {
        g.shuffle(&mut rng);
        let n = g.len() as f64;
        let nv = (val * n).round() as usize;
        let nt = ((test * n).round() as usize).min(g.len() - nv.min(g.len()));
        let nv = nv.min(g.len());
        s.val.extend(&g[..nv]);
        s.test.extend(&g[nv..nv + nt]);
        s.train.extend(&g[nv + nt..]);
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    s
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt()
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).filter(|(p, t)| p == t).count() as f64 / n
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Label encoding shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub task: Task,
    pub num_classes: usize,
    /// Regression labels are standardized with these train-set statistics.
    pub mean: f64,
    pub std: f64,
}

impl Target {
    pub fn fit(labels: &[f64], train: &[usize], task: Task) -> Result<Self> {
        match task {
            Task::Classification => {
                if let Some(bad) = labels.iter().find(|&&l| l < 0.0 || l.fract() != 0.0) {
                    return Err(Error::validation(format!(
                        "classification label {bad} is not a non-negative integer"
                    )));
                }
                let num_classes = labels.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
                Ok(Self {
                    task,
                    num_classes,
                    mean: 0.0,
                    std: 1.0,
                })
            }
            Task::Regression => {
                let n = train.len().max(1) as f64;
                let mean = train.iter().map(|&i| labels[i]).sum::<f64>() / n;
                let var = train.iter().map(|&i| (labels[i] - mean).powi(2)).sum::<f64>() / n;
                Ok(Self {
                    task,
                    num_classes: 0,
                    mean,
                    std: if var > 0.0 { var.sqrt() } else { 1.0 },
                })
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification => self.num_classes,
        }
    }

    fn loss(&self, t: &mut Tape, out: Var, labels: &[f64]) -> Result<Var> {
        match self.task {
            Task::Regression => {
                let z: Vec<f64> = labels.iter().map(|l| (l - self.mean) / self.std).collect();
                t.mse(out, &Tensor::new(&[labels.len(), 1], z)?)
            }
            Task::Classification => {
                let c: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                t.cross_entropy(out, &c)
            }
        }
    }

    /// RMSE (regression, in label units) or accuracy (classification).
    pub fn metric(&self, out: &Tensor, labels: &[f64]) -> f64 {
        match self.task {
            Task::Regression => {
                let pred: Vec<f64> = out.data().iter().map(|z| z * self.std + self.mean).collect();
                rmse(&pred, labels)
            }
            Task::Classification => {
                let pred: Vec<usize> = (0..out.rows()).map(|r| argmax(out.row(r))).collect();
                let t: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                accuracy(&pred, &t)
            }
        }
    }

    pub fn higher_is_better(&self) -> bool {
        self.task == Task::Classification
    }

    fn improves(&self, new: f64, best: Option<f64>) -> bool {
        match best {
            None => true,
            Some(b) if self.higher_is_better() => new > b,
            Some(b) => new < b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub epsilon: f64,
    pub upload_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: String,
    pub task: Task,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Test metric of the parameters from `best_epoch`.
    pub test_metric: f64,
    pub steps: u64,
    pub epsilon: f64,
    /// Total bytes of representations sent to the aggregator in training.
    pub upload_bytes: u64,
    pub wall_time_s: f64,
}

impl RunMetrics {
    /// Everything except wall time, for replay comparisons.
    pub fn trace(&self) -> (Vec<EpochMetrics>, usize, f64, f64, u64, f64) {
        (
            self.epochs.clone(),
            self.best_epoch,
            self.best_val_metric,
            self.test_metric,
            self.steps,
            self.epsilon,
        )
    }
}

/// A primary party and its secondary parties.
#[derive(Clone, Debug)]
pub struct Federation {
    pub primary: PartyDataset,
    pub secondaries: Vec<PartyDataset>,
}

impl Federation {
    pub fn new(mut parties: Vec<PartyDataset>) -> Result<Self> {
        let pos = parties
            .iter()
            .position(|p| p.role == Role::Primary)
            .ok_or_else(|| Error::validation("no party holds a `label` column"))?;
        let primary = parties.remove(pos);
        if parties.iter().any(|p| p.role == Role::Primary) {
            return Err(Error::validation("more than one party holds labels"));
        }
        if parties.iter().any(|p| p.key_dims() != primary.key_dims()) {
            return Err(Error::validation("parties disagree on the number of key columns"));
        }
        Ok(Self {
            primary,
            secondaries: parties,
        })
    }

    pub fn labels(&self) -> &[f64] {
        self.primary.labels.as_deref().expect("primary holds labels")
    }

    pub fn num_secondaries(&self) -> usize {
        self.secondaries.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        std::iter::once(&self.primary)
            .chain(&self.secondaries)
            .map(PartyDataset::num_features)
            .collect()
    }

    /// Links every primary record to its `k` nearest records in each
    /// secondary party, over all candidates.
    pub fn link_all(&self, k: usize) -> Result<Vec<LinkIndex>> {
        let rows: Vec<usize> = (0..self.primary.len()).collect();
        let cand = vec![None; self.num_secondaries()];
        linkage::link_rows(&self.primary, &self.secondaries, &rows, &cand, k)
    }
}

fn select_links(links: &[LinkIndex], rows: &[usize]) -> Vec<LinkIndex> {
    links
        .iter()
        .map(|l| LinkIndex {
            rows: rows.len(),
            k: l.k,
            idx: rows.iter().flat_map(|&r| l.row(r).iter().copied()).collect(),
        })
        .collect()
}

fn batches(rows: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    rows.chunks(size.max(1))
}

/// A trained network of any kind, with its label encoding.
#[derive(Clone, Debug)]
pub enum Network {
    Fet(FetModel),
    Mlp { params: ParamSet, mlp: Mlp, kind: ModelKind, widths: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network,
    pub target: Target,
    /// Privacy settings used at evaluation time.
    pub privacy: PrivacySpec,
    pub eval_noise: bool,
}

#[derive(Serialize, Deserialize)]
struct MlpMeta {
    widths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    target: Target,
    privacy: PrivacySpec,
    eval_noise: bool,
    net: serde_json::Value,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match &self.network {
            Network::Fet(_) => ModelKind::Fet,
            Network::Mlp { kind, .. } => *kind,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (net, parties): (serde_json::Value, Vec<&ParamSet>) = match &self.network {
            Network::Fet(m) => (m.checkpoint().meta, m.parties.iter().map(|p| &p.params).collect()),
            Network::Mlp { params, widths, .. } => (
                serde_json::to_value(MlpMeta { widths: widths.clone() }).expect("serializable"),
                vec![params],
            ),
        };
        let meta = ModelMeta {
            target: self.target.clone(),
            privacy: self.privacy.clone(),
            eval_noise: self.eval_noise,
            net,
        };
        Checkpoint::new(
            self.kind().name(),
            serde_json::to_value(meta).expect("serializable"),
            parties,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        let network = match ck.model.as_str() {
            "fet" => {
                let inner = Checkpoint {
                    meta: meta.net.clone(),
                    ..ck.clone()
                };
                Network::Fet(FetModel::from_checkpoint(&inner)?)
            }
            "solo" | "top1sim" => {
                let m: MlpMeta = serde_json::from_value(meta.net.clone())?;
                let mut params = ParamSet::new();
                let mlp = Mlp::new(&mut params, "mlp", &m.widths, &mut rng::stream(0, Purpose::Init, &[]));
                ck.restore([&mut params])?;
                let kind = if ck.model == "solo" { ModelKind::Solo } else { ModelKind::Top1sim };
                Network::Mlp {
                    params,
                    mlp,
                    kind,
                    widths: m.widths,
                }
            }
            other => return Err(Error::validation(format!("unknown model `{other}` in checkpoint"))),
        };
        Ok(Self {
            network,
            target: meta.target,
            privacy: meta.privacy,
            eval_noise: meta.eval_noise,
        })
    }

    /// Network outputs for primary `rows` of `fed`.
    pub fn outputs(&self, fed: &Federation, rows: &[usize], seed: u64) -> Result<Tensor> {
        match &self.network {
            Network::Fet(m) => {
                let links = fed.link_all(m.config.num_neighbors)?;
                fet_outputs(m, fed, &links, rows, &self.privacy, self.eval_noise, seed)
            }
            Network::Mlp { params, mlp, kind, .. } => {
                let x = match kind {
                    ModelKind::Top1sim => top1_features(fed, &fed.link_all(1)?)?,
                    _ => fed.primary.features.clone(),
                };
                mlp_outputs(params, mlp, &x, rows)
            }
        }
    }

    /// Metric over `rows` (all primary records when `None`).
    pub fn evaluate(&self, fed: &Federation, rows: Option<&[usize]>, seed: u64) -> Result<f64> {
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..fed.primary.len()).collect();
                &all
            }
        };
        let out = self.outputs(fed, rows, seed)?;
        let labels: Vec<f64> = rows.iter().map(|&r| fed.labels()[r]).collect();
        if self.target.task == Task::Classification && labels.iter().any(|&l| l as usize >= self.target.num_classes) {
            return Err(Error::contract("labels outside the classes the model was trained on"));
        }
        Ok(self.target.metric(&out, &labels))
    }
}

fn fet_outputs(
    model: &FetModel,
    fed: &Federation,
    links: &[LinkIndex],
    rows: &[usize],
    privacy: &PrivacySpec,
    eval_noise: bool,
    seed: u64,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * model.out_dim);
    for (i, chunk) in batches(rows, EVAL_BATCH).enumerate() {
        let batch = LinkedBatch::assemble(&fed.primary, &fed.secondaries, chunk, &select_links(links, chunk))?;
        let ctx = ForwardCtx {
            training: false,
            privacy,
            add_noise: eval_noise,
            seed: rng::derive_seed(seed, Purpose::Misc, &[1]),
            step: i as u64,
            extra_mask: None,
        };
        out.extend(model.predict(&batch, &ctx)?.into_data());
    }
    Tensor::new(&[rows.len(), model.out_dim], out)
}

fn mlp_outputs(params: &ParamSet, mlp: &Mlp, x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let out_dim = mlp.layers.last().map_or(0, |l| l.out);
    let mut out = Vec::with_capacity(rows.len() * out_dim);
    for chunk in batches(rows, EVAL_BATCH) {
        let mut t = Tape::new();
        let p = params.bind(&mut t);
        let xv = t.constant(x.select_rows(chunk));
        let y = mlp.forward(&mut t, &p, xv)?;
        out.extend_from_slice(t.value(y).data());
    }
    Tensor::new(&[rows.len(), out_dim], out)
}

/// Primary features concatenated with the features of every secondary
/// party's nearest record.
pub fn top1_features(fed: &Federation, links: &[LinkIndex]) -> Result<Tensor> {
    let n = fed.primary.len();
    let width: usize = fed.input_dims().iter().sum();
    let mut data = Vec::with_capacity(n * width);
    for r in 0..n {
        data.extend_from_slice(fed.primary.features.row(r));
        for (party, link) in fed.secondaries.iter().zip(links) {
            data.extend_from_slice(party.features.row(link.row(r)[0]));
        }
    }
    Tensor::new(&[n, width], data)
}

/// Early-stopping bookkeeping shared by every trainer.
struct Tracker<'a, S> {
    target: &'a Target,
    patience: usize,
    best: Option<(f64, usize, S)>,
    since_best: usize,
}

impl<'a, S> Tracker<'a, S> {
    fn new(target: &'a Target, patience: usize) -> Self {
        Self {
            target,
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    fn observe(&mut self, epoch: usize, val: f64, snapshot: impl FnOnce() -> S) -> bool {
        if self.target.improves(val, self.best.as_ref().map(|b| b.0)) {
            self.best = Some((val, epoch, snapshot()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }
}

/// Trains the federated transformer.
///
/// Each batch subsamples every secondary party at rate `q` (when `q < 1`),
/// links the batch's primary records to their `K` nearest neighbors,
/// runs the forward pass with clipping, dropout, SplitAvg and noise, and
/// updates every party's parameters. The accountant advances once per batch;
/// exceeding `privacy.epsilon_cap` halts training with
/// [`Error::BudgetExhausted`].
pub fn train_fet(
    cfg: &TrainConfig,
    fed: &Federation,
    model_cfg: &ModelConfig,
    privacy: &PrivacySpec,
) -> Result<(RunMetrics, TrainedModel)> {
    train_fet_with(cfg, fed, model_cfg, privacy, |_| {})
}

/// [`train_fet`] with a callback after every epoch (for streaming logs).
pub fn train_fet_with(
    cfg: &TrainConfig,
    fed: &Federation,
    model_cfg: &ModelConfig,
    privacy: &PrivacySpec,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(RunMetrics, TrainedModel)> {
    let start = Instant::now();
    check_train(cfg)?;
    if model_cfg.num_parties != fed.num_secondaries() {
        return Err(Error::dim(format!(
            "model expects {} secondary parties, data has {}",
            model_cfg.num_parties,
            fed.num_secondaries()
        )));
    }
    if model_cfg.key_dims != fed.primary.key_dims() {
        return Err(Error::dim(format!(
            "model expects {} key dims, data has {}",
            model_cfg.key_dims,
            fed.primary.key_dims()
        )));
    }
    let min_candidates = fed.secondaries.iter().map(PartyDataset::len).min().unwrap_or(0);
    privacy.validate(min_candidates, model_cfg.num_neighbors)?;

    let labels = fed.labels();
    let split = split_rows(labels, cfg.task, cfg.val_fraction, cfg.test_fraction, cfg.seed);
    let target = Target::fit(labels, &split.train, cfg.task)?;
    let mut model = FetModel::new(model_cfg.clone(), &fed.input_dims(), target.out_dim(), cfg.seed)?;
    let mut opts: Vec<Optimizer> = model.parties.iter().map(|_| Optimizer::new(cfg.optimizer)).collect();
    let links = fed.link_all(model_cfg.num_neighbors)?;
    let q = privacy.subsample_rate;
    let mut accountant = AccountantState::new(privacy.noise_multiplier, q, privacy.delta, cfg.accountant);
    let eval_noise = cfg.eval_noise && privacy.enabled;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut tracker = Tracker::new(&target, cfg.early_stop_patience);
    let mut step = 0u64;
    let mut upload = 0u64;
    let mut order = split.train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (bi, rows) in batches(&order, cfg.batch_size).enumerate() {
            let batch_links = if q < 1.0 {
                let cand: Vec<Option<Vec<usize>>> = fed
                    .secondaries
                    .iter()
                    .enumerate()
                    .map(|(h, p)| {
                        let mut r = rng::stream(cfg.seed, Purpose::Subsample, &[epoch as u64, bi as u64, h as u64]);
                        linkage::subsample_secondary(p.len(), q, model_cfg.num_neighbors, &mut r).map(Some)
                    })
                    .collect::<Result<_>>()?;
                linkage::link_rows(&fed.primary, &fed.secondaries, rows, &cand, model_cfg.num_neighbors)?
            } else {
                select_links(&links, rows)
            };
            let batch = LinkedBatch::assemble(&fed.primary, &fed.secondaries, rows, &batch_links)?;
            let ctx = ForwardCtx {
                training: true,
                privacy,
                add_noise: privacy.enabled,
                seed: cfg.seed,
                step,
                extra_mask: None,
            };
            let mut t = Tape::new();
            let out = model.forward(&mut t, &batch, &ctx)?;
            let loss = target.loss(&mut t, out.prediction, &batch.labels)?;
            let lv = t.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numeric(format!("loss became {lv} at epoch {epoch}, batch {bi}")));
            }
            let mut grads = t.backward(loss)?;
            for ((party, vars), opt) in model.parties.iter_mut().zip(&out.param_vars).zip(&mut opts) {
                party.params.accumulate(vars, &mut grads);
                opt.step(party.params.iter_mut(), cfg.lr, cfg.weight_decay)?;
            }
            upload += out.upload_bytes;
            loss_sum += lv;
            n_batches += 1;
            step += 1;
            if privacy.enabled {
                accountant.step(1);
                if let Some(cap) = privacy.epsilon_cap {
                    let eps = accountant.epsilon();
                    if eps > cap {
                        return Err(Error::BudgetExhausted {
                            epsilon: eps,
                            cap,
                            steps: accountant.steps_taken,
                        });
                    }
                }
            }
        }
        if model_cfg.pe_avg_frequency > 0 && (epoch + 1) % model_cfg.pe_avg_frequency == 0 {
            model.average_pe()?;
        }
        let val_out = fet_outputs(&model, fed, &links, &split.val, privacy, eval_noise, cfg.seed)?;
        let val_labels: Vec<f64> = split.val.iter().map(|&r| labels[r]).collect();
        let val = target.metric(&val_out, &val_labels);
        let em = EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_metric: val,
            epsilon: if privacy.enabled { accountant.epsilon() } else { 0.0 },
            upload_bytes: upload,
        };
        on_epoch(&em);
        epochs.push(em);
        if tracker.observe(epoch, val, || model.clone()) {
            break;
        }
    }
    let (best_val, best_epoch, best_model) = tracker.best.expect("at least one epoch ran");
    let trained = TrainedModel {
        network: Network::Fet(best_model),
        target: target.clone(),
        privacy: privacy.clone(),
        eval_noise,
    };
    let test_metric = trained.evaluate(fed, Some(&split.test), cfg.seed)?;
    Ok((
        RunMetrics {
            model: ModelKind::Fet.name().into(),
            task: cfg.task,
            seed: cfg.seed,
            epochs,
            best_epoch,
            best_val_metric: best_val,
            test_metric,
            steps: step,
            epsilon: if privacy.enabled { accountant.epsilon() } else { 0.0 },
            upload_bytes: upload,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        trained,
    ))
}

fn check_train(cfg: &TrainConfig) -> Result<()> {
    let p = cfg.problems();
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(p))
    }
}

/// Trains an MLP on fixed per-record inputs `x` (rows aligned with the
/// primary party's labels).
fn train_mlp(cfg: &TrainConfig, kind: ModelKind, x: &Tensor, labels: &[f64], hidden: &[usize]) -> Result<(RunMetrics, TrainedModel)> {
    let start = Instant::now();
    check_train(cfg)?;
    let split = split_rows(labels, cfg.task, cfg.val_fraction, cfg.test_fraction, cfg.seed);
    let target = Target::fit(labels, &split.train, cfg.task)?;
    let mut widths = vec![x.row_width()];
    widths.extend_from_slice(hidden);
    widths.push(target.out_dim());
    let mut params = ParamSet::new();
    let mlp = Mlp::new(&mut params, "mlp", &widths, &mut rng::stream(cfg.seed, Purpose::Init, &[0]));
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut tracker = Tracker::new(&target, cfg.early_stop_patience);
    let mut epochs = Vec::new();
    let mut order = split.train.clone();
    let mut step = 0u64;
    let val_labels: Vec<f64> = split.val.iter().map(|&r| labels[r]).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let (mut loss_sum, mut n) = (0.0, 0);
        for rows in batches(&order, cfg.batch_size) {
            let mut t = Tape::new();
            let p = params.bind(&mut t);
            let xv = t.constant(x.select_rows(rows));
            let y = mlp.forward(&mut t, &p, xv)?;
            let batch_labels: Vec<f64> = rows.iter().map(|&r| labels[r]).collect();
            let loss = target.loss(&mut t, y, &batch_labels)?;
            let lv = t.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::numeric(format!("loss became {lv} at epoch {epoch}")));
            }
            let mut grads = t.backward(loss)?;
            params.accumulate(&p, &mut grads);
            opt.step(params.iter_mut(), cfg.lr, cfg.weight_decay)?;
            loss_sum += lv;
            n += 1;
            step += 1;
        }
        let val = target.metric(&mlp_outputs(&params, &mlp, x, &split.val)?, &val_labels);
        let em = EpochMetrics {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            val_metric: val,
            epsilon: 0.0,
            upload_bytes: 0,
        };
        epochs.push(em);
        if tracker.observe(epoch, val, || params.clone()) {
            break;
        }
    }
    let (best_val, best_epoch, best_params) = tracker.best.expect("at least one epoch ran");
    let test_labels: Vec<f64> = split.test.iter().map(|&r| labels[r]).collect();
    let test_metric = target.metric(&mlp_outputs(&best_params, &mlp, x, &split.test)?, &test_labels);
    Ok((
        RunMetrics {
            model: kind.name().into(),
            task: cfg.task,
            seed: cfg.seed,
            epochs,
            best_epoch,
            best_val_metric: best_val,
            test_metric,
            steps: step,
            epsilon: 0.0,
            upload_bytes: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        TrainedModel {
            network: Network::Mlp {
                params: best_params,
                mlp,
                kind,
                widths,
            },
            target,
            privacy: PrivacySpec::default(),
            eval_noise: false,
        },
    ))
}

/// MLP on the primary party's features alone.
pub fn train_solo(cfg: &TrainConfig, primary: &PartyDataset) -> Result<(RunMetrics, TrainedModel)> {
    let labels = primary
        .labels
        .as_deref()
        .ok_or_else(|| Error::validation("primary party has no `label` column"))?;
    train_mlp(cfg, ModelKind::Solo, &primary.features, labels, &cfg.solo_hidden)
}

/// MLP on primary features joined with each secondary party's single most
/// similar record.
pub fn train_top1sim(cfg: &TrainConfig, fed: &Federation) -> Result<(RunMetrics, TrainedModel)> {
    let x = top1_features(fed, &fed.link_all(1)?)?;
    train_mlp(cfg, ModelKind::Top1sim, &x, fed.labels(), &cfg.top1sim_hidden)
}

/// Everything needed to reproduce one training run from a raw table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub privacy: PrivacySpec,
    pub train: TrainConfig,
}

impl Experiment {
    /// Overrides the seed of both data synthesis and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Trains the configured model on an already-split federation.
pub fn run_on(fed: &Federation, exp: &Experiment) -> Result<(RunMetrics, TrainedModel)> {
    match exp.train.model {
        ModelKind::Fet => train_fet(&exp.train, fed, &exp.model, &exp.privacy),
        ModelKind::Solo => train_solo(&exp.train, &fed.primary),
        ModelKind::Top1sim => train_top1sim(&exp.train, fed),
    }
}

/// Synthesizes the federation from `raw` and trains.
pub fn run_experiment(raw: &RawTable, exp: &Experiment) -> Result<RunMetrics> {
    let fed = Federation::new(linkage::synthesize(raw, &exp.synth)?)?;
    Ok(run_on(&fed, exp)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    DynamicMask,
    PartyDropout,
    PeFrequency,
    KeyNoise,
    #[serde(rename = "neighbors_K", alias = "neighbors_k")]
    NeighborsK,
    NumParties,
    SplitavgNoise,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 7] = [
        AblationSuite::DynamicMask,
        AblationSuite::PartyDropout,
        AblationSuite::PeFrequency,
        AblationSuite::KeyNoise,
        AblationSuite::NeighborsK,
        AblationSuite::NumParties,
        AblationSuite::SplitavgNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::DynamicMask => "dynamic_mask",
            AblationSuite::PartyDropout => "party_dropout",
            AblationSuite::PeFrequency => "pe_frequency",
            AblationSuite::KeyNoise => "key_noise",
            AblationSuite::NeighborsK => "neighbors_K",
            AblationSuite::NumParties => "num_parties",
            AblationSuite::SplitavgNoise => "splitavg_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::validation(format!("unknown ablation suite `{s}` (expected one of {})", names.join(", ")))
            })
    }

    /// `base` with this suite's knob set to `value`.
    pub fn apply(self, base: &Experiment, value: f64) -> Result<Experiment> {
        let mut e = base.clone();
        let as_count = |v: f64, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::validation(format!("{what} grid value {v} is not a non-negative integer")))
            }
        };
        match self {
            AblationSuite::DynamicMask => e.model.dynamic_mask = value != 0.0,
            AblationSuite::PartyDropout => e.model.party_dropout = value,
            AblationSuite::PeFrequency => e.model.pe_avg_frequency = as_count(value, "pe_frequency")?,
            AblationSuite::KeyNoise => e.synth.key_noise = value,
            AblationSuite::NeighborsK => e.model.num_neighbors = as_count(value, "neighbors_K")?,
            AblationSuite::NumParties => {
                let k = as_count(value, "num_parties")?;
                e.model.num_parties = k;
                e.synth.parties = k + 1;
            }
            AblationSuite::SplitavgNoise => {
                e.privacy.noise_multiplier = value;
                e.privacy.enabled = value > 0.0;
            }
        }
        Ok(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: String,
    pub value: f64,
    pub model: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub metrics: Vec<f64>,
}

/// Sample mean and (n−1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n.max(1.0);
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `base` at every grid value over `seeds`, returning one row per
/// grid value with the mean and standard deviation of the test metric.
/// Grid points run on up to `jobs` threads.
pub fn run_ablation(
    suite: AblationSuite,
    grid: &[f64],
    base: &Experiment,
    raw: &RawTable,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::validation("ablation grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("ablation needs at least one seed"));
    }
    let exps: Vec<Experiment> = grid.iter().map(|&v| suite.apply(base, v)).collect::<Result<_>>()?;
    let run_point = |e: &Experiment| -> Result<Vec<f64>> {
        seeds
            .iter()
            .map(|&s| run_experiment(raw, &e.clone().with_seed(s)).map(|m| m.test_metric))
            .collect()
    };
    let jobs = jobs.clamp(1, exps.len());
    let results: Vec<Result<Vec<f64>>> = if jobs == 1 {
        exps.iter().map(run_point).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..exps.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunks: Vec<_> = slots.chunks_mut(exps.len().div_ceil(jobs)).collect();
            let mut start = 0;
            for chunk in chunks {
                let begin = start;
                start += chunk.len();
                let exps = &exps;
                let run_point = &run_point;
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_point(&exps[begin + j]));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every grid point ran")).collect()
    };
    grid.iter()
        .zip(results)
        .map(|(&value, r)| {
            let metrics = r?;
            let (mean, std) = mean_std(&metrics);
            Ok(AblationRow {
                suite: suite.name().into(),
                value,
                model: base.train.model.name().into(),
                runs: metrics.len(),
                mean,
                std,
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_identities() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
        // Constant predictor at the mean: RMSE equals the population std.
        let y = [1.0, 3.0, 5.0, 7.0];
        assert!((rmse(&[4.0; 4], &y) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<f64> = (0..200).map(|i| (i % 4) as f64).collect();
        let s = split_rows(&labels, Task::Classification, 0.15, 0.15, 9);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 200);
        for c in 0..4 {
            let count = |v: &[usize]| v.iter().filter(|&&i| labels[i] as usize == c).count();
            assert_eq!(count(&s.val), 8);
            assert_eq!(count(&s.test), 8);
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn suite_names_round_trip() {
        for s in AblationSuite::ALL {
            assert_eq!(AblationSuite::parse(s.name()).unwrap(), s);
        }
        assert!(AblationSuite::parse("nope").is_err());
    }

    #[test]
    fn mean_std_small() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
