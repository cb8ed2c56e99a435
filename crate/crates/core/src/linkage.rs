//! Data synthesis and fuzzy record linkage.
//!
//! A raw table is split column-wise among parties; the primary party's
//! features are reduced by PCA to universal identifiers ("keys"), scaled to
//! `[-1, 1]`, and every party receives an independently noised copy.
//! Training links each primary record to its `K` nearest secondary records
//! by Euclidean key distance within a random subsample of each secondary
//! party.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{gemm, Tensor};

pub const LABEL_COLUMN: &str = "label";
pub const KEY_PREFIX: &str = "key_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Primary,
    Secondary,
}

/// A labelled table before it is split among parties.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    /// `[N, d]`
    pub features: Tensor,
    pub labels: Vec<f64>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Divides every feature by `factor` (e.g. 255 for pixel intensities).
    pub fn scaled(mut self, factor: f64) -> Self {
        self.features.data_mut().iter_mut().for_each(|v| *v /= factor);
        self
    }

    /// Keeps the first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Self {
            feature_names: self.feature_names.clone(),
            features: self.features.select_rows(&idx),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// One party's records: identifiers, features and (primary only) labels.
#[derive(Clone, Debug)]
pub struct PartyDataset {
    pub role: Role,
    /// `[N, d_k]`
    pub keys: Tensor,
    /// `[N, d_f]`
    pub features: Tensor,
    pub labels: Option<Vec<f64>>,
    pub feature_names: Vec<String>,
    /// Row index in the source table, for tracing linkage quality.
    pub row_ids: Vec<usize>,
}

impl PartyDataset {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key_dims(&self) -> usize {
        self.keys.row_width()
    }

    pub fn num_features(&self) -> usize {
        self.features.row_width()
    }

    /// Rows `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            role: self.role,
            keys: self.keys.select_rows(indices),
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
            row_ids: indices.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.keys.rows() != self.features.rows() {
            return Err(Error::dim(format!(
                "{} key rows but {} feature rows",
                self.keys.rows(),
                self.features.rows()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::dim("label count differs from row count"));
            }
        }
        Ok(())
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::read::GzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::validation(format!("row {row}, column `{col}`: `{s}` is not a number")))
}

/// Reads a raw table: a header row, a `label` column, and numeric feature
/// columns. `.gz` files are decompressed transparently.
pub fn read_raw_csv(path: &Path) -> Result<RawTable> {
    let mut rdr = csv::Reader::from_reader(open_maybe_gz(path)?);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_col = headers
        .iter()
        .position(|h| h == LABEL_COLUMN)
        .ok_or_else(|| Error::validation(format!("{}: missing required column `{LABEL_COLUMN}`", path.display())))?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col).collect();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        labels.push(parse_f64(&rec[label_col], r, LABEL_COLUMN)?);
        for &c in &feature_cols {
            data.push(parse_f64(&rec[c], r, &headers[c])?);
        }
    }
    let n = labels.len();
    Ok(RawTable {
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        features: Tensor::new(&[n, feature_cols.len()], data)?,
        labels,
    })
}

/// Reads a raw table, keeps its first `rows` records and divides every
/// feature by `scale`.
pub fn load_raw_table(path: &Path, rows: Option<usize>, scale: Option<f64>) -> Result<RawTable> {
    let mut raw = read_raw_csv(path)?;
    if let Some(n) = rows {
        raw = raw.head(n);
    }
    if let Some(s) = scale {
        if !(s > 0.0) {
            return Err(Error::validation(format!("feature scale {s} must be positive")));
        }
        raw = raw.scaled(s);
    }
    Ok(raw)
}

/// Writes a party file: `label` (primary only), `key_0..key_{d-1}`, then
/// the feature columns.
pub fn write_party_csv(path: &Path, party: &PartyDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = Vec::new();
    if party.labels.is_some() {
        header.push(LABEL_COLUMN.to_string());
    }
    header.extend((0..party.key_dims()).map(|i| format!("{KEY_PREFIX}{i}")));
    header.extend(party.feature_names.iter().cloned());
    w.write_record(&header)?;
    for r in 0..party.len() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(l) = &party.labels {
            rec.push(l[r].to_string());
        }
        rec.extend(party.keys.row(r).iter().map(f64::to_string));
        rec.extend(party.features.row(r).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a party file written by [`write_party_csv`]. A file with a `label`
/// column is the primary party.
pub fn read_party_csv(path: &Path) -> Result<PartyDataset> {
    let mut rdr = csv::Reader::from_reader(open_maybe_gz(path)?);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_col = headers.iter().position(|h| h == LABEL_COLUMN);
    let mut key_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| h.strip_prefix(KEY_PREFIX).and_then(|s| s.parse().ok()).map(|i| (i, c)))
        .collect();
    key_cols.sort();
    if key_cols.is_empty() {
        return Err(Error::validation(format!(
            "{}: missing required columns `{KEY_PREFIX}0..`",
            path.display()
        )));
    }
    if let Some((pos, _)) = key_cols.iter().enumerate().find(|(pos, (i, _))| pos != i) {
        return Err(Error::validation(format!(
            "{}: missing required column `{KEY_PREFIX}{pos}`",
            path.display()
        )));
    }
    let key_idx: Vec<usize> = key_cols.iter().map(|&(_, c)| c).collect();
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|c| Some(*c) != label_col && !key_idx.contains(c))
        .collect();
    let (mut keys, mut feats, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if let Some(lc) = label_col {
            labels.push(parse_f64(&rec[lc], r, LABEL_COLUMN)?);
        }
        for &c in &key_idx {
            keys.push(parse_f64(&rec[c], r, &headers[c])?);
        }
        for &c in &feature_cols {
            feats.push(parse_f64(&rec[c], r, &headers[c])?);
        }
    }
    let n = keys.len() / key_idx.len();
    let party = PartyDataset {
        role: if label_col.is_some() { Role::Primary } else { Role::Secondary },
        keys: Tensor::new(&[n, key_idx.len()], keys)?,
        features: Tensor::new(&[n, feature_cols.len()], feats)?,
        labels: label_col.map(|_| labels),
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        row_ids: (0..n).collect(),
    };
    party.check()?;
    Ok(party)
}

/// Principal components of a feature matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[d, out_dims]`, columns are unit eigenvectors in descending
    /// eigenvalue order; zero columns stand in for missing rank.
    pub components: Tensor,
    /// Eigenvalues matching `components` (0 for padded columns).
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(features: &Tensor, out_dims: usize) -> Result<Self> {
        let (n, d) = (features.rows(), features.row_width());
        if n <= out_dims {
            return Err(Error::contract(format!("PCA to {out_dims} dims needs more than {n} rows")));
        }
        if out_dims > d {
            return Err(Error::dim(format!("cannot keep {out_dims} of {d} dimensions")));
        }
        if !features.is_finite() {
            return Err(Error::numeric("PCA input contains non-finite values"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = (0..n)
            .flat_map(|r| features.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect();
        let mut cov = vec![0.0; d * d];
        gemm(d, n, d, &centered, true, &centered, false, &mut cov, false);
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);

        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = 1e-10 * top.max(f64::MIN_POSITIVE) * d as f64;

        let mut comps = vec![0.0; d * out_dims];
        let mut eigenvalues = Vec::with_capacity(out_dims);
        let mut missing = 0;
        for (j, &c) in order.iter().take(out_dims).enumerate() {
            let lambda = eig.eigenvalues[c];
            if lambda <= tol {
                missing += 1;
                eigenvalues.push(0.0);
                continue;
            }
            let col = eig.eigenvectors.column(c);
            let pivot = (0..d)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
                .unwrap_or(0);
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                comps[i * out_dims + j] = sign * col[i];
            }
            eigenvalues.push(lambda);
        }
        if missing > 0 {
            log::warn!("feature matrix has rank < {out_dims}; padding {missing} zero component(s)");
        }
        Ok(Self {
            mean,
            components: Tensor::new(&[d, out_dims], comps)?,
            eigenvalues,
        })
    }

    pub fn transform(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = (features.rows(), features.row_width());
        if d != self.mean.len() {
            return Err(Error::dim(format!("PCA fitted on {} dims, got {d}", self.mean.len())));
        }
        let k = self.components.row_width();
        let centered: Vec<f64> = (0..n)
            .flat_map(|r| features.row(r).iter().zip(&self.mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect();
        let mut out = vec![0.0; n * k];
        gemm(n, d, k, &centered, false, self.components.data(), false, &mut out, false);
        Tensor::new(&[n, k], out)
    }
}

/// Projects `features` onto their top `out_dims` principal components.
pub fn derive_keys_pca(features: &Tensor, out_dims: usize) -> Result<Tensor> {
    Pca::fit(features, out_dims)?.transform(features)
}

/// Min-max scales each key column to `[-1, 1]`; constant columns map to 0.
pub fn scale_keys(keys: &Tensor) -> Tensor {
    let (n, d) = (keys.rows(), keys.row_width());
    let mut out = keys.clone();
    for c in 0..d {
        let col = (0..n).map(|r| keys.data()[r * d + c]);
        let lo = col.clone().fold(f64::INFINITY, f64::min);
        let hi = col.fold(f64::NEG_INFINITY, f64::max);
        for r in 0..n {
            let v = &mut out.data_mut()[r * d + c];
            *v = if hi > lo { 2.0 * (*v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        }
    }
    out
}

/// Adds i.i.d. `N(0, noise_scale²)` to every key entry.
pub fn fuzz_keys(keys: &Tensor, noise_scale: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(noise_scale >= 0.0) {
        return Err(Error::contract(format!("key noise must be ≥ 0, got {noise_scale}")));
    }
    if noise_scale == 0.0 {
        return Ok(keys.clone());
    }
    let mut out = keys.clone();
    for v in out.data_mut() {
        *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

/// Uniform sample without replacement of `⌊q·n⌋` row indices, ascending.
pub fn subsample_secondary(n: usize, q: f64, neighbors: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("subsample rate {q} outside (0, 1]")));
    }
    let m = (q * n as f64).floor() as usize;
    if m < neighbors {
        return Err(Error::contract(format!(
            "subsample of {m} records cannot supply {neighbors} neighbors"
        )));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `[B, K]` neighbor indices into a candidate set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkIndex {
    pub rows: usize,
    pub k: usize,
    pub idx: Vec<usize>,
}

impl LinkIndex {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    /// Re-expresses candidate positions as indices into the full dataset.
    pub fn remap(mut self, candidates: &[usize]) -> Self {
        self.idx.iter_mut().for_each(|i| *i = candidates[*i]);
        self
    }
}

/// Exact K-nearest-neighbor linkage by brute force.
///
/// Row `i` lists the `K` candidates with the smallest Euclidean distance to
/// primary key `i`, nearest first, ties broken by lower candidate index.
pub fn knn_link(primary_keys: &Tensor, candidate_keys: &Tensor, k: usize) -> Result<LinkIndex> {
    let (b, d) = (primary_keys.rows(), primary_keys.row_width());
    let m = candidate_keys.rows();
    if candidate_keys.row_width() != d {
        return Err(Error::dim(format!(
            "primary keys have {d} dims, candidates {}",
            candidate_keys.row_width()
        )));
    }
    if k == 0 || m < k {
        return Err(Error::contract(format!("cannot link {k} neighbors from {m} candidates")));
    }
    let cand = candidate_keys.data();
    let mut idx = Vec::with_capacity(b * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..b {
        let p = primary_keys.row(i);
        dist.clear();
        dist.extend((0..m).map(|j| {
            let c = &cand[j * d..(j + 1) * d];
            (p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < m {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut dist[..k];
        head.sort_unstable_by(cmp);
        idx.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(LinkIndex { rows: b, k, idx })
}

/// Randomly partitions `num_features` columns into `parties` groups whose
/// sizes differ by at most one (larger groups first).
pub fn split_features(num_features: usize, parties: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if parties == 0 || num_features < parties {
        return Err(Error::contract(format!(
            "cannot split {num_features} features among {parties} parties"
        )));
    }
    let mut cols: Vec<usize> = (0..num_features).collect();
    cols.shuffle(rng);
    let (base, extra) = (num_features / parties, num_features % parties);
    let mut groups = Vec::with_capacity(parties);
    let mut start = 0;
    for p in 0..parties {
        let size = base + usize::from(p < extra);
        let mut g = cols[start..start + size].to_vec();
        g.sort_unstable();
        groups.push(g);
        start += size;
    }
    Ok(groups)
}

/// Settings for turning a raw table into a multi-party fuzzy scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total number of parties, primary included.
    pub parties: usize,
    pub key_dims: usize,
    pub key_noise: f64,
    /// Also fuzz the primary party's own keys.
    pub fuzz_primary: bool,
    /// Replace the primary party's features by its (fuzzed) keys, so that
    /// the primary contributes only its PCA-reduced view.
    pub reduce_primary: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            parties: 2,
            key_dims: 4,
            key_noise: 0.05,
            fuzz_primary: true,
            reduce_primary: false,
            seed: 0,
        }
    }
}

/// Splits `raw` among `cfg.parties` parties: party 0 is the primary and
/// holds the labels; keys are the scaled PCA projection of the primary's
/// features, independently fuzzed per party.
pub fn synthesize(raw: &RawTable, cfg: &SynthConfig) -> Result<Vec<PartyDataset>> {
    let groups = split_features(raw.num_features(), cfg.parties, &mut rng::stream(cfg.seed, Purpose::Split, &[]))?;
    let n = raw.len();
    let all: Vec<usize> = (0..n).collect();
    let column_block = |cols: &[usize]| -> Result<Tensor> {
        let d = raw.num_features();
        let data = all
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| raw.features.data()[r * d + c]))
            .collect();
        Tensor::new(&[n, cols.len()], data)
    };
    let primary_features = column_block(&groups[0])?;
    let exact_keys = scale_keys(&derive_keys_pca(&primary_features, cfg.key_dims)?);
    groups
        .iter()
        .enumerate()
        .map(|(p, cols)| {
            let role = if p == 0 { Role::Primary } else { Role::Secondary };
            let noise = if p == 0 && !cfg.fuzz_primary { 0.0 } else { cfg.key_noise };
            let keys = fuzz_keys(&exact_keys, noise, &mut rng::stream(cfg.seed, Purpose::KeyNoise, &[p as u64]))?;
            let (features, feature_names) = if p == 0 && cfg.reduce_primary {
                (keys.clone(), (0..cfg.key_dims).map(|i| format!("pc_{i}")).collect())
            } else if p == 0 {
                (primary_features.clone(), cols.iter().map(|&c| raw.feature_names[c].clone()).collect())
            } else {
                (column_block(cols)?, cols.iter().map(|&c| raw.feature_names[c].clone()).collect())
            };
            Ok(PartyDataset {
                role,
                keys,
                features,
                labels: (p == 0).then(|| raw.labels.clone()),
                feature_names,
                row_ids: all.clone(),
            })
        })
        .collect()
}

/// One secondary party's slice of a [`LinkedBatch`].
#[derive(Clone, Debug)]
pub struct LinkedParty {
    /// `[B, K, d_f]`
    pub features: Tensor,
    /// `[B, K, d_k]`
    pub keys: Tensor,
    /// `B × K` record indices into the party's dataset.
    pub sample_ids: Vec<usize>,
}

/// `B` primary records each aligned with `K` records from every secondary
/// party.
#[derive(Clone, Debug)]
pub struct LinkedBatch {
    pub primary_rows: Vec<usize>,
    /// `[B, 1, d_f]`
    pub primary_features: Tensor,
    /// `[B, 1, d_k]`
    pub primary_keys: Tensor,
    pub labels: Vec<f64>,
    pub parties: Vec<LinkedParty>,
}

impl LinkedBatch {
    pub fn len(&self) -> usize {
        self.primary_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary_rows.is_empty()
    }

    pub fn neighbors(&self) -> usize {
        self.parties.first().map_or(0, |p| p.sample_ids.len() / self.len().max(1))
    }

    /// Assembles a batch for primary `rows` given one link index per
    /// secondary party (indices into that party's full dataset).
    pub fn assemble(
        primary: &PartyDataset,
        secondaries: &[PartyDataset],
        rows: &[usize],
        links: &[LinkIndex],
    ) -> Result<Self> {
        if links.len() != secondaries.len() {
            return Err(Error::contract(format!(
                "{} link indices for {} secondary parties",
                links.len(),
                secondaries.len()
            )));
        }
        let b = rows.len();
        let labels = primary
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("primary party has no labels"))?;
        let sel = primary.select(rows);
        let parties = secondaries
            .iter()
            .zip(links)
            .map(|(party, link)| {
                if link.rows != b {
                    return Err(Error::dim(format!("link index has {} rows for batch of {b}", link.rows)));
                }
                let k = link.k;
                let chosen = party.select(&link.idx);
                Ok(LinkedParty {
                    features: chosen.features.reshape(&[b, k, party.num_features()])?,
                    keys: chosen.keys.reshape(&[b, k, party.key_dims()])?,
                    sample_ids: link.idx.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            primary_rows: rows.to_vec(),
            primary_features: sel.features.reshape(&[b, 1, primary.num_features()])?,
            primary_keys: sel.keys.reshape(&[b, 1, primary.key_dims()])?,
            labels: rows.iter().map(|&r| labels[r]).collect(),
            parties,
        })
    }
}

/// Links `rows` of the primary party against every secondary party, each
/// restricted to its own candidate subset (`None` = all records).
pub fn link_rows(
    primary: &PartyDataset,
    secondaries: &[PartyDataset],
    rows: &[usize],
    candidates: &[Option<Vec<usize>>],
    k: usize,
) -> Result<Vec<LinkIndex>> {
    let pk = primary.keys.select_rows(rows);
    secondaries
        .iter()
        .zip(candidates)
        .map(|(party, cand)| match cand {
            None => knn_link(&pk, &party.keys, k),
            Some(c) => Ok(knn_link(&pk, &party.keys.select_rows(c), k)?.remap(c)),
        })
        .collect()
}

/// Magic bytes opening a link index file.
pub const LINK_FILE_MAGIC: &[u8; 8] = b"FETLINK1";

/// Cached linkage for one epoch.
///
/// Layout, little-endian: magic `FETLINK1`; `u64` seed; `f64` q; `u32` K;
/// `u32` epoch; `u32` party count `P`; `u32` primary row count `B`; `B`
/// `u32` primary row ids; then for each party `B·K` `u32` record indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkFile {
    pub seed: u64,
    pub q: f64,
    pub k: u32,
    pub epoch: u32,
    pub primary_rows: Vec<usize>,
    pub links: Vec<LinkIndex>,
}

impl LinkFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(LINK_FILE_MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.q.to_le_bytes())?;
        w.write_all(&self.k.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&(self.links.len() as u32).to_le_bytes())?;
        w.write_all(&(self.primary_rows.len() as u32).to_le_bytes())?;
        for &r in &self.primary_rows {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for l in &self.links {
            for &i in &l.idx {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::validation(format!("{}: not a link index file", path.display()));
        if bytes.len() < 40 || &bytes[..8] != LINK_FILE_MAGIC {
            return Err(bad());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let q = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let (k, epoch, parties, b) = (u32_at(24), u32_at(28), u32_at(32) as usize, u32_at(36) as usize);
        let expected = 40 + 4 * b + 4 * parties * b * k as usize;
        if bytes.len() != expected {
            return Err(bad());
        }
        let primary_rows = (0..b).map(|i| u32_at(40 + 4 * i) as usize).collect();
        let mut off = 40 + 4 * b;
        let links = (0..parties)
            .map(|_| {
                let idx = (0..b * k as usize).map(|i| u32_at(off + 4 * i) as usize).collect();
                off += 4 * b * k as usize;
                LinkIndex {
                    rows: b,
                    k: k as usize,
                    idx,
                }
            })
            .collect();
        Ok(Self {
            seed,
            q,
            k,
            epoch,
            primary_rows,
            links,
        })
    }
}
