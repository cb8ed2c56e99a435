//! Model checkpoints: named parameter arrays per party, stored as JSON.
//!
//! ```json
//! {
//!   "format": "fetsim-checkpoint",
//!   "version": 1,
//!   "model": "fet",
//!   "meta": { ... },
//!   "parties": [ { "params": { "embed.w": { "shape": [4, 8], "data": [...] } } } ]
//! }
//! ```
//!
//! `meta` holds whatever the model needs to rebuild its structure (config,
//! input widths). Parameter order inside a party is restored from the
//! freshly built model, so `params` is keyed by name only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT: &str = "fetsim-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StoredParty {
    pub params: BTreeMap<String, StoredArray>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub meta: serde_json::Value,
    pub parties: Vec<StoredParty>,
}

impl Checkpoint {
    pub fn new<'a>(model: &str, meta: serde_json::Value, parties: impl IntoIterator<Item = &'a ParamSet>) -> Self {
        let parties = parties
            .into_iter()
            .map(|ps| StoredParty {
                params: ps
                    .iter()
                    .map(|p| {
                        (
                            p.name.clone(),
                            StoredArray {
                                shape: p.value.shape().to_vec(),
                                data: p.value.data().to_vec(),
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.into(),
            meta,
            parties,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::validation(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Copies stored values into structurally identical parameter sets.
    pub fn restore<'a>(&self, parties: impl IntoIterator<Item = &'a mut ParamSet>) -> Result<()> {
        let parties: Vec<&mut ParamSet> = parties.into_iter().collect();
        if parties.len() != self.parties.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parties, model has {}",
                self.parties.len(),
                parties.len()
            )));
        }
        for (i, (ps, stored)) in parties.into_iter().zip(&self.parties).enumerate() {
            if ps.len() != stored.params.len() {
                return Err(Error::contract(format!(
                    "party {i}: checkpoint has {} parameters, model has {}",
                    stored.params.len(),
                    ps.len()
                )));
            }
            for p in ps.iter_mut() {
                let s = stored
                    .params
                    .get(&p.name)
                    .ok_or_else(|| Error::contract(format!("party {i}: checkpoint lacks `{}`", p.name)))?;
                if s.shape != p.value.shape() {
                    return Err(Error::dim(format!(
                        "party {i}: `{}` stored as {:?}, model expects {:?}",
                        p.name,
                        s.shape,
                        p.value.shape()
                    )));
                }
                p.value = Tensor::new(&s.shape, s.data.clone())?;
            }
        }
        Ok(())
    }
}
