//! On-disk model and training-state checkpoints.
//!
//! A model checkpoint is a directory holding `model.json` (configuration and
//! item order), `tensors.json` (names, shapes, trainability) and one
//! little-endian `f64` blob per parameter under `tensors/`. Text models add
//! `vocab.tsv`; ID models add `item_index.tsv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline_id::{IdModel, IdModelConfig};
use crate::corpus::Catalog;
use crate::encoder::{Encoder, EncoderAdapter, EncoderConfig, LoraConfig};
use crate::error::{Error, Result};
use crate::model::{AnyModel, Recommender, TextModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Matrix, ParamStore};
use crate::textualize::{InputBuilder, InputVariant, Tokenizer};
use crate::trainer::{LogRecord, TrainState};

const MAGIC: &[u8; 4] = b"MDT1";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + m.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    io(path, fs::write(path, buf))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = io(path, fs::read(path))?;
    let bad = || Error::Checkpoint(format!("{}: malformed tensor blob", path.display()));
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad());
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != rows * cols * 8 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_shape_vec((rows, cols), data).map_err(|_| bad())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

/// Writes every tensor of `store` plus an index file.
pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    let tdir = dir.join("tensors");
    io(&tdir, fs::create_dir_all(&tdir))?;
    let mut index = Vec::with_capacity(store.len());
    for id in store.ids() {
        let m = store.get(id);
        write_matrix(&blob_path(&tdir, store.name(id)), m)?;
        index.push(TensorEntry {
            name: store.name(id).to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            trainable: store.is_trainable(id),
        });
    }
    let p = dir.join("tensors.json");
    io(&p, fs::write(&p, serde_json::to_string_pretty(&index)? + "\n"))
}

/// Overwrites the tensors of `store` from a directory written by
/// [`save_params`]. Names and shapes must match exactly, except for tensors
/// listed in `reshape_ok`, which take the stored shape.
pub fn load_params(dir: &Path, store: &mut ParamStore, reshape_ok: &[&str]) -> Result<()> {
    let p = dir.join("tensors.json");
    let index: Vec<TensorEntry> = serde_json::from_str(&io(&p, fs::read_to_string(&p))?)?;
    if index.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            index.len(),
            store.len()
        )));
    }
    for entry in index {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", entry.name)))?;
        let m = read_matrix(&blob_path(&dir.join("tensors"), &entry.name))?;
        if m.dim() != store.get(id).dim() && !reshape_ok.contains(&entry.name.as_str()) {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                m.dim(),
                store.get(id).dim()
            )));
        }
        *store.get_mut(id) = m;
        store.set_trainable(id, entry.trainable);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelMeta {
    Text {
        encoder: EncoderConfig,
        lora: Option<LoraConfig>,
        variant: InputVariant,
        max_title_tokens: usize,
        max_items: usize,
        item_ids: Vec<String>,
    },
    Id {
        config: IdModelConfig,
        item_ids: Vec<String>,
    },
}

pub fn save_model(dir: &Path, model: &AnyModel) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    let meta = match model {
        AnyModel::Text(m) => {
            m.tokenizer().write(&dir.join("vocab.tsv"))?;
            ModelMeta::Text {
                encoder: m.encoder().config().clone(),
                lora: m.encoder().lora().cloned(),
                variant: m.builder().variant,
                max_title_tokens: m.builder().max_title_tokens,
                max_items: m.max_items(),
                item_ids: m.item_ids().to_vec(),
            }
        }
        AnyModel::Id(m) => {
            let ids = m.item_ids().to_vec();
            let p = dir.join("item_index.tsv");
            let mut f = io(&p, fs::File::create(&p))?;
            for (i, id) in ids.iter().enumerate() {
                io(&p, writeln!(f, "{id}\t{i}"))?;
            }
            ModelMeta::Id {
                config: m.config().clone(),
                item_ids: ids,
            }
        }
    };
    let p = dir.join("model.json");
    io(&p, fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n"))?;
    save_params(dir, model.params())
}

/// Loads a model and binds it to `catalog`. Returns the model and the
/// number of catalog items the checkpoint had never seen.
pub fn load_model(dir: &Path, catalog: &Catalog) -> Result<(AnyModel, usize)> {
    let p = dir.join("model.json");
    let meta: ModelMeta = serde_json::from_str(&io(&p, fs::read_to_string(&p))?)?;
    let new_ids: Vec<String> = catalog.items().iter().map(|i| i.item_id.clone()).collect();
    match meta {
        ModelMeta::Text {
            encoder,
            lora,
            variant,
            max_title_tokens,
            max_items,
            item_ids,
        } => {
            let tokenizer = Tokenizer::read(&dir.join("vocab.tsv"))?;
            let mut enc = Encoder::from_parts(encoder, lora)?;
            load_params(dir, enc.params_mut(), &[])?;
            let builder = InputBuilder::new(
                &tokenizer,
                enc.config().direction,
                variant,
                max_title_tokens,
                enc.config().max_positions,
                None,
            );
            let known: std::collections::HashSet<&str> = item_ids.iter().map(String::as_str).collect();
            let unseen = new_ids.iter().filter(|i| !known.contains(i.as_str())).count();
            let model = TextModel::new(enc, tokenizer, builder, max_items, catalog)?;
            Ok((AnyModel::Text(model), unseen))
        }
        ModelMeta::Id { config, item_ids } => {
            let mut m = IdModel::new(config)?;
            load_params(dir, m.params_mut(), &[])?;
            m.set_item_ids(item_ids.clone());
            let unseen = if item_ids != new_ids {
                m.rebind(&item_ids, &new_ids)
            } else {
                0
            };
            Ok((AnyModel::Id(m), unseen))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    adam_t: u64,
    adam: AdamConfig,
    best_metric: Option<f64>,
    best_step: u64,
    bad_rounds: usize,
    log: Vec<LogRecord>,
    loss_sum: f64,
    loss_count: u64,
    finished: bool,
    /// Randomness is re-derived from (seed, step); nothing else to store.
    rng: String,
}

fn write_optional(dir: &Path, store: &ParamStore, values: &[Option<Matrix>]) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    for (id, v) in store.ids().zip(values) {
        if let Some(m) = v {
            write_matrix(&blob_path(dir, store.name(id)), m)?;
        }
    }
    Ok(())
}

fn read_optional(dir: &Path, store: &ParamStore) -> Result<Vec<Option<Matrix>>> {
    store
        .ids()
        .map(|id| {
            let p = blob_path(dir, store.name(id));
            if p.exists() {
                read_matrix(&p).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Writes the model (current weights) and the optimiser / early-stopping
/// state needed to resume.
pub fn save_train_state(dir: &Path, model: &AnyModel, state: &TrainState) -> Result<()> {
    save_model(dir, model)?;
    let store = model.params();
    write_optional(&dir.join("adam_m"), store, &state.adam.m)?;
    write_optional(&dir.join("adam_v"), store, &state.adam.v)?;
    if let Some(best) = &state.best_params {
        let wrapped: Vec<Option<Matrix>> = best.iter().cloned().map(Some).collect();
        write_optional(&dir.join("best"), store, &wrapped)?;
    }
    if let Some(fin) = &state.final_params {
        let wrapped: Vec<Option<Matrix>> = fin.iter().cloned().map(Some).collect();
        write_optional(&dir.join("final"), store, &wrapped)?;
    }
    let meta = StateMeta {
        step: state.step,
        adam_t: state.adam.t,
        adam: state.adam.config,
        best_metric: state.best_metric,
        best_step: state.best_step,
        bad_rounds: state.bad_rounds,
        log: state.log.clone(),
        loss_sum: state.loss_sum,
        loss_count: state.loss_count,
        finished: state.finished,
        rng: "derived from (seed, step)".into(),
    };
    let p = dir.join("state.json");
    io(&p, fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n"))
}

pub fn load_train_state(dir: &Path, catalog: &Catalog) -> Result<(AnyModel, TrainState)> {
    let (model, _) = load_model(dir, catalog)?;
    let p = dir.join("state.json");
    let meta: StateMeta = serde_json::from_str(&io(&p, fs::read_to_string(&p))?)?;
    let store = model.params();
    let full = |sub: &str| -> Result<Option<Vec<Matrix>>> {
        let d = dir.join(sub);
        if !d.exists() {
            return Ok(None);
        }
        read_optional(&d, store)?
            .into_iter()
            .map(|m| m.ok_or_else(|| Error::Checkpoint(format!("incomplete `{sub}` snapshot"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    };
    let state = TrainState {
        step: meta.step,
        adam: Adam {
            config: meta.adam,
            t: meta.adam_t,
            m: read_optional(&dir.join("adam_m"), store)?,
            v: read_optional(&dir.join("adam_v"), store)?,
        },
        best_metric: meta.best_metric,
        best_step: meta.best_step,
        best_params: full("best")?,
        bad_rounds: meta.bad_rounds,
        log: meta.log,
        loss_sum: meta.loss_sum,
        loss_count: meta.loss_count,
        finished: meta.finished,
        final_params: full("final")?,
    };
    Ok((model, state))
}
