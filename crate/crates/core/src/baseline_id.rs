//! Item-ID sequential recommender with causal self-attention.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::encoder::{check_finite, init_matrix, BlockParams, INIT_STD};
use crate::error::{Error, Result};
use crate::pipeline::truncate_history;
use crate::seed::derive_seed;
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Segment, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdModelConfig {
    /// Filled from the catalog when zero.
    pub num_items: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for IdModelConfig {
    fn default() -> Self {
        IdModelConfig {
            num_items: 0,
            model_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 128,
            max_seq_len: 10,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl IdModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.max_seq_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("num_items, max_seq_len and ffn_dim must be positive".into()));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdModel {
    config: IdModelConfig,
    params: ParamStore,
    items: ParamId,
    positions: ParamId,
    blocks: Vec<BlockParams>,
    item_ids: Vec<String>,
}

impl IdModel {
    pub fn new(config: IdModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let items = params.add("item.embedding", init_matrix(&mut rng, config.num_items, d, INIT_STD), true);
        let positions = params.add(
            "item.position",
            init_matrix(&mut rng, config.max_seq_len, d, INIT_STD),
            true,
        );
        let blocks = (0..config.num_layers)
            .map(|l| BlockParams::new(&mut params, &format!("layer{l}"), d, config.ffn_dim, &mut rng))
            .collect();
        Ok(IdModel {
            config,
            params,
            items,
            positions,
            blocks,
            item_ids: Vec::new(),
        })
    }

    /// Model whose table covers every item of `catalog`.
    pub fn for_catalog(mut config: IdModelConfig, catalog: &Catalog) -> Result<Self> {
        config.num_items = catalog.len();
        let mut m = IdModel::new(config)?;
        m.item_ids = catalog.items().iter().map(|i| i.item_id.clone()).collect();
        Ok(m)
    }

    /// Item ids in table-row order (empty when built without a catalog).
    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub(crate) fn set_item_ids(&mut self, ids: Vec<String>) {
        self.item_ids = ids;
    }

    pub fn config(&self) -> &IdModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn item_table(&self) -> &Matrix {
        self.params.get(self.items)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.num_items) {
            Some(i) => Err(Error::Shape(format!(
                "item index {i} outside table of {} items",
                self.config.num_items
            ))),
            None => Ok(()),
        }
    }

    /// Embedding rows of `ids`.
    pub fn encode_item_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let t = g.param(self.items);
        g.gather(t, ids.to_vec())
    }

    /// Causal encoding of each history (most recent `max_seq_len` items),
    /// pooled at its last position.
    pub fn encode_id_histories(
        &self,
        g: &mut Graph,
        histories: &[&[usize]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut lens = Vec::with_capacity(histories.len());
        for h in histories {
            if h.is_empty() {
                return Err(Error::Pipeline("empty history".into()));
            }
            let h = truncate_history(h, self.config.max_seq_len);
            ids.extend_from_slice(h);
            pos.extend(0..h.len());
            lens.push(h.len());
        }
        self.check_ids(&ids)?;
        let segments = Segment::packed(lens.iter().copied());
        let t = g.param(self.items);
        let p = g.param(self.positions);
        let e = g.gather(t, ids)?;
        let pe = g.gather(p, pos)?;
        let mut x = g.add(e, pe);
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(
                g,
                x,
                &segments,
                self.config.num_heads,
                true,
                self.config.dropout_rate,
                &mut rng,
            )?;
            check_finite(g, x, || format!("id model layer {l}"))?;
        }
        let last = segments.iter().map(|s| s.start + s.len - 1).collect();
        Ok(g.select_rows(x, last))
    }

    /// Pooled representation of one history.
    pub fn encode_id_history(&self, history: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_id_histories(&mut g, &[history], None)?;
        Ok(g.value(v).row(0).to_vec())
    }

    /// Inner product of a user vector with one item's embedding row.
    pub fn score_id(&self, user: &[f64], item: usize) -> Result<f64> {
        self.check_ids(&[item])?;
        crate::trainer::score(user, self.item_table().row(item).as_slice().expect("standard layout"))
    }

    /// Rebuilds the item table for a new catalog order. Rows of items known
    /// under `old_ids` are copied; other items get a fresh random row seeded
    /// by their id. Returns the number of new rows.
    pub fn rebind(&mut self, old_ids: &[String], new_ids: &[String]) -> usize {
        let old: HashMap<&str, usize> = old_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let d = self.config.model_dim;
        let prev = self.params.get(self.items).clone();
        let mut table = Matrix::zeros((new_ids.len(), d));
        let mut fresh = 0;
        for (r, id) in new_ids.iter().enumerate() {
            match old.get(id.as_str()) {
                Some(&o) => table.row_mut(r).assign(&prev.row(o)),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "item-row", &[id.as_bytes()]));
                    table.row_mut(r).assign(&init_matrix(&mut rng, 1, d, INIT_STD).row(0));
                    fresh += 1;
                }
            }
        }
        *self.params.get_mut(self.items) = table;
        self.config.num_items = new_ids.len();
        self.item_ids = new_ids.to_vec();
        fresh
    }
}
