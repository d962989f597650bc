//! Two-tower recommenders sharing one training and evaluation interface.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline_id::IdModel;
use crate::corpus::Catalog;
use crate::encoder::{Encoder, EncoderAdapter};
use crate::error::{Error, Result};
use crate::pipeline::truncate_history;
use crate::tensor::{Graph, Matrix, ParamStore, Var};
use crate::textualize::{unk_fraction, InputBuilder, TokenizedInput, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Text,
    Id,
}

/// A user tower and an item tower whose outputs are compared by inner
/// product. Item arguments are catalog indices of the bound catalog.
pub trait Recommender {
    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn dim(&self) -> usize;
    fn num_items(&self) -> usize;
    /// One row per history. `rng` enables dropout.
    fn encode_users(&self, g: &mut Graph, histories: &[&[usize]], rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
    /// One row per item.
    fn encode_items(&self, g: &mut Graph, items: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
}

const ITEM_CHUNK: usize = 256;
const USER_CHUNK: usize = 64;

/// Inference-mode item vectors.
pub fn item_matrix(model: &dyn Recommender, items: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros((items.len(), model.dim()));
    for (c, chunk) in items.chunks(ITEM_CHUNK).enumerate() {
        let mut g = Graph::new(model.params());
        let v = model.encode_items(&mut g, chunk, None)?;
        out.slice_mut(ndarray::s![c * ITEM_CHUNK..c * ITEM_CHUNK + chunk.len(), ..])
            .assign(g.value(v));
    }
    Ok(out)
}

/// Inference-mode user vectors.
pub fn user_matrix(model: &dyn Recommender, histories: &[&[usize]]) -> Result<Matrix> {
    let mut out = Matrix::zeros((histories.len(), model.dim()));
    for (c, chunk) in histories.chunks(USER_CHUNK).enumerate() {
        let mut g = Graph::new(model.params());
        let v = model.encode_users(&mut g, chunk, None)?;
        out.slice_mut(ndarray::s![c * USER_CHUNK..c * USER_CHUNK + chunk.len(), ..])
            .assign(g.value(v));
    }
    Ok(out)
}

/// Text two-tower model: items and users are both encoded from titles.
#[derive(Debug, Clone)]
pub struct TextModel<E: EncoderAdapter = Encoder> {
    encoder: E,
    tokenizer: Tokenizer,
    builder: InputBuilder,
    max_items: usize,
    item_ids: Vec<String>,
    item_tokens: Vec<Vec<u32>>,
}

impl<E: EncoderAdapter> TextModel<E> {
    pub fn new(
        encoder: E,
        tokenizer: Tokenizer,
        builder: InputBuilder,
        max_items: usize,
        catalog: &Catalog,
    ) -> Result<Self> {
        if tokenizer.vocab_size() > encoder.vocab_size() {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens exceeds encoder vocab_size {}",
                tokenizer.vocab_size(),
                encoder.vocab_size()
            )));
        }
        if builder.direction != encoder.direction() {
            return Err(Error::Config("input builder and encoder disagree on direction".into()));
        }
        let mut m = TextModel {
            encoder,
            tokenizer,
            builder,
            max_items: max_items.max(1),
            item_ids: Vec::new(),
            item_tokens: Vec::new(),
        };
        m.bind(catalog);
        Ok(m)
    }

    /// Re-tokenizes a (possibly new) catalog; no weights change.
    pub fn bind(&mut self, catalog: &Catalog) {
        self.item_ids = catalog.items().iter().map(|i| i.item_id.clone()).collect();
        self.item_tokens = catalog
            .items()
            .iter()
            .map(|i| self.builder.item_tokens(i, &self.tokenizer))
            .collect();
    }

    pub fn encoder(&self) -> &E {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut E {
        &mut self.encoder
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn builder(&self) -> &InputBuilder {
        &self.builder
    }

    pub fn max_items(&self) -> usize {
        self.max_items
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Share of `[UNK]` tokens over the bound catalog's titles.
    pub fn unk_fraction(&self, catalog: &Catalog) -> f64 {
        unk_fraction(&self.tokenizer, catalog.items().iter().map(|i| i.title.as_str()))
    }

    fn tokens(&self, item: usize) -> Result<&[u32]> {
        self.item_tokens.get(item).map(Vec::as_slice).ok_or_else(|| {
            Error::Shape(format!("item index {item} outside catalog of {}", self.item_tokens.len()))
        })
    }

    pub fn item_input(&self, item: usize) -> Result<TokenizedInput> {
        self.builder.item_input(self.tokens(item)?)
    }

    pub fn user_input(&self, history: &[usize]) -> Result<TokenizedInput> {
        let hist = truncate_history(history, self.max_items);
        let toks = hist.iter().map(|&i| self.tokens(i)).collect::<Result<Vec<_>>>()?;
        self.builder.user_input(&toks)
    }

    fn encode_inputs(&self, g: &mut Graph, inputs: &[TokenizedInput], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let packed = crate::encoder::Packed::from_inputs(inputs)?;
        let hidden = self.encoder.encode(g, &packed, rng)?;
        Ok(self.encoder.pool(g, hidden, &packed))
    }
}

impl<E: EncoderAdapter> Recommender for TextModel<E> {
    fn kind(&self) -> ModelKind {
        ModelKind::Text
    }

    fn params(&self) -> &ParamStore {
        self.encoder.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.encoder.params_mut()
    }

    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn num_items(&self) -> usize {
        self.item_tokens.len()
    }

    fn encode_users(&self, g: &mut Graph, histories: &[&[usize]], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let inputs = histories
            .iter()
            .map(|h| self.user_input(h))
            .collect::<Result<Vec<_>>>()?;
        self.encode_inputs(g, &inputs, rng)
    }

    fn encode_items(&self, g: &mut Graph, items: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let inputs = items
            .iter()
            .map(|&i| self.item_input(i))
            .collect::<Result<Vec<_>>>()?;
        self.encode_inputs(g, &inputs, rng)
    }
}

impl Recommender for IdModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Id
    }

    fn params(&self) -> &ParamStore {
        IdModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        IdModel::params_mut(self)
    }

    fn dim(&self) -> usize {
        self.config().model_dim
    }

    fn num_items(&self) -> usize {
        self.config().num_items
    }

    fn encode_users(&self, g: &mut Graph, histories: &[&[usize]], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.encode_id_histories(g, histories, rng)
    }

    fn encode_items(&self, g: &mut Graph, items: &[usize], _rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.encode_item_ids(g, items)
    }
}

/// Either kind of model, as stored in checkpoints.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Text(TextModel),
    Id(IdModel),
}

impl AnyModel {
    pub fn as_dyn(&self) -> &dyn Recommender {
        match self {
            AnyModel::Text(m) => m,
            AnyModel::Id(m) => m,
        }
    }
}

impl Recommender for AnyModel {
    fn kind(&self) -> ModelKind {
        self.as_dyn().kind()
    }

    fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Text(m) => m.params(),
            AnyModel::Id(m) => Recommender::params(m),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Text(m) => m.params_mut(),
            AnyModel::Id(m) => Recommender::params_mut(m),
        }
    }

    fn dim(&self) -> usize {
        self.as_dyn().dim()
    }

    fn num_items(&self) -> usize {
        self.as_dyn().num_items()
    }

    fn encode_users(&self, g: &mut Graph, histories: &[&[usize]], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.as_dyn().encode_users(g, histories, rng)
    }

    fn encode_items(&self, g: &mut Graph, items: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.as_dyn().encode_items(g, items, rng)
    }
}
