//! Transformer text encoder with bidirectional (NAR) or causal (AR)
//! attention, `[CLS]` / `</s>` pooling and optional low-rank adapters.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Segment, Var};
use crate::textualize::{Direction, PaddedBatch, TokenizedInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub direction: Direction,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 2,
            ffn_dim: 128,
            max_positions: 128,
            vocab_size: 0,
            direction: Direction::Nar,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return bad("ffn_dim, max_positions and vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// Projection matrices an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    fn slot(self) -> usize {
        self as usize
    }

    fn suffix(self) -> &'static str {
        match self {
            LoraTarget::Query => "wq",
            LoraTarget::Key => "wk",
            LoraTarget::Value => "wv",
            LoraTarget::Output => "wo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 32.0,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// Weights of one post-norm attention block.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockParams {
    pub proj: [ParamId; 4],
    pub w0: ParamId,
    pub w1: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub lora: [Option<LoraPair>; 4],
}

/// Truncated normal (two standard deviations) used for every matrix.
pub(crate) fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

pub(crate) const INIT_STD: f64 = 0.02;

impl BlockParams {
    pub(crate) fn new(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |name: &str, r, c| store.add(format!("{prefix}.{name}"), init_matrix(rng, r, c, INIT_STD), true);
        let proj = [mat("wq", d, d), mat("wk", d, d), mat("wv", d, d), mat("wo", d, d)];
        let w0 = mat("ffn.w0", d, ffn);
        let w1 = mat("ffn.w1", ffn, d);
        let mut norm = |name: &str| {
            (
                store.add(format!("{prefix}.{name}.scale"), Matrix::ones((1, d)), true),
                store.add(format!("{prefix}.{name}.offset"), Matrix::zeros((1, d)), true),
            )
        };
        let ln1 = norm("ln1");
        let ln2 = norm("ln2");
        BlockParams {
            proj,
            w0,
            w1,
            ln1,
            ln2,
            lora: [None; 4],
        }
    }

    fn project(&self, g: &mut Graph, x: Var, target: LoraTarget) -> Var {
        let w = g.param(self.proj[target.slot()]);
        let base = g.matmul(x, w);
        match self.lora[target.slot()] {
            None => base,
            Some(pair) => {
                let a = g.param(pair.a);
                let b = g.param(pair.b);
                let xa = g.matmul(x, a);
                let xab = g.matmul(xa, b);
                let delta = g.scale(xab, pair.scale);
                g.add(base, delta)
            }
        }
    }

    /// `S = LN(Attn(F) + F)`, `F' = LN(FFN(S) + S)`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let q = self.project(g, x, LoraTarget::Query);
        let k = self.project(g, x, LoraTarget::Key);
        let v = self.project(g, x, LoraTarget::Value);
        let att = g.attention(q, k, v, segments, heads, causal)?;
        let att = self.project(g, att, LoraTarget::Output);
        let att = apply_dropout(g, att, dropout, rng);
        let res = g.add(att, x);
        let (s1, o1) = (g.param(self.ln1.0), g.param(self.ln1.1));
        let s = g.layer_norm(res, s1, o1);
        let w0 = g.param(self.w0);
        let w1 = g.param(self.w1);
        let h = g.matmul(s, w0);
        let h = g.relu(h);
        let h = g.matmul(h, w1);
        let h = apply_dropout(g, h, dropout, rng);
        let res = g.add(h, s);
        let (s2, o2) = (g.param(self.ln2.0), g.param(self.ln2.1));
        Ok(g.layer_norm(res, s2, o2))
    }

    pub(crate) fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        cfg: &LoraConfig,
        rng: &mut ChaCha8Rng,
    ) {
        for &t in &cfg.targets {
            let (din, dout) = store.get(self.proj[t.slot()]).dim();
            let bound = 1.0 / (din as f64).sqrt();
            let a = Array2::from_shape_simple_fn((din, cfg.rank), || rng.random_range(-bound..bound));
            let a = store.add(format!("{prefix}.lora.{}.a", t.suffix()), a, true);
            let b = store.add(
                format!("{prefix}.lora.{}.b", t.suffix()),
                Matrix::zeros((cfg.rank, dout)),
                true,
            );
            self.lora[t.slot()] = Some(LoraPair {
                a,
                b,
                scale: cfg.scale(),
            });
        }
    }
}

fn apply_dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask = Matrix::from_shape_simple_fn(g.shape(x), || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            g.mul_const(x, mask)
        }
        _ => x,
    }
}

pub(crate) fn check_finite(g: &Graph, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Token ids and positions of several inputs packed row-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Row of each input's pooled representation.
    pub pool_rows: Vec<usize>,
}

impl Packed {
    /// Packs unpadded inputs back to back.
    pub fn from_inputs(inputs: &[TokenizedInput]) -> Result<Self> {
        let mut p = Packed {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(inputs.len()),
            pool_rows: Vec::with_capacity(inputs.len()),
        };
        for inp in inputs {
            if inp.is_empty() {
                return Err(Error::Pipeline("empty encoder input".into()));
            }
            let start = p.tokens.len();
            let valid = inp.attention_mask.iter().filter(|&&m| m).count();
            p.tokens.extend_from_slice(&inp.token_ids);
            p.positions.extend(0..inp.len());
            p.segments.push(Segment {
                start,
                len: inp.len(),
                valid,
            });
            p.pool_rows.push(start + inp.pool_position());
        }
        Ok(p)
    }

    /// Lays out a right-padded batch row by row, padding included.
    pub fn from_padded(batch: &PaddedBatch) -> Self {
        let width = batch.width();
        let mut p = Packed {
            tokens: batch.token_ids.iter().copied().collect(),
            positions: Vec::with_capacity(batch.rows() * width),
            segments: Vec::with_capacity(batch.rows()),
            pool_rows: Vec::with_capacity(batch.rows()),
        };
        for r in 0..batch.rows() {
            let start = r * width;
            p.positions.extend(0..width);
            p.segments.push(Segment {
                start,
                len: width,
                valid: batch.lengths[r],
            });
            p.pool_rows.push(
                start
                    + match batch.direction {
                        Direction::Nar => 0,
                        Direction::Ar => batch.last_index[r],
                    },
            );
        }
        p
    }
}

/// Interface a text backbone exposes to the two-tower model. The bundled
/// [`Encoder`] implements it; pretrained backbones would plug in here.
pub trait EncoderAdapter {
    fn direction(&self) -> Direction;
    fn dim(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Hidden states of the final layer for all packed rows.
    fn encode(&self, g: &mut Graph, input: &Packed, rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
    /// One pooled row per packed input.
    fn pool(&self, g: &mut Graph, hidden: Var, input: &Packed) -> Var {
        g.select_rows(hidden, input.pool_rows.clone())
    }
    fn count_parameters(&self, trainable_only: bool) -> usize {
        self.params().count(trainable_only)
    }
    fn set_all_trainable(&mut self, trainable: bool) {
        let ids: Vec<ParamId> = self.params().ids().collect();
        for id in ids {
            self.params_mut().set_trainable(id, trainable);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    word: ParamId,
    position: ParamId,
    blocks: Vec<BlockParams>,
    lora: Option<LoraConfig>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let word = params.add("embed.word", init_matrix(&mut rng, config.vocab_size, d, INIT_STD), true);
        let position = params.add(
            "embed.position",
            init_matrix(&mut rng, config.max_positions, d, INIT_STD),
            true,
        );
        let blocks = (0..config.num_layers)
            .map(|l| BlockParams::new(&mut params, &format!("layer{l}"), d, config.ffn_dim, &mut rng))
            .collect();
        Ok(Encoder {
            config,
            params,
            word,
            position,
            blocks,
            lora: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn word_embedding(&self) -> ParamId {
        self.word
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position
    }

    /// Named base projection of a layer, e.g. `(0, LoraTarget::Query)`.
    pub fn projection(&self, layer: usize, target: LoraTarget) -> ParamId {
        self.blocks[layer].proj[target.slot()]
    }

    /// `F₀[i] = E[token_i] + P[position_i]`.
    pub fn embed(&self, g: &mut Graph, input: &Packed) -> Result<Var> {
        if let Some(&t) = input.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Shape(format!(
                "position {p} outside {} positions",
                self.config.max_positions
            )));
        }
        let e = g.param(self.word);
        let p = g.param(self.position);
        let words = g.gather(e, input.tokens.iter().map(|&t| t as usize).collect())?;
        let pos = g.gather(p, input.positions.clone())?;
        Ok(g.add(words, pos))
    }

    /// Wraps the chosen projections in zero-initialised low-rank adapters and
    /// freezes every base tensor.
    pub fn apply_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let unique: BTreeSet<_> = cfg.targets.iter().collect();
        if unique.is_empty() || unique.len() != cfg.targets.len() {
            return Err(Error::Config("LoRA targets must be non-empty and distinct".into()));
        }
        if self.lora.is_some() {
            return Err(Error::Config("adapters already attached".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder has no projection matrices to adapt".into()));
        }
        self.params.freeze_all();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x4c6f_5241);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            block.attach_lora(&mut self.params, &format!("layer{l}"), cfg, &mut rng);
        }
        self.lora = Some(cfg.clone());
        Ok(())
    }

    /// Parameters of every attached adapter.
    pub fn lora_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.lora.iter().flatten().flat_map(|p| [p.a, p.b]))
            .collect()
    }

    /// Pooled representations of unpadded inputs.
    pub fn encode_inputs(
        &self,
        g: &mut Graph,
        inputs: &[TokenizedInput],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_direction(inputs.iter().map(|i| i.direction))?;
        let packed = Packed::from_inputs(inputs)?;
        let hidden = self.encode(g, &packed, rng)?;
        Ok(self.pool(g, hidden, &packed))
    }

    /// Pooled representations of a right-padded batch.
    pub fn encode_padded(&self, g: &mut Graph, batch: &PaddedBatch) -> Result<Var> {
        self.check_direction(std::iter::once(batch.direction))?;
        let packed = Packed::from_padded(batch);
        let hidden = self.encode(g, &packed, None)?;
        Ok(self.pool(g, hidden, &packed))
    }

    fn check_direction(&self, dirs: impl Iterator<Item = Direction>) -> Result<()> {
        for d in dirs {
            if d != self.config.direction {
                return Err(Error::Pipeline(format!(
                    "{d:?} input given to a {:?} encoder",
                    self.config.direction
                )));
            }
        }
        Ok(())
    }

    /// Inference helper: pooled vectors as a plain matrix.
    pub fn pooled(&self, inputs: &[TokenizedInput]) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_inputs(&mut g, inputs, None)?;
        Ok(g.value(v).clone())
    }

    /// Inference helper: final hidden states for one input.
    pub fn hidden_states(&self, input: &TokenizedInput) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let packed = Packed::from_inputs(std::slice::from_ref(input))?;
        let v = self.encode(&mut g, &packed, None)?;
        Ok(g.value(v).clone())
    }

    pub(crate) fn from_parts(config: EncoderConfig, lora: Option<LoraConfig>) -> Result<Self> {
        let mut enc = Encoder::new(config)?;
        if let Some(l) = &lora {
            enc.apply_lora(l)?;
        }
        Ok(enc)
    }
}

impl EncoderAdapter for Encoder {
    fn direction(&self) -> Direction {
        self.config.direction
    }

    fn dim(&self) -> usize {
        self.config.model_dim
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn encode(&self, g: &mut Graph, input: &Packed, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut x = self.embed(g, input)?;
        let causal = self.config.direction == Direction::Ar;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(
                g,
                x,
                &input.segments,
                self.config.num_heads,
                causal,
                self.config.dropout_rate,
                &mut rng,
            )?;
            check_finite(g, x, || format!("encoder layer {l}"))?;
        }
        Ok(x)
    }
}
