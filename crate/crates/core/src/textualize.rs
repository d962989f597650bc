//! Word-level vocabulary and the item / user token layouts.
//!
//! Items are `[CLS] w1 .. wK` for bidirectional encoders and `w1 .. wK </s>`
//! for causal ones. A user is the concatenation of their items' tokens
//! (oldest first) with a single `[CLS]` in front or a single `</s>` at the
//! end.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemRecord};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const EOS: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "</s>"];

/// Fixed user prefix for the prompt ablation.
pub const USER_PROMPT: &str = "The user has purchased the following products in chronological order. Please select the next product they may interact with from the candidate products: ";

/// Attention direction of an encoder and the matching input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Bidirectional, pooled at the leading `[CLS]`.
    Nar,
    /// Causal, pooled at the trailing `</s>`.
    Ar,
}

/// Input feature ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    #[default]
    Plain,
    /// Item text is `ID: <item_id>` followed by the title.
    WithId,
    /// User text starts with [`USER_PROMPT`].
    WithPrompt,
}

/// Lowercases and splits on anything that is not alphanumeric or `_`.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn id_prefix(item_id: &str) -> String {
    format!("ID: {item_id}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub min_freq: usize,
    /// Also admit the `ID: <item_id>` tokens (needed by the with_id variant).
    pub item_id_tokens: bool,
    /// Also admit the prompt tokens (needed by the with_prompt variant).
    pub prompt_tokens: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            item_id_tokens: false,
            prompt_tokens: false,
        }
    }
}

/// Immutable word-level vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    freqs: Vec<usize>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    fn from_entries(entries: Vec<(String, usize)>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; SPECIALS.len()];
        for (tok, f) in entries {
            tokens.push(tok);
            freqs.push(f);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer { tokens, freqs, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> usize {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes `token<TAB>id<TAB>frequency` lines in id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            writeln!(w, "{t}\t{i}\t{f}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = || Error::Ingest {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected token<TAB>id<TAB>frequency".into(),
            };
            let mut parts = line.split('\t');
            let (tok, id, freq) = (
                parts.next().ok_or_else(bad)?,
                parts.next().ok_or_else(bad)?,
                parts.next().ok_or_else(bad)?,
            );
            let id: usize = id.parse().map_err(|_| bad())?;
            let freq: usize = freq.parse().map_err(|_| bad())?;
            if id != n {
                return Err(bad());
            }
            if n < SPECIALS.len() {
                if tok != SPECIALS[n] {
                    return Err(bad());
                }
                continue;
            }
            entries.push((tok.to_string(), freq));
        }
        Ok(Tokenizer::from_entries(entries))
    }
}

/// Builds the vocabulary over item titles. Ids are assigned by descending
/// frequency then ascending token; tokens below `min_freq` map to `[UNK]`.
/// Extra tokens requested by `config` are appended after the title
/// vocabulary in ascending order regardless of frequency.
pub fn build_vocab(corpus: &Corpus, config: &VocabConfig) -> Tokenizer {
    build_vocab_from_items(corpus.items(), config)
}

pub fn build_vocab_from_items<'a>(
    items: impl IntoIterator<Item = &'a ItemRecord>,
    config: &VocabConfig,
) -> Tokenizer {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut extra: BTreeMap<String, usize> = BTreeMap::new();
    for item in items {
        for w in pre_tokenize(&item.title) {
            *counts.entry(w).or_default() += 1;
        }
        if config.item_id_tokens {
            for w in pre_tokenize(&id_prefix(&item.item_id)) {
                *extra.entry(w).or_default() += 1;
            }
        }
    }
    if config.prompt_tokens {
        for w in pre_tokenize(USER_PROMPT) {
            *extra.entry(w).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, f)| *f >= config.min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (tok, f) in extra {
        if !entries.iter().any(|(t, _)| *t == tok) {
            entries.push((tok, f));
        }
    }
    Tokenizer::from_entries(entries)
}

/// Fraction of `[UNK]` tokens over the given titles.
pub fn unk_fraction<'a>(tokenizer: &Tokenizer, titles: impl IntoIterator<Item = &'a str>) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for t in titles {
        for id in tokenizer.encode(t) {
            total += 1;
            if id == UNK {
                unk += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unk as f64 / total as f64
    }
}

/// Title tokens of an item, optionally prefixed by its id, cut to
/// `max_title_tokens` (the prefix counts toward the limit).
pub fn tokenize_item(
    item: &ItemRecord,
    tokenizer: &Tokenizer,
    max_title_tokens: usize,
    with_id: bool,
) -> Vec<u32> {
    let mut ids = if with_id {
        tokenizer.encode(&id_prefix(&item.item_id))
    } else {
        Vec::new()
    };
    ids.extend(tokenizer.encode(&item.title));
    ids.truncate(max_title_tokens.max(1));
    ids
}

/// Encoder input for one item or user, unpadded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
    /// Half-open spans of each item's tokens.
    pub item_boundaries: Vec<(usize, usize)>,
    pub direction: Direction,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Position whose hidden state represents the whole input.
    pub fn pool_position(&self) -> usize {
        match self.direction {
            Direction::Nar => 0,
            Direction::Ar => self.attention_mask.iter().rposition(|&m| m).unwrap_or(0),
        }
    }
}

pub fn build_item_input(tokens: &[u32], direction: Direction) -> Result<TokenizedInput> {
    if tokens.is_empty() {
        return Err(Error::Pipeline("item has no tokens".into()));
    }
    let (token_ids, span) = match direction {
        Direction::Nar => {
            let mut v = vec![CLS];
            v.extend_from_slice(tokens);
            (v, (1, 1 + tokens.len()))
        }
        Direction::Ar => {
            let mut v = tokens.to_vec();
            v.push(EOS);
            (v, (0, tokens.len()))
        }
    };
    Ok(TokenizedInput {
        attention_mask: vec![true; token_ids.len()],
        token_ids,
        item_boundaries: vec![span],
        direction,
    })
}

/// Layout knobs for user inputs.
#[derive(Debug, Clone, Default)]
pub struct UserLayout {
    /// Prompt token ids placed at the very front (after `[CLS]` for NAR).
    pub prompt: Vec<u32>,
    /// Optional token inserted between consecutive items.
    pub separator: Option<u32>,
}

/// Concatenates the history items into one user input of at most `budget`
/// tokens. Over budget, whole oldest items are dropped first; a single
/// remaining item that still does not fit keeps its leading tokens.
pub fn build_user_input(
    history: &[&[u32]],
    direction: Direction,
    layout: &UserLayout,
    budget: usize,
) -> Result<TokenizedInput> {
    if history.is_empty() || history.iter().any(|h| h.is_empty()) {
        return Err(Error::Pipeline("user history must contain non-empty items".into()));
    }
    let fixed = 1 + layout.prompt.len();
    if budget < fixed + 1 {
        return Err(Error::Budget {
            budget,
            needed: fixed + 1,
        });
    }
    let sep = usize::from(layout.separator.is_some());
    let total = |items: &[&[u32]]| -> usize {
        fixed + items.iter().map(|i| i.len()).sum::<usize>() + sep * items.len().saturating_sub(1)
    };
    let mut start = 0;
    while start + 1 < history.len() && total(&history[start..]) > budget {
        start += 1;
    }
    let kept = &history[start..];
    let room = budget - fixed;

    let mut ids = Vec::with_capacity(budget);
    if direction == Direction::Nar {
        ids.push(CLS);
    }
    ids.extend_from_slice(&layout.prompt);
    let mut spans = Vec::with_capacity(kept.len());
    for (i, item) in kept.iter().enumerate() {
        if i > 0 {
            if let Some(s) = layout.separator {
                ids.push(s);
            }
        }
        let take = if kept.len() == 1 { item.len().min(room) } else { item.len() };
        let begin = ids.len();
        ids.extend_from_slice(&item[..take]);
        spans.push((begin, ids.len()));
    }
    if direction == Direction::Ar {
        ids.push(EOS);
    }
    debug_assert!(ids.len() <= budget);
    Ok(TokenizedInput {
        attention_mask: vec![true; ids.len()],
        token_ids: ids,
        item_boundaries: spans,
        direction,
    })
}

/// Right-padded batch of inputs sharing one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub token_ids: Array2<u32>,
    pub attention_mask: Array2<bool>,
    /// Unpadded length per row.
    pub lengths: Vec<usize>,
    /// Index of the last real token per row (the `</s>` for AR inputs).
    pub last_index: Vec<usize>,
    pub direction: Direction,
}

pub fn pad_batch(inputs: &[TokenizedInput]) -> Result<PaddedBatch> {
    let direction = inputs
        .first()
        .map(|i| i.direction)
        .ok_or_else(|| Error::Pipeline("cannot pad an empty batch".into()))?;
    if inputs.iter().any(|i| i.direction != direction) {
        return Err(Error::Pipeline("batch mixes NAR and AR inputs".into()));
    }
    let width = inputs.iter().map(TokenizedInput::len).max().unwrap_or(0);
    let mut ids = Array2::from_elem((inputs.len(), width), PAD);
    let mut mask = Array2::from_elem((inputs.len(), width), false);
    let mut lengths = Vec::with_capacity(inputs.len());
    let mut last_index = Vec::with_capacity(inputs.len());
    for (r, inp) in inputs.iter().enumerate() {
        for (c, (&t, &m)) in inp.token_ids.iter().zip(&inp.attention_mask).enumerate() {
            ids[[r, c]] = t;
            mask[[r, c]] = m;
        }
        let real = inp.attention_mask.iter().filter(|&&m| m).count();
        lengths.push(real);
        last_index.push(real.saturating_sub(1));
    }
    Ok(PaddedBatch {
        token_ids: ids,
        attention_mask: mask,
        lengths,
        last_index,
        direction,
    })
}

impl PaddedBatch {
    pub fn width(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn rows(&self) -> usize {
        self.token_ids.nrows()
    }
}

/// Everything needed to turn catalog items and histories into encoder
/// inputs for one model configuration.
#[derive(Debug, Clone)]
pub struct InputBuilder {
    pub direction: Direction,
    pub variant: InputVariant,
    pub max_title_tokens: usize,
    pub max_positions: usize,
    pub layout: UserLayout,
}

impl InputBuilder {
    pub fn new(
        tokenizer: &Tokenizer,
        direction: Direction,
        variant: InputVariant,
        max_title_tokens: usize,
        max_positions: usize,
        separator: Option<&str>,
    ) -> Self {
        let prompt = if variant == InputVariant::WithPrompt {
            tokenizer.encode(USER_PROMPT)
        } else {
            Vec::new()
        };
        InputBuilder {
            direction,
            variant,
            max_title_tokens,
            max_positions,
            layout: UserLayout {
                prompt,
                separator: separator.map(|s| tokenizer.id(s).unwrap_or(UNK)),
            },
        }
    }

    /// Title tokens of an item, also capped so an item input fits the
    /// encoder.
    pub fn item_tokens(&self, item: &ItemRecord, tokenizer: &Tokenizer) -> Vec<u32> {
        let cap = self.max_title_tokens.min(self.max_positions.saturating_sub(1)).max(1);
        tokenize_item(item, tokenizer, cap, self.variant == InputVariant::WithId)
    }

    pub fn item_input(&self, tokens: &[u32]) -> Result<TokenizedInput> {
        build_item_input(tokens, self.direction)
    }

    pub fn user_input(&self, history: &[&[u32]]) -> Result<TokenizedInput> {
        build_user_input(history, self.direction, &self.layout, self.max_positions)
    }
}
