//! Raw interaction and item-metadata ingestion, the typed corpus, and the
//! seeded synthetic multi-domain corpus generator.
//!
//! Interaction files are JSON lines of the form
//! `{"user_id": "u1", "item_id": "i1", "domain": "Office", "timestamp": 100}`;
//! item files are `{"item_id": "i1", "domain": "Office", "title": "bic round stic pen"}`.
//! An Amazon review dump maps onto the first schema with
//! `{user_id: reviewerID, item_id: asin, domain: <category>, timestamp: unixReviewTime}`
//! and its metadata onto the second with `{item_id: asin, domain: <category>, title}`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub domain: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    pub domain: String,
    pub timestamp: i64,
}

/// Supported on-disk formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    JsonLines,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json_lines" | "jsonl" => Ok(InputFormat::JsonLines),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// Records parsed from a file together with per-line problems.
///
/// Malformed lines never abort a load; they are collected in `errors`
/// (each an [`Error::Ingest`] naming the line) and the rest of the file is
/// still read.
#[derive(Debug)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub errors: Vec<Error>,
    /// Item records skipped because their title was empty or absent.
    pub dropped_untitled: usize,
}

impl<T> Default for Loaded<T> {
    fn default() -> Self {
        Loaded {
            records: Vec::new(),
            errors: Vec::new(),
            dropped_untitled: 0,
        }
    }
}

fn ingest_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn string_field(obj: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(format!("field `{key}` is empty")),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(format!("field `{key}` is not a string")),
        None => Err(format!("missing field `{key}`")),
    }
}

fn timestamp_field(obj: &Map<String, Value>) -> std::result::Result<i64, String> {
    match obj.get("timestamp") {
        Some(Value::Number(n)) => n
            .as_i64()
            .ok_or_else(|| format!("unparseable timestamp `{n}`")),
        Some(Value::String(s)) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("unparseable timestamp `{s}`")),
        Some(other) => Err(format!("unparseable timestamp `{other}`")),
        None => Err("missing field `timestamp`".to_string()),
    }
}

fn for_each_line(
    path: &Path,
    mut f: impl FnMut(usize, &str),
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(idx + 1, &line);
    }
    Ok(())
}

fn parse_object(line: &str) -> std::result::Result<Map<String, Value>, String> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err("record is not a JSON object".to_string()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

/// Reads interaction events from `path`.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<Loaded<InteractionEvent>> {
    let InputFormat::JsonLines = format;
    let mut out = Loaded::default();
    for_each_line(path, |line_no, line| {
        let parsed = parse_object(line).and_then(|obj| {
            Ok(InteractionEvent {
                user_id: string_field(&obj, "user_id")?,
                item_id: string_field(&obj, "item_id")?,
                domain: string_field(&obj, "domain")?,
                timestamp: timestamp_field(&obj)?,
            })
        });
        match parsed {
            Ok(ev) => out.records.push(ev),
            Err(msg) => out.errors.push(ingest_error(path, line_no, msg)),
        }
    })?;
    Ok(out)
}

/// Reads item metadata from `path`, dropping untitled items and flagging
/// duplicate item ids (the first occurrence is kept).
pub fn load_item_meta(path: &Path, format: InputFormat) -> Result<Loaded<ItemRecord>> {
    let InputFormat::JsonLines = format;
    let mut out = Loaded::default();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for_each_line(path, |line_no, line| {
        let obj = match parse_object(line) {
            Ok(obj) => obj,
            Err(msg) => {
                out.errors.push(ingest_error(path, line_no, msg));
                return;
            }
        };
        let title = match obj.get("title") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.trim().to_string(),
            Some(_) => {
                out.errors
                    .push(ingest_error(path, line_no, "field `title` is not a string"));
                return;
            }
        };
        let ids = string_field(&obj, "item_id").and_then(|id| Ok((id, string_field(&obj, "domain")?)));
        let (item_id, domain) = match ids {
            Ok(ids) => ids,
            Err(msg) => {
                out.errors.push(ingest_error(path, line_no, msg));
                return;
            }
        };
        if let Some(&first) = first_seen.get(&item_id) {
            out.errors.push(ingest_error(
                path,
                line_no,
                format!("duplicate item_id `{item_id}` (first defined on line {first})"),
            ));
            return;
        }
        first_seen.insert(item_id.clone(), line_no);
        if title.is_empty() {
            out.dropped_untitled += 1;
            return;
        }
        out.records.push(ItemRecord {
            item_id,
            domain,
            title,
        });
    })?;
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_interactions(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    write_json_lines(path, events)
}

pub fn write_item_meta<'a>(path: &Path, items: impl IntoIterator<Item = &'a ItemRecord>) -> Result<()> {
    write_json_lines(path, items)
}

/// A validated multi-domain corpus.
///
/// `events` keeps ingest order, which is the tie-break for equal timestamps
/// downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: BTreeMap<String, ItemRecord>,
    events: Vec<InteractionEvent>,
    domains: Vec<String>,
}

impl Corpus {
    /// Builds a corpus, checking that every event resolves to a catalog item
    /// of the same domain.
    pub fn new(items: Vec<ItemRecord>, events: Vec<InteractionEvent>) -> Result<Self> {
        let mut catalog = BTreeMap::new();
        for item in items {
            if item.title.trim().is_empty() {
                return Err(Error::Corpus(format!("item `{}` has an empty title", item.item_id)));
            }
            if let Some(prev) = catalog.insert(item.item_id.clone(), item) {
                return Err(Error::Corpus(format!("duplicate item `{}`", prev.item_id)));
            }
        }
        for ev in &events {
            match catalog.get(&ev.item_id) {
                None => {
                    return Err(Error::Corpus(format!(
                        "event of user `{}` references unknown item `{}`",
                        ev.user_id, ev.item_id
                    )))
                }
                Some(item) if item.domain != ev.domain => {
                    return Err(Error::Corpus(format!(
                        "event domain `{}` does not match item `{}` domain `{}`",
                        ev.domain, ev.item_id, item.domain
                    )))
                }
                Some(_) => {}
            }
        }
        let domains: BTreeSet<String> = catalog.values().map(|i| i.domain.clone()).collect();
        Ok(Corpus {
            items: catalog,
            events,
            domains: domains.into_iter().collect(),
        })
    }

    /// Like [`Corpus::new`] but silently discards events whose item is not in
    /// the catalog (e.g. because the item was untitled). Returns the number
    /// of discarded events.
    pub fn from_parts_lenient(
        items: Vec<ItemRecord>,
        events: Vec<InteractionEvent>,
    ) -> Result<(Self, usize)> {
        let known: HashMap<&str, &str> = items
            .iter()
            .map(|i| (i.item_id.as_str(), i.domain.as_str()))
            .collect();
        let before = events.len();
        let kept: Vec<InteractionEvent> = events
            .into_iter()
            .filter(|e| known.get(e.item_id.as_str()) == Some(&e.domain.as_str()))
            .collect();
        let dropped = before - kept.len();
        Ok((Corpus::new(items, kept)?, dropped))
    }

    pub fn items(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.values()
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemRecord> {
        self.items.get(item_id)
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.events
            .iter()
            .map(|e| e.user_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Keeps only the listed domains (items and events).
    pub fn restrict_domains(&self, domains: &[String]) -> Corpus {
        let keep: HashSet<&str> = domains.iter().map(String::as_str).collect();
        let items: BTreeMap<String, ItemRecord> = self
            .items
            .iter()
            .filter(|(_, i)| keep.contains(i.domain.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let events = self
            .events
            .iter()
            .filter(|e| keep.contains(e.domain.as_str()))
            .cloned()
            .collect();
        let domains = self
            .domains
            .iter()
            .filter(|d| keep.contains(d.as_str()))
            .cloned()
            .collect();
        Corpus {
            items,
            events,
            domains,
        }
    }

    /// Sub-corpus retaining the given events (in their existing order) and
    /// only the items they reference.
    pub(crate) fn with_events(&self, events: Vec<InteractionEvent>) -> Corpus {
        let used: HashSet<&str> = events.iter().map(|e| e.item_id.as_str()).collect();
        let items: BTreeMap<String, ItemRecord> = self
            .items
            .iter()
            .filter(|(k, _)| used.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let domains: BTreeSet<String> = items.values().map(|i| i.domain.clone()).collect();
        Corpus {
            items,
            events,
            domains: domains.into_iter().collect(),
        }
    }
}

/// Dense, id-sorted view of the item catalog used by models and evaluation.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
    domains: Vec<String>,
    domain_of: Vec<usize>,
    pools: Vec<Vec<usize>>,
}

impl Catalog {
    pub fn new(items: impl IntoIterator<Item = ItemRecord>) -> Self {
        let mut items: Vec<ItemRecord> = items.into_iter().collect();
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        items.dedup_by(|a, b| a.item_id == b.item_id);
        let domains: Vec<String> = items
            .iter()
            .map(|i| i.domain.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let domain_idx: HashMap<&str, usize> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_str(), i))
            .collect();
        let domain_of: Vec<usize> = items.iter().map(|i| domain_idx[i.domain.as_str()]).collect();
        let mut pools = vec![Vec::new(); domains.len()];
        for (idx, &d) in domain_of.iter().enumerate() {
            pools[d].push(idx);
        }
        let index = items
            .iter()
            .enumerate()
            .map(|(i, r)| (r.item_id.clone(), i))
            .collect();
        Catalog {
            items,
            index,
            domains,
            domain_of,
            pools,
        }
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        Catalog::new(corpus.items().cloned())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Index into [`Catalog::domains`] of the item's domain.
    pub fn domain_index(&self, item: usize) -> usize {
        self.domain_of[item]
    }

    pub fn domain_name(&self, item: usize) -> &str {
        &self.domains[self.domain_of[item]]
    }

    pub fn domain_position(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    /// All items of a domain, ascending by index.
    pub fn pool(&self, domain: usize) -> &[usize] {
        &self.pools[domain]
    }
}

/// Parameters of the synthetic multi-domain corpus.
///
/// Each topic owns a token set shared by all domains plus a private token
/// set per domain; item titles draw from both, followed by domain-local
/// noise tokens. Every user
/// has a latent topic preference and visits a random subset of domains in
/// chronological blocks, so cross-domain history is predictive of the next
/// item by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_topics: usize,
    pub vocab_per_topic: usize,
    pub noise_vocab_per_domain: usize,
    pub num_users: usize,
    pub items_per_domain: usize,
    /// Inclusive range of interactions drawn per user.
    pub interactions_per_user: (usize, usize),
    /// Sharpness of user topic preferences: weights are `g^c` for
    /// `g ~ U(0,1)`; `inf` gives one-hot preferences.
    pub topic_preference_concentration: f64,
    pub seed: u64,
    /// Topic words shared by every domain.
    pub topic_tokens_per_title: usize,
    /// Probability that a title carries the shared topic words at all.
    pub shared_topic_rate: f64,
    /// Size of each domain's private vocabulary for one topic.
    pub domain_vocab_per_topic: usize,
    /// Topic words private to the item's domain. They align across domains
    /// through the shared words or through users active in several domains.
    pub domain_topic_tokens_per_title: usize,
    pub noise_tokens_per_title: usize,
    /// Zipf exponent of item popularity inside a (domain, topic) group.
    pub popularity_exponent: f64,
    /// Probability that a user is active in a single domain only.
    pub single_domain_user_rate: f64,
    /// Probability that a multi-domain user's final interaction opens a new
    /// domain block.
    pub new_domain_target_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_domains: 3,
            num_topics: 12,
            vocab_per_topic: 8,
            noise_vocab_per_domain: 24,
            num_users: 2000,
            items_per_domain: 150,
            interactions_per_user: (6, 14),
            topic_preference_concentration: 10.0,
            seed: 7,
            topic_tokens_per_title: 1,
            shared_topic_rate: 1.0,
            domain_vocab_per_topic: 8,
            domain_topic_tokens_per_title: 1,
            noise_tokens_per_title: 1,
            popularity_exponent: 1.2,
            single_domain_user_rate: 0.1,
            new_domain_target_rate: 0.35,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_domains == 0 || self.num_users == 0 || self.items_per_domain == 0 {
            return fail("domain, user and item counts must be positive");
        }
        if self.num_topics < 2 {
            return fail("at least two topics are required");
        }
        if self.vocab_per_topic == 0 || self.topic_tokens_per_title == 0 {
            return fail("topic vocabulary must be non-empty");
        }
        if self.topic_tokens_per_title > self.vocab_per_topic {
            return fail("topic_tokens_per_title exceeds vocab_per_topic");
        }
        if self.domain_topic_tokens_per_title > self.domain_vocab_per_topic {
            return fail("domain_topic_tokens_per_title exceeds domain_vocab_per_topic");
        }
        if self.noise_tokens_per_title > self.noise_vocab_per_domain {
            return fail("noise_tokens_per_title exceeds noise_vocab_per_domain");
        }
        if self.items_per_domain < self.num_topics {
            return fail("items_per_domain must cover every topic");
        }
        let (lo, hi) = self.interactions_per_user;
        if lo == 0 || lo > hi {
            return fail("interactions_per_user must be a non-empty positive range");
        }
        if !(self.topic_preference_concentration > 0.0) {
            return fail("topic_preference_concentration must be > 0");
        }
        if !self.popularity_exponent.is_finite() || self.popularity_exponent < 0.0 {
            return fail("popularity_exponent must be finite and non-negative");
        }
        for p in [self.shared_topic_rate, self.single_domain_user_rate, self.new_domain_target_rate] {
            if !(0.0..=1.0).contains(&p) {
                return fail("rates must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

pub fn topic_token(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

pub fn domain_topic_token(domain: usize, topic: usize, j: usize) -> String {
    format!("d{domain}t{topic}w{j}")
}

pub fn noise_token(domain: usize, j: usize) -> String {
    format!("d{domain}n{j}")
}

pub fn synthetic_domain_name(domain: usize) -> String {
    format!("domain{domain}")
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Generates a synthetic corpus; a pure function of `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // items[domain][topic] = (item_id, popularity weight)
    let mut items = Vec::new();
    let mut groups: Vec<Vec<Vec<(String, f64)>>> =
        vec![vec![Vec::new(); spec.num_topics]; spec.num_domains];
    for d in 0..spec.num_domains {
        for i in 0..spec.items_per_domain {
            let topic = i % spec.num_topics;
            let rank = groups[d][topic].len();
            let shared = if rng.random::<f64>() < spec.shared_topic_rate {
                spec.topic_tokens_per_title
            } else {
                0
            };
            let mut words: Vec<String> = rand::seq::index::sample(&mut rng, spec.vocab_per_topic, shared)
                .into_iter()
                .map(|j| topic_token(topic, j))
                .collect();
            words.extend(
                rand::seq::index::sample(
                    &mut rng,
                    spec.domain_vocab_per_topic,
                    spec.domain_topic_tokens_per_title,
                )
                .into_iter()
                .map(|j| domain_topic_token(d, topic, j)),
            );
            words.extend(
                rand::seq::index::sample(
                    &mut rng,
                    spec.noise_vocab_per_domain,
                    spec.noise_tokens_per_title,
                )
                .into_iter()
                .map(|j| noise_token(d, j)),
            );
            let item_id = format!("d{d}i{i:04}");
            let weight = 1.0 / ((rank + 1) as f64).powf(spec.popularity_exponent);
            groups[d][topic].push((item_id.clone(), weight));
            items.push(ItemRecord {
                item_id,
                domain: synthetic_domain_name(d),
                title: words.join(" "),
            });
        }
    }

    let mut events = Vec::new();
    let (lo, hi) = spec.interactions_per_user;
    for u in 0..spec.num_users {
        let user_id = format!("u{u:05}");
        let raw: Vec<f64> = (0..spec.num_topics).map(|_| rng.random::<f64>()).collect();
        let preference: Vec<f64> = if spec.topic_preference_concentration.is_infinite() {
            let best = raw
                .iter()
                .enumerate()
                .fold(0, |b, (i, &g)| if g > raw[b] { i } else { b });
            (0..spec.num_topics).map(|k| if k == best { 1.0 } else { 0.0 }).collect()
        } else {
            raw.iter().map(|g| g.powf(spec.topic_preference_concentration)).collect()
        };

        let n = rng.random_range(lo..=hi);
        let mut order: Vec<usize> = (0..spec.num_domains).collect();
        order.shuffle(&mut rng);
        let k = if spec.num_domains == 1 || n == 1 || rng.random::<f64>() < spec.single_domain_user_rate {
            1
        } else {
            rng.random_range(2..=spec.num_domains.min(n))
        };
        // Block lengths: a random composition of n into k positive parts.
        let mut cuts: Vec<usize> = if k > 1 && rng.random::<f64>() < spec.new_domain_target_rate {
            let mut c: Vec<usize> = rand::seq::index::sample(&mut rng, n - 2, k - 2)
                .into_iter()
                .map(|c| c + 1)
                .collect();
            c.push(n - 1);
            c
        } else {
            rand::seq::index::sample(&mut rng, n - 1, k - 1)
                .into_iter()
                .map(|c| c + 1)
                .collect()
        };
        cuts.sort_unstable();
        cuts.push(n);

        let mut ts: i64 = 1_600_000_000 + rng.random_range(0..86_400 * 30);
        let mut seen: HashSet<String> = HashSet::new();
        let mut start = 0;
        for (block, &end) in cuts.iter().enumerate() {
            let d = order[block];
            for _ in start..end {
                let topic = weighted_pick(&mut rng, &preference);
                let group = &groups[d][topic];
                let weights: Vec<f64> = group.iter().map(|(_, w)| *w).collect();
                let mut pick = weighted_pick(&mut rng, &weights);
                for _ in 0..8 {
                    if !seen.contains(&group[pick].0) {
                        break;
                    }
                    pick = weighted_pick(&mut rng, &weights);
                }
                let item_id = group[pick].0.clone();
                seen.insert(item_id.clone());
                ts += rng.random_range(60..86_400);
                events.push(InteractionEvent {
                    user_id: user_id.clone(),
                    item_id,
                    domain: synthetic_domain_name(d),
                    timestamp: ts,
                });
            }
            start = end;
        }
    }
    Corpus::new(items, events)
}

/// Topic of a synthetic item, recovered from its title tokens.
pub fn synthetic_topic_of(title: &str) -> Option<usize> {
    title.split_whitespace().find_map(|w| {
        let rest = w.strip_prefix('t')?;
        let (topic, _) = rest.split_once('w')?;
        topic.parse().ok()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_one_event() {
        let f = write_lines(&[r#"{"user_id":"u1","item_id":"i1","domain":"Office","timestamp":100}"#]);
        let loaded = load_interactions(f.path(), InputFormat::JsonLines).unwrap();
        assert!(loaded.errors.is_empty());
        assert_eq!(
            loaded.records,
            vec![InteractionEvent {
                user_id: "u1".into(),
                item_id: "i1".into(),
                domain: "Office".into(),
                timestamp: 100
            }]
        );
    }

    #[test]
    fn empty_file_loads_nothing() {
        let f = write_lines(&[]);
        let loaded = load_interactions(f.path(), InputFormat::JsonLines).unwrap();
        assert!(loaded.records.is_empty());
        assert!(loaded.errors.is_empty());
    }

    #[test]
    fn corrupt_line_reported_others_loaded() {
        let f = write_lines(&[
            r#"{"user_id":"u1","item_id":"i1","domain":"A","timestamp":1}"#,
            r#"{"user_id":"u1","item_id":"i2","domain":"A"}"#,
            r#"{"user_id":"u2","item_id":"i1","domain":"A","timestamp":"3"}"#,
        ]);
        let loaded = load_interactions(f.path(), InputFormat::JsonLines).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.errors.len(), 1);
        match &loaded.errors[0] {
            Error::Ingest { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("timestamp"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparseable_timestamp_is_an_error() {
        let f = write_lines(&[r#"{"user_id":"u1","item_id":"i1","domain":"A","timestamp":"noon"}"#]);
        let loaded = load_interactions(f.path(), InputFormat::JsonLines).unwrap();
        assert!(loaded.records.is_empty());
        assert!(loaded.errors[0].to_string().contains("unparseable timestamp"));
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(matches!("csv".parse::<InputFormat>(), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn item_meta_rules() {
        let f = write_lines(&[
            r#"{"item_id":"i1","domain":"Office","title":"bic round stic pen"}"#,
            r#"{"item_id":"i2","domain":"Office","title":""}"#,
            r#"{"item_id":"i3","domain":"Office","title":"stapler"}"#,
            r#"{"item_id":"i3","domain":"Office","title":"another stapler"}"#,
            r#"{"item_id":"i4","domain":"Office"}"#,
        ]);
        let loaded = load_item_meta(f.path(), InputFormat::JsonLines).unwrap();
        let ids: Vec<&str> = loaded.records.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(ids, ["i1", "i3"]);
        assert_eq!(loaded.dropped_untitled, 2);
        assert_eq!(loaded.errors.len(), 1);
        let msg = loaded.errors[0].to_string();
        assert!(msg.contains("line 4") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn ingest_round_trip_is_lossless() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            num_users: 40,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ev = dir.path().join("events.jsonl");
        let it = dir.path().join("items.jsonl");
        write_interactions(&ev, corpus.events()).unwrap();
        write_item_meta(&it, corpus.items()).unwrap();
        let events = load_interactions(&ev, InputFormat::JsonLines).unwrap();
        let items = load_item_meta(&it, InputFormat::JsonLines).unwrap();
        assert!(events.errors.is_empty() && items.errors.is_empty());
        let back = Corpus::new(items.records, events.records).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn corpus_rejects_domain_mismatch() {
        let items = vec![ItemRecord {
            item_id: "i1".into(),
            domain: "A".into(),
            title: "pen".into(),
        }];
        let events = vec![InteractionEvent {
            user_id: "u".into(),
            item_id: "i1".into(),
            domain: "B".into(),
            timestamp: 0,
        }];
        assert!(Corpus::new(items, events).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let spec = SyntheticSpec {
            num_users: 200,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_domain_coverage() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let mut per_user: HashMap<&str, HashSet<&str>> = HashMap::new();
        for e in corpus.events() {
            per_user.entry(&e.user_id).or_default().insert(&e.domain);
            assert_eq!(corpus.item(&e.item_id).unwrap().domain, e.domain);
        }
        assert!(per_user.values().all(|d| !d.is_empty()));
        let multi = per_user.values().filter(|d| d.len() >= 2).count();
        let share = multi as f64 / per_user.len() as f64;
        assert!(share >= 0.8, "multi-domain share {share}");
    }

    #[test]
    fn one_hot_preference_gives_single_topic_users() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            num_users: 100,
            topic_preference_concentration: f64::INFINITY,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut topics: HashMap<&str, HashSet<usize>> = HashMap::new();
        for e in corpus.events() {
            let t = synthetic_topic_of(&corpus.item(&e.item_id).unwrap().title).unwrap();
            topics.entry(&e.user_id).or_default().insert(t);
        }
        assert!(topics.values().all(|t| t.len() == 1));
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            SyntheticSpec {
                num_topics: 1,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                vocab_per_topic: 0,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                num_users: 0,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                topic_preference_concentration: 0.0,
                ..SyntheticSpec::default()
            },
        ] {
            assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn catalog_pools_partition_items() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            num_users: 50,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cat = Catalog::from_corpus(&corpus);
        let total: usize = (0..cat.domains().len()).map(|d| cat.pool(d).len()).sum();
        assert_eq!(total, cat.len());
        for d in 0..cat.domains().len() {
            assert!(cat.pool(d).iter().all(|&i| cat.domain_index(i) == d));
        }
    }
}
