//! Corpus to dataset transforms: k-core filtering, chronological sequence
//! assembly under the three mixing strategies, leave-one-out splitting and
//! Same/Mix/Diff test partition labels.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Catalog, Corpus, InteractionEvent};
use crate::error::{Error, Result};

/// Iteratively removes users with fewer than `k` interactions (across all
/// domains) and items with fewer than `k` occurrences until neither
/// constraint removes anything. Users are filtered before items in each
/// round.
pub fn five_core_filter(corpus: &Corpus, k: usize) -> Result<Corpus> {
    if k == 0 {
        return Err(Error::Pipeline("core size k must be at least 1".into()));
    }
    let mut events: Vec<InteractionEvent> = corpus.events().to_vec();
    loop {
        let before = events.len();

        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *user_counts.entry(e.user_id.as_str()).or_default() += 1;
        }
        let keep_users: Vec<bool> = events.iter().map(|e| user_counts[e.user_id.as_str()] >= k).collect();
        events = events
            .into_iter()
            .zip(keep_users)
            .filter_map(|(e, keep)| keep.then_some(e))
            .collect();

        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *item_counts.entry(e.item_id.as_str()).or_default() += 1;
        }
        let keep_items: Vec<bool> = events.iter().map(|e| item_counts[e.item_id.as_str()] >= k).collect();
        events = events
            .into_iter()
            .zip(keep_items)
            .filter_map(|(e, keep)| keep.then_some(e))
            .collect();

        if events.len() == before {
            break;
        }
    }
    Ok(corpus.with_events(events))
}

/// How per-user histories are organized into sequences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MixStrategy {
    /// One chronological sequence per user across all domains.
    UserMixed,
    /// One sequence per (user, domain) pair.
    DomainSplit,
    /// Sequences restricted to a single domain.
    SingleDomain(String),
}

impl fmt::Display for MixStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixStrategy::UserMixed => f.write_str("user_mixed"),
            MixStrategy::DomainSplit => f.write_str("domain_split"),
            MixStrategy::SingleDomain(d) => write!(f, "single_domain:{d}"),
        }
    }
}

impl FromStr for MixStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user_mixed" => Ok(MixStrategy::UserMixed),
            "domain_split" => Ok(MixStrategy::DomainSplit),
            other => match other.strip_prefix("single_domain:") {
                Some(d) if !d.is_empty() => Ok(MixStrategy::SingleDomain(d.to_string())),
                _ => Err(Error::Config(format!(
                    "unknown mix strategy `{other}` (expected user_mixed, domain_split or single_domain:<domain>)"
                ))),
            },
        }
    }
}

impl Serialize for MixStrategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixStrategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub events: Vec<InteractionEvent>,
    pub strategy: MixStrategy,
}

#[derive(Debug, Clone, Default)]
pub struct SequenceSet {
    pub sequences: Vec<UserSequence>,
    /// Sequences discarded for having fewer than [`MIN_SEQUENCE_LEN`] events.
    pub dropped_short: usize,
}

/// Shortest sequence that still yields a train prefix, a validation and a
/// test target.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// Groups events into chronological sequences. Equal timestamps keep
/// ingest order. Output is sorted by (user_id, domain).
pub fn build_sequences(corpus: &Corpus, strategy: &MixStrategy) -> Result<SequenceSet> {
    if let MixStrategy::SingleDomain(d) = strategy {
        if !corpus.domains().iter().any(|x| x == d) {
            return Err(Error::Pipeline(format!("unknown domain `{d}`")));
        }
    }
    let mut groups: BTreeMap<(&str, &str), Vec<InteractionEvent>> = BTreeMap::new();
    for e in corpus.events() {
        let key = match strategy {
            MixStrategy::UserMixed => (e.user_id.as_str(), ""),
            MixStrategy::DomainSplit => (e.user_id.as_str(), e.domain.as_str()),
            MixStrategy::SingleDomain(d) => {
                if &e.domain != d {
                    continue;
                }
                (e.user_id.as_str(), e.domain.as_str())
            }
        };
        groups.entry(key).or_default().push(e.clone());
    }
    let mut out = SequenceSet::default();
    for ((user, _), mut events) in groups {
        if events.len() < MIN_SEQUENCE_LEN {
            out.dropped_short += 1;
            continue;
        }
        // stable: ties keep ingest order
        events.sort_by_key(|e| e.timestamp);
        out.sequences.push(UserSequence {
            user_id: user.to_string(),
            events,
            strategy: strategy.clone(),
        });
    }
    Ok(out)
}

/// One prediction instance: a chronological history and the next event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub user_id: String,
    pub history: Vec<InteractionEvent>,
    pub target: InteractionEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: MixStrategy,
    pub core_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
    /// Sequences shorter than [`MIN_SEQUENCE_LEN`] that were skipped.
    pub excluded_short: usize,
    pub provenance: Option<Provenance>,
}

/// Last event of each sequence becomes the test target, the penultimate the
/// validation target, and every earlier event after the first a training
/// target paired with its strict prefix.
pub fn leave_one_out_split(sequences: &[UserSequence]) -> DatasetSplit {
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        excluded_short: 0,
        provenance: sequences.first().map(|s| Provenance {
            strategy: s.strategy.clone(),
            core_k: 0,
        }),
    };
    for seq in sequences {
        let n = seq.events.len();
        if n < MIN_SEQUENCE_LEN {
            split.excluded_short += 1;
            continue;
        }
        let inst = |t: usize| Instance {
            user_id: seq.user_id.clone(),
            history: seq.events[..t].to_vec(),
            target: seq.events[t].clone(),
        };
        for t in 1..n - 2 {
            split.train.push(inst(t));
        }
        split.valid.push(inst(n - 2));
        split.test.push(inst(n - 1));
    }
    split
}

impl DatasetSplit {
    pub fn instances(&self, role: Role) -> &[Instance] {
        match role {
            Role::Train => &self.train,
            Role::Valid => &self.valid,
            Role::Test => &self.test,
        }
    }
}

/// Relationship between the domains of a history and its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Same,
    Mix,
    Diff,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Same, Partition::Mix, Partition::Diff];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Same => "Same",
            Partition::Mix => "Mix",
            Partition::Diff => "Diff",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Same if every history domain equals the target domain, Diff if none
/// does, Mix otherwise. `None` for an empty history.
pub fn label_partition<'a>(
    history_domains: impl IntoIterator<Item = &'a str>,
    target_domain: &str,
) -> Option<Partition> {
    let mut any = false;
    let mut matches = 0usize;
    let mut total = 0usize;
    for d in history_domains {
        any = true;
        total += 1;
        if d == target_domain {
            matches += 1;
        }
    }
    if !any {
        return None;
    }
    Some(if matches == total {
        Partition::Same
    } else if matches == 0 {
        Partition::Diff
    } else {
        Partition::Mix
    })
}

/// Partition label of a test instance, computed over the truncated history
/// the model actually sees.
pub fn label_test_partition(instance: &Instance, max_items: usize) -> Option<Partition> {
    let hist = truncate_history(&instance.history, max_items);
    label_partition(hist.iter().map(|e| e.domain.as_str()), &instance.target.domain)
}

/// The most recent `max_items` entries of a history.
pub fn truncate_history<T>(history: &[T], max_items: usize) -> &[T] {
    let max_items = max_items.max(1);
    &history[history.len().saturating_sub(max_items)..]
}

/// An instance expressed in catalog item indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedInstance {
    pub user_id: String,
    pub history: Vec<usize>,
    pub target: usize,
}

impl IndexedInstance {
    pub fn from_instance(inst: &Instance, catalog: &Catalog) -> Result<Self> {
        let lookup = |id: &str| {
            catalog
                .index_of(id)
                .ok_or_else(|| Error::Pipeline(format!("item `{id}` missing from catalog")))
        };
        Ok(IndexedInstance {
            user_id: inst.user_id.clone(),
            history: inst
                .history
                .iter()
                .map(|e| lookup(&e.item_id))
                .collect::<Result<_>>()?,
            target: lookup(&inst.target.item_id)?,
        })
    }

    pub fn partition(&self, catalog: &Catalog, max_items: usize) -> Option<Partition> {
        let hist = truncate_history(&self.history, max_items);
        label_partition(
            hist.iter().map(|&i| catalog.domain_name(i)),
            catalog.domain_name(self.target),
        )
    }
}

pub fn index_instances(instances: &[Instance], catalog: &Catalog) -> Result<Vec<IndexedInstance>> {
    instances
        .iter()
        .map(|i| IndexedInstance::from_instance(i, catalog))
        .collect()
}

/// One line of the serialized split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub user_id: String,
    pub role: Role,
    pub target: String,
    pub history: Vec<String>,
    pub partition: Option<Partition>,
}

/// Flattens a split into manifest records in (role, user, target time)
/// order. Partition labels are attached to test records only.
pub fn manifest_records(split: &DatasetSplit, max_items: usize) -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    for role in [Role::Train, Role::Valid, Role::Test] {
        for inst in split.instances(role) {
            out.push(ManifestRecord {
                user_id: inst.user_id.clone(),
                role,
                target: inst.target.item_id.clone(),
                history: inst.history.iter().map(|e| e.item_id.clone()).collect(),
                partition: if role == Role::Test {
                    label_test_partition(inst, max_items)
                } else {
                    None
                },
            });
        }
    }
    out
}

/// Indexed train/valid/test instances as read back from a manifest.
#[derive(Debug, Clone, Default)]
pub struct IndexedSplit {
    pub train: Vec<IndexedInstance>,
    pub valid: Vec<IndexedInstance>,
    pub test: Vec<IndexedInstance>,
}

impl IndexedSplit {
    pub fn from_split(split: &DatasetSplit, catalog: &Catalog) -> Result<Self> {
        Ok(IndexedSplit {
            train: index_instances(&split.train, catalog)?,
            valid: index_instances(&split.valid, catalog)?,
            test: index_instances(&split.test, catalog)?,
        })
    }

    pub fn from_manifest(records: &[ManifestRecord], catalog: &Catalog) -> Result<Self> {
        let mut out = IndexedSplit::default();
        let lookup = |id: &str| {
            catalog
                .index_of(id)
                .ok_or_else(|| Error::Pipeline(format!("manifest item `{id}` missing from catalog")))
        };
        for r in records {
            let inst = IndexedInstance {
                user_id: r.user_id.clone(),
                history: r.history.iter().map(|h| lookup(h)).collect::<Result<_>>()?,
                target: lookup(&r.target)?,
            };
            match r.role {
                Role::Train => out.train.push(inst),
                Role::Valid => out.valid.push(inst),
                Role::Test => out.test.push(inst),
            }
        }
        Ok(out)
    }

    pub fn role(&self, role: Role) -> &[IndexedInstance] {
        match role {
            Role::Train => &self.train,
            Role::Valid => &self.valid,
            Role::Test => &self.test,
        }
    }
}
