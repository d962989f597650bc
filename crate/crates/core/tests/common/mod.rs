//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use mdrec::corpus::{Catalog, Corpus, InteractionEvent, ItemRecord};
use mdrec::pipeline::{
    build_sequences, five_core_filter, leave_one_out_split, IndexedInstance, IndexedSplit, MixStrategy, Partition,
    MIN_SEQUENCE_LEN,
};
use rand::{Rng, RngCore};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

/// SplitMix64 finalizer; a cheap deterministic hash for synthetic scores.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| mix64(h ^ b as u64))
}

/// Uniform score in [0, 1) keyed by (seed, user, item).
pub fn uniform_score(seed: u64, user: &str, item: usize) -> f64 {
    (mix64(seed ^ mix64(hash_str(user) ^ mix64(item as u64))) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn item(id: &str, domain: &str, title: &str) -> ItemRecord {
    ItemRecord {
        item_id: id.into(),
        domain: domain.into(),
        title: title.into(),
    }
}

/// Catalog of `domains` domains with `per_domain` items each.
pub fn flat_catalog(domains: usize, per_domain: usize) -> Catalog {
    Catalog::new((0..domains).flat_map(|d| {
        (0..per_domain).map(move |i| item(&format!("d{d}i{i:05}"), &format!("dom{d}"), &format!("thing {i}")))
    }))
}

/// `n` instances with uniform targets and 1..=max_hist history items drawn
/// from the target's domain (or anywhere when `cross` is set).
pub fn random_instances(rng: &mut impl Rng, catalog: &Catalog, n: usize, max_hist: usize, cross: bool) -> Vec<IndexedInstance> {
    (0..n)
        .map(|u| {
            let target = rng.random_range(0..catalog.len());
            let pool = catalog.pool(catalog.domain_index(target));
            let len = rng.random_range(1..=max_hist);
            let history = (0..len)
                .map(|_| loop {
                    let h = if cross {
                        rng.random_range(0..catalog.len())
                    } else {
                        pool[rng.random_range(0..pool.len())]
                    };
                    if h != target {
                        break h;
                    }
                })
                .collect();
            IndexedInstance {
                user_id: format!("user{u}"),
                history,
                target,
            }
        })
        .collect()
}

/// Random corpus with at most `max_events` events over a few domains.
pub fn random_corpus(rng: &mut impl RngCore, max_events: usize) -> Corpus {
    let domains = rng.random_range(1..4usize);
    let users = rng.random_range(2..80usize);
    let items = rng.random_range(2..120usize);
    let n = rng.random_range(0..=max_events);
    let records: Vec<ItemRecord> = (0..items)
        .map(|i| item(&format!("it{i}"), &format!("dom{}", i % domains), &format!("title {i}")))
        .collect();
    let events = (0..n)
        .map(|_| {
            let i = rng.random_range(0..items);
            InteractionEvent {
                user_id: format!("u{}", rng.random_range(0..users)),
                item_id: format!("it{i}"),
                domain: format!("dom{}", i % domains),
                timestamp: rng.random_range(0..500),
            }
        })
        .collect();
    Corpus::new(records, events).unwrap()
}

/// Naive k-core: drop every event whose user or item is under `k`, repeat
/// until nothing changes. Returns the multiset of surviving events.
pub fn naive_core(events: &[InteractionEvent], k: usize) -> BTreeMap<(String, String, i64), usize> {
    let mut ev: Vec<&InteractionEvent> = events.iter().collect();
    loop {
        let mut uc: HashMap<&str, usize> = HashMap::new();
        let mut ic: HashMap<&str, usize> = HashMap::new();
        for e in &ev {
            *uc.entry(&e.user_id).or_default() += 1;
            *ic.entry(&e.item_id).or_default() += 1;
        }
        let next: Vec<&InteractionEvent> = ev
            .iter()
            .copied()
            .filter(|e| uc[e.user_id.as_str()] >= k && ic[e.item_id.as_str()] >= k)
            .collect();
        if next.len() == ev.len() {
            return multiset(ev.into_iter());
        }
        ev = next;
    }
}

pub fn multiset<'a>(events: impl Iterator<Item = &'a InteractionEvent>) -> BTreeMap<(String, String, i64), usize> {
    let mut m = BTreeMap::new();
    for e in events {
        *m.entry((e.user_id.clone(), e.item_id.clone(), e.timestamp)).or_default() += 1;
    }
    m
}

/// Fixpoint, idempotence and agreement with the naive filter.
pub fn check_k_core(corpus: &Corpus, k: usize) -> Check {
    let out = five_core_filter(corpus, k).map_err(|e| e.to_string())?;
    let mut uc: HashMap<&str, usize> = HashMap::new();
    let mut ic: HashMap<&str, usize> = HashMap::new();
    for e in out.events() {
        *uc.entry(&e.user_id).or_default() += 1;
        *ic.entry(&e.item_id).or_default() += 1;
    }
    ensure!(uc.values().all(|&c| c >= k), "a user has fewer than {k} events after filtering");
    ensure!(ic.values().all(|&c| c >= k), "an item has fewer than {k} events after filtering");
    let again = five_core_filter(&out, k).map_err(|e| e.to_string())?;
    ensure!(again.events() == out.events(), "filter is not idempotent");
    ensure!(
        multiset(out.events().iter()) == naive_core(corpus.events(), k),
        "filter disagrees with the naive oracle"
    );
    Ok(())
}

/// One test and one validation target per eligible sequence; the test
/// target is the time-maximum event.
pub fn check_leave_one_out(corpus: &Corpus, strategy: &MixStrategy) -> Check {
    let seqs = build_sequences(corpus, strategy).map_err(|e| e.to_string())?;
    let split = leave_one_out_split(&seqs.sequences);
    let per_domain = *strategy != MixStrategy::UserMixed;

    // Independent grouping of the raw events.
    let mut groups: BTreeMap<(String, String), Vec<&InteractionEvent>> = BTreeMap::new();
    for e in corpus.events() {
        if let MixStrategy::SingleDomain(d) = strategy {
            if &e.domain != d {
                continue;
            }
        }
        let key = (e.user_id.clone(), if per_domain { e.domain.clone() } else { String::new() });
        groups.entry(key).or_default().push(e);
    }
    let eligible: BTreeMap<_, _> = groups.into_iter().filter(|(_, v)| v.len() >= MIN_SEQUENCE_LEN).collect();
    ensure!(split.test.len() == eligible.len(), "{} test targets for {} sequences", split.test.len(), eligible.len());
    ensure!(split.valid.len() == eligible.len(), "{} valid targets for {} sequences", split.valid.len(), eligible.len());

    let mut seen_test = BTreeSet::new();
    let mut seen_valid = BTreeSet::new();
    for (t, v) in split.test.iter().zip(&split.valid) {
        let key = (t.user_id.clone(), if per_domain { t.target.domain.clone() } else { String::new() });
        ensure!(seen_test.insert(key.clone()), "two test targets for {key:?}");
        ensure!(seen_valid.insert(key.clone()), "two valid targets for {key:?}");
        let events = eligible.get(&key).ok_or("test target for an ineligible sequence")?;
        let max_t = events.iter().map(|e| e.timestamp).max().unwrap();
        ensure!(t.target.timestamp == max_t, "test target is not the latest event of {key:?}");
        ensure!(t.history.len() + 1 == events.len(), "test history of {key:?} is not the full prefix");
        ensure!(v.history.len() + 2 == events.len(), "valid history of {key:?} has the wrong length");
        ensure!(v.target.timestamp <= t.target.timestamp, "valid target after test target");
        ensure!(t.history[..v.history.len()] == v.history[..], "valid history is not a prefix");
    }
    let train_per_seq: usize = eligible.values().map(|v| v.len() - 3).sum();
    ensure!(split.train.len() == train_per_seq, "train instance count");
    Ok(())
}

/// Every test instance gets exactly the label of the direct definition.
pub fn check_partitions(corpus: &Corpus, max_items: usize) -> Check {
    let seqs = build_sequences(corpus, &MixStrategy::UserMixed).map_err(|e| e.to_string())?;
    let split = leave_one_out_split(&seqs.sequences);
    let catalog = Catalog::from_corpus(corpus);
    let indexed = IndexedSplit::from_split(&split, &catalog).map_err(|e| e.to_string())?;
    let mut counts: BTreeMap<Partition, usize> = BTreeMap::new();
    for inst in &indexed.test {
        let hist = &inst.history[inst.history.len().saturating_sub(max_items)..];
        let target = catalog.domain_name(inst.target);
        let in_target = hist.iter().filter(|&&h| catalog.domain_name(h) == target).count();
        let expected = match in_target {
            n if n == hist.len() => Partition::Same,
            0 => Partition::Diff,
            _ => Partition::Mix,
        };
        let got = inst.partition(&catalog, max_items);
        ensure!(got == Some(expected), "label {got:?}, expected {expected:?}");
        *counts.entry(expected).or_default() += 1;
    }
    ensure!(counts.values().sum::<usize>() == indexed.test.len(), "partition does not cover the test set");
    Ok(())
}
