//! Popularity buckets, per-bucket accuracy, top-K exposure, relative
//! improvement tables and embedding dumps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::evaluator::{rank_instances, EvalConfig, MetricReport, MetricRow, Scorer};
use crate::model::{item_matrix, Recommender};
use crate::pipeline::IndexedInstance;

/// Training-split frequency of every catalog item.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityIndex {
    freq: Vec<usize>,
    ascending: Vec<usize>,
}

impl PopularityIndex {
    /// Counts occurrences of each item index in `events`. Items that never
    /// occur stay in the index with frequency zero.
    pub fn from_events(events: impl IntoIterator<Item = usize>, num_items: usize) -> Self {
        let mut freq = vec![0; num_items];
        for e in events {
            freq[e] += 1;
        }
        let mut ascending: Vec<usize> = (0..num_items).collect();
        // Catalog indices follow item_id order, so the index breaks ties.
        ascending.sort_by_key(|&i| (freq[i], i));
        PopularityIndex { freq, ascending }
    }

    /// Training interactions of a leave-one-out split are exactly the
    /// histories of its validation instances.
    pub fn from_valid_histories(valid: &[IndexedInstance], num_items: usize) -> Self {
        Self::from_events(valid.iter().flat_map(|i| i.history.iter().copied()), num_items)
    }

    pub fn frequency(&self, item: usize) -> usize {
        self.freq[item]
    }

    pub fn total(&self) -> usize {
        self.freq.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    /// Items from least to most frequent, ties by item id.
    pub fn ascending(&self) -> &[usize] {
        &self.ascending
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSpec {
    /// Least frequent fractions, e.g. 0.2 for the bottom 20%.
    pub tail: Vec<f64>,
    /// Most frequent fractions.
    pub head: Vec<f64>,
    /// Upper bounds of the coarse Tail and Medium ranges.
    pub coarse: (f64, f64),
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec {
            tail: vec![0.2, 0.5, 0.8],
            head: vec![0.01, 0.1, 0.2],
            coarse: (0.5, 0.8),
        }
    }
}

impl BucketSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |f: &f64| (0.0..=1.0).contains(f);
        if !self.tail.iter().chain(&self.head).all(in_unit)
            || !(0.0 <= self.coarse.0 && self.coarse.0 <= self.coarse.1 && self.coarse.1 <= 1.0)
        {
            return Err(Error::Config("bucket fractions must lie in [0, 1] and be ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coarse {
    Tail,
    Medium,
    Head,
}

impl Coarse {
    pub const ALL: [Coarse; 3] = [Coarse::Tail, Coarse::Medium, Coarse::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Coarse::Tail => "tail",
            Coarse::Medium => "medium",
            Coarse::Head => "head",
        }
    }
}

fn percent_label(prefix: &str, f: f64) -> String {
    format!("{prefix}_{}", (f * 100.0).round() as i64)
}

/// Bucket membership of every item.
#[derive(Debug, Clone, PartialEq)]
pub struct Buckets {
    pub coarse: Vec<Coarse>,
    /// `tail_20`, `head_1`, ... to per-item membership.
    pub named: BTreeMap<String, Vec<bool>>,
}

impl Buckets {
    pub fn coarse_size(&self, c: Coarse) -> usize {
        self.coarse.iter().filter(|&&x| x == c).count()
    }

    pub fn named_size(&self, name: &str) -> usize {
        self.named.get(name).map_or(0, |v| v.iter().filter(|&&b| b).count())
    }

    /// The named range label of tail / head membership used in dumps.
    pub fn label(&self, item: usize) -> &'static str {
        self.coarse[item].as_str()
    }
}

/// Cuts the ascending popularity order at `round(fraction * n)`.
pub fn bucket_items(index: &PopularityIndex, spec: &BucketSpec) -> Buckets {
    let n = index.len();
    let cut = |f: f64| ((f * n as f64).round() as usize).min(n);
    let mut rank = vec![0; n];
    for (r, &item) in index.ascending().iter().enumerate() {
        rank[item] = r;
    }
    let (c1, c2) = (cut(spec.coarse.0), cut(spec.coarse.1));
    let coarse = rank
        .iter()
        .map(|&r| {
            if r < c1 {
                Coarse::Tail
            } else if r < c2 {
                Coarse::Medium
            } else {
                Coarse::Head
            }
        })
        .collect();
    let mut named = BTreeMap::new();
    for &f in &spec.tail {
        let c = cut(f);
        named.insert(percent_label("tail", f), rank.iter().map(|&r| r < c).collect());
    }
    for &f in &spec.head {
        let c = n - cut(f);
        named.insert(percent_label("head", f), rank.iter().map(|&r| r >= c).collect());
    }
    Buckets { coarse, named }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    /// `None` for a bucket without test targets.
    pub recall_at_10: Option<f64>,
}

/// Recall@10 of instances grouped by their target's bucket. Rows: `all`,
/// the coarse buckets, then every named range.
pub fn bucket_table_from_ranks(instances: &[IndexedInstance], ranks: &[usize], buckets: &Buckets) -> Vec<BucketRow> {
    let row = |name: &str, keep: &dyn Fn(usize) -> bool| {
        let (mut hits, mut count) = (0usize, 0usize);
        for (inst, &r) in instances.iter().zip(ranks) {
            if keep(inst.target) {
                count += 1;
                hits += usize::from(r <= 10);
            }
        }
        BucketRow {
            bucket: name.to_string(),
            count,
            recall_at_10: (count > 0).then(|| hits as f64 / count as f64),
        }
    };
    let mut rows = vec![row("all", &|_| true)];
    for c in Coarse::ALL {
        rows.push(row(c.as_str(), &|t| buckets.coarse[t] == c));
    }
    for (name, members) in &buckets.named {
        rows.push(row(name, &|t| members[t]));
    }
    rows
}

pub fn per_bucket_performance(
    scorer: &dyn Scorer,
    instances: &[IndexedInstance],
    catalog: &Catalog,
    buckets: &Buckets,
    cfg: &EvalConfig,
) -> Result<Vec<BucketRow>> {
    let ranks: Vec<usize> = rank_instances(scorer, instances, catalog, cfg)?
        .into_iter()
        .map(|r| r.rank)
        .collect();
    Ok(bucket_table_from_ranks(instances, &ranks, buckets))
}

pub fn write_bucket_csv(path: &Path, rows: &[BucketRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bucket", "count", "recall@10"])?;
    for r in rows {
        w.write_record([
            r.bucket.clone(),
            r.count.to_string(),
            r.recall_at_10.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRow {
    pub bucket: Coarse,
    pub items: usize,
    pub item_share: f64,
    pub slots: usize,
    pub slot_share: f64,
    /// Slots divided by the bucket's item count.
    pub per_item_exposure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub k: usize,
    pub scope: String,
    pub instances: usize,
    pub total_slots: usize,
    /// Some instance had fewer than `k` eligible items.
    pub clipped: bool,
    pub rows: Vec<ExposureRow>,
}

/// Top-`k` lists over each target domain's full catalog minus the
/// history, tallied by coarse bucket. Ties go to the lower item index.
pub fn exposure_rates(
    scorer: &dyn Scorer,
    instances: &[IndexedInstance],
    catalog: &Catalog,
    buckets: &Buckets,
    k: usize,
) -> Result<ExposureReport> {
    if k == 0 {
        return Err(Error::Config("exposure K must be positive".into()));
    }
    let mut slots: BTreeMap<Coarse, usize> = Coarse::ALL.iter().map(|&c| (c, 0)).collect();
    let mut clipped = false;
    let mut total = 0;
    for chunk in instances.chunks(128) {
        let cands: Vec<Vec<usize>> = chunk
            .iter()
            .map(|inst| {
                let pool = catalog.pool(catalog.domain_index(inst.target));
                pool.iter()
                    .copied()
                    .filter(|i| !inst.history.contains(i))
                    .collect()
            })
            .collect();
        let refs: Vec<&IndexedInstance> = chunk.iter().collect();
        let lists: Vec<&[usize]> = cands.iter().map(Vec::as_slice).collect();
        let scores = scorer.score_batch(&refs, &lists)?;
        for (c, s) in cands.iter().zip(scores) {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("exposure scores".into()));
            }
            let mut order: Vec<usize> = (0..c.len()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(c[a].cmp(&c[b])));
            let take = k.min(c.len());
            clipped |= take < k;
            for &o in &order[..take] {
                *slots.get_mut(&buckets.coarse[c[o]]).unwrap() += 1;
            }
            total += take;
        }
    }
    let n_items = buckets.coarse.len();
    let rows = Coarse::ALL
        .iter()
        .map(|&c| {
            let items = buckets.coarse_size(c);
            let s = slots[&c];
            ExposureRow {
                bucket: c,
                items,
                item_share: if n_items > 0 { items as f64 / n_items as f64 } else { 0.0 },
                slots: s,
                slot_share: if total > 0 { s as f64 / total as f64 } else { 0.0 },
                per_item_exposure: if items > 0 { s as f64 / items as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(ExposureReport {
        k,
        scope: "full_domain_catalog".into(),
        instances: instances.len(),
        total_slots: total,
        clipped,
        rows,
    })
}

pub fn write_exposure_csv(path: &Path, report: &ExposureReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bucket", "items", "item_share", "slots", "slot_share", "per_item_exposure"])?;
    for r in &report.rows {
        w.write_record([
            r.bucket.as_str().to_string(),
            r.items.to_string(),
            r.item_share.to_string(),
            r.slots.to_string(),
            r.slot_share.to_string(),
            r.per_item_exposure.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    /// `aggregate`, `domain:<name>` or `partition:<same|mix|diff>`.
    pub scope: String,
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `(b - a) / a`; `None` when `a` is zero.
    pub relative: Option<f64>,
}

/// Relative change from report `a` to report `b` for every shared row.
pub fn relative_improvement(a: &MetricReport, b: &MetricReport) -> Result<Vec<RelativeRow>> {
    if a.config != b.config {
        return Err(Error::ProtocolMismatch("reports use different evaluation settings".into()));
    }
    if a.partitions.is_some() != b.partitions.is_some() {
        return Err(Error::ProtocolMismatch("only one report has partitions".into()));
    }
    if a.domains.keys().ne(b.domains.keys()) {
        return Err(Error::ProtocolMismatch("reports cover different domains".into()));
    }
    let mut pairs: Vec<(String, &MetricRow, &MetricRow)> = vec![("aggregate".into(), &a.aggregate, &b.aggregate)];
    for (d, ra) in &a.domains {
        pairs.push((format!("domain:{d}"), ra, &b.domains[d]));
    }
    if let (Some(pa), Some(pb)) = (&a.partitions, &b.partitions) {
        for (p, ra) in pa {
            let rb = pb
                .get(p)
                .ok_or_else(|| Error::ProtocolMismatch(format!("partition {} missing", p.as_str())))?;
            pairs.push((format!("partition:{}", p.as_str()), ra, rb));
        }
    }
    let mut rows = Vec::new();
    for (scope, ra, rb) in pairs {
        for (metric, &va) in &ra.metrics {
            let Some(vb) = rb.get(metric) else { continue };
            rows.push(RelativeRow {
                scope: scope.clone(),
                metric: metric.clone(),
                a: va,
                b: vb,
                relative: (va != 0.0).then(|| (vb - va) / va),
            });
        }
    }
    Ok(rows)
}

pub fn write_relative_csv(path: &Path, rows: &[RelativeRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scope", "metric", "a", "b", "relative"])?;
    for r in rows {
        w.write_record([
            r.scope.clone(),
            r.metric.clone(),
            r.a.to_string(),
            r.b.to_string(),
            r.relative.map_or_else(|| "undefined".to_string(), |v| v.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub item_id: String,
    pub domain: String,
    pub bucket: String,
    pub vector: Vec<f64>,
}

/// Item representations with domain and popularity annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

pub fn export_embeddings(
    model: &dyn Recommender,
    items: &[usize],
    catalog: &Catalog,
    buckets: &Buckets,
) -> Result<EmbeddingDump> {
    let m = item_matrix(model, items)?;
    let rows = items
        .iter()
        .zip(m.rows())
        .map(|(&i, v)| EmbeddingRow {
            item_id: catalog.item(i).item_id.clone(),
            domain: catalog.domain_name(i).to_string(),
            bucket: buckets.label(i).to_string(),
            vector: v.to_vec(),
        })
        .collect();
    Ok(EmbeddingDump { dim: model.dim(), rows })
}

impl EmbeddingDump {
    /// First line `dim count`, then `item_id domain bucket v1 .. vd`
    /// separated by tabs.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "{} {}", self.dim, self.rows.len())?;
            for r in &self.rows {
                write!(w, "{}\t{}\t{}", r.item_id, r.domain, r.bucket)?;
                for v in &r.vector {
                    write!(w, "\t{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |line: usize, msg: &str| Error::Ingest {
            path: path.to_path_buf(),
            line,
            message: msg.to_string(),
        };
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "missing header"))?
            .map_err(|e| Error::io(path, e))?;
        let mut parts = header.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(dim)), Some(Ok(count))) = (parts.next(), parts.next()) else {
            return Err(bad(1, "header must be `dim count`"));
        };
        let mut rows = Vec::with_capacity(count);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 + dim {
                return Err(bad(n + 2, "wrong field count"));
            }
            let vector = f[3..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(n + 2, "bad float")))
                .collect::<Result<_>>()?;
            rows.push(EmbeddingRow {
                item_id: f[0].into(),
                domain: f[1].into(),
                bucket: f[2].into(),
                vector,
            });
        }
        if rows.len() != count {
            return Err(bad(1, "row count does not match header"));
        }
        Ok(EmbeddingDump { dim, rows })
    }
}
