//! Sampled-candidate ranking evaluation with Recall@N and NDCG@N.
//!
//! Every test instance is ranked against its target plus a fixed set of
//! negatives drawn from the target's domain. Negatives are seeded by a hash
//! of (eval seed, user id, target id), so they never depend on how much
//! randomness training consumed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::model::{item_matrix, user_matrix, Recommender};
use crate::pipeline::{IndexedInstance, Partition};
use crate::seed::rng_for;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    #[default]
    InDomainSampled,
    FullDomainCatalog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub num_eval_negatives: usize,
    pub seed: u64,
    pub candidate_scope: CandidateScope,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoffs: vec![1, 10],
            num_eval_negatives: 1000,
            seed: 2024,
            candidate_scope: CandidateScope::InDomainSampled,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty()
            || self.cutoffs[0] == 0
            || self.cutoffs.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "cutoffs {:?} must be positive and strictly ascending",
                self.cutoffs
            )));
        }
        if self.num_eval_negatives == 0 && self.candidate_scope == CandidateScope::InDomainSampled {
            return Err(Error::Config("num_eval_negatives must be positive".into()));
        }
        Ok(())
    }
}

/// Target (always first) plus its negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    pub items: Vec<usize>,
    /// The domain held fewer eligible items than requested, so every
    /// non-target item of the domain was used.
    pub fallback: bool,
}

pub fn build_candidates(inst: &IndexedInstance, catalog: &Catalog, cfg: &EvalConfig) -> Result<Candidates> {
    let domain = catalog.domain_index(inst.target);
    let pool = catalog.pool(domain);
    let others = pool.len().saturating_sub(1);
    if others == 0 {
        return Err(Error::PoolTooSmall {
            domain: catalog.domains()[domain].clone(),
            requested: cfg.num_eval_negatives.max(1),
            available: 0,
        });
    }
    let tpos = pool
        .iter()
        .position(|&i| i == inst.target)
        .expect("target belongs to its own domain pool");
    let skip_target = |k: usize| pool[if k < tpos { k } else { k + 1 }];
    let mut items = Vec::with_capacity(others.min(cfg.num_eval_negatives) + 1);
    items.push(inst.target);
    let fallback = match cfg.candidate_scope {
        CandidateScope::FullDomainCatalog => {
            items.extend((0..others).map(skip_target));
            false
        }
        CandidateScope::InDomainSampled if cfg.num_eval_negatives >= others => {
            items.extend((0..others).map(skip_target));
            cfg.num_eval_negatives > others
        }
        CandidateScope::InDomainSampled => {
            let target_id = &catalog.item(inst.target).item_id;
            let mut rng = rng_for(
                cfg.seed,
                "eval-candidates",
                &[inst.user_id.as_bytes(), target_id.as_bytes()],
            );
            let picks = rand::seq::index::sample(&mut rng, others, cfg.num_eval_negatives);
            items.extend(picks.into_iter().map(skip_target));
            false
        }
    };
    Ok(Candidates { items, fallback })
}

/// `1 + #{negatives scoring >= target}` for scores with the target first.
pub fn rank_target(scores: &[f64]) -> Result<usize> {
    let (&target, negatives) = scores
        .split_first()
        .ok_or_else(|| Error::Shape("no candidate scores".into()))?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores".into()));
    }
    Ok(1 + negatives.iter().filter(|&&s| s >= target).count())
}

pub fn recall_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Anything that can score candidate items for a batch of instances.
pub trait Scorer {
    fn score_batch(&self, instances: &[&IndexedInstance], candidates: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// Scorer from a closure `(instance, item) -> score`.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&IndexedInstance, usize) -> f64> Scorer for FnScorer<F> {
    fn score_batch(&self, instances: &[&IndexedInstance], candidates: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(instances
            .iter()
            .zip(candidates)
            .map(|(inst, c)| c.iter().map(|&i| (self.0)(inst, i)).collect())
            .collect())
    }
}

/// Inner-product scorer over a frozen two-tower model. Item vectors of the
/// whole bound catalog are computed once.
pub struct EmbeddingScorer<'m> {
    model: &'m dyn Recommender,
    items: Matrix,
}

impl<'m> EmbeddingScorer<'m> {
    pub fn new(model: &'m dyn Recommender) -> Result<Self> {
        let all: Vec<usize> = (0..model.num_items()).collect();
        Ok(EmbeddingScorer {
            model,
            items: item_matrix(model, &all)?,
        })
    }

    pub fn item_vectors(&self) -> &Matrix {
        &self.items
    }

    pub fn user_vectors(&self, instances: &[&IndexedInstance]) -> Result<Matrix> {
        let hist: Vec<&[usize]> = instances.iter().map(|i| i.history.as_slice()).collect();
        user_matrix(self.model, &hist)
    }
}

impl Scorer for EmbeddingScorer<'_> {
    fn score_batch(&self, instances: &[&IndexedInstance], candidates: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let users = self.user_vectors(instances)?;
        Ok(candidates
            .iter()
            .enumerate()
            .map(|(r, c)| {
                let u = users.row(r);
                c.iter().map(|&i| u.dot(&self.items.row(i))).collect()
            })
            .collect())
    }
}

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedInstance {
    pub rank: usize,
    pub num_candidates: usize,
    pub fallback: bool,
}

/// Ranks every instance's target among its candidates.
pub fn rank_instances(
    scorer: &dyn Scorer,
    instances: &[IndexedInstance],
    catalog: &Catalog,
    cfg: &EvalConfig,
) -> Result<Vec<RankedInstance>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_CHUNK) {
        let cands = chunk
            .iter()
            .map(|i| build_candidates(i, catalog, cfg))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&IndexedInstance> = chunk.iter().collect();
        let lists: Vec<&[usize]> = cands.iter().map(|c| c.items.as_slice()).collect();
        let scores = scorer.score_batch(&refs, &lists)?;
        for (c, s) in cands.iter().zip(scores) {
            if s.len() != c.items.len() {
                return Err(Error::Shape(format!(
                    "scorer returned {} scores for {} candidates",
                    s.len(),
                    c.items.len()
                )));
            }
            out.push(RankedInstance {
                rank: rank_target(&s)?,
                num_candidates: c.items.len(),
                fallback: c.fallback,
            });
        }
    }
    Ok(out)
}

/// Instance count and mean metric values keyed `recall@N` / `ndcg@N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricRow {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>, cutoffs: &[usize]) -> Self {
        let mut count = 0usize;
        let mut sums = vec![(0.0f64, 0.0f64); cutoffs.len()];
        for r in ranks {
            count += 1;
            for (s, &n) in sums.iter_mut().zip(cutoffs) {
                s.0 += recall_at_n(r, n);
                s.1 += ndcg_at_n(r, n);
            }
        }
        let mut metrics = BTreeMap::new();
        if count > 0 {
            for (s, &n) in sums.iter().zip(cutoffs) {
                metrics.insert(format!("recall@{n}"), s.0 / count as f64);
                metrics.insert(format!("ndcg@{n}"), s.1 / count as f64);
            }
        }
        MetricRow { count, metrics }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }

    /// Count-weighted mean of several rows.
    pub fn weighted_mean<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> MetricRow {
        let mut count = 0;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for row in rows {
            count += row.count;
            for (k, v) in &row.metrics {
                *sums.entry(k.clone()).or_default() += v * row.count as f64;
            }
        }
        if count > 0 {
            sums.values_mut().for_each(|v| *v /= count as f64);
        } else {
            sums.clear();
        }
        MetricRow { count, metrics: sums }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportFlags {
    /// Instances whose domain was too small for the requested negatives.
    pub fallback_instances: usize,
    pub zero_shot: bool,
    /// Share of `[UNK]` tokens over the evaluated catalog (text models).
    pub unk_fraction: Option<f64>,
    /// Test targets never seen in training (ID models).
    pub unseen_target_items: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: EvalConfig,
    pub domains: BTreeMap<String, MetricRow>,
    pub aggregate: MetricRow,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partitions: Option<BTreeMap<Partition, MetricRow>>,
    pub flags: ReportFlags,
}

impl MetricReport {
    /// Builds a report from per-instance ranks. When `partition_max_items`
    /// is set, instances are also grouped into Same/Mix/Diff using their
    /// truncated histories.
    pub fn from_ranks(
        instances: &[IndexedInstance],
        ranks: &[RankedInstance],
        catalog: &Catalog,
        cfg: &EvalConfig,
        partition_max_items: Option<usize>,
    ) -> Self {
        let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (inst, r) in instances.iter().zip(ranks) {
            by_domain
                .entry(catalog.domain_name(inst.target).to_string())
                .or_default()
                .push(r.rank);
        }
        let domains: BTreeMap<String, MetricRow> = by_domain
            .into_iter()
            .map(|(d, rs)| (d, MetricRow::from_ranks(rs, &cfg.cutoffs)))
            .collect();
        let aggregate = MetricRow::from_ranks(ranks.iter().map(|r| r.rank), &cfg.cutoffs);
        let partitions = partition_max_items.map(|max| {
            let mut groups: BTreeMap<Partition, Vec<usize>> =
                Partition::ALL.iter().map(|&p| (p, Vec::new())).collect();
            for (inst, r) in instances.iter().zip(ranks) {
                if let Some(p) = inst.partition(catalog, max) {
                    groups.entry(p).or_default().push(r.rank);
                }
            }
            groups
                .into_iter()
                .map(|(p, rs)| (p, MetricRow::from_ranks(rs, &cfg.cutoffs)))
                .collect()
        });
        MetricReport {
            config: cfg.clone(),
            domains,
            aggregate,
            partitions,
            flags: ReportFlags {
                fallback_instances: ranks.iter().filter(|r| r.fallback).count(),
                ..ReportFlags::default()
            },
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn metric_names(&self) -> Vec<String> {
        self.config
            .cutoffs
            .iter()
            .flat_map(|n| [format!("recall@{n}"), format!("ndcg@{n}")])
            .collect()
    }

    /// Flat table: `scope,name,count,<metric columns>`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let names = self.metric_names();
        let mut header = vec!["scope".to_string(), "name".into(), "count".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        let mut emit = |scope: &str, name: &str, row: &MetricRow| -> Result<()> {
            let mut rec = vec![scope.to_string(), name.to_string(), row.count.to_string()];
            rec.extend(
                names
                    .iter()
                    .map(|m| row.get(m).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
            Ok(())
        };
        for (d, row) in &self.domains {
            emit("domain", d, row)?;
        }
        emit("aggregate", "all", &self.aggregate)?;
        if let Some(parts) = &self.partitions {
            for (p, row) in parts {
                emit("partition", p.as_str(), row)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Both NDCG@1 and Recall@1 present and equal in every row.
    pub fn ndcg1_matches_recall1(&self) -> bool {
        let rows = self
            .domains
            .values()
            .chain(std::iter::once(&self.aggregate))
            .chain(self.partitions.iter().flat_map(|p| p.values()));
        rows.into_iter()
            .all(|r| r.get("ndcg@1") == r.get("recall@1"))
    }
}

/// Ranks and reports in one call.
pub fn evaluate(
    scorer: &dyn Scorer,
    instances: &[IndexedInstance],
    catalog: &Catalog,
    cfg: &EvalConfig,
    partition_max_items: Option<usize>,
) -> Result<MetricReport> {
    cfg.validate()?;
    let ranks = rank_instances(scorer, instances, catalog, cfg)?;
    Ok(MetricReport::from_ranks(instances, &ranks, catalog, cfg, partition_max_items))
}

/// Evaluation on domains disjoint from `train_domains`.
pub fn zero_shot_evaluate(
    scorer: &dyn Scorer,
    instances: &[IndexedInstance],
    catalog: &Catalog,
    cfg: &EvalConfig,
    train_domains: &[String],
) -> Result<MetricReport> {
    let train: BTreeSet<&str> = train_domains.iter().map(String::as_str).collect();
    let overlap: BTreeSet<String> = instances
        .iter()
        .flat_map(|i| i.history.iter().chain(std::iter::once(&i.target)))
        .map(|&item| catalog.domain_name(item))
        .filter(|d| train.contains(d))
        .map(str::to_string)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::DomainOverlap(overlap.into_iter().collect()));
    }
    let mut report = evaluate(scorer, instances, catalog, cfg, None)?;
    report.flags.zero_shot = true;
    Ok(report)
}
