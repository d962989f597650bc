//! Commands binding data preparation, training, evaluation, analysis and
//! multi-run recipes.
//!
//! Layout under the run's output directory:
//!
//! ```text
//! config.resolved.toml
//! data/      manifest.jsonl items.jsonl vocab.tsv stats.json stats.csv
//! checkpoints/best checkpoints/final checkpoints/state
//! train_log.jsonl train_summary.json
//! reports/   <name>.json <name>.csv
//! analysis/  buckets.csv exposure.csv exposure.json relative.csv embeddings.tsv
//! recipes/<recipe>/  summary.json summary.csv cells/*.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    bucket_items, bucket_table_from_ranks, exposure_rates, export_embeddings, relative_improvement,
    write_bucket_csv, write_exposure_csv, write_relative_csv, BucketRow, Buckets, ExposureReport,
    PopularityIndex, RelativeRow,
};
use crate::baseline_id::IdModel;
use crate::checkpoint::{load_model, load_train_state, save_model, save_train_state};
use crate::config::{DataConfig, DataSource, ExperimentConfig};
use crate::corpus::{
    generate_synthetic_corpus, load_interactions, load_item_meta, write_item_meta, Catalog, Corpus,
};
use crate::encoder::{Encoder, LoraConfig};
use crate::error::{Error, Result};
use crate::evaluator::{rank_instances, EmbeddingScorer, EvalConfig, MetricReport, RankedInstance};
use crate::model::{AnyModel, ModelKind, Recommender, TextModel};
use crate::pipeline::{
    build_sequences, five_core_filter, leave_one_out_split, manifest_records, DatasetSplit,
    IndexedInstance, IndexedSplit, ManifestRecord, MixStrategy, Partition, Provenance, Role,
};
use crate::textualize::{build_vocab, InputBuilder, InputVariant, Tokenizer, VocabConfig};
use crate::trainer::{restore, validation_config, TrainState, Trainer};

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        io(parent, fs::create_dir_all(parent))?;
    }
    io(path, fs::write(path, serde_json::to_string_pretty(value)? + "\n"))
}

fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut out = String::new();
    for v in values {
        out.push_str(&serde_json::to_string(v)?);
        out.push('\n');
    }
    io(path, fs::write(path, out))
}

/// Parsed corpus plus bookkeeping about what ingest discarded.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub ingest_errors: usize,
    pub dropped_untitled: usize,
    pub dropped_events: usize,
}

pub fn load_corpus(data: &DataConfig) -> Result<LoadedCorpus> {
    let mut loaded = match data.source {
        DataSource::Synthetic => LoadedCorpus {
            corpus: generate_synthetic_corpus(&data.synthetic)?,
            ingest_errors: 0,
            dropped_untitled: 0,
            dropped_events: 0,
        },
        DataSource::Files => {
            let (ipath, mpath) = match (&data.interactions, &data.items) {
                (Some(i), Some(m)) => (i, m),
                _ => return Err(Error::Config("file source needs interactions and items paths".into())),
            };
            for p in [ipath, mpath] {
                if !p.exists() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found"),
                    ));
                }
            }
            let items = load_item_meta(mpath, data.format)?;
            let events = load_interactions(ipath, data.format)?;
            for e in items.errors.iter().chain(&events.errors) {
                log::warn!("{e}");
            }
            let (corpus, dropped) = Corpus::from_parts_lenient(items.records, events.records)?;
            LoadedCorpus {
                corpus,
                ingest_errors: items.errors.len() + events.errors.len(),
                dropped_untitled: items.dropped_untitled,
                dropped_events: dropped,
            }
        }
    };
    if !data.domains.is_empty() {
        let unknown: Vec<&String> = data
            .domains
            .iter()
            .filter(|d| !loaded.corpus.domains().contains(d))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown domains {unknown:?}")));
        }
        loaded.corpus = loaded.corpus.restrict_domains(&data.domains);
    }
    Ok(loaded)
}

/// Filtered corpus, its catalog and one leave-one-out split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub corpus: Corpus,
    pub catalog: Catalog,
    pub split: DatasetSplit,
    pub indexed: IndexedSplit,
}

/// k-core filtering, sequence building and splitting of an already loaded
/// corpus. The catalog depends only on the filtered corpus, so every mix
/// strategy over the same corpus shares item indices.
pub fn prepare_from_corpus(raw: &Corpus, data: &DataConfig, strategy: &MixStrategy) -> Result<PreparedData> {
    let corpus = if data.core_k > 1 {
        five_core_filter(raw, data.core_k)?
    } else {
        raw.clone()
    };
    if corpus.is_empty() {
        return Err(Error::Pipeline(format!("no interactions left after {}-core filtering", data.core_k)));
    }
    let seqs = build_sequences(&corpus, strategy)?;
    let mut split = leave_one_out_split(&seqs.sequences);
    split.excluded_short += seqs.dropped_short;
    split.provenance = Some(Provenance {
        strategy: strategy.clone(),
        core_k: data.core_k,
    });
    let catalog = Catalog::from_corpus(&corpus);
    let indexed = IndexedSplit::from_split(&split, &catalog)?;
    Ok(PreparedData {
        corpus,
        catalog,
        split,
        indexed,
    })
}

pub fn prepare_data(data: &DataConfig, strategy: &MixStrategy) -> Result<PreparedData> {
    prepare_from_corpus(&load_corpus(data)?.corpus, data, strategy)
}

pub fn vocab_config(cfg: &ExperimentConfig) -> VocabConfig {
    VocabConfig {
        min_freq: cfg.data.min_token_freq,
        item_id_tokens: cfg.model.variant == InputVariant::WithId,
        prompt_tokens: cfg.model.variant == InputVariant::WithPrompt,
    }
}

pub fn build_tokenizer(cfg: &ExperimentConfig, corpus: &Corpus) -> Tokenizer {
    build_vocab(corpus, &vocab_config(cfg))
}

/// Fresh model of the configured kind over `catalog`.
pub fn build_model(cfg: &ExperimentConfig, catalog: &Catalog, tokenizer: &Tokenizer) -> Result<AnyModel> {
    match cfg.model.kind {
        ModelKind::Text => {
            let mut ec = cfg.model.encoder.clone();
            if ec.vocab_size == 0 {
                ec.vocab_size = tokenizer.vocab_size();
            }
            let mut enc = Encoder::new(ec)?;
            if let Some(l) = &cfg.model.lora {
                enc.apply_lora(l)?;
            }
            let builder = InputBuilder::new(
                tokenizer,
                enc.config().direction,
                cfg.model.variant,
                cfg.data.max_title_tokens,
                enc.config().max_positions,
                None,
            );
            Ok(AnyModel::Text(TextModel::new(
                enc,
                tokenizer.clone(),
                builder,
                cfg.data.max_items,
                catalog,
            )?))
        }
        ModelKind::Id => Ok(AnyModel::Id(IdModel::for_catalog(cfg.model.id.clone(), catalog)?)),
    }
}

/// Trains `model` on the split to termination; the best parameters are
/// loaded into `model` afterwards.
pub fn train_model(cfg: &ExperimentConfig, model: &mut AnyModel, data: &PreparedData) -> Result<TrainState> {
    let trainer = Trainer::new(
        cfg.train.clone(),
        &cfg.eval,
        &data.catalog,
        &data.indexed.train,
        &data.indexed.valid,
    )?;
    log::info!(
        "training {:?} model ({} trainable parameters) on {} instances",
        model.kind(),
        model.params().count(true),
        data.indexed.train.len()
    );
    trainer.fit(model)
}

pub fn rank_with(model: &dyn Recommender, instances: &[IndexedInstance], catalog: &Catalog, eval: &EvalConfig) -> Result<Vec<RankedInstance>> {
    let scorer = EmbeddingScorer::new(model)?;
    rank_instances(&scorer, instances, catalog, eval)
}

/// Test report with Same/Mix/Diff partitions.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &dyn Recommender,
    instances: &[IndexedInstance],
    catalog: &Catalog,
) -> Result<MetricReport> {
    let ranks = rank_with(model, instances, catalog, &cfg.eval)?;
    Ok(MetricReport::from_ranks(instances, &ranks, catalog, &cfg.eval, Some(cfg.data.max_items)))
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train_instances: usize,
    pub valid_instances: usize,
    pub test_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub domains: Vec<DomainStats>,
    /// Users active in at least two domains.
    pub multi_domain_users: usize,
    pub multi_domain_user_fraction: f64,
    pub sequences: usize,
    pub excluded_short: usize,
    pub train_instances: usize,
    pub valid_instances: usize,
    pub test_instances: usize,
    pub test_partitions: BTreeMap<Partition, usize>,
    pub ingest_errors: usize,
    pub dropped_untitled: usize,
    pub dropped_events: usize,
}

pub fn data_stats(loaded: &LoadedCorpus, data: &PreparedData, max_items: usize) -> DataStats {
    let corpus = &data.corpus;
    let mut user_domains: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in corpus.events() {
        user_domains.entry(&e.user_id).or_default().insert(&e.domain);
    }
    let multi = user_domains.values().filter(|d| d.len() >= 2).count();
    let count_role = |insts: &[IndexedInstance], d: usize| {
        insts.iter().filter(|i| data.catalog.domain_index(i.target) == d).count()
    };
    let domains = data
        .catalog
        .domains()
        .iter()
        .enumerate()
        .map(|(di, name)| {
            let events: Vec<_> = corpus.events().iter().filter(|e| &e.domain == name).collect();
            DomainStats {
                domain: name.clone(),
                users: events.iter().map(|e| e.user_id.as_str()).collect::<HashSet<_>>().len(),
                items: data.catalog.pool(di).len(),
                interactions: events.len(),
                train_instances: count_role(&data.indexed.train, di),
                valid_instances: count_role(&data.indexed.valid, di),
                test_instances: count_role(&data.indexed.test, di),
            }
        })
        .collect();
    let mut test_partitions: BTreeMap<Partition, usize> = Partition::ALL.iter().map(|&p| (p, 0)).collect();
    for inst in &data.indexed.test {
        if let Some(p) = inst.partition(&data.catalog, max_items) {
            *test_partitions.get_mut(&p).unwrap() += 1;
        }
    }
    DataStats {
        users: user_domains.len(),
        items: data.catalog.len(),
        interactions: corpus.events().len(),
        domains,
        multi_domain_users: multi,
        multi_domain_user_fraction: if user_domains.is_empty() {
            0.0
        } else {
            multi as f64 / user_domains.len() as f64
        },
        sequences: data.split.test.len(),
        excluded_short: data.split.excluded_short,
        train_instances: data.indexed.train.len(),
        valid_instances: data.indexed.valid.len(),
        test_instances: data.indexed.test.len(),
        test_partitions,
        ingest_errors: loaded.ingest_errors,
        dropped_untitled: loaded.dropped_untitled,
        dropped_events: loaded.dropped_events,
    }
}

fn write_stats_csv(path: &Path, stats: &DataStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain", "users", "items", "interactions", "train_instances", "valid_instances", "test_instances"])?;
    let mut row = |name: &str, u: usize, i: usize, n: usize, tr: usize, va: usize, te: usize| {
        w.write_record([name.to_string(), u.to_string(), i.to_string(), n.to_string(), tr.to_string(), va.to_string(), te.to_string()])
    };
    for d in &stats.domains {
        row(&d.domain, d.users, d.items, d.interactions, d.train_instances, d.valid_instances, d.test_instances)?;
    }
    row(
        "total",
        stats.users,
        stats.items,
        stats.interactions,
        stats.train_instances,
        stats.valid_instances,
        stats.test_instances,
    )?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    let p = dir.join("config.resolved.toml");
    io(&p, fs::write(&p, cfg.to_toml()?))
}

#[derive(Debug, Clone)]
pub struct PrepareOutput {
    pub dir: PathBuf,
    pub stats: DataStats,
}

/// Loads, filters and splits the corpus and writes the manifest,
/// vocabulary, item table and statistics.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareOutput> {
    let out = cfg.output_dir();
    write_resolved_config(cfg, &out)?;
    let dir = out.join("data");
    io(&dir, fs::create_dir_all(&dir))?;
    let loaded = load_corpus(&cfg.data)?;
    let data = prepare_from_corpus(&loaded.corpus, &cfg.data, &cfg.data.mix_strategy)?;
    write_jsonl(&dir.join("manifest.jsonl"), &manifest_records(&data.split, cfg.data.max_items))?;
    write_item_meta(&dir.join("items.jsonl"), data.catalog.items())?;
    build_tokenizer(cfg, &data.corpus).write(&dir.join("vocab.tsv"))?;
    let stats = data_stats(&loaded, &data, cfg.data.max_items);
    write_json(&dir.join("stats.json"), &stats)?;
    write_stats_csv(&dir.join("stats.csv"), &stats)?;
    log::info!(
        "prepared {} users, {} items, {} test instances in {}",
        stats.users,
        stats.items,
        stats.test_instances,
        dir.display()
    );
    Ok(PrepareOutput { dir, stats })
}

/// Data written by [`cmd_prepare`], read back.
pub struct PreparedArtifacts {
    pub catalog: Catalog,
    pub split: IndexedSplit,
    pub records: Vec<ManifestRecord>,
    pub tokenizer: Tokenizer,
}

pub fn read_prepared(cfg: &ExperimentConfig) -> Result<PreparedArtifacts> {
    let dir = cfg.output_dir().join("data");
    let manifest = dir.join("manifest.jsonl");
    if !manifest.exists() {
        return Err(Error::Pipeline(format!(
            "manifest {} not found; run `prepare` first",
            manifest.display()
        )));
    }
    let items = load_item_meta(&dir.join("items.jsonl"), cfg.data.format)?;
    if let Some(e) = items.errors.into_iter().next() {
        return Err(e);
    }
    let catalog = Catalog::new(items.records);
    let file = io(&manifest, fs::File::open(&manifest))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = io(&manifest, line)?;
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: manifest.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let split = IndexedSplit::from_manifest(&records, &catalog)?;
    let tokenizer = Tokenizer::read(&dir.join("vocab.tsv"))?;
    Ok(PreparedArtifacts {
        catalog,
        split,
        records,
        tokenizer,
    })
}

// ------------------------------------------------------------------ train

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/state`.
    pub resume: bool,
    /// Stop (and save resumable state) once this many steps are done.
    pub halt_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub total_parameters: usize,
    pub trainable_parameters: usize,
    pub steps: u64,
    pub finished: bool,
    pub best_step: u64,
    pub best_valid_recall_at_10: Option<f64>,
    pub train_domains: Vec<String>,
}

fn train_domains(catalog: &Catalog, split: &IndexedSplit) -> Vec<String> {
    split
        .train
        .iter()
        .chain(&split.valid)
        .flat_map(|i| i.history.iter().chain(std::iter::once(&i.target)))
        .map(|&i| catalog.domain_name(i).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let out = cfg.output_dir();
    let art = read_prepared(cfg)?;
    let ckpt = out.join("checkpoints");
    let (mut model, mut state) = if opts.resume {
        load_train_state(&ckpt.join("state"), &art.catalog)?
    } else {
        let model = build_model(cfg, &art.catalog, &art.tokenizer)?;
        write_resolved_config(cfg, &out)?;
        let trainer_probe = Trainer::new(
            cfg.train.clone(),
            &cfg.eval,
            &art.catalog,
            &art.split.train,
            &art.split.valid,
        )?;
        let state = trainer_probe.init_state(&model);
        (model, state)
    };
    let trainer = Trainer::new(
        cfg.train.clone(),
        &cfg.eval,
        &art.catalog,
        &art.split.train,
        &art.split.valid,
    )?;
    log::info!(
        "model has {} parameters, {} trainable",
        model.params().count(false),
        model.params().count(true)
    );
    trainer.run(&mut model, &mut state, opts.halt_at)?;
    save_train_state(&ckpt.join("state"), &model, &state)?;
    let domains = train_domains(&art.catalog, &art.split);
    if state.finished {
        save_model(&ckpt.join("best"), &model)?;
        write_json(&ckpt.join("best").join("domains.json"), &domains)?;
        if let Some(fin) = &state.final_params {
            let mut last = model.clone();
            restore(&mut last, fin);
            save_model(&ckpt.join("final"), &last)?;
            write_json(&ckpt.join("final").join("domains.json"), &domains)?;
        }
    }
    write_jsonl(&out.join("train_log.jsonl"), &state.log)?;
    let summary = TrainSummary {
        kind: model.kind(),
        total_parameters: model.params().count(false),
        trainable_parameters: model.params().count(true),
        steps: state.step,
        finished: state.finished,
        best_step: state.best_step,
        best_valid_recall_at_10: state.best_metric,
        train_domains: domains,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

// --------------------------------------------------------------- evaluate

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    /// Defaults to `checkpoints/best` of this run.
    pub checkpoint: Option<PathBuf>,
    pub role: Role,
    pub partitions: bool,
    pub zero_shot: bool,
    /// Report file stem under `reports/`.
    pub name: String,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            checkpoint: None,
            role: Role::Test,
            partitions: false,
            zero_shot: false,
            name: "test".into(),
        }
    }
}

fn read_domains(checkpoint: &Path) -> Result<Vec<String>> {
    let p = checkpoint.join("domains.json");
    Ok(serde_json::from_str(&io(&p, fs::read_to_string(&p))?)?)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, opts: &EvaluateOptions) -> Result<MetricReport> {
    let out = cfg.output_dir();
    let art = read_prepared(cfg)?;
    let ckpt = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoints").join("best"));
    let (model, unseen) = load_model(&ckpt, &art.catalog)?;
    let (eval, instances) = match opts.role {
        Role::Valid => {
            let n = match cfg.train.max_valid_instances {
                0 => art.split.valid.len(),
                n => n.min(art.split.valid.len()),
            };
            (validation_config(&cfg.eval), &art.split.valid[..n])
        }
        Role::Test => (cfg.eval.clone(), &art.split.test[..]),
        Role::Train => (cfg.eval.clone(), &art.split.train[..]),
    };
    let scorer = EmbeddingScorer::new(&model)?;
    let mut report = if opts.zero_shot {
        let domains = read_domains(&ckpt)?;
        crate::evaluator::zero_shot_evaluate(&scorer, instances, &art.catalog, &eval, &domains)?
    } else {
        crate::evaluator::evaluate(
            &scorer,
            instances,
            &art.catalog,
            &eval,
            opts.partitions.then_some(cfg.data.max_items),
        )?
    };
    match &model {
        AnyModel::Text(m) => report.flags.unk_fraction = Some(m.unk_fraction(&art.catalog)),
        AnyModel::Id(_) => {
            let seen: HashSet<usize> = if unseen > 0 {
                HashSet::new()
            } else {
                art.split
                    .train
                    .iter()
                    .flat_map(|i| i.history.iter().copied().chain(std::iter::once(i.target)))
                    .collect()
            };
            report.flags.unseen_target_items =
                Some(instances.iter().filter(|i| !seen.contains(&i.target)).count());
        }
    }
    if eval.cutoffs.contains(&1) && !report.ndcg1_matches_recall1() {
        return Err(Error::NonFinite("NDCG@1 differs from Recall@1".into()));
    }
    let rdir = out.join("reports");
    io(&rdir, fs::create_dir_all(&rdir))?;
    report.write_json(&rdir.join(format!("{}.json", opts.name)))?;
    report.write_csv(&rdir.join(format!("{}.csv", opts.name)))?;
    Ok(report)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub checkpoint: Option<PathBuf>,
    /// Baseline checkpoint for the relative-improvement table (`a` side).
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub buckets: Vec<BucketRow>,
    pub exposure: ExposureReport,
    pub relative: Option<Vec<RelativeRow>>,
    pub embedding_rows: usize,
}

pub fn popularity_buckets(cfg: &ExperimentConfig, catalog: &Catalog, split: &IndexedSplit) -> Buckets {
    let index = PopularityIndex::from_valid_histories(&split.valid, catalog.len());
    bucket_items(&index, &cfg.analysis.buckets)
}

pub fn cmd_analyze(cfg: &ExperimentConfig, opts: &AnalyzeOptions) -> Result<AnalysisOutput> {
    let out = cfg.output_dir();
    let art = read_prepared(cfg)?;
    let ckpt = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoints").join("best"));
    let (model, _) = load_model(&ckpt, &art.catalog)?;
    let buckets = popularity_buckets(cfg, &art.catalog, &art.split);
    let dir = out.join("analysis");
    io(&dir, fs::create_dir_all(&dir))?;

    let scorer = EmbeddingScorer::new(&model)?;
    let ranks = rank_instances(&scorer, &art.split.test, &art.catalog, &cfg.eval)?;
    let rank_values: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    let bucket_rows = bucket_table_from_ranks(&art.split.test, &rank_values, &buckets);
    write_bucket_csv(&dir.join("buckets.csv"), &bucket_rows)?;

    let exposure = exposure_rates(&scorer, &art.split.test, &art.catalog, &buckets, cfg.analysis.exposure_k)?;
    write_exposure_csv(&dir.join("exposure.csv"), &exposure)?;
    write_json(&dir.join("exposure.json"), &exposure)?;

    let relative = match &opts.compare {
        None => None,
        Some(base) => {
            let report_b = MetricReport::from_ranks(
                &art.split.test,
                &ranks,
                &art.catalog,
                &cfg.eval,
                Some(cfg.data.max_items),
            );
            let (base_model, _) = load_model(base, &art.catalog)?;
            let report_a = evaluate_model(cfg, &base_model, &art.split.test, &art.catalog)?;
            let rows = relative_improvement(&report_a, &report_b)?;
            write_relative_csv(&dir.join("relative.csv"), &rows)?;
            Some(rows)
        }
    };

    let all: Vec<usize> = (0..art.catalog.len()).collect();
    let dump = export_embeddings(&model, &all, &art.catalog, &buckets)?;
    dump.write(&dir.join("embeddings.tsv"))?;
    Ok(AnalysisOutput {
        buckets: bucket_rows,
        exposure,
        relative,
        embedding_rows: dump.rows.len(),
    })
}

// ---------------------------------------------------------------- recipes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    MixStrategyStudy,
    PartitionStudy,
    ColdstartStudy,
    PeftStudy,
    AblationStudy,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::MixStrategyStudy,
        Recipe::PartitionStudy,
        Recipe::ColdstartStudy,
        Recipe::PeftStudy,
        Recipe::AblationStudy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::MixStrategyStudy => "mix_strategy_study",
            Recipe::PartitionStudy => "partition_study",
            Recipe::ColdstartStudy => "coldstart_study",
            Recipe::PeftStudy => "peft_study",
            Recipe::AblationStudy => "ablation_study",
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe `{s}`")))
    }
}

/// One (setting, seed) cell of a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRow {
    pub setting: String,
    pub seed: u64,
    /// Keys like `all/recall@10`, `diff/ndcg@10`, `tail_20/recall@10`.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub recipe: Recipe,
    pub rows: Vec<RecipeRow>,
}

impl RecipeReport {
    pub fn value(&self, setting: &str, seed: u64, key: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.seed == seed)
            .and_then(|r| r.values.get(key).copied())
    }

    /// Median of `key` over the seeds of `setting`.
    pub fn median(&self, setting: &str, key: &str) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting)
            .filter_map(|r| r.values.get(key).copied())
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("summary.json"), self)?;
        let keys: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.values.keys()).collect();
        let p = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&p)?;
        let mut header = vec!["setting".to_string(), "seed".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.setting.clone(), r.seed.to_string()];
            rec.extend(keys.iter().map(|k| r.values.get(*k).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }
}

/// Flattens a report into `scope/metric` keys (`all`, domains as
/// `domain:<d>`, partitions by name), plus `scope/count`.
pub fn report_values(report: &MetricReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut put = |scope: &str, row: &crate::evaluator::MetricRow| {
        out.insert(format!("{scope}/count"), row.count as f64);
        for (k, v) in &row.metrics {
            out.insert(format!("{scope}/{k}"), *v);
        }
    };
    put("all", &report.aggregate);
    for (d, row) in &report.domains {
        put(&format!("domain:{d}"), row);
    }
    if let Some(parts) = &report.partitions {
        for (p, row) in parts {
            put(p.as_str(), row);
        }
    }
    out
}

/// Shared state of one recipe execution.
struct RecipeContext<'a> {
    cfg: &'a ExperimentConfig,
    raw: Corpus,
    mixed: PreparedData,
    cells: PathBuf,
}

impl<'a> RecipeContext<'a> {
    fn new(cfg: &'a ExperimentConfig, dir: &Path) -> Result<Self> {
        let raw = load_corpus(&cfg.data)?.corpus;
        let mixed = prepare_from_corpus(&raw, &cfg.data, &MixStrategy::UserMixed)?;
        let cells = dir.join("cells");
        io(&cells, fs::create_dir_all(&cells))?;
        Ok(RecipeContext { cfg, raw, mixed, cells })
    }

    fn prepare(&self, strategy: &MixStrategy) -> Result<PreparedData> {
        let data = prepare_from_corpus(&self.raw, &self.cfg.data, strategy)?;
        if data.catalog.items() != self.mixed.catalog.items() {
            return Err(Error::Pipeline("mix strategies produced different catalogs".into()));
        }
        Ok(data)
    }

    fn train(&self, cfg: &ExperimentConfig, data: &PreparedData) -> Result<AnyModel> {
        let tok = build_tokenizer(cfg, &data.corpus);
        let mut model = build_model(cfg, &data.catalog, &tok)?;
        train_model(cfg, &mut model, data)?;
        Ok(model)
    }

    fn save_cell(&self, setting: &str, seed: u64, report: &MetricReport) -> Result<()> {
        report.write_json(&self.cells.join(format!("{setting}_seed{seed}.json")))
    }

    fn test(&self) -> &[IndexedInstance] {
        &self.mixed.indexed.test
    }
}

/// Trains a model per mix strategy and evaluates all of them on the mixed
/// test set.
fn mix_strategy_study(ctx: &RecipeContext) -> Result<Vec<RecipeRow>> {
    let mut rows = Vec::new();
    let split = ctx.prepare(&MixStrategy::DomainSplit)?;
    let singles = ctx
        .mixed
        .catalog
        .domains()
        .iter()
        .map(|d| Ok((d.clone(), ctx.prepare(&MixStrategy::SingleDomain(d.clone()))?)))
        .collect::<Result<Vec<_>>>()?;
    for &seed in &ctx.cfg.run.recipe_seeds {
        let cfg = ctx.cfg.with_seed(seed);
        let catalog = &ctx.mixed.catalog;

        let mut ranks = vec![None; ctx.test().len()];
        for (domain, data) in &singles {
            let model = ctx.train(&cfg, data)?;
            let idx: Vec<usize> = (0..ctx.test().len())
                .filter(|&i| catalog.domain_name(ctx.test()[i].target) == domain)
                .collect();
            let subset: Vec<IndexedInstance> = idx.iter().map(|&i| ctx.test()[i].clone()).collect();
            for (&i, r) in idx.iter().zip(rank_with(&model, &subset, catalog, &cfg.eval)?) {
                ranks[i] = Some(r);
            }
        }
        let ranks: Vec<RankedInstance> = ranks.into_iter().map(|r| r.expect("every target domain has a model")).collect();
        let single = MetricReport::from_ranks(ctx.test(), &ranks, catalog, &cfg.eval, Some(cfg.data.max_items));

        let ds_model = ctx.train(&cfg, &split)?;
        let ds = evaluate_model(&cfg, &ds_model, ctx.test(), catalog)?;
        let um_model = ctx.train(&cfg, &ctx.mixed)?;
        let um = evaluate_model(&cfg, &um_model, ctx.test(), catalog)?;

        for (setting, report) in [("single_domain", &single), ("domain_split", &ds), ("user_mixed", &um)] {
            ctx.save_cell(setting, seed, report)?;
            rows.push(RecipeRow {
                setting: setting.into(),
                seed,
                values: report_values(report),
            });
        }
    }
    Ok(rows)
}

fn kind_cfg(cfg: &ExperimentConfig, kind: ModelKind) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.model.kind = kind;
    c
}

/// Text versus ID on the mixed data, with the relative change per
/// partition.
fn partition_study(ctx: &RecipeContext) -> Result<Vec<RecipeRow>> {
    let mut rows = Vec::new();
    for &seed in &ctx.cfg.run.recipe_seeds {
        let base = ctx.cfg.with_seed(seed);
        let mut reports = Vec::new();
        for (setting, kind) in [("id", ModelKind::Id), ("text", ModelKind::Text)] {
            let cfg = kind_cfg(&base, kind);
            let model = ctx.train(&cfg, &ctx.mixed)?;
            let report = evaluate_model(&cfg, &model, ctx.test(), &ctx.mixed.catalog)?;
            ctx.save_cell(setting, seed, &report)?;
            rows.push(RecipeRow {
                setting: setting.into(),
                seed,
                values: report_values(&report),
            });
            reports.push(report);
        }
        let rel = relative_improvement(&reports[0], &reports[1])?;
        rows.push(RecipeRow {
            setting: "text_over_id".into(),
            seed,
            values: rel
                .iter()
                .filter_map(|r| r.relative.map(|v| (format!("{}/{}", r.scope, r.metric), v)))
                .collect(),
        });
    }
    Ok(rows)
}

/// Per-bucket accuracy and exposure of text and ID models.
fn coldstart_study(ctx: &RecipeContext) -> Result<Vec<RecipeRow>> {
    let mut rows = Vec::new();
    let buckets = popularity_buckets(ctx.cfg, &ctx.mixed.catalog, &ctx.mixed.indexed);
    for &seed in &ctx.cfg.run.recipe_seeds {
        let base = ctx.cfg.with_seed(seed);
        for (setting, kind) in [("id", ModelKind::Id), ("text", ModelKind::Text)] {
            let cfg = kind_cfg(&base, kind);
            let model = ctx.train(&cfg, &ctx.mixed)?;
            rows.push(RecipeRow {
                setting: setting.into(),
                seed,
                values: coldstart_values(&cfg, &model, &ctx.mixed, &buckets)?,
            });
        }
    }
    Ok(rows)
}

/// Bucket recall (`<bucket>/recall@10`, `<bucket>/count`) and exposure
/// (`exposure:<bucket>/slot_share`, `exposure:<bucket>/per_item`).
pub fn coldstart_values(
    cfg: &ExperimentConfig,
    model: &dyn Recommender,
    data: &PreparedData,
    buckets: &Buckets,
) -> Result<BTreeMap<String, f64>> {
    let scorer = EmbeddingScorer::new(model)?;
    let test = &data.indexed.test;
    let ranks: Vec<usize> = rank_instances(&scorer, test, &data.catalog, &cfg.eval)?
        .into_iter()
        .map(|r| r.rank)
        .collect();
    let mut values = BTreeMap::new();
    for row in bucket_table_from_ranks(test, &ranks, buckets) {
        values.insert(format!("{}/count", row.bucket), row.count as f64);
        if let Some(r) = row.recall_at_10 {
            values.insert(format!("{}/recall@10", row.bucket), r);
        }
    }
    let exposure = exposure_rates(&scorer, test, &data.catalog, buckets, cfg.analysis.exposure_k)?;
    for r in &exposure.rows {
        values.insert(format!("exposure:{}/slot_share", r.bucket.as_str()), r.slot_share);
        values.insert(format!("exposure:{}/per_item", r.bucket.as_str()), r.per_item_exposure);
    }
    Ok(values)
}

pub const PEFT_RANKS: [usize; 4] = [4, 16, 32, 64];

/// Pre-trains on per-domain sequences, then fine-tunes on mixed sequences
/// with all parameters or with adapters of several ranks.
fn peft_study(ctx: &RecipeContext) -> Result<Vec<RecipeRow>> {
    if ctx.cfg.model.kind != ModelKind::Text {
        return Err(Error::Config("peft_study needs model.kind = text".into()));
    }
    let split = ctx.prepare(&MixStrategy::DomainSplit)?;
    let mut rows = Vec::new();
    let template = ctx.cfg.model.lora.clone().unwrap_or_default();
    for &seed in &ctx.cfg.run.recipe_seeds {
        let mut cfg = ctx.cfg.with_seed(seed);
        cfg.model.lora = None;
        let base = ctx.train(&cfg, &split)?;
        let mut regimes: Vec<(String, Option<usize>)> = vec![("fpft".into(), None)];
        regimes.extend(PEFT_RANKS.iter().map(|&r| (format!("lora_r{r}"), Some(r))));
        for (setting, rank) in regimes {
            let mut model = base.clone();
            if let (Some(rank), AnyModel::Text(m)) = (rank, &mut model) {
                m.encoder_mut().apply_lora(&LoraConfig {
                    rank,
                    alpha: rank as f64,
                    targets: template.targets.clone(),
                })?;
            }
            let trainable = model.params().count(true);
            train_model(&cfg, &mut model, &ctx.mixed)?;
            let report = evaluate_model(&cfg, &model, ctx.test(), &ctx.mixed.catalog)?;
            ctx.save_cell(&setting, seed, &report)?;
            let mut values = report_values(&report);
            values.insert("trainable_parameters".into(), trainable as f64);
            rows.push(RecipeRow { setting, seed, values });
        }
    }
    Ok(rows)
}

/// Plain titles versus titles with item ids versus a user prompt.
fn ablation_study(ctx: &RecipeContext) -> Result<Vec<RecipeRow>> {
    if ctx.cfg.model.kind != ModelKind::Text {
        return Err(Error::Config("ablation_study needs model.kind = text".into()));
    }
    let mut rows = Vec::new();
    for &seed in &ctx.cfg.run.recipe_seeds {
        for (setting, variant) in [
            ("plain", InputVariant::Plain),
            ("with_id", InputVariant::WithId),
            ("with_prompt", InputVariant::WithPrompt),
        ] {
            let mut cfg = ctx.cfg.with_seed(seed);
            cfg.model.variant = variant;
            let model = ctx.train(&cfg, &ctx.mixed)?;
            let report = evaluate_model(&cfg, &model, ctx.test(), &ctx.mixed.catalog)?;
            ctx.save_cell(setting, seed, &report)?;
            rows.push(RecipeRow {
                setting: setting.into(),
                seed,
                values: report_values(&report),
            });
        }
    }
    Ok(rows)
}

/// Runs a named recipe and writes `recipes/<name>/summary.{json,csv}`.
pub fn cmd_recipe(cfg: &ExperimentConfig, recipe: Recipe) -> Result<RecipeReport> {
    let dir = cfg.output_dir().join("recipes").join(recipe.as_str());
    write_resolved_config(cfg, &dir)?;
    let ctx = RecipeContext::new(cfg, &dir)?;
    let rows = match recipe {
        Recipe::MixStrategyStudy => mix_strategy_study(&ctx)?,
        Recipe::PartitionStudy => partition_study(&ctx)?,
        Recipe::ColdstartStudy => coldstart_study(&ctx)?,
        Recipe::PeftStudy => peft_study(&ctx)?,
        Recipe::AblationStudy => ablation_study(&ctx)?,
    };
    let report = RecipeReport { recipe, rows };
    report.write(&dir)?;
    Ok(report)
}

/// Appends one line to a file, creating it when needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = io(path, fs::OpenOptions::new().create(true).append(true).open(path))?;
    io(path, writeln!(f, "{line}"))
}
