//! End-to-end behaviour of the prepare / train / evaluate / analyze commands
//! on a small synthetic corpus.

use std::fs;
use std::path::Path;

use mdrec::checkpoint::{load_model, read_matrix};
use mdrec::config::ExperimentConfig;
use mdrec::error::Error;
use mdrec::experiment::{
    build_model, build_tokenizer, cmd_analyze, cmd_evaluate, cmd_prepare, cmd_recipe, cmd_train, prepare_data,
    read_prepared, train_model, AnalyzeOptions, EvaluateOptions, Recipe, TrainOptions, TrainSummary,
};
use mdrec::model::Recommender;
use mdrec::pipeline::{MixStrategy, Partition, Role};
use mdrec::trainer::LogRecord;

fn small_config(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut overrides = vec![
        format!("run.output_dir=\"{}\"", dir.display()),
        "data.synthetic.num_users=200".to_string(),
        "data.synthetic.items_per_domain=36".into(),
        "model.encoder.model_dim=16".into(),
        "model.encoder.ffn_dim=32".into(),
        "model.id.model_dim=16".into(),
        "model.id.ffn_dim=32".into(),
        "train.max_steps=40".into(),
        "train.eval_every_steps=10".into(),
        "train.batch_size=16".into(),
        "train.learning_rate=0.003".into(),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml_str("", &overrides).unwrap()
}

fn read_log(dir: &Path) -> Vec<LogRecord> {
    fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_is_deterministic_and_stats_add_up() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_config(&tmp.path().join("a"), &[]);
    let b = small_config(&tmp.path().join("b"), &[]);
    let sa = cmd_prepare(&a).unwrap().stats;
    cmd_prepare(&b).unwrap();
    for f in ["manifest.jsonl", "items.jsonl", "vocab.tsv", "stats.json"] {
        let x = fs::read(a.output_dir().join("data").join(f)).unwrap();
        let y = fs::read(b.output_dir().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    assert!(a.output_dir().join("config.resolved.toml").exists());

    let art = read_prepared(&a).unwrap();
    let per_role = |r: Role| art.records.iter().filter(|m| m.role == r).count();
    assert_eq!(sa.train_instances, per_role(Role::Train));
    assert_eq!(sa.valid_instances, per_role(Role::Valid));
    assert_eq!(sa.test_instances, per_role(Role::Test));
    assert_eq!(sa.domains.iter().map(|d| d.test_instances).sum::<usize>(), sa.test_instances);
    assert_eq!(sa.domains.iter().map(|d| d.interactions).sum::<usize>(), sa.interactions);
    assert_eq!(sa.domains.iter().map(|d| d.items).sum::<usize>(), sa.items);
    assert_eq!(sa.test_partitions.values().sum::<usize>(), sa.test_instances);
    assert!(sa.multi_domain_user_fraction > 0.5);
}

#[test]
fn missing_data_file_is_a_data_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.jsonl");
    let cfg = small_config(
        tmp.path(),
        &[
            "data.source=\"files\"",
            &format!("data.interactions=\"{}\"", missing.display()),
            &format!("data.items=\"{}\"", missing.display()),
        ],
    );
    let e = cmd_prepare(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("nowhere.jsonl"), "{e}");
}

#[test]
fn train_requires_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[]);
    let e = cmd_train(&cfg, &TrainOptions::default()).unwrap_err();
    assert!(matches!(e, Error::Pipeline(_)), "{e}");
}

#[test]
fn zero_learning_rate_keeps_initial_weights_and_patience_one_stops_after_two_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        &["train.learning_rate=0.0", "train.patience_rounds=1", "train.max_steps=100"],
    );
    let data = prepare_data(&cfg.data, &MixStrategy::UserMixed).unwrap();
    let tok = build_tokenizer(&cfg, &data.corpus);
    let mut model = build_model(&cfg, &data.catalog, &tok).unwrap();
    let init = model.clone();
    let state = train_model(&cfg, &mut model, &data).unwrap();
    assert_eq!(state.log.len(), 2, "constant metric: one best round, one patience round");
    assert_eq!(state.step, 20);
    assert_eq!(state.best_step, 10);
    for id in init.params().ids() {
        assert_eq!(init.params().get(id), model.params().get(id), "{}", init.params().name(id));
    }
}

#[test]
fn training_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &["train.max_steps=120", "train.eval_every_steps=20", "train.patience_rounds=50"]);
    let data = prepare_data(&cfg.data, &MixStrategy::UserMixed).unwrap();
    let tok = build_tokenizer(&cfg, &data.corpus);
    let mut model = build_model(&cfg, &data.catalog, &tok).unwrap();
    let state = train_model(&cfg, &mut model, &data).unwrap();
    let first = state.log.first().unwrap().train_loss;
    let last = state.log.last().unwrap().train_loss;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn train_evaluate_analyze_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[]);
    cmd_prepare(&cfg).unwrap();
    let summary: TrainSummary = cmd_train(&cfg, &TrainOptions::default()).unwrap();
    assert!(summary.finished);
    let out = cfg.output_dir();
    for sub in ["best", "final", "state"] {
        assert!(out.join("checkpoints").join(sub).join("model.json").exists(), "{sub} checkpoint");
    }

    // The best checkpoint reproduces the logged best validation metric.
    let log = read_log(&out);
    let best = log.iter().map(|r| r.valid_recall_at_10).fold(f64::NEG_INFINITY, f64::max);
    let valid = cmd_evaluate(
        &cfg,
        &EvaluateOptions {
            role: Role::Valid,
            name: "valid".into(),
            ..EvaluateOptions::default()
        },
    )
    .unwrap();
    assert_eq!(valid.aggregate.get("recall@10"), Some(best));

    let test = cmd_evaluate(
        &cfg,
        &EvaluateOptions {
            partitions: true,
            ..EvaluateOptions::default()
        },
    )
    .unwrap();
    let parts = test.partitions.as_ref().unwrap();
    assert_eq!(parts.keys().copied().collect::<Vec<_>>(), Partition::ALL.to_vec());
    assert_eq!(parts.values().map(|r| r.count).sum::<usize>(), test.aggregate.count);
    assert!(test.ndcg1_matches_recall1());
    assert!(test.flags.unk_fraction.is_some());
    assert!(out.join("reports/test.json").exists() && out.join("reports/test.csv").exists());

    // Zero-shot mode refuses overlapping domains.
    let e = cmd_evaluate(
        &cfg,
        &EvaluateOptions {
            zero_shot: true,
            ..EvaluateOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(e, Error::DomainOverlap(_)), "{e}");

    let best_dir = out.join("checkpoints/best");
    let analysis = cmd_analyze(
        &cfg,
        &AnalyzeOptions {
            checkpoint: None,
            compare: Some(best_dir.clone()),
        },
    )
    .unwrap();
    let shares: f64 = analysis.exposure.rows.iter().map(|r| r.slot_share).sum();
    assert!((shares - 1.0).abs() < 1e-12);
    let art = read_prepared(&cfg).unwrap();
    assert_eq!(analysis.embedding_rows, art.catalog.len());
    for row in analysis.relative.unwrap() {
        assert!(row.relative.is_none_or(|r| r == 0.0), "{row:?}");
    }
    let csv = fs::read_to_string(out.join("analysis/exposure.csv")).unwrap();
    let csv_total: f64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((csv_total - 1.0).abs() < 1e-9);

    // Checkpoint tensors load back into an identical model.
    let (reloaded, unseen) = load_model(&best_dir, &art.catalog).unwrap();
    assert_eq!(unseen, 0);
    let raw = read_matrix(&best_dir.join("tensors").join("embed.word.bin")).unwrap();
    let id = reloaded.params().id("embed.word").unwrap();
    assert_eq!(&raw, reloaded.params().get(id));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = small_config(&tmp.path().join("full"), &[]);
    let split = small_config(&tmp.path().join("split"), &[]);
    cmd_prepare(&full).unwrap();
    cmd_prepare(&split).unwrap();
    cmd_train(&full, &TrainOptions::default()).unwrap();
    let partial = cmd_train(
        &split,
        &TrainOptions {
            resume: false,
            halt_at: Some(25),
        },
    )
    .unwrap();
    assert!(!partial.finished);
    assert_eq!(partial.steps, 25);
    cmd_train(
        &split,
        &TrainOptions {
            resume: true,
            halt_at: None,
        },
    )
    .unwrap();
    assert_eq!(read_log(&full.output_dir()), read_log(&split.output_dir()));
    for sub in ["best", "final"] {
        let a = full.output_dir().join("checkpoints").join(sub).join("tensors");
        let b = split.output_dir().join("checkpoints").join(sub).join("tensors");
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{sub}/{name:?}");
        }
    }
}

#[test]
fn peft_training_logs_adapter_parameter_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &["model.lora.rank=4", "model.lora.alpha=8.0"]);
    cmd_prepare(&cfg).unwrap();
    let s = cmd_train(&cfg, &TrainOptions::default()).unwrap();
    // two layers, query and value targets, R (d_in + d_out)
    assert_eq!(s.trainable_parameters, 2 * 2 * 4 * (16 + 16));
    assert!(s.total_parameters > s.trainable_parameters);
}

#[test]
fn id_model_trains_through_the_same_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &["model.kind=\"id\""]);
    cmd_prepare(&cfg).unwrap();
    cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let report = cmd_evaluate(&cfg, &EvaluateOptions::default()).unwrap();
    assert_eq!(report.flags.unseen_target_items.is_some(), true);
    assert!(report.flags.unk_fraction.is_none());
}

#[test]
fn recipes_emit_the_expected_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &["train.max_steps=10", "train.eval_every_steps=10"]);
    let mix = cmd_recipe(&cfg, Recipe::MixStrategyStudy).unwrap();
    let settings: Vec<&str> = mix.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["single_domain", "domain_split", "user_mixed"]);
    assert!(mix.rows.iter().all(|r| r.values.contains_key("Diff/recall@10")));

    let ablation = cmd_recipe(&cfg, Recipe::AblationStudy).unwrap();
    let settings: Vec<&str> = ablation.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["plain", "with_id", "with_prompt"]);

    let peft = cmd_recipe(&cfg, Recipe::PeftStudy).unwrap();
    let settings: Vec<&str> = peft.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["fpft", "lora_r4", "lora_r16", "lora_r32", "lora_r64"]);
    for (r, row) in [4usize, 16, 32, 64].iter().zip(&peft.rows[1..]) {
        assert_eq!(row.values["trainable_parameters"], (2 * 2 * r * 32) as f64);
    }
    let dir = cfg.output_dir().join("recipes/peft_study");
    assert!(dir.join("summary.json").exists() && dir.join("summary.csv").exists());
}
