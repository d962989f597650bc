//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! console. Exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{ensure, Check};
use mdrec::analysis::{bucket_items, exposure_rates, BucketSpec, Coarse, PopularityIndex};
use mdrec::config::ExperimentConfig;
use mdrec::corpus::Catalog;
use mdrec::encoder::{Encoder, EncoderAdapter, EncoderConfig, LoraConfig, LoraTarget};
use mdrec::evaluator::{build_candidates, evaluate, EvalConfig, FnScorer, MetricRow};
use mdrec::experiment::{build_model, build_tokenizer, cmd_recipe, prepare_data, train_model, Recipe, RecipeReport};
use mdrec::model::{AnyModel, Recommender, TextModel};
use mdrec::pipeline::{IndexedInstance, MixStrategy};
use mdrec::tensor::{Graph, Matrix, Segment};
use mdrec::textualize::{
    build_item_input, build_user_input, build_vocab_from_items, pad_batch, Direction, InputBuilder, InputVariant,
    TokenizedInput, UserLayout, VocabConfig, CLS, EOS,
};
use mdrec::trainer::{sampled_ce_loss, LossReduction, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Check)> = vec![
        ("1 golden input construction and attention", Duration::from_secs(60), golden),
        ("2 loss value and finite-difference gradients", Duration::from_secs(60), loss_and_gradients),
        ("3 evaluator equals brute-force oracle", Duration::from_secs(120), evaluator_oracle),
        ("4 random-scorer protocol statistics", Duration::from_secs(300), protocol_statistics),
        ("5 pipeline properties on fuzzed corpora", Duration::from_secs(120), pipeline_properties),
        ("6 mixing study ordering on Diff", Duration::from_secs(1800), mixing_study),
        ("7 cold-start tail bucket, text over ID", Duration::from_secs(1800), cold_start),
        ("8 adapter contracts", Duration::from_secs(600), lora_contracts),
        ("9 causal and padding invariants", Duration::from_secs(60), invariants),
        ("10 recipe reproducibility", Duration::from_secs(1800), reproducibility),
    ];
    // `cargo test --test acceptance -- 1 9` runs only the listed criteria.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if !only.is_empty() && !only.iter().any(|o| o == number) {
            continue;
        }
        let start = Instant::now();
        let outcome = match std::panic::catch_unwind(check) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed > budget {
                Err(format!("took {elapsed:.0?}, budget {budget:.0?}"))
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => println!("criterion {name}: PASS ({:.1}s)", elapsed.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("criterion {name}: FAIL ({:.1}s): {e}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ------------------------------------------------------------------- 1

fn golden() -> Check {
    let items = [
        common::item("a", "Office", "Red pen"),
        common::item("b", "Office", "blue ink, pen"),
    ];
    let tok = build_vocab_from_items(&items, &VocabConfig::default());
    // Frequency descending, then alphabetical, after the four specials.
    let (pen, blue, ink, red) = (4, 5, 6, 7);
    ensure!(tok.encode("Red pen") == vec![red, pen], "encode(Red pen) = {:?}", tok.encode("Red pen"));
    ensure!(tok.encode("blue ink, pen") == vec![blue, ink, pen], "encode of second title");

    let a = [red, pen];
    let b = [blue, ink, pen];
    let cases: [(&str, TokenizedInput, Vec<u32>); 4] = [
        ("NAR item", build_item_input(&a, Direction::Nar).map_err(err)?, vec![CLS, red, pen]),
        ("AR item", build_item_input(&a, Direction::Ar).map_err(err)?, vec![red, pen, EOS]),
        (
            "NAR user",
            build_user_input(&[&a, &b], Direction::Nar, &UserLayout::default(), 40).map_err(err)?,
            vec![CLS, red, pen, blue, ink, pen],
        ),
        (
            "AR user",
            build_user_input(&[&a, &b], Direction::Ar, &UserLayout::default(), 40).map_err(err)?,
            vec![red, pen, blue, ink, pen, EOS],
        ),
    ];
    for (name, input, expected) in &cases {
        ensure!(input.token_ids == *expected, "{name}: {:?} != {:?}", input.token_ids, expected);
    }
    ensure!(cases[2].1.pool_position() == 0, "NAR pools at [CLS]");
    ensure!(cases[3].1.pool_position() == 5, "AR pools at </s>");
    ensure!(cases[2].1.item_boundaries == vec![(1, 3), (3, 6)], "NAR item spans");
    // Budget 5 drops the oldest item.
    let cut = build_user_input(&[&a, &b], Direction::Ar, &UserLayout::default(), 5).map_err(err)?;
    ensure!(cut.token_ids == vec![blue, ink, pen, EOS], "budgeted AR user {:?}", cut.token_ids);

    // Single head, d = 2: softmax(Q K^T / sqrt 2) V, written out by hand.
    let q = [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
    let k = [[1.0, 1.0], [0.0, 1.0], [2.0, 0.0]];
    let v = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
    let s = 1.0 / 2f64.sqrt();
    let expected = |causal: bool| -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let visible = if causal { i + 1 } else { 3 };
            let logits: Vec<f64> = k[..visible].iter().map(|kj| (qi[0] * kj[0] + qi[1] * kj[1]) * s).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut row = [0.0; 2];
            for (wj, vj) in w.iter().zip(&v) {
                row[0] += wj / z * vj[0];
                row[1] += wj / z * vj[1];
            }
            out.push(row);
        }
        out
    };
    // Row 0 of the bidirectional case, fully expanded.
    let e = [s.exp(), 0.0f64.exp(), (2.0 * s).exp()];
    let z = e[0] + e[1] + e[2];
    let row0 = [(e[0] * 1.0 + e[1] * 3.0 + e[2] * 0.5) / z, (e[0] * 2.0 - e[1] + e[2] * 0.5) / z];
    ensure!((expected(false)[0][0] - row0[0]).abs() < 1e-12, "expanded row 0");

    let to_m = |a: &[[f64; 2]; 3]| Matrix::from_shape_fn((3, 2), |(i, j)| a[i][j]);
    let store = mdrec::tensor::ParamStore::new();
    for causal in [false, true] {
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(to_m(&q)), g.constant(to_m(&k)), g.constant(to_m(&v)));
        let out = g.attention(qv, kv, vv, &Segment::packed([3]), 1, causal).map_err(err)?;
        for (i, row) in expected(causal).iter().enumerate() {
            for j in 0..2 {
                let got = g.value(out)[[i, j]];
                ensure!((got - row[j]).abs() <= 1e-9, "causal={causal} [{i},{j}]: {got} vs {}", row[j]);
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- 2

fn tiny_text_setup(direction: Direction, seed: u64) -> (AnyModel, Catalog, Vec<IndexedInstance>) {
    let titles = [
        "red pen", "blue pen", "green ink", "steel stapler", "paper clips", "desk lamp", "red lamp", "blue ink",
    ];
    let items: Vec<_> = titles
        .iter()
        .enumerate()
        .map(|(i, t)| common::item(&format!("i{i}"), if i < 4 { "A" } else { "B" }, t))
        .collect();
    let catalog = Catalog::new(items.clone());
    let tok = build_vocab_from_items(&items, &VocabConfig::default());
    let enc = Encoder::new(EncoderConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_positions: 24,
        vocab_size: tok.vocab_size(),
        direction,
        dropout_rate: 0.0,
        seed,
    })
    .unwrap();
    let builder = InputBuilder::new(&tok, direction, InputVariant::Plain, 40, 24, None);
    let model = TextModel::new(enc, tok, builder, 10, &catalog).unwrap();
    let instances = vec![
        IndexedInstance {
            user_id: "u1".into(),
            history: vec![0, 4],
            target: 1,
        },
        IndexedInstance {
            user_id: "u2".into(),
            history: vec![2, 3, 5],
            target: 6,
        },
        IndexedInstance {
            user_id: "u3".into(),
            history: vec![7],
            target: 0,
        },
    ];
    (AnyModel::Text(model), catalog, instances)
}

/// `|a - n| / max(|a|, |n|, 1e-6)` in the 2-norm over one tensor.
fn tensor_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let norm = |m: &Matrix| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    norm(&(analytic - numeric)) / norm(analytic).max(norm(numeric)).max(1e-6)
}

fn loss_and_gradients() -> Check {
    for s in [1usize, 4, 9] {
        for score in [0.0, 1.7, -3.2] {
            let l = sampled_ce_loss(&[(score, vec![score; s])], LossReduction::Mean).map_err(err)?;
            let want = ((s + 1) as f64).ln();
            ensure!((l - want).abs() <= 1e-9, "S={s}: loss {l} vs ln(S+1) {want}");
        }
    }

    for direction in [Direction::Nar, Direction::Ar] {
        let (mut model, catalog, instances) = tiny_text_setup(direction, 11);
        // Initial weights are small enough that deep gradients sit near
        // 1e-10, below what a finite difference resolves. Spread them out.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<_> = model.params().ids().collect();
        for &id in &ids {
            model.params_mut().get_mut(id).mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
        }
        let trainer = Trainer::new(
            TrainConfig {
                batch_size: 3,
                num_negatives: 2,
                ..TrainConfig::default()
            },
            &EvalConfig::default(),
            &catalog,
            &instances,
            &instances,
        )
        .map_err(err)?;
        let batch: Vec<&IndexedInstance> = instances.iter().collect();
        let negatives = vec![vec![2, 3], vec![4, 7], vec![1, 2]];

        let grads = {
            let mut g = Graph::new(model.params());
            let loss = trainer.loss_graph(&model, &mut g, &batch, &negatives, None).map_err(err)?;
            g.backward(loss)
        };
        // Five-point stencil, truncation error O(h^4).
        let h = 1e-5;
        let mut worst = (0.0f64, String::new());
        for id in ids {
            let shape = model.params().get(id).dim();
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Matrix::zeros(shape));
            let mut numeric = Matrix::zeros(shape);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = model.params().get(id)[[r, c]];
                    let mut at = |x: f64| {
                        model.params_mut().get_mut(id)[[r, c]] = x;
                        trainer.batch_loss(&model, &batch, &negatives).map_err(err)
                    };
                    let (p2, p1, m1, m2) = (at(orig + 2.0 * h)?, at(orig + h)?, at(orig - h)?, at(orig - 2.0 * h)?);
                    model.params_mut().get_mut(id)[[r, c]] = orig;
                    numeric[[r, c]] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                }
            }
            let e = tensor_rel_err(&analytic, &numeric);
            if e > worst.0 {
                worst = (e, model.params().name(id).to_string());
            }
        }
        ensure!(worst.0 <= 1e-4, "{direction:?}: worst relative error {:.2e} at {}", worst.0, worst.1);
    }
    Ok(())
}

// ------------------------------------------------------------------- 3

/// Ranks by sorting every candidate, ties placed ahead of the target.
fn oracle_rank(scores: &[f64]) -> usize {
    let mut order: Vec<(f64, bool)> = scores.iter().enumerate().map(|(i, &s)| (s, i == 0)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    order.iter().position(|x| x.1).unwrap() + 1
}

fn oracle_row(ranks: &[usize], cutoffs: &[usize]) -> MetricRow {
    let mut metrics = BTreeMap::new();
    for &n in cutoffs {
        let mut rec = 0.0;
        let mut ndcg = 0.0;
        for &r in ranks {
            if r <= n {
                rec += 1.0;
                ndcg += 1.0 / ((r + 1) as f64).log2();
            }
        }
        metrics.insert(format!("recall@{n}"), rec / ranks.len() as f64);
        metrics.insert(format!("ndcg@{n}"), ndcg / ranks.len() as f64);
    }
    MetricRow {
        count: ranks.len(),
        metrics,
    }
}

fn evaluator_oracle() -> Check {
    let catalog = common::flat_catalog(2, 1100);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = common::random_instances(&mut rng, &catalog, 1000, 6, true);
    let cfg = EvalConfig {
        cutoffs: vec![1, 5, 10, 20],
        ..EvalConfig::default()
    };
    // Coarse integer scores force many ties.
    let score = |inst: &IndexedInstance, item: usize| (common::uniform_score(9, &inst.user_id, item) * 40.0).floor();
    let report = evaluate(&FnScorer(score), &instances, &catalog, &cfg, Some(10)).map_err(err)?;

    let mut all = Vec::new();
    let mut per_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for inst in &instances {
        let cands = build_candidates(inst, &catalog, &cfg).map_err(err)?;
        let items = &cands.items;
        ensure!(items.len() == 1001, "{} candidates", items.len());
        ensure!(items[0] == inst.target, "target is not first");
        let mut sorted = items.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(sorted.len() == 1001, "duplicate candidates");
        let d = catalog.domain_index(inst.target);
        ensure!(items.iter().all(|&i| catalog.domain_index(i) == d), "candidate outside the target domain");
        let scores: Vec<f64> = items.iter().map(|&i| score(inst, i)).collect();
        let r = oracle_rank(&scores);
        all.push(r);
        per_domain.entry(catalog.domain_name(inst.target).to_string()).or_default().push(r);
    }
    ensure!(report.aggregate == oracle_row(&all, &cfg.cutoffs), "aggregate row differs from oracle");
    for (d, ranks) in &per_domain {
        ensure!(report.domains.get(d) == Some(&oracle_row(ranks, &cfg.cutoffs)), "domain {d} differs from oracle");
    }
    ensure!(report.ndcg1_matches_recall1(), "NDCG@1 != Recall@1");
    ensure!(report.flags.fallback_instances == 0, "unexpected fallback");

    // Re-evaluating reproduces the report exactly.
    let again = evaluate(&FnScorer(score), &instances, &catalog, &cfg, Some(10)).map_err(err)?;
    ensure!(again == report, "evaluation is not deterministic");
    Ok(())
}

// ------------------------------------------------------------------- 4

fn protocol_statistics() -> Check {
    let catalog = common::flat_catalog(1, 1200);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 12_000;
    let instances = common::random_instances(&mut rng, &catalog, n, 3, false);
    let cfg = EvalConfig::default();
    let scorer = FnScorer(|inst: &IndexedInstance, item: usize| common::uniform_score(17, &inst.user_id, item));
    let report = evaluate(&scorer, &instances, &catalog, &cfg, None).map_err(err)?;
    let p = 10.0 / 1001.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let r10 = report.aggregate.get("recall@10").ok_or("missing recall@10")?;
    ensure!((r10 - p).abs() <= 3.0 * sigma, "recall@10 {r10} vs {p} (3 sigma = {})", 3.0 * sigma);
    ensure!(report.ndcg1_matches_recall1(), "NDCG@1 != Recall@1");

    // Skewed popularity so the three buckets differ in size and content.
    let events: Vec<usize> = (0..40_000)
        .map(|_| {
            let x: f64 = rng.random();
            ((x * x * x) * catalog.len() as f64) as usize
        })
        .collect();
    let pop = PopularityIndex::from_events(events, catalog.len());
    let buckets = bucket_items(&pop, &BucketSpec::default());
    let k = 10;
    let exposure = exposure_rates(&scorer, &instances, &catalog, &buckets, k).map_err(err)?;
    ensure!(exposure.total_slots == n * k, "slot count");
    let total: f64 = exposure.rows.iter().map(|r| r.slot_share).sum();
    ensure!((total - 1.0).abs() < 1e-12, "slot shares sum to {total}");
    for row in &exposure.rows {
        let q = row.item_share;
        let sigma = (q * (1.0 - q) / exposure.total_slots as f64).sqrt();
        ensure!(
            (row.slot_share - q).abs() <= 3.0 * sigma,
            "{:?}: slot share {} vs item share {q} (3 sigma = {})",
            row.bucket,
            row.slot_share,
            3.0 * sigma
        );
    }
    ensure!(
        Coarse::ALL.iter().all(|&c| buckets.coarse_size(c) > 0),
        "empty coarse bucket"
    );
    Ok(())
}

// ------------------------------------------------------------------- 5

fn pipeline_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..60 {
        let max_events = if case % 10 == 0 { 10_000 } else { 2_000 };
        let corpus = common::random_corpus(&mut rng, max_events);
        let k = if case % 2 == 0 { 5 } else { rng.random_range(1..8) };
        common::check_k_core(&corpus, k).map_err(|e| format!("case {case}, k={k}: {e}"))?;
        for strategy in [MixStrategy::UserMixed, MixStrategy::DomainSplit] {
            common::check_leave_one_out(&corpus, &strategy).map_err(|e| format!("case {case}, {strategy}: {e}"))?;
        }
        if let Some(d) = corpus.domains().first() {
            common::check_leave_one_out(&corpus, &MixStrategy::SingleDomain(d.clone()))
                .map_err(|e| format!("case {case}, single domain: {e}"))?;
        }
        common::check_partitions(&corpus, rng.random_range(1..12)).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 6, 7

/// The default synthetic corpus and a from-scratch L=2, d=64 encoder, with
/// a shortened training schedule.
fn study_config(name: &str) -> ExperimentConfig {
    let dir = std::env::temp_dir().join(format!("mdrec-acceptance-{}-{name}", std::process::id()));
    ExperimentConfig::from_toml_str(
        "",
        &[
            format!("run.output_dir=\"{}\"", dir.display()),
            "run.recipe_seeds=[1,2,3]".into(),
            "model.encoder.num_layers=2".into(),
            "model.encoder.model_dim=64".into(),
            "train.max_steps=1200".into(),
            "train.eval_every_steps=200".into(),
            "train.learning_rate=0.001".into(),
            "train.patience_rounds=3".into(),
        ],
    )
    .unwrap()
}

fn median_of(report: &RecipeReport, setting: &str, key: &str) -> Result<f64, String> {
    report
        .median(setting, key)
        .ok_or_else(|| format!("no `{key}` for `{setting}`"))
}

fn mixing_study() -> Check {
    let cfg = study_config("mix");
    let report = cmd_recipe(&cfg, Recipe::MixStrategyStudy).map_err(err)?;
    let _ = std::fs::remove_dir_all(cfg.output_dir());
    ensure!(report.rows.len() == 9, "{} rows, expected 3 per seed", report.rows.len());
    let key = "Diff/recall@10";
    let um = median_of(&report, "user_mixed", key)?;
    let ds = median_of(&report, "domain_split", key)?;
    let sd = median_of(&report, "single_domain", key)?;
    println!("    Diff recall@10 medians: user_mixed {um:.4}, domain_split {ds:.4}, single_domain {sd:.4}");
    ensure!(um > ds && ds > sd, "ordering violated: {um} / {ds} / {sd}");
    Ok(())
}

fn cold_start() -> Check {
    let cfg = study_config("cold");
    let report = cmd_recipe(&cfg, Recipe::ColdstartStudy).map_err(err)?;
    let _ = std::fs::remove_dir_all(cfg.output_dir());
    let key = "tail_20/recall@10";
    let text = median_of(&report, "text", key)?;
    let id = median_of(&report, "id", key)?;
    let count = report.value("text", 1, "tail_20/count").unwrap_or(0.0);
    println!("    tail-20% recall@10 medians: text {text:.4}, id {id:.4} ({count} test targets)");
    ensure!(text > id, "text {text} not above ID {id}");
    Ok(())
}

// ------------------------------------------------------------------- 8

fn lora_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, layers, vocab) = (16, 2, 40);
    let base = Encoder::new(EncoderConfig {
        num_layers: layers,
        model_dim: d,
        num_heads: 2,
        ffn_dim: 32,
        max_positions: 32,
        vocab_size: vocab,
        direction: Direction::Nar,
        dropout_rate: 0.0,
        seed: 5,
    })
    .map_err(err)?;
    let inputs: Vec<TokenizedInput> = (0..50)
        .map(|_| {
            let n = rng.random_range(1..20);
            let toks: Vec<u32> = (0..n).map(|_| rng.random_range(4..vocab as u32)).collect();
            build_item_input(&toks, Direction::Nar).unwrap()
        })
        .collect();
    let before = base.pooled(&inputs).map_err(err)?;
    for (rank, targets) in [
        (4, vec![LoraTarget::Query, LoraTarget::Value]),
        (8, vec![LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output]),
    ] {
        let mut enc = base.clone();
        let cfg = LoraConfig {
            rank,
            alpha: 16.0,
            targets: targets.clone(),
        };
        enc.apply_lora(&cfg).map_err(err)?;
        let after = enc.pooled(&inputs).map_err(err)?;
        let diff = (&after - &before).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ensure!(diff <= 1e-6, "zero-initialised adapters moved outputs by {diff}");
        let expected = layers * targets.len() * rank * (d + d);
        ensure!(
            enc.count_parameters(true) == expected,
            "trainable {} vs {expected}",
            enc.count_parameters(true)
        );
        ensure!(
            enc.count_parameters(false) == base.count_parameters(false) + expected,
            "total parameter count"
        );
    }

    // Training with R=32 moves adapters only.
    let cfg = ExperimentConfig::from_toml_str(
        "",
        &[
            "data.synthetic.num_users=300".into(),
            "model.lora.rank=32".into(),
            "model.lora.alpha=32.0".into(),
            "train.max_steps=30".into(),
            "train.eval_every_steps=10".into(),
            "train.batch_size=16".into(),
            "train.learning_rate=0.01".into(),
        ],
    )
    .map_err(err)?;
    let data = prepare_data(&cfg.data, &MixStrategy::UserMixed).map_err(err)?;
    let tok = build_tokenizer(&cfg, &data.corpus);
    let mut model = build_model(&cfg, &data.catalog, &tok).map_err(err)?;
    let AnyModel::Text(text) = &model else {
        return Err("expected a text model".into());
    };
    let enc = text.encoder();
    let expected = 2 * 2 * 32 * (64 + 64);
    ensure!(enc.count_parameters(true) == expected, "R=32 trainable count {}", enc.count_parameters(true));
    let lora_ids = enc.lora_params();
    let snapshot: Vec<(String, Matrix)> = model
        .params()
        .ids()
        .map(|id| (model.params().name(id).to_string(), model.params().get(id).clone()))
        .collect();
    train_model(&cfg, &mut model, &data).map_err(err)?;
    let mut moved = 0;
    for (id, (name, old)) in model.params().ids().zip(&snapshot) {
        let now = model.params().get(id);
        let same_bits = now.iter().zip(old.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if lora_ids.contains(&id) {
            moved += usize::from(!same_bits);
        } else {
            ensure!(same_bits, "base tensor `{name}` changed");
        }
    }
    ensure!(moved > 0, "no adapter tensor was updated");
    Ok(())
}

// ------------------------------------------------------------------- 9

fn invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vocab = 50u32;
    let make = |direction| {
        Encoder::new(EncoderConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 4,
            ffn_dim: 32,
            max_positions: 48,
            vocab_size: vocab as usize,
            direction,
            dropout_rate: 0.1,
            seed: 21,
        })
        .unwrap()
    };
    let ar = make(Direction::Ar);
    let nar = make(Direction::Nar);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-10);
    let random_tokens = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(4..vocab)).collect() };

    for case in 0..1000 {
        let n = rng.random_range(1..20);
        let toks = random_tokens(&mut rng, n);
        let others: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let m = rng.random_range(1..30);
                random_tokens(&mut rng, m)
            })
            .collect();

        // AR: hidden state at </s> ignores anything appended after it.
        let input = build_item_input(&toks, Direction::Ar).map_err(err)?;
        let pool = input.pool_position();
        ensure!(input.token_ids[pool] == EOS, "AR pool position is not </s>");
        let mut extended = input.clone();
        let extra = rng.random_range(1..10);
        let tail = random_tokens(&mut rng, extra);
        extended.token_ids.extend(&tail);
        extended.attention_mask.extend(std::iter::repeat_n(true, tail.len()));
        let h1 = ar.hidden_states(&input).map_err(err)?;
        let h2 = ar.hidden_states(&extended).map_err(err)?;
        ensure!(
            close(h1.row(pool).as_slice().unwrap(), h2.row(pool).as_slice().unwrap()),
            "case {case}: AR state at </s> depends on later tokens"
        );

        for (enc, direction) in [(&ar, Direction::Ar), (&nar, Direction::Nar)] {
            let single = build_item_input(&toks, direction).map_err(err)?;
            let mut batch = vec![single.clone()];
            batch.extend(others.iter().map(|o| build_item_input(o, direction).unwrap()));
            let alone = enc.pooled(std::slice::from_ref(&single)).map_err(err)?;
            let padded = pad_batch(&batch).map_err(err)?;
            let mut g = Graph::new(enc.params());
            let v = enc.encode_padded(&mut g, &padded).map_err(err)?;
            ensure!(
                close(alone.row(0).as_slice().unwrap(), g.value(v).row(0).to_vec().as_slice()),
                "case {case}: {direction:?} pooled vector changes under right-padding"
            );
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ 10

fn checksums(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), hex);
            }
        }
    }
    out
}

fn reproducibility() -> Check {
    let dir = std::env::temp_dir().join(format!("mdrec-acceptance-{}-repro", std::process::id()));
    let cfg = ExperimentConfig::from_toml_str(
        "",
        &[
            format!("run.output_dir=\"{}\"", dir.display()),
            "run.recipe_seeds=[1,2]".into(),
            "data.synthetic.num_users=400".into(),
            "train.max_steps=60".into(),
            "train.eval_every_steps=20".into(),
            "train.batch_size=32".into(),
        ],
    )
    .map_err(err)?;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&dir);
        let report = cmd_recipe(&cfg, Recipe::MixStrategyStudy).map_err(err)?;
        runs.push((report, checksums(&dir)));
    }
    let _ = std::fs::remove_dir_all(&dir);
    ensure!(runs[0].0 == runs[1].0, "recipe reports differ");
    ensure!(runs[0].1.len() >= 3, "too few output files: {:?}", runs[0].1.keys());
    ensure!(runs[0].1 == runs[1].1, "output checksums differ");
    ensure!(runs[0].0.rows.len() == 6, "three rows per seed expected");
    Ok(())
}
