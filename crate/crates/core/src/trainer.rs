//! Sampled softmax training with in-domain negatives, periodic validation
//! and early stopping.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::evaluator::{rank_instances, EmbeddingScorer, EvalConfig};
use crate::model::Recommender;
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::IndexedInstance;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{softmax_xent, Graph, Matrix, Var};

/// Inner product of two equally sized vectors.
pub fn score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("score of {}-d and {}-d vectors", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

impl LossReduction {
    fn scale(self, batch: usize) -> f64 {
        match self {
            LossReduction::Mean => 1.0 / batch as f64,
            LossReduction::Sum => 1.0,
        }
    }
}

/// Per-example `-log softmax` of the positive over (positive, negatives),
/// reduced over the batch.
pub fn sampled_ce_loss(batch: &[(f64, Vec<f64>)], reduction: LossReduction) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    for (pos, negs) in batch {
        let mut scores = Vec::with_capacity(negs.len() + 1);
        scores.push(*pos);
        scores.extend_from_slice(negs);
        total += softmax_xent(&scores)?.0;
    }
    Ok(total * reduction.scale(batch.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub eval_every_steps: u64,
    pub patience_rounds: usize,
    pub max_steps: u64,
    pub adam: AdamConfig,
    pub loss_reduction: LossReduction,
    pub seed: u64,
    /// Also keep the user's own history out of the negatives.
    pub exclude_history_negatives: bool,
    /// Cap on validation instances per evaluation round (0 keeps all).
    pub max_valid_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 64,
            num_negatives: 10,
            eval_every_steps: 3000,
            patience_rounds: 10,
            max_steps: 30_000,
            adam: AdamConfig::default(),
            loss_reduction: LossReduction::Mean,
            seed: 0,
            exclude_history_negatives: true,
            max_valid_instances: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.num_negatives == 0 {
            return bad("batch_size and num_negatives must be at least 1");
        }
        if self.eval_every_steps == 0 || self.max_steps == 0 || self.patience_rounds == 0 {
            return bad("eval_every_steps, max_steps and patience_rounds must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// Draws negatives from the target's domain.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pools: Vec<Vec<usize>>,
    domain_of: Vec<usize>,
    domain_names: Vec<String>,
    exclude_history: bool,
}

impl NegativeSampler {
    pub fn new(catalog: &Catalog, exclude_history: bool) -> Self {
        NegativeSampler {
            pools: (0..catalog.domains().len()).map(|d| catalog.pool(d).to_vec()).collect(),
            domain_of: (0..catalog.len()).map(|i| catalog.domain_index(i)).collect(),
            domain_names: catalog.domains().to_vec(),
            exclude_history,
        }
    }

    /// `s` distinct items of the target's domain, excluding the target (and
    /// the history when configured).
    pub fn sample<R: Rng>(&self, inst: &IndexedInstance, s: usize, rng: &mut R) -> Result<Vec<usize>> {
        let d = *self
            .domain_of
            .get(inst.target)
            .ok_or_else(|| Error::Shape(format!("target index {} outside catalog", inst.target)))?;
        let pool = &self.pools[d];
        let mut excluded: HashSet<usize> = HashSet::from([inst.target]);
        if self.exclude_history {
            excluded.extend(inst.history.iter().filter(|&&h| self.domain_of.get(h) == Some(&d)));
        }
        let eligible = pool.len() - excluded.len();
        if s > eligible {
            return Err(Error::PoolTooSmall {
                domain: self.domain_names[d].clone(),
                requested: s,
                available: eligible,
            });
        }
        let mut out = Vec::with_capacity(s);
        if 2 * s <= eligible {
            while out.len() < s {
                let x = pool[rng.random_range(0..pool.len())];
                if excluded.insert(x) {
                    out.push(x);
                }
            }
        } else {
            let list: Vec<usize> = pool.iter().copied().filter(|x| !excluded.contains(x)).collect();
            out.extend(rand::seq::index::sample(rng, list.len(), s).into_iter().map(|k| list[k]));
        }
        Ok(out)
    }
}

/// One row of the training log, written at each validation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub valid_recall_at_10: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
    pub best_metric: Option<f64>,
    pub best_step: u64,
    pub best_params: Option<Vec<Matrix>>,
    pub bad_rounds: usize,
    pub log: Vec<LogRecord>,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub finished: bool,
    /// Parameters at termination, before the best ones were restored.
    pub final_params: Option<Vec<Matrix>>,
}

fn snapshot(model: &dyn Recommender) -> Vec<Matrix> {
    let p = model.params();
    p.ids().map(|id| p.get(id).clone()).collect()
}

pub fn restore<M: Recommender + ?Sized>(model: &mut M, values: &[Matrix]) {
    let p = model.params_mut();
    let ids: Vec<_> = p.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *p.get_mut(id) = v.clone();
    }
}

/// Protocol used for validation: `eval` with a derived seed, so validation
/// candidates never coincide with test candidates.
pub fn validation_config(eval: &EvalConfig) -> EvalConfig {
    let mut c = eval.clone();
    c.seed = derive_seed(eval.seed, "validation", &[]);
    c
}

/// Batches, negatives, optimisation and validation for one split.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    valid_eval: EvalConfig,
    catalog: &'a Catalog,
    train: &'a [IndexedInstance],
    valid: &'a [IndexedInstance],
    sampler: NegativeSampler,
}

impl<'a> Trainer<'a> {
    /// `eval` supplies the validation protocol (see [`validation_config`]).
    pub fn new(
        config: TrainConfig,
        eval: &EvalConfig,
        catalog: &'a Catalog,
        train: &'a [IndexedInstance],
        valid: &'a [IndexedInstance],
    ) -> Result<Self> {
        config.validate()?;
        eval.validate()?;
        if train.is_empty() {
            return Err(Error::Pipeline("no training instances".into()));
        }
        let valid_eval = validation_config(eval);
        let valid = match config.max_valid_instances {
            0 => valid,
            n => &valid[..n.min(valid.len())],
        };
        Ok(Trainer {
            sampler: NegativeSampler::new(catalog, config.exclude_history_negatives),
            config,
            valid_eval,
            catalog,
            train,
            valid,
        })
    }

    pub fn sampler(&self) -> &NegativeSampler {
        &self.sampler
    }

    pub fn init_state(&self, model: &dyn Recommender) -> TrainState {
        TrainState {
            step: 0,
            adam: Adam::new(self.config.adam, model.params().len()),
            best_metric: None,
            best_step: 0,
            best_params: None,
            bad_rounds: 0,
            log: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            finished: false,
            final_params: None,
        }
    }

    fn batches_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    /// Instances of global step `step`: epochs are shuffled by a seed
    /// derived from the epoch number and never straddled.
    pub fn batch_at(&self, step: u64) -> Vec<&'a IndexedInstance> {
        let bpe = self.batches_per_epoch();
        let (epoch, b) = (step / bpe, (step % bpe) as usize);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, "epoch", &[&epoch.to_le_bytes()]));
        let start = b * self.config.batch_size;
        let end = (start + self.config.batch_size).min(order.len());
        order[start..end].iter().map(|&i| &self.train[i]).collect()
    }

    /// Builds the loss node for a batch with the given negatives.
    pub fn loss_graph(
        &self,
        model: &dyn Recommender,
        g: &mut Graph,
        batch: &[&IndexedInstance],
        negatives: &[Vec<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut items: Vec<usize> = Vec::new();
        let mut col: HashMap<usize, usize> = HashMap::new();
        let mut columns = Vec::with_capacity(batch.len());
        for (inst, negs) in batch.iter().zip(negatives) {
            let row = std::iter::once(inst.target)
                .chain(negs.iter().copied())
                .map(|it| {
                    *col.entry(it).or_insert_with(|| {
                        items.push(it);
                        items.len() - 1
                    })
                })
                .collect();
            columns.push(row);
        }
        let histories: Vec<&[usize]> = batch.iter().map(|i| i.history.as_slice()).collect();
        let users = model.encode_users(g, &histories, rng.as_deref_mut())?;
        let item_vecs = model.encode_items(g, &items, rng)?;
        let logits = g.matmul_t(users, item_vecs);
        g.sampled_softmax(logits, columns, self.config.loss_reduction.scale(batch.len()))
    }

    /// Inference-mode loss of a batch with fixed negatives.
    pub fn batch_loss(
        &self,
        model: &dyn Recommender,
        batch: &[&IndexedInstance],
        negatives: &[Vec<usize>],
    ) -> Result<f64> {
        let mut g = Graph::new(model.params());
        let loss = self.loss_graph(model, &mut g, batch, negatives, None)?;
        Ok(g.value(loss)[[0, 0]])
    }

    /// One optimiser step on `batch` with negatives and dropout drawn from
    /// `rng`. Returns the training loss before the update.
    pub fn train_step<M: Recommender>(
        &self,
        model: &mut M,
        adam: &mut Adam,
        batch: &[&IndexedInstance],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let negatives = batch
            .iter()
            .map(|inst| self.sampler.sample(inst, self.config.num_negatives, rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = {
            let mut g = Graph::new(model.params());
            let loss = self.loss_graph(model, &mut g, batch, &negatives, Some(rng))?;
            let value = g.value(loss)[[0, 0]];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss ({value})")));
            }
            (value, g.backward(loss))
        };
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        adam.step(model.params_mut(), &grads, self.config.learning_rate);
        Ok(loss)
    }

    /// Validation Recall@10 under the trainer's fixed validation candidates.
    pub fn validate(&self, model: &dyn Recommender) -> Result<f64> {
        if self.valid.is_empty() {
            return Ok(0.0);
        }
        let scorer = EmbeddingScorer::new(model)?;
        let ranks = rank_instances(&scorer, self.valid, self.catalog, &self.valid_eval)?;
        Ok(ranks.iter().filter(|r| r.rank <= 10).count() as f64 / ranks.len() as f64)
    }

    fn eval_round<M: Recommender>(&self, model: &M, state: &mut TrainState) -> Result<()> {
        let metric = self.validate(model)?;
        let train_loss = if state.loss_count > 0 {
            state.loss_sum / state.loss_count as f64
        } else {
            0.0
        };
        state.log.push(LogRecord {
            step: state.step,
            train_loss,
            valid_recall_at_10: metric,
        });
        log::info!("step {} loss {train_loss:.5} valid recall@10 {metric:.5}", state.step);
        state.loss_sum = 0.0;
        state.loss_count = 0;
        if state.best_metric.is_none_or(|b| metric > b) {
            state.best_metric = Some(metric);
            state.best_step = state.step;
            state.best_params = Some(snapshot(model));
            state.bad_rounds = 0;
        } else {
            state.bad_rounds += 1;
        }
        Ok(())
    }

    /// Trains until termination, or until `state.step` reaches `halt_at`.
    /// On termination the best parameters are loaded into `model`.
    pub fn run<M: Recommender>(&self, model: &mut M, state: &mut TrainState, halt_at: Option<u64>) -> Result<()> {
        while !state.finished {
            if halt_at == Some(state.step) {
                return Ok(());
            }
            let batch = self.batch_at(state.step);
            let mut rng = rng_for(self.config.seed, "train-step", &[&state.step.to_le_bytes()]);
            let loss = self.train_step(model, &mut state.adam, &batch, &mut rng)?;
            state.step += 1;
            state.loss_sum += loss;
            state.loss_count += 1;
            let at_end = state.step >= self.config.max_steps;
            if state.step % self.config.eval_every_steps == 0 || at_end {
                self.eval_round(model, state)?;
            }
            if at_end || state.bad_rounds >= self.config.patience_rounds {
                state.finished = true;
                state.final_params = Some(snapshot(model));
                if let Some(best) = &state.best_params {
                    restore(model, best);
                }
            }
        }
        Ok(())
    }

    /// Fresh run to termination.
    pub fn fit<M: Recommender>(&self, model: &mut M) -> Result<TrainState> {
        let mut state = self.init_state(model);
        self.run(model, &mut state, None)?;
        Ok(state)
    }
}
