//! Training loops: plain training, the baseline regularizers, and the
//! defender/attacker/generator game.

mod config;
mod optim;

pub use config::{
    method_section, AttendoutSection, EvalPool, LayerdropSection, Method, ModelSection,
    OptimizerConfig, OptimizerKind, ScheduledSection, TaskKind, TaskSection, TrainConfig,
    VanillaSection, METHOD_SECTIONS,
};
pub use optim::{optimizer_step, OptimizerState};

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::attention::{DropMode, MaskMatrix};
use crate::error::{Error, Result};
use crate::models::{
    batch_loss_and_grads, decision_plan, gnet_sample_masks, predict, BlockPlan, GeneratorParams,
    MaskDecision, ParamSet, TaskModelParams,
};
use crate::numkernel::{sigmoid, RngPosition, RngState};
use crate::par::Execution;
use crate::policygrad::{compute_rewards, reinforce_update, update_baseline, Baseline, Winner};
use crate::regularizers::{
    attn_layerdrop_decision, attn_layerdrop_plan, bernoulli_bits, layerdrop_decision,
    layerdrop_plan, mask_from_bits, Schedule,
};
use crate::tasks::{Dataset, Example};

const STREAM_DATA: u64 = 30;
const STREAM_REGULARIZER: u64 = 31;
const STREAM_POLICY: u64 = 32;
const STREAM_EVAL: u64 = 33;
const STREAM_SYNC: u64 = 34;
const STREAM_GENERATOR_INIT: u64 = 35;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub method: Method,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_A", default, skip_serializing_if = "Option::is_none")]
    pub loss_a: Option<f64>,
    #[serde(rename = "eval_D", default, skip_serializing_if = "Option::is_none")]
    pub eval_d: Option<f64>,
    #[serde(rename = "eval_A", default, skip_serializing_if = "Option::is_none")]
    pub eval_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_prob: Option<Vec<f64>>,
}

impl MetricRecord {
    fn new(step: u64, epoch: usize, method: Method, loss_d: f64) -> Self {
        Self {
            step,
            epoch,
            method,
            loss_d,
            loss_a: None,
            eval_d: None,
            eval_a: None,
            reward_mean: None,
            baseline: None,
            drop_prob: None,
        }
    }
}

/// Mean generator drop probability of one layer over one dropout step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub dropout_step: u64,
    pub layer: usize,
    pub mean_drop_prob: f64,
}

/// Scheduled probability used at an optimizer step, and the realized
/// fraction of dropped units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTraceRow {
    pub step: u64,
    pub layer: usize,
    pub scheduled_prob: f64,
    pub realized_drop_fraction: f64,
}

/// Bookkeeping checked at each dropout-step boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub dropout_step: u64,
    /// Defender and attacker parameters were bitwise equal when the step began.
    pub synced_at_start: bool,
    pub inner_steps: usize,
    /// Defender and attacker saw the same batch sequence.
    pub batches_match: bool,
    pub cache_len_after_release: usize,
    pub generator_updated: bool,
    pub sync_source: Option<Winner>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub total_steps: u64,
    pub generator_updates: u64,
    pub train_acc: f64,
    pub dev_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    /// The defender for the game, otherwise the single trained model.
    pub model: TaskModelParams,
    pub generator: Option<GeneratorParams>,
    pub metrics: Vec<MetricRecord>,
    pub mask_trace: Vec<TraceRow>,
    pub schedule_trace: Vec<ScheduleTraceRow>,
    pub boundaries: Vec<BoundaryRecord>,
    pub summary: RunSummary,
}

/// Per-dropout-step state of the game.
#[derive(Clone, Debug, Default)]
pub struct DropoutStepLedger {
    pub dropout_step: u64,
    /// Example indices of each cached batch.
    pub cached: Vec<Vec<usize>>,
    /// Per attacker step, one decision per batch item.
    pub decisions: Vec<Vec<MaskDecision>>,
    pub inner_step: usize,
    pub eval_d: Option<f64>,
    pub eval_a: Option<f64>,
    pub defender_hashes: Vec<u64>,
    pub attacker_hashes: Vec<u64>,
}

impl DropoutStepLedger {
    pub fn new(dropout_step: u64) -> Self {
        Self {
            dropout_step,
            ..Self::default()
        }
    }

    /// Drop cached batches and decisions at the end of a dropout step.
    pub fn release(&mut self) {
        self.cached.clear();
        self.decisions.clear();
    }
}

fn batch_hash(examples: &[&Example]) -> u64 {
    let mut h = DefaultHasher::new();
    for e in examples {
        e.tokens.hash(&mut h);
        e.label.hash(&mut h);
    }
    h.finish()
}

/// Shuffled mini-batches over a fixed number of epochs.
#[derive(Clone, Debug)]
pub struct BatchIter {
    n: usize,
    batch_size: usize,
    epochs: usize,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

impl BatchIter {
    pub fn new(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Self {
        let mut it = Self {
            n,
            batch_size,
            epochs,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            rng: RngState::new(seed, STREAM_DATA),
        };
        it.reshuffle();
        it
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.batches_per_epoch() * self.epochs) as u64
    }
}

impl Iterator for BatchIter {
    /// `(epoch, example indices)`
    type Item = (usize, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.n == 0 || self.epoch >= self.epochs {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        let epoch = self.epoch;
        self.pos = end;
        if self.pos == self.n {
            self.epoch += 1;
            if self.epoch < self.epochs {
                self.reshuffle();
            }
        }
        Some((epoch, batch))
    }
}

/// Fraction of correct argmax predictions of the unmasked model.
pub fn evaluate(model: &TaskModelParams, samples: &[&Example], exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate needs at least one sample".into()));
    }
    let hits = exec.map(samples, |e| predict(model, &e.tokens).map(|p| p == e.label));
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Sample a source model with probability `softmax(eval_D, eval_A)` and
/// return two copies of it together with which side won.
pub fn sync_models(
    defender: &TaskModelParams,
    attacker: &TaskModelParams,
    eval_d: f64,
    eval_a: f64,
    rng: &mut RngState,
) -> Result<(TaskModelParams, TaskModelParams, Winner)> {
    let same_shape = defender.config == attacker.config
        && defender
            .named_tensors()
            .iter()
            .zip(attacker.named_tensors().iter())
            .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
    if !same_shape {
        return Err(Error::Contract("sync_models: defender and attacker differ in structure".into()));
    }
    let p_attacker = sigmoid(eval_a - eval_d);
    let source = if rng.next_f64() < p_attacker {
        Winner::Attacker
    } else {
        Winner::Defender
    };
    let chosen = match source {
        Winner::Attacker => attacker,
        _ => defender,
    };
    Ok((chosen.clone(), chosen.clone(), source))
}

/// A trainable model plus its optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub params: TaskModelParams,
    pub state: OptimizerState<TaskModelParams>,
}

impl Learner {
    fn step(
        &mut self,
        examples: &[&Example],
        plans: Option<&[Vec<BlockPlan>]>,
        cfg: &OptimizerConfig,
        exec: Execution,
    ) -> Result<f64> {
        let tokens: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let (loss, grads) = batch_loss_and_grads(&self.params, &tokens, &labels, plans, exec)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                tensor: "loss".into(),
                detail: format!("training loss {loss}"),
            });
        }
        optimizer_step(&mut self.params, &grads, cfg, &mut self.state)?;
        Ok(loss)
    }
}

/// Defender, attacker and generator with everything needed to run
/// dropout steps.
pub struct Game<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a Dataset,
    pub eval_pool: &'a [Example],
    pub defender: Learner,
    pub attacker: Learner,
    pub generator: GeneratorParams,
    pub baseline: Baseline,
    pub exec: Execution,
    eval_rng: RngState,
    sync_rng: RngState,
    policy_counter: u64,
    policy_stride: u64,
}

/// Result of [`Game::dropout_step`].
#[derive(Clone, Debug)]
pub struct DropoutOutcome {
    pub boundary: BoundaryRecord,
    pub trace: Vec<TraceRow>,
}

impl<'a> Game<'a> {
    pub fn new(
        config: &'a TrainConfig,
        train: &'a Dataset,
        eval_pool: &'a [Example],
        exec: Execution,
    ) -> Result<Self> {
        let a = config
            .attendout
            .as_ref()
            .ok_or_else(|| Error::Config("no [attendout] section".into()))?;
        let params = TaskModelParams::init(&config.task_config()?, config.seed)?;
        let generator = GeneratorParams::init(
            &config.generator_config()?,
            RngState::new(config.seed, STREAM_GENERATOR_INIT).next_raw(),
        )?;
        let max_len = config.task.length as u64 + 1;
        let learner = Learner {
            params,
            state: OptimizerState::default(),
        };
        Ok(Self {
            config,
            train,
            eval_pool,
            attacker: learner.clone(),
            defender: learner,
            generator,
            baseline: Baseline::new(a.baseline_decay)?,
            exec,
            eval_rng: RngState::new(config.seed, STREAM_EVAL),
            sync_rng: RngState::new(config.seed, STREAM_SYNC),
            policy_counter: 0,
            policy_stride: 2 * config.model.num_layers as u64 * max_len * max_len,
        })
    }

    fn section(&self) -> &AttendoutSection {
        self.config.attendout.as_ref().expect("checked in Game::new")
    }

    /// Sample one decision per example, each from its own slice of the
    /// policy stream so the draws do not depend on scheduling.
    fn sample_decisions(&mut self, examples: &[&Example]) -> Result<Vec<MaskDecision>> {
        let base = self.policy_counter;
        let stride = self.policy_stride;
        let seed = self.config.seed;
        let layers = self.config.model.num_layers;
        let g = &self.generator;
        let out = self.exec.map_range(examples.len(), |i| {
            let mut rng = RngState::at(RngPosition {
                seed,
                stream: STREAM_POLICY,
                counter: (base + i as u64) * stride,
            });
            gnet_sample_masks(g, &examples[i].tokens, layers, &mut rng)
        });
        self.policy_counter += examples.len() as u64;
        out.into_iter().collect()
    }

    /// Run up to `T` inner steps. The generator is updated and the models
    /// re-synchronized only if all `T` steps ran before the data ran out.
    /// Cached batches are released either way.
    pub fn dropout_step(
        &mut self,
        ledger: &mut DropoutStepLedger,
        data: &mut BatchIter,
        step: &mut u64,
        metrics: &mut Vec<MetricRecord>,
    ) -> Result<DropoutOutcome> {
        if !ledger.cached.is_empty() || ledger.inner_step != 0 {
            return Err(Error::Contract("dropout_step needs a fresh ledger".into()));
        }
        let t_len = self.config.dropout_step;
        let synced_at_start = self.defender.params.bitwise_eq(&self.attacker.params);
        let mode = self.section().drop_mode;
        let layers = self.config.model.num_layers;
        while ledger.inner_step < t_len {
            let Some((epoch, batch)) = data.next() else {
                break;
            };
            let examples: Vec<&Example> = batch.iter().map(|&i| &self.train.examples[i]).collect();
            ledger.cached.push(batch.clone());

            ledger.defender_hashes.push(batch_hash(&examples));
            let loss_d = self.defender.step(&examples, None, &self.config.optimizer, self.exec)?;

            let decisions = self.sample_decisions(&examples)?;
            let plans = decisions
                .iter()
                .map(|d| decision_plan(Some(d), layers, mode))
                .collect::<Result<Vec<_>>>()?;
            ledger.attacker_hashes.push(batch_hash(&examples));
            let loss_a =
                self.attacker
                    .step(&examples, Some(&plans), &self.config.optimizer, self.exec)?;

            let mut rec = MetricRecord::new(*step, epoch, Method::Attendout, loss_d);
            rec.loss_a = Some(loss_a);
            rec.drop_prob = Some(mean_layer_prob(decisions.iter(), layers));
            metrics.push(rec);
            ledger.decisions.push(decisions);
            ledger.inner_step += 1;
            *step += 1;
        }
        let batches_match = ledger.defender_hashes == ledger.attacker_hashes;
        if ledger.inner_step < t_len {
            // data ran out mid-step: no evaluation, no generator update
            ledger.release();
            return Ok(DropoutOutcome {
                boundary: BoundaryRecord {
                    dropout_step: ledger.dropout_step,
                    synced_at_start,
                    inner_steps: ledger.inner_step,
                    batches_match,
                    cache_len_after_release: ledger.cached.len(),
                    generator_updated: false,
                    sync_source: None,
                },
                trace: Vec::new(),
            });
        }

        // evaluate both on the same draw from the held-out pool
        let k = self.config.eval_samples();
        let picks = rand::seq::index::sample(&mut self.eval_rng, self.eval_pool.len(), k);
        let samples: Vec<&Example> = picks.iter().map(|i| &self.eval_pool[i]).collect();
        let eval_d = evaluate(&self.defender.params, &samples, self.exec)?;
        let eval_a = evaluate(&self.attacker.params, &samples, self.exec)?;
        ledger.eval_d = Some(eval_d);
        ledger.eval_a = Some(eval_a);

        let pairs: Vec<(&[usize], &MaskDecision)> = ledger
            .cached
            .iter()
            .zip(&ledger.decisions)
            .flat_map(|(batch, ds)| {
                batch
                    .iter()
                    .zip(ds)
                    .map(|(&i, d)| (self.train.examples[i].tokens.as_slice(), d))
            })
            .collect();
        let section = self.section().clone();
        let rewards = compute_rewards(eval_a, eval_d, pairs.len(), section.reward)?;
        self.baseline = update_baseline(self.baseline, &rewards);
        self.generator = reinforce_update(
            &self.generator,
            &pairs,
            &rewards,
            &self.baseline,
            section.g_lr,
            self.exec,
        )?;

        let probs = mean_layer_prob(ledger.decisions.iter().flatten(), layers);
        let trace = probs
            .iter()
            .enumerate()
            .map(|(layer, &p)| TraceRow {
                dropout_step: ledger.dropout_step,
                layer,
                mean_drop_prob: p,
            })
            .collect();
        if let Some(last) = metrics.last_mut() {
            last.eval_d = Some(eval_d);
            last.eval_a = Some(eval_a);
            last.reward_mean = Some(rewards.mean());
            last.baseline = Some(self.baseline.value);
        }

        ledger.release();
        let (d, a, source) = sync_models(
            &self.defender.params,
            &self.attacker.params,
            eval_d,
            eval_a,
            &mut self.sync_rng,
        )?;
        let state = match source {
            Winner::Attacker => self.attacker.state.clone(),
            _ => self.defender.state.clone(),
        };
        self.defender = Learner {
            params: d,
            state: state.clone(),
        };
        self.attacker = Learner { params: a, state };
        Ok(DropoutOutcome {
            boundary: BoundaryRecord {
                dropout_step: ledger.dropout_step,
                synced_at_start,
                inner_steps: ledger.inner_step,
                batches_match,
                cache_len_after_release: ledger.cached.len(),
                generator_updated: true,
                sync_source: Some(source),
            },
            trace,
        })
    }
}

fn mean_layer_prob<'d>(decisions: impl Iterator<Item = &'d MaskDecision>, layers: usize) -> Vec<f64> {
    let mut sum = vec![0.0; layers];
    let mut n = 0usize;
    for d in decisions {
        for (s, p) in sum.iter_mut().zip(&d.layer_drop_prob) {
            *s += p;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

fn drop_fraction(bits: &[bool]) -> f64 {
    bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64
}

/// Per-example plans for the single-model regularizers. Returns the plans
/// (or `None` for the clean path) and the realized drop fraction per layer.
fn regularizer_plans(
    config: &TrainConfig,
    schedule: Option<&Schedule>,
    examples: &[&Example],
    step: u64,
    rng: &mut RngState,
) -> Result<(Option<Vec<Vec<BlockPlan>>>, Option<Vec<f64>>, Vec<f64>)> {
    let layers = config.model.num_layers;
    let per_sample = |probs: &[f64], mode: DropMode, rescale: bool, rng: &mut RngState| {
        let mut realized = vec![0.0; layers];
        let mut plans = Vec::with_capacity(examples.len());
        for e in examples {
            let len = e.tokens.len();
            let mut plan = Vec::with_capacity(layers);
            for (layer, &p) in probs.iter().enumerate() {
                let bits = bernoulli_bits(len, p, rng)?;
                realized[layer] += drop_fraction(&bits) / examples.len() as f64;
                let mask = if rescale {
                    MaskMatrix::from_drop_bits(len, &bits, mode)?.with_rescale(1.0 - p)?
                } else {
                    mask_from_bits(len, &bits, mode)?
                };
                plan.push(BlockPlan::Attend(mask));
            }
            plans.push(plan);
        }
        Ok::<_, Error>((plans, realized))
    };
    match config.method {
        Method::None | Method::Attendout => Ok((None, None, Vec::new())),
        Method::Vanilla => {
            let v = config.vanilla.as_ref().expect("validated");
            let probs = vec![v.p; layers];
            let (plans, realized) = per_sample(&probs, v.drop_mode, v.rescale, rng)?;
            Ok((Some(plans), Some(probs), realized))
        }
        Method::Scheduled => {
            let s = schedule.expect("validated");
            let probs = s.probabilities(step);
            let mode = config.scheduled.as_ref().expect("validated").drop_mode;
            let (plans, realized) = per_sample(&probs, mode, false, rng)?;
            Ok((Some(plans), Some(probs), realized))
        }
        Method::Layerdrop => {
            let p = config.layerdrop.as_ref().expect("validated").p;
            let skips = layerdrop_decision(layers, p, rng)?;
            let realized = skips.iter().map(|&s| f64::from(u8::from(s))).collect();
            let plan = layerdrop_plan(&skips);
            Ok((Some(vec![plan; examples.len()]), Some(vec![p; layers]), realized))
        }
        Method::AttnLayerdrop => {
            let p = config.attn_layerdrop.as_ref().expect("validated").p;
            let dropped = attn_layerdrop_decision(layers, p, rng)?;
            let realized = dropped.iter().map(|&s| f64::from(u8::from(s))).collect();
            let plan = attn_layerdrop_plan(&dropped);
            Ok((Some(vec![plan; examples.len()]), Some(vec![p; layers]), realized))
        }
    }
}

fn split_eval_pool(config: &TrainConfig, train: Dataset, dev: &Dataset) -> (Dataset, Vec<Example>) {
    match config.eval_pool {
        EvalPool::Dev => (train, dev.examples.clone()),
        EvalPool::TrainHoldout => {
            let mut train = train;
            let keep = train.examples.len() - config.holdout_size;
            let pool = train.examples.split_off(keep);
            (train, pool)
        }
    }
}

fn accuracy_of(model: &TaskModelParams, d: &Dataset, exec: Execution) -> Result<Option<f64>> {
    if d.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Example> = d.examples.iter().collect();
    evaluate(model, &refs, exec).map(Some)
}

/// Run a full training job with the default execution strategy.
pub fn train(config: &TrainConfig) -> Result<TrainArtifacts> {
    train_with(config, Execution::default())
}

pub fn train_with(config: &TrainConfig, exec: Execution) -> Result<TrainArtifacts> {
    config.validate()?;
    let (train_full, dev, test) = config.datasets()?;
    let (train, eval_pool) = split_eval_pool(config, train_full, &dev);
    let mut data = BatchIter::new(train.len(), config.batch_size, config.epochs, config.seed);
    let total_steps = data.total_steps();
    let mut metrics = Vec::new();
    let mut mask_trace = Vec::new();
    let mut schedule_trace = Vec::new();
    let mut boundaries = Vec::new();
    let mut generator_updates = 0u64;

    let (model, generator) = if config.method == Method::Attendout {
        let mut game = Game::new(config, &train, &eval_pool, exec)?;
        let mut step = 0u64;
        let mut k = 0u64;
        while step < total_steps {
            let mut ledger = DropoutStepLedger::new(k);
            let outcome = game.dropout_step(&mut ledger, &mut data, &mut step, &mut metrics)?;
            generator_updates += u64::from(outcome.boundary.generator_updated);
            boundaries.push(outcome.boundary);
            mask_trace.extend(outcome.trace);
            k += 1;
        }
        (game.defender.params, Some(game.generator))
    } else {
        let mut learner = Learner {
            params: TaskModelParams::init(&config.task_config()?, config.seed)?,
            state: OptimizerState::default(),
        };
        let mut reg_rng = RngState::new(config.seed, STREAM_REGULARIZER);
        let schedule = config.schedule.as_ref();
        let mut step = 0u64;
        for (epoch, batch) in data.by_ref() {
            let examples: Vec<&Example> = batch.iter().map(|&i| &train.examples[i]).collect();
            let (plans, probs, realized) =
                regularizer_plans(config, schedule, &examples, step, &mut reg_rng)?;
            let loss = learner.step(&examples, plans.as_deref(), &config.optimizer, exec)?;
            if config.method == Method::Scheduled {
                let probs = probs.as_ref().expect("scheduled probabilities");
                for (layer, (&p, &r)) in probs.iter().zip(&realized).enumerate() {
                    schedule_trace.push(ScheduleTraceRow {
                        step,
                        layer,
                        scheduled_prob: p,
                        realized_drop_fraction: r,
                    });
                }
            }
            let mut rec = MetricRecord::new(step, epoch, config.method, loss);
            rec.drop_prob = probs;
            metrics.push(rec);
            step += 1;
        }
        (learner.params, None)
    };

    let summary = RunSummary {
        method: config.method,
        seed: config.seed,
        total_steps,
        generator_updates,
        train_acc: accuracy_of(&model, &train, exec)?.unwrap_or(0.0),
        dev_acc: accuracy_of(&model, &dev, exec)?,
        test_acc: accuracy_of(&model, &test, exec)?,
    };
    Ok(TrainArtifacts {
        model,
        generator,
        metrics,
        mask_trace,
        schedule_trace,
        boundaries,
        summary,
    })
}

/// Metrics as JSON lines.
pub fn metrics_jsonl(metrics: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &std::path::Path, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
