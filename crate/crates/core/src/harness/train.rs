use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_all, layer_stats, TaskEval};
use super::optim::{clip_grad_norm, total_loss_tape, AdamW, LrSchedule};
use super::tasks::{Datasets, TaskData, PAD};
use crate::error::{Error, Result};
use crate::model::{aux_losses, count_params, Gating, ParamCount, Sample, TokenBatch, ToyBackbone};
use crate::routing::{LayerRouteStats, RoutingMode};
use crate::seed::derive_seed;
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub lambda_bal: f64,
    pub seed: u64,
    /// Routing used for training and evaluation.
    pub mode: RoutingMode,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub eval_interval: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 32,
            total_steps: 300,
            warmup_ratio: 0.03,
            lambda_bal: 0.01,
            seed: 0,
            mode: RoutingMode::Soft,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            eval_interval: 50,
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "train.learning_rate", "must be positive"),
            (self.batch_size >= 1, "train.batch_size", "must be positive"),
            ((0.0..1.0).contains(&self.warmup_ratio), "train.warmup_ratio", "must lie in [0, 1)"),
            (self.lambda_bal >= 0.0 && self.lambda_bal.is_finite(), "train.lambda_bal", "must be non-negative"),
            (self.weight_decay >= 0.0, "train.weight_decay", "must be non-negative"),
            (self.max_grad_norm >= 0.0, "train.max_grad_norm", "must be non-negative"),
            (self.eval_interval >= 1, "train.eval_interval", "must be positive"),
            (self.eval_batch_size >= 1, "train.eval_batch_size", "must be positive"),
        ];
        for (ok, field, msg) in checks {
            if !ok {
                return Err(Error::config(field, msg));
            }
        }
        if let RoutingMode::TopK(0) = self.mode {
            return Err(Error::config("train.mode", "top-k needs k >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.learning_rate, self.warmup_ratio, self.total_steps)
    }
}

/// Learning rate at `step` under `cfg`'s warm-up and cosine schedule.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.schedule().at(step)
}

/// Full-parameter training of the bare backbone on the general task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 600, learning_rate: 3e-3, batch_size: 32, warmup_ratio: 0.05 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("pretrain.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("pretrain.warmup_ratio", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub task: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub tau_mean: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: usize,
    pub tasks: BTreeMap<String, TaskEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub evals: Vec<EvalSnapshot>,
    /// Total loss of every optimizer step.
    pub train_losses: Vec<f64>,
    /// Final per-layer routing over the specialist eval sets.
    pub routing: Vec<LayerRouteStats>,
    pub param_count: ParamCount,
    /// Accuracy change from the first to the last evaluation, per task.
    pub deltas: BTreeMap<String, f64>,
}

impl RunMetrics {
    pub fn initial_eval(&self) -> &EvalSnapshot {
        self.evals.first().expect("a run always evaluates at step 0")
    }

    pub fn final_eval(&self) -> &EvalSnapshot {
        self.evals.last().expect("a run always evaluates at step 0")
    }

    /// Mean per-token gate entropy over routed layers at the end of the run.
    pub fn mean_entropy(&self) -> Option<f64> {
        (!self.routing.is_empty())
            .then(|| self.routing.iter().map(|s| s.entropy).sum::<f64>() / self.routing.len() as f64)
    }
}

/// `post - pre` final accuracy on `task`; negative means degradation.
pub fn forgetting_delta(pre: &RunMetrics, post: &RunMetrics, task: &str) -> Result<f64> {
    let get = |m: &RunMetrics| {
        m.final_eval().tasks.get(task).map(|e| e.accuracy).ok_or_else(|| Error::Key(task.to_string()))
    };
    Ok(get(post)? - get(pre)?)
}

/// Draws a training batch uniformly over tasks, then uniformly within a task.
fn sample_batch<'d>(tasks: &[&'d TaskData], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'d Sample> {
    (0..size)
        .map(|_| {
            let t = tasks[rng.random_range(0..tasks.len())];
            &t.train[rng.random_range(0..t.train.len())]
        })
        .collect()
}

/// Trains every backbone tensor on the general task, then freezes the backbone.
/// Returns the per-step losses.
pub fn pretrain_backbone(model: &mut ToyBackbone, general: &TaskData, cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.adapted_layers().next().is_some() {
        return Err(Error::Domain("pretraining expects a backbone without adapters".into()));
    }
    let schedule = LrSchedule::new(cfg.learning_rate, cfg.warmup_ratio, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-batches", &[]));
    let mut opt = AdamW::new(0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    model.set_backbone_trainable(true);
    for step in 1..=cfg.steps {
        let batch = TokenBatch::new(&sample_batch(&[general], cfg.batch_size, &mut rng), PAD)?;
        model.zero_grad();
        let mut tape = Tape::new();
        let (out, vars) = model.forward(&mut tape, &batch, &Gating::Off, false)?;
        let loss = tape.cross_entropy(out.logits, &batch.targets)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            model.set_backbone_trainable(false);
            return Err(Error::Divergence { step, msg: format!("pretraining loss {value}") });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        model.accumulate_grads(&grads, &vars, 1.0)?;
        clip_grad_norm(model.params_mut(), 1.0);
        opt.step(model.params_mut(), schedule.at(step)?, step)?;
        losses.push(value);
    }
    model.set_backbone_trainable(false);
    model.clear_grads();
    Ok(losses)
}

fn eval_records(step: usize, lr: f64, evals: &BTreeMap<String, TaskEval>, order: &[String]) -> Vec<MetricRecord> {
    order
        .iter()
        .map(|id| {
            let e = &evals[id];
            MetricRecord {
                step,
                task: id.clone(),
                split: "eval".into(),
                loss: e.loss,
                accuracy: Some(e.accuracy),
                entropy_mean: e.entropy_mean,
                tau_mean: e.tau_mean,
                lr,
            }
        })
        .collect()
}

/// Trains the adapters of `model` on the specialist tasks of `data`.
///
/// Every metric record is passed to `sink` as soon as it exists, so a
/// diverged run still leaves its partial metrics behind.
pub fn train(
    model: &mut ToyBackbone,
    data: &Datasets,
    cfg: &TrainConfig,
    base_grad_scale: f64,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let gating = Gating::from(cfg.mode);
    let schedule = cfg.schedule();
    let order: Vec<String> = data.all().map(|t| t.spec.id.clone()).collect();
    let tasks: Vec<&TaskData> = data.tasks.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-batches", &[]));
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.total_steps);
    let mut emit = |recs: Vec<MetricRecord>, records: &mut Vec<MetricRecord>| -> Result<()> {
        for r in recs {
            sink(&r)?;
            records.push(r);
        }
        Ok(())
    };

    let (initial, mut latest_gates) = evaluate_all(model, data, &gating, cfg.eval_batch_size)?;
    emit(eval_records(0, schedule.at(0)?, &initial, &order), &mut records)?;
    evals.push(EvalSnapshot { step: 0, tasks: initial });

    let mut since_eval = Vec::new();
    for step in 1..=cfg.total_steps {
        let lr = schedule.at(step)?;
        let batch = TokenBatch::new(&sample_batch(&tasks, cfg.batch_size, &mut rng), PAD)?;
        model.zero_grad();
        let mut tape = Tape::new();
        let (out, vars) = model.forward(&mut tape, &batch, &gating, false)?;
        let task_loss = tape.cross_entropy(out.logits, &batch.targets)?;
        let aux = aux_losses(&mut tape, &out)?;
        let loss = total_loss_tape(&mut tape, task_loss, &aux, cfg.lambda_bal)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step, msg: format!("training loss {value}") });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        model.accumulate_grads(&grads, &vars, base_grad_scale)?;
        clip_grad_norm(model.params_mut(), cfg.max_grad_norm);
        opt.step(model.params_mut(), lr, step)?;
        train_losses.push(value);
        since_eval.push(value);

        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let mean = since_eval.iter().sum::<f64>() / since_eval.len() as f64;
            since_eval.clear();
            let train_rec = MetricRecord {
                step,
                task: "all".into(),
                split: "train".into(),
                loss: mean,
                accuracy: None,
                entropy_mean: None,
                tau_mean: super::eval::tau_mean(model),
                lr,
            };
            let (snapshot, gates) = evaluate_all(model, data, &gating, cfg.eval_batch_size)?;
            latest_gates = gates;
            let mut recs = vec![train_rec];
            recs.extend(eval_records(step, lr, &snapshot, &order));
            emit(recs, &mut records)?;
            evals.push(EvalSnapshot { step, tasks: snapshot });
        }
    }
    model.clear_grads();

    let routing = layer_stats(model, &latest_gates);
    let first = &evals[0].tasks;
    let last = &evals.last().expect("initial eval").tasks;
    let deltas = order.iter().map(|id| (id.clone(), last[id].accuracy - first[id].accuracy)).collect();
    Ok(RunMetrics {
        records,
        evals,
        train_losses,
        routing,
        param_count: count_params(model, cfg.mode)?,
        deltas,
    })
}
