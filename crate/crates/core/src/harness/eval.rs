use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tasks::{Datasets, PAD};
use crate::error::Result;
use crate::model::{gate_records, Gating, Sample, TokenBatch, ToyBackbone};
use crate::routing::{routing_stats, GateRecord, LayerRouteStats};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    /// Mean cross-entropy per target token.
    pub loss: f64,
    /// Fraction of samples whose every target token is the argmax.
    pub accuracy: f64,
    pub entropy_mean: Option<f64>,
    pub tau_mean: Option<f64>,
}

/// Mean router temperature, if the model has routers.
pub fn tau_mean(model: &ToyBackbone) -> Option<f64> {
    let taus: Vec<f64> = model.adapted_layers().filter_map(|l| l.router.as_ref()).map(|r| r.tau()).collect();
    (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64)
}

/// Per-layer stats with router temperatures filled in.
pub fn layer_stats(model: &ToyBackbone, gates: &[GateRecord]) -> Vec<LayerRouteStats> {
    let mut stats = routing_stats(gates);
    for s in &mut stats {
        s.tau = model
            .adapted_layers()
            .find(|l| l.layer_index == s.layer)
            .and_then(|l| l.router.as_ref())
            .map(|r| r.tau());
    }
    stats
}

fn mean_entropy(gates: &[GateRecord]) -> Option<f64> {
    let stats = routing_stats(gates);
    (!stats.is_empty()).then(|| stats.iter().map(|s| s.entropy).sum::<f64>() / stats.len() as f64)
}

/// Scores `samples` in chunks of `batch_size`, returning the metrics and every
/// real token's gate record.
pub fn evaluate_samples(
    model: &ToyBackbone,
    samples: &[Sample],
    gating: &Gating,
    batch_size: usize,
) -> Result<(TaskEval, Vec<GateRecord>)> {
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut correct_samples = 0usize;
    let mut gates = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = TokenBatch::new(&refs, PAD)?;
        let mut tape = Tape::new();
        let (out, _) = model.forward(&mut tape, &batch, gating, false)?;
        let vocab = model.config.vocab_size;
        let logits = tape.value(out.logits);
        let mut sample_ok = vec![true; chunk.len()];
        for ((row, &t), &s) in logits.chunks_exact(vocab).zip(&batch.targets).zip(&batch.sample_of_target) {
            let (mut best, mut max) = (0, f64::NEG_INFINITY);
            for (i, &v) in row.iter().enumerate() {
                if v > max {
                    best = i;
                    max = v;
                }
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[t];
            tokens += 1;
            if best != t {
                sample_ok[s] = false;
            }
        }
        correct_samples += sample_ok.iter().filter(|&&ok| ok).count();
        gates.extend(gate_records(&tape, &out));
    }
    let eval = TaskEval {
        loss: loss_sum / tokens.max(1) as f64,
        accuracy: correct_samples as f64 / samples.len().max(1) as f64,
        entropy_mean: mean_entropy(&gates),
        // temperature only matters when the router ran
        tau_mean: if matches!(gating, Gating::Soft | Gating::TopK(_)) { tau_mean(model) } else { None },
    };
    Ok((eval, gates))
}

/// Eval-split metrics of every task keyed by id, plus the gate records of
/// the specialist tasks pooled together.
pub fn evaluate_all(
    model: &ToyBackbone,
    data: &Datasets,
    gating: &Gating,
    batch_size: usize,
) -> Result<(BTreeMap<String, TaskEval>, Vec<GateRecord>)> {
    let mut out = BTreeMap::new();
    let mut pooled = Vec::new();
    for task in &data.tasks {
        let (ev, gates) = evaluate_samples(model, &task.eval, gating, batch_size)?;
        out.insert(task.spec.id.clone(), ev);
        pooled.extend(gates);
    }
    let (ev, _) = evaluate_samples(model, &data.general.eval, gating, batch_size)?;
    out.insert(data.general.spec.id.clone(), ev);
    Ok((out, pooled))
}
