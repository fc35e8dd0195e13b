use super::tasks::{gen_tasks, Datasets};
use super::train::{pretrain_backbone, train, MetricRecord, RunMetrics};
use crate::allocation::{AllocationConfig, AllocationPlan, RankPolicy};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{count_params, ToyBackbone};
use crate::seed::derive_seed;

/// Data plus a pretrained, frozen backbone without adapters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Datasets,
    pub backbone: ToyBackbone,
    pub pretrain_losses: Vec<f64>,
}

pub struct RunOutcome {
    pub model: ToyBackbone,
    pub plan: AllocationPlan,
    pub metrics: RunMetrics,
}

/// Generates the datasets and pretrains the backbone for `cfg.train.seed`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let data = gen_tasks(&cfg.tasks.specialists, &cfg.tasks.general, seed)?;
    let mut backbone = ToyBackbone::new(cfg.backbone.clone(), derive_seed(seed, "backbone", &[]))?;
    let pretrain_losses = pretrain_backbone(&mut backbone, &data.general, &cfg.pretrain, seed)?;
    Ok(Prepared { data, backbone, pretrain_losses })
}

/// Attaches freshly initialized adapters to a copy of the prepared backbone.
pub fn build_model(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<(ToyBackbone, AllocationPlan)> {
    let mut model = prepared.backbone.clone();
    let plan = model.attach_adapters(&cfg.adapter, derive_seed(cfg.train.seed, "adapters", &[]))?;
    Ok((model, plan))
}

/// Trains adapters on top of `prepared`.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<RunOutcome> {
    let (mut model, plan) = build_model(cfg, prepared)?;
    let metrics = train(&mut model, &prepared.data, &cfg.train, cfg.adapter.base_grad_scale, sink)?;
    Ok(RunOutcome { model, plan, metrics })
}

pub fn run_experiment(cfg: &ExperimentConfig, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<RunOutcome> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared, sink)
}

/// A single unrouted LoRA per layer on the same target, with the smallest
/// rank whose trainable count reaches `min_trainable`.
pub fn shared_lora_baseline(cfg: &ExperimentConfig, min_trainable: usize) -> Result<ExperimentConfig> {
    let (d, k) = cfg.adapter.target.dims(&cfg.backbone);
    let layers = cfg.backbone.n_layers;
    let rank = (1..=d.min(k))
        .find(|r| r * (d + k) * layers >= min_trainable)
        .ok_or_else(|| Error::config("adapter", format!("no rank up to {} reaches {min_trainable} parameters", d.min(k))))?;
    let mut out = cfg.clone();
    out.adapter.routed = false;
    out.adapter.allocation = AllocationConfig {
        n_min: 1,
        n_max: 1,
        gamma: 1.0,
        num_layers: layers,
        rank_set: vec![rank],
        base_experts_per_layer: 0,
        rank_policy: RankPolicy::Uniform { rank },
        profile: crate::allocation::Profile::PowerLaw,
    };
    out.ablation.rank = rank;
    out.validate()?;
    Ok(out)
}

/// Trainable parameter count of `cfg`'s adapters, without training.
pub fn trainable_params(cfg: &ExperimentConfig) -> Result<usize> {
    let mut model = ToyBackbone::new(cfg.backbone.clone(), 0)?;
    model.attach_adapters(&cfg.adapter, 0)?;
    Ok(count_params(&model, cfg.train.mode)?.trainable)
}
