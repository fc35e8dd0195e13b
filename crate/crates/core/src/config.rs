//! Experiment configuration: one strict TOML file describing the backbone,
//! adapters, training, tasks and outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::build_plan;
use crate::error::{Error, Result};
use crate::harness::ablation::AblationStrategy;
use crate::harness::tasks::{TaskKind, TaskSpec, MAX_TASKS};
use crate::harness::train::{PretrainConfig, TrainConfig};
use crate::model::{AdapterConfig, BackboneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    /// Held-out task the backbone is pretrained on; adapters never train on it.
    pub general: TaskSpec,
    pub specialists: Vec<TaskSpec>,
}

impl Default for TasksConfig {
    fn default() -> Self {
        Self {
            general: TaskSpec::new("general", TaskKind::SequenceCopy, [16, 112], 6),
            specialists: vec![
                TaskSpec::new("reverse", TaskKind::SequenceReverse, [64, 160], 6),
                TaskSpec {
                    modulus: Some(31),
                    train_samples: 800,
                    eval_samples: 161,
                    ..TaskSpec::new("modadd", TaskKind::ModularArithmetic, [96, 192], 2)
                },
                TaskSpec::new("recall", TaskKind::KeyValueRecall, [128, 224], 3),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Training steps per strategy; 0 reuses `train.total_steps`.
    pub steps: usize,
    /// Rank of every expert during the ablation, so equal expert totals are
    /// equal trainable budgets.
    pub rank: usize,
    pub strategies: Vec<AblationStrategy>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { steps: 0, rank: 16, strategies: AblationStrategy::presets(4) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub out_dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { out_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub tasks: TasksConfig,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses strictly: unknown or missing keys fail with their dotted path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path.is_empty() { "<root>".to_string() } else { path }, e.inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate(&self.backbone)?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let b = &self.backbone;
        self.tasks.general.validate("tasks.general", b.vocab_size, b.max_seq_len)?;
        if self.tasks.specialists.is_empty() || self.tasks.specialists.len() >= MAX_TASKS {
            return Err(Error::config("tasks.specialists", format!("need 1..{} tasks", MAX_TASKS)));
        }
        for (i, t) in self.tasks.specialists.iter().enumerate() {
            t.validate(&format!("tasks.specialists[{i}]"), b.vocab_size, b.max_seq_len)?;
        }
        if !self.adapter.allocation.rank_set.contains(&self.ablation.rank) {
            return Err(Error::config("ablation.rank", "must be one of adapter.allocation.rank_set"));
        }
        if let crate::routing::RoutingMode::TopK(k) = self.train.mode {
            let plan = build_plan(&self.adapter.allocation)?;
            if self.adapter.routed && plan.per_layer.iter().any(|l| l.len() < k) {
                return Err(Error::config("train.mode", format!("top-{k} exceeds the experts of some layer")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The default config with explanatory comments; parses to
/// [`ExperimentConfig::default`].
pub const DEFAULT_CONFIG_TOML: &str = r#"# Mixture-of-LoRA-experts toy experiment.
# Unknown keys are rejected.

[backbone]
vocab_size = 256
d_model = 64
n_heads = 4
d_ff = 128
n_layers = 4
max_seq_len = 32

[adapter]
# Projection carrying the experts in every block:
# attn_q, attn_k, attn_v, attn_o, ff_up or ff_down.
target = "ff_up"
# false = a single unrouted expert per layer (plain LoRA).
routed = true
router_init_std = 0.02
# Gradient multiplier for base experts; 0 keeps them frozen.
base_grad_scale = 0.0

[adapter.allocation]
# Experts at layer l: n_min + floor((n_max - n_min) * (l / num_layers)^gamma)
n_min = 2
n_max = 6
gamma = 2.0
num_layers = 4
# Allowed LoRA ranks; every expert uses alpha = 2 * rank.
rank_set = [8, 16, 32]
base_experts_per_layer = 1

[adapter.allocation.rank_policy]
kind = "role_based"
base_rank = 16
specialist_ranks = [8, 16, 32]

[adapter.allocation.profile]
# "power_law", or "step" with segments = [{ from = 1, to = 2, experts = 2 }, ...]
kind = "power_law"

[pretrain]
# Full-parameter training of the bare backbone on the general task.
steps = 600
learning_rate = 0.003
batch_size = 32
warmup_ratio = 0.05

[train]
# 5e-5 suits an 8B-parameter model; a toy backbone needs larger steps.
learning_rate = 0.003
# 128 at full scale.
batch_size = 32
total_steps = 300
warmup_ratio = 0.03
lambda_bal = 0.01
seed = 0
# "soft" or "topk:K"
mode = "soft"
weight_decay = 0.0
max_grad_norm = 1.0
eval_interval = 50
eval_batch_size = 100

[tasks.general]
id = "general"
kind = "sequence_copy"
vocab = [16, 112]
seq_len = 6
train_samples = 2000
eval_samples = 200

[[tasks.specialists]]
id = "reverse"
kind = "sequence_reverse"
vocab = [64, 160]
seq_len = 6
train_samples = 2000
eval_samples = 200

[[tasks.specialists]]
id = "modadd"
kind = "modular_arithmetic"
vocab = [96, 192]
seq_len = 2
train_samples = 800
eval_samples = 161
modulus = 31

[[tasks.specialists]]
id = "recall"
kind = "key_value_recall"
vocab = [128, 224]
seq_len = 3
train_samples = 2000
eval_samples = 200

[ablation]
# Steps per strategy; 0 uses train.total_steps.
steps = 0
# Every expert gets this rank so the strategies share one parameter budget.
rank = 16

[[ablation.strategies]]
name = "uniform"
counts = [4, 4, 4, 4]

[[ablation.strategies]]
name = "bottom_heavy"
counts = [8, 4, 2, 2]

[[ablation.strategies]]
name = "top_heavy"
counts = [2, 2, 4, 8]

[output]
out_dir = "runs"
"#;
