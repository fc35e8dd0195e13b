//! Layer-wise expert allocation.
//!
//! The number of experts at layer `l` (1-based) follows either a power law
//!
//! ```text
//! N_l = N_min + floor((N_max - N_min) * (l / L)^gamma)
//! ```
//!
//! or an explicit step profile. Each layer's experts are split into base
//! (listed first) and specialist slots and given ranks from a discrete set.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::ExpertRole;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RankPolicy {
    Uniform { rank: usize },
    /// Base slots get `base_rank`; specialists cycle through `specialist_ranks`,
    /// restarting at every layer.
    RoleBased {
        base_rank: usize,
        specialist_ranks: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSegment {
    pub from: usize,
    pub to: usize,
    pub experts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    PowerLaw,
    /// Piecewise-constant counts over inclusive, 1-based layer ranges.
    Step { segments: Vec<StepSegment> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub gamma: f64,
    pub num_layers: usize,
    pub rank_set: Vec<usize>,
    pub base_experts_per_layer: usize,
    pub rank_policy: RankPolicy,
    pub profile: Profile,
}

impl Default for AllocationConfig {
    /// Toy-scale power-law allocation over four layers.
    fn default() -> Self {
        Self {
            n_min: 2,
            n_max: 6,
            gamma: 2.0,
            num_layers: 4,
            rank_set: vec![8, 16, 32],
            base_experts_per_layer: 1,
            rank_policy: RankPolicy::RoleBased {
                base_rank: 16,
                specialist_ranks: vec![8, 16, 32],
            },
            profile: Profile::PowerLaw,
        }
    }
}

impl AllocationConfig {
    /// The 32-layer step deployment: layers 1-10 hold 2 experts, 11-19 hold 4, 20-32 hold 8.
    pub fn step_32() -> Self {
        Self {
            n_min: 2,
            n_max: 8,
            gamma: 1.0,
            num_layers: 32,
            profile: Profile::Step {
                segments: vec![
                    StepSegment { from: 1, to: 10, experts: 2 },
                    StepSegment { from: 11, to: 19, experts: 4 },
                    StepSegment { from: 20, to: 32, experts: 8 },
                ],
            },
            ..Self::default()
        }
    }

    /// A step profile with one explicit count per layer; `n_min`/`n_max` are
    /// widened to cover the counts.
    pub fn with_counts(&self, counts: &[usize]) -> Self {
        let segments = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| StepSegment { from: i + 1, to: i + 1, experts: n })
            .collect();
        Self {
            num_layers: counts.len(),
            n_min: counts.iter().copied().min().unwrap_or(1).min(self.n_min),
            n_max: counts.iter().copied().max().unwrap_or(1).max(self.n_max),
            profile: Profile::Step { segments },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 {
            return Err(Error::config("allocation.n_min", "must be at least 1"));
        }
        if self.n_max < self.n_min {
            return Err(Error::config("allocation.n_max", "must be >= n_min"));
        }
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::config("allocation.gamma", "must be a finite value >= 1"));
        }
        if self.num_layers < 1 {
            return Err(Error::config("allocation.num_layers", "must be at least 1"));
        }
        if self.rank_set.is_empty() || self.rank_set.contains(&0) {
            return Err(Error::config("allocation.rank_set", "must be non-empty and positive"));
        }
        if self.rank_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("allocation.rank_set", "must be strictly ascending"));
        }
        if self.base_experts_per_layer >= self.n_min {
            return Err(Error::config(
                "allocation.base_experts_per_layer",
                "must be smaller than n_min so every layer keeps a specialist",
            ));
        }
        let check_rank = |field: &str, r: usize| {
            if self.rank_set.contains(&r) {
                Ok(())
            } else {
                Err(Error::config(field, format!("rank {r} is not in rank_set {:?}", self.rank_set)))
            }
        };
        match &self.rank_policy {
            RankPolicy::Uniform { rank } => check_rank("allocation.rank_policy.rank", *rank)?,
            RankPolicy::RoleBased { base_rank, specialist_ranks } => {
                check_rank("allocation.rank_policy.base_rank", *base_rank)?;
                if specialist_ranks.is_empty() {
                    return Err(Error::config("allocation.rank_policy.specialist_ranks", "must be non-empty"));
                }
                for r in specialist_ranks {
                    check_rank("allocation.rank_policy.specialist_ranks", *r)?;
                }
            }
        }
        if let Profile::Step { segments } = &self.profile {
            let mut next = 1;
            for s in segments {
                if s.from != next || s.to < s.from {
                    return Err(Error::config(
                        "allocation.profile.segments",
                        format!("segments must cover layers 1..={} contiguously (problem at {}..={})", self.num_layers, s.from, s.to),
                    ));
                }
                if s.experts < self.n_min || s.experts > self.n_max {
                    return Err(Error::config(
                        "allocation.profile.segments",
                        format!("count {} outside [{}, {}]", s.experts, self.n_min, self.n_max),
                    ));
                }
                next = s.to + 1;
            }
            if next != self.num_layers + 1 {
                return Err(Error::config(
                    "allocation.profile.segments",
                    format!("segments end at layer {} but num_layers is {}", next - 1, self.num_layers),
                ));
            }
        }
        Ok(())
    }

    /// Checks that every rank fits a `d x k` weight.
    pub fn validate_for_dims(&self, d: usize, k: usize) -> Result<()> {
        self.validate()?;
        let limit = d.min(k);
        if let Some(r) = self.rank_set.iter().find(|&&r| r > limit) {
            return Err(Error::config(
                "allocation.rank_set",
                format!("rank {r} exceeds min(d, k) = {limit}"),
            ));
        }
        Ok(())
    }
}

/// Experts at layer `l` (1-based).
pub fn experts_per_layer(cfg: &AllocationConfig, l: usize) -> Result<usize> {
    if l < 1 || l > cfg.num_layers {
        return Err(Error::Index { what: "layer", index: l, limit: cfg.num_layers });
    }
    match &cfg.profile {
        Profile::PowerLaw => Ok(cfg.n_min + power_law_increment(cfg.n_max - cfg.n_min, l, cfg.num_layers, cfg.gamma)),
        Profile::Step { segments } => segments
            .iter()
            .find(|s| s.from <= l && l <= s.to)
            .map(|s| s.experts)
            .ok_or_else(|| Error::config("allocation.profile.segments", format!("no segment covers layer {l}"))),
    }
}

/// `floor(span * (l / L)^gamma)`, exact in integers when `gamma` is integral.
fn power_law_increment(span: usize, l: usize, layers: usize, gamma: f64) -> usize {
    if gamma.fract() == 0.0 && gamma <= 16.0 {
        let g = gamma as u32;
        if let (Some(num), Some(den)) = ((l as u128).checked_pow(g), (layers as u128).checked_pow(g)) {
            if let Some(prod) = num.checked_mul(span as u128) {
                return (prod / den) as usize;
            }
        }
    }
    let v = span as f64 * (l as f64 / layers as f64).powf(gamma);
    // guard against e.g. 2.9999999999999996 for an exact 3
    (v + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSlot {
    pub role: ExpertRole,
    pub rank: usize,
}

/// Per-layer expert slots for the whole backbone (index 0 is layer 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub per_layer: Vec<Vec<ExpertSlot>>,
}

pub fn build_plan(cfg: &AllocationConfig) -> Result<AllocationPlan> {
    cfg.validate()?;
    let mut per_layer = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        let n = experts_per_layer(cfg, l)?;
        let slots = (0..n)
            .map(|slot| {
                let role = if slot < cfg.base_experts_per_layer { ExpertRole::Base } else { ExpertRole::Specialist };
                let rank = match &cfg.rank_policy {
                    RankPolicy::Uniform { rank } => *rank,
                    RankPolicy::RoleBased { base_rank, specialist_ranks } => match role {
                        ExpertRole::Base => *base_rank,
                        ExpertRole::Specialist => {
                            specialist_ranks[(slot - cfg.base_experts_per_layer) % specialist_ranks.len()]
                        }
                    },
                };
                ExpertSlot { role, rank }
            })
            .collect();
        per_layer.push(slots);
    }
    Ok(AllocationPlan { per_layer })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRow {
    pub layer: usize,
    pub count: usize,
    pub ranks: Vec<usize>,
    pub roles: Vec<ExpertRole>,
}

impl AllocationPlan {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_layer.iter().map(Vec::len).collect()
    }

    pub fn total_experts(&self) -> usize {
        self.per_layer.iter().map(Vec::len).sum()
    }

    /// CSV with header `layer,slot,role,rank`; layers are 1-based, slots 0-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,slot,role,rank\n");
        for (l, slots) in self.per_layer.iter().enumerate() {
            for (i, slot) in slots.iter().enumerate() {
                s.push_str(&format!("{},{},{},{}\n", l + 1, i, slot.role.as_str(), slot.rank));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Checkpoint(format!("plan csv line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "layer,slot,role,rank" => {}
            other => return Err(bad(1, format!("unexpected header {:?}", other.map(|o| o.1)))),
        }
        let mut per_layer: Vec<Vec<ExpertSlot>> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad(i + 1, format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 1, format!("{s:?}: {e}")));
            let (layer, slot, role, rank) = (num(f[0])?, num(f[1])?, f[2].parse::<ExpertRole>()?, num(f[3])?);
            if layer == 0 || layer > per_layer.len() + 1 {
                return Err(bad(i + 1, format!("layer {layer} out of order")));
            }
            if layer == per_layer.len() + 1 {
                per_layer.push(Vec::new());
            }
            let slots = &mut per_layer[layer - 1];
            if slot != slots.len() {
                return Err(bad(i + 1, format!("slot {slot} out of order")));
            }
            slots.push(ExpertSlot { role, rank });
        }
        Ok(Self { per_layer })
    }

    pub fn summary(&self) -> Vec<PlanRow> {
        self.per_layer
            .iter()
            .enumerate()
            .map(|(l, slots)| PlanRow {
                layer: l + 1,
                count: slots.len(),
                ranks: slots.iter().map(|s| s.rank).collect(),
                roles: slots.iter().map(|s| s.role).collect(),
            })
            .collect()
    }
}

/// Summary table rows for a plan (one row per layer).
pub fn plan_summary(plan: &AllocationPlan) -> Vec<PlanRow> {
    plan.summary()
}

impl fmt::Display for AllocationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>7}  {:<24}  roles", "layer", "experts", "ranks")?;
        for row in self.summary() {
            let ranks: Vec<String> = row.ranks.iter().map(usize::to_string).collect();
            let roles: String = row
                .roles
                .iter()
                .map(|r| match r {
                    ExpertRole::Base => 'B',
                    ExpertRole::Specialist => 'S',
                })
                .collect();
            writeln!(f, "{:>5}  {:>7}  {:<24}  {}", row.layer, row.count, ranks.join(","), roles)?;
        }
        Ok(())
    }
}
