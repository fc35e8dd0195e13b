use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiment::{run_prepared, trainable_params, Prepared};
use crate::allocation::RankPolicy;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// A named per-layer expert count profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationStrategy {
    pub name: String,
    pub counts: Vec<usize>,
}

impl AblationStrategy {
    pub fn new(name: &str, counts: &[usize]) -> Self {
        Self { name: name.to_string(), counts: counts.to_vec() }
    }

    /// Uniform, bottom-heavy and top-heavy profiles over `layers` layers with
    /// the same total of `4 * layers` experts.
    pub fn presets(layers: usize) -> Vec<Self> {
        let top: Vec<usize> = (0..layers)
            .map(|i| match (4 * i) / layers.max(1) {
                0 | 1 => 2,
                2 => 4,
                _ => 8,
            })
            .collect();
        // move the surplus or deficit onto the middle so totals match exactly
        let mut top = top;
        let target = 4 * layers;
        while top.iter().sum::<usize>() > target {
            let i = top.iter().rposition(|&c| c > 2).unwrap_or(0);
            top[i] -= 1;
        }
        while top.iter().sum::<usize>() < target {
            let i = top.iter().position(|&c| c < 8).unwrap_or(0);
            top[i] += 1;
        }
        let bottom: Vec<usize> = top.iter().rev().copied().collect();
        vec![
            Self { name: "uniform".into(), counts: vec![4; layers] },
            Self { name: "bottom_heavy".into(), counts: bottom },
            Self { name: "top_heavy".into(), counts: top },
        ]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub counts: Vec<usize>,
    pub trainable: usize,
    pub tasks: Vec<TaskScore>,
    pub avg_loss: f64,
    pub avg_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Full-precision CSV, one row per strategy.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,counts,trainable");
        if let Some(first) = self.rows.first() {
            for t in &first.tasks {
                write!(s, ",{0}_loss,{0}_accuracy", t.task).unwrap();
            }
        }
        s.push_str(",avg_loss,avg_accuracy\n");
        for r in &self.rows {
            let counts: Vec<String> = r.counts.iter().map(usize::to_string).collect();
            write!(s, "{},{},{}", r.strategy, counts.join("-"), r.trainable).unwrap();
            for t in &r.tasks {
                write!(s, ",{:e},{:e}", t.loss, t.accuracy).unwrap();
            }
            writeln!(s, ",{:e},{:e}", r.avg_loss, r.avg_accuracy).unwrap();
        }
        s
    }

    /// Rounded, aligned display form.
    pub fn to_table(&self) -> String {
        let mut header = vec!["strategy".to_string(), "counts".into(), "trainable".into()];
        if let Some(first) = self.rows.first() {
            for t in &first.tasks {
                header.push(format!("{} loss", t.task));
                header.push(format!("{} acc", t.task));
            }
        }
        header.push("avg loss".into());
        header.push("avg acc".into());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut cells = vec![
                r.strategy.clone(),
                r.counts.iter().map(usize::to_string).collect::<Vec<_>>().join("-"),
                r.trainable.to_string(),
            ];
            for t in &r.tasks {
                cells.push(format!("{:.4}", t.loss));
                cells.push(format!("{:.3}", t.accuracy));
            }
            cells.push(format!("{:.4}", r.avg_loss));
            cells.push(format!("{:.3}", r.avg_accuracy));
            lines.push(cells);
        }
        let widths: Vec<usize> =
            (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == name)
    }

    /// Whether top-heavy reaches at least uniform's average accuracy, when both ran.
    pub fn top_heavy_at_least_uniform(&self) -> Option<bool> {
        Some(self.row("top_heavy")?.avg_accuracy >= self.row("uniform")?.avg_accuracy)
    }
}

/// Rejects empty sets, wrong depths and unequal expert budgets.
pub fn check_budgets(strategies: &[AblationStrategy], layers: usize) -> Result<()> {
    let first = strategies
        .first()
        .ok_or_else(|| Error::config("ablation.strategies", "at least one strategy is required"))?;
    for s in strategies {
        if s.counts.len() != layers {
            return Err(Error::config(
                "ablation.strategies",
                format!("{} lists {} layers, the backbone has {layers}", s.name, s.counts.len()),
            ));
        }
        if s.total() != first.total() {
            return Err(Error::config(
                "ablation.strategies",
                format!(
                    "unequal expert budgets: {} has {} experts, {} has {}",
                    first.name,
                    first.total(),
                    s.name,
                    s.total()
                ),
            ));
        }
    }
    Ok(())
}

/// Trains one model per strategy on the same data and backbone, reporting
/// the final specialist-task metrics.
pub fn run_ablation(base: &ExperimentConfig, prepared: &Prepared, strategies: &[AblationStrategy]) -> Result<AblationTable> {
    check_budgets(strategies, base.backbone.n_layers)?;
    let configs = strategies
        .iter()
        .map(|s| {
            let mut cfg = base.clone();
            cfg.adapter.allocation = base.adapter.allocation.with_counts(&s.counts);
            cfg.adapter.allocation.rank_policy = RankPolicy::Uniform { rank: base.ablation.rank };
            if base.ablation.steps > 0 {
                cfg.train.total_steps = base.ablation.steps;
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let budgets = configs.iter().map(trainable_params).collect::<Result<Vec<_>>>()?;
    if budgets.iter().any(|&b| b != budgets[0]) {
        return Err(Error::config("ablation.strategies", format!("unequal trainable budgets {budgets:?}")));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for (s, cfg) in strategies.iter().zip(&configs) {
        let outcome = run_prepared(cfg, prepared, &mut |_| Ok(()))?;
        let last = &outcome.metrics.final_eval().tasks;
        let tasks: Vec<TaskScore> = prepared
            .data
            .tasks
            .iter()
            .map(|t| {
                let e = &last[&t.spec.id];
                TaskScore { task: t.spec.id.clone(), loss: e.loss, accuracy: e.accuracy }
            })
            .collect();
        let n = tasks.len() as f64;
        rows.push(AblationRow {
            strategy: s.name.clone(),
            counts: s.counts.clone(),
            trainable: outcome.metrics.param_count.trainable,
            avg_loss: tasks.iter().map(|t| t.loss).sum::<f64>() / n,
            avg_accuracy: tasks.iter().map(|t| t.accuracy).sum::<f64>() / n,
            tasks,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_share_budget() {
        let p = AblationStrategy::presets(4);
        assert_eq!(p[0].counts, vec![4, 4, 4, 4]);
        assert_eq!(p[1].counts, vec![8, 4, 2, 2]);
        assert_eq!(p[2].counts, vec![2, 2, 4, 8]);
        for layers in 1..12 {
            let p = AblationStrategy::presets(layers);
            assert!(check_budgets(&p, layers).is_ok(), "{layers}: {p:?}");
        }
    }

    #[test]
    fn guard_rejects_unequal_budgets() {
        let s = [AblationStrategy::new("uniform", &[4, 4, 4, 4]), AblationStrategy::new("top_heavy", &[2, 2, 8, 4])];
        assert!(check_budgets(&s, 4).is_ok());
        let s = [AblationStrategy::new("uniform", &[4, 4, 4, 4]), AblationStrategy::new("top_heavy", &[2, 2, 8, 8])];
        assert!(matches!(check_budgets(&s, 4), Err(Error::Config { .. })));
        assert!(check_budgets(&[], 4).is_err());
        assert!(check_budgets(&[AblationStrategy::new("short", &[4, 4])], 4).is_err());
    }

    #[test]
    fn csv_and_table_shapes() {
        let row = |name: &str, acc: f64| AblationRow {
            strategy: name.into(),
            counts: vec![4, 4],
            trainable: 10,
            tasks: vec![TaskScore { task: "a".into(), loss: 0.5, accuracy: acc }],
            avg_loss: 0.5,
            avg_accuracy: acc,
        };
        let t = AblationTable { rows: vec![row("uniform", 0.5), row("top_heavy", 0.75)] };
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("strategy,counts,trainable,a_loss,a_accuracy,avg_loss,avg_accuracy\n"));
        assert!(csv.contains("top_heavy,4-4,10,5e-1,7.5e-1,5e-1,7.5e-1"));
        assert_eq!(t.to_table().lines().count(), 3);
        assert_eq!(t.top_heavy_at_least_uniform(), Some(true));
    }
}
