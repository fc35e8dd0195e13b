//! Checkpoint directories:
//!
//! ```text
//! manifest.txt   config hash, one line per expert and router, tensor index
//! plan.csv       allocation plan
//! tensors/*.txt  one dump per named tensor
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::backbone::ToyBackbone;
use crate::allocation::AllocationPlan;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const PLAN: &str = "plan.csv";
const TENSOR_DIR: &str = "tensors";

/// The allocation plan realized by `model`'s adapters.
pub fn model_plan(model: &ToyBackbone) -> AllocationPlan {
    AllocationPlan {
        per_layer: model
            .adapted_layers()
            .map(|l| {
                l.experts
                    .iter()
                    .map(|e| crate::allocation::ExpertSlot { role: e.role, rank: e.rank })
                    .collect()
            })
            .collect(),
    }
}

pub fn manifest_text(model: &ToyBackbone, config_hash: &str, step: usize) -> String {
    let mut s = format!("config_hash {config_hash}\nstep {step}\n");
    for layer in model.adapted_layers() {
        let l = layer.layer_index;
        for (i, e) in layer.experts.iter().enumerate() {
            writeln!(
                s,
                "expert layer{l}.expert{i} rank={} role={} alpha={:e} trainable={}",
                e.rank,
                e.role.as_str(),
                e.alpha,
                e.trainable()
            )
            .unwrap();
        }
        if let Some(r) = &layer.router {
            writeln!(s, "router layer{l} num_experts={} tau={:e}", r.num_experts(), r.tau()).unwrap();
        }
    }
    for p in model.params() {
        writeln!(s, "tensor {} {}", p.name, p.kind.as_str()).unwrap();
    }
    s
}

/// Writes every named tensor plus manifest and plan. Refuses to overwrite.
pub fn save_checkpoint(model: &ToyBackbone, config_hash: &str, step: usize, dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::Checkpoint(format!("{} already exists", dir.display())));
    }
    let tdir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for p in model.params() {
        let path = tdir.join(format!("{}.txt", p.name));
        write_tensor(&path, p.tensor).map_err(|e| Error::io(&path, e))?;
    }
    let plan_path = dir.join(PLAN);
    fs::write(&plan_path, model_plan(model).to_csv()).map_err(|e| Error::io(&plan_path, e))?;
    let man_path = dir.join(MANIFEST);
    fs::write(&man_path, manifest_text(model, config_hash, step)).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

fn manifest_field(dir: &Path, key: &str) -> Result<String> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let prefix = format!("{key} ");
    text.lines()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("manifest has no {key} line")))
}

/// Reads the config hash recorded in a checkpoint.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    manifest_field(dir, "config_hash")
}

/// Reads the training step a checkpoint was taken at.
pub fn checkpoint_step(dir: &Path) -> Result<usize> {
    manifest_field(dir, "step")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad step line: {e}")))
}

/// Loads tensors into a model built from the same config. The plan, hash and
/// every tensor shape must agree.
pub fn load_checkpoint(model: &mut ToyBackbone, config_hash: &str, dir: &Path) -> Result<()> {
    let stored = checkpoint_hash(dir)?;
    if stored != config_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint config hash {stored} does not match {config_hash}"
        )));
    }
    let plan_path = dir.join(PLAN);
    let plan_text = fs::read_to_string(&plan_path).map_err(|e| Error::io(&plan_path, e))?;
    if AllocationPlan::from_csv(&plan_text)? != model_plan(model) {
        return Err(Error::Checkpoint("allocation plan differs from the model's".into()));
    }
    let tdir = dir.join(TENSOR_DIR);
    for p in model.params_mut() {
        let path = tdir.join(format!("{}.txt", p.name));
        let t = read_tensor(&path).map_err(|e| Error::io(&path, e))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::{AdapterConfig, BackboneConfig};
    use crate::allocation::{AllocationConfig, RankPolicy};

    fn model() -> ToyBackbone {
        let cfg = BackboneConfig { vocab_size: 9, d_model: 8, n_heads: 2, d_ff: 8, n_layers: 2, max_seq_len: 6 };
        let mut m = ToyBackbone::new(cfg, 1).unwrap();
        let adapter = AdapterConfig {
            allocation: AllocationConfig {
                n_min: 2,
                n_max: 3,
                gamma: 1.0,
                num_layers: 2,
                rank_set: vec![1, 2],
                base_experts_per_layer: 1,
                rank_policy: RankPolicy::RoleBased { base_rank: 2, specialist_ranks: vec![1, 2] },
                profile: crate::allocation::Profile::PowerLaw,
            },
            ..AdapterConfig::default()
        };
        m.attach_adapters(&adapter, 2).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        for l in m.adapted_layers_mut() {
            for e in &mut l.experts {
                e.b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() / 3.0);
            }
            l.router.as_mut().unwrap().set_tau(0.7);
        }
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&m, "abc", 7, &ck).unwrap();
        assert!(save_checkpoint(&m, "abc", 7, &ck).is_err());
        assert_eq!(checkpoint_step(&ck).unwrap(), 7);
        let mut fresh = model();
        assert!(load_checkpoint(&mut fresh, "other", &ck).is_err());
        load_checkpoint(&mut fresh, "abc", &ck).unwrap();
        assert_eq!(fresh, m);
        let manifest = fs::read_to_string(ck.join(MANIFEST)).unwrap();
        assert!(manifest.contains("expert layer1.expert0 rank=2 role=base alpha=4e0 trainable=false"));
        assert!(manifest.contains("router layer2 num_experts=3"));
    }
}
