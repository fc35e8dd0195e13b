use serde::Serialize;

use super::backbone::{ParamKind, ToyBackbone};
use super::batch::TokenBatch;
use super::moe_layer::{Gating, MoeLoraLayer};
use crate::error::{Error, Result};
use crate::routing::RoutingMode;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    /// Parameters touched by one token's forward pass, as a worst-case bound.
    pub active: usize,
    pub frozen: usize,
}

impl ParamCount {
    pub fn active_ratio(&self) -> f64 {
        if self.trainable == 0 {
            0.0
        } else {
            self.active as f64 / self.trainable as f64
        }
    }
}

fn router_params(layer: &MoeLoraLayer) -> usize {
    layer.router.as_ref().map_or(0, |r| r.num_params())
}

/// Trainable and worst-case active counts of one adapted layer.
pub fn layer_param_count(layer: &MoeLoraLayer, mode: RoutingMode) -> Result<(usize, usize)> {
    let sizes: Vec<usize> = layer.experts.iter().map(|e| e.trainable_params()).collect();
    let router = router_params(layer);
    let trainable = sizes.iter().sum::<usize>() + router;
    let active = match mode {
        // an unrouted layer always runs its single expert
        _ if layer.router.is_none() => trainable,
        RoutingMode::Soft => trainable,
        RoutingMode::TopK(k) => {
            if k == 0 || k > sizes.len() {
                return Err(Error::config(
                    "mode",
                    format!("top-{k} routing over {} experts in layer {}", sizes.len(), layer.layer_index),
                ));
            }
            let mut sorted = sizes.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            router + sorted[..k].iter().sum::<usize>()
        }
    };
    Ok((trainable, active))
}

/// Closed-form accounting: `r (d + k)` per trainable expert plus `N k + 1`
/// per router. Trainable backbone tensors, if any, count in full.
pub fn count_params(model: &ToyBackbone, mode: RoutingMode) -> Result<ParamCount> {
    let mut trainable = 0;
    let mut active = 0;
    for layer in model.adapted_layers() {
        let (t, a) = layer_param_count(layer, mode)?;
        trainable += t;
        active += a;
    }
    let mut frozen = 0;
    for p in model.params() {
        match p.kind {
            ParamKind::Backbone if p.tensor.requires_grad() => {
                trainable += p.tensor.numel();
                active += p.tensor.numel();
            }
            ParamKind::Router => {}
            _ if !p.tensor.requires_grad() => frozen += p.tensor.numel(),
            _ => {}
        }
    }
    Ok(ParamCount { trainable, active, frozen })
}

/// Mean adapter parameters used per real token on `batch`: router parameters
/// plus the trainable size of every expert with a nonzero gate.
pub fn measured_active(model: &ToyBackbone, batch: &TokenBatch, mode: RoutingMode) -> Result<f64> {
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, batch, &Gating::from(mode), true)?;
    let mut total = 0.0;
    let routed: Vec<&MoeLoraLayer> = model.adapted_layers().filter(|l| l.router.is_some()).collect();
    for layer in model.adapted_layers().filter(|l| l.router.is_none()) {
        total += layer.experts.iter().map(|e| e.trainable_params()).sum::<usize>() as f64;
    }
    for (layer, g) in routed.iter().zip(&out.gates) {
        let n = layer.num_experts();
        let values = tape.value(g.gates);
        let tokens = values.len() / n;
        let mut used = 0usize;
        for row in values.chunks_exact(n) {
            used += row
                .iter()
                .zip(&layer.experts)
                .filter(|(p, _)| **p > 0.0)
                .map(|(_, e)| e.trainable_params())
                .sum::<usize>();
        }
        total += router_params(layer) as f64 + used as f64 / tokens.max(1) as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FreezeEntry {
    pub name: String,
    pub frozen: bool,
    pub role: ParamKind,
}

/// Classifies every named tensor as frozen or trainable.
pub fn freeze_report(model: &ToyBackbone) -> Vec<FreezeEntry> {
    model
        .params()
        .into_iter()
        .map(|p| FreezeEntry { name: p.name, frozen: !p.tensor.requires_grad(), role: p.kind })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{lora_init, ExpertRole};
    use crate::routing::Router;
    use crate::tensor::Tensor;

    fn single(router: bool) -> MoeLoraLayer {
        let e = lora_init(64, 64, 8, ExpertRole::Specialist, 1).unwrap();
        let r = router.then(|| Router::new(1, 64, 0.02, 2));
        MoeLoraLayer::new(Tensor::zeros(&[64, 64]), vec![e], r, 1).unwrap()
    }

    #[test]
    fn single_expert_closed_forms() {
        assert_eq!(layer_param_count(&single(false), RoutingMode::Soft).unwrap(), (1024, 1024));
        assert_eq!(layer_param_count(&single(true), RoutingMode::Soft).unwrap(), (1089, 1089));
    }

    #[test]
    fn frozen_base_counts_nothing() {
        let base = lora_init(64, 64, 8, ExpertRole::Base, 1).unwrap();
        let spec = lora_init(64, 64, 4, ExpertRole::Specialist, 2).unwrap();
        let layer = MoeLoraLayer::new(Tensor::zeros(&[64, 64]), vec![base, spec], Some(Router::new(2, 64, 0.0, 3)), 1)
            .unwrap();
        let (t, a) = layer_param_count(&layer, RoutingMode::TopK(1)).unwrap();
        assert_eq!(t, 4 * 128 + 129);
        assert_eq!(a, t);
        assert!(layer_param_count(&layer, RoutingMode::TopK(3)).is_err());
    }

    #[test]
    fn topk_bound_takes_largest_experts() {
        let experts = [8, 2, 4]
            .iter()
            .enumerate()
            .map(|(i, &r)| lora_init(16, 16, r, ExpertRole::Specialist, i as u64).unwrap())
            .collect();
        let layer =
            MoeLoraLayer::new(Tensor::zeros(&[16, 16]), experts, Some(Router::new(3, 16, 0.1, 9)), 1).unwrap();
        let (t, a) = layer_param_count(&layer, RoutingMode::TopK(2)).unwrap();
        assert_eq!(t, 14 * 32 + 49);
        assert_eq!(a, 12 * 32 + 49);
    }
}
