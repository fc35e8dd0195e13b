//! A small pre-norm decoder-only transformer whose per-block projections can
//! be wrapped in [`MoeLoraLayer`]s.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::batch::TokenBatch;
use super::moe_layer::{Gating, LayerVars, MoeLoraLayer};
use crate::allocation::{build_plan, AllocationConfig, AllocationPlan, ExpertSlot};
use crate::error::{Error, Result};
use crate::lora::{lora_init, ExpertRole};
use crate::routing::{load_balance_loss_tape, GateRecord, Router};
use crate::seed::derive_seed;
use crate::tensor::{Gradients, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_layers: 4,
            max_seq_len: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.vocab_size >= 2, "backbone.vocab_size", "must be at least 2"),
            (self.d_model >= 1, "backbone.d_model", "must be positive"),
            (self.n_heads >= 1 && self.d_model % self.n_heads == 0, "backbone.n_heads", "must divide d_model"),
            (self.d_ff >= 1, "backbone.d_ff", "must be positive"),
            (self.n_layers >= 1, "backbone.n_layers", "must be positive"),
            (self.max_seq_len >= 2, "backbone.max_seq_len", "must be at least 2"),
        ];
        for (ok, field, msg) in checks {
            if !ok {
                return Err(Error::config(field, msg));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfUp,
    FfDown,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 6] = [
        AdapterTarget::AttnQ,
        AdapterTarget::AttnK,
        AdapterTarget::AttnV,
        AdapterTarget::AttnO,
        AdapterTarget::FfUp,
        AdapterTarget::FfDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterTarget::AttnQ => "attn_q",
            AdapterTarget::AttnK => "attn_k",
            AdapterTarget::AttnV => "attn_v",
            AdapterTarget::AttnO => "attn_o",
            AdapterTarget::FfUp => "ff_up",
            AdapterTarget::FfDown => "ff_down",
        }
    }

    /// `(out, in)` dimensions of the projection.
    pub fn dims(self, cfg: &BackboneConfig) -> (usize, usize) {
        match self {
            AdapterTarget::FfUp => (cfg.d_ff, cfg.d_model),
            AdapterTarget::FfDown => (cfg.d_model, cfg.d_ff),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Which projection of every block carries the experts.
    pub target: AdapterTarget,
    pub allocation: AllocationConfig,
    /// Without a router every layer must hold exactly one expert (plain LoRA).
    pub routed: bool,
    pub router_init_std: f64,
    /// Gradient multiplier for base experts; 0 freezes them.
    pub base_grad_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            target: AdapterTarget::FfUp,
            allocation: AllocationConfig::default(),
            routed: true,
            router_init_std: 0.02,
            base_grad_scale: 0.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let (d, k) = self.target.dims(backbone);
        self.allocation.validate_for_dims(d, k)?;
        if self.allocation.num_layers != backbone.n_layers {
            return Err(Error::config(
                "adapter.allocation.num_layers",
                format!("must equal backbone.n_layers = {}", backbone.n_layers),
            ));
        }
        if !(0.0..=1.0).contains(&self.base_grad_scale) {
            return Err(Error::config("adapter.base_grad_scale", "must lie in [0, 1]"));
        }
        if !(self.router_init_std >= 0.0) {
            return Err(Error::config("adapter.router_init_std", "must be non-negative"));
        }
        if !self.routed {
            let plan = build_plan(&self.allocation)?;
            if plan.per_layer.iter().any(|l| l.len() != 1) {
                return Err(Error::config("adapter.routed", "an unrouted adapter needs exactly one expert per layer"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Plain(Tensor),
    Adapted(MoeLoraLayer),
}

impl Projection {
    pub fn weight(&self) -> &Tensor {
        match self {
            Projection::Plain(w) => w,
            Projection::Adapted(l) => &l.w0,
        }
    }

    pub fn adapter(&self) -> Option<&MoeLoraLayer> {
        match self {
            Projection::Adapted(l) => Some(l),
            Projection::Plain(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Indexed by [`AdapterTarget::index`].
    pub projections: Vec<Projection>,
}

impl Block {
    pub fn proj(&self, t: AdapterTarget) -> &Projection {
        &self.projections[t.index()]
    }
}

/// Where a parameter sits in the dual-path split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Backbone,
    BaseExpert,
    SpecialistExpert,
    Router,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Backbone => "backbone",
            ParamKind::BaseExpert => "base_expert",
            ParamKind::SpecialistExpert => "specialist_expert",
            ParamKind::Router => "router",
        }
    }
}

pub struct ParamRef<'m> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'m Tensor,
}

pub struct ParamMut<'m> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'m mut Tensor,
}

/// Embedding, positional table, blocks and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub head: Tensor,
}

/// Tape handles mirroring a [`ToyBackbone`].
pub struct ModelVars {
    embed: Var,
    pos: Var,
    head: Var,
    blocks: Vec<Vec<ProjVars>>,
}

enum ProjVars {
    Plain(Var),
    Adapted(LayerVars),
}

impl ModelVars {
    /// Vars in the same order as [`ToyBackbone::params`].
    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos];
        for block in &self.blocks {
            for p in block {
                match p {
                    ProjVars::Plain(v) => out.push(*v),
                    ProjVars::Adapted(lv) => {
                        out.push(lv.w0);
                        for e in &lv.experts {
                            out.push(e.a);
                            out.push(e.b);
                        }
                        if let Some(r) = lv.router {
                            out.push(r.w_g);
                            out.push(r.tau_param);
                        }
                    }
                }
            }
        }
        out.push(self.head);
        out
    }
}

/// Gate matrix of one adapted layer, restricted to real tokens.
pub struct LayerGates {
    pub layer: usize,
    pub gates: Var,
}

pub struct ForwardOut {
    /// `[scored rows x vocab]`, or every row with `all_rows`.
    pub logits: Var,
    pub gates: Vec<LayerGates>,
}

impl ToyBackbone {
    /// Random frozen backbone, deterministic in `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gauss = |shape: &[usize], std: f64, label: &str, idx: &[u64]| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label, idx));
            let normal = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        };
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|l| Block {
                projections: AdapterTarget::ALL
                    .iter()
                    .map(|t| {
                        let (o, i) = t.dims(&config);
                        Projection::Plain(gauss(&[o, i], 1.0 / (i as f64).sqrt(), t.name(), &[l as u64]))
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            embed: gauss(&[config.vocab_size, d], 1.0, "embed", &[]),
            pos: gauss(&[config.max_seq_len, d], 1.0, "pos", &[]),
            head: gauss(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), "head", &[]),
            blocks,
            config,
        })
    }

    /// Wraps `adapter.target` of every block in a freshly initialized mixture layer.
    pub fn attach_adapters(&mut self, adapter: &AdapterConfig, seed: u64) -> Result<AllocationPlan> {
        adapter.validate(&self.config)?;
        self.detach_adapters();
        let plan = build_plan(&adapter.allocation)?;
        let (d, k) = adapter.target.dims(&self.config);
        for (l, (block, slots)) in self.blocks.iter_mut().zip(&plan.per_layer).enumerate() {
            let layer = l + 1;
            let experts = slots
                .iter()
                .enumerate()
                .map(|(i, ExpertSlot { role, rank })| {
                    let mut e = lora_init(d, k, *rank, *role, derive_seed(seed, "expert", &[layer as u64, i as u64]))?;
                    if *role == ExpertRole::Base {
                        e.set_trainable(adapter.base_grad_scale > 0.0);
                    }
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            let router = adapter
                .routed
                .then(|| Router::new(slots.len(), k, adapter.router_init_std, derive_seed(seed, "router", &[layer as u64])));
            let slot = &mut block.projections[adapter.target.index()];
            let w0 = std::mem::replace(slot, Projection::Plain(Tensor::zeros(&[0]))).weight().clone();
            *slot = Projection::Adapted(MoeLoraLayer::new(w0, experts, router, layer)?);
        }
        Ok(plan)
    }

    /// Restores plain projections, dropping all experts and routers.
    pub fn detach_adapters(&mut self) {
        for block in &mut self.blocks {
            for p in &mut block.projections {
                if let Projection::Adapted(l) = p {
                    *p = Projection::Plain(l.w0.clone());
                }
            }
        }
    }

    pub fn adapted_layers(&self) -> impl Iterator<Item = &MoeLoraLayer> {
        self.blocks.iter().flat_map(|b| b.projections.iter().filter_map(Projection::adapter))
    }

    pub fn adapted_layers_mut(&mut self) -> impl Iterator<Item = &mut MoeLoraLayer> {
        self.blocks.iter_mut().flat_map(|b| {
            b.projections.iter_mut().filter_map(|p| match p {
                Projection::Adapted(l) => Some(l),
                Projection::Plain(_) => None,
            })
        })
    }

    /// Makes every backbone tensor (not experts or routers) trainable or frozen.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            if p.kind == ParamKind::Backbone {
                p.tensor.set_requires_grad(trainable);
            }
        }
        // frozen weights under an adapter stay frozen
        for l in self.adapted_layers_mut() {
            l.w0.set_requires_grad(false);
        }
    }

    /// All tensors with stable names, in a fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef { name: "embed".into(), kind: ParamKind::Backbone, tensor: &self.embed },
            ParamRef { name: "pos".into(), kind: ParamKind::Backbone, tensor: &self.pos },
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (t, p) in AdapterTarget::ALL.iter().zip(&block.projections) {
                let prefix = format!("layer{}.{}", l + 1, t.name());
                match p {
                    Projection::Plain(w) => out.push(ParamRef { name: format!("{prefix}.w"), kind: ParamKind::Backbone, tensor: w }),
                    Projection::Adapted(layer) => {
                        out.push(ParamRef { name: format!("{prefix}.w"), kind: ParamKind::Backbone, tensor: &layer.w0 });
                        for (i, e) in layer.experts.iter().enumerate() {
                            let kind = expert_kind(e.role);
                            out.push(ParamRef { name: format!("layer{}.expert{i}.A", l + 1), kind, tensor: &e.a });
                            out.push(ParamRef { name: format!("layer{}.expert{i}.B", l + 1), kind, tensor: &e.b });
                        }
                        if let Some(r) = &layer.router {
                            out.push(ParamRef { name: format!("layer{}.router.w_g", l + 1), kind: ParamKind::Router, tensor: &r.w_g });
                            out.push(ParamRef { name: format!("layer{}.router.tau", l + 1), kind: ParamKind::Router, tensor: &r.tau_param });
                        }
                    }
                }
            }
        }
        out.push(ParamRef { name: "head".into(), kind: ParamKind::Backbone, tensor: &self.head });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = vec![
            ParamMut { name: "embed".into(), kind: ParamKind::Backbone, tensor: &mut self.embed },
            ParamMut { name: "pos".into(), kind: ParamKind::Backbone, tensor: &mut self.pos },
        ];
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for (t, p) in AdapterTarget::ALL.iter().zip(block.projections.iter_mut()) {
                let prefix = format!("layer{}.{}", l + 1, t.name());
                match p {
                    Projection::Plain(w) => out.push(ParamMut { name: format!("{prefix}.w"), kind: ParamKind::Backbone, tensor: w }),
                    Projection::Adapted(layer) => {
                        out.push(ParamMut { name: format!("{prefix}.w"), kind: ParamKind::Backbone, tensor: &mut layer.w0 });
                        for (i, e) in layer.experts.iter_mut().enumerate() {
                            let kind = expert_kind(e.role);
                            out.push(ParamMut { name: format!("layer{}.expert{i}.A", l + 1), kind, tensor: &mut e.a });
                            out.push(ParamMut { name: format!("layer{}.expert{i}.B", l + 1), kind, tensor: &mut e.b });
                        }
                        if let Some(r) = &mut layer.router {
                            out.push(ParamMut { name: format!("layer{}.router.w_g", l + 1), kind: ParamKind::Router, tensor: &mut r.w_g });
                            out.push(ParamMut { name: format!("layer{}.router.tau", l + 1), kind: ParamKind::Router, tensor: &mut r.tau_param });
                        }
                    }
                }
            }
        }
        out.push(ParamMut { name: "head".into(), kind: ParamKind::Backbone, tensor: &mut self.head });
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Accumulates a reverse sweep into the parameter gradient buffers.
    /// Base-expert gradients are multiplied by `base_grad_scale`.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &ModelVars, base_grad_scale: f64) -> Result<()> {
        let ordered = vars.ordered();
        let params = self.params_mut();
        debug_assert_eq!(ordered.len(), params.len());
        for (v, p) in ordered.into_iter().zip(params) {
            if let Some(g) = grads.get(v) {
                if p.kind == ParamKind::BaseExpert && base_grad_scale != 1.0 {
                    let scaled: Vec<f64> = g.iter().map(|x| x * base_grad_scale).collect();
                    p.tensor.accumulate_grad(&scaled)?;
                } else {
                    p.tensor.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        let embed = tape.leaf(&self.embed);
        let pos = tape.leaf(&self.pos);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                b.projections
                    .iter()
                    .map(|p| match p {
                        Projection::Plain(w) => ProjVars::Plain(tape.leaf(w)),
                        Projection::Adapted(l) => ProjVars::Adapted(l.bind(tape)),
                    })
                    .collect()
            })
            .collect();
        let head = tape.leaf(&self.head);
        ModelVars { embed, pos, head, blocks }
    }

    /// Records a forward pass. Logits cover the scored rows of `batch`, or
    /// every row when `all_rows` is set.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &TokenBatch,
        gating: &Gating,
        all_rows: bool,
    ) -> Result<(ForwardOut, ModelVars)> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(Error::Domain(format!("sequence length {} exceeds max_seq_len {}", batch.seq, cfg.max_seq_len)));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index { what: "token", index: t, limit: cfg.vocab_size });
        }
        let vars = self.bind(tape);
        let tok = tape.gather_rows(vars.embed, &batch.tokens)?;
        let pos = tape.gather_rows(vars.pos, &batch.positions())?;
        let mut x = tape.add(tok, pos)?;
        let all_valid = batch.valid_rows.len() == batch.rows();
        let mut gates = Vec::new();

        for (l, (block, bvars)) in self.blocks.iter().zip(&vars.blocks).enumerate() {
            let mut proj = |tape: &mut Tape<'a>, t: AdapterTarget, input: Var| -> Result<Var> {
                match (&block.projections[t.index()], &bvars[t.index()]) {
                    (Projection::Plain(_), ProjVars::Plain(w)) => Ok(tape.matmul_nt(input, *w)?),
                    (Projection::Adapted(layer), ProjVars::Adapted(lv)) => {
                        let out = layer.forward_rows(tape, lv, input, gating)?;
                        if let Some(g) = out.gates {
                            let g = if all_valid { g } else { tape.gather_rows(g, &batch.valid_rows)? };
                            gates.push(LayerGates { layer: l + 1, gates: g });
                        }
                        Ok(out.out)
                    }
                    _ => unreachable!("vars mirror the model"),
                }
            };
            let a = tape.rms_norm_rows(x, NORM_EPS)?;
            let q = proj(tape, AdapterTarget::AttnQ, a)?;
            let k = proj(tape, AdapterTarget::AttnK, a)?;
            let v = proj(tape, AdapterTarget::AttnV, a)?;
            let att = tape.causal_attention(q, k, v, batch.batch, batch.seq, cfg.n_heads)?;
            let o = proj(tape, AdapterTarget::AttnO, att)?;
            x = tape.add(x, o)?;
            let f = tape.rms_norm_rows(x, NORM_EPS)?;
            let u = proj(tape, AdapterTarget::FfUp, f)?;
            let u = tape.gelu(u);
            let dn = proj(tape, AdapterTarget::FfDown, u)?;
            x = tape.add(x, dn)?;
        }
        let xf = tape.rms_norm_rows(x, NORM_EPS)?;
        let sel = if all_rows { xf } else { tape.gather_rows(xf, &batch.target_rows)? };
        let logits = tape.matmul_nt(sel, vars.head)?;
        Ok((ForwardOut { logits, gates }, vars))
    }

    /// Logits for every row of the batch, without recording gradients for later use.
    pub fn logits_all(&self, batch: &TokenBatch, gating: &Gating) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, batch, gating, true)?;
        Ok(tape.to_tensor(out.logits))
    }
}

fn expert_kind(role: ExpertRole) -> ParamKind {
    match role {
        ExpertRole::Base => ParamKind::BaseExpert,
        ExpertRole::Specialist => ParamKind::SpecialistExpert,
    }
}

/// Load-balance loss of every routed layer in a forward pass.
pub fn aux_losses(tape: &mut Tape<'_>, out: &ForwardOut) -> Result<Vec<Var>> {
    out.gates.iter().map(|g| load_balance_loss_tape(tape, g.gates)).collect()
}

/// Per-token gate records of a recorded forward pass.
pub fn gate_records(tape: &Tape<'_>, out: &ForwardOut) -> Vec<GateRecord> {
    let mut recs = Vec::new();
    for lg in &out.gates {
        let n = tape.shape(lg.gates)[1];
        for (position, row) in tape.value(lg.gates).chunks_exact(n).enumerate() {
            recs.push(GateRecord { probs: row.to_vec(), layer: lg.layer, position });
        }
    }
    recs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::RankPolicy;
    use crate::model::batch::Sample;

    pub(crate) fn tiny_backbone() -> BackboneConfig {
        BackboneConfig { vocab_size: 11, d_model: 8, n_heads: 2, d_ff: 12, n_layers: 2, max_seq_len: 8 }
    }

    pub(crate) fn tiny_adapter() -> AdapterConfig {
        AdapterConfig {
            target: AdapterTarget::FfUp,
            allocation: AllocationConfig {
                n_min: 2,
                n_max: 3,
                gamma: 1.0,
                num_layers: 2,
                rank_set: vec![1, 2, 4],
                base_experts_per_layer: 1,
                rank_policy: RankPolicy::RoleBased { base_rank: 2, specialist_ranks: vec![1, 2] },
                profile: crate::allocation::Profile::PowerLaw,
            },
            routed: true,
            router_init_std: 0.3,
            base_grad_scale: 0.0,
        }
    }

    fn batch() -> TokenBatch {
        let a = Sample::new(vec![1, 2, 3, 4, 5], 3);
        let b = Sample::new(vec![6, 7, 8], 1);
        TokenBatch::new(&[&a, &b], 0).unwrap()
    }

    #[test]
    fn zero_init_matches_frozen_backbone() {
        let mut m = ToyBackbone::new(tiny_backbone(), 3).unwrap();
        let frozen = m.logits_all(&batch(), &Gating::Off).unwrap();
        m.attach_adapters(&tiny_adapter(), 4).unwrap();
        for g in [Gating::Soft, Gating::TopK(1), Gating::BaseOnly] {
            let adapted = m.logits_all(&batch(), &g).unwrap();
            assert!(adapted.max_abs_diff(&frozen) <= 1e-12);
        }
    }

    #[test]
    fn names_follow_checkpoint_convention() {
        let mut m = ToyBackbone::new(tiny_backbone(), 3).unwrap();
        let plan = m.attach_adapters(&tiny_adapter(), 4).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|p| p.name).collect();
        assert!(names.contains(&"layer1.expert0.A".to_string()));
        assert!(names.contains(&"layer2.expert2.B".to_string()));
        assert!(names.contains(&"layer2.router.tau".to_string()));
        let expected = 3 + 2 * 6 + 2 * plan.total_experts() + 2 * 2;
        assert_eq!(names.len(), expected);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn attach_is_idempotent_and_detach_restores() {
        let mut m = ToyBackbone::new(tiny_backbone(), 3).unwrap();
        let plain = m.clone();
        m.attach_adapters(&tiny_adapter(), 4).unwrap();
        let once = m.clone();
        m.attach_adapters(&tiny_adapter(), 4).unwrap();
        assert_eq!(m, once);
        m.detach_adapters();
        assert_eq!(m, plain);
    }

    #[test]
    fn gradients_reach_only_trainable_tensors() {
        let mut m = ToyBackbone::new(tiny_backbone(), 3).unwrap();
        m.attach_adapters(&tiny_adapter(), 4).unwrap();
        for l in m.adapted_layers_mut() {
            for e in &mut l.experts {
                e.b.data_mut().iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let b = batch();
        let mut tape = Tape::new();
        let (out, vars) = m.forward(&mut tape, &b, &Gating::Soft, false).unwrap();
        let loss = tape.cross_entropy(out.logits, &b.targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut m2 = m.clone();
        m2.accumulate_grads(&grads, &vars, 0.0).unwrap();
        for p in m2.params() {
            let expect = matches!(p.kind, ParamKind::SpecialistExpert | ParamKind::Router);
            assert_eq!(p.tensor.grad().is_some(), expect, "{}", p.name);
        }
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let m = ToyBackbone::new(tiny_backbone(), 3).unwrap();
        let s = Sample::new(vec![1, 99, 2], 1);
        let b = TokenBatch::new(&[&s], 0).unwrap();
        assert!(m.logits_all(&b, &Gating::Off).is_err());
    }

    #[test]
    fn unrouted_layers_need_single_expert() {
        let mut cfg = tiny_adapter();
        cfg.routed = false;
        assert!(cfg.validate(&tiny_backbone()).is_err());
        cfg.allocation = AllocationConfig {
            n_min: 1,
            n_max: 1,
            base_experts_per_layer: 0,
            rank_policy: RankPolicy::Uniform { rank: 4 },
            ..cfg.allocation
        };
        let mut m = ToyBackbone::new(tiny_backbone(), 3).unwrap();
        m.attach_adapters(&cfg, 1).unwrap();
        assert!(m.adapted_layers().all(|l| l.router.is_none()));
    }
}
