#![allow(dead_code)]

use moelora::allocation::{AllocationConfig, Profile, RankPolicy};
use moelora::harness::total_loss_tape;
use moelora::model::{aux_losses, AdapterConfig, BackboneConfig, Gating, ParamKind, Sample, TokenBatch, ToyBackbone};
use moelora::tensor::{finite_diff_grad, relative_error, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { vocab_size: 24, d_model: 8, n_heads: 2, d_ff: 16, n_layers: 2, max_seq_len: 8 }
}

pub fn tiny_adapter() -> AdapterConfig {
    AdapterConfig {
        allocation: AllocationConfig {
            n_min: 2,
            n_max: 4,
            gamma: 1.0,
            num_layers: 2,
            rank_set: vec![2, 4],
            base_experts_per_layer: 1,
            rank_policy: RankPolicy::RoleBased { base_rank: 2, specialist_ranks: vec![2, 4] },
            profile: Profile::PowerLaw,
        },
        ..AdapterConfig::default()
    }
}

/// Tiny model whose adapters have random nonzero deltas and temperatures away from 1.
pub fn perturbed_model(seed: u64) -> ToyBackbone {
    perturbed_model_with(&tiny_adapter(), seed)
}

pub fn perturbed_model_with(adapter: &AdapterConfig, seed: u64) -> ToyBackbone {
    let mut m = ToyBackbone::new(tiny_backbone(), seed).unwrap();
    m.attach_adapters(adapter, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for (i, l) in m.adapted_layers_mut().enumerate() {
        for e in &mut l.experts {
            e.b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        if let Some(r) = l.router.as_mut() {
            r.set_tau(0.6 + 0.5 * i as f64);
            r.w_g.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
    }
    m
}

pub fn random_samples(n: usize, seq: usize, vocab: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Sample::new((0..seq).map(|_| rng.random_range(0..vocab)).collect(), seq / 2))
        .collect()
}

pub fn batch_of(samples: &[Sample]) -> TokenBatch {
    let refs: Vec<&Sample> = samples.iter().collect();
    TokenBatch::new(&refs, 0).unwrap()
}

pub fn total_loss(model: &ToyBackbone, batch: &TokenBatch, gating: &Gating, lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, batch, gating, false).unwrap();
    let ce = tape.cross_entropy(out.logits, &batch.targets).unwrap();
    let aux = aux_losses(&mut tape, &out).unwrap();
    let loss = total_loss_tape(&mut tape, ce, &aux, lambda).unwrap();
    tape.scalar_value(loss)
}

/// Analytic gradient of every trainable tensor: `(name, kind, grad)`.
pub fn analytic_grads(model: &mut ToyBackbone, batch: &TokenBatch, gating: &Gating, lambda: f64) -> Vec<(String, ParamKind, Vec<f64>)> {
    model.zero_grad();
    let (grads, vars) = {
        let mut tape = Tape::new();
        let (out, vars) = model.forward(&mut tape, batch, gating, false).unwrap();
        let ce = tape.cross_entropy(out.logits, &batch.targets).unwrap();
        let aux = aux_losses(&mut tape, &out).unwrap();
        let loss = total_loss_tape(&mut tape, ce, &aux, lambda).unwrap();
        (tape.backward(loss).unwrap(), vars)
    };
    model.accumulate_grads(&grads, &vars, 1.0).unwrap();
    let out = model
        .params()
        .into_iter()
        .filter(|p| p.tensor.requires_grad())
        .map(|p| (p.name, p.kind, p.tensor.grad().expect("trainable tensor has a gradient").to_vec()))
        .collect();
    model.clear_grads();
    out
}

/// Worst per-element relative error between the analytic gradient and central
/// differences over every trainable tensor, with an absolute floor.
pub fn gradcheck(model: &mut ToyBackbone, batch: &TokenBatch, gating: &Gating, lambda: f64, h: f64, floor: f64) -> (f64, usize) {
    let analytic = analytic_grads(model, batch, gating, lambda);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, _, g) in &analytic {
        let x = model.params().into_iter().find(|p| &p.name == name).unwrap().tensor.clone();
        let fd = finite_diff_grad(
            |t| {
                let mut probe = model.clone();
                let slot = probe.params_mut().into_iter().find(|p| &p.name == name).unwrap();
                slot.tensor.data_mut().copy_from_slice(t.data());
                total_loss(&probe, batch, gating, lambda)
            },
            &x,
            h,
        );
        for (a, b) in g.iter().zip(fd.data()) {
            worst = worst.max(relative_error(*a, *b, floor));
        }
        checked += g.len();
    }
    (worst, checked)
}

/// A fast end-to-end experiment: 2-layer backbone, two specialist tasks.
pub fn small_experiment() -> moelora::config::ExperimentConfig {
    use moelora::harness::{AblationStrategy, TaskKind, TaskSpec};
    let mut cfg = moelora::config::ExperimentConfig::default();
    cfg.backbone = BackboneConfig { vocab_size: 64, d_model: 16, n_heads: 2, d_ff: 32, n_layers: 2, max_seq_len: 12 };
    cfg.adapter.allocation = AllocationConfig {
        n_min: 2,
        n_max: 4,
        gamma: 2.0,
        num_layers: 2,
        rank_set: vec![2, 4],
        base_experts_per_layer: 1,
        rank_policy: RankPolicy::RoleBased { base_rank: 4, specialist_ranks: vec![2, 4] },
        profile: Profile::PowerLaw,
    };
    cfg.pretrain.steps = 80;
    cfg.train.total_steps = 60;
    cfg.train.eval_interval = 20;
    cfg.train.learning_rate = 5e-3;
    let small = |id: &str, kind, lo, hi| TaskSpec { train_samples: 300, eval_samples: 50, ..TaskSpec::new(id, kind, [lo, hi], 4) };
    cfg.tasks.general = small("general", TaskKind::SequenceCopy, 16, 40);
    cfg.tasks.specialists = vec![
        small("reverse", TaskKind::SequenceReverse, 24, 48),
        small("copy", TaskKind::SequenceCopy, 40, 64),
    ];
    cfg.ablation.rank = 4;
    cfg.ablation.strategies = vec![
        AblationStrategy::new("uniform", &[4, 4]),
        AblationStrategy::new("bottom_heavy", &[6, 2]),
        AblationStrategy::new("top_heavy", &[2, 6]),
    ];
    cfg.validate().unwrap();
    cfg
}
