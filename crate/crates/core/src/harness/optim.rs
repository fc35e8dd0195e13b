use crate::error::{Error, Result};
use crate::model::ParamMut;
use crate::tensor::{Tape, Var};

/// Linear warm-up from 0 to the peak, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps);
        Self { peak, warmup_steps, total_steps }
    }

    pub fn at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Domain(format!("step {step} beyond total_steps {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.peak * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.peak);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// `task + lambda * mean(aux)`; an empty `aux` contributes nothing.
pub fn total_loss(task_loss: f64, aux_losses: &[f64], lambda_bal: f64) -> f64 {
    if aux_losses.is_empty() || lambda_bal == 0.0 {
        return task_loss;
    }
    task_loss + lambda_bal * aux_losses.iter().sum::<f64>() / aux_losses.len() as f64
}

/// Differentiable [`total_loss`].
pub fn total_loss_tape(tape: &mut Tape<'_>, task_loss: Var, aux_losses: &[Var], lambda_bal: f64) -> Result<Var> {
    if aux_losses.is_empty() || lambda_bal == 0.0 {
        return Ok(task_loss);
    }
    let mut sum = aux_losses[0];
    for &a in &aux_losses[1..] {
        sum = tape.add(sum, a)?;
    }
    let scaled = tape.scale(sum, lambda_bal / aux_losses.len() as f64);
    Ok(tape.add(task_loss, scaled)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::Domain(format!(
            "adamw: {} params, {} grads, {} state slots",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.t as usize + 1,
            msg: format!("non-finite gradient {g} at element {i}"),
        });
    }
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + eps);
        *p -= lr * (update + weight_decay * *p);
    }
    Ok(())
}

/// AdamW over a model's parameter list. Frozen tensors and tensors without a
/// gradient are left untouched; weight decay applies to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    states: Vec<Option<AdamState>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { betas: (0.9, 0.999), eps: 1e-8, weight_decay, states: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<ParamMut<'_>>, lr: f64, step: usize) -> Result<()> {
        if self.states.len() < params.len() {
            self.states.resize(params.len(), None);
        }
        for (slot, p) in self.states.iter_mut().zip(params) {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            let wd = if p.tensor.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let state = slot.get_or_insert_with(|| AdamState::new(grad.len()));
            adamw_step(p.tensor.data_mut(), &grad, state, lr, self.betas, self.eps, wd).map_err(|e| match e {
                Error::Divergence { msg, .. } => Error::Divergence { step, msg: format!("{}: {msg}", p.name) },
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`
/// (0 disables). Returns the norm before clipping.
pub fn clip_grad_norm(params: Vec<ParamMut<'_>>, max_norm: f64) -> f64 {
    let mut tensors: Vec<_> = params.into_iter().filter(|p| p.tensor.grad().is_some()).collect();
    let norm = tensors
        .iter()
        .flat_map(|p| p.tensor.grad().unwrap().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for p in &mut tensors {
            let g: Vec<f64> = p.tensor.grad().unwrap().iter().map(|g| g * (scale - 1.0)).collect();
            p.tensor.accumulate_grad(&g).expect("same length");
        }
    }
    norm
}
