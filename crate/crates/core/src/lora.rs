//! Low-rank adapter experts.
//!
//! An expert holds a down-projection `A [r x k]` and an up-projection
//! `B [d x r]` and contributes `(alpha / r) * B * A * x` on top of a frozen
//! weight. `B` starts at zero, so a fresh expert is an exact no-op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertRole {
    /// Anchor pathway, reserved for preserving the backbone's behaviour.
    Base,
    /// Adaptation pathway.
    Specialist,
}

impl ExpertRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertRole::Base => "base",
            ExpertRole::Specialist => "specialist",
        }
    }
}

impl std::str::FromStr for ExpertRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ExpertRole::Base),
            "specialist" | "spec" => Ok(ExpertRole::Specialist),
            other => Err(Error::Domain(format!("unknown expert role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub role: ExpertRole,
    trainable: bool,
}

/// Zero-delta initialization: `A ~ N(0, 1/rank)` (std `1/sqrt(rank)`) from `seed`, `B = 0`,
/// `alpha = 2 * rank`. Base experts start frozen, specialists trainable.
pub fn lora_init(d: usize, k: usize, rank: usize, role: ExpertRole, seed: u64) -> Result<LoraExpert> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::config(
            "rank",
            format!("rank {rank} must be in 1..={} for a {d}x{k} weight", d.min(k)),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("valid std");
    let a = Tensor::from_fn(&[rank, k], |_| normal.sample(&mut rng));
    let b = Tensor::zeros(&[d, rank]);
    let mut expert = LoraExpert {
        a,
        b,
        rank,
        alpha: 2.0 * rank as f64,
        role,
        trainable: false,
    };
    expert.set_trainable(role == ExpertRole::Specialist);
    Ok(expert)
}

impl LoraExpert {
    /// Builds an expert from explicit factors.
    pub fn from_parts(a: Tensor, b: Tensor, alpha: f64, role: ExpertRole, trainable: bool) -> Result<Self> {
        let (r, k) = match a.shape() {
            [r, k] => (*r, *k),
            s => return Err(Error::Domain(format!("A must be a matrix, got {s:?}"))),
        };
        let d = match b.shape() {
            [d, r2] if *r2 == r => *d,
            s => {
                return Err(TensorError::Shape { op: "LoraExpert", left: vec![r, k], right: s.to_vec() }.into());
            }
        };
        if r == 0 || r > d.min(k) {
            return Err(Error::config("rank", format!("rank {r} must be in 1..={}", d.min(k))));
        }
        if !(alpha > 0.0) {
            return Err(Error::config("alpha", "alpha must be positive"));
        }
        let mut e = LoraExpert { a, b, rank: r, alpha, role, trainable };
        e.set_trainable(trainable);
        Ok(e)
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        self.a.set_requires_grad(trainable);
        self.b.set_requires_grad(trainable);
    }

    /// Trainable element count, `r (d + k)`, or zero when frozen.
    pub fn trainable_params(&self) -> usize {
        if self.trainable {
            self.numel()
        } else {
            0
        }
    }

    pub fn numel(&self) -> usize {
        self.rank * (self.out_dim() + self.in_dim())
    }

    /// True when the delta is identically zero (B has no nonzero entry).
    pub fn is_zero(&self) -> bool {
        self.b.data().iter().all(|&v| v == 0.0)
    }

    /// Records `A` and `B` as tape leaves.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ExpertVars {
        ExpertVars {
            a: tape.leaf(&self.a),
            b: tape.leaf(&self.b),
        }
    }

    /// Applies bound factors to the rows of `x [T x k]`, giving `[T x d]`.
    pub fn apply(&self, tape: &mut Tape<'_>, vars: ExpertVars, x: Var) -> Result<Var> {
        let xa = tape.matmul_nt(x, vars.a)?;
        let out = tape.matmul_nt(xa, vars.b)?;
        Ok(tape.scale(out, self.scaling()))
    }

    pub fn forward_rows<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<(Var, ExpertVars)> {
        let vars = self.bind(tape);
        Ok((self.apply(tape, vars, x)?, vars))
    }
}

/// Tape handles of an expert's factors.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub a: Var,
    pub b: Var,
}

/// `(alpha / r) * B * (A * x)` for a single input vector.
pub fn lora_forward(expert: &LoraExpert, x: &Tensor) -> Result<Tensor> {
    if x.numel() != expert.in_dim() {
        return Err(TensorError::Shape {
            op: "lora_forward",
            left: expert.a.shape().to_vec(),
            right: x.shape().to_vec(),
        }
        .into());
    }
    let col = Tensor::new(vec![x.numel()], x.data().to_vec())?;
    let ax = tensor::matmul(&expert.a, &col)?;
    let bax = tensor::matmul(&expert.b, &ax)?;
    let s = expert.scaling();
    Ok(Tensor::vector(bax.into_data().into_iter().map(|v| v * s).collect()))
}

/// Dense `(alpha / r) * B * A`, for audits and tests.
pub fn lora_delta_w(expert: &LoraExpert) -> Tensor {
    let ba = tensor::matmul(&expert.b, &expert.a).expect("factor shapes agree by construction");
    let s = expert.scaling();
    let shape = ba.shape().to_vec();
    Tensor::new(shape, ba.into_data().into_iter().map(|v| v * s).collect()).unwrap()
}
