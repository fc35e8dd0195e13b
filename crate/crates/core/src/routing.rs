//! Gating for one mixture-of-LoRA layer.
//!
//! Logits are `s = W_g x`. Soft merging weights every expert by
//! `softmax(s / tau)` where `tau = softplus(theta) + tau_min` is learned.
//! Top-K routing keeps the `k` largest logits (ties go to the lower index)
//! and renormalizes over them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{self, softplus, Tape, Tensor, TensorError, Var};

pub const DEFAULT_TAU_MIN: f64 = 0.05;
pub const DEFAULT_TAU_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutingMode {
    #[default]
    Soft,
    TopK(usize),
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingMode::Soft => write!(f, "soft"),
            RoutingMode::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "soft" {
            return Ok(RoutingMode::Soft);
        }
        if let Some(k) = s.strip_prefix("topk:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::config("mode", format!("bad top-k count in {s:?}")))?;
            if k == 0 {
                return Err(Error::config("mode", "top-k count must be at least 1"));
            }
            return Ok(RoutingMode::TopK(k));
        }
        Err(Error::config("mode", format!("expected `soft` or `topk:<k>`, got {s:?}")))
    }
}

impl Serialize for RoutingMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RoutingMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inverse of `softplus(theta) + tau_min`.
pub fn tau_param_for(tau: f64, tau_min: f64) -> f64 {
    let y = tau - tau_min;
    assert!(y > 0.0, "tau must exceed tau_min");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// Gating projection `[N x k]`.
    pub w_g: Tensor,
    /// Unconstrained temperature parameter, one element.
    pub tau_param: Tensor,
    pub tau_min: f64,
}

/// Tape handles of a router's parameters.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub w_g: Var,
    pub tau_param: Var,
}

impl Router {
    /// `W_g ~ N(0, init_std^2)` from `seed`, `tau` starting at [`DEFAULT_TAU_INIT`].
    pub fn new(num_experts: usize, in_dim: usize, init_std: f64, seed: u64) -> Self {
        let w_g = if init_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, init_std).expect("valid std");
            Tensor::from_fn(&[num_experts, in_dim], |_| normal.sample(&mut rng))
        } else {
            Tensor::zeros(&[num_experts, in_dim])
        };
        Self {
            w_g: w_g.with_requires_grad(true),
            tau_param: Tensor::scalar(tau_param_for(DEFAULT_TAU_INIT, DEFAULT_TAU_MIN)).with_requires_grad(true),
            tau_min: DEFAULT_TAU_MIN,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w_g.cols()
    }

    /// Effective temperature, always `>= tau_min`.
    pub fn tau(&self) -> f64 {
        softplus(self.tau_param.data()[0]) + self.tau_min
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau_param.data_mut()[0] = tau_param_for(tau, self.tau_min);
    }

    /// `N k + 1`: the projection plus the temperature.
    pub fn num_params(&self) -> usize {
        self.w_g.numel() + 1
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> RouterVars {
        RouterVars {
            w_g: tape.leaf(&self.w_g),
            tau_param: tape.leaf(&self.tau_param),
        }
    }

    /// Gate weights `[T x N]` for the rows of `x [T x k]`.
    pub fn gates(&self, tape: &mut Tape<'_>, vars: RouterVars, x: Var, mode: RoutingMode) -> Result<Var> {
        let n = self.num_experts();
        let logits = tape.matmul_nt(x, vars.w_g)?;
        let sp = tape.softplus(vars.tau_param);
        let tau = tape.add_scalar(sp, self.tau_min);
        let scaled = tape.div_by_scalar(logits, tau)?;
        match mode {
            RoutingMode::Soft => Ok(tape.softmax_rows(scaled)?),
            RoutingMode::TopK(k) => {
                if k > n {
                    return Err(Error::config("mode", format!("top-k {k} exceeds {n} experts")));
                }
                if k == n {
                    return Ok(tape.softmax_rows(scaled)?);
                }
                let mask: Vec<bool> = tape.value(scaled).chunks_exact(n).flat_map(|row| topk_mask(row, k)).collect();
                Ok(tape.masked_softmax_rows(scaled, Some(&mask))?)
            }
        }
    }
}

/// `s = W_g x` for a single input.
pub fn gate_logits(router: &Router, x: &Tensor) -> Result<Tensor> {
    if x.numel() != router.in_dim() {
        return Err(TensorError::Shape {
            op: "gate_logits",
            left: router.w_g.shape().to_vec(),
            right: x.shape().to_vec(),
        }
        .into());
    }
    let col = Tensor::vector(x.data().to_vec());
    Ok(tensor::matmul(&router.w_g, &col)?)
}

/// `softmax(s / tau)` with the router's current temperature.
pub fn soft_merge_weights(s: &Tensor, router: &Router) -> Result<Tensor> {
    Ok(tensor::softmax(s, router.tau())?)
}

/// Indices of the `k` largest entries; equal values prefer the lower index.
pub fn topk_mask(s: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut mask = vec![false; s.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Softmax over the `k` largest logits (temperature 1); all other weights are exactly zero.
pub fn topk_weights(s: &Tensor, k: usize) -> Result<Tensor> {
    let n = s.numel();
    if k < 1 || k > n {
        return Err(Error::config("mode", format!("top-k {k} must be in 1..={n}")));
    }
    let mut tape = Tape::new();
    let sv = tape.frozen(s);
    let out = if k == n {
        tape.softmax_rows(sv)?
    } else {
        let mask = topk_mask(s.data(), k);
        tape.masked_softmax_rows(sv, Some(&mask))?
    };
    Ok(Tensor::vector(tape.value(out).to_vec()))
}

/// One token's gate distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub probs: Vec<f64>,
    pub layer: usize,
    pub position: usize,
}

fn mean_loads(gates: &[GateRecord]) -> Result<Vec<f64>> {
    let first = gates
        .first()
        .ok_or_else(|| Error::Domain("load balance over an empty batch".into()))?;
    let n = first.probs.len();
    let mut load = vec![0.0; n];
    for g in gates {
        if g.probs.len() != n {
            return Err(Error::Domain(format!(
                "gate records disagree on expert count ({} vs {n})",
                g.probs.len()
            )));
        }
        for (l, p) in load.iter_mut().zip(&g.probs) {
            *l += p;
        }
    }
    load.iter_mut().for_each(|l| *l /= gates.len() as f64);
    Ok(load)
}

/// `N * sum_i (mean_load_i - 1/N)^2` over one layer's batch of gate records.
pub fn load_balance_loss(gates: &[GateRecord]) -> Result<f64> {
    let load = mean_loads(gates)?;
    let n = load.len() as f64;
    Ok(n * load.iter().map(|l| (l - 1.0 / n).powi(2)).sum::<f64>())
}

/// Differentiable [`load_balance_loss`] over gate rows `[T x N]`.
pub fn load_balance_loss_tape(tape: &mut Tape<'_>, gates: Var) -> Result<Var> {
    let n = match tape.shape(gates) {
        [_, n] => *n,
        s => return Err(Error::Domain(format!("gate matrix expected, got shape {s:?}"))),
    };
    let load = tape.mean_rows(gates)?;
    let centered = tape.add_scalar(load, -1.0 / n as f64);
    let sq = tape.mul(centered, centered)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, n as f64))
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRouteStats {
    pub layer: usize,
    pub mean_load: Vec<f64>,
    /// Mean per-token entropy in nats.
    pub entropy: f64,
    pub tau: Option<f64>,
}

/// Per-layer mean loads and entropies, ordered by layer.
pub fn routing_stats(gates: &[GateRecord]) -> Vec<LayerRouteStats> {
    let mut by_layer: BTreeMap<usize, Vec<&GateRecord>> = BTreeMap::new();
    for g in gates {
        by_layer.entry(g.layer).or_default().push(g);
    }
    by_layer
        .into_iter()
        .map(|(layer, recs)| {
            let n = recs[0].probs.len();
            let mut load = vec![0.0; n];
            let mut ent = 0.0;
            for r in &recs {
                for (l, p) in load.iter_mut().zip(&r.probs) {
                    *l += p;
                }
                ent += entropy(&r.probs);
            }
            let count = recs.len() as f64;
            load.iter_mut().for_each(|l| *l /= count);
            LayerRouteStats { layer, mean_load: load, entropy: ent / count, tau: None }
        })
        .collect()
}

/// CSV `layer,expert,mean_load,entropy,tau`, one row per expert.
pub fn route_stats_csv(stats: &[LayerRouteStats]) -> String {
    let mut s = String::from("layer,expert,mean_load,entropy,tau\n");
    for st in stats {
        let tau = st.tau.map(|t| format!("{t:e}")).unwrap_or_default();
        for (i, l) in st.mean_load.iter().enumerate() {
            s.push_str(&format!("{},{},{:e},{:e},{}\n", st.layer, i, l, st.entropy, tau));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use proptest::prelude::*;

    fn record(probs: Vec<f64>) -> GateRecord {
        GateRecord { probs, layer: 1, position: 0 }
    }

    #[test]
    fn logits_examples() {
        let mut r = Router::new(3, 2, 0.0, 0);
        assert_eq!(gate_logits(&r, &Tensor::vector(vec![1.0, 2.0])).unwrap().data(), &[0.0; 3]);
        r.w_g = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(gate_logits(&r, &Tensor::vector(vec![1.0, 0.0])).unwrap().data(), &[1.0, 0.0, 0.0]);
        r.w_g = Tensor::matrix(&[&[0.3, -1.2], &[2.0, 0.5], &[-0.7, -0.1]]);
        let s = gate_logits(&r, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        let expect = [0.3 - 1.2, 2.0 + 0.5, -0.7 - 0.1];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(gate_logits(&r, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn tau_starts_at_one_and_stays_above_floor() {
        let mut r = Router::new(2, 2, 0.0, 0);
        assert!((r.tau() - 1.0).abs() < 1e-12);
        r.tau_param.data_mut()[0] = -1e6;
        assert!(r.tau() >= DEFAULT_TAU_MIN);
        r.set_tau(1000.0);
        assert!((r.tau() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn soft_merge_examples() {
        let mut r = Router::new(2, 2, 0.0, 0);
        let w = soft_merge_weights(&Tensor::vector(vec![0.4, 0.4]), &r).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        let w = soft_merge_weights(&Tensor::vector(vec![2f64.ln(), 0.0]), &r).unwrap();
        assert!((w.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        r.set_tau(1000.0);
        let w = soft_merge_weights(&Tensor::vector(vec![5.0, 0.0]), &r).unwrap();
        assert!((w.data()[0] - 0.50125).abs() < 1e-5);
    }

    #[test]
    fn topk_examples() {
        let s = Tensor::vector(vec![3.0, 1.0, 2.0]);
        assert_eq!(topk_weights(&s, 1).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(topk_weights(&s, 3).unwrap(), tensor::softmax(&s, 1.0).unwrap());
        let w = topk_weights(&Tensor::vector(vec![1.0, 1.0, 0.0]), 2).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5, 0.0]);
        let w = topk_weights(&Tensor::vector(vec![1.0, 1.0, 1.0]), 1).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 0.0]);
        assert!(topk_weights(&s, 0).is_err());
        assert!(topk_weights(&s, 4).is_err());
    }

    #[test]
    fn routing_mode_parsing() {
        assert_eq!("soft".parse::<RoutingMode>().unwrap(), RoutingMode::Soft);
        assert_eq!("topk:2".parse::<RoutingMode>().unwrap(), RoutingMode::TopK(2));
        assert!("topk:0".parse::<RoutingMode>().is_err());
        assert!("hard".parse::<RoutingMode>().is_err());
        assert_eq!(RoutingMode::TopK(3).to_string(), "topk:3");
    }

    #[test]
    fn load_balance_examples() {
        let uniform: Vec<_> = (0..5).map(|_| record(vec![0.25; 4])).collect();
        assert_eq!(load_balance_loss(&uniform).unwrap(), 0.0);
        let collapsed: Vec<_> = (0..7).map(|_| record(vec![1.0, 0.0])).collect();
        assert_eq!(load_balance_loss(&collapsed).unwrap(), 1.0);
        assert!(matches!(load_balance_loss(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn load_balance_tape_matches_eager() {
        let rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.5, 0.4, 0.1]];
        let eager = load_balance_loss(&rows.iter().cloned().map(record).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(vec![3, 3], rows.concat()).unwrap();
        let l = load_balance_loss_tape(&mut tape, g).unwrap();
        assert!((tape.scalar_value(l) - eager).abs() < 1e-15);
    }

    #[test]
    fn load_balance_step_reduces_loss() {
        // logits of 6 tokens over 3 experts, skewed toward expert 0
        let logits = Tensor::from_fn(&[6, 3], |i| if i % 3 == 0 { 2.0 } else { (i as f64 * 0.37).sin() });
        let loss_of = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.frozen(t);
            let p = tape.softmax_rows(v).unwrap();
            let l = load_balance_loss_tape(&mut tape, p).unwrap();
            tape.scalar_value(l)
        };
        let param = logits.clone().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&param);
        let p = tape.softmax_rows(v).unwrap();
        let l = load_balance_loss_tape(&mut tape, p).unwrap();
        let g = tape.backward(l).unwrap().get(v).unwrap().to_vec();
        let numeric = finite_diff_grad(loss_of, &logits, 1e-5);
        for (a, b) in g.iter().zip(numeric.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        let stepped = Tensor::new(vec![6, 3], logits.data().iter().zip(&g).map(|(x, d)| x - 0.5 * d).collect()).unwrap();
        assert!(loss_of(&stepped) < loss_of(&logits));
    }

    #[test]
    fn stats_examples() {
        let uniform: Vec<_> = (0..3).map(|_| record(vec![0.25; 4])).collect();
        let st = routing_stats(&uniform);
        assert!((st[0].entropy - 4f64.ln()).abs() < 1e-12);
        let onehot: Vec<_> = (0..3).map(|_| record(vec![0.0, 1.0, 0.0])).collect();
        assert_eq!(routing_stats(&onehot)[0].entropy, 0.0);
        let csv = route_stats_csv(&st);
        assert!(csv.starts_with("layer,expert,mean_load,entropy,tau\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn soft_weights_normalized_and_shift_invariant(
            s in proptest::collection::vec(-20.0f64..20.0, 1..9), shift in -50.0f64..50.0, tau in 0.06f64..50.0
        ) {
            let mut r = Router::new(s.len(), 1, 0.0, 0);
            r.set_tau(tau);
            let w = soft_merge_weights(&Tensor::vector(s.clone()), &r).unwrap();
            prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.data().iter().all(|&v| v >= 0.0));
            let shifted = Tensor::vector(s.iter().map(|v| v + shift).collect());
            let w2 = soft_merge_weights(&shifted, &r).unwrap();
            for (a, b) in w.data().iter().zip(w2.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn higher_temperature_never_sharpens(s in proptest::collection::vec(-5.0f64..5.0, 2..8), t1 in 0.06f64..10.0, dt in 0.0f64..10.0) {
            let mut r = Router::new(s.len(), 1, 0.0, 0);
            let v = Tensor::vector(s);
            r.set_tau(t1);
            let m1 = soft_merge_weights(&v, &r).unwrap().data().iter().copied().fold(0.0, f64::max);
            r.set_tau(t1 + dt);
            let m2 = soft_merge_weights(&v, &r).unwrap().data().iter().copied().fold(0.0, f64::max);
            prop_assert!(m2 <= m1 + 1e-12);
        }

        #[test]
        fn tau_positive_for_any_param(theta in -1e6f64..1e6) {
            let mut r = Router::new(2, 1, 0.0, 0);
            r.tau_param.data_mut()[0] = theta;
            prop_assert!(r.tau() >= DEFAULT_TAU_MIN);
        }

        #[test]
        fn load_balance_is_permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 1..10), rot in 0usize..4) {
            let norm = |r: &Vec<f64>| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect::<Vec<_>>() };
            let recs: Vec<_> = rows.iter().map(|r| record(norm(r))).collect();
            let rotated: Vec<_> = rows.iter().map(|r| { let mut v = norm(r); v.rotate_left(rot); record(v) }).collect();
            let a = load_balance_loss(&recs).unwrap();
            let b = load_balance_loss(&rotated).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
            let st = routing_stats(&recs);
            prop_assert!((st[0].mean_load.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
