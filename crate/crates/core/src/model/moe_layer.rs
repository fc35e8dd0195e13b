use crate::error::{Error, Result};
use crate::lora::{ExpertRole, ExpertVars, LoraExpert};
use crate::routing::{Router, RouterVars, RoutingMode};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// A frozen weight `w0 [d x k]` plus a routed set of LoRA experts:
///
/// ```text
/// h = w0 x + sum_i g_i(x) * (alpha_i / r_i) * B_i A_i x
/// ```
///
/// Experts may have different ranks. Without a router the layer must hold a
/// single expert, which is applied with weight 1 (plain LoRA).
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraLayer {
    pub w0: Tensor,
    pub experts: Vec<LoraExpert>,
    pub router: Option<Router>,
    /// 1-based block index.
    pub layer_index: usize,
}

/// How expert outputs are weighted in a forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Gating {
    /// Adapters bypassed; the frozen weight alone.
    Off,
    #[default]
    Soft,
    TopK(usize),
    /// Uniform weight over the base experts only.
    BaseOnly,
    /// Fixed per-expert weights, identical for every token.
    Pinned(Vec<f64>),
}

impl From<RoutingMode> for Gating {
    fn from(m: RoutingMode) -> Self {
        match m {
            RoutingMode::Soft => Gating::Soft,
            RoutingMode::TopK(k) => Gating::TopK(k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub w0: Var,
    pub experts: Vec<ExpertVars>,
    pub router: Option<RouterVars>,
}

/// Result of a layer forward: output rows and, when a router ran, the gate matrix `[T x N]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub out: Var,
    pub gates: Option<Var>,
}

impl MoeLoraLayer {
    pub fn new(w0: Tensor, experts: Vec<LoraExpert>, router: Option<Router>, layer_index: usize) -> Result<Self> {
        let (d, k) = match w0.shape() {
            [d, k] => (*d, *k),
            s => return Err(Error::Domain(format!("w0 must be a matrix, got {s:?}"))),
        };
        for e in &experts {
            if e.out_dim() != d || e.in_dim() != k {
                return Err(TensorError::Shape {
                    op: "MoeLoraLayer",
                    left: vec![d, k],
                    right: vec![e.out_dim(), e.in_dim()],
                }
                .into());
            }
        }
        match &router {
            Some(r) if r.num_experts() != experts.len() || r.in_dim() != k => {
                return Err(Error::Domain(format!(
                    "router is {}x{} but layer has {} experts over {k} inputs",
                    r.num_experts(),
                    r.in_dim(),
                    experts.len()
                )))
            }
            None if experts.len() != 1 => {
                return Err(Error::Domain("a layer without a router must hold exactly one expert".into()))
            }
            _ => {}
        }
        let mut w0 = w0;
        w0.set_requires_grad(false);
        Ok(Self { w0, experts, router, layer_index })
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> LayerVars {
        LayerVars {
            w0: tape.frozen(&self.w0),
            experts: self.experts.iter().map(|e| e.bind(tape)).collect(),
            router: self.router.as_ref().map(|r| r.bind(tape)),
        }
    }

    /// Forward over the rows of `x [T x k]`.
    pub fn forward_rows(&self, tape: &mut Tape<'_>, vars: &LayerVars, x: Var, gating: &Gating) -> Result<LayerOutput> {
        let base = tape.matmul_nt(x, vars.w0)?;
        let n = self.experts.len();
        let (weights, gates) = match gating {
            Gating::Off => return Ok(LayerOutput { out: base, gates: None }),
            Gating::Soft | Gating::TopK(_) => match (&self.router, vars.router) {
                (Some(router), Some(rv)) => {
                    let mode = match gating {
                        Gating::TopK(k) => RoutingMode::TopK(*k),
                        _ => RoutingMode::Soft,
                    };
                    let g = router.gates(tape, rv, x, mode)?;
                    (Weights::PerToken(g), Some(g))
                }
                _ => (Weights::Fixed(vec![1.0]), None),
            },
            Gating::BaseOnly => {
                let nb = self.experts.iter().filter(|e| e.role == ExpertRole::Base).count();
                let w = self
                    .experts
                    .iter()
                    .map(|e| if e.role == ExpertRole::Base { 1.0 / nb as f64 } else { 0.0 })
                    .collect();
                (Weights::Fixed(w), None)
            }
            Gating::Pinned(w) => {
                if w.len() != n {
                    return Err(Error::Domain(format!("{} pinned gates for {n} experts", w.len())));
                }
                (Weights::Fixed(w.clone()), None)
            }
        };
        let mut out = base;
        for (i, (expert, ev)) in self.experts.iter().zip(&vars.experts).enumerate() {
            // a frozen all-zero expert contributes exactly nothing
            if !expert.trainable() && expert.is_zero() {
                continue;
            }
            let contrib = match &weights {
                Weights::Fixed(w) => {
                    if w[i] == 0.0 {
                        continue;
                    }
                    let y = expert.apply(tape, *ev, x)?;
                    if w[i] == 1.0 {
                        y
                    } else {
                        tape.scale(y, w[i])
                    }
                }
                Weights::PerToken(g) => {
                    let y = expert.apply(tape, *ev, x)?;
                    let gi = tape.column(*g, i)?;
                    tape.scale_rows(y, gi)?
                }
            };
            out = tape.add(out, contrib)?;
        }
        Ok(LayerOutput { out, gates })
    }
}

enum Weights {
    Fixed(Vec<f64>),
    PerToken(Var),
}

/// Single-input forward, `h = w0 x + sum_i g_i(x) lora_i(x)`.
pub fn moe_forward(layer: &MoeLoraLayer, x: &Tensor, gating: &Gating) -> Result<Tensor> {
    if x.numel() != layer.in_dim() {
        return Err(TensorError::Shape {
            op: "moe_forward",
            left: layer.w0.shape().to_vec(),
            right: x.shape().to_vec(),
        }
        .into());
    }
    let row = Tensor::new(vec![1, x.numel()], x.data().to_vec())?;
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape);
    let xv = tape.frozen(&row);
    let out = layer.forward_rows(&mut tape, &vars, xv, gating)?;
    Ok(Tensor::vector(tape.value(out.out).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{lora_delta_w, lora_init};
    use crate::routing::{gate_logits, soft_merge_weights, topk_weights};
    use crate::tensor::matmul;

    fn w0(d: usize, k: usize) -> Tensor {
        Tensor::from_fn(&[d, k], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1)
    }

    fn layer(ranks: &[usize], d: usize, k: usize, seed: u64) -> MoeLoraLayer {
        let experts = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| lora_init(d, k, r, ExpertRole::Specialist, seed + i as u64).unwrap())
            .collect();
        let router = Router::new(ranks.len(), k, 0.5, seed + 100);
        MoeLoraLayer::new(w0(d, k), experts, Some(router), 1).unwrap()
    }

    fn randomize_b(layer: &mut MoeLoraLayer) {
        for (i, e) in layer.experts.iter_mut().enumerate() {
            for (j, v) in e.b.data_mut().iter_mut().enumerate() {
                *v = ((i * 31 + j * 17) as f64 * 0.61).sin();
            }
        }
    }

    #[test]
    fn zero_init_is_exactly_w0() {
        let l = layer(&[1, 2, 2], 3, 3, 5);
        let x = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let base = matmul(&l.w0, &x).unwrap();
        for g in [Gating::Soft, Gating::TopK(1), Gating::Off] {
            let h = moe_forward(&l, &x, &g).unwrap();
            assert_eq!(h.data(), base.data());
        }
    }

    #[test]
    fn single_expert_reduces_to_plain_lora() {
        let mut l = layer(&[2], 3, 3, 9);
        randomize_b(&mut l);
        let x = Tensor::vector(vec![1.0, 0.5, -0.25]);
        let h = moe_forward(&l, &x, &Gating::Soft).unwrap();
        let expect = matmul(&l.w0, &x).unwrap();
        let delta = crate::lora::lora_forward(&l.experts[0], &x).unwrap();
        for i in 0..3 {
            assert!((h.data()[i] - expect.data()[i] - delta.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_ranks_match_dense_evaluation() {
        let mut l = layer(&[1, 2], 3, 3, 21);
        l.experts[0].a = Tensor::matrix(&[&[1.0, -1.0, 0.5]]).with_requires_grad(true);
        l.experts[0].b = Tensor::matrix(&[&[2.0], &[0.0], &[-1.0]]).with_requires_grad(true);
        l.experts[1].a = Tensor::matrix(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0]]).with_requires_grad(true);
        l.experts[1].b = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).with_requires_grad(true);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let gates = vec![0.25, 0.75];
        let h = moe_forward(&l, &x, &Gating::Pinned(gates.clone())).unwrap();

        // hand: A0 x = 1 - 2 + 1.5 = 0.5, B0 A0 x = [1, 0, -0.5], scale 2 -> [2, 0, -1]
        //       A1 x = [2, 4], B1 A1 x = [2, 4, 6], scale 2 -> [4, 8, 12]
        //       delta = 0.25 [2, 0, -1] + 0.75 [4, 8, 12] = [3.5, 6, 8.75]
        let w0x = matmul(&l.w0, &x).unwrap();
        let hand = [3.5, 6.0, 8.75];
        for i in 0..3 {
            assert!((h.data()[i] - w0x.data()[i] - hand[i]).abs() < 1e-12);
        }
        // brute-force dense route through materialized deltas
        let mut dense = w0x.data().to_vec();
        for (g, e) in gates.iter().zip(&l.experts) {
            let dw = matmul(&lora_delta_w(e), &x).unwrap();
            for (o, v) in dense.iter_mut().zip(dw.data()) {
                *o += g * v;
            }
        }
        for i in 0..3 {
            assert!((h.data()[i] - dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_gating_uses_router_weights() {
        let mut l = layer(&[1, 2, 1], 4, 3, 33);
        randomize_b(&mut l);
        let router = l.router.as_mut().unwrap();
        router.set_tau(0.7);
        let x = Tensor::vector(vec![0.2, -0.4, 1.1]);
        let router = l.router.as_ref().unwrap();
        let g = soft_merge_weights(&gate_logits(router, &x).unwrap(), router).unwrap();
        let soft = moe_forward(&l, &x, &Gating::Soft).unwrap();
        let pinned = moe_forward(&l, &x, &Gating::Pinned(g.data().to_vec())).unwrap();
        assert!(soft.max_abs_diff(&pinned) < 1e-12);

        // top-1 selects exactly the argmax expert at weight 1
        let s = gate_logits(router, &x).unwrap();
        let scaled = Tensor::vector(s.data().iter().map(|v| v / router.tau()).collect());
        let w = topk_weights(&scaled, 1).unwrap();
        let top = moe_forward(&l, &x, &Gating::TopK(1)).unwrap();
        let pinned = moe_forward(&l, &x, &Gating::Pinned(w.data().to_vec())).unwrap();
        assert!(top.max_abs_diff(&pinned) < 1e-12);
    }

    #[test]
    fn topk_n_equals_soft_exactly() {
        let mut l = layer(&[2, 1, 2], 3, 4, 44);
        randomize_b(&mut l);
        let x = Tensor::vector(vec![0.5, 0.1, -0.3, 0.9]);
        let a = moe_forward(&l, &x, &Gating::Soft).unwrap();
        let b = moe_forward(&l, &x, &Gating::TopK(3)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(moe_forward(&l, &x, &Gating::TopK(4)), Err(Error::Config { .. })));
    }

    #[test]
    fn doubling_b_doubles_delta_under_pinned_gates() {
        let mut l = layer(&[2, 1], 3, 3, 55);
        randomize_b(&mut l);
        let x = Tensor::vector(vec![0.7, -0.2, 0.4]);
        let gates = Gating::Pinned(vec![0.6, 0.4]);
        let w0x = matmul(&l.w0, &x).unwrap();
        let h1 = moe_forward(&l, &x, &gates).unwrap();
        for e in &mut l.experts {
            e.b.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let h2 = moe_forward(&l, &x, &gates).unwrap();
        for i in 0..3 {
            let d1 = h1.data()[i] - w0x.data()[i];
            let d2 = h2.data()[i] - w0x.data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn w0_and_frozen_experts_get_no_gradient() {
        let mut l = layer(&[2, 2], 3, 3, 66);
        randomize_b(&mut l);
        l.experts[0].role = ExpertRole::Base;
        l.experts[0].set_trainable(false);
        let x = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[0.5, -0.5, 0.0]]);
        let mut tape = Tape::new();
        let vars = l.bind(&mut tape);
        let xv = tape.frozen(&x);
        let out = l.forward_rows(&mut tape, &vars, xv, &Gating::Soft).unwrap();
        let s = tape.sum(out.out);
        let g = tape.backward(s).unwrap();
        assert!(g.get(vars.w0).is_none());
        assert!(g.get(vars.experts[0].a).is_none());
        assert!(g.get(vars.experts[0].b).is_none());
        assert!(g.get(vars.experts[1].b).is_some());
        let rv = vars.router.unwrap();
        assert!(g.get(rv.w_g).is_some());
        assert!(g.get(rv.tau_param).is_some());
    }

    #[test]
    fn constructor_checks() {
        let e = lora_init(3, 3, 1, ExpertRole::Specialist, 0).unwrap();
        assert!(MoeLoraLayer::new(w0(3, 3), vec![e.clone(), e.clone()], None, 1).is_err());
        assert!(MoeLoraLayer::new(w0(3, 3), vec![e.clone()], Some(Router::new(2, 3, 0.0, 0)), 1).is_err());
        assert!(MoeLoraLayer::new(w0(4, 3), vec![e.clone()], None, 1).is_err());
        assert!(MoeLoraLayer::new(w0(3, 3), vec![e], None, 1).is_ok());
    }
}
