//! The training objective: cross entropy plus the importance regularizer
//! (polysemanticity of the masked embeddings) and the interaction
//! regularizer (attention-weighted row interference).
//!
//! Each piece exists twice: as graph builders used by training, and as plain
//! functions over concrete arrays used by evaluation and tests.

use ndarray::{Array1, Array2};

use crate::autograd::{Graph, Var};
use crate::model::TraceVars;
use crate::repr_metrics::{self, LayerTag, RepresentationMatrix};

/// Floor for the sqrt argument of the importance term; sqrt has an infinite
/// slope at zero.
pub const SQRT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_importance: f64,
    pub l_interaction: f64,
    pub lambda_imp: f64,
    pub lambda_inter: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn tsv_header() -> &'static str {
        "step\tl_ce\tl_imp\tl_inter\ttotal\tdev_acc"
    }

    pub fn tsv_row(&self, step: usize, dev_acc: Option<f64>) -> String {
        let dev = dev_acc
            .map(|a| format!("{a:.6}"))
            .unwrap_or_else(|| "-".to_string());
        format!(
            "{step}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{dev}",
            self.l_ce, self.l_importance, self.l_interaction, self.total
        )
    }
}

/// Graph vars of the combined loss for one batch.
pub struct LossVars {
    pub total: Var,
    pub l_ce: Var,
    pub l_importance: Var,
    pub l_interaction: Var,
}

/// (1/T) sum_i sqrt(P_i / E) over the masked embeddings, built on the graph.
///
/// P is composed from the gram matrix so it stays differentiable end to end:
/// P_i = sum_j (G_ij / n_i)^2 - n_i^2 with n_i the row norm.
pub fn importance_loss_var(g: &mut Graph, s_prime: Var, embed_dim: usize) -> Var {
    let t = g.value(s_prime).nrows();
    let gram = g.matmul_nt(s_prime, s_prime);
    let sq_norms = g.diag(gram);
    let norms = g.sqrt_clamped(sq_norms, 1e-16);
    let unit_proj = g.div_col(gram, norms);
    let proj_sq = g.square(unit_proj);
    let row_total = g.row_sums(proj_sq);
    let poly = g.sub(row_total, sq_norms);
    let scaled = g.scalar_mul(poly, 1.0 / embed_dim as f64);
    let rooted = g.sqrt_clamped(scaled, SQRT_FLOOR);
    let total = g.sum_all(rooted);
    g.scalar_mul(total, 1.0 / t as f64)
}

/// (1/T^2) sum_a sum_ij A_a(i,j) * (1 - I^{A_a}_ij) where I is the gram
/// matrix of attention rows. Diagonal terms included.
pub fn interaction_loss_var(g: &mut Graph, attn_weights: &[Var]) -> Var {
    let t = g.value(attn_weights[0]).nrows();
    let mut acc: Option<Var> = None;
    for &a in attn_weights {
        let interference = g.matmul_nt(a, a);
        let neg = g.scalar_mul(interference, -1.0);
        let one_minus = g.scalar_add(neg, 1.0);
        let weighted = g.mul(a, one_minus);
        let s = g.sum_all(weighted);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s),
            None => s,
        });
    }
    g.scalar_mul(acc.unwrap(), 1.0 / (t * t) as f64)
}

/// KL of the mask distribution to Bernoulli(0.5); only active when the
/// vmask_info_coeff flag is nonzero.
pub fn vmask_info_var(g: &mut Graph, mask_probs: Var) -> Var {
    let t = g.value(mask_probs).nrows();
    let ln_p = g.ln_clamped(mask_probs, 1e-12);
    let p_lnp = g.mul(mask_probs, ln_p);
    let neg_p = g.scalar_mul(mask_probs, -1.0);
    let q = g.scalar_add(neg_p, 1.0);
    let ln_q = g.ln_clamped(q, 1e-12);
    let q_lnq = g.mul(q, ln_q);
    let negent = g.add(p_lnp, q_lnq);
    let kl = g.scalar_add(negent, std::f64::consts::LN_2);
    let s = g.sum_all(kl);
    g.scalar_mul(s, 1.0 / t as f64)
}

/// Combined batch loss over per-example traces. Per-example T normalizations
/// happen inside the component builders; the interaction term additionally
/// carries the 1/M head normalization before the batch mean.
pub fn total_loss_vars(
    g: &mut Graph,
    traces: &[TraceVars],
    labels: &[u32],
    embed_dim: usize,
    lambda_imp: f64,
    lambda_inter: f64,
    vmask_info_coeff: f64,
) -> LossVars {
    assert_eq!(traces.len(), labels.len());
    assert!(!traces.is_empty());
    let n = traces.len() as f64;
    let heads = traces[0].attn_weights.len() as f64;

    let mut ce_sum: Option<Var> = None;
    let mut imp_sum: Option<Var> = None;
    let mut inter_sum: Option<Var> = None;
    let mut info_sum: Option<Var> = None;
    let fold = |g: &mut Graph, acc: &mut Option<Var>, v: Var| {
        *acc = Some(match *acc {
            Some(prev) => g.add(prev, v),
            None => v,
        });
    };
    for (trace, &label) in traces.iter().zip(labels) {
        let ce = g.cross_entropy(trace.logits, label as usize);
        fold(g, &mut ce_sum, ce);
        let imp = importance_loss_var(g, trace.vmask_out, embed_dim);
        fold(g, &mut imp_sum, imp);
        let inter = interaction_loss_var(g, &trace.attn_weights);
        fold(g, &mut inter_sum, inter);
        if vmask_info_coeff != 0.0 {
            let info = vmask_info_var(g, trace.mask_probs);
            fold(g, &mut info_sum, info);
        }
    }
    let l_ce = g.scalar_mul(ce_sum.unwrap(), 1.0 / n);
    let l_importance = g.scalar_mul(imp_sum.unwrap(), 1.0 / n);
    let l_interaction = g.scalar_mul(inter_sum.unwrap(), 1.0 / (n * heads));

    let imp_term = g.scalar_mul(l_importance, lambda_imp);
    let inter_term = g.scalar_mul(l_interaction, lambda_inter);
    let mut total = g.add(l_ce, imp_term);
    total = g.add(total, inter_term);
    if let Some(info) = info_sum {
        let info_mean = g.scalar_mul(info, vmask_info_coeff / n);
        total = g.add(total, info_mean);
    }
    LossVars {
        total,
        l_ce,
        l_importance,
        l_interaction,
    }
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, lambda_imp: f64, lambda_inter: f64) -> LossBreakdown {
        LossBreakdown {
            l_ce: g.scalar(self.l_ce),
            l_importance: g.scalar(self.l_importance),
            l_interaction: g.scalar(self.l_interaction),
            lambda_imp,
            lambda_inter,
            total: g.scalar(self.total),
        }
    }
}

// --- plain (non-graph) versions -------------------------------------------

/// Mean stabilized cross entropy over a batch of logit vectors.
pub fn cross_entropy(logits_batch: &[Array1<f64>], labels: &[u32]) -> f64 {
    assert_eq!(logits_batch.len(), labels.len());
    let mut total = 0.0;
    for (logits, &label) in logits_batch.iter().zip(labels) {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - logits[label as usize];
    }
    total / labels.len() as f64
}

/// (1/T) sum_i sqrt(P_i / E) over valid tokens of the masked embeddings.
pub fn importance_loss(s_prime: &RepresentationMatrix, embed_dim: usize) -> f64 {
    let poly = repr_metrics::polysemanticity(s_prime).expect("valid representation");
    let t = poly.len() as f64;
    poly.iter()
        .map(|&p| (p / embed_dim as f64).max(SQRT_FLOOR).sqrt())
        .sum::<f64>()
        / t
}

/// Per-example interaction penalty over one example's attention heads.
pub fn interaction_loss(attn_weights: &[Array2<f64>]) -> f64 {
    let t = attn_weights[0].nrows();
    let mut total = 0.0;
    for a in attn_weights {
        let rm = RepresentationMatrix::new(LayerTag::AttentionOut, a.clone());
        let interference = repr_metrics::interference_matrix(&rm).expect("valid attention");
        for i in 0..t {
            for j in 0..t {
                total += a[[i, j]] * (1.0 - interference[[i, j]]);
            }
        }
    }
    total / (t * t) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn cross_entropy_examples() {
        // uniform logits, G=2 -> ln 2
        let ce = cross_entropy(&[arr1(&[0.0, 0.0])], &[0]);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);

        // strongly confident correct prediction -> ~0
        let ce = cross_entropy(&[arr1(&[50.0, 0.0])], &[0]);
        assert!(ce < 1e-12);

        // logits (2, 0), label 0 -> -log(e^2 / (e^2 + 1))
        let ce = cross_entropy(&[arr1(&[2.0, 0.0])], &[0]);
        assert!((ce - 0.12692801104297263).abs() < 1e-10);
    }

    #[test]
    fn importance_loss_examples() {
        let orth = RepresentationMatrix::new(LayerTag::Vmask, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        assert!(importance_loss(&orth, 2) < 1e-5);

        // S' = [(2,0),(1,1)], E=2: P = [1,2], loss = (sqrt(1/2)+sqrt(1))/2
        let h = RepresentationMatrix::new(LayerTag::Vmask, arr2(&[[2.0, 0.0], [1.0, 1.0]]));
        let want = (0.5f64.sqrt() + 1.0) / 2.0;
        assert!((importance_loss(&h, 2) - want).abs() < 1e-10);

        // single token: no peers
        let single = RepresentationMatrix::new(LayerTag::Vmask, arr2(&[[3.0, 4.0]]));
        assert!(importance_loss(&single, 2) < 1e-5);
    }

    #[test]
    fn interaction_loss_examples() {
        // uniform attention, one head, T=2 -> 0.25
        let uniform = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!((interaction_loss(&[uniform]) - 0.25).abs() < 1e-12);

        // identity attention -> 0
        let eye = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(interaction_loss(&[eye]).abs() < 1e-12);
    }

    #[test]
    fn graph_versions_match_plain_versions() {
        let s = arr2(&[[2.0, 0.0], [1.0, 1.0], [0.5, -0.3]]);
        let mut g = Graph::new();
        let sv = g.leaf(s.clone());
        let iv = importance_loss_var(&mut g, sv, 2);
        let plain = importance_loss(&RepresentationMatrix::new(LayerTag::Vmask, s), 2);
        assert!((g.scalar(iv) - plain).abs() < 1e-9);

        let a1 = arr2(&[[0.7, 0.3], [0.2, 0.8]]);
        let a2 = arr2(&[[0.5, 0.5], [0.9, 0.1]]);
        let mut g = Graph::new();
        let v1 = g.leaf(a1.clone());
        let v2 = g.leaf(a2.clone());
        let lv = interaction_loss_var(&mut g, &[v1, v2]);
        let plain = interaction_loss(&[a1, a2]);
        assert!((g.scalar(lv) - plain).abs() < 1e-12);
    }

    #[test]
    fn interaction_bound_on_random_stochastic_matrices() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(5, "loss-test");
        for _ in 0..200 {
            let t = rng.gen_range(1..8);
            let m = rng.gen_range(1..4);
            let heads: Vec<Array2<f64>> = (0..m)
                .map(|_| {
                    let mut a = Array2::from_shape_fn((t, t), |_| rng.gen_range(0.0..1.0));
                    for mut row in a.rows_mut() {
                        let s = row.sum();
                        row.mapv_inplace(|v| v / s);
                    }
                    a
                })
                .collect();
            let l = interaction_loss(&heads);
            assert!(l >= 0.0);
            assert!(l <= m as f64 / t as f64 + 1e-12, "l={l} m={m} t={t}");
        }
    }

    #[test]
    fn importance_grad_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(6, "loss-grad");
        let s = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let sv = g.leaf(s.clone());
        let loss = importance_loss_var(&mut g, sv, 3);
        let grads = g.backward(loss);
        let analytic = grads[sv].as_ref().unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let eval = |m: Array2<f64>| {
                    let mut g = Graph::new();
                    let l = g.leaf(m);
                    let o = importance_loss_var(&mut g, l, 3);
                    g.scalar(o)
                };
                let mut plus = s.clone();
                plus[[i, j]] += h;
                let mut minus = s.clone();
                minus[[i, j]] -= h;
                let num = (eval(plus) - eval(minus)) / (2.0 * h);
                let a = analytic[[i, j]];
                assert!(
                    (a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4,
                    "({i},{j}): {a} vs {num}"
                );
            }
        }
    }
}
