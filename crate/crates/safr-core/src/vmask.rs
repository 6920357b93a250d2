//! Variational word mask between the embedding lookup and the positional
//! encoder. Produces per-token keep probabilities (the importance scores)
//! and gates each embedding row by its sampled mask value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};

/// p_i = sigmoid(w . e_i + b), a single-logit head over the embedding.
pub fn mask_probs(g: &mut Graph, embeddings: Var, w: Var, b: Var) -> Var {
    let lin = g.matmul(embeddings, w);
    let shifted = g.add_row(lin, b);
    g.sigmoid(shifted)
}

/// One Gumbel(0, 1) draw.
pub fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Training-mode mask: binary-concrete relaxation with Gumbel noise drawn
/// from `rng`. Eval mode uses the expected mask (z = p) directly.
pub fn sample_mask(g: &mut Graph, probs: Var, temperature: f64, rng: &mut ChaCha8Rng) -> Var {
    let t = g.value(probs).nrows();
    let noise: Vec<f64> = (0..t).map(|_| gumbel(rng)).collect();
    g.binary_concrete(probs, noise, temperature)
}

/// Row i of the output is z_i * e_i.
pub fn apply_mask(g: &mut Graph, embeddings: Var, z: Var) -> Var {
    g.scale_rows(embeddings, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::{arr2, Array2};

    #[test]
    fn mask_probs_zero_params_give_half() {
        let mut g = Graph::new();
        let e = g.leaf(arr2(&[[0.3, -0.2], [1.0, 2.0]]));
        let w = g.leaf(Array2::zeros((2, 1)));
        let b = g.leaf(Array2::zeros((1, 1)));
        let p = mask_probs(&mut g, e, w, b);
        for &v in g.value(p).iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_probs_logistic_value() {
        // w.e + b = 4.0 -> sigma(4.0) ~ 0.9820
        let mut g = Graph::new();
        let e = g.leaf(arr2(&[[2.0]]));
        let w = g.leaf(arr2(&[[2.0]]));
        let b = g.leaf(Array2::zeros((1, 1)));
        let p = mask_probs(&mut g, e, w, b);
        assert!((g.value(p)[[0, 0]] - 0.98201379).abs() < 1e-6);
    }

    #[test]
    fn eval_mask_is_probs_and_sampling_is_seeded() {
        let mut g = Graph::new();
        let p = g.leaf(arr2(&[[0.9], [0.1]]));
        // eval: z == p
        assert_eq!(g.value(p), &arr2(&[[0.9], [0.1]]));

        let mut r1 = stream_rng(9, "mask");
        let mut r2 = stream_rng(9, "mask");
        let z1 = sample_mask(&mut g, p, 0.5, &mut r1);
        let z2 = sample_mask(&mut g, p, 0.5, &mut r2);
        assert_eq!(g.value(z1), g.value(z2));
        for &v in g.value(z1).iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn low_temperature_saturates() {
        // tau -> 0 with g = 0 noise pushes z toward round(p)
        let mut g = Graph::new();
        let p = g.leaf(arr2(&[[0.9]]));
        let z = g.binary_concrete(p, vec![0.0], 1e-3);
        assert!(g.value(z)[[0, 0]] > 0.999);
    }

    #[test]
    fn apply_mask_examples() {
        let mut g = Graph::new();
        let e = g.leaf(arr2(&[[2.0, 4.0]]));
        let z = g.leaf(arr2(&[[0.5]]));
        let out = apply_mask(&mut g, e, z);
        assert_eq!(g.value(out), &arr2(&[[1.0, 2.0]]));

        let ones = g.leaf(arr2(&[[1.0]]));
        let id = apply_mask(&mut g, e, ones);
        assert_eq!(g.value(id), g.value(e));

        let zeros = g.leaf(arr2(&[[0.0]]));
        let z0 = apply_mask(&mut g, e, zeros);
        assert!(g.value(z0).iter().all(|&v| v == 0.0));
    }
}
