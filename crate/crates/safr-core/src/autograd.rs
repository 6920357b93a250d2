//! Tape-based reverse-mode differentiation over dense f64 matrices.
//!
//! Every intermediate of a forward pass is a node on a [`Graph`]; `backward`
//! walks the tape in reverse and accumulates gradients into leaf nodes.
//! Scalars are 1x1 matrices, column vectors are Tx1.

use ndarray::{s, Array2, Axis};

pub type Var = usize;

type BackFn = Box<dyn Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

/// One forward pass worth of tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        self.nodes.len() - 1
    }

    /// A leaf node; gradients accumulate here and are readable after backward.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|go, pv, _| {
                vec![go.dot(&pv[1].t()), pv[0].t().dot(go)]
            })),
        )
    }

    /// a . b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|go, pv, _| {
                vec![go.dot(pv[1]), go.t().dot(pv[0])]
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|go, _, _| vec![go.clone(), go.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|go, _, _| vec![go.clone(), -go])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|go, pv, _| vec![go * pv[1], go * pv[0]])),
        )
    }

    /// TxD + 1xD with the row broadcast over all rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = &self.nodes[x].value + &self.nodes[row].value;
        self.push(
            value,
            vec![x, row],
            Some(Box::new(|go, _, _| {
                let dr = go.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![go.clone(), dr]
            })),
        )
    }

    /// TxD * 1xD elementwise with the row broadcast.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = &self.nodes[x].value * &self.nodes[row].value;
        self.push(
            value,
            vec![x, row],
            Some(Box::new(|go, pv, _| {
                let dx = go * pv[1];
                let dr = (go * pv[0]).sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![dx, dr]
            })),
        )
    }

    /// Scales row i of x (TxD) by s[i] (Tx1).
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Var {
        let value = &self.nodes[x].value * &self.nodes[scale].value;
        self.push(
            value,
            vec![x, scale],
            Some(Box::new(|go, pv, _| {
                let dx = go * pv[1];
                let ds = (go * pv[0]).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![dx, ds]
            })),
        )
    }

    /// Divides row i of x (TxD) by c[i] (Tx1).
    pub fn div_col(&mut self, x: Var, col: Var) -> Var {
        let value = &self.nodes[x].value / &self.nodes[col].value;
        self.push(
            value,
            vec![x, col],
            Some(Box::new(|go, pv, _| {
                let dx = go / pv[1];
                let dc = -(go * pv[0] / (pv[1] * pv[1]))
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                vec![dx, dc]
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![x],
            Some(Box::new(|go, pv, _| {
                vec![go * &pv[0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            vec![x],
            Some(Box::new(|go, _, out| vec![go * &(out * &(1.0 - out))])),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.mapv(|v| v * v);
        self.push(
            value,
            vec![x],
            Some(Box::new(|go, pv, _| vec![go * &(2.0 * pv[0])])),
        )
    }

    /// sqrt(max(x, floor)); gradient is zero where the clamp is active.
    pub fn sqrt_clamped(&mut self, x: Var, floor: f64) -> Var {
        let value = self.nodes[x].value.mapv(|v| v.max(floor).sqrt());
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, pv, out| {
                let mut dx = go / &(2.0 * out);
                ndarray::Zip::from(&mut dx).and(pv[0]).for_each(|d, &v| {
                    if v <= floor {
                        *d = 0.0;
                    }
                });
                vec![dx]
            })),
        )
    }

    /// ln(max(x, floor)); gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let value = self.nodes[x].value.mapv(|v| v.max(floor).ln());
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, pv, _| {
                let mut dx = go / pv[0];
                ndarray::Zip::from(&mut dx).and(pv[0]).for_each(|d, &v| {
                    if v <= floor {
                        *d = 0.0;
                    }
                });
                vec![dx]
            })),
        )
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let value = &self.nodes[x].value * c;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, _, _| vec![go * c])),
        )
    }

    pub fn scalar_add(&mut self, x: Var, c: f64) -> Var {
        let value = &self.nodes[x].value + c;
        self.push(value, vec![x], Some(Box::new(|go, _, _| vec![go.clone()])))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x].value.sum();
        let shape = self.nodes[x].value.raw_dim();
        self.push(
            Array2::from_elem((1, 1), s),
            vec![x],
            Some(Box::new(move |go, _, _| {
                vec![Array2::from_elem(shape, go[[0, 0]])]
            })),
        )
    }

    /// TxD -> Tx1, summing each row.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let d = self.nodes[x].value.ncols();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, _, _| {
                let t = go.nrows();
                vec![go.broadcast((t, d)).unwrap().to_owned()]
            })),
        )
    }

    /// TxD -> 1xD, mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.nodes[x].value.nrows();
        let value = self
            .nodes[x]
            .value
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, _, _| {
                let d = go.ncols();
                vec![(go / t as f64).broadcast((t, d)).unwrap().to_owned()]
            })),
        )
    }

    /// TxT -> Tx1 diagonal.
    pub fn diag(&mut self, x: Var) -> Var {
        let t = self.nodes[x].value.nrows();
        let mut value = Array2::zeros((t, 1));
        for i in 0..t {
            value[[i, 0]] = self.nodes[x].value[[i, i]];
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, _, _| {
                let mut dx = Array2::zeros((t, t));
                for i in 0..t {
                    dx[[i, i]] = go[[i, 0]];
                }
                vec![dx]
            })),
        )
    }

    /// Row-wise softmax (numerically stabilized).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x].value.clone();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(|go, _, out| {
                // dx = out * (go - rowsum(go * out))
                let mut dx = Array2::zeros(go.raw_dim());
                for i in 0..go.nrows() {
                    let dot: f64 = (0..go.ncols()).map(|j| go[[i, j]] * out[[i, j]]).sum();
                    for j in 0..go.ncols() {
                        dx[[i, j]] = out[[i, j]] * (go[[i, j]] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x].value;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sd = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / sd);
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, pv, out| {
                let mut dx = Array2::zeros(go.raw_dim());
                let d = go.ncols() as f64;
                for i in 0..go.nrows() {
                    let row = pv[0].row(i);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let sd = (var + eps).sqrt();
                    let g_mean: f64 = go.row(i).sum() / d;
                    let gy_mean: f64 =
                        (0..go.ncols()).map(|j| go[[i, j]] * out[[i, j]]).sum::<f64>() / d;
                    for j in 0..go.ncols() {
                        dx[[i, j]] = (go[[i, j]] - g_mean - out[[i, j]] * gy_mean) / sd;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Gathers rows of `table` (VxE) by index; gradient scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table].value;
        let e = tv.ncols();
        let v = tv.nrows();
        let mut value = Array2::zeros((ids.len(), e));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&tv.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            value,
            vec![table],
            Some(Box::new(move |go, _, _| {
                let mut dt = Array2::zeros((v, e));
                for (i, &id) in ids.iter().enumerate() {
                    let mut r = dt.row_mut(id);
                    r += &go.row(i);
                }
                vec![dt]
            })),
        )
    }

    /// Concatenates along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.ncols()).collect();
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |go, _, _| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    out.push(go.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
                out
            })),
        )
    }

    /// Elementwise multiply by a fixed, pre-scaled dropout mask.
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let value = &self.nodes[x].value * &mask;
        self.push(
            value,
            vec![x],
            Some(Box::new(move |go, _, _| vec![go * &mask])),
        )
    }

    /// Binary-concrete relaxation z = sigmoid((logit(p) + g) / tau) with fixed
    /// Gumbel noise g per entry. p is clamped to [1e-6, 1 - 1e-6] pre-logit.
    pub fn binary_concrete(&mut self, probs: Var, noise: Vec<f64>, tau: f64) -> Var {
        let pv = &self.nodes[probs].value;
        assert_eq!(pv.ncols(), 1);
        assert_eq!(pv.nrows(), noise.len());
        let mut value = Array2::zeros(pv.raw_dim());
        for i in 0..pv.nrows() {
            let pc = pv[[i, 0]].clamp(1e-6, 1.0 - 1e-6);
            let logit = (pc / (1.0 - pc)).ln();
            value[[i, 0]] = 1.0 / (1.0 + (-(logit + noise[i]) / tau).exp());
        }
        self.push(
            value,
            vec![probs],
            Some(Box::new(move |go, pv, out| {
                let mut dp = Array2::zeros(out.raw_dim());
                for i in 0..out.nrows() {
                    let p = pv[0][[i, 0]];
                    if p <= 1e-6 || p >= 1.0 - 1e-6 {
                        continue; // clamp active, gradient cut
                    }
                    let z = out[[i, 0]];
                    dp[[i, 0]] = go[[i, 0]] * z * (1.0 - z) / (tau * p * (1.0 - p));
                }
                vec![dp]
            })),
        )
    }

    /// Cross entropy of one example: lse(logits) - logits[label], logits 1xG.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = &self.nodes[logits].value;
        let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = Array2::from_elem((1, 1), lse - lv[[0, label]]);
        self.push(
            value,
            vec![logits],
            Some(Box::new(move |go, pv, _| {
                let lv = pv[0];
                let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lv.iter().map(|v| (v - m).exp()).sum();
                let mut dl = lv.mapv(|v| (v - m).exp() / z);
                dl[[0, label]] -= 1.0;
                vec![dl * go[[0, 0]]]
            })),
        )
    }

    /// Accumulates dL/d(node) for every node reachable from `root`.
    /// Leaf gradients are what callers read back.
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::ones(self.nodes[root].value.raw_dim()));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if node.back.is_none() {
                continue;
            }
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let pvals: Vec<&Array2<f64>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = node.back.as_ref().unwrap()(&go, &pvals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on a scalar-valued builder over one leaf.
    fn fd_check<F>(input: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let leaf = g.leaf(input.clone());
        let out = build(&mut g, leaf);
        assert_eq!(g.value(out).dim(), (1, 1));
        let grads = g.backward(out);
        let analytic = grads[leaf].as_ref().expect("leaf grad missing").clone();

        let h = 1e-6;
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let mut plus = input.clone();
                plus[[i, j]] += h;
                let mut minus = input.clone();
                minus[[i, j]] -= h;
                let eval = |m: Array2<f64>| {
                    let mut g = Graph::new();
                    let l = g.leaf(m);
                    let o = build(&mut g, l);
                    g.scalar(o)
                };
                let num = (eval(plus) - eval(minus)) / (2.0 * h);
                let a = analytic[[i, j]];
                let denom = a.abs().max(num.abs()).max(1e-6);
                assert!(
                    (a - num).abs() / denom < tol,
                    "grad mismatch at ({i},{j}): analytic {a} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 3, 4);
        fd_check(
            rand_mat(&mut rng, 2, 3),
            move |g, x| {
                let wv = g.leaf(w.clone());
                let y = g.matmul(x, wv);
                let y2 = g.square(y);
                g.sum_all(y2)
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_layernorm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        fd_check(
            rand_mat(&mut rng, 3, 5),
            |g, x| {
                let sm = g.softmax_rows(x);
                let ln = g.layer_norm_rows(sm, 1e-5);
                let sq = g.square(ln);
                g.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn broadcast_ops_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = rand_mat(&mut rng, 1, 4);
        let scale = rand_mat(&mut rng, 3, 1).mapv(f64::abs) + 0.5;
        fd_check(
            rand_mat(&mut rng, 3, 4),
            move |g, x| {
                let r = g.leaf(row.clone());
                let s = g.leaf(scale.clone());
                let a = g.add_row(x, r);
                let b = g.scale_rows(a, s);
                let c = g.div_col(b, s);
                let d = g.mul_row(c, r);
                g.sum_all(d)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_concat_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        fd_check(
            rand_mat(&mut rng, 5, 3),
            |g, table| {
                let a = g.gather_rows(table, &[0, 2, 2, 4]);
                let b = g.gather_rows(table, &[1, 1, 3, 0]);
                let cat = g.concat_cols(&[a, b]);
                let sq = g.square(cat);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn reductions_and_unary_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        fd_check(
            rand_mat(&mut rng, 4, 4),
            |g, x| {
                let sg = g.sigmoid(x);
                let rs = g.row_sums(sg);
                let dg = g.diag(x);
                let sum = g.add(rs, dg);
                let sq = g.sqrt_clamped(sum, 1e-12);
                let mr = g.mean_rows(sq);
                g.sum_all(mr)
            },
            1e-4,
        );
    }

    #[test]
    fn binary_concrete_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = Array2::from_shape_fn((4, 1), |_| rng.gen_range(0.05..0.95));
        fd_check(
            p,
            move |g, x| {
                let z = g.binary_concrete(x, noise.clone(), 0.5);
                let sq = g.square(z);
                g.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut g = Graph::new();
        let logits = g.leaf(arr2(&[[2.0, 0.0]]));
        let ce = g.cross_entropy(logits, 0);
        let expected = -((2.0f64).exp() / ((2.0f64).exp() + 1.0)).ln();
        assert!((g.scalar(ce) - expected).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        fd_check(
            rand_mat(&mut rng, 1, 5),
            |g, x| g.cross_entropy(x, 3),
            1e-5,
        );
    }

    #[test]
    fn relu_and_dropout_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = Array2::from_shape_fn((3, 3), |_| {
            if rng.gen_bool(0.5) {
                2.0
            } else {
                0.0
            }
        });
        fd_check(
            rand_mat(&mut rng, 3, 3) + 0.1,
            move |g, x| {
                let r = g.relu(x);
                let d = g.dropout(r, mask.clone());
                let sq = g.square(d);
                g.sum_all(sq)
            },
            1e-4,
        );
    }
}
