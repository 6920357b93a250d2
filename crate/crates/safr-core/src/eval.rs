//! Deletion-based interpretability evaluation: plain accuracy, capacity-
//! ranked and random token deletion, the SRS score, sensitivity curves over
//! k, per-token-status capacity reporting, and lambda sweeps.

use ndarray::Array1;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{Dataset, DatasetSplit, TokenizedExample};
use crate::model::{ForwardTrace, Model, ModelConfig, ModelError};
use crate::repr_metrics::{self, LayerTag};
use crate::rng::{derive_seed, stream_rng};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::repr_metrics::MetricsError),
    #[error("unknown layer tag {0}")]
    UnknownLayer(String),
    #[error("important_fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
}

/// SRS evaluation at one k: original accuracy, random-deletion baseline
/// (mean over seeds), capacity-deletion accuracy, and their gap in
/// percentage points.
#[derive(Debug, Clone)]
pub struct SrsReport {
    pub k: f64,
    pub acc_original: f64,
    pub acc_random: f64,
    pub acc_random_per_seed: Vec<f64>,
    pub acc_capacity: f64,
    /// acc_original - acc_capacity, in percentage points.
    pub srs: f64,
    pub layer: LayerTag,
    pub n: usize,
}

impl SrsReport {
    pub fn tsv_header() -> &'static str {
        "k\tacc_s\tacc_r\tacc_k\tsrs"
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.k,
            self.acc_original * 100.0,
            self.acc_random * 100.0,
            self.acc_capacity * 100.0,
            self.srs
        )
    }
}

/// Table 4 style capacity split by VMASK importance.
#[derive(Debug, Clone)]
pub struct CapacityReport {
    pub mean_all: f64,
    pub mean_important: f64,
    pub mean_rest: f64,
    pub important_fraction: f64,
    /// (surface token, vmask score, capacity) per record.
    pub records: Vec<(String, f64, f64)>,
}

impl CapacityReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tmean_capacity\n");
        out.push_str(&format!("all\t{:.4}\n", self.mean_all));
        out.push_str(&format!("important\t{:.4}\n", self.mean_important));
        out.push_str(&format!("rest\t{:.4}\n", self.mean_rest));
        out
    }
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn accuracy(model: &Model, split: &DatasetSplit) -> Result<f64, EvalError> {
    if split.examples.is_empty() {
        return Err(EvalError::EmptySplit(split.name.clone()));
    }
    let mut correct = 0usize;
    for ex in &split.examples {
        if model.predict(&ex.token_ids)? == ex.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.examples.len() as f64)
}

/// Token indices sorted by capacity descending; ties break toward the
/// earlier position.
pub fn rank_tokens_by_capacity(trace: &ForwardTrace, layer: LayerTag) -> Vec<usize> {
    let capacity = repr_metrics::capacity(trace.layer(layer)).expect("non-empty trace layer");
    let mut order: Vec<usize> = (0..capacity.len()).collect();
    order.sort_by(|&a, &b| {
        capacity[b]
            .partial_cmp(&capacity[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Number of tokens to delete: floor(k * T / 100), at least 1 when k > 0,
/// and never the whole input (one lowest-ranked token always survives).
pub fn deletion_count(t: usize, k: f64) -> usize {
    if k <= 0.0 {
        return 0;
    }
    let m = ((k * t as f64) / 100.0).floor() as usize;
    m.max(1).min(t.saturating_sub(1))
}

fn keep_positions(example: &TokenizedExample, delete: &[usize]) -> TokenizedExample {
    let drop: std::collections::HashSet<usize> = delete.iter().cloned().collect();
    let mut token_ids = Vec::with_capacity(example.len() - drop.len());
    let mut tokens = Vec::with_capacity(example.len() - drop.len());
    for i in 0..example.len() {
        if !drop.contains(&i) {
            token_ids.push(example.token_ids[i]);
            tokens.push(example.tokens[i].clone());
        }
    }
    TokenizedExample {
        token_ids,
        tokens,
        label: example.label,
    }
}

/// Removes the m highest-ranked tokens; survivors keep their order.
pub fn delete_topk(example: &TokenizedExample, ranking: &[usize], k: f64) -> TokenizedExample {
    let m = deletion_count(example.len(), k);
    keep_positions(example, &ranking[..m])
}

/// Removes m uniformly sampled tokens (without replacement) under the seed.
pub fn delete_random(example: &TokenizedExample, k: f64, seed: u64) -> TokenizedExample {
    let m = deletion_count(example.len(), k);
    let mut positions: Vec<usize> = (0..example.len()).collect();
    let mut rng = stream_rng(seed, "random-deletion");
    positions.shuffle(&mut rng);
    keep_positions(example, &positions[..m])
}

/// Full SRS protocol over a split at one k. The random baseline averages
/// one pass per seed in `random_seeds`.
pub fn srs(
    model: &Model,
    split: &DatasetSplit,
    k: f64,
    layer: LayerTag,
    random_seeds: &[u64],
) -> Result<SrsReport, EvalError> {
    if split.examples.is_empty() {
        return Err(EvalError::EmptySplit(split.name.clone()));
    }
    let n = split.examples.len();
    let mut correct_orig = 0usize;
    let mut correct_cap = 0usize;
    let mut correct_rand = vec![0usize; random_seeds.len()];
    for (idx, ex) in split.examples.iter().enumerate() {
        let trace = model.trace(&ex.token_ids)?;
        if crate::model::argmax(&trace.logits) == ex.label as usize {
            correct_orig += 1;
        }
        let ranking = rank_tokens_by_capacity(&trace, layer);
        let truncated = delete_topk(ex, &ranking, k);
        if model.predict(&truncated.token_ids)? == ex.label as usize {
            correct_cap += 1;
        }
        for (ri, &rs) in random_seeds.iter().enumerate() {
            let rand_ex = delete_random(ex, k, derive_seed(rs, &format!("example-{idx}")));
            if model.predict(&rand_ex.token_ids)? == ex.label as usize {
                correct_rand[ri] += 1;
            }
        }
    }
    let acc_original = correct_orig as f64 / n as f64;
    let acc_capacity = correct_cap as f64 / n as f64;
    let acc_random_per_seed: Vec<f64> = correct_rand
        .iter()
        .map(|&c| c as f64 / n as f64)
        .collect();
    let acc_random = if acc_random_per_seed.is_empty() {
        acc_original
    } else {
        acc_random_per_seed.iter().sum::<f64>() / acc_random_per_seed.len() as f64
    };
    Ok(SrsReport {
        k,
        acc_original,
        acc_random,
        acc_random_per_seed,
        acc_capacity,
        srs: (acc_original - acc_capacity) * 100.0,
        layer,
        n,
    })
}

pub fn default_random_seeds(base: u64) -> Vec<u64> {
    (0..5)
        .map(|i| derive_seed(base, &format!("deletion-draw-{i}")))
        .collect()
}

/// One SrsReport per k, ks ascending.
pub fn sensitivity_curve(
    model: &Model,
    split: &DatasetSplit,
    ks: &[f64],
    layer: LayerTag,
    random_seeds: &[u64],
) -> Result<Vec<SrsReport>, EvalError> {
    ks.iter()
        .map(|&k| srs(model, split, k, layer, random_seeds))
        .collect()
}

pub fn srs_tsv(reports: &[SrsReport]) -> String {
    let mut out = String::from(SrsReport::tsv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

/// FC1 capacity split by VMASK score. `per_type` averages scores and
/// capacities per vocabulary type before grouping; the default groups raw
/// token occurrences.
pub fn capacity_report(
    model: &Model,
    split: &DatasetSplit,
    important_fraction: f64,
    layer: LayerTag,
    per_type: bool,
) -> Result<CapacityReport, EvalError> {
    if split.examples.is_empty() {
        return Err(EvalError::EmptySplit(split.name.clone()));
    }
    if important_fraction <= 0.0 || important_fraction > 1.0 {
        return Err(EvalError::BadFraction(important_fraction));
    }
    let mut records: Vec<(String, f64, f64)> = Vec::new();
    for ex in &split.examples {
        let trace = model.trace(&ex.token_ids)?;
        let capacity = repr_metrics::capacity(trace.layer(layer))?;
        for i in 0..ex.len() {
            records.push((ex.tokens[i].clone(), trace.mask_probs[i], capacity[i]));
        }
    }
    if per_type {
        let mut by_type: std::collections::BTreeMap<String, (f64, f64, usize)> =
            std::collections::BTreeMap::new();
        for (tok, p, c) in records.drain(..) {
            let e = by_type.entry(tok).or_insert((0.0, 0.0, 0));
            e.0 += p;
            e.1 += c;
            e.2 += 1;
        }
        records = by_type
            .into_iter()
            .map(|(tok, (p, c, n))| (tok, p / n as f64, c / n as f64))
            .collect();
    }
    // sort by vmask score descending, ties by token for determinism
    records.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let n_imp = ((records.len() as f64 * important_fraction).round() as usize)
        .clamp(1, records.len());
    let mean = |rs: &[(String, f64, f64)]| -> f64 {
        rs.iter().map(|r| r.2).sum::<f64>() / rs.len().max(1) as f64
    };
    let mean_important = mean(&records[..n_imp]);
    let mean_rest = if n_imp < records.len() {
        mean(&records[n_imp..])
    } else {
        0.0
    };
    let mean_all = mean(&records);
    Ok(CapacityReport {
        mean_all,
        mean_important,
        mean_rest,
        important_fraction,
        records,
    })
}

/// One sweep cell's outcome; training failures are recorded, not fatal.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda_imp: f64,
    pub lambda_inter: f64,
    pub report: Result<SrsReport, String>,
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda_imp\tlambda_inter\tacc_s\tacc_r\tacc_k\tsrs\n");
    for row in rows {
        match &row.report {
            Ok(r) => out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                row.lambda_imp,
                row.lambda_inter,
                r.acc_original * 100.0,
                r.acc_random * 100.0,
                r.acc_capacity * 100.0,
                r.srs
            )),
            Err(e) => out.push_str(&format!(
                "{}\t{}\terror: {}\n",
                row.lambda_imp, row.lambda_inter, e
            )),
        }
    }
    out
}

/// Trains one model per (lambda_imp, lambda_inter) cell and evaluates the
/// SRS protocol at `k` on the test split. Cells run in grid order.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    grid: &[(f64, f64)],
    k: f64,
    layer: LayerTag,
) -> Vec<SweepRow> {
    grid.iter()
        .map(|&(lambda_imp, lambda_inter)| {
            let cell_train = TrainConfig {
                lambda_imp,
                lambda_inter,
                ..train_config.clone()
            };
            let report = run_cell(dataset, model_config, &cell_train, k, layer)
                .map_err(|e| e.to_string());
            SweepRow {
                lambda_imp,
                lambda_inter,
                report,
            }
        })
        .collect()
}

fn run_cell(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k: f64,
    layer: LayerTag,
) -> Result<SrsReport, SweepCellError> {
    let (model, _) = train(model_config.clone(), train_config, dataset)?;
    let seeds = default_random_seeds(train_config.seed);
    Ok(srs(&model, &dataset.test, k, layer, &seeds)?)
}

#[derive(Debug, Error)]
enum SweepCellError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Spearman rank correlation; used by the sensitivity-shape checks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vs.len()).collect();
        order.sort_by(|&a, &b| vs[a].partial_cmp(&vs[b]).unwrap());
        let mut ranks = vec![0.0; vs.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vs[order[j + 1]] == vs[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &o in &order[i..=j] {
                ranks[o] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub fn mean(values: &Array1<f64>) -> f64 {
    values.sum() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize) -> TokenizedExample {
        TokenizedExample {
            token_ids: (0..n as u32).map(|i| i + 2).collect(),
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            label: 0,
        }
    }

    #[test]
    fn deletion_count_rules() {
        assert_eq!(deletion_count(10, 30.0), 3);
        assert_eq!(deletion_count(10, 0.0), 0);
        assert_eq!(deletion_count(2, 30.0), 1); // max-with-1 rule
        assert_eq!(deletion_count(3, 100.0), 2); // never empty
        assert_eq!(deletion_count(1, 100.0), 0); // single survivor
    }

    #[test]
    fn delete_topk_preserves_order() {
        let e = ex(5);
        let ranking = vec![3, 1, 0, 2, 4];
        let out = delete_topk(&e, &ranking, 40.0); // m = 2: drop positions 3 and 1
        assert_eq!(out.tokens, vec!["t0", "t2", "t4"]);
        assert_eq!(out.token_ids, vec![2, 4, 6]);
    }

    #[test]
    fn delete_random_is_seeded_and_never_empty() {
        let e = ex(10);
        let a = delete_random(&e, 30.0, 42);
        let b = delete_random(&e, 30.0, 42);
        assert_eq!(a.token_ids, b.token_ids);
        assert_eq!(a.len(), 7);

        let all = delete_random(&ex(4), 100.0, 1);
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn k_zero_is_identity() {
        let e = ex(6);
        let out = delete_topk(&e, &[0, 1, 2, 3, 4, 5], 0.0);
        assert_eq!(out.token_ids, e.token_ids);
    }

    #[test]
    fn ranking_sorts_and_breaks_ties_by_position() {
        use crate::data::{build_vocab, RawExample};
        use crate::model::{Model, ModelConfig};
        let vocab = build_vocab(
            &[RawExample {
                label: 0,
                text: "a b c d".into(),
            }],
            1,
        );
        let mut c = ModelConfig::new(vocab.len(), 2, 8);
        c.embed_dim = 8;
        c.ff_dim = 16;
        c.heads = 2;
        c.dropout = 0.0;
        c.seed = 4;
        let model = Model::init(c, vocab).unwrap();
        let trace = model.trace(&[2, 3, 4]).unwrap();
        let ranking = rank_tokens_by_capacity(&trace, LayerTag::Fc1);
        let cap = repr_metrics::capacity(&trace.fc1_out).unwrap();
        for w in ranking.windows(2) {
            assert!(
                cap[w[0]] > cap[w[1]] || (cap[w[0]] == cap[w[1]] && w[0] < w[1]),
                "ranking violates (capacity desc, position asc)"
            );
        }

        // identical tokens without positional encoding tie exactly and
        // resolve to identity order
        let mut c2 = model.config.clone();
        c2.disable_pe = true;
        let flat = Model::init(c2, model.vocab.clone()).unwrap();
        let dup = flat.trace(&[2, 2, 2]).unwrap();
        let r = rank_tokens_by_capacity(&dup, LayerTag::Fc1);
        assert_eq!(r, vec![0, 1, 2]);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
    }
}
