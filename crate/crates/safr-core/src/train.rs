//! Seeded training loop: minibatch Adam on the combined loss, dev-set model
//! selection with early stopping, and a finite-difference gradient checker.

use ndarray::Array2;
use thiserror::Error;

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::eval;
use crate::loss::{total_loss_vars, LossBreakdown};
use crate::model::{ForwardMode, Model, ModelConfig, ModelError};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_imp: f64,
    pub lambda_inter: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Early stop after this many dev evals without improvement.
    pub patience: usize,
    /// Dev evals every n optimizer steps; 0 means once per epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_imp: 0.1,
            lambda_inter: 0.1,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            patience: 3,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub dev_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<(usize, f64)>,
    pub best_epoch: u32,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(LossBreakdown::tsv_header());
        out.push('\n');
        for rec in &self.steps {
            out.push_str(&rec.loss.tsv_row(rec.step, rec.dev_acc));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}: component {component} = {value}")]
    NonFiniteLoss {
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error("dataset has an empty {0} split")]
    EmptySplit(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Array2<f64>> = model
            .params
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(m).and(grad).for_each(|m, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            });
            ndarray::Zip::from(v).and(grad).for_each(|v, &g| {
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            });
            let p = model.params.tensor_mut(i);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
                });
        }
    }
}

fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// Runs one batch: forward every example on a shared graph, one backward,
/// returns per-parameter gradients and the loss breakdown.
fn batch_step(
    model: &Model,
    ids_batch: &[&[u32]],
    labels: &[u32],
    train_cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Vec<Array2<f64>>, LossBreakdown), TrainError> {
    let mut g = Graph::new();
    let pvars = model.leaf_params(&mut g);
    let mut traces = Vec::with_capacity(ids_batch.len());
    for ids in ids_batch {
        let mut mode = ForwardMode::Train { rng };
        traces.push(model.forward(&mut g, &pvars, ids, &mut mode)?);
    }
    let loss = total_loss_vars(
        &mut g,
        &traces,
        labels,
        model.config.embed_dim,
        train_cfg.lambda_imp,
        train_cfg.lambda_inter,
        model.config.vmask_info_coeff,
    );
    let breakdown = loss.breakdown(&g, train_cfg.lambda_imp, train_cfg.lambda_inter);
    let grads_all = g.backward(loss.total);
    let grads = pvars
        .iter()
        .map(|&v| {
            grads_all[v]
                .clone()
                .unwrap_or_else(|| Array2::zeros(g.value(v).raw_dim()))
        })
        .collect();
    Ok((grads, breakdown))
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<(), TrainError> {
    for (component, value) in [
        ("cross_entropy", b.l_ce),
        ("importance", b.l_importance),
        ("interaction", b.l_interaction),
        ("total", b.total),
    ] {
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                component,
                value,
            });
        }
    }
    Ok(())
}

/// Full training run. Deterministic given (configs, dataset): fixed shuffle
/// per epoch, seeded mask/dropout noise, single-writer updates. Returns the
/// best-dev checkpoint and the step-by-step history.
pub fn train(
    model_config: ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(Model, TrainHistory), TrainError> {
    if dataset.train.examples.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if dataset.dev.examples.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    let mut model = Model::init(model_config, dataset.vocab.clone())?;
    let mut adam = Adam::new(&model);
    let mut history = TrainHistory::default();
    let mut best: Option<Model> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut evals_since_best = 0usize;
    let mut step = 0usize;
    let mut stop = false;

    'epochs: for epoch in 0..train_config.epochs {
        let batches = crate::data::make_batches(
            &dataset.train,
            train_config.batch_size,
            derive_seed(train_config.seed, &format!("epoch-{epoch}")),
        );
        for (bi, batch) in batches.iter().enumerate() {
            let mut rng = stream_rng(
                train_config.seed,
                &format!("train-noise-{epoch}-{bi}"),
            );
            let ids_batch: Vec<&[u32]> = batch
                .token_ids
                .iter()
                .zip(&batch.lengths)
                .map(|(row, &len)| &row[..len])
                .collect();
            let (mut grads, breakdown) =
                batch_step(&model, &ids_batch, &batch.labels, train_config, &mut rng)?;
            check_finite(&breakdown, step)?;
            clip_global_norm(&mut grads, train_config.grad_clip);
            adam.step(&mut model, &grads, train_config);
            step += 1;

            let eval_now = train_config.eval_every > 0 && step % train_config.eval_every == 0;
            let mut dev_acc = None;
            if eval_now {
                let acc = eval::accuracy(&model, &dataset.dev)
                    .map_err(|e| TrainError::InvalidInput(e.to_string()))?;
                dev_acc = Some(acc);
            }
            history.steps.push(StepRecord {
                step,
                loss: breakdown,
                dev_acc,
            });
            if let Some(acc) = dev_acc {
                history.evals.push((step, acc));
                if acc > best_acc {
                    best_acc = acc;
                    let mut snapshot = model.clone();
                    snapshot.epoch = epoch as u32;
                    snapshot.dev_acc = acc;
                    history.best_epoch = epoch as u32;
                    best = Some(snapshot);
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if evals_since_best >= train_config.patience {
                        stop = true;
                        break 'epochs;
                    }
                }
            }
        }
        if train_config.eval_every == 0 {
            let acc = eval::accuracy(&model, &dataset.dev)
                .map_err(|e| TrainError::InvalidInput(e.to_string()))?;
            history.evals.push((step, acc));
            if let Some(last) = history.steps.last_mut() {
                last.dev_acc = Some(acc);
            }
            if acc > best_acc {
                best_acc = acc;
                let mut snapshot = model.clone();
                snapshot.epoch = epoch as u32;
                snapshot.dev_acc = acc;
                history.best_epoch = epoch as u32;
                best = Some(snapshot);
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= train_config.patience {
                    stop = true;
                    break 'epochs;
                }
            }
        }
    }
    let _ = stop;
    let best = best.unwrap_or_else(|| {
        let mut m = model;
        m.dev_acc = best_acc.max(0.0);
        m
    });
    Ok((best, history))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

/// Deterministic loss of one example for the checker: train-mode mask noise
/// from a fixed stream, dropout expected off (config.dropout == 0).
fn fixed_noise_loss(
    model: &Model,
    ids: &[u32],
    label: u32,
    lambda_imp: f64,
    lambda_inter: f64,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let pvars = model.leaf_params(&mut g);
    let mut rng = stream_rng(model.config.seed, "grad-check-noise");
    let mut mode = ForwardMode::Train { rng: &mut rng };
    let trace = model.forward(&mut g, &pvars, ids, &mut mode)?;
    let loss = total_loss_vars(
        &mut g,
        &[trace],
        &[label],
        model.config.embed_dim,
        lambda_imp,
        lambda_inter,
        model.config.vmask_info_coeff,
    );
    Ok(g.scalar(loss.total))
}

/// Central finite differences over every parameter tensor against the
/// autograd gradients of the full combined loss. Large tensors are sampled
/// (at least 64 entries each).
pub fn grad_check(
    model: &Model,
    ids: &[u32],
    label: u32,
    step_size: f64,
    lambda_imp: f64,
    lambda_inter: f64,
) -> Result<GradCheckReport, TrainError> {
    if step_size <= 0.0 {
        return Err(TrainError::InvalidInput(
            "step_size must be positive".into(),
        ));
    }
    if model.config.dropout != 0.0 {
        return Err(TrainError::InvalidInput(
            "grad_check requires dropout = 0".into(),
        ));
    }

    // analytic gradients
    let mut g = Graph::new();
    let pvars = model.leaf_params(&mut g);
    let mut rng = stream_rng(model.config.seed, "grad-check-noise");
    let mut mode = ForwardMode::Train { rng: &mut rng };
    let trace = model.forward(&mut g, &pvars, ids, &mut mode)?;
    let loss = total_loss_vars(
        &mut g,
        &[trace],
        &[label],
        model.config.embed_dim,
        lambda_imp,
        lambda_inter,
        model.config.vmask_info_coeff,
    );
    let grads_all = g.backward(loss.total);

    let mut sample_rng = stream_rng(model.config.seed, "grad-check-sample");
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut entries_checked = 0usize;
    let mut scratch = model.clone();
    for idx in 0..model.params.len() {
        let name = model.params.name(idx).to_string();
        let shape = model.params.tensor(idx).dim();
        let count = shape.0 * shape.1;
        let analytic = grads_all[pvars[idx]]
            .clone()
            .unwrap_or_else(|| Array2::zeros(shape));
        let picks: Vec<usize> = if count <= 64 {
            (0..count).collect()
        } else {
            use rand::Rng;
            (0..64).map(|_| sample_rng.gen_range(0..count)).collect()
        };
        let mut param_max = 0.0f64;
        for flat in picks {
            let (i, j) = (flat / shape.1, flat % shape.1);
            let orig = model.params.tensor(idx)[[i, j]];
            scratch.params.tensor_mut(idx)[[i, j]] = orig + step_size;
            let plus = fixed_noise_loss(&scratch, ids, label, lambda_imp, lambda_inter)?;
            scratch.params.tensor_mut(idx)[[i, j]] = orig - step_size;
            let minus = fixed_noise_loss(&scratch, ids, label, lambda_imp, lambda_inter)?;
            scratch.params.tensor_mut(idx)[[i, j]] = orig;
            let numeric = (plus - minus) / (2.0 * step_size);
            let a = analytic[[i, j]];
            if a.abs() <= 1e-8 && numeric.abs() <= 1e-8 {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            param_max = param_max.max(rel);
            entries_checked += 1;
        }
        max_rel = max_rel.max(param_max);
        per_param.push((name, param_max));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_param,
        entries_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest, RawExample};

    fn toy_dataset() -> Dataset {
        let mut train = Vec::new();
        for i in 0..10 {
            let (label, text) = if i % 2 == 0 {
                (1, "great fine good movie")
            } else {
                (0, "awful bad poor movie")
            };
            train.push(RawExample {
                label,
                text: text.into(),
            });
        }
        ingest(&train, &train, &train, 2, 1, 16, 7)
    }

    fn tiny_model_config(ds: &Dataset, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::new(ds.vocab.len(), 2, ds.max_len);
        c.embed_dim = 8;
        c.ff_dim = 32;
        c.heads = 2;
        c.dropout = 0.0;
        c.seed = seed;
        c
    }

    fn tiny_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_toy_set() {
        let ds = toy_dataset();
        let (_, history) =
            train(tiny_model_config(&ds, 3), &tiny_train_config(3), &ds).unwrap();
        let first = history.steps.first().unwrap().loss.total;
        let last = history.steps.last().unwrap().loss.total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let ds = toy_dataset();
        let (m1, h1) = train(tiny_model_config(&ds, 5), &tiny_train_config(5), &ds).unwrap();
        let (m2, h2) = train(tiny_model_config(&ds, 5), &tiny_train_config(5), &ds).unwrap();
        for i in 0..m1.params.len() {
            assert_eq!(m1.params.tensor(i), m2.params.tensor(i));
        }
        assert_eq!(h1.to_tsv(), h2.to_tsv());

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ck");
        let p2 = dir.path().join("b.ck");
        m1.save(&p1).unwrap();
        m2.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn best_checkpoint_matches_history_max() {
        let ds = toy_dataset();
        let (best, history) =
            train(tiny_model_config(&ds, 9), &tiny_train_config(9), &ds).unwrap();
        let max_eval = history
            .evals
            .iter()
            .map(|&(_, a)| a)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.dev_acc, max_eval);
    }

    #[test]
    fn logged_total_recombines_from_components() {
        let ds = toy_dataset();
        let (_, history) =
            train(tiny_model_config(&ds, 1), &tiny_train_config(1), &ds).unwrap();
        for rec in &history.steps {
            let b = &rec.loss;
            let recombined =
                b.l_ce + b.lambda_imp * b.l_importance + b.lambda_inter * b.l_interaction;
            assert!((b.total - recombined).abs() <= 1e-6 * b.total.abs().max(1.0));
        }
    }

    #[test]
    fn grad_check_tiny_config() {
        let ds = toy_dataset();
        let model = Model::init(tiny_model_config(&ds, 2), ds.vocab.clone()).unwrap();
        let ids = [2u32, 3, 4, 5, 6];
        let report = grad_check(&model, &ids, 1, 1e-5, 0.1, 0.1).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
        assert!(report.entries_checked > 0);
    }

    #[test]
    fn grad_check_ce_only() {
        let ds = toy_dataset();
        let model = Model::init(tiny_model_config(&ds, 2), ds.vocab.clone()).unwrap();
        let report = grad_check(&model, &[2, 3, 4], 0, 1e-5, 0.0, 0.0).unwrap();
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        let ds = toy_dataset();
        let model = Model::init(tiny_model_config(&ds, 2), ds.vocab.clone()).unwrap();
        assert!(matches!(
            grad_check(&model, &[2, 3], 0, 0.0, 0.1, 0.1),
            Err(TrainError::InvalidInput(_))
        ));
    }
}
