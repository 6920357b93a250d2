//! Single-layer transformer classifier: embedding -> VMASK -> positional
//! encoding -> multi-head self-attention -> FFN (E -> 4E -> E) -> mean
//! pooling -> linear head, with every intermediate traced.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::data::{Vocab, PAD_ID};
use crate::repr_metrics::{LayerTag, RepresentationMatrix};
use crate::rng::stream_rng;
use crate::vmask;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAFRCK1\0";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Baseline models (plain transformer) run without the mask layer.
    pub use_vmask: bool,
    pub vmask_tau: f64,
    /// Coefficient for VMASK's own information term; 0 disables it.
    pub vmask_info_coeff: f64,
    /// Test-only: skip positional encoding to expose attention equivariance.
    pub disable_pe: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, classes: usize, max_len: usize) -> Self {
        ModelConfig {
            embed_dim: 256,
            ff_dim: 1024,
            heads: 4,
            classes,
            vocab_size,
            max_len,
            dropout: 0.1,
            seed: 0,
            use_vmask: true,
            vmask_tau: 0.5,
            vmask_info_coeff: 0.0,
            disable_pe: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.ff_dim == 0 || self.heads == 0 || self.classes == 0 {
            return Err(ModelError::BadConfig("all dimensions must be >= 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {t} exceeds max_len {max_len}")]
    TooLong { t: usize, max_len: usize },
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint is corrupt: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint tensor {name} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: (usize, usize),
        want: (usize, usize),
    },
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Array2<f64>)>,
}

impl Params {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn tensor(&self, idx: usize) -> &Array2<f64> {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.entries[idx].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.entries[self.index_of(name).unwrap_or_else(|| panic!("no param {name}"))].1
    }
}

/// Indices of every named intermediate of one forward pass.
pub struct TraceVars {
    pub embedding: Var,
    pub mask_probs: Var,
    pub vmask_out: Var,
    pub x: Var,
    pub attn_weights: Vec<Var>,
    pub attn_out: Var,
    pub fc1_out: Var,
    pub fc2_out: Var,
    pub pooled: Var,
    pub logits: Var,
}

/// Concrete values of one forward pass, ready for metric analysis.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub embedding: RepresentationMatrix,
    pub vmask_out: RepresentationMatrix,
    pub mask_probs: Array1<f64>,
    pub x: Array2<f64>,
    pub attn_weights: Vec<Array2<f64>>,
    pub attn_out: RepresentationMatrix,
    pub fc1_out: RepresentationMatrix,
    pub fc2_out: RepresentationMatrix,
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

impl ForwardTrace {
    pub fn layer(&self, tag: LayerTag) -> &RepresentationMatrix {
        match tag {
            LayerTag::Embedding => &self.embedding,
            LayerTag::Vmask => &self.vmask_out,
            LayerTag::AttentionOut => &self.attn_out,
            LayerTag::Fc1 => &self.fc1_out,
            LayerTag::Fc2 => &self.fc2_out,
        }
    }
}

pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

/// Model parameters plus everything needed to persist and reload them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Params,
    pub epoch: u32,
    pub dev_acc: f64,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen::<f64>().clamp(1e-12, 1.0);
        let u2: f64 = rng.gen();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

impl Model {
    /// Fresh parameters under the config seed. The pad embedding row is
    /// frozen at zero.
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<Model, ModelError> {
        config.validate()?;
        let e = config.embed_dim;
        let dk = config.head_dim();
        let mut emb_rng = stream_rng(config.seed, "init-embedding");
        let mut w_rng = stream_rng(config.seed, "init-weights");

        let mut embedding = normal(&mut emb_rng, config.vocab_size, e, 1.0 / (e as f64).sqrt());
        embedding.row_mut(PAD_ID as usize).fill(0.0);

        let mut entries = vec![
            ("embedding".to_string(), embedding),
            ("vmask.w".to_string(), Array2::zeros((e, 1))),
            ("vmask.b".to_string(), Array2::zeros((1, 1))),
        ];
        for a in 0..config.heads {
            entries.push((format!("attn.q.{a}"), xavier(&mut w_rng, e, dk)));
            entries.push((format!("attn.k.{a}"), xavier(&mut w_rng, e, dk)));
            entries.push((format!("attn.v.{a}"), xavier(&mut w_rng, e, dk)));
        }
        entries.push(("attn.out.w".to_string(), xavier(&mut w_rng, e, e)));
        entries.push(("attn.out.b".to_string(), Array2::zeros((1, e))));
        entries.push(("ln1.g".to_string(), Array2::ones((1, e))));
        entries.push(("ln1.b".to_string(), Array2::zeros((1, e))));
        entries.push(("fc1.w".to_string(), xavier(&mut w_rng, e, config.ff_dim)));
        entries.push(("fc1.b".to_string(), Array2::zeros((1, config.ff_dim))));
        entries.push(("fc2.w".to_string(), xavier(&mut w_rng, config.ff_dim, e)));
        entries.push(("fc2.b".to_string(), Array2::zeros((1, e))));
        entries.push(("ln2.g".to_string(), Array2::ones((1, e))));
        entries.push(("ln2.b".to_string(), Array2::zeros((1, e))));
        entries.push(("cls.w".to_string(), xavier(&mut w_rng, e, config.classes)));
        entries.push(("cls.b".to_string(), Array2::zeros((1, config.classes))));

        Ok(Model {
            config,
            vocab,
            params: Params { entries },
            epoch: 0,
            dev_acc: 0.0,
        })
    }

    /// Leafs every parameter onto the graph, aligned with `params` indices.
    /// One batch shares these leaves so gradients accumulate across examples.
    pub fn leaf_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect()
    }

    fn pe_table(&self, t: usize) -> Array2<f64> {
        let e = self.config.embed_dim;
        let mut pe = Array2::zeros((t, e));
        for pos in 0..t {
            for i in 0..e / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / e as f64);
                pe[[pos, 2 * i]] = (pos as f64 * freq).sin();
                pe[[pos, 2 * i + 1]] = (pos as f64 * freq).cos();
            }
        }
        pe
    }

    fn validate_ids(&self, ids: &[u32]) -> Result<Vec<usize>, ModelError> {
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                t: ids.len(),
                max_len: self.config.max_len,
            });
        }
        ids.iter()
            .map(|&id| {
                if (id as usize) < self.config.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(ModelError::TokenOutOfRange {
                        id,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Builds the forward computation for one example on `g`. `pvars` must
    /// come from `leaf_params` on the same graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        pvars: &[Var],
        ids: &[u32],
        mode: &mut ForwardMode,
    ) -> Result<TraceVars, ModelError> {
        let ids = self.validate_ids(ids)?;
        let t = ids.len();
        let p = |name: &str| pvars[self.params.index_of(name).unwrap()];

        let embedding = g.gather_rows(p("embedding"), &ids);

        // VMASK gate; baselines pass the embedding through untouched.
        let (mask_probs, vmask_out) = if self.config.use_vmask {
            let probs = vmask::mask_probs(g, embedding, p("vmask.w"), p("vmask.b"));
            let z = match mode {
                ForwardMode::Eval => probs,
                ForwardMode::Train { rng } => {
                    vmask::sample_mask(g, probs, self.config.vmask_tau, rng)
                }
            };
            (probs, vmask::apply_mask(g, embedding, z))
        } else {
            let ones = g.leaf(Array2::ones((t, 1)));
            (ones, embedding)
        };

        let x = if self.config.disable_pe {
            vmask_out
        } else {
            let pe = g.leaf(self.pe_table(t));
            g.add(vmask_out, pe)
        };

        // multi-head self-attention
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut attn_weights = Vec::with_capacity(self.config.heads);
        let mut heads = Vec::with_capacity(self.config.heads);
        for a in 0..self.config.heads {
            let q = g.matmul(x, p(&format!("attn.q.{a}")));
            let k = g.matmul(x, p(&format!("attn.k.{a}")));
            let v = g.matmul(x, p(&format!("attn.v.{a}")));
            let scores = g.matmul_nt(q, k);
            let scaled = g.scalar_mul(scores, scale);
            let weights = g.softmax_rows(scaled);
            attn_weights.push(weights);
            let used = self.maybe_dropout(g, weights, mode);
            heads.push(g.matmul(used, v));
        }
        let cat = g.concat_cols(&heads);
        let proj = g.matmul(cat, p("attn.out.w"));
        let proj = g.add_row(proj, p("attn.out.b"));
        let res1 = g.add(x, proj);
        let ln1 = g.layer_norm_rows(res1, LN_EPS);
        let ln1 = g.mul_row(ln1, p("ln1.g"));
        let attn_out = g.add_row(ln1, p("ln1.b"));

        // FFN: expand by four, ReLU, contract back
        let fc1_lin = g.matmul(attn_out, p("fc1.w"));
        let fc1_lin = g.add_row(fc1_lin, p("fc1.b"));
        let fc1_out = g.relu(fc1_lin);
        let fc2_lin = g.matmul(fc1_out, p("fc2.w"));
        let fc2_lin = g.add_row(fc2_lin, p("fc2.b"));
        let fc2_lin = self.maybe_dropout(g, fc2_lin, mode);
        let res2 = g.add(attn_out, fc2_lin);
        let ln2 = g.layer_norm_rows(res2, LN_EPS);
        let ln2 = g.mul_row(ln2, p("ln2.g"));
        let fc2_out = g.add_row(ln2, p("ln2.b"));

        let pooled = g.mean_rows(fc2_out);
        let logits = g.matmul(pooled, p("cls.w"));
        let logits = g.add_row(logits, p("cls.b"));

        Ok(TraceVars {
            embedding,
            mask_probs,
            vmask_out,
            x,
            attn_weights,
            attn_out,
            fc1_out,
            fc2_out,
            pooled,
            logits,
        })
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, mode: &mut ForwardMode) -> Var {
        let p = self.config.dropout;
        match mode {
            ForwardMode::Train { rng } if p > 0.0 => {
                let keep = 1.0 - p;
                let shape = g.value(x).raw_dim();
                let mask = Array2::from_shape_fn(shape, |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                g.dropout(x, mask)
            }
            _ => x,
        }
    }

    /// Convenience: eval-mode forward returning concrete trace values.
    pub fn trace(&self, ids: &[u32]) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::new();
        let pvars = self.leaf_params(&mut g);
        let tv = self.forward(&mut g, &pvars, ids, &mut ForwardMode::Eval)?;
        Ok(self.extract_trace(&g, &tv))
    }

    pub fn extract_trace(&self, g: &Graph, tv: &TraceVars) -> ForwardTrace {
        let mat = |tag, v: Var| RepresentationMatrix::new(tag, g.value(v).clone());
        ForwardTrace {
            embedding: mat(LayerTag::Embedding, tv.embedding),
            vmask_out: mat(LayerTag::Vmask, tv.vmask_out),
            mask_probs: g.value(tv.mask_probs).column(0).to_owned(),
            x: g.value(tv.x).clone(),
            attn_weights: tv.attn_weights.iter().map(|&v| g.value(v).clone()).collect(),
            attn_out: mat(LayerTag::AttentionOut, tv.attn_out),
            fc1_out: mat(LayerTag::Fc1, tv.fc1_out),
            fc2_out: mat(LayerTag::Fc2, tv.fc2_out),
            pooled: g.value(tv.pooled).row(0).to_owned(),
            logits: g.value(tv.logits).row(0).to_owned(),
        }
    }

    pub fn predict(&self, ids: &[u32]) -> Result<usize, ModelError> {
        let trace = self.trace(ids)?;
        Ok(argmax(&trace.logits))
    }

    // --- checkpoint io ----------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |source: std::io::Error| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        let c = &self.config;
        let header = format!(
            "embed_dim={}\nff_dim={}\nheads={}\nclasses={}\nvocab_size={}\nmax_len={}\ndropout={}\nseed={}\nuse_vmask={}\nvmask_tau={}\nvmask_info_coeff={}\ndisable_pe={}\nepoch={}\ndev_acc={:.6}\nvocab_hash={:016x}\nvocab={}\ntensors={}\n",
            c.embed_dim,
            c.ff_dim,
            c.heads,
            c.classes,
            c.vocab_size,
            c.max_len,
            c.dropout,
            c.seed,
            c.use_vmask,
            c.vmask_tau,
            c.vmask_info_coeff,
            c.disable_pe,
            self.epoch,
            self.dev_acc,
            self.vocab.hash(),
            self.vocab.id_to_token.join(" "),
            self.params.len(),
        );
        w.write_all(header.as_bytes()).map_err(io_err)?;
        for (name, tensor) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_all(&(tensor.nrows() as u32).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(&(tensor.ncols() as u32).to_le_bytes())
                .map_err(io_err)?;
            for &v in tensor.iter() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint("wrong magic bytes".into()));
        }
        let mut pos = 8;
        let mut fields = std::collections::HashMap::new();
        let tensors_declared;
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ModelError::BadCheckpoint("unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| ModelError::BadCheckpoint("non-utf8 header".into()))?;
            pos += nl + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::BadCheckpoint(format!("bad header line: {line}")))?;
            if k == "tensors" {
                tensors_declared = v
                    .parse()
                    .map_err(|_| ModelError::BadCheckpoint("bad tensor count".into()))?;
                break;
            }
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing header field {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::BadCheckpoint(format!("bad field {k}")))
        };
        let parse_f64 = |k: &str| -> Result<f64, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::BadCheckpoint(format!("bad field {k}")))
        };
        let config = ModelConfig {
            embed_dim: parse_usize("embed_dim")?,
            ff_dim: parse_usize("ff_dim")?,
            heads: parse_usize("heads")?,
            classes: parse_usize("classes")?,
            vocab_size: parse_usize("vocab_size")?,
            max_len: parse_usize("max_len")?,
            dropout: parse_f64("dropout")?,
            seed: parse_usize("seed")? as u64,
            use_vmask: get("use_vmask")? == "true",
            vmask_tau: parse_f64("vmask_tau")?,
            vmask_info_coeff: parse_f64("vmask_info_coeff")?,
            disable_pe: get("disable_pe")? == "true",
        };
        config.validate()?;
        let epoch = parse_usize("epoch")? as u32;
        let dev_acc = parse_f64("dev_acc")?;
        let id_to_token: Vec<String> = get("vocab")?
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        if id_to_token.len() != config.vocab_size {
            return Err(ModelError::BadCheckpoint(format!(
                "vocab has {} tokens, config says {}",
                id_to_token.len(),
                config.vocab_size
            )));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let vocab = Vocab {
            token_to_id,
            id_to_token,
            min_freq: 0,
        };

        let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32, ModelError> {
            if *pos + 4 > bytes.len() {
                return Err(ModelError::BadCheckpoint("truncated tensor data".into()));
            }
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            Ok(v)
        };
        let mut entries = Vec::with_capacity(tensors_declared);
        for _ in 0..tensors_declared {
            let name_len = read_u32(&bytes, &mut pos)? as usize;
            if pos + name_len > bytes.len() {
                return Err(ModelError::BadCheckpoint("truncated tensor name".into()));
            }
            let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
                .map_err(|_| ModelError::BadCheckpoint("non-utf8 tensor name".into()))?;
            pos += name_len;
            let rows = read_u32(&bytes, &mut pos)? as usize;
            let cols = read_u32(&bytes, &mut pos)? as usize;
            let count = rows * cols;
            if pos + count * 4 > bytes.len() {
                return Err(ModelError::BadCheckpoint("truncated tensor data".into()));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64);
                pos += 4;
            }
            let tensor = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
            entries.push((name, tensor));
        }
        let model = Model {
            config,
            vocab,
            params: Params { entries },
            epoch,
            dev_acc,
        };
        model.validate_shapes()?;
        Ok(model)
    }

    fn validate_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let e = c.embed_dim;
        let dk = c.head_dim();
        let mut expected: Vec<(String, (usize, usize))> = vec![
            ("embedding".into(), (c.vocab_size, e)),
            ("vmask.w".into(), (e, 1)),
            ("vmask.b".into(), (1, 1)),
        ];
        for a in 0..c.heads {
            expected.push((format!("attn.q.{a}"), (e, dk)));
            expected.push((format!("attn.k.{a}"), (e, dk)));
            expected.push((format!("attn.v.{a}"), (e, dk)));
        }
        expected.extend([
            ("attn.out.w".to_string(), (e, e)),
            ("attn.out.b".to_string(), (1, e)),
            ("ln1.g".to_string(), (1, e)),
            ("ln1.b".to_string(), (1, e)),
            ("fc1.w".to_string(), (e, c.ff_dim)),
            ("fc1.b".to_string(), (1, c.ff_dim)),
            ("fc2.w".to_string(), (c.ff_dim, e)),
            ("fc2.b".to_string(), (1, e)),
            ("ln2.g".to_string(), (1, e)),
            ("ln2.b".to_string(), (1, e)),
            ("cls.w".to_string(), (e, c.classes)),
            ("cls.b".to_string(), (1, c.classes)),
        ]);
        for (name, want) in expected {
            let idx = self
                .params
                .index_of(&name)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing tensor {name}")))?;
            let got = self.params.tensor(idx).dim();
            if got != want {
                return Err(ModelError::ShapeMismatch { name, got, want });
            }
        }
        Ok(())
    }
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use crate::data::RawExample;

    fn tiny_vocab() -> Vocab {
        build_vocab(
            &[RawExample {
                label: 0,
                text: "alpha beta gamma delta epsilon".into(),
            }],
            1,
        )
    }

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::new(vocab_size, 2, 16);
        c.embed_dim = 8;
        c.ff_dim = 32;
        c.heads = 2;
        c.dropout = 0.0;
        c.seed = 11;
        c
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let vocab = tiny_vocab();
        let model = Model::init(tiny_config(vocab.len()), vocab).unwrap();
        let ids = [2u32, 3, 4];
        let t1 = model.trace(&ids).unwrap();
        let t2 = model.trace(&ids).unwrap();
        assert_eq!(t1.fc1_out.data.dim(), (3, 32));
        assert_eq!(t1.fc2_out.data.dim(), (3, 8));
        assert_eq!(t1.logits.len(), 2);
        assert_eq!(t1.attn_weights.len(), 2);
        assert_eq!(t1.logits, t2.logits);
        assert_eq!(t1.vmask_out.data, t2.vmask_out.data);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let vocab = tiny_vocab();
        let model = Model::init(tiny_config(vocab.len()), vocab).unwrap();
        let trace = model.trace(&[2, 3, 4, 5]).unwrap();
        for a in &trace.attn_weights {
            assert_eq!(a.dim(), (4, 4));
            for row in a.rows() {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let vocab = tiny_vocab();
        let model = Model::init(tiny_config(vocab.len()), vocab).unwrap();
        let trace = model.trace(&[2]).unwrap();
        for a in &trace.attn_weights {
            assert_eq!(a.dim(), (1, 1));
            assert!((a[[0, 0]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_embedding_row_is_zero_and_ids_validated() {
        let vocab = tiny_vocab();
        let model = Model::init(tiny_config(vocab.len()), vocab).unwrap();
        assert!(model
            .params
            .get("embedding")
            .row(PAD_ID as usize)
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            model.trace(&[999]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        let long: Vec<u32> = vec![2; 17];
        assert!(matches!(
            model.trace(&long),
            Err(ModelError::TooLong { .. })
        ));
    }

    #[test]
    fn positional_encoding_at_origin() {
        let vocab = tiny_vocab();
        let model = Model::init(tiny_config(vocab.len()), vocab).unwrap();
        let pe = model.pe_table(3);
        // position 0: sin components 0, cos components 1
        for i in 0..model.config.embed_dim / 2 {
            assert_eq!(pe[[0, 2 * i]], 0.0);
            assert_eq!(pe[[0, 2 * i + 1]], 1.0);
        }
    }

    #[test]
    fn permutation_equivariance_without_pe() {
        let vocab = tiny_vocab();
        let mut config = tiny_config(vocab.len());
        config.disable_pe = true;
        let model = Model::init(config, vocab).unwrap();
        let t1 = model.trace(&[2, 3, 4]).unwrap();
        let t2 = model.trace(&[4, 2, 3]).unwrap();
        // rows permute with the tokens
        let perm = [1usize, 2, 0]; // position of t1's rows inside t2
        for (i, &pi) in perm.iter().enumerate() {
            let a = t1.fc1_out.data.row(i);
            let b = t2.fc1_out.data.row(pi);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let vocab = tiny_vocab();
        let model = Model::init(tiny_config(vocab.len()), vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ck");
        let p2 = dir.path().join("b.ck");
        model.save(&p1).unwrap();
        let loaded = Model::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab.id_to_token, model.vocab.id_to_token);
    }

    #[test]
    fn bad_heads_rejected() {
        let vocab = tiny_vocab();
        let mut c = tiny_config(vocab.len());
        c.heads = 3; // does not divide 8
        assert!(Model::init(c, vocab).is_err());
    }

    #[test]
    fn baseline_has_unit_mask() {
        let vocab = tiny_vocab();
        let mut c = tiny_config(vocab.len());
        c.use_vmask = false;
        let model = Model::init(c, vocab).unwrap();
        let trace = model.trace(&[2, 3]).unwrap();
        assert!(trace.mask_probs.iter().all(|&p| p == 1.0));
        assert_eq!(trace.vmask_out.data, trace.embedding.data);
    }
}
