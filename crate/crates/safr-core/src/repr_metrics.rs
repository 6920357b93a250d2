//! Interference, polysemanticity, and capacity over a layer's token
//! representations. Pure and stateless; everything runs in f64.

use ndarray::{Array1, Array2};
use thiserror::Error;

/// Rows with an L2 norm below this are treated as zero vectors: capacity and
/// polysemanticity 0, unit normalization skipped.
pub const EPS_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerTag {
    Embedding,
    Vmask,
    AttentionOut,
    Fc1,
    Fc2,
}

impl LayerTag {
    pub fn parse(s: &str) -> Option<LayerTag> {
        match s {
            "embedding" => Some(LayerTag::Embedding),
            "vmask" => Some(LayerTag::Vmask),
            "attention_out" | "attention" => Some(LayerTag::AttentionOut),
            "fc1" => Some(LayerTag::Fc1),
            "fc2" => Some(LayerTag::Fc2),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerTag::Embedding => "embedding",
            LayerTag::Vmask => "vmask",
            LayerTag::AttentionOut => "attention_out",
            LayerTag::Fc1 => "fc1",
            LayerTag::Fc2 => "fc2",
        }
    }
}

/// Per-layer token representations; rows past `valid_len` are padding and are
/// sliced off before any metric sees them.
#[derive(Debug, Clone)]
pub struct RepresentationMatrix {
    pub layer: LayerTag,
    pub data: Array2<f64>,
    pub valid_len: usize,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("representation matrix has no valid rows")]
    Empty,
    #[error("valid_len {valid_len} exceeds row count {rows}")]
    BadValidLen { valid_len: usize, rows: usize },
}

impl RepresentationMatrix {
    pub fn new(layer: LayerTag, data: Array2<f64>) -> Self {
        let valid_len = data.nrows();
        RepresentationMatrix {
            layer,
            data,
            valid_len,
        }
    }

    pub fn with_valid_len(
        layer: LayerTag,
        data: Array2<f64>,
        valid_len: usize,
    ) -> Result<Self, MetricsError> {
        if valid_len == 0 {
            return Err(MetricsError::Empty);
        }
        if valid_len > data.nrows() {
            return Err(MetricsError::BadValidLen {
                valid_len,
                rows: data.nrows(),
            });
        }
        Ok(RepresentationMatrix {
            layer,
            data,
            valid_len,
        })
    }

    fn valid(&self) -> ndarray::ArrayView2<'_, f64> {
        self.data.slice(ndarray::s![..self.valid_len, ..])
    }
}

/// All three metrics of one layer, plus the normalized interference used by
/// the visualizers.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub interference: Array2<f64>,
    pub polysemanticity: Array1<f64>,
    pub capacity: Array1<f64>,
    pub capacity_sum: f64,
}

/// Gram matrix of the valid rows: out[i][j] = h_i . h_j. Each unordered pair
/// is computed once so symmetry holds bit-exactly.
pub fn interference_matrix(h: &RepresentationMatrix) -> Result<Array2<f64>, MetricsError> {
    if h.valid_len == 0 {
        return Err(MetricsError::Empty);
    }
    let v = h.valid();
    let t = v.nrows();
    let mut out = Array2::zeros((t, t));
    for i in 0..t {
        for j in i..t {
            let d = v.row(i).dot(&v.row(j));
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(out)
}

fn row_norms(gram: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter((0..gram.nrows()).map(|i| gram[[i, i]].max(0.0).sqrt()))
}

/// P_i = sum over j != i of (h_i_hat . h_j)^2; zero-norm rows report 0.
pub fn polysemanticity(h: &RepresentationMatrix) -> Result<Array1<f64>, MetricsError> {
    let gram = interference_matrix(h)?;
    let norms = row_norms(&gram);
    let t = gram.nrows();
    let mut out = Array1::zeros(t);
    for i in 0..t {
        if norms[i] < EPS_NORM {
            continue;
        }
        let mut s = 0.0;
        for j in 0..t {
            if j != i {
                let proj = gram[[i, j]] / norms[i];
                s += proj * proj;
            }
        }
        out[i] = s;
    }
    Ok(out)
}

/// C_i = (h_i . h_i)^2 / sum_j (h_i . h_j)^2 with j = i included; zero-norm
/// rows report 0.
pub fn capacity(h: &RepresentationMatrix) -> Result<Array1<f64>, MetricsError> {
    let gram = interference_matrix(h)?;
    let norms = row_norms(&gram);
    let t = gram.nrows();
    let mut out = Array1::zeros(t);
    for i in 0..t {
        if norms[i] < EPS_NORM {
            continue;
        }
        let self_sq = gram[[i, i]] * gram[[i, i]];
        let denom: f64 = (0..t).map(|j| gram[[i, j]] * gram[[i, j]]).sum();
        out[i] = self_sq / denom;
    }
    Ok(out)
}

/// Cosine similarity between valid rows; zero-norm rows yield 0 everywhere,
/// including the diagonal.
pub fn cosine_matrix(h: &RepresentationMatrix) -> Result<Array2<f64>, MetricsError> {
    let gram = interference_matrix(h)?;
    let norms = row_norms(&gram);
    let t = gram.nrows();
    let mut out = Array2::zeros((t, t));
    for i in 0..t {
        for j in i..t {
            if norms[i] < EPS_NORM || norms[j] < EPS_NORM {
                continue;
            }
            let c = gram[[i, j]] / (norms[i] * norms[j]);
            out[[i, j]] = c;
            out[[j, i]] = c;
        }
    }
    Ok(out)
}

pub fn metrics_report(h: &RepresentationMatrix) -> Result<MetricsReport, MetricsError> {
    let interference = interference_matrix(h)?;
    let polysemanticity = polysemanticity(h)?;
    let capacity = capacity(h)?;
    let capacity_sum = capacity.sum();
    Ok(MetricsReport {
        interference,
        polysemanticity,
        capacity,
        capacity_sum,
    })
}
