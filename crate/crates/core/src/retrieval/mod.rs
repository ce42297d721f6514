//! Multi-vector late-interaction retrieval.
//!
//! A query or page image is represented as a matrix of token-level
//! embedding rows. Similarity is the late-interaction (MaxSim) score: for
//! each query token take the maximum inner product against all document
//! tokens, then sum over query tokens. This keeps token-level
//! expressiveness while allowing document embeddings to be precomputed
//! and indexed.

mod index;
mod loss;

pub use index::{build_index, load_index, retrieve_topk, save_index, PageIndex, PageRecord};
pub use loss::{contrastive_loss_gradient, softplus_contrastive_loss, BatchGradients, LossOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding dimension of the compact multi-vector space.
pub const DEFAULT_DIM: usize = 128;

/// Tolerance used when checking that rows of a normalized embedding have
/// unit L2 norm.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("dimension mismatch: query dim {query} vs document dim {doc}")]
    DimensionMismatch { query: usize, doc: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("duplicate page key ({doc_id}, {page_no})")]
    DuplicateKey { doc_id: String, page_no: u32 },
    #[error("index format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("index io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Token-level embedding matrix for one query or one page image.
///
/// `data` is row-major with `token_count` rows of `dim` entries each. The
/// `normalized` flag records whether every row has unit L2 norm; scoring
/// never normalizes internally, it always uses raw inner products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiVectorEmbedding {
    token_count: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl MultiVectorEmbedding {
    /// Build an embedding from row-major data, validating the invariants:
    /// at least one token, at least one dimension, every entry finite, and
    /// unit rows when `normalized` is set.
    pub fn new(
        token_count: usize,
        dim: usize,
        data: Vec<f64>,
        normalized: bool,
    ) -> Result<Self, RetrievalError> {
        if token_count == 0 {
            return Err(RetrievalError::InvalidEmbedding(
                "token_count must be >= 1".into(),
            ));
        }
        if dim == 0 {
            return Err(RetrievalError::InvalidEmbedding("dim must be >= 1".into()));
        }
        if data.len() != token_count * dim {
            return Err(RetrievalError::InvalidEmbedding(format!(
                "data length {} does not match {token_count} x {dim}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::InvalidEmbedding(format!(
                "non-finite entry at flat index {bad}"
            )));
        }
        let emb = Self {
            token_count,
            dim,
            data,
            normalized,
        };
        if normalized {
            for (i, row) in emb.rows().enumerate() {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(RetrievalError::InvalidEmbedding(format!(
                        "row {i} has L2 norm {norm}, expected 1.0 within {NORMALIZATION_TOLERANCE}"
                    )));
                }
            }
        }
        Ok(emb)
    }

    /// Build from per-token rows.
    pub fn from_rows(rows: &[Vec<f64>], normalized: bool) -> Result<Self, RetrievalError> {
        let token_count = rows.len();
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(RetrievalError::InvalidEmbedding(
                "rows have inconsistent lengths".into(),
            ));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(token_count, dim, data, normalized)
    }

    /// L2-normalize each row in place and return the embedding with the
    /// `normalized` flag set. Zero rows are left untouched and make the
    /// result invalid, so they are rejected.
    pub fn into_normalized(mut self) -> Result<Self, RetrievalError> {
        let dim = self.dim;
        for row in self.data.chunks_mut(dim) {
            let norm = l2_norm(row);
            if norm <= f64::EPSILON {
                return Err(RetrievalError::InvalidEmbedding(
                    "cannot normalize a zero row".into(),
                ));
            }
            for v in row {
                *v /= norm;
            }
        }
        self.normalized = true;
        Self::new(self.token_count, self.dim, self.data, true)
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Iterate over token rows.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Round every entry to f32 precision, as stored in the page index.
    pub(crate) fn quantize_f32(&self) -> Self {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        let mut emb = Self {
            token_count: self.token_count,
            dim: self.dim,
            data,
            normalized: false,
        };
        emb.normalized = emb.rows_are_unit();
        emb
    }

    pub(crate) fn rows_are_unit(&self) -> bool {
        self.rows()
            .all(|row| (l2_norm(row) - 1.0).abs() <= NORMALIZATION_TOLERANCE)
    }
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Late-interaction score: sum over query tokens of the maximum inner
/// product against any document token.
///
/// The score is exact in the document token order (max compares values)
/// and summed in query token order, so it is deterministic for fixed
/// inputs.
pub fn late_interaction_score(
    query: &MultiVectorEmbedding,
    doc: &MultiVectorEmbedding,
) -> Result<f64, RetrievalError> {
    if query.dim != doc.dim {
        return Err(RetrievalError::DimensionMismatch {
            query: query.dim,
            doc: doc.dim,
        });
    }
    Ok(query
        .rows()
        .map(|q| {
            doc.rows()
                .map(|d| dot(q, d))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum())
}

/// For each query token, the index of the first document token attaining
/// the maximum inner product. Ties resolve to the lowest index.
pub(crate) fn argmax_rows(query: &MultiVectorEmbedding, doc: &MultiVectorEmbedding) -> Vec<usize> {
    query
        .rows()
        .map(|q| {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, d) in doc.rows().enumerate() {
                let v = dot(q, d);
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A batch of aligned query/document embedding pairs. Document `k` is the
/// positive for query `k`; every other document in the batch serves as an
/// in-batch negative.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    queries: Vec<MultiVectorEmbedding>,
    documents: Vec<MultiVectorEmbedding>,
}

impl TrainingBatch {
    /// Requires at least two pairs (the max over in-batch negatives is
    /// undefined for a single pair) and a single shared dimension.
    pub fn new(
        queries: Vec<MultiVectorEmbedding>,
        documents: Vec<MultiVectorEmbedding>,
    ) -> Result<Self, RetrievalError> {
        if queries.len() != documents.len() {
            return Err(RetrievalError::InvalidBatch(format!(
                "{} queries vs {} documents",
                queries.len(),
                documents.len()
            )));
        }
        if queries.len() < 2 {
            return Err(RetrievalError::InvalidBatch(
                "batch size must be >= 2: a single pair has no in-batch negatives".into(),
            ));
        }
        let dim = queries[0].dim;
        if queries
            .iter()
            .chain(documents.iter())
            .any(|e| e.dim != dim)
        {
            return Err(RetrievalError::InvalidBatch(
                "all embeddings in a batch must share one dimension".into(),
            ));
        }
        Ok(Self { queries, documents })
    }

    pub fn batch_size(&self) -> usize {
        self.queries.len()
    }

    pub fn queries(&self) -> &[MultiVectorEmbedding] {
        &self.queries
    }

    pub fn documents(&self) -> &[MultiVectorEmbedding] {
        &self.documents
    }
}

/// Ranked result of a top-k retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub page_no: u32,
    pub score: f64,
    /// 1-based rank; consecutive within a result set.
    pub rank: u32,
}
