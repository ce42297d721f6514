//! Softplus contrastive loss over in-batch negatives, with its analytic
//! gradient.
//!
//! For a batch of aligned (query, document) pairs the loss is
//!
//! ```text
//! L = (1/b) * sum_k log(1 + exp(max_{l != k} LI(q_k, d_l) - LI(q_k, d_k)))
//! ```
//!
//! The gradient is propagated through both maxima with a deterministic
//! subgradient: the per-query-token max routes to the first argmax
//! document token, and the max over negatives routes to the first maximal
//! negative document.

use super::{argmax_rows, late_interaction_score, MultiVectorEmbedding, RetrievalError, TrainingBatch};

/// Above this argument softplus(x) is numerically x; log1p(exp(x)) would
/// overflow exp first, and the truncation error is below 1e-13.
const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_THRESHOLD {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value plus the full b x b late-interaction score matrix
/// (`score_matrix[k][l] = LI(q_k, d_l)`).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub score_matrix: Vec<Vec<f64>>,
}

/// Per-embedding gradients, shaped exactly like the batch embeddings:
/// `queries[k]` is the gradient for query `k`'s row-major data, and
/// likewise for `documents[k]`.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub queries: Vec<Vec<f64>>,
    pub documents: Vec<Vec<f64>>,
}

fn score_matrix(batch: &TrainingBatch) -> Result<Vec<Vec<f64>>, RetrievalError> {
    let b = batch.batch_size();
    let mut matrix = vec![vec![0.0; b]; b];
    for (k, q) in batch.queries().iter().enumerate() {
        for (l, d) in batch.documents().iter().enumerate() {
            matrix[k][l] = late_interaction_score(q, d)?;
        }
    }
    Ok(matrix)
}

/// First maximal in-batch negative for row `k` of the score matrix.
fn hardest_negative(row: &[f64], k: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (l, &v) in row.iter().enumerate() {
        if l != k && v > best_val {
            best_val = v;
            best = l;
        }
    }
    best
}

/// Evaluate the softplus contrastive loss over a batch.
///
/// The loss is strictly positive for every valid batch; a saturated batch
/// (positive far above every negative) approaches zero from above.
pub fn softplus_contrastive_loss(batch: &TrainingBatch) -> Result<LossOutput, RetrievalError> {
    let matrix = score_matrix(batch)?;
    let b = batch.batch_size();
    let mut total = 0.0;
    for k in 0..b {
        let l_star = hardest_negative(&matrix[k], k);
        total += softplus(matrix[k][l_star] - matrix[k][k]);
    }
    Ok(LossOutput {
        loss: total / b as f64,
        score_matrix: matrix,
    })
}

/// Analytic gradient of [`softplus_contrastive_loss`] with respect to
/// every embedding entry in the batch.
pub fn contrastive_loss_gradient(batch: &TrainingBatch) -> Result<BatchGradients, RetrievalError> {
    let matrix = score_matrix(batch)?;
    let b = batch.batch_size();
    let dim = batch.queries()[0].dim();

    let mut grad_q: Vec<Vec<f64>> = batch
        .queries()
        .iter()
        .map(|e| vec![0.0; e.data().len()])
        .collect();
    let mut grad_d: Vec<Vec<f64>> = batch
        .documents()
        .iter()
        .map(|e| vec![0.0; e.data().len()])
        .collect();

    for k in 0..b {
        let query = &batch.queries()[k];
        let l_star = hardest_negative(&matrix[k], k);
        // d(loss)/d(margin_k), already averaged over the batch.
        let coeff = sigmoid(matrix[k][l_star] - matrix[k][k]) / b as f64;

        // + coeff through LI(q_k, d_{l*}), - coeff through LI(q_k, d_k).
        for (doc_idx, sign) in [(l_star, 1.0), (k, -1.0)] {
            let doc = &batch.documents()[doc_idx];
            let row_argmax = argmax_rows(query, doc);
            for (i, &j) in row_argmax.iter().enumerate() {
                let q_row = query.row(i);
                let d_row = doc.row(j);
                let g = sign * coeff;
                for c in 0..dim {
                    grad_q[k][i * dim + c] += g * d_row[c];
                    grad_d[doc_idx][j * dim + c] += g * q_row[c];
                }
            }
        }
    }

    Ok(BatchGradients {
        queries: grad_q,
        documents: grad_d,
    })
}

/// Detect near-ties in either maximum of the loss: per-token argmax inner
/// products, or the max over in-batch negatives. At such points the loss
/// is non-differentiable and the subgradient choice is arbitrary, so
/// finite-difference checks must skip these batches.
pub fn has_tied_argmax(batch: &TrainingBatch, tolerance: f64) -> Result<bool, RetrievalError> {
    let matrix = score_matrix(batch)?;
    let b = batch.batch_size();
    for k in 0..b {
        // Top-2 gap among the negatives.
        let mut negs: Vec<f64> = (0..b).filter(|&l| l != k).map(|l| matrix[k][l]).collect();
        negs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if negs.len() >= 2 && (negs[0] - negs[1]).abs() < tolerance {
            return Ok(true);
        }
        // Top-2 gap of inner products behind each LI cell in row k.
        let query = &batch.queries()[k];
        for doc in batch.documents() {
            for q_row in query.rows() {
                let mut products: Vec<f64> = doc
                    .rows()
                    .map(|d_row| q_row.iter().zip(d_row).map(|(a, b)| a * b).sum())
                    .collect();
                products.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if products.len() >= 2 && (products[0] - products[1]).abs() < tolerance {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f64]]) -> MultiVectorEmbedding {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        MultiVectorEmbedding::from_rows(&rows, false).unwrap()
    }

    /// Single-token pairs engineered so that the score matrix is
    /// [[2, 1], [1, 2]].
    fn margin_one_batch() -> TrainingBatch {
        let q1 = emb(&[&[1.0, 0.0]]);
        let q2 = emb(&[&[0.0, 1.0]]);
        let d1 = emb(&[&[2.0, 1.0]]);
        let d2 = emb(&[&[1.0, 2.0]]);
        TrainingBatch::new(vec![q1, q2], vec![d1, d2]).unwrap()
    }

    #[test]
    fn loss_on_margin_one_matrix() {
        let out = softplus_contrastive_loss(&margin_one_batch()).unwrap();
        assert_eq!(out.score_matrix, vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12, "loss {}", out.loss);
        assert!((out.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn loss_on_equal_scores_is_ln2() {
        let q = emb(&[&[1.0, 0.0]]);
        let d = emb(&[&[1.0, 0.0]]);
        let batch = TrainingBatch::new(vec![q.clone(), q.clone()], vec![d.clone(), d]).unwrap();
        let out = softplus_contrastive_loss(&batch).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    /// Positive beats the best negative by 40 on both rows.
    fn saturated_batch() -> TrainingBatch {
        let q1 = emb(&[&[1.0, 0.0]]);
        let q2 = emb(&[&[0.0, 1.0]]);
        let d1 = emb(&[&[41.0, 1.0]]);
        let d2 = emb(&[&[1.0, 41.0]]);
        TrainingBatch::new(vec![q1, q2], vec![d1, d2]).unwrap()
    }

    #[test]
    fn loss_saturates_toward_zero() {
        let out = softplus_contrastive_loss(&saturated_batch()).unwrap();
        assert!(out.loss > 0.0);
        assert!(out.loss < 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn softplus_linear_region_error_bound() {
        // Crossing the guard threshold must be seamless.
        for &x in &[29.999, 30.0, 30.001, 45.0] {
            let exact = x + (-x as f64).exp().ln_1p();
            assert!((softplus(x) - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_vanishes_when_saturated() {
        let grads = contrastive_loss_gradient(&saturated_batch()).unwrap();
        for g in grads.queries.iter().chain(grads.documents.iter()).flatten() {
            assert!(g.abs() < 1e-12, "entry {g}");
        }
    }

    #[test]
    fn duplicate_batch_query_gradients_match_and_doc_gradients_cancel() {
        // All queries identical and all documents identical: the margin is
        // zero everywhere, so query gradients are exactly zero (the same
        // document rows are added and subtracted), and document gradients
        // cancel across the batch.
        let q = emb(&[&[0.3, 0.4], &[0.1, 0.9]]);
        let d = emb(&[&[0.5, 0.2]]);
        let batch = TrainingBatch::new(
            vec![q.clone(), q.clone(), q.clone()],
            vec![d.clone(), d.clone(), d],
        )
        .unwrap();
        let grads = contrastive_loss_gradient(&batch).unwrap();
        for k in 1..3 {
            assert_eq!(grads.queries[0], grads.queries[k]);
        }
        for g in grads.queries.iter().flatten() {
            assert_eq!(*g, 0.0);
        }
        let mut sum = vec![0.0; grads.documents[0].len()];
        for doc_grad in &grads.documents {
            for (s, g) in sum.iter_mut().zip(doc_grad) {
                *s += g;
            }
        }
        for s in sum {
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn tied_argmax_detection() {
        let q = emb(&[&[1.0, 0.0]]);
        let d_tied = emb(&[&[0.5, 0.0], &[0.5, 1.0]]);
        let d_clear = emb(&[&[0.9, 0.0], &[0.1, 1.0]]);
        let tied = TrainingBatch::new(vec![q.clone(), q.clone()], vec![d_tied, d_clear.clone()])
            .unwrap();
        assert!(has_tied_argmax(&tied, 1e-7).unwrap());
        let d_other = emb(&[&[0.4, 0.0], &[0.2, 1.0]]);
        let clear = TrainingBatch::new(vec![q.clone(), q], vec![d_clear, d_other]).unwrap();
        assert!(!has_tied_argmax(&clear, 1e-7).unwrap());
    }
}
