//! Temperature-scaled contrastive losses with analytic query gradients.
//!
//! Both losses are a softmax cross-entropy over dot-product logits
//! `<v_i, k> / tau` against a per-query key set, averaged over the batch.
//! `pdl_loss` uses the shared prototype dictionary as the key set;
//! `info_nce_loss` uses one positive and a private list of negatives per
//! query.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{PdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `B x D`.
    pub grad_wrt_queries: Array2<f64>,
    /// `B x M`, rows sum to one.
    pub per_query_softmax: Array2<f64>,
}

/// Mean over rows of `-log softmax(logits_i)[positive_i]`, plus the softmax.
/// Logits are shifted by their row maximum before exponentiation.
pub(crate) fn softmax_cross_entropy(logits: &Array2<f64>, positives: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
        total += z.ln() - (logits[[i, positives[i]]] - max);
    }
    (if b == 0 { 0.0 } else { total / b as f64 }, probs)
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(PdlError::Argument(format!(
            "temperature must be finite and > 0, got {tau}"
        )));
    }
    Ok(())
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(PdlError::numeric(what, "non-finite input"));
    }
    Ok(())
}

/// Category-level contrastive loss against every prototype.
pub fn pdl_loss(
    queries: ArrayView2<'_, f64>,
    positive_rows: &[usize],
    prototypes: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    let (b, d) = queries.dim();
    let m = prototypes.nrows();
    if positive_rows.len() != b {
        return Err(PdlError::Argument(format!(
            "{} positive rows for {b} queries",
            positive_rows.len()
        )));
    }
    if prototypes.ncols() != d {
        return Err(PdlError::Argument(format!(
            "queries have dimension {d}, prototypes {}",
            prototypes.ncols()
        )));
    }
    if let Some(&bad) = positive_rows.iter().find(|&&r| r >= m) {
        return Err(PdlError::Argument(format!(
            "positive row {bad} out of range for {m} prototypes"
        )));
    }
    check_finite(queries.iter(), "pdl_loss")?;
    check_finite(prototypes.iter(), "pdl_loss")?;

    let logits = queries.dot(&prototypes.t()) / tau;
    let (loss, probs) = softmax_cross_entropy(&logits, positive_rows);
    let mut coeff = probs.clone();
    for (i, &p) in positive_rows.iter().enumerate() {
        coeff[[i, p]] -= 1.0;
    }
    let scale = if b == 0 { 0.0 } else { 1.0 / (b as f64 * tau) };
    let grad = coeff.dot(&prototypes) * scale;
    if !loss.is_finite() {
        return Err(PdlError::numeric("pdl_loss", "non-finite loss"));
    }
    Ok(LossOutput {
        loss,
        grad_wrt_queries: grad,
        per_query_softmax: probs,
    })
}

/// Instance-level InfoNCE: key 0 is the positive, keys `1..=K` the
/// negatives of that query.
pub fn info_nce_loss(
    queries: ArrayView2<'_, f64>,
    positives: ArrayView2<'_, f64>,
    negatives: ArrayView3<'_, f64>,
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    let (b, d) = queries.dim();
    let (nb, k, nd) = negatives.dim();
    if positives.dim() != (b, d) || nb != b || nd != d {
        return Err(PdlError::Argument("query/positive/negative shapes disagree".into()));
    }
    check_finite(queries.iter(), "info_nce_loss")?;
    check_finite(positives.iter(), "info_nce_loss")?;
    check_finite(negatives.iter(), "info_nce_loss")?;

    let dot = |i: usize, key: ndarray::ArrayView1<'_, f64>| -> f64 {
        queries.row(i).iter().zip(key).map(|(a, b)| a * b).sum()
    };
    let mut logits = Array2::zeros((b, k + 1));
    for i in 0..b {
        logits[[i, 0]] = dot(i, positives.row(i)) / tau;
        for j in 0..k {
            logits[[i, j + 1]] = dot(i, negatives.slice(ndarray::s![i, j, ..])) / tau;
        }
    }
    let (loss, probs) = softmax_cross_entropy(&logits, &vec![0; b]);
    let scale = if b == 0 { 0.0 } else { 1.0 / (b as f64 * tau) };
    let mut grad = Array2::zeros((b, d));
    for i in 0..b {
        let mut g = grad.row_mut(i);
        let c0 = probs[[i, 0]] - 1.0;
        g.iter_mut().zip(positives.row(i)).for_each(|(g, p)| *g += c0 * p);
        for j in 0..k {
            let c = probs[[i, j + 1]];
            g.iter_mut()
                .zip(negatives.slice(ndarray::s![i, j, ..]))
                .for_each(|(g, n)| *g += c * n);
        }
        g.iter_mut().for_each(|v| *v *= scale);
    }
    if !loss.is_finite() {
        return Err(PdlError::numeric("info_nce_loss", "non-finite loss"));
    }
    Ok(LossOutput {
        loss,
        grad_wrt_queries: grad,
        per_query_softmax: probs,
    })
}
