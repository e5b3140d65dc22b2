//! Evaluation metrics: latent recovery, forecasting error and co-smoothing.

use lrssm::likelihoods::ln_factorial;
use lrssm::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Coefficient of determination of `truth` given the best affine map from
/// `inferred`, pooled over sequences. Both are `dim×T` per sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub r2: f64,
    pub per_dim: Vec<f64>,
}

pub fn alignment_r2(inferred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<AlignmentReport> {
    if inferred.len() != truth.len() || inferred.is_empty() {
        return Err(Error::Invalid("alignment needs matching, nonempty sequence lists".into()));
    }
    let li = inferred[0].nrows();
    let lt = truth[0].nrows();
    let total: usize = truth.iter().map(|t| t.ncols()).sum();
    let mut x = DMatrix::zeros(total, li + 1);
    let mut y = DMatrix::zeros(total, lt);
    let mut row = 0;
    for (a, b) in inferred.iter().zip(truth) {
        if a.ncols() != b.ncols() || a.nrows() != li || b.nrows() != lt {
            return Err(Error::Invalid("inferred and true paths differ in shape".into()));
        }
        for t in 0..a.ncols() {
            x[(row, 0)] = 1.0;
            for i in 0..li {
                x[(row, i + 1)] = a[(i, t)];
            }
            for j in 0..lt {
                y[(row, j)] = b[(j, t)];
            }
            row += 1;
        }
    }
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Invalid(format!("least squares: {e}")))?;
    let resid = &y - &x * coef;
    let mut per_dim = Vec::with_capacity(lt);
    let (mut sse, mut sst) = (0.0, 0.0);
    for j in 0..lt {
        let col = y.column(j);
        let mean = col.mean();
        let tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let err: f64 = resid.column(j).iter().map(|v| v * v).sum();
        per_dim.push(if tot > 0.0 { 1.0 - err / tot } else { f64::NAN });
        sse += err;
        sst += tot;
    }
    Ok(AlignmentReport {
        r2: 1.0 - sse / sst,
        per_dim,
    })
}

/// Mean squared error per horizon; `pred[h]` and `actual[h]` hold the
/// predicted and observed vectors pooled over forecast origins.
pub fn forecast_mse(pred: &[Vec<DVector<f64>>], actual: &[Vec<DVector<f64>>]) -> Vec<f64> {
    pred.iter()
        .zip(actual)
        .map(|(p, a)| {
            let (mut s, mut n) = (0.0, 0usize);
            for (x, y) in p.iter().zip(a) {
                s += (x - y).norm_squared();
                n += x.len();
            }
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        })
        .collect()
}

fn poisson_loglik(y: f64, rate: f64) -> f64 {
    if rate <= 0.0 {
        return if y == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y * rate.ln() - rate - ln_factorial(y)
}

/// Co-smoothing bits per spike on held-out dimensions.
///
/// `rates[k]` and `counts[k]` are `H×T` (held-out dims only); `null_rates`
/// holds one mean rate per held-out dim. Returns `None` when the held-out
/// counts contain no events.
pub fn co_bps(rates: &[DMatrix<f64>], counts: &[DMatrix<f64>], null_rates: &[f64]) -> Result<Option<f64>> {
    let (mut ll_model, mut ll_null, mut spikes) = (0.0, 0.0, 0.0);
    for (r, y) in rates.iter().zip(counts) {
        if r.shape() != y.shape() || r.nrows() != null_rates.len() {
            return Err(Error::Invalid("co-bps inputs differ in shape".into()));
        }
        for t in 0..y.ncols() {
            for h in 0..y.nrows() {
                let v = y[(h, t)];
                ll_model += poisson_loglik(v, r[(h, t)]);
                ll_null += poisson_loglik(v, null_rates[h]);
                spikes += v;
            }
        }
    }
    if spikes <= 0.0 {
        return Ok(None);
    }
    Ok(Some((ll_model - ll_null) / (spikes * std::f64::consts::LN_2)))
}

/// Per-dimension mean counts over `counts` (`H×T` each).
pub fn mean_rates(counts: &[DMatrix<f64>]) -> Vec<f64> {
    let h = counts.first().map_or(0, |c| c.nrows());
    let steps: usize = counts.iter().map(|c| c.ncols()).sum();
    (0..h)
        .map(|i| counts.iter().map(|c| c.row(i).sum()).sum::<f64>() / steps.max(1) as f64)
        .collect()
}
