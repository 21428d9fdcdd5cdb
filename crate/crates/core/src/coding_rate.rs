//! Coding-rate analysis of query-level features.
//!
//! For `P̂` (`N_q × C_f`) the rate is
//! `R = ½ · logdet(I + C_f / (N_q ε²) · P̂ᵀP̂)` in nats. The argument is the
//! identity plus a PSD matrix, so it is factored with Cholesky and
//! `R = Σ log L_ii`.

use serde::{Deserialize, Serialize};

use crate::attn_kernels::{l2_norm, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodingRateConfig {
    pub epsilon: f64,
}

impl Default for CodingRateConfig {
    fn default() -> Self {
        CodingRateConfig { epsilon: 1e-3 }
    }
}

pub fn coding_rate(p_hat: &Matrix, cfg: &CodingRateConfig) -> Result<f64> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("coding-rate epsilon must be > 0".into()));
    }
    if !p_hat.is_finite() {
        return Err(Error::Numeric("coding-rate input has non-finite entries".into()));
    }
    let (n_q, c_f) = p_hat.shape();
    if n_q == 0 || c_f == 0 {
        return Err(Error::Argument("coding rate needs a non-empty feature matrix".into()));
    }
    let coeff = c_f as f64 / (n_q as f64 * cfg.epsilon * cfg.epsilon);
    let mut a = p_hat.t_matmul(p_hat)?.scale(coeff);
    for i in 0..c_f {
        a[(i, i)] += 1.0;
    }
    let l = cholesky(&a)?;
    Ok((0..c_f).map(|i| l[(i, i)].ln()).sum())
}

/// Lower-triangular `L` with `L Lᵀ = a`.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            let diag: Vec<String> = (0..n).map(|i| format!("{:.3e}", a[(i, i)])).collect();
            return Err(Error::Numeric(format!(
                "cholesky failed at pivot {j} (value {d:.3e}); matrix {n}x{n}, diagonal [{}]",
                diag.join(", ")
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Row norms of `P̂`, one per query. A diagnostic only.
pub fn query_feature_norms(p_hat: &Matrix) -> Vec<f64> {
    (0..p_hat.rows()).map(|r| l2_norm(p_hat.row(r))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateHistogram {
    pub label: String,
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub rates: Vec<f64>,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

impl RateHistogram {
    /// `bin_start,bin_end,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.6},{:.6},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// Rates of every feature matrix, binned over `[min, max]`.
pub fn rate_histogram(features: &[Matrix], cfg: &CodingRateConfig, bins: usize, label: &str) -> Result<RateHistogram> {
    if features.is_empty() {
        return Err(Error::Argument("rate histogram needs at least one feature matrix".into()));
    }
    let rates = features
        .iter()
        .map(|p| coding_rate(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    histogram_from_rates(rates, bins, None, label)
}

/// Bins precomputed rates. `range` fixes shared edges across paradigms;
/// without it the edges span the observed min and max (widened by ±0.5 when
/// they coincide).
pub fn histogram_from_rates(rates: Vec<f64>, bins: usize, range: Option<(f64, f64)>, label: &str) -> Result<RateHistogram> {
    if rates.is_empty() {
        return Err(Error::Argument("rate histogram needs at least one rate".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("rate histogram needs at least one bin".into()));
    }
    let (mut lo, mut hi) = range.unwrap_or_else(|| {
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &r in &rates {
        let idx = (((r - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let variance = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(RateHistogram {
        label: label.to_string(),
        edges,
        counts,
        rates,
        mean,
        variance,
    })
}
