//! Multi-similarity loss over cosine similarities with hard-pair mining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qaa_agg::Descriptor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Mining margin.
    pub gamma: f64,
}

impl Default for MsLossParams {
    fn default() -> Self {
        MsLossParams {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.5,
            gamma: 0.1,
        }
    }
}

impl MsLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.lambda > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("ms-loss alpha, beta, lambda and gamma must be > 0".into()));
        }
        if !(self.lambda < 1.0) {
            return Err(Error::Config(format!("ms-loss lambda must be < 1, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsLossOutput {
    pub loss: f64,
    /// `dL/d(descriptor values)`, one row per input descriptor.
    pub grads: Vec<Vec<f64>>,
    pub mined_positives: usize,
    pub mined_negatives: usize,
}

/// `log(1 + Σ exp(a_k))` and the weights `exp(a_k) / (1 + Σ exp(a_k))`.
fn soft_plus_sum(a: &[f64]) -> (f64, Vec<f64>) {
    let m = a.iter().copied().fold(0.0, f64::max);
    let denom = (-m).exp() + a.iter().map(|x| (x - m).exp()).sum::<f64>();
    let weights = a.iter().map(|x| (x - m).exp() / denom).collect();
    (m + denom.ln(), weights)
}

/// Mean over anchors of the multi-similarity loss.
///
/// Similarities are plain inner products, which equal cosines for unit
/// descriptors. Negatives are kept when `S_in + γ > min_p S_ip` and
/// positives when `S_ip − γ < max_n S_in`; an empty opposite set keeps
/// every pair. Mining is treated as constant when differentiating.
pub fn ms_loss(descriptors: &[Descriptor], labels: &[usize], params: &MsLossParams) -> Result<MsLossOutput> {
    params.validate()?;
    let n = descriptors.len();
    if labels.len() != n {
        return Err(Error::Argument(format!("{n} descriptors but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Argument("ms-loss needs at least two samples".into()));
    }
    let dim = descriptors[0].dim();
    if let Some(bad) = descriptors.iter().find(|d| d.dim() != dim) {
        return Err(Error::dim("ms_loss", format!("C_d {dim}"), format!("{} has {}", bad.image_id, bad.dim())));
    }

    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = descriptors[i].values.iter().zip(&descriptors[j].values).map(|(a, b)| a * b).sum();
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }

    // Coefficients of dL/dS_ij, anchor i only.
    let mut coef = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    let (mut mined_pos, mut mined_neg) = (0, 0);
    let MsLossParams {
        alpha,
        beta,
        lambda,
        gamma,
    } = *params;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        let min_pos = pos.iter().map(|&j| sim[i][j]).fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().map(|&j| sim[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let min_pos = if pos.is_empty() { f64::NEG_INFINITY } else { min_pos };
        let max_neg = if neg.is_empty() { f64::INFINITY } else { max_neg };
        let kept_pos: Vec<usize> = pos.into_iter().filter(|&j| sim[i][j] - gamma < max_neg).collect();
        let kept_neg: Vec<usize> = neg.into_iter().filter(|&j| sim[i][j] + gamma > min_pos).collect();
        mined_pos += kept_pos.len();
        mined_neg += kept_neg.len();

        if !kept_pos.is_empty() {
            let a: Vec<f64> = kept_pos.iter().map(|&j| -alpha * (sim[i][j] - lambda)).collect();
            let (lse, w) = soft_plus_sum(&a);
            total += lse / alpha;
            for (&j, wj) in kept_pos.iter().zip(w) {
                coef[i][j] -= wj;
            }
        }
        if !kept_neg.is_empty() {
            let a: Vec<f64> = kept_neg.iter().map(|&j| beta * (sim[i][j] - lambda)).collect();
            let (lse, w) = soft_plus_sum(&a);
            total += lse / beta;
            for (&j, wj) in kept_neg.iter().zip(w) {
                coef[i][j] += wj;
            }
        }
    }

    let scale = 1.0 / n as f64;
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let c = coef[i][j] * scale;
            if c == 0.0 {
                continue;
            }
            for k in 0..dim {
                grads[i][k] += c * descriptors[j].values[k];
                grads[j][k] += c * descriptors[i].values[k];
            }
        }
    }
    Ok(MsLossOutput {
        loss: total * scale,
        grads,
        mined_positives: mined_pos,
        mined_negatives: mined_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_pair_with_different_labels() {
        let d = vec![Descriptor::new(vec![1.0, 0.0], "a"), Descriptor::new(vec![0.0, 1.0], "b")];
        let out = ms_loss(&d, &[0, 1], &MsLossParams::default()).unwrap();
        let per_anchor = (1.0 + (50.0f64 * (0.0 - 0.5)).exp()).ln() / 50.0;
        assert!((out.loss - per_anchor).abs() < 1e-15);
        assert_eq!(out.mined_negatives, 2);
    }

    #[test]
    fn nothing_mined_contributes_zero() {
        // Positives far above the only negative; negatives far below.
        let d = vec![
            Descriptor::new(vec![1.0, 0.0], "a"),
            Descriptor::new(vec![1.0, 0.0], "b"),
            Descriptor::new(vec![-1.0, 0.0], "c"),
            Descriptor::new(vec![-1.0, 0.0], "d"),
        ];
        let out = ms_loss(&d, &[0, 0, 1, 1], &MsLossParams::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!((out.mined_positives, out.mined_negatives), (0, 0));
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn label_count_mismatch() {
        let d = vec![Descriptor::new(vec![1.0], "a"), Descriptor::new(vec![1.0], "b")];
        assert!(matches!(ms_loss(&d, &[0], &MsLossParams::default()), Err(Error::Argument(_))));
        assert!(ms_loss(&d[..1], &[0], &MsLossParams::default()).is_err());
    }
}
