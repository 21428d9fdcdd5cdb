//! Score-normalization paradigms that share the reference codebook.
//!
//! All three paradigms contract query-level features against `F̂` over the
//! query dimension and normalize the result identically. They differ only in
//! what is contracted:
//!
//! * `Cs`: the raw features `P̂`.
//! * `Softmax`: `P̂` softmax-normalized down each `C_f` column (over queries).
//! * `Ot`: `P̂` Sinkhorn-normalized to uniform row and column marginals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attn_kernels::{softmax_rows, softmax_rows_backward, Matrix};
use crate::error::{Error, Result};
use crate::qaa_agg::{cross_query_similarity, normalize_descriptor, Descriptor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParadigmKind {
    Softmax,
    Ot,
    Cs,
}

impl ParadigmKind {
    pub const ALL: [ParadigmKind; 3] = [ParadigmKind::Softmax, ParadigmKind::Ot, ParadigmKind::Cs];

    pub fn as_str(self) -> &'static str {
        match self {
            ParadigmKind::Softmax => "softmax",
            ParadigmKind::Ot => "ot",
            ParadigmKind::Cs => "cs",
        }
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParadigmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(ParadigmKind::Softmax),
            "ot" => Ok(ParadigmKind::Ot),
            "cs" => Ok(ParadigmKind::Cs),
            other => Err(Error::Argument(format!("unknown paradigm {other:?} (expected cs, softmax or ot)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub max_iters: usize,
    /// Largest tolerated deviation of any row or column sum from its target.
    pub tol: f64,
    pub temperature: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            max_iters: 100,
            tol: 1e-6,
            temperature: 1.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("sinkhorn tol must be > 0".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("sinkhorn temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    pub matrix: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// Max absolute deviation of row/column sums from their targets.
    pub residual: f64,
}

/// Saved scaling steps for differentiating through Sinkhorn.
#[derive(Clone, Debug)]
pub struct SinkhornTape {
    kernel: Matrix,
    /// Input to each scaling step; even indices are row steps.
    steps: Vec<Matrix>,
    temperature: f64,
}

/// Sinkhorn scaling of `exp(m / temperature)` towards row sums `1/rows` and
/// column sums `1/cols`.
///
/// The exponent is shifted by its global maximum, which the scaling cancels
/// exactly. If a row or column still underflows to zero, the call fails and
/// asks for a larger temperature.
pub fn sinkhorn_normalize(m: &Matrix, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    sinkhorn_taped(m, cfg).map(|(out, _)| out)
}

pub fn sinkhorn_taped(m: &Matrix, cfg: &SinkhornConfig) -> Result<(SinkhornOutput, SinkhornTape)> {
    cfg.validate()?;
    if !m.is_finite() {
        return Err(Error::Numeric("sinkhorn input has non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Argument("sinkhorn needs a non-empty matrix".into()));
    }
    let max = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kernel = m.map(|v| ((v - max) / cfg.temperature).exp());
    let row_target = 1.0 / rows as f64;
    let col_target = 1.0 / cols as f64;

    let mut a = kernel.clone();
    let mut steps = Vec::with_capacity(2 * cfg.max_iters);
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        steps.push(a.clone());
        scale_rows(&mut a, row_target, cfg.temperature)?;
        steps.push(a.clone());
        scale_cols(&mut a, col_target, cfg.temperature)?;
        residual = marginal_residual(&a);
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok((
        SinkhornOutput {
            matrix: a,
            converged,
            iterations,
            residual,
        },
        SinkhornTape {
            kernel,
            steps,
            temperature: cfg.temperature,
        },
    ))
}

fn underflow(what: &str, idx: usize, temperature: f64) -> Error {
    Error::Numeric(format!(
        "sinkhorn {what} {idx} underflowed at temperature {temperature}; use a larger temperature"
    ))
}

fn scale_rows(a: &mut Matrix, target: f64, temperature: f64) -> Result<()> {
    for r in 0..a.rows() {
        let s: f64 = a.row(r).iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(underflow("row", r, temperature));
        }
        let f = target / s;
        for v in a.row_mut(r) {
            *v *= f;
        }
    }
    Ok(())
}

fn scale_cols(a: &mut Matrix, target: f64, temperature: f64) -> Result<()> {
    let sums = a.col_sums();
    for (c, &s) in sums.iter().enumerate() {
        if !(s > 0.0 && s.is_finite()) {
            return Err(underflow("column", c, temperature));
        }
    }
    for r in 0..a.rows() {
        for (v, &s) in a.row_mut(r).iter_mut().zip(&sums) {
            *v *= target / s;
        }
    }
    Ok(())
}

/// Max absolute deviation of row sums from `1/rows` and column sums from
/// `1/cols`.
pub fn marginal_residual(a: &Matrix) -> f64 {
    let row_target = 1.0 / a.rows() as f64;
    let col_target = 1.0 / a.cols() as f64;
    let rows = (0..a.rows()).map(|r| (a.row(r).iter().sum::<f64>() - row_target).abs());
    let cols = a.col_sums().into_iter().map(|s| (s - col_target).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Backward through the recorded scaling steps, returning `dL/dm`.
pub fn sinkhorn_backward(tape: &SinkhornTape, output: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    if d_out.shape() != output.shape() || tape.kernel.shape() != output.shape() {
        return Err(Error::State(format!(
            "sinkhorn tape {} vs gradient {}",
            tape.kernel.shape_str(),
            d_out.shape_str()
        )));
    }
    let (rows, cols) = output.shape();
    let row_target = 1.0 / rows as f64;
    let col_target = 1.0 / cols as f64;
    let mut g = d_out.clone();
    let mut y = output.clone();
    for (i, a) in tape.steps.iter().enumerate().rev() {
        g = if i % 2 == 0 {
            row_scale_backward(a, &y, &g, row_target)
        } else {
            row_scale_backward(&a.transpose(), &y.transpose(), &g.transpose(), col_target).transpose()
        };
        y = a.clone();
    }
    // K = exp((m - max)/T); the shift cancels under scaling.
    let mut d_m = g;
    for (d, k) in d_m.data_mut().iter_mut().zip(tape.kernel.data()) {
        *d *= k / tape.temperature;
    }
    Ok(d_m)
}

/// For `y_ij = t · a_ij / s_i` with `s_i = Σ_j a_ij`:
/// `da_ij = (t · g_ij − Σ_k g_ik y_ik) / s_i`.
fn row_scale_backward(a: &Matrix, y: &Matrix, g: &Matrix, target: f64) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let s: f64 = a.row(r).iter().sum();
        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
        for (o, &gv) in out.row_mut(r).iter_mut().zip(g.row(r)) {
            *o = (target * gv - inner) / s;
        }
    }
    out
}

/// Softmax down each column of `p_hat` (over the query dimension).
pub fn softmax_over_queries(p_hat: &Matrix) -> Matrix {
    softmax_rows(&p_hat.transpose()).transpose()
}

pub fn softmax_over_queries_backward(y: &Matrix, d_y: &Matrix) -> Matrix {
    softmax_rows_backward(&y.transpose(), &d_y.transpose()).transpose()
}

/// Intermediate state for differentiating [`score_features`].
#[derive(Clone, Debug)]
pub enum ScoreTape {
    Identity,
    Softmax { output: Matrix },
    Ot { output: Matrix, tape: SinkhornTape },
}

/// The matrix each paradigm contracts against the codebook.
pub fn score_features(kind: ParadigmKind, p_hat: &Matrix, cfg: &SinkhornConfig) -> Result<Matrix> {
    score_features_taped(kind, p_hat, cfg).map(|(m, _)| m)
}

pub fn score_features_taped(kind: ParadigmKind, p_hat: &Matrix, cfg: &SinkhornConfig) -> Result<(Matrix, ScoreTape)> {
    Ok(match kind {
        ParadigmKind::Cs => (p_hat.clone(), ScoreTape::Identity),
        ParadigmKind::Softmax => {
            let out = softmax_over_queries(p_hat);
            (out.clone(), ScoreTape::Softmax { output: out })
        }
        ParadigmKind::Ot => {
            let (out, tape) = sinkhorn_taped(p_hat, cfg)?;
            (
                out.matrix.clone(),
                ScoreTape::Ot {
                    output: out.matrix,
                    tape,
                },
            )
        }
    })
}

pub fn score_features_backward(tape: &ScoreTape, d_scores: &Matrix) -> Result<Matrix> {
    match tape {
        ScoreTape::Identity => Ok(d_scores.clone()),
        ScoreTape::Softmax { output } => Ok(softmax_over_queries_backward(output, d_scores)),
        ScoreTape::Ot { output, tape } => sinkhorn_backward(tape, output, d_scores),
    }
}

pub fn paradigm_aggregate(kind: ParadigmKind, f_hat: &Matrix, p_hat: &Matrix, cfg: &SinkhornConfig) -> Result<Descriptor> {
    if f_hat.rows() != p_hat.rows() {
        return Err(Error::dim(
            "paradigm_aggregate",
            format!("f_hat {}", f_hat.shape_str()),
            format!("p_hat {}", p_hat.shape_str()),
        ));
    }
    let scores = score_features(kind, p_hat, cfg)?;
    normalize_descriptor(&cross_query_similarity(f_hat, &scores)?)
}
