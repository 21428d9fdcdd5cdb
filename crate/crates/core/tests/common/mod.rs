//! Shared helpers for the integration tests.
//!
//! The oracles work on nested `Vec`s with explicit loops and share no code
//! with the library beyond reading parameter fields. The finite-difference
//! driver at the bottom does call into the library, since that is what it
//! checks.

#![allow(dead_code)]

use cqs_core::attn_kernels::{Matrix, MhaParams};
use cqs_core::paradigms::ParadigmKind;
use cqs_core::qaa_agg::{FeatureMap, QaaConfig, QaaParams};
use cqs_core::trainer::{loss_and_gradient, BatchItem, LabeledBatch, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn to_grid(m: &Matrix) -> Grid {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Grid, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b[(r, c)]).abs());
        }
    }
    worst
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn affine(x: &Grid, w: &Matrix, b: &[f64]) -> Grid {
    let mut out = vec![vec![0.0; w.cols()]; x.len()];
    for i in 0..x.len() {
        for j in 0..w.cols() {
            let mut s = b[j];
            for t in 0..w.rows() {
                s += x[i][t] * w[(t, j)];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Row softmax without max subtraction; callers keep inputs small.
pub fn softmax_rows(x: &Grid) -> Grid {
    x.iter()
        .map(|row| {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Multi-head attention, one head at a time with scalar loops.
pub fn mha(q: &Matrix, k: &Matrix, v: &Matrix, p: &MhaParams) -> Grid {
    let d = p.w_q.rows();
    let dh = d / p.heads;
    let qp = affine(&to_grid(q), &p.w_q, &p.b_q);
    let kp = affine(&to_grid(k), &p.w_k, &p.b_k);
    let vp = affine(&to_grid(v), &p.w_v, &p.b_v);
    let mut concat = vec![vec![0.0; d]; q.rows()];
    for h in 0..p.heads {
        let off = h * dh;
        let mut scores = vec![vec![0.0; k.rows()]; q.rows()];
        for i in 0..q.rows() {
            for j in 0..k.rows() {
                let mut s = 0.0;
                for c in 0..dh {
                    s += qp[i][off + c] * kp[j][off + c];
                }
                scores[i][j] = s / (dh as f64).sqrt();
            }
        }
        let a = softmax_rows(&scores);
        for i in 0..q.rows() {
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..k.rows() {
                    s += a[i][j] * vp[j][off + c];
                }
                concat[i][off + c] = s;
            }
        }
    }
    affine(&concat, &p.w_o, &p.b_o)
}

/// `S[a][b] = Σ_q F̂[q][a] · P̂[q][b]`.
pub fn cross_similarity(f_hat: &Matrix, p_hat: &Matrix) -> Grid {
    let (n_q, c_r) = f_hat.shape();
    let c_f = p_hat.cols();
    let mut s = vec![vec![0.0; c_f]; c_r];
    for a in 0..c_r {
        for b in 0..c_f {
            for q in 0..n_q {
                s[a][b] += f_hat[(q, a)] * p_hat[(q, b)];
            }
        }
    }
    s
}

/// Column-wise unit norm (zero columns left as zeros), flattened column by
/// column, then a global unit norm.
pub fn two_stage_normalize(s: &Grid) -> Option<Vec<f64>> {
    let c_r = s.len();
    let c_f = s[0].len();
    let mut flat = Vec::with_capacity(c_r * c_f);
    for b in 0..c_f {
        let mut sq = 0.0;
        for row in s {
            sq += row[b] * row[b];
        }
        let n = sq.sqrt();
        for row in s {
            flat.push(if n < 1e-12 { 0.0 } else { row[b] / n });
        }
    }
    let total: f64 = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if total == 0.0 {
        return None;
    }
    Some(flat.iter().map(|v| v / total).collect())
}

/// Alternating row/column scaling of `exp(m / t)` until every marginal is
/// within `tol` of its target.
pub fn sinkhorn(m: &Matrix, t: f64, tol: f64, max_iters: usize) -> Grid {
    let (rows, cols) = m.shape();
    let mut a: Grid = to_grid(m).iter().map(|r| r.iter().map(|v| (v / t).exp()).collect()).collect();
    let (rt, ct) = (1.0 / rows as f64, 1.0 / cols as f64);
    for _ in 0..max_iters {
        for row in a.iter_mut() {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v *= rt / s;
            }
        }
        for c in 0..cols {
            let s: f64 = a.iter().map(|r| r[c]).sum();
            for row in a.iter_mut() {
                row[c] *= ct / s;
            }
        }
        let row_dev = a.iter().map(|r| (r.iter().sum::<f64>() - rt).abs()).fold(0.0, f64::max);
        if row_dev < tol {
            break;
        }
    }
    a
}

/// Coding rate from the eigenvalues of `P̂ᵀP̂`.
pub fn coding_rate_eigen(p_hat: &Matrix, eps: f64) -> f64 {
    let (n_q, c_f) = p_hat.shape();
    let p = nalgebra::DMatrix::from_fn(n_q, c_f, |r, c| p_hat[(r, c)]);
    let gram = p.transpose() * &p;
    let coeff = c_f as f64 / (n_q as f64 * eps * eps);
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().map(|l| 0.5 * (1.0 + coeff * l.max(0.0)).ln()).sum()
}

/// Scores every row, sorts the whole list by score then id, keeps `k`.
pub fn top_k_full_sort(rows: &[Vec<f32>], ids: &[String], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = rows
        .iter()
        .zip(ids)
        .map(|(r, id)| {
            let mut s = 0.0;
            for (a, b) in r.iter().zip(query) {
                s += *a as f64 * b;
            }
            (id.clone(), s)
        })
        .collect();
    all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
    all.truncate(k);
    all
}

/// Great-circle distance by the spherical law of cosines.
pub fn law_of_cosines_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dl = (lon2 - lon1).to_radians();
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
    6_371_000.0 * c.clamp(-1.0, 1.0).acos()
}

/// Multi-similarity loss with explicit pair loops.
pub fn ms_loss(descs: &[Vec<f64>], labels: &[usize], alpha: f64, beta: f64, lambda: f64, margin: f64) -> f64 {
    let n = descs.len();
    let sim = |i: usize, j: usize| -> f64 { descs[i].iter().zip(&descs[j]).map(|(a, b)| a * b).sum() };
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<f64> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).map(|j| sim(i, j)).collect();
        let neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[i]).map(|j| sim(i, j)).collect();
        let min_pos = pos.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let kept_neg: Vec<f64> = if pos.is_empty() {
            neg.clone()
        } else {
            neg.iter().cloned().filter(|s| s + margin > min_pos).collect()
        };
        let kept_pos: Vec<f64> = if neg.is_empty() {
            pos.clone()
        } else {
            pos.iter().cloned().filter(|s| s - margin < max_neg).collect()
        };
        if !kept_pos.is_empty() {
            let s: f64 = kept_pos.iter().map(|v| (-alpha * (v - lambda)).exp()).sum();
            total += (1.0 + s).ln() / alpha;
        }
        if !kept_neg.is_empty() {
            let s: f64 = kept_neg.iter().map(|v| (beta * (v - lambda)).exp()).sum();
            total += (1.0 + s).ln() / beta;
        }
    }
    total / n as f64
}

/// Worst relative error between the analytic gradient of MS loss through the
/// whole aggregation pipeline and a fourth-order central difference, on a
/// six-image batch of three places (`N_q=4, C_o=8, C_f=3, C_r=5, P=7`).
pub fn pipeline_gradient_error(paradigm: ParadigmKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = QaaConfig::new(4, 8, 3, 5).with_heads(2);
    let params = QaaParams::init(model, &mut rng).unwrap();
    let maps: Vec<FeatureMap> = (0..6)
        .map(|i| FeatureMap::new(Matrix::random_uniform(7, 8, 1.0, &mut rng), format!("x{i}")).unwrap())
        .collect();
    let batch = LabeledBatch {
        items: maps
            .iter()
            .enumerate()
            .map(|(i, f)| BatchItem {
                features: f,
                dataset: 0,
                place_id: i / 2,
                label: i / 2,
            })
            .collect(),
    };
    let cfg = TrainConfig {
        model,
        paradigm,
        ..TrainConfig::default()
    };
    let (_, grads) = loss_and_gradient(&batch, &params, &cfg).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();

    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].1[i] += delta;
                loss_and_gradient(&batch, &p, &cfg).unwrap().0
            };
            // Fourth-order central stencil.
            let numeric = (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
            let err = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
            assert!(err.is_finite(), "{name}[{i}]");
            worst = worst.max(err);
        }
    }
    worst
}
