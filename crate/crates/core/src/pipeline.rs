//! Differentiable composition of the aggregation stages.
//!
//! Training runs the parameter-only stages once per step
//! ([`forward_queries`]), then each image through feature prediction, score
//! normalization, similarity and normalization ([`forward_image`]). Backward
//! mirrors this: per-image passes accumulate into [`ImageGrads`], which also
//! carries gradients for the refined query banks, and [`backward_queries`]
//! finishes the parameter-only stages.

use crate::attn_kernels::{linear, linear_backward, mha_backward, mha_forward_taped, Matrix, MhaParams, MhaTape};
use crate::error::{Error, Result};
use crate::paradigms::{score_features_backward, score_features_taped, ParadigmKind, ScoreTape, SinkhornConfig};
use crate::qaa_agg::{cross_query_similarity, flat_index, Descriptor, FeatureMap, InferenceCache, QaaParams, ZERO_COLUMN_NORM};

pub struct QueryTape {
    feat_self: MhaTape,
    ref_self: MhaTape,
}

/// Same values as [`crate::qaa_agg::cache_queries`], plus the tapes.
pub fn forward_queries(params: &QaaParams) -> Result<(InferenceCache, QueryTape)> {
    let (fs, feat_self) = mha_forward_taped(&params.q_f, &params.q_f, &params.q_f, &params.feat_self_attn)?;
    let (rs, ref_self) = mha_forward_taped(&params.q_r, &params.q_r, &params.q_r, &params.ref_self_attn)?;
    Ok((
        InferenceCache {
            q_f_hat: fs.out.add(&params.q_f)?,
            f_hat: rs.out.add(&params.q_r)?,
        },
        QueryTape { feat_self, ref_self },
    ))
}

pub struct ImageTape {
    pred: MhaTape,
    attended: Matrix,
    scores_tape: ScoreTape,
    scores: Matrix,
    s: Matrix,
    /// Per-column norms of `S` (zero for skipped columns).
    col_norms: Vec<f64>,
    /// Intra-normalized, flattened vector before the global normalization.
    intra: Vec<f64>,
    global_norm: f64,
}

/// Forward for one image; also returns `P̂` for analysis.
pub fn forward_image(
    x: &FeatureMap,
    params: &QaaParams,
    cache: &InferenceCache,
    paradigm: ParadigmKind,
    sinkhorn: &SinkhornConfig,
) -> Result<(Descriptor, Matrix, ImageTape)> {
    if x.patches.cols() != params.config.c_o {
        return Err(Error::dim(
            "forward_image",
            format!("C_o {}", params.config.c_o),
            format!("patches {}", x.patches.shape_str()),
        ));
    }
    let (att, pred) = mha_forward_taped(&cache.q_f_hat, &x.patches, &x.patches, &params.feat_pred_attn)?;
    let p_hat = linear(&att.out, &params.proj_w, &params.proj_b)?;
    let (scores, scores_tape) = score_features_taped(paradigm, &p_hat, sinkhorn)?;
    let s = cross_query_similarity(&cache.f_hat, &scores)?.0;

    let (c_r, c_f) = s.shape();
    let mut intra = vec![0.0; c_r * c_f];
    let mut col_norms = vec![0.0; c_f];
    for b in 0..c_f {
        let col = s.column(b);
        let n = crate::attn_kernels::l2_norm(&col);
        if n < ZERO_COLUMN_NORM {
            continue;
        }
        col_norms[b] = n;
        for (a, v) in col.iter().enumerate() {
            intra[flat_index(a, b, c_r)] = v / n;
        }
    }
    let global_norm = crate::attn_kernels::l2_norm(&intra);
    if global_norm == 0.0 {
        return Err(Error::DegenerateDescriptor);
    }
    let values: Vec<f64> = intra.iter().map(|v| v / global_norm).collect();

    Ok((
        Descriptor::new(values, x.image_id.clone()),
        p_hat,
        ImageTape {
            pred,
            attended: att.out,
            scores_tape,
            scores,
            s,
            col_norms,
            intra,
            global_norm,
        },
    ))
}

/// Gradient accumulator for per-image stages.
#[derive(Clone, Debug)]
pub struct ImageGrads {
    pub feat_pred_attn: MhaParams,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    pub d_q_f_hat: Matrix,
    pub d_f_hat: Matrix,
}

impl ImageGrads {
    pub fn zeros(params: &QaaParams) -> Self {
        let c = params.config;
        ImageGrads {
            feat_pred_attn: MhaParams::zeros(c.c_o, params.feat_pred_attn.heads),
            proj_w: Matrix::zeros(c.c_o, c.c_f),
            proj_b: vec![0.0; c.c_f],
            d_q_f_hat: Matrix::zeros(c.n_q, c.c_o),
            d_f_hat: Matrix::zeros(c.n_q, c.c_r),
        }
    }

    pub fn accumulate(&mut self, other: &ImageGrads) -> Result<()> {
        self.feat_pred_attn.accumulate(&other.feat_pred_attn);
        self.proj_w.add_assign(&other.proj_w)?;
        for (a, b) in self.proj_b.iter_mut().zip(&other.proj_b) {
            *a += b;
        }
        self.d_q_f_hat.add_assign(&other.d_q_f_hat)?;
        self.d_f_hat.add_assign(&other.d_f_hat)
    }
}

/// Backward of one image given `dL/d(descriptor)`; adds into `grads`.
pub fn backward_image(
    tape: &ImageTape,
    params: &QaaParams,
    cache: &InferenceCache,
    d_desc: &[f64],
    grads: &mut ImageGrads,
) -> Result<()> {
    let (c_r, c_f) = tape.s.shape();
    if d_desc.len() != c_r * c_f {
        return Err(Error::State(format!(
            "descriptor gradient has length {}, tape expects {}",
            d_desc.len(),
            c_r * c_f
        )));
    }

    // Global normalization: d = z/|z|  =>  dz = (g - d (d·g)) / |z|.
    let n = tape.global_norm;
    let out_dot_g: f64 = tape.intra.iter().zip(d_desc).map(|(z, g)| z / n * g).sum();
    let d_intra: Vec<f64> = tape
        .intra
        .iter()
        .zip(d_desc)
        .map(|(z, g)| (g - z / n * out_dot_g) / n)
        .collect();

    // Intra normalization per column.
    let mut d_s = Matrix::zeros(c_r, c_f);
    for b in 0..c_f {
        let cn = tape.col_norms[b];
        if cn == 0.0 {
            continue;
        }
        let idx = |a: usize| flat_index(a, b, c_r);
        let u_dot_g: f64 = (0..c_r).map(|a| tape.intra[idx(a)] * d_intra[idx(a)]).sum();
        for a in 0..c_r {
            d_s[(a, b)] = (d_intra[idx(a)] - tape.intra[idx(a)] * u_dot_g) / cn;
        }
    }

    // S = F̂ᵀ · scores
    let d_scores = cache.f_hat.matmul(&d_s)?;
    grads.d_f_hat.add_assign(&tape.scores.matmul_t(&d_s)?)?;

    let d_p_hat = score_features_backward(&tape.scores_tape, &d_scores)?;

    let (d_att, d_pw, d_pb) = linear_backward(&tape.attended, &params.proj_w, &d_p_hat)?;
    grads.proj_w.add_assign(&d_pw)?;
    for (a, b) in grads.proj_b.iter_mut().zip(&d_pb) {
        *a += b;
    }

    let g = mha_backward(&tape.pred, &params.feat_pred_attn, &d_att)?;
    grads.feat_pred_attn.accumulate(&g.params);
    grads.d_q_f_hat.add_assign(&g.d_q)?;
    Ok(())
}

/// Completes the gradient through the query-refinement stages and writes the
/// full parameter gradient.
pub fn backward_queries(tape: &QueryTape, params: &QaaParams, image_grads: &ImageGrads) -> Result<QaaParams> {
    let mut out = QaaParams::zeros(params.config);

    let fs = mha_backward(&tape.feat_self, &params.feat_self_attn, &image_grads.d_q_f_hat)?;
    // Q̂^f = Q^f + MHA(Q^f, Q^f, Q^f)
    let mut d_qf = image_grads.d_q_f_hat.clone();
    d_qf.add_assign(&fs.d_q)?;
    d_qf.add_assign(&fs.d_k)?;
    d_qf.add_assign(&fs.d_v)?;
    out.q_f = d_qf;
    out.feat_self_attn = fs.params;

    let rs = mha_backward(&tape.ref_self, &params.ref_self_attn, &image_grads.d_f_hat)?;
    let mut d_qr = image_grads.d_f_hat.clone();
    d_qr.add_assign(&rs.d_q)?;
    d_qr.add_assign(&rs.d_k)?;
    d_qr.add_assign(&rs.d_v)?;
    out.q_r = d_qr;
    out.ref_self_attn = rs.params;

    out.feat_pred_attn = image_grads.feat_pred_attn.clone();
    out.proj_w = image_grads.proj_w.clone();
    out.proj_b = image_grads.proj_b.clone();
    Ok(out)
}

/// Encodes a set of feature maps with cached queries (no tapes).
pub fn encode_all(
    maps: &[FeatureMap],
    params: &QaaParams,
    paradigm: ParadigmKind,
    sinkhorn: &SinkhornConfig,
) -> Result<Vec<Descriptor>> {
    let cache = crate::qaa_agg::cache_queries(params)?;
    maps.iter()
        .map(|x| encode_one(x, params, &cache, paradigm, sinkhorn))
        .collect()
}

/// Descriptor for one image under any paradigm; equals
/// [`crate::qaa_agg::aggregate`] for `Cs`.
pub fn encode_one(
    x: &FeatureMap,
    params: &QaaParams,
    cache: &InferenceCache,
    paradigm: ParadigmKind,
    sinkhorn: &SinkhornConfig,
) -> Result<Descriptor> {
    let p_hat = crate::qaa_agg::predict_query_features(&cache.q_f_hat, x, params)?;
    Ok(crate::paradigms::paradigm_aggregate(paradigm, &cache.f_hat, &p_hat, sinkhorn)?.with_id(x.image_id.clone()))
}
