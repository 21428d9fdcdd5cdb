//! The query-based aggregation head.
//!
//! Two learned query banks drive aggregation. Feature queries are refined by
//! self-attention and then attend over an image's patch features to produce
//! query-level features `P̂` (`N_q × C_f`). Reference queries are refined by
//! their own self-attention into an image-independent codebook `F̂`
//! (`N_q × C_r`). The descriptor is the cross-query similarity
//! `S = F̂ᵀ P̂` (`C_r × C_f`), intra-normalized per column and then globally.
//!
//! Both refined query banks depend only on parameters, so inference caches
//! them in an [`InferenceCache`] and runs only the feature-prediction
//! attention, the similarity product and the normalization per image.

mod export;
mod flops;
mod io;

pub use export::{export_attention_maps, write_attention_maps, AttentionGrid};
pub use flops::{count_flops, FlopProfile, StageFlops};
pub use io::{read_descriptor_file, sidecar_path, write_descriptor_file, DESCRIPTOR_MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attn_kernels::{l2_norm, linear, mha_forward, Matrix, MhaParams};
use crate::error::{Error, Result};

/// Column norms below this are treated as zero during intra-normalization.
pub const ZERO_COLUMN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaaConfig {
    pub n_q: usize,
    pub c_o: usize,
    pub c_f: usize,
    pub c_r: usize,
    /// Requested heads per attention block. Each block uses the largest
    /// divisor of its width that does not exceed this.
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_heads() -> usize {
    4
}

impl QaaConfig {
    pub fn new(n_q: usize, c_o: usize, c_f: usize, c_r: usize) -> Self {
        QaaConfig {
            n_q,
            c_o,
            c_f,
            c_r,
            heads: default_heads(),
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn descriptor_dim(&self) -> usize {
        self.c_r * self.c_f
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_q", self.n_q),
            ("c_o", self.c_o),
            ("c_f", self.c_f),
            ("c_r", self.c_r),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Heads used by an attention block of width `d_model`.
    pub fn heads_for(&self, d_model: usize) -> usize {
        (1..=self.heads.min(d_model))
            .rev()
            .find(|h| d_model % h == 0)
            .unwrap_or(1)
    }
}

/// Learnable parameters of the aggregation head.
#[derive(Clone, Debug, PartialEq)]
pub struct QaaParams {
    pub config: QaaConfig,
    /// Feature queries `Q^f`, `N_q × C_o`.
    pub q_f: Matrix,
    /// Reference queries `Q^r`, `N_q × C_r`.
    pub q_r: Matrix,
    pub feat_self_attn: MhaParams,
    pub feat_pred_attn: MhaParams,
    /// Projection `C_o → C_f` applied after feature prediction.
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    pub ref_self_attn: MhaParams,
}

impl QaaParams {
    /// Random init. Attention and projection weights are uniform in
    /// `±1/sqrt(fan_in)`; query banks are uniform in `±1`.
    pub fn init<R: Rng + ?Sized>(config: QaaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let q_f = Matrix::random_uniform(config.n_q, config.c_o, 1.0, rng);
        let q_r = Matrix::random_uniform(config.n_q, config.c_r, 1.0, rng);
        let feat_self_attn = MhaParams::new(config.c_o, config.heads_for(config.c_o), rng)?;
        let feat_pred_attn = MhaParams::new(config.c_o, config.heads_for(config.c_o), rng)?;
        let bound = 1.0 / (config.c_o as f64).sqrt();
        let proj_w = Matrix::random_uniform(config.c_o, config.c_f, bound, rng);
        let proj_b = (0..config.c_f).map(|_| rng.random_range(-bound..=bound)).collect();
        let ref_self_attn = MhaParams::new(config.c_r, config.heads_for(config.c_r), rng)?;
        Ok(QaaParams {
            config,
            q_f,
            q_r,
            feat_self_attn,
            feat_pred_attn,
            proj_w,
            proj_b,
            ref_self_attn,
        })
    }

    /// All-zero parameters of the right shapes; used as a gradient buffer.
    pub fn zeros(config: QaaConfig) -> Self {
        QaaParams {
            config,
            q_f: Matrix::zeros(config.n_q, config.c_o),
            q_r: Matrix::zeros(config.n_q, config.c_r),
            feat_self_attn: MhaParams::zeros(config.c_o, config.heads_for(config.c_o)),
            feat_pred_attn: MhaParams::zeros(config.c_o, config.heads_for(config.c_o)),
            proj_w: Matrix::zeros(config.c_o, config.c_f),
            proj_b: vec![0.0; config.c_f],
            ref_self_attn: MhaParams::zeros(config.c_r, config.heads_for(config.c_r)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expect = [
            ("q_f", &self.q_f, (c.n_q, c.c_o)),
            ("q_r", &self.q_r, (c.n_q, c.c_r)),
            ("proj_w", &self.proj_w, (c.c_o, c.c_f)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::dim("QaaParams", format!("{name} expected {}x{}", shape.0, shape.1), m.shape_str()));
            }
        }
        if self.proj_b.len() != c.c_f {
            return Err(Error::dim("QaaParams", format!("proj_b expected {}", c.c_f), self.proj_b.len().to_string()));
        }
        for (name, mha, width) in [
            ("feat_self_attn", &self.feat_self_attn, c.c_o),
            ("feat_pred_attn", &self.feat_pred_attn, c.c_o),
            ("ref_self_attn", &self.ref_self_attn, c.c_r),
        ] {
            mha.validate()?;
            if mha.d_model() != width {
                return Err(Error::dim("QaaParams", format!("{name} width {width}"), mha.d_model().to_string()));
            }
        }
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("q_f".to_string(), self.q_f.data()),
            ("q_r".to_string(), self.q_r.data()),
        ];
        self.feat_self_attn.visit("feat_self_attn", &mut out);
        self.feat_pred_attn.visit("feat_pred_attn", &mut out);
        out.push(("proj_w".to_string(), self.proj_w.data()));
        out.push(("proj_b".to_string(), &self.proj_b));
        self.ref_self_attn.visit("ref_self_attn", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("q_f".to_string(), self.q_f.data_mut()),
            ("q_r".to_string(), self.q_r.data_mut()),
        ];
        self.feat_self_attn.visit_mut("feat_self_attn", &mut out);
        self.feat_pred_attn.visit_mut("feat_pred_attn", &mut out);
        out.push(("proj_w".to_string(), self.proj_w.data_mut()));
        out.push(("proj_b".to_string(), &mut self.proj_b));
        self.ref_self_attn.visit_mut("ref_self_attn", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Patch-level features of one image, `P × C_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub patches: Matrix,
    pub image_id: String,
}

impl FeatureMap {
    pub fn new(patches: Matrix, image_id: impl Into<String>) -> Result<Self> {
        if patches.rows() == 0 {
            return Err(Error::Argument("feature map needs at least one patch".into()));
        }
        if !patches.is_finite() {
            return Err(Error::Argument("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap {
            patches,
            image_id: image_id.into(),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }
}

/// Refined query banks that depend only on parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceCache {
    /// `Q̂^f`, `N_q × C_o`.
    pub q_f_hat: Matrix,
    /// `F̂`, `N_q × C_r`.
    pub f_hat: Matrix,
}

/// `C_r × C_f` cross-query similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Matrix);

impl SimilarityMatrix {
    pub fn c_r(&self) -> usize {
        self.0.rows()
    }

    pub fn c_f(&self) -> usize {
        self.0.cols()
    }
}

/// Unit-norm global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub image_id: String,
}

impl Descriptor {
    pub fn new(values: Vec<f64>, image_id: impl Into<String>) -> Self {
        Descriptor {
            values,
            image_id: image_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }
}

/// Input image geometry for a patch-tokenizing backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    14
}

impl ImageSpec {
    pub fn new(height: usize, width: usize) -> Self {
        ImageSpec {
            height,
            width,
            stride: default_stride(),
        }
    }

    /// Patch grid `(rows, cols)`; both sides must divide exactly.
    pub fn grid(&self) -> Result<(usize, usize)> {
        if self.stride == 0 || self.height % self.stride != 0 || self.width % self.stride != 0 {
            return Err(Error::Argument(format!(
                "image {}x{} is not divisible by patch stride {}",
                self.height, self.width, self.stride
            )));
        }
        Ok((self.height / self.stride, self.width / self.stride))
    }

    pub fn patches(&self) -> Result<usize> {
        self.grid().map(|(r, c)| r * c)
    }
}

/// `Q̂^f = Q^f + MHA(Q^f, Q^f, Q^f)`
pub fn refine_feature_queries(params: &QaaParams) -> Result<Matrix> {
    let q = &params.q_f;
    mha_forward(q, q, q, &params.feat_self_attn)?.out.add(q)
}

/// `P̂ = proj(MHA(Q̂^f, X, X))`, `N_q × C_f`.
pub fn predict_query_features(q_f_hat: &Matrix, x: &FeatureMap, params: &QaaParams) -> Result<Matrix> {
    if x.patches.cols() != params.config.c_o {
        return Err(Error::dim(
            "predict_query_features",
            format!("C_o {}", params.config.c_o),
            format!("patches {}", x.patches.shape_str()),
        ));
    }
    let attended = mha_forward(q_f_hat, &x.patches, &x.patches, &params.feat_pred_attn)?;
    linear(&attended.out, &params.proj_w, &params.proj_b)
}

/// `F̂ = Q^r + MHA(Q^r, Q^r, Q^r)`
pub fn build_reference_codebook(params: &QaaParams) -> Result<Matrix> {
    let q = &params.q_r;
    mha_forward(q, q, q, &params.ref_self_attn)?.out.add(q)
}

/// `S = F̂ᵀ P̂`, contracting over the query dimension.
pub fn cross_query_similarity(f_hat: &Matrix, p_hat: &Matrix) -> Result<SimilarityMatrix> {
    if f_hat.rows() != p_hat.rows() {
        return Err(Error::dim(
            "cross_query_similarity",
            format!("f_hat {}", f_hat.shape_str()),
            format!("p_hat {}", p_hat.shape_str()),
        ));
    }
    f_hat.t_matmul(p_hat).map(SimilarityMatrix)
}

/// Flattened index of `S[a][b]`: columns are laid out contiguously, so
/// column `b` occupies `[b·C_r, (b+1)·C_r)`.
#[inline]
pub fn flat_index(a: usize, b: usize, c_r: usize) -> usize {
    b * c_r + a
}

/// Intra-L2 normalizes each `C_r`-long column of `S`, flattens columns
/// contiguously (see [`flat_index`]) and applies a global L2 normalization.
///
/// Columns with norm below [`ZERO_COLUMN_NORM`] stay zero.
pub fn normalize_descriptor(s: &SimilarityMatrix) -> Result<Descriptor> {
    let (c_r, c_f) = (s.c_r(), s.c_f());
    let mut values = vec![0.0; c_r * c_f];
    let mut any = false;
    for b in 0..c_f {
        let col = s.0.column(b);
        let n = l2_norm(&col);
        if n < ZERO_COLUMN_NORM {
            continue;
        }
        any = true;
        for (a, v) in col.iter().enumerate() {
            values[flat_index(a, b, c_r)] = v / n;
        }
    }
    if !any {
        return Err(Error::DegenerateDescriptor);
    }
    let n = l2_norm(&values);
    for v in values.iter_mut() {
        *v /= n;
    }
    Ok(Descriptor::new(values, ""))
}

pub fn cache_queries(params: &QaaParams) -> Result<InferenceCache> {
    Ok(InferenceCache {
        q_f_hat: refine_feature_queries(params)?,
        f_hat: build_reference_codebook(params)?,
    })
}

/// Descriptor for one image using cached query banks.
pub fn aggregate(x: &FeatureMap, params: &QaaParams, cache: &InferenceCache) -> Result<Descriptor> {
    let p_hat = predict_query_features(&cache.q_f_hat, x, params)?;
    let s = cross_query_similarity(&cache.f_hat, &p_hat)?;
    Ok(normalize_descriptor(&s)?.with_id(x.image_id.clone()))
}
