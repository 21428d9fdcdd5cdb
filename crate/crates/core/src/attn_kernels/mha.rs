use rand::Rng;

use super::{linear, linear_backward, softmax_rows, softmax_rows_backward, Matrix};
use crate::error::{Error, Result};

/// Weights of one multi-head attention block. All projections are
/// `d_model × d_model` with biases; there is no layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub b_o: Vec<f64>,
    pub heads: usize,
}

impl MhaParams {
    /// Uniform init in `±1/sqrt(d_model)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d_model, heads)?;
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut w = || Matrix::random_uniform(d_model, d_model, bound, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let mut b = || -> Vec<f64> { (0..d_model).map(|_| rng.random_range(-bound..=bound)).collect() };
        Ok(MhaParams {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: b(),
            b_k: b(),
            b_v: b(),
            b_o: b(),
            heads,
        })
    }

    pub fn zeros(d_model: usize, heads: usize) -> Self {
        let w = Matrix::zeros(d_model, d_model);
        MhaParams {
            w_q: w.clone(),
            w_k: w.clone(),
            w_v: w.clone(),
            w_o: w,
            b_q: vec![0.0; d_model],
            b_k: vec![0.0; d_model],
            b_v: vec![0.0; d_model],
            b_o: vec![0.0; d_model],
            heads,
        }
    }

    /// Identity projections and zero biases.
    pub fn identity(d_model: usize, heads: usize) -> Self {
        let id = Matrix::identity(d_model);
        MhaParams {
            w_q: id.clone(),
            w_k: id.clone(),
            w_v: id.clone(),
            w_o: id,
            ..MhaParams::zeros(d_model, heads)
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        check_heads(d, self.heads)?;
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != (d, d) {
                return Err(Error::dim("MhaParams", format!("d_model {d}"), format!("{name} {}", w.shape_str())));
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        for (name, b) in [("b_q", &self.b_q), ("b_k", &self.b_k), ("b_v", &self.b_v), ("b_o", &self.b_o)] {
            if b.len() != d {
                return Err(Error::dim("MhaParams", format!("d_model {d}"), format!("{name} len {}", b.len())));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model();
        4 * d * d + 4 * d
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.w_q"), self.w_q.data()));
        out.push((format!("{prefix}.w_k"), self.w_k.data()));
        out.push((format!("{prefix}.w_v"), self.w_v.data()));
        out.push((format!("{prefix}.w_o"), self.w_o.data()));
        out.push((format!("{prefix}.b_q"), &self.b_q));
        out.push((format!("{prefix}.b_k"), &self.b_k));
        out.push((format!("{prefix}.b_v"), &self.b_v));
        out.push((format!("{prefix}.b_o"), &self.b_o));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.w_q"), self.w_q.data_mut()));
        out.push((format!("{prefix}.w_k"), self.w_k.data_mut()));
        out.push((format!("{prefix}.w_v"), self.w_v.data_mut()));
        out.push((format!("{prefix}.w_o"), self.w_o.data_mut()));
        out.push((format!("{prefix}.b_q"), &mut self.b_q));
        out.push((format!("{prefix}.b_k"), &mut self.b_k));
        out.push((format!("{prefix}.b_v"), &mut self.b_v));
        out.push((format!("{prefix}.b_o"), &mut self.b_o));
    }

    /// `self += other`, elementwise over every tensor.
    pub fn accumulate(&mut self, other: &MhaParams) {
        let mut dst = Vec::new();
        self.visit_mut("", &mut dst);
        let mut src = Vec::new();
        other.visit("", &mut src);
        for ((_, d), (_, s)) in dst.into_iter().zip(src) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by heads {heads}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MhaOutput {
    pub out: Matrix,
    /// Attention weights per head, each `q.rows × k.rows`.
    pub attn: Vec<Matrix>,
}

/// Intermediates saved by [`mha_forward_taped`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MhaTape {
    q_in: Matrix,
    k_in: Matrix,
    v_in: Matrix,
    qp: Matrix,
    kp: Matrix,
    vp: Matrix,
    attn: Vec<Matrix>,
    concat: Matrix,
    heads: usize,
    d_model: usize,
}

/// Gradients of a multi-head attention call.
#[derive(Clone, Debug)]
pub struct MhaGrads {
    pub params: MhaParams,
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

pub fn mha_forward(q: &Matrix, k: &Matrix, v: &Matrix, params: &MhaParams) -> Result<MhaOutput> {
    mha_forward_taped(q, k, v, params).map(|(out, _)| out)
}

pub fn mha_forward_taped(q: &Matrix, k: &Matrix, v: &Matrix, params: &MhaParams) -> Result<(MhaOutput, MhaTape)> {
    let d = params.d_model();
    check_heads(d, params.heads)?;
    if q.cols() != d || k.cols() != d || v.cols() != d {
        return Err(Error::dim(
            "mha_forward",
            format!("d_model {d}"),
            format!("q {} k {} v {}", q.shape_str(), k.shape_str(), v.shape_str()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::dim("mha_forward", format!("k {}", k.shape_str()), format!("v {}", v.shape_str())));
    }

    let qp = linear(q, &params.w_q, &params.b_q)?;
    let kp = linear(k, &params.w_k, &params.b_k)?;
    let vp = linear(v, &params.w_v, &params.b_v)?;

    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(q.rows(), d);
    let mut attn = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = qp.column_block(h * dh, dh);
        let kh = kp.column_block(h * dh, dh);
        let vh = vp.column_block(h * dh, dh);
        let scores = qh.matmul_t(&kh)?.scale(scale);
        let a = softmax_rows(&scores);
        concat.set_column_block(h * dh, &a.matmul(&vh)?);
        attn.push(a);
    }
    let out = linear(&concat, &params.w_o, &params.b_o)?;

    let tape = MhaTape {
        q_in: q.clone(),
        k_in: k.clone(),
        v_in: v.clone(),
        qp,
        kp,
        vp,
        attn: attn.clone(),
        concat,
        heads: params.heads,
        d_model: d,
    };
    Ok((MhaOutput { out, attn }, tape))
}

pub fn mha_backward(tape: &MhaTape, params: &MhaParams, d_out: &Matrix) -> Result<MhaGrads> {
    if params.heads != tape.heads || params.d_model() != tape.d_model {
        return Err(Error::State(format!(
            "tape recorded d_model {} heads {}, params have d_model {} heads {}",
            tape.d_model,
            tape.heads,
            params.d_model(),
            params.heads
        )));
    }
    if d_out.shape() != (tape.q_in.rows(), tape.d_model) {
        return Err(Error::State(format!(
            "d_out {} does not match forward output {}x{}",
            d_out.shape_str(),
            tape.q_in.rows(),
            tape.d_model
        )));
    }

    let d = tape.d_model;
    let dh = d / tape.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (d_concat, d_wo, d_bo) = linear_backward(&tape.concat, &params.w_o, d_out)?;

    let mut d_qp = Matrix::zeros(tape.qp.rows(), d);
    let mut d_kp = Matrix::zeros(tape.kp.rows(), d);
    let mut d_vp = Matrix::zeros(tape.vp.rows(), d);
    for h in 0..tape.heads {
        let a = &tape.attn[h];
        let qh = tape.qp.column_block(h * dh, dh);
        let kh = tape.kp.column_block(h * dh, dh);
        let vh = tape.vp.column_block(h * dh, dh);
        let d_oh = d_concat.column_block(h * dh, dh);

        let d_a = d_oh.matmul_t(&vh)?;
        d_vp.set_column_block(h * dh, &a.t_matmul(&d_oh)?);
        let d_scores = softmax_rows_backward(a, &d_a).scale(scale);
        d_qp.set_column_block(h * dh, &d_scores.matmul(&kh)?);
        d_kp.set_column_block(h * dh, &d_scores.t_matmul(&qh)?);
    }

    let (d_q, d_wq, d_bq) = linear_backward(&tape.q_in, &params.w_q, &d_qp)?;
    let (d_k, d_wk, d_bk) = linear_backward(&tape.k_in, &params.w_k, &d_kp)?;
    let (d_v, d_wv, d_bv) = linear_backward(&tape.v_in, &params.w_v, &d_vp)?;

    Ok(MhaGrads {
        params: MhaParams {
            w_q: d_wq,
            w_k: d_wk,
            w_v: d_wv,
            w_o: d_wo,
            b_q: d_bq,
            b_k: d_bk,
            b_v: d_bv,
            b_o: d_bo,
            heads: tape.heads,
        },
        d_q,
        d_k,
        d_v,
    })
}
