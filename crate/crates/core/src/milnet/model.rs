//! Forward and reverse pass of the gated attention-MIL regressor.
//!
//! For tile features `h_k`:
//!
//! ```text
//! e_k = relu(W_enc h_k + b_enc)
//! l_k = w . (tanh(V e_k + b_v) * sigmoid(U e_k + b_u))
//! a   = softmax(l)                      over the tiles of the bag
//! s_k = sigmoid(w_s . (m_k * e_k) + b_s)   m_k: dropout mask, 1 in eval
//! y   = sum_k a_k s_k
//! ```
//!
//! Dropout only touches the score-head input; attention always sees the
//! undropped embeddings.

use rand::{Rng, RngCore};

use super::linalg::{gemm, Op};
use super::params::{Gradients, ModelParams, ModelShape, Tensor};
use crate::bagio::FeatureBag;
use crate::error::{Error, Result};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multiplicative score-head mask, `n_tiles x enc_out`, with inverted
/// scaling already folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub n_tiles: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DropoutMask {
    /// Whole tiles are dropped with probability `tile_p`, single features
    /// with probability `feature_p`; survivors are scaled by the inverse
    /// keep probabilities.
    pub fn sample<R: Rng + ?Sized>(
        n_tiles: usize,
        width: usize,
        feature_p: f64,
        tile_p: f64,
        rng: &mut R,
    ) -> Self {
        let tile_scale = if tile_p > 0.0 { 1.0 / (1.0 - tile_p) } else { 1.0 };
        let feat_scale = if feature_p > 0.0 { 1.0 / (1.0 - feature_p) } else { 1.0 };
        let mut values = Vec::with_capacity(n_tiles * width);
        for _ in 0..n_tiles {
            let tile_keep = tile_p <= 0.0 || rng.random::<f64>() >= tile_p;
            for _ in 0..width {
                let feat_keep = feature_p <= 0.0 || rng.random::<f64>() >= feature_p;
                values.push(if tile_keep && feat_keep { tile_scale * feat_scale } else { 0.0 });
            }
        }
        Self { n_tiles, width, values }
    }
}

pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut dyn RngCore, feature_dropout: f64, tile_dropout: f64 },
}

/// Everything the reverse pass needs, plus the per-tile readouts.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub shape: ModelShape,
    pub n_tiles: usize,
    /// Input features widened to f64, `n x input_dim`.
    pub inputs: Vec<f64>,
    /// Post-encoder embeddings `e_k` (after ReLU), `n x enc_out`.
    pub embeddings: Vec<f64>,
    /// `tanh` branch of the gate, `n x attn_hidden`.
    pub gate_tanh: Vec<f64>,
    /// `sigmoid` branch of the gate, `n x attn_hidden`.
    pub gate_sigmoid: Vec<f64>,
    pub attention_logits: Vec<f64>,
    pub attention: Vec<f64>,
    pub tile_scores: Vec<f64>,
    pub mask: Option<DropoutMask>,
    pub prediction: f64,
}

pub fn forward(params: &ModelParams, bag: &FeatureBag, mode: Mode<'_>) -> Result<ForwardTrace> {
    let mask = match mode {
        Mode::Eval => None,
        Mode::Train { rng, feature_dropout, tile_dropout } => Some(DropoutMask::sample(
            bag.n_tiles(),
            params.shape.enc_out,
            feature_dropout,
            tile_dropout,
            rng,
        )),
    };
    forward_masked(params, bag, mask)
}

/// Eval-mode slide prediction.
pub fn predict(params: &ModelParams, bag: &FeatureBag) -> Result<f64> {
    Ok(forward_masked(params, bag, None)?.prediction)
}

pub fn forward_masked(
    params: &ModelParams,
    bag: &FeatureBag,
    mask: Option<DropoutMask>,
) -> Result<ForwardTrace> {
    let shape = params.shape;
    let (d, e, a) = (shape.input_dim, shape.enc_out, shape.attn_hidden);
    if bag.dim != d {
        return Err(Error::DimMismatch { expected: d, found: bag.dim });
    }
    let n = bag.n_tiles();
    if n == 0 || bag.features.len() != n * d {
        return Err(Error::invalid(format!("bag {} has an inconsistent feature matrix", bag.slide_id)));
    }
    if let Some(m) = &mask {
        if m.n_tiles != n || m.width != e {
            return Err(Error::invalid("dropout mask does not match bag and model"));
        }
    }
    let mut inputs = Vec::with_capacity(n * d);
    for (i, &v) in bag.features.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("bag {} tile {} feature {}", bag.slide_id, i / d, i % d)));
        }
        inputs.push(v as f64);
    }

    let mut embeddings = vec![0.0; n * e];
    gemm(n, d, e, 1.0, &inputs, Op::Plain, params.get(Tensor::EncW), Op::Transposed, 0.0, &mut embeddings);
    let enc_b = params.get(Tensor::EncB);
    for row in embeddings.chunks_exact_mut(e) {
        for (v, b) in row.iter_mut().zip(enc_b) {
            *v = (*v + b).max(0.0);
        }
    }

    let mut gate_tanh = vec![0.0; n * a];
    let mut gate_sigmoid = vec![0.0; n * a];
    gemm(n, e, a, 1.0, &embeddings, Op::Plain, params.get(Tensor::AttnV), Op::Transposed, 0.0, &mut gate_tanh);
    gemm(n, e, a, 1.0, &embeddings, Op::Plain, params.get(Tensor::AttnU), Op::Transposed, 0.0, &mut gate_sigmoid);
    let (vb, ub, w) = (params.get(Tensor::AttnVB), params.get(Tensor::AttnUB), params.get(Tensor::AttnW));
    let mut attention_logits = Vec::with_capacity(n);
    for (tv, tu) in gate_tanh.chunks_exact_mut(a).zip(gate_sigmoid.chunks_exact_mut(a)) {
        let mut logit = 0.0;
        for j in 0..a {
            tv[j] = (tv[j] + vb[j]).tanh();
            tu[j] = sigmoid(tu[j] + ub[j]);
            logit += w[j] * tv[j] * tu[j];
        }
        attention_logits.push(logit);
    }

    let max = attention_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut attention: Vec<f64> = attention_logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = attention.iter().sum();
    attention.iter_mut().for_each(|v| *v /= total);

    let (sw, sb) = (params.get(Tensor::ScoreW), params.get(Tensor::ScoreB)[0]);
    let tile_scores: Vec<f64> = embeddings
        .chunks_exact(e)
        .enumerate()
        .map(|(k, row)| {
            let z: f64 = match &mask {
                Some(m) => {
                    let mk = &m.values[k * e..(k + 1) * e];
                    row.iter().zip(mk).zip(sw).map(|((x, m), w)| x * m * w).sum()
                }
                None => row.iter().zip(sw).map(|(x, w)| x * w).sum(),
            };
            sigmoid(z + sb)
        })
        .collect();
    let prediction = attention.iter().zip(&tile_scores).map(|(a, s)| a * s).sum();

    Ok(ForwardTrace {
        shape,
        n_tiles: n,
        inputs,
        embeddings,
        gate_tanh,
        gate_sigmoid,
        attention_logits,
        attention,
        tile_scores,
        mask,
        prediction,
    })
}

/// Squared error on the fraction scale.
pub fn loss(prediction: f64, label: f64) -> f64 {
    (prediction - label).powi(2)
}

pub fn loss_grad(prediction: f64, label: f64) -> f64 {
    2.0 * (prediction - label)
}

/// Exact gradients of a loss with `dL/dy = upstream`, under the masks
/// recorded in the trace.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, upstream: f64) -> Result<Gradients> {
    let shape = params.shape;
    if trace.shape != shape {
        return Err(Error::invalid("trace was produced by a model of a different shape"));
    }
    let (d, e, a, n) = (shape.input_dim, shape.enc_out, shape.attn_hidden, trace.n_tiles);
    if trace.inputs.len() != n * d || trace.embeddings.len() != n * e || trace.gate_tanh.len() != n * a {
        return Err(Error::invalid("stale forward trace"));
    }
    let mut grads = Gradients::zeros(shape);
    let y = trace.prediction;

    // Score head.
    let dz: Vec<f64> = trace
        .attention
        .iter()
        .zip(&trace.tile_scores)
        .map(|(a, s)| upstream * a * s * (1.0 - s))
        .collect();
    let sw = params.get(Tensor::ScoreW).to_vec();
    let mut d_emb = vec![0.0; n * e];
    {
        let g_sw = grads.get_mut(Tensor::ScoreW);
        for k in 0..n {
            let row = &trace.embeddings[k * e..(k + 1) * e];
            let out = &mut d_emb[k * e..(k + 1) * e];
            match &trace.mask {
                Some(m) => {
                    let mk = &m.values[k * e..(k + 1) * e];
                    for j in 0..e {
                        g_sw[j] += dz[k] * row[j] * mk[j];
                        out[j] = dz[k] * sw[j] * mk[j];
                    }
                }
                None => {
                    for j in 0..e {
                        g_sw[j] += dz[k] * row[j];
                        out[j] = dz[k] * sw[j];
                    }
                }
            }
        }
    }
    grads.get_mut(Tensor::ScoreB)[0] = dz.iter().sum();

    // Softmax: dl_k = a_k (da_k - sum_j a_j da_j) with da_k = upstream * s_k.
    let dl: Vec<f64> = trace
        .attention
        .iter()
        .zip(&trace.tile_scores)
        .map(|(a, s)| a * upstream * (s - y))
        .collect();

    // Gated attention.
    let w = params.get(Tensor::AttnW).to_vec();
    let mut dqv = vec![0.0; n * a];
    let mut dqu = vec![0.0; n * a];
    {
        let g_w = grads.get_mut(Tensor::AttnW);
        for k in 0..n {
            for j in 0..a {
                let i = k * a + j;
                let (tv, tu) = (trace.gate_tanh[i], trace.gate_sigmoid[i]);
                g_w[j] += dl[k] * tv * tu;
                let dg = dl[k] * w[j];
                dqv[i] = dg * tu * (1.0 - tv * tv);
                dqu[i] = dg * tv * tu * (1.0 - tu);
            }
        }
    }
    for (t, dq) in [(Tensor::AttnVB, &dqv), (Tensor::AttnUB, &dqu)] {
        let g = grads.get_mut(t);
        for row in dq.chunks_exact(a) {
            for (gj, v) in g.iter_mut().zip(row) {
                *gj += v;
            }
        }
    }
    gemm(a, n, e, 1.0, &dqv, Op::Transposed, &trace.embeddings, Op::Plain, 0.0, grads.get_mut(Tensor::AttnV));
    gemm(a, n, e, 1.0, &dqu, Op::Transposed, &trace.embeddings, Op::Plain, 0.0, grads.get_mut(Tensor::AttnU));
    gemm(n, a, e, 1.0, &dqv, Op::Plain, params.get(Tensor::AttnV), Op::Plain, 1.0, &mut d_emb);
    gemm(n, a, e, 1.0, &dqu, Op::Plain, params.get(Tensor::AttnU), Op::Plain, 1.0, &mut d_emb);

    // ReLU and post-encoder.
    for (g, &x) in d_emb.iter_mut().zip(&trace.embeddings) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    {
        let g_b = grads.get_mut(Tensor::EncB);
        for row in d_emb.chunks_exact(e) {
            for (gj, v) in g_b.iter_mut().zip(row) {
                *gj += v;
            }
        }
    }
    gemm(e, n, d, 1.0, &d_emb, Op::Transposed, &trace.inputs, Op::Plain, 0.0, grads.get_mut(Tensor::EncW));
    Ok(grads)
}
