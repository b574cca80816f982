//! Forward computation: text encoder, video encoder, text-video aligner,
//! upsampler and unit predictor.
//!
//! The aligner is single-head scaled dot-product attention with the video
//! stream as query and the text stream as key and value,
//! `C = softmax(H_v H_pᵀ / √d) H_p + H_v`. The context is repeated `n` times
//! per frame to reach the unit rate before the predictor blocks run.

mod config;
mod params;

pub use config::ModelConfig;
pub use params::{
    sinusoidal_positions, FftBlockParams, LayerNormParams, Linear, ModelParams, ParamLayout,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::datamodel::{PhonemeSequence, UnitSequence, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};

/// Dropout behaviour of a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(_) if p <= 0.0 => x,
            Mode::Train(rng) => {
                let (rows, cols) = g.value(x).shape();
                let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                let mask = Matrix::from_fn(rows, cols, |_, _| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                });
                g.mul_const(x, mask)
            }
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// `T_p × d`.
    pub h_p: Matrix<T>,
    /// `T_v × d`.
    pub h_v: Matrix<T>,
    /// Aligner attention `A`, `T_v × T_p`, row-stochastic.
    pub attention: Matrix<T>,
    /// `T_v × d`.
    pub context: Matrix<T>,
    /// `T_z × d`.
    pub upsampled: Matrix<T>,
    /// Raw unit logits, `T_z × K`.
    pub logits: Matrix<T>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    pub h_p: Var,
    pub h_v: Var,
    pub attention: Var,
    pub context: Var,
    pub upsampled: Var,
    pub logits: Var,
    /// Self-attention probabilities of every FFT block, per head.
    pub block_attention: Vec<(String, Vec<Var>)>,
}

impl GraphTrace {
    pub fn extract<T: Real>(&self, g: &Graph<T>) -> ForwardTrace<T> {
        ForwardTrace {
            h_p: g.value(self.h_p).clone(),
            h_v: g.value(self.h_v).clone(),
            attention: g.value(self.attention).clone(),
            context: g.value(self.context).clone(),
            upsampled: g.value(self.upsampled).clone(),
            logits: g.value(self.logits).clone(),
        }
    }
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, location: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(location, "non-finite activations"))
    }
}

fn check_len<T: Real>(params: &ModelParams<T>, len: usize, what: &str) -> Result<()> {
    let max = params.config().max_seq_len;
    if len > max {
        return Err(Error::validation(format!(
            "{what} length {len} exceeds max_seq_len {max}"
        )));
    }
    if len == 0 {
        return Err(Error::validation(format!("{what} is empty")));
    }
    Ok(())
}

fn add_positions<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, x: Var) -> Var {
    let (rows, cols) = g.value(x).shape();
    let pe = params.positions();
    let table = Matrix::from_fn(rows, cols, |r, c| pe.get(r, c));
    let pe = g.constant(table);
    g.add(x, pe)
}

fn bind_linear<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, l: Linear) -> (Var, Var) {
    (
        g.param(l.w, params.tensor(l.w)),
        g.param(l.b, params.tensor(l.b)),
    )
}

fn row_mask<T: Real>(mask: &[bool], cols: usize) -> Matrix<T> {
    Matrix::from_fn(
        mask.len(),
        cols,
        |r, _| if mask[r] { T::one() } else { T::zero() },
    )
}

/// Output of one FFT block.
pub struct BlockOutput {
    pub out: Var,
    /// Per-head self-attention probabilities.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention and a two-layer 1-D convolutional feed-forward
/// sublayer, each followed by residual addition and layer normalisation.
/// Positions with `pad_mask[t] == false` are excluded as keys and zeroed in
/// the output.
pub fn fft_block_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    block: &FftBlockParams,
    x: Var,
    pad_mask: Option<&[bool]>,
    mode: &mut Mode<'_>,
    label: &str,
) -> Result<BlockOutput> {
    let cfg = params.config();
    let d = cfg.d_model;
    let heads = cfg.attention_heads;
    let dh = cfg.head_dim();
    let [k1, k2] = cfg.conv_kernel_sizes;
    let rows = g.value(x).rows();
    if g.value(x).cols() != d {
        return Err(Error::validation(format!(
            "{label}: input width {} does not match d_model {d}",
            g.value(x).cols()
        )));
    }
    if let Some(m) = pad_mask {
        if m.len() != rows {
            return Err(Error::validation(format!(
                "{label}: pad mask length mismatch"
            )));
        }
    }

    let (w_qkv, b_qkv) = bind_linear(g, params, block.qkv);
    let qkv = g.affine(x, w_qkv, b_qkv);
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh);
        let k = g.slice_cols(qkv, d + h * dh, dh);
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh);
        let scores = g.matmul_t(q, false, k, true);
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores, pad_mask);
        attention.push(probs);
        head_outputs.push(g.matmul(probs, v));
    }
    let heads_out = if heads == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)
    };
    let (w_o, b_o) = bind_linear(g, params, block.out);
    let attn_out = g.affine(heads_out, w_o, b_o);
    let attn_out = mode.dropout(g, attn_out, cfg.dropout);
    let res = g.add(x, attn_out);
    let gamma = g.param(block.attn_norm.gamma, params.tensor(block.attn_norm.gamma));
    let beta = g.param(block.attn_norm.beta, params.tensor(block.attn_norm.beta));
    let mut h1 = g.layer_norm(res, gamma, beta);
    if let Some(m) = pad_mask {
        h1 = g.mul_const(h1, row_mask(m, d));
    }

    let cols1 = g.im2col(h1, k1);
    let (w1, b1) = bind_linear(g, params, block.conv1);
    let hidden = g.affine(cols1, w1, b1);
    let hidden = g.relu(hidden);
    let cols2 = if k2 == 1 {
        hidden
    } else {
        g.im2col(hidden, k2)
    };
    let (w2, b2) = bind_linear(g, params, block.conv2);
    let ff = g.affine(cols2, w2, b2);
    let ff = mode.dropout(g, ff, cfg.dropout);
    let res = g.add(h1, ff);
    let gamma = g.param(block.ff_norm.gamma, params.tensor(block.ff_norm.gamma));
    let beta = g.param(block.ff_norm.beta, params.tensor(block.ff_norm.beta));
    let mut out = g.layer_norm(res, gamma, beta);
    if let Some(m) = pad_mask {
        out = g.mul_const(out, row_mask(m, d));
    }
    check_finite(g, out, label)?;
    Ok(BlockOutput { out, attention })
}

fn run_blocks<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    blocks: &[FftBlockParams],
    mut x: Var,
    mode: &mut Mode<'_>,
    prefix: &str,
    record: &mut Vec<(String, Vec<Var>)>,
) -> Result<Var> {
    for (i, block) in blocks.iter().enumerate() {
        let label = format!("{prefix}.block{i}");
        let out = fft_block_graph(g, params, block, x, None, mode, &label)?;
        record.push((label, out.attention));
        x = out.out;
    }
    Ok(x)
}

pub fn text_encoder_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    phonemes: &PhonemeSequence,
    mode: &mut Mode<'_>,
    record: &mut Vec<(String, Vec<Var>)>,
) -> Result<Var> {
    let cfg = params.config();
    if phonemes.vocab_size() != cfg.vocab_size {
        return Err(Error::validation(format!(
            "phoneme vocabulary {} does not match model vocabulary {}",
            phonemes.vocab_size(),
            cfg.vocab_size
        )));
    }
    check_len(params, phonemes.len(), "phoneme sequence")?;
    let layout = params.layout();
    let table = g.param(
        layout.phoneme_embedding,
        params.tensor(layout.phoneme_embedding),
    );
    let x = g.gather_rows(table, phonemes.ids());
    let x = add_positions(g, params, x);
    run_blocks(g, params, &layout.text_blocks, x, mode, "text", record)
}

pub fn video_encoder_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    video: &VideoFeatureSequence,
    mode: &mut Mode<'_>,
    record: &mut Vec<(String, Vec<Var>)>,
) -> Result<Var> {
    let cfg = params.config();
    if video.dim() != cfg.video_dim {
        return Err(Error::validation(format!(
            "video feature dimension {} does not match model input {}",
            video.dim(),
            cfg.video_dim
        )));
    }
    check_len(params, video.len(), "video sequence")?;
    let layout = params.layout();
    let input = g.constant(video.frames().cast());
    let (w, b) = bind_linear(g, params, layout.video_proj);
    let x = g.affine(input, w, b);
    let x = add_positions(g, params, x);
    run_blocks(g, params, &layout.video_blocks, x, mode, "video", record)
}

/// Returns `(A, C)` with `A = softmax(H_v H_pᵀ / √d)` and `C = A H_p + H_v`.
pub fn align_graph<T: Real>(g: &mut Graph<T>, h_p: Var, h_v: Var) -> Result<(Var, Var)> {
    let d = g.value(h_p).cols();
    if g.value(h_v).cols() != d {
        return Err(Error::validation(format!(
            "aligner inputs disagree on hidden size: {} vs {d}",
            g.value(h_v).cols()
        )));
    }
    let scores = g.matmul_t(h_v, false, h_p, true);
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    let attention = g.softmax_rows(scores, None);
    let attended = g.matmul(attention, h_p);
    let context = g.add(attended, h_v);
    check_finite(g, context, "aligner")?;
    Ok((attention, context))
}

pub fn predictor_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    upsampled: Var,
    mode: &mut Mode<'_>,
    record: &mut Vec<(String, Vec<Var>)>,
) -> Result<Var> {
    let layout = params.layout();
    check_len(params, g.value(upsampled).rows(), "upsampled context")?;
    let x = run_blocks(
        g,
        params,
        &layout.predictor_blocks,
        upsampled,
        mode,
        "predictor",
        record,
    )?;
    let (w, b) = bind_linear(g, params, layout.classifier);
    let logits = g.affine(x, w, b);
    check_finite(g, logits, "predictor.classifier")?;
    Ok(logits)
}

/// Builds the full forward graph.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    phonemes: &PhonemeSequence,
    video: &VideoFeatureSequence,
    n: usize,
    mode: &mut Mode<'_>,
) -> Result<GraphTrace> {
    if n < 1 {
        return Err(Error::validation("upsampling ratio n must be at least 1"));
    }
    let mut record = Vec::new();
    let h_p = text_encoder_graph(g, params, phonemes, mode, &mut record)?;
    let h_v = video_encoder_graph(g, params, video, mode, &mut record)?;
    let (attention, context) = align_graph(g, h_p, h_v)?;
    let upsampled = g.repeat_rows(context, n);
    let logits = predictor_graph(g, params, upsampled, mode, &mut record)?;
    Ok(GraphTrace {
        h_p,
        h_v,
        attention,
        context,
        upsampled,
        logits,
        block_attention: record,
    })
}

pub fn forward<T: Real>(
    params: &ModelParams<T>,
    phonemes: &PhonemeSequence,
    video: &VideoFeatureSequence,
    n: usize,
    mode: &mut Mode<'_>,
) -> Result<ForwardTrace<T>> {
    let mut g = Graph::new();
    let trace = forward_graph(&mut g, params, phonemes, video, n, mode)?;
    Ok(trace.extract(&g))
}

/// Text encoder output `H_p` in eval mode.
pub fn encode_text<T: Real>(
    params: &ModelParams<T>,
    phonemes: &PhonemeSequence,
) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let v = text_encoder_graph(&mut g, params, phonemes, &mut Mode::Eval, &mut Vec::new())?;
    Ok(g.value(v).clone())
}

/// Video encoder output `H_v` in eval mode.
pub fn encode_video<T: Real>(
    params: &ModelParams<T>,
    video: &VideoFeatureSequence,
) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let v = video_encoder_graph(&mut g, params, video, &mut Mode::Eval, &mut Vec::new())?;
    Ok(g.value(v).clone())
}

/// One FFT block in eval mode; returns the output and per-head attention.
pub fn fft_block<T: Real>(
    params: &ModelParams<T>,
    block: &FftBlockParams,
    x: &Matrix<T>,
    pad_mask: Option<&[bool]>,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    if !x.is_finite() {
        return Err(Error::numeric("fft_block input", "non-finite values"));
    }
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let out = fft_block_graph(
        &mut g,
        params,
        block,
        input,
        pad_mask,
        &mut Mode::Eval,
        "block",
    )?;
    let attn = out.attention.iter().map(|&a| g.value(a).clone()).collect();
    Ok((g.value(out.out).clone(), attn))
}

pub fn align<T: Real>(h_p: &Matrix<T>, h_v: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut g = Graph::new();
    let p = g.constant(h_p.clone());
    let v = g.constant(h_v.clone());
    let (a, c) = align_graph(&mut g, p, v)?;
    Ok((g.value(a).clone(), g.value(c).clone()))
}

/// Repeats every row of `context` `n` times.
pub fn upsample<T: Real>(context: &Matrix<T>, n: usize) -> Result<Matrix<T>> {
    if n < 1 {
        return Err(Error::validation("upsampling ratio n must be at least 1"));
    }
    let mut g = Graph::new();
    let c = g.constant(context.clone());
    let up = g.repeat_rows(c, n);
    Ok(g.value(up).clone())
}

/// Predictor blocks and classifier over an upsampled context, eval mode.
pub fn predict_units<T: Real>(params: &ModelParams<T>, upsampled: &Matrix<T>) -> Result<Matrix<T>> {
    if upsampled.cols() != params.config().d_model {
        return Err(Error::validation(
            "upsampled context width does not match d_model",
        ));
    }
    let mut g = Graph::new();
    let c = g.constant(upsampled.clone());
    let logits = predictor_graph(&mut g, params, c, &mut Mode::Eval, &mut Vec::new())?;
    Ok(g.value(logits).clone())
}

/// Per-frame argmax, ties to the smallest unit index.
pub fn decode_units<T: Real>(logits: &Matrix<T>, unit_rate_hz: f64) -> Result<UnitSequence> {
    UnitSequence::new(logits.argmax_rows(), logits.cols(), unit_rate_hz)
}
