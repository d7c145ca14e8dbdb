//! Decoder-only transformer, written out by hand.
//!
//! Architecture: learned token + position embeddings, pre-norm blocks
//! (RMSNorm → causal multi-head attention → residual, RMSNorm → GELU MLP →
//! residual), a final RMSNorm, and an output head tied to the token
//! embedding. No biases anywhere. The model is generic over the storage
//! scalar: f32 in production, f64 for gradient verification.
//!
//! Layers carry their *original* indices in `layer_ids`, so a pruned model
//! still names its tensors by the indices they had in the dense parent.

mod backward;
mod checkpoint;
mod optim;
mod surgery;

pub use backward::{loss_and_grads, seq_loss_and_grads, GradBuf};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_embedding, parse_checkpoint, save_checkpoint,
    save_embedding, CheckpointExtra, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{AdamW, OptState};
pub use surgery::remove_layers;

use crate::error::{Error, Result};
use crate::num::{self, Real};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size >= 1
            && self.d_model >= 1
            && self.n_layers >= 2
            && self.n_heads >= 1
            && self.d_ff >= 1
            && self.max_seq_len >= 1
            && self.d_model % self.n_heads == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid model config: {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one block: two norm gains, four attention projections,
    /// two MLP projections.
    pub fn per_layer_params(&self) -> usize {
        2 * self.d_model + 4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff
    }

    /// Total parameter count at `n_live` surviving layers.
    pub fn param_count(&self, n_live: usize) -> usize {
        self.vocab_size * self.d_model          // token embedding (tied head)
            + self.max_seq_len * self.d_model   // position embedding
            + n_live * self.per_layer_params()
            + self.d_model // final norm gain
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<R> {
    pub ln1_g: Tensor<R>,
    pub wq: Tensor<R>,
    pub wk: Tensor<R>,
    pub wv: Tensor<R>,
    pub wo: Tensor<R>,
    pub ln2_g: Tensor<R>,
    pub w1: Tensor<R>,
    pub w2: Tensor<R>,
}

/// Tensor slot names within one layer, in canonical order.
pub const LAYER_SLOTS: [&str; 8] = ["ln1.g", "wq", "wk", "wv", "wo", "ln2.g", "w1", "w2"];

impl<R: Real> LayerParams<R> {
    fn slot(&self, name: &str) -> Option<&Tensor<R>> {
        match name {
            "ln1.g" => Some(&self.ln1_g),
            "wq" => Some(&self.wq),
            "wk" => Some(&self.wk),
            "wv" => Some(&self.wv),
            "wo" => Some(&self.wo),
            "ln2.g" => Some(&self.ln2_g),
            "w1" => Some(&self.w1),
            "w2" => Some(&self.w2),
            _ => None,
        }
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        match name {
            "ln1.g" => Some(&mut self.ln1_g),
            "wq" => Some(&mut self.wq),
            "wk" => Some(&mut self.wk),
            "wv" => Some(&mut self.wv),
            "wo" => Some(&mut self.wo),
            "ln2.g" => Some(&mut self.ln2_g),
            "w1" => Some(&mut self.w1),
            "w2" => Some(&mut self.w2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<R> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<R>,
    pub pos_emb: Tensor<R>,
    pub layers: Vec<LayerParams<R>>,
    /// Original index of each surviving layer, strictly increasing.
    pub layer_ids: Vec<usize>,
    pub ln_f_g: Tensor<R>,
}

impl<R: Real> TransformerModel<R> {
    pub fn n_live_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count(self.layers.len())
    }

    /// Canonical parameter names: embeddings, then each surviving layer's
    /// slots under its original index, then the final norm.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for &id in &self.layer_ids {
            for slot in LAYER_SLOTS {
                names.push(format!("layers.{id}.{slot}"));
            }
        }
        names.push("ln_f.g".to_string());
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        match name {
            "tok_emb" => return Some(&self.tok_emb),
            "pos_emb" => return Some(&self.pos_emb),
            "ln_f.g" => return Some(&self.ln_f_g),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (id, slot) = rest.split_once('.')?;
        let id: usize = id.parse().ok()?;
        let pos = self.layer_ids.iter().position(|&l| l == id)?;
        self.layers[pos].slot(slot)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "ln_f.g" => return Some(&mut self.ln_f_g),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (id, slot) = rest.split_once('.')?;
        let id: usize = id.parse().ok()?;
        let pos = self.layer_ids.iter().position(|&l| l == id)?;
        self.layers[pos].slot_mut(slot)
    }

    /// Convert storage scalar (used to move f32 checkpoints onto the f64
    /// verification path and back).
    pub fn cast<S: Real>(&self) -> TransformerModel<S> {
        fn conv<R: Real, S: Real>(t: &Tensor<R>) -> Tensor<S> {
            Tensor {
                shape: t.shape.clone(),
                data: t.data.iter().map(|&x| S::from_f64(x.to_f64())).collect(),
            }
        }
        TransformerModel {
            config: self.config,
            tok_emb: conv(&self.tok_emb),
            pos_emb: conv(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: conv(&l.ln1_g),
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    ln2_g: conv(&l.ln2_g),
                    w1: conv(&l.w1),
                    w2: conv(&l.w2),
                })
                .collect(),
            layer_ids: self.layer_ids.clone(),
            ln_f_g: conv(&self.ln_f_g),
        }
    }
}

/// Deterministic initialization: every weight is drawn from normal(0, 0.02)
/// in a fixed order, except the residual-branch output projections (wo, w2)
/// which use std 0.02/√(2L) so residual variance stays bounded with depth.
/// Norm gains start at 1. Draws happen in f64, so f32 and f64 models built
/// from the same seed agree to rounding.
pub fn init_model<R: Real>(config: ModelConfig, seed: u64) -> Result<TransformerModel<R>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, 0.02).expect("valid std");
    let resid = Normal::new(0.0f64, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");

    let draw = |shape: &[usize], dist: &Normal<f64>, rng: &mut ChaCha8Rng| -> Tensor<R> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| R::from_f64(dist.sample(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    };
    let ones = |n: usize| Tensor {
        shape: vec![n],
        data: vec![R::ONE; n],
    };

    let d = config.d_model;
    let tok_emb = draw(&[config.vocab_size, d], &base, &mut rng);
    let pos_emb = draw(&[config.max_seq_len, d], &base, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_g: ones(d),
            wq: draw(&[d, d], &base, &mut rng),
            wk: draw(&[d, d], &base, &mut rng),
            wv: draw(&[d, d], &base, &mut rng),
            wo: draw(&[d, d], &resid, &mut rng),
            ln2_g: ones(d),
            w1: draw(&[d, config.d_ff], &base, &mut rng),
            w2: draw(&[config.d_ff, d], &resid, &mut rng),
        });
    }
    Ok(TransformerModel {
        config,
        tok_emb,
        pos_emb,
        layers,
        layer_ids: (0..config.n_layers).collect(),
        ln_f_g: ones(d),
    })
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<R> {
    /// `[seq_len, vocab_size]` next-token logits.
    pub logits: Vec<R>,
    /// Row width of each hidden state.
    pub d_model: usize,
    /// When capture was requested: L+1 hidden states X_0..X_L, each
    /// `[seq_len, d_model]` — X_i is the input to live layer i, X_L the
    /// output of the last layer (before the final norm).
    pub hidden: Option<Vec<Vec<R>>>,
}

/// Per-layer activations recorded during the forward pass, consumed by
/// backpropagation.
pub(crate) struct LayerTape<R> {
    x_in: Vec<R>,      // [T, d] block input
    inv_rms1: Vec<f64>, // [T]
    a: Vec<R>,         // [T, d] post-norm attention input
    q: Vec<R>,         // [T, d]
    k: Vec<R>,         // [T, d]
    v: Vec<R>,         // [T, d]
    attnw: Vec<R>,     // [heads, T, T] row-softmaxed, zero above diagonal
    ctx: Vec<R>,       // [T, d] attention context before wo
    x_mid: Vec<R>,     // [T, d] after attention residual
    inv_rms2: Vec<f64>, // [T]
    b: Vec<R>,         // [T, d] post-norm MLP input
    ffn_pre: Vec<R>,   // [T, d_ff] pre-activation
    ffn_act: Vec<R>,   // [T, d_ff] after GELU
}

pub(crate) struct Tape<R> {
    layers: Vec<LayerTape<R>>,
    x_final: Vec<R>,    // [T, d] last block output
    inv_rms_f: Vec<f64>, // [T]
    h: Vec<R>,          // [T, d] final-norm output fed to the head
}

/// RMS normalization of each row: `y = x / rms(x) * g`. Returns 1/rms per
/// row for the backward pass.
fn rmsnorm_rows<R: Real>(x: &[R], g: &[R], seq_len: usize, d: usize, out: &mut Vec<R>, inv_out: &mut Vec<f64>) {
    out.clear();
    out.reserve(seq_len * d);
    inv_out.clear();
    for t in 0..seq_len {
        let row = &x[t * d..(t + 1) * d];
        let ms = num::sumsq(row) / d as f64;
        let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
        inv_out.push(inv);
        for j in 0..d {
            out.push(R::from_f64(row[j].to_f64() * inv * g[j].to_f64()));
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // √(2/π)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Causal self-attention for one block. `q,k,v,ctx` are `[T, d]` with head
/// h occupying the column band `h·dh..(h+1)·dh`; `attnw` is filled as
/// `[heads, T, T]` with zeros above the diagonal.
fn attention<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    seq_len: usize,
    n_heads: usize,
    head_dim: usize,
    attnw: &mut Vec<R>,
    ctx: &mut Vec<R>,
) {
    let d = n_heads * head_dim;
    attnw.clear();
    attnw.resize(n_heads * seq_len * seq_len, R::ZERO);
    ctx.clear();
    ctx.resize(seq_len * d, R::ZERO);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut acc = vec![0.0f64; head_dim];
    for h in 0..n_heads {
        let col = h * head_dim;
        let wbase = h * seq_len * seq_len;
        for t in 0..seq_len {
            let qrow = &q[t * d + col..t * d + col + head_dim];
            let wrow = &mut attnw[wbase + t * seq_len..wbase + t * seq_len + seq_len];
            for u in 0..=t {
                let krow = &k[u * d + col..u * d + col + head_dim];
                wrow[u] = R::from_f64(num::dot(qrow, krow) * scale);
            }
            num::softmax_in_place(&mut wrow[..=t]);
            acc.iter_mut().for_each(|x| *x = 0.0);
            for u in 0..=t {
                let w = wrow[u].to_f64();
                let vrow = &v[u * d + col..u * d + col + head_dim];
                for j in 0..head_dim {
                    acc[j] += w * vrow[j].to_f64();
                }
            }
            for j in 0..head_dim {
                ctx[t * d + col + j] = R::from_f64(acc[j]);
            }
        }
    }
}

/// Shared forward implementation. Returns the trace and, when requested,
/// the full activation tape for backpropagation.
pub(crate) fn forward_impl<R: Real>(
    model: &TransformerModel<R>,
    tokens: &[u32],
    capture_hidden: bool,
    want_tape: bool,
) -> Result<(ForwardTrace<R>, Option<Tape<R>>)> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let seq_len = tokens.len();
    if seq_len == 0 {
        return Err(Error::Data("forward: empty token sequence".into()));
    }
    if seq_len > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "forward: sequence length {seq_len} exceeds max {}",
            cfg.max_seq_len
        )));
    }
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Data(format!(
                "forward: token id {id} at position {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }

    let mut x = vec![R::ZERO; seq_len * d];
    for (t, &id) in tokens.iter().enumerate() {
        let e = &model.tok_emb.data[id as usize * d..(id as usize + 1) * d];
        let p = &model.pos_emb.data[t * d..(t + 1) * d];
        for j in 0..d {
            x[t * d + j] = e[j] + p[j];
        }
    }

    let mut hidden = if capture_hidden {
        Some(Vec::with_capacity(model.layers.len() + 1))
    } else {
        None
    };
    let mut tapes = if want_tape {
        Some(Vec::with_capacity(model.layers.len()))
    } else {
        None
    };

    let mut a = Vec::new();
    let mut inv1 = Vec::new();
    let mut b = Vec::new();
    let mut inv2 = Vec::new();
    for layer in &model.layers {
        if let Some(h) = hidden.as_mut() {
            h.push(x.clone());
        }
        // Attention sub-block.
        rmsnorm_rows(&x, &layer.ln1_g.data, seq_len, d, &mut a, &mut inv1);
        let mut q = vec![R::ZERO; seq_len * d];
        let mut k = vec![R::ZERO; seq_len * d];
        let mut v = vec![R::ZERO; seq_len * d];
        num::matmul(&a, &layer.wq.data, seq_len, d, d, &mut q);
        num::matmul(&a, &layer.wk.data, seq_len, d, d, &mut k);
        num::matmul(&a, &layer.wv.data, seq_len, d, d, &mut v);
        let mut attnw = Vec::new();
        let mut ctx = Vec::new();
        attention(&q, &k, &v, seq_len, cfg.n_heads, cfg.head_dim(), &mut attnw, &mut ctx);
        let mut attn_out = vec![R::ZERO; seq_len * d];
        num::matmul(&ctx, &layer.wo.data, seq_len, d, d, &mut attn_out);
        let x_in = if want_tape { x.clone() } else { Vec::new() };
        for (xi, &o) in x.iter_mut().zip(attn_out.iter()) {
            *xi += o;
        }
        let x_mid = if want_tape { x.clone() } else { Vec::new() };
        // MLP sub-block.
        rmsnorm_rows(&x, &layer.ln2_g.data, seq_len, d, &mut b, &mut inv2);
        let mut ffn_pre = vec![R::ZERO; seq_len * cfg.d_ff];
        num::matmul(&b, &layer.w1.data, seq_len, d, cfg.d_ff, &mut ffn_pre);
        let ffn_act: Vec<R> = ffn_pre.iter().map(|&p| R::from_f64(gelu(p.to_f64()))).collect();
        let mut ffn_out = vec![R::ZERO; seq_len * d];
        num::matmul(&ffn_act, &layer.w2.data, seq_len, cfg.d_ff, d, &mut ffn_out);
        for (xi, &o) in x.iter_mut().zip(ffn_out.iter()) {
            *xi += o;
        }
        if let Some(tp) = tapes.as_mut() {
            tp.push(LayerTape {
                x_in,
                inv_rms1: inv1.clone(),
                a: a.clone(),
                q,
                k,
                v,
                attnw,
                ctx,
                x_mid,
                inv_rms2: inv2.clone(),
                b: b.clone(),
                ffn_pre,
                ffn_act,
            });
        }
    }
    if let Some(h) = hidden.as_mut() {
        h.push(x.clone());
    }

    // Final norm and tied output head.
    let mut h_out = Vec::new();
    let mut inv_f = Vec::new();
    rmsnorm_rows(&x, &model.ln_f_g.data, seq_len, d, &mut h_out, &mut inv_f);
    let mut logits = vec![R::ZERO; seq_len * cfg.vocab_size];
    num::matmul_nt(&h_out, &model.tok_emb.data, seq_len, d, cfg.vocab_size, &mut logits);

    let tape = tapes.map(|layers| Tape {
        layers,
        x_final: x,
        inv_rms_f: inv_f,
        h: h_out,
    });
    Ok((
        ForwardTrace {
            logits,
            d_model: model.config.d_model,
            hidden,
        },
        tape,
    ))
}

/// Run the model over a token sequence. With `capture_hidden`, the trace
/// carries the L+1 per-layer hidden states used by the influence metric.
pub fn forward<R: Real>(
    model: &TransformerModel<R>,
    tokens: &[u32],
    capture_hidden: bool,
) -> Result<ForwardTrace<R>> {
    forward_impl(model, tokens, capture_hidden, false).map(|(trace, _)| trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 12,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 8);
        c.n_heads = 3; // 16 % 3 != 0
        assert!(c.validate().is_err());
        c = tiny_config();
        c.n_layers = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_matches_tensors() {
        let m: TransformerModel<f32> = init_model(tiny_config(), 1).unwrap();
        let total: usize = m
            .param_names()
            .iter()
            .map(|n| m.param(n).unwrap().len())
            .sum();
        assert_eq!(total, m.param_count());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a: TransformerModel<f32> = init_model(tiny_config(), 7).unwrap();
        let b: TransformerModel<f32> = init_model(tiny_config(), 7).unwrap();
        let c: TransformerModel<f32> = init_model(tiny_config(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tok_emb.data, c.tok_emb.data);
    }

    #[test]
    fn param_lookup_by_name() {
        let mut m: TransformerModel<f32> = init_model(tiny_config(), 1).unwrap();
        assert_eq!(m.param("layers.1.wq").unwrap().shape, vec![16, 16]);
        assert_eq!(m.param("ln_f.g").unwrap().shape, vec![16]);
        assert!(m.param("layers.2.wq").is_none());
        assert!(m.param_mut("layers.0.w1").is_some());
        assert!(m.param("nonsense").is_none());
    }

    #[test]
    fn forward_shapes_and_hidden_count() {
        let m: TransformerModel<f32> = init_model(tiny_config(), 3).unwrap();
        let tokens = [1u32, 4, 2, 9];
        let trace = forward(&m, &tokens, true).unwrap();
        assert_eq!(trace.logits.len(), 4 * 11);
        let hidden = trace.hidden.unwrap();
        assert_eq!(hidden.len(), 3); // L+1 for L=2
        for h in &hidden {
            assert_eq!(h.len(), 4 * 16);
        }
        let trace2 = forward(&m, &tokens, false).unwrap();
        assert!(trace2.hidden.is_none());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m: TransformerModel<f32> = init_model(tiny_config(), 3).unwrap();
        assert!(forward(&m, &[], false).is_err());
        assert!(forward(&m, &[11], false).is_err());
        let long = vec![0u32; 13];
        assert!(forward(&m, &long, false).is_err());
    }

    #[test]
    fn causality_future_tokens_do_not_affect_past_logits() {
        let m: TransformerModel<f32> = init_model(tiny_config(), 5).unwrap();
        let a = [1u32, 4, 2, 9, 3];
        let mut b = a;
        b[4] = 7; // change only the last token
        let ta = forward(&m, &a, false).unwrap();
        let tb = forward(&m, &b, false).unwrap();
        let v = m.config.vocab_size;
        // Logits at positions 0..4 must be bit-identical.
        assert_eq!(ta.logits[..4 * v], tb.logits[..4 * v]);
        // And the changed position must actually differ.
        assert_ne!(ta.logits[4 * v..], tb.logits[4 * v..]);
    }

    #[test]
    fn zeroed_head_gives_uniform_softmax() {
        let mut m: TransformerModel<f32> = init_model(tiny_config(), 5).unwrap();
        // The head is tied to tok_emb; zeroing it zeroes every logit. The
        // forward still works because position embeddings feed the blocks.
        m.tok_emb.data.iter_mut().for_each(|w| *w = 0.0);
        let trace = forward(&m, &[1, 2, 3], false).unwrap();
        for &l in &trace.logits {
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m: TransformerModel<f32> = init_model(tiny_config(), 9).unwrap();
        let tokens = [3u32, 1, 4, 1, 5];
        let (_, tape) = forward_impl(&m, &tokens, false, true).unwrap();
        let tape = tape.unwrap();
        for lt in &tape.layers {
            for h in 0..m.config.n_heads {
                for t in 0..tokens.len() {
                    let base = h * tokens.len() * tokens.len() + t * tokens.len();
                    let row = &lt.attnw[base..base + tokens.len()];
                    let s = crate::num::sum(&row[..=t]);
                    assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                    for &w in &row[t + 1..] {
                        assert_eq!(w, 0.0, "causal mask violated");
                    }
                }
            }
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let m: TransformerModel<f32> = init_model(tiny_config(), 11).unwrap();
        let tokens = [2u32, 7, 7, 0, 10, 1];
        let plain = forward(&m, &tokens, false).unwrap();
        let (taped, _) = forward_impl(&m, &tokens, false, true).unwrap();
        assert_eq!(plain.logits, taped.logits);
    }

    #[test]
    fn f32_and_f64_paths_agree_loosely() {
        let m32: TransformerModel<f32> = init_model(tiny_config(), 13).unwrap();
        let m64: TransformerModel<f64> = m32.cast();
        let tokens = [1u32, 2, 3, 4];
        let t32 = forward(&m32, &tokens, false).unwrap();
        let t64 = forward(&m64, &tokens, false).unwrap();
        for (a, b) in t32.logits.iter().zip(t64.logits.iter()) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
