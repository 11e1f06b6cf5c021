//! Llama 2 forward pass over grouped-int8 weights.
//!
//! One call to [`Transformer::forward`] processes one token at one position,
//! reading and extending the KV cache held in [`RunState`]. Norm gains and the
//! residual stream stay fp32; activations are re-quantized before every
//! linear layer so that every matrix-vector product is an integer dot product.

use crate::error::{Error, Result};
use crate::quant::{qmatmul_into, QuantizedTensor};

pub const RMS_NORM_EPS: f32 = 1e-5;
pub const ROPE_BASE: f32 = 10000.0;

/// Architecture hyperparameters. Every tensor shape follows from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    /// The 110M-parameter TinyStories model.
    pub const STORIES_110M: ModelConfig = ModelConfig {
        dim: 768,
        hidden_dim: 2048,
        n_layers: 12,
        n_heads: 12,
        n_kv_heads: 12,
        vocab_size: 32000,
        seq_len: 1024,
    };

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.dim * self.n_kv_heads / self.n_heads
    }

    /// Number of query heads sharing each key/value head.
    pub fn kv_mul(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("dim", self.dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("dim {} is not divisible by n_heads {}", self.dim, self.n_heads)));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim())));
        }
        Ok(())
    }

    /// Checks that every matrix row splits into whole quantization groups.
    pub fn validate_group_size(&self, group_size: usize) -> Result<()> {
        if group_size == 0 || !self.dim.is_multiple_of(group_size) || !self.hidden_dim.is_multiple_of(group_size) {
            return Err(Error::shape(format_args!(
                "dim {} and hidden_dim {} must both be multiples of group size {group_size}",
                self.dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub rms_att: Vec<f32>,
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub rms_ffn: Vec<f32>,
    pub w1: QuantizedTensor,
    pub w2: QuantizedTensor,
    pub w3: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub token_embedding: QuantizedTensor,
    pub layers: Vec<LayerWeights>,
    pub rms_final: Vec<f32>,
    /// `None` when the classifier shares the token embedding.
    pub classifier: Option<QuantizedTensor>,
}

impl TransformerWeights {
    pub fn classifier(&self) -> &QuantizedTensor {
        self.classifier.as_ref().unwrap_or(&self.token_embedding)
    }

    pub fn shared_classifier(&self) -> bool {
        self.classifier.is_none()
    }

    pub fn group_size(&self) -> usize {
        self.token_embedding.group_size()
    }

    /// Checks every tensor against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let gs = self.group_size();
        config.validate_group_size(gs)?;
        let (dim, hidden, kv_dim) = (config.dim, config.hidden_dim, config.kv_dim());
        let check_q = |name: &str, t: &QuantizedTensor, len: usize| -> Result<()> {
            if t.len() != len || t.group_size() != gs {
                return Err(Error::shape(format_args!(
                    "{name}: expected {len} values in groups of {gs}, found {} in groups of {}",
                    t.len(),
                    t.group_size()
                )));
            }
            Ok(())
        };
        let check_f = |name: &str, v: &[f32]| -> Result<()> {
            if v.len() != dim {
                return Err(Error::shape(format_args!("{name}: expected {dim} gains, found {}", v.len())));
            }
            Ok(())
        };
        check_q("token_embedding", &self.token_embedding, config.vocab_size * dim)?;
        if self.layers.len() != config.n_layers {
            return Err(Error::shape(format_args!("expected {} layers, found {}", config.n_layers, self.layers.len())));
        }
        for l in &self.layers {
            check_f("rms_att", &l.rms_att)?;
            check_q("wq", &l.wq, dim * dim)?;
            check_q("wk", &l.wk, kv_dim * dim)?;
            check_q("wv", &l.wv, kv_dim * dim)?;
            check_q("wo", &l.wo, dim * dim)?;
            check_f("rms_ffn", &l.rms_ffn)?;
            check_q("w1", &l.w1, hidden * dim)?;
            check_q("w2", &l.w2, dim * hidden)?;
            check_q("w3", &l.w3, hidden * dim)?;
        }
        check_f("rms_final", &self.rms_final)?;
        if let Some(c) = &self.classifier {
            check_q("classifier", c, config.vocab_size * dim)?;
        }
        Ok(())
    }
}

/// Activation buffers and KV cache for one generation session.
///
/// Sized once from the config and never resized, like the kernel's on-chip
/// buffers.
#[derive(Debug, Clone)]
pub struct RunState {
    x: Vec<f32>,
    xb: Vec<f32>,
    xb2: Vec<f32>,
    hb: Vec<f32>,
    hb2: Vec<f32>,
    xq: QuantizedTensor,
    hq: QuantizedTensor,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    att: Vec<f32>,
    logits: Vec<f32>,
    key_cache: Vec<f32>,
    value_cache: Vec<f32>,
}

impl RunState {
    pub fn new(config: &ModelConfig, group_size: usize) -> Result<Self> {
        config.validate()?;
        config.validate_group_size(group_size)?;
        let kv_dim = config.kv_dim();
        let cache = config.n_layers * config.seq_len * kv_dim;
        Ok(RunState {
            x: vec![0.0; config.dim],
            xb: vec![0.0; config.dim],
            xb2: vec![0.0; config.dim],
            hb: vec![0.0; config.hidden_dim],
            hb2: vec![0.0; config.hidden_dim],
            xq: QuantizedTensor::zeros(config.dim, group_size)?,
            hq: QuantizedTensor::zeros(config.hidden_dim, group_size)?,
            q: vec![0.0; config.dim],
            k: vec![0.0; kv_dim],
            v: vec![0.0; kv_dim],
            att: vec![0.0; config.n_heads * config.seq_len],
            logits: vec![0.0; config.vocab_size],
            key_cache: vec![0.0; cache],
            value_cache: vec![0.0; cache],
        })
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Softmaxed attention weights of `head` from the most recent layer
    /// processed at position `pos`.
    pub fn attention_weights(&self, seq_len: usize, head: usize, pos: usize) -> &[f32] {
        &self.att[head * seq_len..head * seq_len + pos + 1]
    }

    /// Output of the most recent [`attention_layer`] call.
    pub fn attention_output(&self) -> &[f32] {
        &self.xb
    }

    pub fn query_mut(&mut self) -> &mut [f32] {
        &mut self.q
    }

    /// Writes key and value vectors for `(layer, pos)` straight into the cache.
    pub fn write_kv(&mut self, config: &ModelConfig, layer: usize, pos: usize, k: &[f32], v: &[f32]) {
        let kv_dim = config.kv_dim();
        let off = (layer * config.seq_len + pos) * kv_dim;
        self.key_cache[off..off + kv_dim].copy_from_slice(k);
        self.value_cache[off..off + kv_dim].copy_from_slice(v);
    }

    /// `(address, capacity)` of every heap buffer; unchanged for the life of
    /// the state if nothing reallocates.
    pub fn allocation_fingerprint(&self) -> Vec<(usize, usize)> {
        let f = |v: &Vec<f32>| (v.as_ptr() as usize, v.capacity());
        let q = |t: &QuantizedTensor| {
            [(t.values().as_ptr() as usize, t.values().len()), (t.scales().as_ptr() as usize, t.scales().len())]
        };
        let mut out = vec![
            f(&self.x),
            f(&self.xb),
            f(&self.xb2),
            f(&self.hb),
            f(&self.hb2),
            f(&self.q),
            f(&self.k),
            f(&self.v),
            f(&self.att),
            f(&self.logits),
            f(&self.key_cache),
            f(&self.value_cache),
        ];
        out.extend(q(&self.xq));
        out.extend(q(&self.hq));
        out
    }
}

/// `out[i] = g[i] * x[i] / sqrt(mean(x^2) + eps)`
pub fn rmsnorm(out: &mut [f32], x: &[f32], g: &[f32], eps: f32) {
    let ss = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32 + eps;
    let inv = 1.0 / ss.sqrt();
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
        *o = gi * (xi * inv);
    }
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` of every head by
/// `pos * 10000^(-2i / head_dim)` radians.
pub fn rope_rotate(vec: &mut [f32], pos: usize, head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) || !vec.len().is_multiple_of(head_dim) {
        return Err(Error::shape(format_args!("cannot apply RoPE with head_dim {head_dim} to {} values", vec.len())));
    }
    for head in vec.chunks_exact_mut(head_dim) {
        for (i, pair) in head.chunks_exact_mut(2).enumerate() {
            let freq = 1.0 / ROPE_BASE.powf((2 * i) as f32 / head_dim as f32);
            let (sin, cos) = (pos as f32 * freq).sin_cos();
            let (v0, v1) = (pair[0], pair[1]);
            pair[0] = v0 * cos - v1 * sin;
            pair[1] = v0 * sin + v1 * cos;
        }
    }
    Ok(())
}

pub fn softmax_inplace(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// SwiGLU gate, in place: `h1[i] = silu(h1[i]) * h3[i]`.
pub fn swiglu(h1: &mut [f32], h3: &[f32]) {
    for (a, &b) in h1.iter_mut().zip(h3) {
        let silu = *a * (1.0 / (1.0 + (-*a).exp()));
        *a = silu * b;
    }
}

/// Grouped-query attention for one layer at `pos`, reading `state.q` and
/// cache entries `0..=pos`, writing the concatenated heads into the state's
/// attention output.
pub fn attention_layer(state: &mut RunState, config: &ModelConfig, layer: usize, pos: usize) -> Result<()> {
    if pos >= config.seq_len {
        return Err(Error::Capacity { pos, seq_len: config.seq_len });
    }
    let hd = config.head_dim();
    let kv_dim = config.kv_dim();
    let kv_mul = config.kv_mul();
    let loff = layer * config.seq_len * kv_dim;
    let inv_sqrt = 1.0 / (hd as f32).sqrt();
    for h in 0..config.n_heads {
        let q = &state.q[h * hd..(h + 1) * hd];
        let kv_off = (h / kv_mul) * hd;
        let att = &mut state.att[h * config.seq_len..h * config.seq_len + pos + 1];
        for (t, a) in att.iter_mut().enumerate() {
            let k = &state.key_cache[loff + t * kv_dim + kv_off..][..hd];
            *a = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * inv_sqrt;
        }
        softmax_inplace(att);
        let out = &mut state.xb[h * hd..(h + 1) * hd];
        out.fill(0.0);
        for (t, &a) in att.iter().enumerate() {
            let v = &state.value_cache[loff + t * kv_dim + kv_off..][..hd];
            for (o, &vi) in out.iter_mut().zip(v) {
                *o += a * vi;
            }
        }
    }
    Ok(())
}

/// Immutable model: config plus quantized weights. Any number of
/// [`RunState`]s may share one `Transformer`.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    weights: TransformerWeights,
}

impl Transformer {
    pub fn new(config: ModelConfig, weights: TransformerWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Transformer { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &TransformerWeights {
        &self.weights
    }

    pub fn new_state(&self) -> RunState {
        RunState::new(&self.config, self.weights.group_size()).expect("config validated at construction")
    }

    /// Runs one token at one position and returns the next-token logits.
    pub fn forward<'s>(&self, state: &'s mut RunState, token: usize, pos: usize) -> Result<&'s [f32]> {
        let c = &self.config;
        let w = &self.weights;
        if token >= c.vocab_size {
            return Err(Error::TokenRange { token: token as i64, vocab_size: c.vocab_size });
        }
        if pos >= c.seq_len {
            return Err(Error::Capacity { pos, seq_len: c.seq_len });
        }
        let (dim, hidden, kv_dim, hd) = (c.dim, c.hidden_dim, c.kv_dim(), c.head_dim());

        w.token_embedding.dequantize_range(token * dim, &mut state.x);

        for (l, lw) in w.layers.iter().enumerate() {
            rmsnorm(&mut state.xb, &state.x, &lw.rms_att, RMS_NORM_EPS);
            state.xq.quantize_from(&state.xb)?;
            qmatmul_into(&mut state.q, &state.xq, &lw.wq, dim, dim)?;
            qmatmul_into(&mut state.k, &state.xq, &lw.wk, dim, kv_dim)?;
            qmatmul_into(&mut state.v, &state.xq, &lw.wv, dim, kv_dim)?;

            rope_rotate(&mut state.q, pos, hd)?;
            rope_rotate(&mut state.k, pos, hd)?;

            let off = (l * c.seq_len + pos) * kv_dim;
            state.key_cache[off..off + kv_dim].copy_from_slice(&state.k);
            state.value_cache[off..off + kv_dim].copy_from_slice(&state.v);

            attention_layer(state, c, l, pos)?;

            state.xq.quantize_from(&state.xb)?;
            qmatmul_into(&mut state.xb2, &state.xq, &lw.wo, dim, dim)?;
            for (x, &r) in state.x.iter_mut().zip(&state.xb2) {
                *x += r;
            }

            rmsnorm(&mut state.xb, &state.x, &lw.rms_ffn, RMS_NORM_EPS);
            state.xq.quantize_from(&state.xb)?;
            qmatmul_into(&mut state.hb, &state.xq, &lw.w1, dim, hidden)?;
            qmatmul_into(&mut state.hb2, &state.xq, &lw.w3, dim, hidden)?;
            swiglu(&mut state.hb, &state.hb2);
            state.hq.quantize_from(&state.hb)?;
            qmatmul_into(&mut state.xb, &state.hq, &lw.w2, hidden, dim)?;
            for (x, &r) in state.x.iter_mut().zip(&state.xb) {
                *x += r;
            }
        }

        rmsnorm(&mut state.xb, &state.x, &w.rms_final, RMS_NORM_EPS);
        state.xq.quantize_from(&state.xb)?;
        qmatmul_into(&mut state.logits, &state.xq, w.classifier(), dim, c.vocab_size)?;
        Ok(&state.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rmsnorm_examples() {
        let mut out = [0.0; 4];
        rmsnorm(&mut out, &[1.0; 4], &[1.0; 4], 0.0);
        assert_eq!(out, [1.0; 4]);
        rmsnorm(&mut out, &[0.0; 4], &[3.0, -1.0, 2.0, 5.0], 1e-5);
        assert_eq!(out, [0.0; 4]);
        let mut out = [0.0; 2];
        rmsnorm(&mut out, &[3.0, 4.0], &[1.0, 1.0], 0.0);
        assert!(close(&out, &[0.848_528, 1.131_371], 1e-5), "{out:?}");
    }

    #[test]
    fn rope_identity_at_origin() {
        let orig = [0.3, -1.2, 4.0, 0.5, 2.0, -3.0, 0.1, 0.7];
        let mut v = orig;
        rope_rotate(&mut v, 0, 4).unwrap();
        assert_eq!(v, orig);
    }

    #[test]
    fn rope_single_radian() {
        let mut v = [1.0, 0.0];
        rope_rotate(&mut v, 1, 2).unwrap();
        assert!(close(&v, &[1f32.cos(), 1f32.sin()], 1e-6));
        assert!(close(&v, &[0.5403, 0.8415], 1e-4));
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let mut v = [0.0; 6];
        assert!(matches!(rope_rotate(&mut v, 1, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut x = [2.5; 4];
        softmax_inplace(&mut x);
        assert!(close(&x, &[0.25; 4], 1e-7));
        let mut x = [0.0, 3f32.ln()];
        softmax_inplace(&mut x);
        assert!(close(&x, &[0.25, 0.75], 1e-6));
    }

    #[test]
    fn swiglu_examples() {
        let mut h1 = [0.0, 1.0, -2.0];
        swiglu(&mut h1, &[5.0, 2.0, 0.0]);
        assert_eq!(h1[0], 0.0);
        assert!((h1[1] - 1.462_117).abs() < 1e-5);
        assert_eq!(h1[2], 0.0);
    }

    fn tiny_config(n_heads: usize, n_kv_heads: usize) -> ModelConfig {
        ModelConfig { dim: 8, hidden_dim: 16, n_layers: 1, n_heads, n_kv_heads, vocab_size: 4, seq_len: 8 }
    }

    #[test]
    fn single_position_attention_returns_value() {
        let c = tiny_config(2, 2);
        let mut s = RunState::new(&c, 4).unwrap();
        let v: Vec<f32> = (0..8).map(|i| i as f32 * 0.5 - 1.0).collect();
        s.write_kv(&c, 0, 0, &[0.3; 8], &v);
        s.query_mut().copy_from_slice(&[1.0, -2.0, 0.5, 0.0, 3.0, 1.0, 1.0, 1.0]);
        attention_layer(&mut s, &c, 0, 0).unwrap();
        assert_eq!(s.attention_output(), v.as_slice());
        assert_eq!(s.attention_weights(c.seq_len, 1, 0), &[1.0]);
    }

    #[test]
    fn grouped_heads_share_kv() {
        let c = tiny_config(2, 1);
        let mut s = RunState::new(&c, 4).unwrap();
        s.write_kv(&c, 0, 0, &[1.0, 0.0, 0.0, 0.0], &[1.0, 2.0, 3.0, 4.0]);
        s.write_kv(&c, 0, 1, &[0.0, 1.0, 0.0, 0.0], &[-1.0, 0.0, 1.0, 0.0]);
        s.query_mut().copy_from_slice(&[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        attention_layer(&mut s, &c, 0, 1).unwrap();
        let out = s.attention_output().to_vec();
        assert_eq!(out[..4], out[4..]);
        // scores (1, 0) softmax -> (e/(e+1), 1/(e+1))
        let p = std::f32::consts::E / (std::f32::consts::E + 1.0);
        let expected = [p - (1.0 - p), 2.0 * p, 3.0 * p + (1.0 - p), 4.0 * p];
        assert!(close(&out[..4], &expected, 1e-6), "{out:?}");
    }

    #[test]
    fn attention_capacity_error() {
        let c = tiny_config(2, 1);
        let mut s = RunState::new(&c, 4).unwrap();
        assert!(matches!(attention_layer(&mut s, &c, 0, 8), Err(Error::Capacity { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::STORIES_110M.validate().is_ok());
        assert_eq!(ModelConfig::STORIES_110M.head_dim(), 64);
        assert!(tiny_config(3, 1).validate().is_err());
        assert!(tiny_config(4, 3).validate().is_err());
        assert!(tiny_config(8, 1).validate().is_err()); // head_dim 1
        assert!(tiny_config(2, 1).validate_group_size(3).is_err());
    }

    proptest! {
        #[test]
        fn rope_preserves_pair_norms(v in prop::collection::vec(-10.0f32..10.0, 16), pos in 0usize..4096) {
            let mut r = v.clone();
            rope_rotate(&mut r, pos, 8).unwrap();
            for (a, b) in v.chunks(2).zip(r.chunks(2)) {
                let n0 = (a[0] as f64).hypot(a[1] as f64);
                let n1 = (b[0] as f64).hypot(b[1] as f64);
                prop_assert!((n0 - n1).abs() <= 1e-6 * n0.max(1e-3));
            }
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-5120i32..5120, 1..32), k in -50i32..50) {
            // Inputs on a 1/256 grid so that x + k is exact in f32.
            let mut a: Vec<f32> = v.iter().map(|&x| x as f32 / 256.0).collect();
            let mut b: Vec<f32> = a.iter().map(|x| x + k as f32).collect();
            softmax_inplace(&mut a);
            softmax_inplace(&mut b);
            prop_assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}
