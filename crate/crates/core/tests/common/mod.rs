//! Test-only oracles. Nothing here calls into the quantized forward path.
#![allow(dead_code)]

use q8llama::checkpoint::{Fp32Layer, Fp32Weights};
use q8llama::eval::LogitSource;
use q8llama::quant::dequantize_tensor;
use q8llama::{ModelConfig, Result, TransformerWeights};

pub fn tiny_config() -> ModelConfig {
    ModelConfig { dim: 8, hidden_dim: 16, n_layers: 2, n_heads: 2, n_kv_heads: 1, vocab_size: 32, seq_len: 16 }
}

/// Expands every quantized tensor back to fp32.
pub fn dequantize_weights(w: &TransformerWeights) -> Fp32Weights {
    Fp32Weights {
        token_embedding: dequantize_tensor(&w.token_embedding),
        layers: w
            .layers
            .iter()
            .map(|l| Fp32Layer {
                rms_att: l.rms_att.clone(),
                wq: dequantize_tensor(&l.wq),
                wk: dequantize_tensor(&l.wk),
                wv: dequantize_tensor(&l.wv),
                wo: dequantize_tensor(&l.wo),
                rms_ffn: l.rms_ffn.clone(),
                w1: dequantize_tensor(&l.w1),
                w2: dequantize_tensor(&l.w2),
                w3: dequantize_tensor(&l.w3),
            })
            .collect(),
        rms_final: w.rms_final.clone(),
        classifier: w.classifier.as_ref().map(dequantize_tensor),
    }
}

fn matvec(w: &[f32], x: &[f64], d_out: usize) -> Vec<f64> {
    let d_in = x.len();
    (0..d_out).map(|r| (0..d_in).map(|i| w[r * d_in + i] as f64 * x[i]).sum()).collect()
}

/// Int8 round trip of an activation vector, written out independently of the
/// library quantizer: fp32 storage, per-group max/127 scale, round half away.
fn fake_quant(x: &[f64], group: Option<usize>) -> Vec<f64> {
    let Some(gs) = group else { return x.to_vec() };
    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let mut out = Vec::with_capacity(x.len());
    for g in x32.chunks(gs) {
        let max = g.iter().fold(0f32, |m, v| m.max(v.abs()));
        let scale = max / 127.0;
        for &v in g {
            let q = if scale == 0.0 { 0.0 } else { (v as f64 / scale as f64).round().clamp(-127.0, 127.0) };
            out.push(q * scale as f64);
        }
    }
    out
}

fn rmsnorm(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, &g)| g as f64 * v * inv).collect()
}

fn rope(v: &mut [f64], pos: usize, hd: usize) {
    for head in v.chunks_mut(hd) {
        for i in 0..hd / 2 {
            let theta = pos as f64 * 10000f64.powf(-((2 * i) as f64) / hd as f64);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * theta.cos() - b * theta.sin();
            head[2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

/// Dense fp64 causal forward over a whole sequence, recomputing every key
/// and value from scratch. Returns logits for every position.
///
/// With `activation_group` set, every matmul input goes through an int8
/// round trip first, as the quantized model specifies; `None` keeps
/// activations exact.
pub fn reference_logits(
    c: &ModelConfig,
    w: &Fp32Weights,
    tokens: &[usize],
    activation_group: Option<usize>,
) -> Vec<Vec<f64>> {
    let aq = |x: &[f64]| fake_quant(x, activation_group);
    let (dim, hd, kv_dim) = (c.dim, c.dim / c.n_heads, c.dim * c.n_kv_heads / c.n_heads);
    let group = c.n_heads / c.n_kv_heads;
    let n = tokens.len();
    let mut xs: Vec<Vec<f64>> =
        tokens.iter().map(|&t| w.token_embedding[t * dim..(t + 1) * dim].iter().map(|&v| v as f64).collect()).collect();
    for l in &w.layers {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| aq(&rmsnorm(x, &l.rms_att))).collect();
        let mut qs: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&l.wq, x, dim)).collect();
        let mut ks: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&l.wk, x, kv_dim)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&l.wv, x, kv_dim)).collect();
        for p in 0..n {
            rope(&mut qs[p], p, hd);
            rope(&mut ks[p], p, hd);
        }
        for p in 0..n {
            let mut att_out = vec![0.0; dim];
            for h in 0..c.n_heads {
                let kvh = h / group;
                let q = &qs[p][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = (0..=p)
                    .map(|t| {
                        let k = &ks[t][kvh * hd..(kvh + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..=p {
                    for i in 0..hd {
                        att_out[h * hd + i] += e[t] / z * vs[t][kvh * hd + i];
                    }
                }
            }
            let o = matvec(&l.wo, &aq(&att_out), dim);
            for i in 0..dim {
                xs[p][i] += o[i];
            }
            let xn = aq(&rmsnorm(&xs[p], &l.rms_ffn));
            let h1 = matvec(&l.w1, &xn, c.hidden_dim);
            let h3 = matvec(&l.w3, &xn, c.hidden_dim);
            let g: Vec<f64> = h1.iter().zip(&h3).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
            let down = matvec(&l.w2, &aq(&g), dim);
            for i in 0..dim {
                xs[p][i] += down[i];
            }
        }
    }
    xs.iter().map(|x| matvec(w.classifier(), &aq(&rmsnorm(x, &w.rms_final)), c.vocab_size)).collect()
}

/// The dense reference as a perplexity source; recomputes the whole prefix
/// on every call.
pub struct ReferenceSource<'a> {
    pub config: ModelConfig,
    pub weights: &'a Fp32Weights,
    history: Vec<usize>,
    buf: Vec<f32>,
}

impl<'a> ReferenceSource<'a> {
    pub fn new(config: ModelConfig, weights: &'a Fp32Weights) -> Self {
        ReferenceSource { config, weights, history: Vec::new(), buf: vec![0.0; config.vocab_size] }
    }
}

impl LogitSource for ReferenceSource<'_> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }
    fn reset(&mut self) {
        self.history.clear();
    }
    fn logits(&mut self, token: u32, pos: usize) -> Result<&[f32]> {
        assert_eq!(pos, self.history.len());
        self.history.push(token as usize);
        let all = reference_logits(&self.config, self.weights, &self.history, None);
        for (b, &v) in self.buf.iter_mut().zip(all.last().unwrap()) {
            *b = v as f32;
        }
        Ok(&self.buf)
    }
}
