//! Checkpoint formats.
//!
//! * fp32: seven little-endian `i32` config fields followed by raw fp32
//!   tensors. A negative `vocab_size` marks an unshared classifier. The
//!   legacy RoPE frequency tables (`seq_len * head_dim / 2` floats each for
//!   cos and sin) sit between `rms_final` and the classifier and are skipped.
//! * version 2 (grouped int8): a 256-byte header, fp32 norm gains, then each
//!   quantized tensor as its int8 codes followed by its fp32 scales.

use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, Transformer, TransformerWeights};
use crate::quant::{quantize_tensor, QuantStats, QuantizedTensor};

pub const QUANTIZED_MAGIC: u32 = 0x616B_3432;
pub const QUANTIZED_VERSION: i32 = 2;
pub const QUANTIZED_HEADER_BYTES: usize = 256;
const FP32_HEADER_BYTES: usize = 7 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Fp32Layer {
    pub rms_att: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub rms_ffn: Vec<f32>,
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
    pub w3: Vec<f32>,
}

/// Unquantized weights as stored in an fp32 checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp32Weights {
    pub token_embedding: Vec<f32>,
    pub layers: Vec<Fp32Layer>,
    pub rms_final: Vec<f32>,
    pub classifier: Option<Vec<f32>>,
}

impl Fp32Weights {
    /// Random weights with roughly unit-variance activations, for tests and
    /// demos.
    pub fn random(config: &ModelConfig, shared_classifier: bool, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let (dim, hidden, kv_dim) = (config.dim, config.hidden_dim, config.kv_dim());
        let mut uniform = |n: usize, bound: f32| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let lin = |fan_in: usize| (3.0 / fan_in as f32).sqrt();
        let token_embedding = uniform(config.vocab_size * dim, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| Fp32Layer {
                rms_att: uniform(dim, 0.2).into_iter().map(|v| 1.0 + v).collect(),
                wq: uniform(dim * dim, lin(dim)),
                wk: uniform(kv_dim * dim, lin(dim)),
                wv: uniform(kv_dim * dim, lin(dim)),
                wo: uniform(dim * dim, lin(dim)),
                rms_ffn: uniform(dim, 0.2).into_iter().map(|v| 1.0 + v).collect(),
                w1: uniform(hidden * dim, lin(dim)),
                w2: uniform(dim * hidden, lin(hidden)),
                w3: uniform(hidden * dim, lin(dim)),
            })
            .collect();
        let rms_final = uniform(dim, 0.2).into_iter().map(|v| 1.0 + v).collect();
        let classifier = (!shared_classifier).then(|| uniform(config.vocab_size * dim, lin(dim)));
        Fp32Weights { token_embedding, layers, rms_final, classifier }
    }

    pub fn classifier(&self) -> &[f32] {
        self.classifier.as_deref().unwrap_or(&self.token_embedding)
    }

    fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (dim, hidden, kv_dim) = (config.dim, config.hidden_dim, config.kv_dim());
        let mut checks = vec![("token_embedding", self.token_embedding.len(), config.vocab_size * dim)];
        if self.layers.len() != config.n_layers {
            return Err(Error::shape(format_args!("expected {} layers, found {}", config.n_layers, self.layers.len())));
        }
        for l in &self.layers {
            checks.extend([
                ("rms_att", l.rms_att.len(), dim),
                ("wq", l.wq.len(), dim * dim),
                ("wk", l.wk.len(), kv_dim * dim),
                ("wv", l.wv.len(), kv_dim * dim),
                ("wo", l.wo.len(), dim * dim),
                ("rms_ffn", l.rms_ffn.len(), dim),
                ("w1", l.w1.len(), hidden * dim),
                ("w2", l.w2.len(), dim * hidden),
                ("w3", l.w3.len(), hidden * dim),
            ]);
        }
        checks.push(("rms_final", self.rms_final.len(), dim));
        if let Some(c) = &self.classifier {
            checks.push(("classifier", c.len(), config.vocab_size * dim));
        }
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(format_args!("{name}: expected {want} values, found {got}")));
            }
        }
        Ok(())
    }

    /// Post-training quantization of every linear layer and the embedding.
    /// Norm gains are copied unchanged.
    pub fn quantize(&self, config: &ModelConfig, group_size: usize) -> Result<(TransformerWeights, QuantStats)> {
        config.validate()?;
        config.validate_group_size(group_size)?;
        self.check_shapes(config)?;
        let mut stats = QuantStats::default();
        let mut q = |w: &[f32]| -> Result<QuantizedTensor> {
            let (t, s) = quantize_tensor(w, group_size)?;
            stats = stats.merge(&s);
            Ok(t)
        };
        let token_embedding = q(&self.token_embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(LayerWeights {
                rms_att: l.rms_att.clone(),
                wq: q(&l.wq)?,
                wk: q(&l.wk)?,
                wv: q(&l.wv)?,
                wo: q(&l.wo)?,
                rms_ffn: l.rms_ffn.clone(),
                w1: q(&l.w1)?,
                w2: q(&l.w2)?,
                w3: q(&l.w3)?,
            });
        }
        let classifier = self.classifier.as_deref().map(&mut q).transpose()?;
        let weights = TransformerWeights { token_embedding, layers, rms_final: self.rms_final.clone(), classifier };
        Ok((weights, stats))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(format_args!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes =
            self.take(n.checked_mul(4).ok_or_else(|| Error::format(format_args!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn i8s(&mut self, n: usize, what: &str) -> Result<Vec<i8>> {
        Ok(self.take(n, what)?.iter().map(|&b| b as i8).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format_args!(
                "{} trailing bytes after the last tensor",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn dim_to_i32(name: &str, v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::format(format_args!("{name} {v} does not fit in an i32 header field")))
}

fn config_fields(config: &ModelConfig) -> [(&'static str, usize); 7] {
    [
        ("dim", config.dim),
        ("hidden_dim", config.hidden_dim),
        ("n_layers", config.n_layers),
        ("n_heads", config.n_heads),
        ("n_kv_heads", config.n_kv_heads),
        ("vocab_size", config.vocab_size),
        ("seq_len", config.seq_len),
    ]
}

/// Reads the seven config fields; returns the config and whether the
/// classifier is shared (`vocab_size > 0`).
fn read_config(r: &mut Reader<'_>) -> Result<(ModelConfig, bool)> {
    let mut f = [0i32; 7];
    for (slot, (name, _)) in f.iter_mut().zip(config_fields(&ModelConfig::STORIES_110M)) {
        *slot = r.i32(name)?;
    }
    let shared = f[5] > 0;
    let pos = |i: usize, v: i32| -> Result<usize> {
        if v <= 0 {
            let name = config_fields(&ModelConfig::STORIES_110M)[i].0;
            return Err(Error::format(format_args!("non-positive {name} ({v}) in header")));
        }
        Ok(v as usize)
    };
    let config = ModelConfig {
        dim: pos(0, f[0])?,
        hidden_dim: pos(1, f[1])?,
        n_layers: pos(2, f[2])?,
        n_heads: pos(3, f[3])?,
        n_kv_heads: pos(4, f[4])?,
        vocab_size: pos(5, f[5].checked_abs().unwrap_or(0))?,
        seq_len: pos(6, f[6])?,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok((config, shared))
}

fn rope_table_len(config: &ModelConfig) -> usize {
    config.seq_len * config.head_dim() / 2
}

/// Exact byte size of an fp32 checkpoint with this config.
pub fn fp32_checkpoint_size(config: &ModelConfig, shared_classifier: bool) -> usize {
    let (dim, hidden, kv_dim, l) = (config.dim, config.hidden_dim, config.kv_dim(), config.n_layers);
    let mut floats = config.vocab_size * dim
        + l * (2 * dim + 2 * dim * dim + 2 * kv_dim * dim + 3 * hidden * dim)
        + dim
        + 2 * rope_table_len(config);
    if !shared_classifier {
        floats += config.vocab_size * dim;
    }
    FP32_HEADER_BYTES + floats * 4
}

pub fn load_fp32_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Fp32Weights)> {
    let mut r = Reader::new(bytes);
    let (c, shared) = read_config(&mut r)?;
    let expected = fp32_checkpoint_size(&c, shared);
    if bytes.len() != expected {
        return Err(Error::format(format_args!("fp32 checkpoint is {} bytes, header implies {expected}", bytes.len())));
    }
    let (dim, hidden, kv_dim, l) = (c.dim, c.hidden_dim, c.kv_dim(), c.n_layers);
    let token_embedding = r.f32s(c.vocab_size * dim, "token_embedding")?;
    let mut per_layer = |n: usize, what: &str| -> Result<Vec<Vec<f32>>> { (0..l).map(|_| r.f32s(n, what)).collect() };
    let rms_att = per_layer(dim, "rms_att")?;
    let wq = per_layer(dim * dim, "wq")?;
    let wk = per_layer(kv_dim * dim, "wk")?;
    let wv = per_layer(kv_dim * dim, "wv")?;
    let wo = per_layer(dim * dim, "wo")?;
    let rms_ffn = per_layer(dim, "rms_ffn")?;
    let w1 = per_layer(hidden * dim, "w1")?;
    let w2 = per_layer(dim * hidden, "w2")?;
    let w3 = per_layer(hidden * dim, "w3")?;
    let rms_final = r.f32s(dim, "rms_final")?;
    r.take(2 * rope_table_len(&c) * 4, "rope tables")?;
    let classifier = if shared { None } else { Some(r.f32s(c.vocab_size * dim, "classifier")?) };
    r.finish()?;

    let mut it = (rms_att.into_iter(), wq.into_iter(), wk.into_iter(), wv.into_iter(), wo.into_iter());
    let mut it2 = (rms_ffn.into_iter(), w1.into_iter(), w2.into_iter(), w3.into_iter());
    let layers = (0..l)
        .map(|_| Fp32Layer {
            rms_att: it.0.next().unwrap(),
            wq: it.1.next().unwrap(),
            wk: it.2.next().unwrap(),
            wv: it.3.next().unwrap(),
            wo: it.4.next().unwrap(),
            rms_ffn: it2.0.next().unwrap(),
            w1: it2.1.next().unwrap(),
            w2: it2.2.next().unwrap(),
            w3: it2.3.next().unwrap(),
        })
        .collect();
    Ok((c, Fp32Weights { token_embedding, layers, rms_final, classifier }))
}

pub fn write_fp32_checkpoint(config: &ModelConfig, weights: &Fp32Weights) -> Result<Vec<u8>> {
    config.validate()?;
    weights.check_shapes(config)?;
    let shared = weights.classifier.is_none();
    let mut out = Vec::with_capacity(fp32_checkpoint_size(config, shared));
    for (name, v) in config_fields(config) {
        let v = dim_to_i32(name, v)?;
        put_i32(&mut out, if name == "vocab_size" && !shared { -v } else { v });
    }
    put_f32s(&mut out, &weights.token_embedding);
    macro_rules! layers {
        ($field:ident) => {
            for l in &weights.layers {
                put_f32s(&mut out, &l.$field);
            }
        };
    }
    layers!(rms_att);
    layers!(wq);
    layers!(wk);
    layers!(wv);
    layers!(wo);
    layers!(rms_ffn);
    layers!(w1);
    layers!(w2);
    layers!(w3);
    put_f32s(&mut out, &weights.rms_final);
    // Legacy RoPE tables, written the way older exporters did.
    let hd = config.head_dim();
    let mut cos = Vec::with_capacity(rope_table_len(config));
    let mut sin = Vec::with_capacity(rope_table_len(config));
    for pos in 0..config.seq_len {
        for i in 0..hd / 2 {
            let freq = 1.0 / crate::model::ROPE_BASE.powf((2 * i) as f32 / hd as f32);
            let (s, c) = (pos as f32 * freq).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    put_f32s(&mut out, &cos);
    put_f32s(&mut out, &sin);
    if let Some(c) = &weights.classifier {
        put_f32s(&mut out, c);
    }
    Ok(out)
}

/// Exact byte size of a version-2 quantized checkpoint.
pub fn quantized_checkpoint_size(config: &ModelConfig, shared_classifier: bool, group_size: usize) -> usize {
    let (dim, hidden, kv_dim, l) = (config.dim, config.hidden_dim, config.kv_dim(), config.n_layers);
    let norms = (2 * l + 1) * dim * 4;
    let q = |n: usize| n + (n / group_size) * 4;
    let mut total = QUANTIZED_HEADER_BYTES
        + norms
        + q(config.vocab_size * dim)
        + l * (2 * q(dim * dim) + 2 * q(kv_dim * dim) + 3 * q(hidden * dim));
    if !shared_classifier {
        total += q(config.vocab_size * dim);
    }
    total
}

pub fn write_quantized_checkpoint(config: &ModelConfig, weights: &TransformerWeights) -> Result<Vec<u8>> {
    weights.validate(config)?;
    let gs = weights.group_size();
    let mut out = Vec::with_capacity(quantized_checkpoint_size(config, weights.shared_classifier(), gs));
    out.extend_from_slice(&QUANTIZED_MAGIC.to_le_bytes());
    put_i32(&mut out, QUANTIZED_VERSION);
    for (name, v) in config_fields(config) {
        put_i32(&mut out, dim_to_i32(name, v)?);
    }
    out.push(weights.shared_classifier() as u8);
    put_i32(&mut out, dim_to_i32("group_size", gs)?);
    out.resize(QUANTIZED_HEADER_BYTES, 0);

    for l in &weights.layers {
        put_f32s(&mut out, &l.rms_att);
    }
    for l in &weights.layers {
        put_f32s(&mut out, &l.rms_ffn);
    }
    put_f32s(&mut out, &weights.rms_final);

    let put_q = |out: &mut Vec<u8>, t: &QuantizedTensor| {
        out.extend(t.values().iter().map(|&v| v as u8));
        put_f32s(out, t.scales());
    };
    put_q(&mut out, &weights.token_embedding);
    let fields: [fn(&LayerWeights) -> &QuantizedTensor; 7] =
        [|l| &l.wq, |l| &l.wk, |l| &l.wv, |l| &l.wo, |l| &l.w1, |l| &l.w2, |l| &l.w3];
    for field in fields {
        for l in &weights.layers {
            put_q(&mut out, field(l));
        }
    }
    if let Some(c) = &weights.classifier {
        put_q(&mut out, c);
    }
    Ok(out)
}

pub fn load_quantized_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, TransformerWeights)> {
    let mut r = Reader::new(bytes);
    let magic = r.u32("magic")?;
    if magic != QUANTIZED_MAGIC {
        return Err(Error::format(format_args!("bad magic {magic:#010x}, expected {QUANTIZED_MAGIC:#010x}")));
    }
    let version = r.i32("version")?;
    if version != QUANTIZED_VERSION {
        return Err(Error::format(format_args!("unsupported version {version}, expected {QUANTIZED_VERSION}")));
    }
    let (c, _) = read_config(&mut r)?;
    let shared = match r.take(1, "shared_classifier")?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::format(format_args!("shared_classifier flag must be 0 or 1, found {b}"))),
    };
    let gs = r.i32("group_size")?;
    if gs <= 0 {
        return Err(Error::format(format_args!("non-positive group size {gs}")));
    }
    let gs = gs as usize;
    c.validate_group_size(gs).map_err(|e| Error::Format(e.to_string()))?;
    let expected = quantized_checkpoint_size(&c, shared, gs);
    if bytes.len() != expected {
        return Err(Error::format(format_args!(
            "quantized checkpoint is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    r.pos = QUANTIZED_HEADER_BYTES;

    let (dim, hidden, kv_dim, l) = (c.dim, c.hidden_dim, c.kv_dim(), c.n_layers);
    let rms_att: Vec<Vec<f32>> = (0..l).map(|_| r.f32s(dim, "rms_att")).collect::<Result<_>>()?;
    let rms_ffn: Vec<Vec<f32>> = (0..l).map(|_| r.f32s(dim, "rms_ffn")).collect::<Result<_>>()?;
    let rms_final = r.f32s(dim, "rms_final")?;

    let mut q = |n: usize, what: &str| -> Result<QuantizedTensor> {
        let values = r.i8s(n, what)?;
        let scales = r.f32s(n / gs, what)?;
        QuantizedTensor::from_parts(values, scales, gs).map_err(|e| Error::Format(format!("{what}: {e}")))
    };
    let token_embedding = q(c.vocab_size * dim, "token_embedding")?;
    let mut per_layer = |n: usize, what: &str| -> Result<Vec<QuantizedTensor>> { (0..l).map(|_| q(n, what)).collect() };
    let mut wq = per_layer(dim * dim, "wq")?.into_iter();
    let mut wk = per_layer(kv_dim * dim, "wk")?.into_iter();
    let mut wv = per_layer(kv_dim * dim, "wv")?.into_iter();
    let mut wo = per_layer(dim * dim, "wo")?.into_iter();
    let mut w1 = per_layer(hidden * dim, "w1")?.into_iter();
    let mut w2 = per_layer(dim * hidden, "w2")?.into_iter();
    let mut w3 = per_layer(hidden * dim, "w3")?.into_iter();
    let classifier = if shared { None } else { Some(q(c.vocab_size * dim, "classifier")?) };
    r.finish()?;

    let layers = rms_att
        .into_iter()
        .zip(rms_ffn)
        .map(|(rms_att, rms_ffn)| LayerWeights {
            rms_att,
            wq: wq.next().unwrap(),
            wk: wk.next().unwrap(),
            wv: wv.next().unwrap(),
            wo: wo.next().unwrap(),
            rms_ffn,
            w1: w1.next().unwrap(),
            w2: w2.next().unwrap(),
            w3: w3.next().unwrap(),
        })
        .collect();
    Ok((c, TransformerWeights { token_embedding, layers, rms_final, classifier }))
}

/// True when `bytes` starts with the version-2 magic.
pub fn is_quantized_checkpoint(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && u32::from_le_bytes(bytes[..4].try_into().unwrap()) == QUANTIZED_MAGIC
}

/// Loads either format. fp32 checkpoints are quantized on the fly with
/// `group_size`.
pub fn load_model(path: impl AsRef<Path>, group_size: usize) -> Result<Transformer> {
    let bytes = std::fs::read(path)?;
    let (config, weights) = if is_quantized_checkpoint(&bytes) {
        load_quantized_checkpoint(&bytes)?
    } else {
        let (config, w) = load_fp32_checkpoint(&bytes)?;
        (config, w.quantize(&config, group_size)?.0)
    };
    Transformer::new(config, weights)
}
