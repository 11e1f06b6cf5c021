//! Temperature and nucleus (top-p) sampling.

use crate::error::{Error, Result};
use crate::model::softmax_inplace;

/// xorshift64* generator.
///
/// ```text
/// state ^= state >> 12; state ^= state << 25; state ^= state >> 27;
/// u32   = (state * 0x2545F4914F6CDD1D) >> 32
/// f32   = (u32 >> 8) / 2^24
/// ```
///
/// A zero seed would lock the generator at zero, so it is replaced by
/// [`XorShiftRng::ZERO_SEED_REPLACEMENT`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XorShiftRng {
    state: u64,
}

impl XorShiftRng {
    pub const ZERO_SEED_REPLACEMENT: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        XorShiftRng { state: if seed == 0 { Self::ZERO_SEED_REPLACEMENT } else { seed } }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.state ^= self.state >> 12;
        self.state ^= self.state << 25;
        self.state ^= self.state >> 27;
        (self.state.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 32) as u32
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 / 16_777_216.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f32,
    pub top_p: f32,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 1.0, top_p: 1.0, rng_seed: 42 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw: the first index whose cumulative probability exceeds
/// `u * total`.
pub fn sample_inverse_cdf(probs: &[f32], u: f32) -> usize {
    let total: f32 = probs.iter().sum();
    let target = u * total;
    let mut cdf = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cdf += p;
        if target < cdf {
            return i;
        }
    }
    probs.len() - 1
}

/// Smallest prefix of tokens, by descending probability (lower id first on
/// ties), whose mass reaches `top_p`. Returns `(token, prob)` pairs.
pub fn nucleus(probs: &[f32], top_p: f32) -> Vec<(usize, f32)> {
    let mut order: Vec<(usize, f32)> = probs.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = order.len();
    for (i, &(_, p)) in order.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Host-side token selection with its own RNG stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    rng: XorShiftRng,
    probs: Vec<f32>,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sampler { config, rng: XorShiftRng::new(config.rng_seed), probs: Vec::new() })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn sample(&mut self, logits: &[f32]) -> Result<usize> {
        if logits.is_empty() {
            return Err(Error::Domain("cannot sample from an empty distribution".into()));
        }
        if self.config.temperature == 0.0 {
            return Ok(argmax(logits));
        }
        self.probs.clear();
        self.probs.extend(logits.iter().map(|l| l / self.config.temperature));
        softmax_inplace(&mut self.probs);
        let u = self.rng.next_f32();
        Ok(sample_probs(&self.probs, self.config.top_p, u))
    }
}

/// Draws from an already normalized distribution with the nucleus rule.
pub fn sample_probs(probs: &[f32], top_p: f32, u: f32) -> usize {
    if top_p >= 1.0 {
        return sample_inverse_cdf(probs, u);
    }
    let kept = nucleus(probs, top_p);
    let p: Vec<f32> = kept.iter().map(|&(_, p)| p).collect();
    kept[sample_inverse_cdf(&p, u)].0
}
