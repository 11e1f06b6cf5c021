//! Perplexity over a token stream.
//!
//! The stream is cut into non-overlapping windows of at most `seq_len - 1`
//! tokens. Each window is evaluated from a fresh context that starts with
//! BOS, so every stream token is predicted exactly once.

use crate::error::{Error, Result};
use crate::model::{RunState, Transformer};
use crate::tokenizer::BOS;

/// Anything that yields next-token logits one position at a time.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Starts a new context. Position 0 follows.
    fn reset(&mut self) {}
    fn logits(&mut self, token: u32, pos: usize) -> Result<&[f32]>;
}

/// A model plus one KV cache.
pub struct Session<'m> {
    model: &'m Transformer,
    state: RunState,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Transformer) -> Self {
        Session { model, state: model.new_state() }
    }
}

impl LogitSource for Session<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn seq_len(&self) -> usize {
        self.model.config().seq_len
    }

    fn logits(&mut self, token: u32, pos: usize) -> Result<&[f32]> {
        self.model.forward(&mut self.state, token as usize, pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub ppl: f64,
    pub mean_nll: f64,
    /// Number of predicted tokens.
    pub count: usize,
    pub windows: usize,
}

/// `-ln softmax(logits)[target]`, computed in f64.
pub fn negative_log_likelihood(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    -((logits[target] as f64 - max) - sum.ln())
}

/// `exp(mean(-ln p(token_i | context)))` over every token of `tokens`.
/// A leading BOS in `tokens` is treated as context, not as a prediction.
pub fn perplexity(source: &mut dyn LogitSource, tokens: &[u32]) -> Result<Perplexity> {
    let tokens = tokens.strip_prefix(&[BOS]).unwrap_or(tokens);
    if tokens.is_empty() {
        return Err(Error::Domain("perplexity needs at least one token to predict".into()));
    }
    let seq_len = source.seq_len();
    if seq_len < 2 {
        return Err(Error::Domain(format!("context of {seq_len} cannot hold BOS plus a token")));
    }
    let vocab = source.vocab_size();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenRange { token: t as i64, vocab_size: vocab });
    }
    let mut total = 0.0f64;
    let mut windows = 0;
    for chunk in tokens.chunks(seq_len - 1) {
        source.reset();
        windows += 1;
        let mut prev = BOS;
        for (pos, &target) in chunk.iter().enumerate() {
            let logits = source.logits(prev, pos)?;
            total += negative_log_likelihood(logits, target as usize);
            prev = target;
        }
    }
    let mean_nll = total / tokens.len() as f64;
    Ok(Perplexity { ppl: mean_nll.exp(), mean_nll, count: tokens.len(), windows })
}

/// Parses a little-endian `i32` token stream.
pub fn read_token_stream(bytes: &[u8], vocab_size: usize) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(format_args!("token stream length {} is not a multiple of 4", bytes.len())));
    }
    bytes
        .chunks_exact(4)
        .map(|b| {
            let t = i32::from_le_bytes(b.try_into().unwrap());
            if t < 0 || t as usize >= vocab_size {
                return Err(Error::TokenRange { token: t as i64, vocab_size });
            }
            Ok(t as u32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Uniform {
        vocab: usize,
        seq_len: usize,
        buf: Vec<f32>,
    }

    impl LogitSource for Uniform {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn seq_len(&self) -> usize {
            self.seq_len
        }
        fn logits(&mut self, _: u32, pos: usize) -> Result<&[f32]> {
            assert!(pos < self.seq_len);
            self.buf.fill(0.0);
            Ok(&self.buf)
        }
    }

    /// Knows the answer: puts all mass on the next stream token.
    struct Oracle {
        stream: Vec<u32>,
        seen: usize,
        buf: Vec<f32>,
    }

    impl LogitSource for Oracle {
        fn vocab_size(&self) -> usize {
            self.buf.len()
        }
        fn seq_len(&self) -> usize {
            4
        }
        fn logits(&mut self, _: u32, _: usize) -> Result<&[f32]> {
            self.buf.fill(-1e4);
            self.buf[self.stream[self.seen] as usize] = 1e4;
            self.seen += 1;
            Ok(&self.buf)
        }
    }

    #[test]
    fn uniform_logits_give_vocab_size() {
        let mut u = Uniform { vocab: 500, seq_len: 8, buf: vec![0.0; 500] };
        let tokens: Vec<u32> = (0..37).map(|i| (i * 13 % 500) as u32).collect();
        let p = perplexity(&mut u, &tokens).unwrap();
        assert!((p.ppl - 500.0).abs() < 1e-9, "{}", p.ppl);
        assert_eq!(p.count, 37);
        assert_eq!(p.windows, 6);
    }

    #[test]
    fn certain_model_gives_one() {
        let stream = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let mut o = Oracle { stream: stream.clone(), seen: 0, buf: vec![0.0; 10] };
        let p = perplexity(&mut o, &stream).unwrap();
        assert_eq!(p.ppl, 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        let mut u = Uniform { vocab: 5, seq_len: 8, buf: vec![0.0; 5] };
        assert!(matches!(perplexity(&mut u, &[]), Err(Error::Domain(_))));
        assert!(matches!(perplexity(&mut u, &[BOS]), Err(Error::Domain(_))));
        assert!(matches!(perplexity(&mut u, &[7]), Err(Error::TokenRange { .. })));
    }

    #[test]
    fn token_stream_parsing() {
        let bytes: Vec<u8> = [1i32, 5, 2].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(read_token_stream(&bytes, 10).unwrap(), vec![1, 5, 2]);
        assert!(read_token_stream(&bytes[..5], 10).is_err());
        let neg: Vec<u8> = (-3i32).to_le_bytes().to_vec();
        assert!(matches!(read_token_stream(&neg, 10), Err(Error::TokenRange { token: -3, .. })));
    }
}
