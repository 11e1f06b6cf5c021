//! Byte-pair tokenizer over a scored vocabulary.
//!
//! Binary layout (little-endian): `i32 max_token_length`, then for each of
//! `vocab_size` tokens `{ f32 score, i32 len, len bytes }`.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    scores: Vec<f32>,
    max_token_length: usize,
    lookup: HashMap<Vec<u8>, u32>,
    byte_pieces: [Option<u32>; 256],
    /// Decoded bytes of each token: the raw byte for `<0xHH>` pieces, the
    /// piece itself otherwise.
    decoded: Vec<Vec<u8>>,
}

/// Parses `<0xHH>` byte-fallback pieces.
fn byte_piece(piece: &[u8]) -> Option<u8> {
    if piece.len() == 6 && piece.starts_with(b"<0x") && piece[5] == b'>' {
        let hex = std::str::from_utf8(&piece[3..5]).ok()?;
        return u8::from_str_radix(hex, 16).ok();
    }
    None
}

impl Tokenizer {
    pub fn from_pieces(vocab: Vec<Vec<u8>>, scores: Vec<f32>) -> Result<Self> {
        if vocab.len() != scores.len() {
            return Err(Error::format(format_args!("{} pieces but {} scores", vocab.len(), scores.len())));
        }
        let max_token_length = vocab.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self::build(vocab, scores, max_token_length))
    }

    fn build(vocab: Vec<Vec<u8>>, scores: Vec<f32>, max_token_length: usize) -> Self {
        let mut lookup = HashMap::with_capacity(vocab.len());
        let mut byte_pieces = [None; 256];
        let mut decoded = Vec::with_capacity(vocab.len());
        for (id, piece) in vocab.iter().enumerate() {
            lookup.entry(piece.clone()).or_insert(id as u32);
            match byte_piece(piece) {
                Some(b) => {
                    byte_pieces[b as usize].get_or_insert(id as u32);
                    decoded.push(vec![b]);
                }
                None => decoded.push(piece.clone()),
            }
        }
        Tokenizer { vocab, scores, max_token_length, lookup, byte_pieces, decoded }
    }

    pub fn load(bytes: &[u8], vocab_size: usize) -> Result<Self> {
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| {
                Error::format(format_args!("tokenizer truncated while reading {what} at offset {pos}"))
            })?;
            *pos += n;
            Ok(s)
        }
        let mut pos = 0;
        let max_len = i32::from_le_bytes(take(bytes, &mut pos, 4, "max_token_length")?.try_into().unwrap());
        if max_len < 0 {
            return Err(Error::format(format_args!("negative max_token_length {max_len}")));
        }
        let max_len = max_len as usize;
        let mut vocab = Vec::with_capacity(vocab_size);
        let mut scores = Vec::with_capacity(vocab_size);
        for i in 0..vocab_size {
            let score = f32::from_le_bytes(take(bytes, &mut pos, 4, "score")?.try_into().unwrap());
            let len = i32::from_le_bytes(take(bytes, &mut pos, 4, "piece length")?.try_into().unwrap());
            if len < 0 || len as usize > max_len {
                return Err(Error::format(format_args!("token {i} has length {len}, max_token_length is {max_len}")));
            }
            vocab.push(take(bytes, &mut pos, len as usize, "piece")?.to_vec());
            scores.push(score);
        }
        if pos != bytes.len() {
            return Err(Error::format(format_args!("{} trailing bytes after {vocab_size} tokens", bytes.len() - pos)));
        }
        Ok(Self::build(vocab, scores, max_len))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.max_token_length as i32).to_le_bytes());
        for (piece, score) in self.vocab.iter().zip(&self.scores) {
            out.extend_from_slice(&score.to_le_bytes());
            out.extend_from_slice(&(piece.len() as i32).to_le_bytes());
            out.extend_from_slice(piece);
        }
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    pub fn score(&self, id: u32) -> Option<f32> {
        self.scores.get(id as usize).copied()
    }

    pub fn max_token_length(&self) -> usize {
        self.max_token_length
    }

    fn push_fallback(&self, bytes: &[u8], out: &mut Vec<u32>) {
        for &b in bytes {
            out.push(self.byte_pieces[b as usize].unwrap_or(UNK));
        }
    }

    /// Greedy BPE: start from UTF-8 characters (or raw bytes when a character
    /// is not in the vocabulary), then repeatedly merge the adjacent pair
    /// whose concatenation has the highest score, leftmost on ties.
    ///
    /// Non-empty text gets a leading space, as sentencepiece does.
    pub fn encode(&self, text: &[u8], add_bos: bool, add_eos: bool) -> Vec<u32> {
        let mut tokens = Vec::with_capacity(text.len() + 3);
        if add_bos {
            tokens.push(BOS);
        }
        let start = tokens.len();
        if !text.is_empty() {
            match self.lookup.get(&b" "[..]) {
                Some(&id) => tokens.push(id),
                None => self.push_fallback(b" ", &mut tokens),
            }
        }

        let mut i = 0;
        while i < text.len() {
            // A UTF-8 lead byte plus at most three continuation bytes.
            let mut j = i + 1;
            while j < text.len() && j - i < 4 && text[j] & 0xC0 == 0x80 {
                j += 1;
            }
            match self.lookup.get(&text[i..j]) {
                Some(&id) => tokens.push(id),
                None => self.push_fallback(&text[i..j], &mut tokens),
            }
            i = j;
        }

        let mut buf = Vec::with_capacity(self.max_token_length * 2);
        loop {
            let mut best: Option<(f32, usize, u32)> = None;
            for k in start..tokens.len().saturating_sub(1) {
                buf.clear();
                buf.extend_from_slice(&self.vocab[tokens[k] as usize]);
                buf.extend_from_slice(&self.vocab[tokens[k + 1] as usize]);
                if let Some(&id) = self.lookup.get(&buf) {
                    let score = self.scores[id as usize];
                    if best.is_none_or(|(s, _, _)| score > s) {
                        best = Some((score, k, id));
                    }
                }
            }
            let Some((_, k, id)) = best else { break };
            tokens[k] = id;
            tokens.remove(k + 1);
        }

        if add_eos {
            tokens.push(EOS);
        }
        tokens
    }

    /// Bytes for `token` when it follows `prev`. The leading space of the
    /// first piece after BOS is dropped.
    pub fn decode(&self, prev: u32, token: u32) -> Result<&[u8]> {
        let bytes = self
            .decoded
            .get(token as usize)
            .ok_or(Error::TokenRange { token: token as i64, vocab_size: self.vocab.len() })?;
        if prev == BOS && bytes.first() == Some(&b' ') {
            return Ok(&bytes[1..]);
        }
        Ok(bytes)
    }

    /// Decodes a whole sequence, skipping BOS/EOS markers.
    pub fn decode_all(&self, tokens: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut prev = BOS;
        for &t in tokens {
            if t == BOS || t == EOS {
                prev = t;
                continue;
            }
            out.extend_from_slice(self.decode(prev, t)?);
            prev = t;
        }
        Ok(out)
    }

    /// Checks a signed token id from an external source.
    pub fn check_id(&self, token: i64) -> Result<u32> {
        if token < 0 || token as usize >= self.vocab.len() {
            return Err(Error::TokenRange { token, vocab_size: self.vocab.len() });
        }
        Ok(token as u32)
    }
}

/// A small vocabulary with control tokens, all 256 byte pieces, and a few
/// English merges. Handy for tests and demos.
pub fn toy_tokenizer() -> Tokenizer {
    let mut vocab: Vec<Vec<u8>> = vec![b"<unk>".to_vec(), b"<s>".to_vec(), b"</s>".to_vec()];
    let mut scores = vec![0.0; 3];
    for b in 0..=255u8 {
        vocab.push(format!("<0x{b:02X}>").into_bytes());
        scores.push(0.0);
    }
    // Every substring of every word, so greedy merging can always reach
    // the whole word.
    let words = [" the", "The", "Once", " upon", " a", " time", " there", " was", " day", " and", "ing", "ed", "."];
    let mut pieces: Vec<&str> = Vec::new();
    for w in words {
        for i in 0..w.len() {
            for j in i + 1..=w.len() {
                if !pieces.contains(&&w[i..j]) {
                    pieces.push(&w[i..j]);
                }
            }
        }
    }
    for (rank, m) in pieces.iter().enumerate() {
        vocab.push(m.as_bytes().to_vec());
        // Longer pieces score higher, so they win merges.
        scores.push(m.len() as f32 - rank as f32 * 1e-4);
    }
    Tokenizer::from_pieces(vocab, scores).expect("lengths match")
}
