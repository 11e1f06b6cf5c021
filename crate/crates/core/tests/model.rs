mod common;

use common::{dequantize_weights, reference_logits, tiny_config};
use proptest::prelude::*;
use q8llama::checkpoint::Fp32Weights;
use q8llama::sampler::{Sampler, SamplerConfig};
use q8llama::{Error, ModelConfig, Transformer};

fn model(c: ModelConfig, seed: u64, gs: usize) -> Transformer {
    let (w, _) = Fp32Weights::random(&c, true, seed).quantize(&c, gs).unwrap();
    Transformer::new(c, w).unwrap()
}

#[test]
fn matches_dense_reference_at_every_position() {
    let c = tiny_config();
    let m = model(c, 7, 4);
    let tokens: Vec<usize> = (0..c.seq_len).map(|i| (i * 7 + 3) % c.vocab_size).collect();
    let want = reference_logits(&c, &dequantize_weights(m.weights()), &tokens, Some(4));
    let mut s = m.new_state();
    for (pos, &t) in tokens.iter().enumerate() {
        let got = m.forward(&mut s, t, pos).unwrap();
        for (a, b) in got.iter().zip(&want[pos]) {
            assert!((*a as f64 - b).abs() < 1e-4, "pos {pos}: {a} vs {b}");
        }
    }
}

#[test]
fn one_kv_head_per_query_head_is_plain_multi_head_attention() {
    let c = ModelConfig { n_heads: 2, n_kv_heads: 2, ..tiny_config() };
    let m = model(c, 11, 8);
    let tokens = [5, 9, 1, 30, 2];
    let want = reference_logits(&c, &dequantize_weights(m.weights()), &tokens, Some(8));
    let mut s = m.new_state();
    for (pos, &t) in tokens.iter().enumerate() {
        let got = m.forward(&mut s, t, pos).unwrap();
        assert!(got.iter().zip(&want[pos]).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
    }
}

#[test]
fn decoding_never_reallocates() {
    let c = tiny_config();
    let m = model(c, 1, 4);
    let mut s = m.new_state();
    let before = s.allocation_fingerprint();
    for pos in 0..c.seq_len {
        m.forward(&mut s, pos % c.vocab_size, pos).unwrap();
        assert_eq!(s.allocation_fingerprint(), before);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let c = tiny_config();
    let m = model(c, 2, 4);
    let mut s = m.new_state();
    for pos in 0..c.seq_len {
        m.forward(&mut s, 3, pos).unwrap();
        for h in 0..c.n_heads {
            let w = s.attention_weights(c.seq_len, h, pos);
            let total: f32 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
            assert!(w.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let c = tiny_config();
    let m = model(c, 3, 4);
    let run = |seed| {
        let mut s = m.new_state();
        let mut sampler = Sampler::new(SamplerConfig { temperature: 1.0, top_p: 0.9, rng_seed: seed }).unwrap();
        let mut tok = 1;
        (0..c.seq_len)
            .map(|pos| {
                tok = sampler.sample(m.forward(&mut s, tok, pos).unwrap()).unwrap();
                tok
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42), run(43));
}

#[test]
fn rejects_positions_past_the_context_and_bad_tokens() {
    let c = tiny_config();
    let m = model(c, 4, 4);
    let mut s = m.new_state();
    assert!(matches!(m.forward(&mut s, 0, c.seq_len), Err(Error::Capacity { .. })));
    assert!(matches!(m.forward(&mut s, c.vocab_size, 0), Err(Error::TokenRange { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_finite_for_any_token_sequence(seed in 0u64..1000, tokens in prop::collection::vec(0usize..32, 1..16)) {
        let c = tiny_config();
        let m = model(c, seed, 4);
        let mut s = m.new_state();
        for (pos, &t) in tokens.iter().enumerate() {
            prop_assert!(m.forward(&mut s, t, pos).unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
