//! Autoregressive decoding with endless-loop diagnostics.
//!
//! Generation starts after [inputs…, task, ⟨S⟩] (plus any tokens already in
//! the target segment, which act as a forced prompt) and stops at ⟨E⟩ or
//! the hard cap. A decode is flagged `looped` when any 4-gram repeats at
//! least 8 times consecutively in the generated tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::model::{bind_const_params, build_backbone, build_input_rows, ForwardMode, LmState};
use crate::lm::sequence::UnifiedSequence;
use crate::numerics::GraphBuilder;

pub const LOOP_NGRAM: usize = 4;
pub const LOOP_REPEATS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    Eos,
    Cap,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DecodeDiag {
    pub length: usize,
    pub stop: StopReason,
    pub looped: bool,
}

/// True when some 4-gram repeats ≥ 8 times back to back.
pub fn has_endless_repeat(tokens: &[u32], ngram: usize, repeats: usize) -> bool {
    let span = ngram * repeats;
    if tokens.len() < span {
        return false;
    }
    for start in 0..=(tokens.len() - span) {
        let pattern = &tokens[start..start + ngram];
        let mut ok = true;
        for r in 1..repeats {
            if &tokens[start + r * ngram..start + (r + 1) * ngram] != pattern {
                ok = false;
                break;
            }
        }
        if ok {
            return true;
        }
    }
    false
}

fn pick_next(row: &[f64], strategy: DecodeStrategy, rng: &mut Option<ChaCha8Rng>) -> u32 {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best as u32
        }
        DecodeStrategy::TopK { k, .. } => {
            let k = k.max(1).min(row.len());
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let top = &idx[..k];
            let m = row[top[0]];
            let weights: Vec<f64> = top.iter().map(|&i| (row[i] - m).exp()).collect();
            let total: f64 = weights.iter().sum();
            let r = rng.as_mut().expect("seeded rng for top-k").gen_range(0.0..total);
            let mut acc = 0.0;
            for (w, &i) in weights.iter().zip(top) {
                acc += w;
                if r < acc {
                    return i as u32;
                }
            }
            top[k - 1] as u32
        }
    }
}

/// Greedy (default) or top-k generation; returns unified token ids (⟨E⟩
/// excluded) plus diagnostics.
pub fn decode_autoregressive(
    prefix: &UnifiedSequence,
    state: &LmState,
    cfg: &DecodeConfig,
) -> Result<(Vec<u32>, DecodeDiag)> {
    if prefix.len() > state.cfg.max_seq {
        return Err(Error::InvalidArg(format!(
            "prefix length {} exceeds max sequence length {}",
            prefix.len(),
            state.cfg.max_seq
        )));
    }
    let eos = prefix.spec.task; // silence unused warnings when task is irrelevant
    let _ = eos;
    let eos_id = state.vocab.text_id(state.vocab.eos()).unwrap();
    let mut rng = match cfg.strategy {
        DecodeStrategy::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeStrategy::Greedy => None,
    };
    let mut generated: Vec<u32> = Vec::new();
    let stop;
    loop {
        if generated.len() >= cfg.max_new_tokens {
            stop = StopReason::Cap;
            break;
        }
        // layout without ⟨E⟩: [inputs, task, ⟨S⟩, targets…, generated…]
        let base_len = prefix.len() - 1 + generated.len();
        if base_len + 1 > state.cfg.max_seq {
            stop = StopReason::Cap;
            break;
        }
        let mut b = GraphBuilder::new();
        let pn = bind_const_params(&mut b, &state.params);
        let (rows, _) =
            build_input_rows(&mut b, &pn, state, prefix, &generated, false, ForwardMode::Infer);
        let logits = build_backbone(&mut b, &pn, state, rows);
        let t_len = b.value(rows).shape()[0];
        let last = b.slice_rows(logits, t_len - 1, t_len);
        b.set_name("next", last);
        let g = b.finish()?;
        let row_t = g.evaluate(&["next"])?.remove("next").unwrap();
        let next = pick_next(row_t.row(0), cfg.strategy, &mut rng);
        if next == eos_id {
            stop = StopReason::Eos;
            break;
        }
        generated.push(next);
    }
    let looped = has_endless_repeat(&generated, LOOP_NGRAM, LOOP_REPEATS);
    let diag = DecodeDiag {
        length: generated.len(),
        stop,
        looped,
    };
    Ok((generated, diag))
}

/// Fraction of decodes flagged as endless repetition.
pub fn loop_ratio(diags: &[DecodeDiag]) -> Result<f64> {
    if diags.is_empty() {
        return Err(Error::InvalidArg("loop ratio of an empty list".into()));
    }
    let looped = diags.iter().filter(|d| d.looped).count();
    Ok(looped as f64 / diags.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_detector_rules() {
        // token 7 forever: the 4-gram (7,7,7,7) repeats ≥ 8 times
        let forever: Vec<u32> = vec![7; 64];
        assert!(has_endless_repeat(&forever, 4, 8));
        // 31 tokens cannot hold 8 repeats of a 4-gram
        assert!(!has_endless_repeat(&vec![7; 31], 4, 8));
        // alternating pattern of period 4 repeats as well
        let cycle: Vec<u32> = (0..40).map(|i| (i % 4) as u32).collect();
        assert!(has_endless_repeat(&cycle, 4, 8));
        // non-repeating ramp does not
        let ramp: Vec<u32> = (0..64).collect();
        assert!(!has_endless_repeat(&ramp, 4, 8));
    }

    #[test]
    fn loop_ratio_arithmetic() {
        let mk = |looped| DecodeDiag {
            length: 10,
            stop: StopReason::Cap,
            looped,
        };
        let mut diags = vec![mk(true), mk(true)];
        diags.extend((0..48).map(|_| mk(false)));
        assert!((loop_ratio(&diags).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(loop_ratio(&diags[2..].to_vec()).unwrap(), 0.0);
        assert!(loop_ratio(&[]).is_err());
    }

    #[test]
    fn top_k_pick_is_seeded() {
        let row: Vec<f64> = vec![0.1, 2.0, 1.5, -1.0, 0.4];
        let strategy = DecodeStrategy::TopK { k: 3, seed: 5 };
        let mut r1 = Some(ChaCha8Rng::seed_from_u64(5));
        let mut r2 = Some(ChaCha8Rng::seed_from_u64(5));
        for _ in 0..10 {
            assert_eq!(
                pick_next(&row, strategy, &mut r1),
                pick_next(&row, strategy, &mut r2)
            );
        }
    }

    #[test]
    fn greedy_pick_breaks_ties_low() {
        let row = vec![1.0, 3.0, 3.0, 0.0];
        assert_eq!(pick_next(&row, DecodeStrategy::Greedy, &mut None), 1);
    }
}
