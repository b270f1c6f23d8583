//! Evaluation metrics: token error rate (Levenshtein, normalized by
//! reference length), classification accuracy, SNR, log-mel distance, and
//! endless-loop ratio. Task evaluation runs autoregressive decoding over
//! an eval set and emits machine-readable records.

use serde::{Deserialize, Serialize};

use crate::codec::{encode_codes, CodecState};
use crate::dsp::{lfr_stack, mel_features, Waveform};
use crate::error::{Error, Result};
use crate::lm::{
    build_sequence, decode_autoregressive, loop_ratio, task_spec, BuildInput, DecodeConfig,
    DecodeDiag, LmState, Modality, TargetTokens, Task, TokenKind,
};
use crate::tasks::corpus::{CorpusPair, PairData};
use crate::vocoder::{synthesize, ConditionBundle, VocoderState};

/// SNR is capped here when the error energy is zero, keeping reports JSON-
/// representable.
pub const SNR_CAP_DB: f64 = 200.0;

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Edit distance normalized by reference length (empty hypothesis against
/// a 5-token reference gives exactly 1.0).
pub fn token_error_rate(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArg("empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

pub fn token_accuracy(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    Ok(1.0 - token_error_rate(hyp, reference)?.min(1.0))
}

/// 10·log10 of reference energy over error energy, aligned to the shorter
/// signal and capped at [`SNR_CAP_DB`].
pub fn snr_db(reference: &Waveform, test: &Waveform) -> Result<f64> {
    let n = reference.len().min(test.len());
    if n == 0 {
        return Err(Error::InvalidArg("empty signals for SNR".into()));
    }
    let mut sig = 0.0;
    let mut err = 0.0;
    for i in 0..n {
        let r = reference.samples[i];
        let d = r - test.samples[i];
        sig += r * r;
        err += d * d;
    }
    // tail of the longer signal counts as error
    for i in n..reference.len() {
        sig += reference.samples[i] * reference.samples[i];
        err += reference.samples[i] * reference.samples[i];
    }
    for i in n..test.len() {
        err += test.samples[i] * test.samples[i];
    }
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    if sig == 0.0 {
        return Ok(-SNR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB))
}

/// Mean absolute log-mel difference over the overlapping frames.
pub fn logmel_distance(a: &Waveform, b: &Waveform) -> Result<f64> {
    let ma = mel_features(a)?;
    let mb = mel_features(b)?;
    let t = ma.num_frames().min(mb.num_frames());
    if t == 0 {
        return Err(Error::InvalidArg("no frames to compare".into()));
    }
    let bins = ma.mel_bins;
    let mut acc = 0.0;
    for i in 0..t {
        let ra = ma.frames.row(i);
        let rb = mb.frames.row(i);
        for j in 0..bins {
            acc += (ra[j] - rb[j]).abs();
        }
    }
    Ok(acc / (t * bins) as f64)
}

/// Per-clip evaluation diagnostics; the audio fields follow the
/// {clip_id, logmel_dist, snr_db} record layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_error_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logmel_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub looped: bool,
    pub decoded_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub count: usize,
    pub loop_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_logmel_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_snr_db: Option<f64>,
    pub records: Vec<EvalRecord>,
}

impl TaskMetrics {
    /// Metric by name, used by the CLI `--assert` switch.
    pub fn lookup(&self, key: &str) -> Option<f64> {
        match key {
            "loop_ratio" => Some(self.loop_ratio),
            "token_acc" => self.token_acc,
            "class_acc" => self.class_acc,
            "mean_logmel_dist" => self.mean_logmel_dist,
            "mean_snr_db" => self.mean_snr_db,
            "count" => Some(self.count as f64),
            _ => None,
        }
    }
}

/// Frozen model trio driving evaluation and chaining. The vocoder is
/// optional for text-output tasks.
pub struct Models<'a> {
    pub lm: &'a LmState,
    pub codec: &'a CodecState,
    pub vocoder: Option<&'a VocoderState>,
}

/// Decode prefix for a corpus pair (inputs + task only).
pub fn pair_to_prefix(
    pair: &CorpusPair,
    lm: &LmState,
) -> Result<crate::lm::UnifiedSequence> {
    let spec = task_spec(pair.task);
    let input = match (&spec.input, &pair.input) {
        (Modality::Audio, PairData::Audio(w)) => BuildInput::Audio(mel_features(w)?),
        (Modality::Text, PairData::Text(t)) => BuildInput::Text(lm.vocab.encode_text(t)),
        _ => {
            return Err(Error::InvalidArg(format!(
                "pair {} does not match task modality",
                pair.id
            )))
        }
    };
    let target = match spec.output {
        Modality::Text => TargetTokens::Text(vec![]),
        Modality::Audio => TargetTokens::Audio(vec![]),
    };
    build_sequence(&spec, input, target, &lm.vocab, lm.cfg.lfr_factor)
}

/// Teacher-forced training sequence for a corpus pair; audio targets are
/// tokenized with the frozen codec's first quantizer group.
pub fn pair_to_sequence(
    pair: &CorpusPair,
    codec: &CodecState,
    lm: &LmState,
) -> Result<crate::lm::UnifiedSequence> {
    pair_to_sequence_with_codes(pair, None, codec, lm)
}

/// Like [`pair_to_sequence`], with optionally precomputed first-group codes
/// for the audio target (they are identical at any quantizer depth by
/// prefix consistency, so callers may cache them).
pub fn pair_to_sequence_with_codes(
    pair: &CorpusPair,
    cached_first_group: Option<&[u32]>,
    codec: &CodecState,
    lm: &LmState,
) -> Result<crate::lm::UnifiedSequence> {
    let spec = task_spec(pair.task);
    let input = match (&spec.input, &pair.input) {
        (Modality::Audio, PairData::Audio(w)) => BuildInput::Audio(mel_features(w)?),
        (Modality::Text, PairData::Text(t)) => BuildInput::Text(lm.vocab.encode_text(t)),
        _ => {
            return Err(Error::InvalidArg(format!(
                "pair {} does not match task modality",
                pair.id
            )))
        }
    };
    let target = match (&spec.output, &pair.target) {
        (Modality::Text, PairData::Text(t)) => TargetTokens::Text(lm.vocab.encode_text(t)),
        (Modality::Text, PairData::Label(l)) => {
            TargetTokens::Text(vec![(b'0' + l) as u32])
        }
        (Modality::Audio, PairData::Audio(w)) => TargetTokens::Audio(match cached_first_group {
            Some(codes) => codes.to_vec(),
            None => encode_codes(w, codec)?.first_group(),
        }),
        _ => {
            return Err(Error::InvalidArg(format!(
                "pair {} target does not match task modality",
                pair.id
            )))
        }
    };
    build_sequence(&spec, input, target, &lm.vocab, lm.cfg.lfr_factor)
}

fn decoded_text_tokens(tokens: &[u32], lm: &LmState) -> Vec<u32> {
    tokens
        .iter()
        .filter_map(|&t| match lm.vocab.classify(t) {
            Ok(TokenKind::Text(local)) => Some(local),
            _ => None,
        })
        .collect()
}

fn decoded_audio_codes(tokens: &[u32], lm: &LmState) -> Vec<u32> {
    tokens
        .iter()
        .filter_map(|&t| match lm.vocab.classify(t) {
            Ok(TokenKind::Audio(code)) => Some(code),
            _ => None,
        })
        .collect()
}

/// Condition for reconstructing a decoded audio-token stream, per task.
pub fn condition_for(pair: &CorpusPair, lm: &LmState) -> Result<ConditionBundle> {
    condition_for_spec(pair, lm.cfg.lfr_factor)
}

/// Same, without a model in hand (text conditions are byte-level ids).
pub fn condition_for_spec(pair: &CorpusPair, lfr_factor: usize) -> Result<ConditionBundle> {
    match pair.task {
        Task::Se => {
            let noisy = match &pair.input {
                PairData::Audio(w) => w,
                _ => return Err(Error::InvalidArg("SE pair without audio input".into())),
            };
            let feats = lfr_stack(&mel_features(noisy)?, lfr_factor)?;
            Ok(ConditionBundle::Se { feats })
        }
        Task::Tts => {
            let text = match &pair.input {
                PairData::Text(t) => t,
                _ => return Err(Error::InvalidArg("TTS pair without text input".into())),
            };
            Ok(ConditionBundle::Tts {
                text: text.bytes().map(|b| b as u32).collect(),
                prompt: None,
            })
        }
        _ => Ok(ConditionBundle::None),
    }
}

/// Run autoregressive decoding over an eval set and score it.
pub fn evaluate(
    task: Task,
    models: &Models,
    eval_set: &[CorpusPair],
    decode_cfg: &DecodeConfig,
) -> Result<TaskMetrics> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArg("empty eval set".into()));
    }
    let mut records = Vec::with_capacity(eval_set.len());
    let mut diags: Vec<DecodeDiag> = Vec::with_capacity(eval_set.len());
    let mut accs = Vec::new();
    let mut corrects = Vec::new();
    let mut logmels = Vec::new();
    let mut snrs = Vec::new();
    for pair in eval_set {
        if pair.task != task {
            return Err(Error::InvalidArg(format!(
                "pair {} is not a {:?} pair",
                pair.id, task
            )));
        }
        let prefix = pair_to_prefix(pair, models.lm)?;
        let (tokens, diag) = decode_autoregressive(&prefix, models.lm, decode_cfg)?;
        let mut rec = EvalRecord {
            clip_id: pair.id.clone(),
            reference: None,
            hypothesis: None,
            token_error_rate: None,
            correct: None,
            logmel_dist: None,
            snr_db: None,
            looped: diag.looped,
            decoded_len: diag.length,
        };
        match (&pair.target, task) {
            (PairData::Label(l), _) => {
                let hyp_tokens = decoded_text_tokens(&tokens, models.lm);
                let hyp = models.lm.vocab.decode_text(&hyp_tokens);
                let want = ((b'0' + l) as char).to_string();
                rec.correct = Some(hyp == want);
                rec.reference = Some(want);
                rec.hypothesis = Some(hyp);
                corrects.push(rec.correct.unwrap());
            }
            (PairData::Text(t), _) => {
                let hyp_tokens = decoded_text_tokens(&tokens, models.lm);
                let ref_tokens = models.lm.vocab.encode_text(t);
                let acc = token_accuracy(&hyp_tokens, &ref_tokens)?;
                rec.token_error_rate = Some(token_error_rate(&hyp_tokens, &ref_tokens)?);
                rec.reference = Some(t.clone());
                rec.hypothesis = Some(models.lm.vocab.decode_text(&hyp_tokens));
                accs.push(acc);
            }
            (PairData::Audio(reference), _) => {
                let codes = decoded_audio_codes(&tokens, models.lm);
                if codes.is_empty() {
                    // nothing decodable: score the silent signal
                    let silent =
                        Waveform::new(vec![0.0; reference.len()], reference.sample_rate)?;
                    rec.logmel_dist = Some(logmel_distance(reference, &silent)?);
                    rec.snr_db = Some(snr_db(reference, &silent)?);
                } else {
                    let vocoder = models.vocoder.ok_or_else(|| {
                        Error::InvalidArg("audio-output evaluation needs a vocoder".into())
                    })?;
                    let cond = condition_for(pair, models.lm)?;
                    let wave = synthesize(&codes, &cond, models.codec, vocoder)?;
                    rec.logmel_dist = Some(logmel_distance(reference, &wave)?);
                    rec.snr_db = Some(snr_db(reference, &wave)?);
                }
                logmels.push(rec.logmel_dist.unwrap());
                snrs.push(rec.snr_db.unwrap());
            }
        }
        diags.push(diag);
        records.push(rec);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(TaskMetrics {
        task: task.token_str().to_string(),
        count: eval_set.len(),
        loop_ratio: loop_ratio(&diags)?,
        token_acc: (!accs.is_empty()).then(|| mean(&accs)),
        class_acc: (!corrects.is_empty())
            .then(|| corrects.iter().filter(|&&c| c).count() as f64 / corrects.len() as f64),
        mean_logmel_dist: (!logmels.is_empty()).then(|| mean(&logmels)),
        mean_snr_db: (!snrs.is_empty()).then(|| mean(&snrs)),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive recursive edit distance, the oracle for the DP version.
    fn brute_force_edit(a: &[u32], b: &[u32]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_force_edit(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_force_edit(&a[1..], b) + 1;
        let ins = brute_force_edit(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn dp_matches_brute_force_on_short_strings() {
        // all pairs over a 3-symbol alphabet with lengths ≤ 4
        let mut strings: Vec<Vec<u32>> = vec![vec![]];
        for len in 1..=4usize {
            let mut next = Vec::new();
            for s in strings.iter().filter(|s| s.len() == len - 1) {
                for c in 0..3u32 {
                    let mut t = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            strings.extend(next);
        }
        for a in strings.iter().step_by(7) {
            for b in strings.iter().step_by(11) {
                assert_eq!(edit_distance(a, b), brute_force_edit(a, b));
            }
        }
    }

    #[test]
    fn error_rate_definitions() {
        let reference: Vec<u32> = vec![1, 2, 3, 4, 5];
        assert_eq!(token_error_rate(&[], &reference).unwrap(), 1.0);
        assert_eq!(token_error_rate(&reference, &reference).unwrap(), 0.0);
        assert_eq!(token_accuracy(&reference, &reference).unwrap(), 1.0);
        assert!(token_error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn random_hypotheses_score_near_chance() {
        // against random references over S symbols, accuracy ≈ 1/S
        let s = 16u32;
        let mut state = 0x5eed5eedu64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) % s as u64) as u32
        };
        let mut total = 0.0;
        let trials = 400;
        for _ in 0..trials {
            let reference: Vec<u32> = (0..4).map(|_| next()).collect();
            let hyp: Vec<u32> = (0..4).map(|_| next()).collect();
            total += token_accuracy(&hyp, &reference).unwrap();
        }
        let mean = total / trials as f64;
        // matching-by-chance plus alignment slack keeps this well below 0.3
        assert!(mean < 0.3, "random accuracy {}", mean);
    }

    #[test]
    fn metric_axioms_on_sampled_triples() {
        let mut state = 0xabcdefu64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) % 5) as u32
        };
        for _ in 0..60 {
            let (la, lb, lc) = ((next() % 6) as usize, (next() % 6) as usize, (next() % 6) as usize);
            let a: Vec<u32> = (0..la).map(|_| next()).collect();
            let b: Vec<u32> = (0..lb).map(|_| next()).collect();
            let c: Vec<u32> = (0..lc).map(|_| next()).collect();
            assert_eq!(edit_distance(&a, &a), 0);
            assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            assert!(
                edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c),
                "triangle violated"
            );
        }
    }

    #[test]
    fn snr_of_exact_match_is_capped() {
        let w = Waveform::sine(500.0, 0.05, 0.5, 16_000);
        assert_eq!(snr_db(&w, &w).unwrap(), SNR_CAP_DB);
    }

    #[test]
    fn snr_of_known_noise_level() {
        let w = Waveform::sine(500.0, 0.2, 0.5, 16_000);
        let mut noisy = w.clone();
        // +0.05 DC offset: SNR = 10log10(mean(0.125)/0.0025) = 16.99 dB
        for s in noisy.samples.iter_mut() {
            *s += 0.05;
        }
        let got = snr_db(&w, &noisy).unwrap();
        assert!((got - 16.989).abs() < 0.05, "snr {}", got);
    }

    #[test]
    fn logmel_distance_zero_on_identity() {
        let w = Waveform::sine(700.0, 0.1, 0.5, 16_000);
        assert_eq!(logmel_distance(&w, &w).unwrap(), 0.0);
        let other = Waveform::sine(1_500.0, 0.1, 0.5, 16_000);
        assert!(logmel_distance(&w, &other).unwrap() > 0.1);
    }
}
