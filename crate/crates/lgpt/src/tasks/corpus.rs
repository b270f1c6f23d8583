//! Synthetic tone-language corpora.
//!
//! Symbol s maps to a sinusoid at 500 + 100·s Hz, 100 ms per symbol at
//! amplitude 0.5. Utterances are 4–10 symbols. Speech-enhancement pairs
//! mix in white noise at an integer SNR drawn from {2,…,15} dB (both
//! sides rescaled if the mixture would clip, which preserves the SNR).
//! Generation is bit-deterministic per (corpus seed, index), and the
//! train/eval split hashes the utterance id so the sets are disjoint by
//! construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::lm::Task;

/// Internal seed for the fixed translation permutation π.
const PERM_SEED: u64 = 0xC0DE;
/// Internal seed for the Monte-Carlo class-boundary estimate.
const TERCILE_SEED: u64 = 0x7E5C;

#[derive(Debug, Clone)]
pub struct SyntheticCorpusSpec {
    pub alphabet: usize,
    pub tone_base_hz: f64,
    pub tone_step_hz: f64,
    pub symbol_ms: usize,
    pub amplitude: f64,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub snr_db_lo: i64,
    pub snr_db_hi: i64,
    pub sample_rate: u32,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            alphabet: 16,
            tone_base_hz: 500.0,
            tone_step_hz: 100.0,
            symbol_ms: 100,
            amplitude: 0.5,
            min_symbols: 4,
            max_symbols: 10,
            snr_db_lo: 2,
            snr_db_hi: 15,
            sample_rate: 16_000,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let top = self.tone_base_hz + self.tone_step_hz * (self.alphabet as f64 - 1.0);
        if top >= self.sample_rate as f64 / 2.0 {
            return Err(Error::InvalidArg(format!(
                "top tone {} Hz is at or above Nyquist",
                top
            )));
        }
        if self.alphabet < 2 || self.alphabet > 26 {
            return Err(Error::InvalidArg(
                "alphabet size must be in 2..=26 (symbols are letters)".into(),
            ));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(Error::InvalidArg("bad utterance length range".into()));
        }
        if self.snr_db_lo > self.snr_db_hi {
            return Err(Error::InvalidArg("bad SNR range".into()));
        }
        Ok(())
    }

    pub fn symbol_freq(&self, s: u8) -> f64 {
        self.tone_base_hz + self.tone_step_hz * s as f64
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.sample_rate as usize * self.symbol_ms / 1000
    }

    /// Fixed translation permutation π over the alphabet (a bijection).
    pub fn permutation(&self) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(PERM_SEED);
        let mut perm: Vec<u8> = (0..self.alphabet as u8).collect();
        // Fisher–Yates
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }

    /// Class boundaries splitting the mean-symbol-index distribution into
    /// terciles (estimated once by seeded simulation, so label classes are
    /// near-balanced).
    pub fn tercile_bounds(&self) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(TERCILE_SEED);
        let n = 30_000;
        let mut means = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.gen_range(self.min_symbols..=self.max_symbols);
            let mut acc = 0.0;
            for _ in 0..len {
                acc += rng.gen_range(0..self.alphabet) as f64;
            }
            means.push(acc / len as f64);
        }
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (means[n / 3], means[2 * n / 3])
    }

    /// Mean-frequency tercile label in {0,1,2}.
    pub fn class_of(&self, symbols: &[u8], bounds: (f64, f64)) -> u8 {
        let mean =
            symbols.iter().map(|&s| s as f64).sum::<f64>() / symbols.len().max(1) as f64;
        if mean < bounds.0 {
            0
        } else if mean < bounds.1 {
            1
        } else {
            2
        }
    }

    /// Pure tone rendering of a symbol string.
    pub fn tone_waveform(&self, symbols: &[u8]) -> Waveform {
        let sps = self.samples_per_symbol();
        let mut samples = Vec::with_capacity(symbols.len() * sps);
        for &s in symbols {
            let f = self.symbol_freq(s);
            for i in 0..sps {
                let t = i as f64 / self.sample_rate as f64;
                samples.push(self.amplitude * (2.0 * std::f64::consts::PI * f * t).sin());
            }
        }
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn symbols_to_text(symbols: &[u8]) -> String {
    symbols.iter().map(|&s| (b'a' + s) as char).collect()
}

pub fn text_to_symbols(text: &str, alphabet: usize) -> Result<Vec<u8>> {
    text.bytes()
        .map(|b| {
            if (b'a'..b'a' + alphabet as u8).contains(&b) {
                Ok(b - b'a')
            } else {
                Err(Error::InvalidArg(format!(
                    "character '{}' outside the {}-symbol alphabet",
                    b as char, alphabet
                )))
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum PairData {
    Audio(Waveform),
    Text(String),
    Label(u8),
}

#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub id: String,
    pub task: Task,
    pub symbols: Vec<u8>,
    pub input: PairData,
    pub target: PairData,
    /// Drawn mixing SNR for enhancement pairs.
    pub snr_db: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// FNV-1a, fixed here so the split never moves between toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Disjoint train/eval membership by id hash (80/20).
pub fn split_of(id: &str) -> Split {
    if fnv1a(id.as_bytes()) % 10 < 8 {
        Split::Train
    } else {
        Split::Eval
    }
}

fn utterance_seed(corpus_seed: u64, task: Task, index: u64) -> u64 {
    // splitmix-style mixing of (seed, task, index)
    let mut z = corpus_seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index + 1))
        .wrapping_add((task.index() as u64 + 1) << 32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One deterministic pair, regenerable by (seed, task, index) alone.
/// `perm`/`bounds` come from the spec and are passed in so bulk
/// generation computes them once.
fn gen_pair_inner(
    spec: &SyntheticCorpusSpec,
    task: Task,
    seed: u64,
    index: usize,
    perm: &[u8],
    bounds: (f64, f64),
) -> CorpusPair {
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(seed, task, index as u64));
        let len = rng.gen_range(spec.min_symbols..=spec.max_symbols);
        let symbols: Vec<u8> = (0..len)
            .map(|_| rng.gen_range(0..spec.alphabet) as u8)
            .collect();
        let id = format!(
            "{}-{}-{:06}",
            task.token_str().trim_matches(['<', '>']).to_lowercase(),
            seed,
            index
        );
        let clean = spec.tone_waveform(&symbols);
        let text = symbols_to_text(&symbols);
        let pair = match task {
            Task::Asr => CorpusPair {
                id,
                task,
                symbols,
                input: PairData::Audio(clean),
                target: PairData::Text(text),
                snr_db: None,
            },
            Task::S2tt => {
                let translated: Vec<u8> = symbols.iter().map(|&s| perm[s as usize]).collect();
                CorpusPair {
                    id,
                    task,
                    symbols,
                    input: PairData::Audio(clean),
                    target: PairData::Text(symbols_to_text(&translated)),
                    snr_db: None,
                }
            }
            Task::Slu | Task::Ser | Task::Aac => {
                let label = spec.class_of(&symbols, bounds);
                CorpusPair {
                    id,
                    task,
                    symbols,
                    input: PairData::Audio(clean),
                    target: PairData::Label(label),
                    snr_db: None,
                }
            }
            Task::Tts => CorpusPair {
                id,
                task,
                symbols,
                input: PairData::Text(text),
                target: PairData::Audio(clean),
                snr_db: None,
            },
            Task::Se => {
                let snr_db = rng.gen_range(spec.snr_db_lo..=spec.snr_db_hi);
                let noise: Vec<f64> = (0..clean.len()).map(|_| gaussian(&mut rng)).collect();
                let sig_energy: f64 = clean.samples.iter().map(|s| s * s).sum();
                let noise_energy: f64 = noise.iter().map(|n| n * n).sum();
                let scale =
                    (sig_energy / (noise_energy * 10f64.powf(snr_db as f64 / 10.0))).sqrt();
                let mut noisy: Vec<f64> = clean
                    .samples
                    .iter()
                    .zip(&noise)
                    .map(|(s, n)| s + scale * n)
                    .collect();
                let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let mut clean_scaled = clean.samples.clone();
                if peak > 1.0 {
                    let k = 1.0 / peak;
                    for v in noisy.iter_mut() {
                        *v *= k;
                    }
                    for v in clean_scaled.iter_mut() {
                        *v *= k;
                    }
                }
                CorpusPair {
                    id,
                    task,
                    symbols,
                    input: PairData::Audio(Waveform {
                        samples: noisy,
                        sample_rate: spec.sample_rate,
                    }),
                    target: PairData::Audio(Waveform {
                        samples: clean_scaled,
                        sample_rate: spec.sample_rate,
                    }),
                    snr_db: Some(snr_db),
                }
            }
        };
    pair
}

/// Regenerate a single corpus pair bit-exactly.
pub fn gen_pair(
    spec: &SyntheticCorpusSpec,
    task: Task,
    seed: u64,
    index: usize,
) -> Result<CorpusPair> {
    spec.validate()?;
    Ok(gen_pair_inner(
        spec,
        task,
        seed,
        index,
        &spec.permutation(),
        spec.tercile_bounds(),
    ))
}

/// Deterministic (input, target) pairs for one task. The seed fixes the
/// corpus bit-exactly; per-utterance randomness derives from
/// (seed, task, index).
pub fn gen_corpus(
    spec: &SyntheticCorpusSpec,
    task: Task,
    count: usize,
    seed: u64,
) -> Result<Vec<CorpusPair>> {
    if count < 1 {
        return Err(Error::InvalidArg("corpus count must be >= 1".into()));
    }
    spec.validate()?;
    let perm = spec.permutation();
    let bounds = spec.tercile_bounds();
    Ok((0..count)
        .map(|i| gen_pair_inner(spec, task, seed, i, &perm, bounds))
        .collect())
}

/// Generate until the requested train/eval quotas are filled; the two sets
/// are disjoint by the id-hash split.
pub fn gen_split_corpus(
    spec: &SyntheticCorpusSpec,
    task: Task,
    train_count: usize,
    eval_count: usize,
    seed: u64,
) -> Result<(Vec<CorpusPair>, Vec<CorpusPair>)> {
    spec.validate()?;
    let perm = spec.permutation();
    let bounds = spec.tercile_bounds();
    let mut train = Vec::with_capacity(train_count);
    let mut eval = Vec::with_capacity(eval_count);
    let mut index = 0usize;
    while train.len() < train_count || eval.len() < eval_count {
        let pair = gen_pair_inner(spec, task, seed, index, &perm, bounds);
        match split_of(&pair.id) {
            Split::Train if train.len() < train_count => train.push(pair),
            Split::Eval if eval.len() < eval_count => eval.push(pair),
            _ => {}
        }
        index += 1;
        if index > 1_000_000 {
            return Err(Error::InvalidArg("corpus quota not reachable".into()));
        }
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let spec = SyntheticCorpusSpec::default();
        let a = gen_corpus(&spec, Task::Asr, 5, 42).unwrap();
        let b = gen_corpus(&spec, Task::Asr, 5, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.symbols, y.symbols);
            match (&x.input, &y.input) {
                (PairData::Audio(wa), PairData::Audio(wb)) => {
                    assert_eq!(wa.samples, wb.samples)
                }
                _ => panic!("expected audio"),
            }
        }
        let c = gen_corpus(&spec, Task::Asr, 5, 43).unwrap();
        assert_ne!(a[0].symbols, c[0].symbols);
    }

    #[test]
    fn se_pairs_hit_drawn_snr() {
        let spec = SyntheticCorpusSpec::default();
        let pairs = gen_corpus(&spec, Task::Se, 20, 7).unwrap();
        for p in pairs {
            let (noisy, clean) = match (&p.input, &p.target) {
                (PairData::Audio(n), PairData::Audio(c)) => (n, c),
                _ => panic!("expected audio pair"),
            };
            let drawn = p.snr_db.unwrap() as f64;
            let sig: f64 = clean.samples.iter().map(|s| s * s).sum();
            let err: f64 = noisy
                .samples
                .iter()
                .zip(&clean.samples)
                .map(|(n, c)| (n - c) * (n - c))
                .sum();
            let measured = 10.0 * (sig / err).log10();
            assert!(
                (measured - drawn).abs() < 0.5,
                "drawn {} measured {}",
                drawn,
                measured
            );
            assert!((2.0..=15.0).contains(&drawn));
            assert!(noisy.samples.iter().all(|s| s.abs() <= 1.0));
        }
    }

    #[test]
    fn asr_transcript_recoverable_by_dft_peak() {
        // independent oracle: per-symbol argmax over a coarse DFT grid
        let spec = SyntheticCorpusSpec::default();
        let pairs = gen_corpus(&spec, Task::Asr, 8, 11).unwrap();
        for p in pairs {
            let audio = match &p.input {
                PairData::Audio(w) => w,
                _ => unreachable!(),
            };
            let sps = spec.samples_per_symbol();
            let mut decoded = Vec::new();
            for chunk in audio.samples.chunks(sps) {
                let mut best = (0u8, f64::MIN);
                for s in 0..spec.alphabet as u8 {
                    let f = spec.symbol_freq(s);
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, &x) in chunk.iter().enumerate() {
                        let phi =
                            2.0 * std::f64::consts::PI * f * i as f64 / spec.sample_rate as f64;
                        re += x * phi.cos();
                        im += x * phi.sin();
                    }
                    let mag = re * re + im * im;
                    if mag > best.1 {
                        best = (s, mag);
                    }
                }
                decoded.push(best.0);
            }
            assert_eq!(decoded, p.symbols, "clip {}", p.id);
            match &p.target {
                PairData::Text(t) => assert_eq!(t, &symbols_to_text(&p.symbols)),
                _ => panic!("expected text target"),
            }
        }
    }

    #[test]
    fn permutation_is_a_bijection() {
        let spec = SyntheticCorpusSpec::default();
        let perm = spec.permutation();
        let mut seen = vec![false; spec.alphabet];
        for &p in &perm {
            assert!(!seen[p as usize]);
            seen[p as usize] = true;
        }
        assert_eq!(perm, spec.permutation());
    }

    #[test]
    fn class_labels_are_roughly_balanced() {
        let spec = SyntheticCorpusSpec::default();
        let pairs = gen_corpus(&spec, Task::Ser, 600, 3).unwrap();
        let mut counts = [0usize; 3];
        for p in &pairs {
            match p.target {
                PairData::Label(l) => counts[l as usize] += 1,
                _ => panic!("expected label"),
            }
        }
        for c in counts {
            assert!(c > 120, "class counts {:?}", counts);
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let spec = SyntheticCorpusSpec::default();
        let (train, eval) = gen_split_corpus(&spec, Task::Asr, 50, 10, 9).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(eval.len(), 10);
        for t in &train {
            assert_eq!(split_of(&t.id), Split::Train);
        }
        for e in &eval {
            assert_eq!(split_of(&e.id), Split::Eval);
            assert!(train.iter().all(|t| t.id != e.id));
        }
    }

    #[test]
    fn text_symbol_roundtrip() {
        assert_eq!(symbols_to_text(&[0, 3, 15]), "adp");
        assert_eq!(text_to_symbols("adp", 16).unwrap(), vec![0, 3, 15]);
        assert!(text_to_symbols("xyz", 16).is_err());
    }
}
