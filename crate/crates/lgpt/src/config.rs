//! Plain-text configuration: `key = value` lines under
//! [numerics] [dsp] [codec] [lm] [vocoder] [tasks] sections. Every tunable
//! default lives here; unknown keys are errors (with line numbers), and
//! the fully resolved config is echoed into each run directory so a run
//! can be reproduced from its artifacts alone.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::lm::{AudioEncoderConfig, DecodeConfig, DecodeStrategy, LmConfig, NormKind};
use crate::numerics::AdamConfig;
use crate::tasks::SyntheticCorpusSpec;
use crate::vocoder::PredictorConfig;

#[derive(Debug, Clone)]
pub struct NumericsSection {
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

#[derive(Debug, Clone)]
pub struct DspSection {
    pub win: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub lfr: usize,
    pub sample_rate: u32,
}

#[derive(Debug, Clone)]
pub struct CodecSection {
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub quantizers: usize,
    pub codebook_size: usize,
    pub commit_weight: f64,
    pub spec_windows: Vec<usize>,
    pub ema_decay: f64,
    pub dead_code_steps: u64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct LmSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_seq: usize,
    pub enc_blocks: usize,
    pub enc_norm: String,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub decode: String,
    pub topk_k: usize,
    pub topk_seed: u64,
    pub max_new_tokens: usize,
    pub eval_max_new_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct VocoderSection {
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct TasksSection {
    pub alphabet: usize,
    pub tone_base_hz: f64,
    pub tone_step_hz: f64,
    pub symbol_ms: usize,
    pub amplitude: f64,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub snr_lo: i64,
    pub snr_hi: i64,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    pub codec_train_clips: usize,
    pub codec_heldout_clips: usize,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub numerics: NumericsSection,
    pub dsp: DspSection,
    pub codec: CodecSection,
    pub lm: LmSection,
    pub vocoder: VocoderSection,
    pub tasks: TasksSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            numerics: NumericsSection {
                seed: 42,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
                warmup_steps: 100,
            },
            dsp: DspSection {
                win: 512,
                hop: 160,
                mel_bins: 40,
                lfr: 6,
                sample_rate: 16_000,
            },
            codec: CodecSection {
                strides: vec![8, 5, 4, 2, 2],
                channels: vec![16, 24, 32, 48, 64],
                latent_dim: 64,
                quantizers: 32,
                codebook_size: 1024,
                commit_weight: 0.25,
                spec_windows: vec![512, 128],
                ema_decay: 0.99,
                dead_code_steps: 200,
                lr: 3e-3,
                steps: 2000,
                batch_size: 4,
            },
            lm: LmSection {
                layers: 4,
                width: 64,
                heads: 4,
                ff_mult: 4,
                max_seq: 2048,
                enc_blocks: 2,
                enc_norm: "layer".into(),
                lr: 1e-3,
                steps: 5000,
                batch_size: 8,
                decode: "greedy".into(),
                topk_k: 8,
                topk_seed: 0,
                max_new_tokens: 512,
                eval_max_new_tokens: 64,
            },
            vocoder: VocoderSection {
                layers: 2,
                heads: 4,
                ff_mult: 4,
                lr: 1e-3,
                steps: 2000,
                batch_size: 8,
            },
            tasks: TasksSection {
                alphabet: 16,
                tone_base_hz: 500.0,
                tone_step_hz: 100.0,
                symbol_ms: 100,
                amplitude: 0.5,
                min_symbols: 4,
                max_symbols: 10,
                snr_lo: 2,
                snr_hi: 15,
                train_per_task: 2000,
                eval_per_task: 100,
                codec_train_clips: 200,
                codec_heldout_clips: 20,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse '{}'", value),
    })
}

fn parse_list(value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_num::<usize>(v, line))
        .collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["numerics", "dsp", "codec", "lm", "vocoder", "tasks"].contains(&name) {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("unknown section [{}]", name),
                    });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Config {
                line: line_no,
                msg: format!("expected key = value, got '{}'", line),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let unknown = || Error::Config {
            line,
            msg: format!("unknown key '{}' in section [{}]", key, section),
        };
        match section {
            "numerics" => match key {
                "seed" => self.numerics.seed = parse_num(value, line)?,
                "beta1" => self.numerics.beta1 = parse_num(value, line)?,
                "beta2" => self.numerics.beta2 = parse_num(value, line)?,
                "eps" => self.numerics.eps = parse_num(value, line)?,
                "weight_decay" => self.numerics.weight_decay = parse_num(value, line)?,
                "warmup_steps" => self.numerics.warmup_steps = parse_num(value, line)?,
                _ => return Err(unknown()),
            },
            "dsp" => match key {
                "win" => self.dsp.win = parse_num(value, line)?,
                "hop" => self.dsp.hop = parse_num(value, line)?,
                "mel_bins" => self.dsp.mel_bins = parse_num(value, line)?,
                "lfr" => self.dsp.lfr = parse_num(value, line)?,
                "sample_rate" => self.dsp.sample_rate = parse_num(value, line)?,
                _ => return Err(unknown()),
            },
            "codec" => match key {
                "strides" => self.codec.strides = parse_list(value, line)?,
                "channels" => self.codec.channels = parse_list(value, line)?,
                "latent_dim" => self.codec.latent_dim = parse_num(value, line)?,
                "quantizers" => self.codec.quantizers = parse_num(value, line)?,
                "codebook_size" => self.codec.codebook_size = parse_num(value, line)?,
                "commit_weight" => self.codec.commit_weight = parse_num(value, line)?,
                "spec_windows" => self.codec.spec_windows = parse_list(value, line)?,
                "ema_decay" => self.codec.ema_decay = parse_num(value, line)?,
                "dead_code_steps" => self.codec.dead_code_steps = parse_num(value, line)?,
                "lr" => self.codec.lr = parse_num(value, line)?,
                "steps" => self.codec.steps = parse_num(value, line)?,
                "batch_size" => self.codec.batch_size = parse_num(value, line)?,
                _ => return Err(unknown()),
            },
            "lm" => match key {
                "layers" => self.lm.layers = parse_num(value, line)?,
                "width" => self.lm.width = parse_num(value, line)?,
                "heads" => self.lm.heads = parse_num(value, line)?,
                "ff_mult" => self.lm.ff_mult = parse_num(value, line)?,
                "max_seq" => self.lm.max_seq = parse_num(value, line)?,
                "enc_blocks" => self.lm.enc_blocks = parse_num(value, line)?,
                "enc_norm" => self.lm.enc_norm = value.to_string(),
                "lr" => self.lm.lr = parse_num(value, line)?,
                "steps" => self.lm.steps = parse_num(value, line)?,
                "batch_size" => self.lm.batch_size = parse_num(value, line)?,
                "decode" => self.lm.decode = value.to_string(),
                "topk_k" => self.lm.topk_k = parse_num(value, line)?,
                "topk_seed" => self.lm.topk_seed = parse_num(value, line)?,
                "max_new_tokens" => self.lm.max_new_tokens = parse_num(value, line)?,
                "eval_max_new_tokens" => self.lm.eval_max_new_tokens = parse_num(value, line)?,
                _ => return Err(unknown()),
            },
            "vocoder" => match key {
                "layers" => self.vocoder.layers = parse_num(value, line)?,
                "heads" => self.vocoder.heads = parse_num(value, line)?,
                "ff_mult" => self.vocoder.ff_mult = parse_num(value, line)?,
                "lr" => self.vocoder.lr = parse_num(value, line)?,
                "steps" => self.vocoder.steps = parse_num(value, line)?,
                "batch_size" => self.vocoder.batch_size = parse_num(value, line)?,
                _ => return Err(unknown()),
            },
            "tasks" => match key {
                "alphabet" => self.tasks.alphabet = parse_num(value, line)?,
                "tone_base_hz" => self.tasks.tone_base_hz = parse_num(value, line)?,
                "tone_step_hz" => self.tasks.tone_step_hz = parse_num(value, line)?,
                "symbol_ms" => self.tasks.symbol_ms = parse_num(value, line)?,
                "amplitude" => self.tasks.amplitude = parse_num(value, line)?,
                "min_symbols" => self.tasks.min_symbols = parse_num(value, line)?,
                "max_symbols" => self.tasks.max_symbols = parse_num(value, line)?,
                "snr_lo" => self.tasks.snr_lo = parse_num(value, line)?,
                "snr_hi" => self.tasks.snr_hi = parse_num(value, line)?,
                "train_per_task" => self.tasks.train_per_task = parse_num(value, line)?,
                "eval_per_task" => self.tasks.eval_per_task = parse_num(value, line)?,
                "codec_train_clips" => self.tasks.codec_train_clips = parse_num(value, line)?,
                "codec_heldout_clips" => {
                    self.tasks.codec_heldout_clips = parse_num(value, line)?
                }
                _ => return Err(unknown()),
            },
            "" => {
                return Err(Error::Config {
                    line,
                    msg: format!("key '{}' appears before any [section]", key),
                })
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec_config().validate()?;
        self.lm_config().validate()?;
        self.corpus_spec().validate()?;
        if !["layer", "batch"].contains(&self.lm.enc_norm.as_str()) {
            return Err(Error::InvalidArg(format!(
                "enc_norm must be 'layer' or 'batch', got '{}'",
                self.lm.enc_norm
            )));
        }
        if !["greedy", "topk"].contains(&self.lm.decode.as_str()) {
            return Err(Error::InvalidArg(format!(
                "decode must be 'greedy' or 'topk', got '{}'",
                self.lm.decode
            )));
        }
        Ok(())
    }

    /// Canonical serialization; every key appears, so parsing it back
    /// reproduces the config exactly.
    pub fn resolved_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = write!(
            s,
            "[numerics]\nseed = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\nwarmup_steps = {}\n\n\
             [dsp]\nwin = {}\nhop = {}\nmel_bins = {}\nlfr = {}\nsample_rate = {}\n\n\
             [codec]\nstrides = {}\nchannels = {}\nlatent_dim = {}\nquantizers = {}\ncodebook_size = {}\ncommit_weight = {}\nspec_windows = {}\nema_decay = {}\ndead_code_steps = {}\nlr = {}\nsteps = {}\nbatch_size = {}\n\n\
             [lm]\nlayers = {}\nwidth = {}\nheads = {}\nff_mult = {}\nmax_seq = {}\nenc_blocks = {}\nenc_norm = {}\nlr = {}\nsteps = {}\nbatch_size = {}\ndecode = {}\ntopk_k = {}\ntopk_seed = {}\nmax_new_tokens = {}\neval_max_new_tokens = {}\n\n\
             [vocoder]\nlayers = {}\nheads = {}\nff_mult = {}\nlr = {}\nsteps = {}\nbatch_size = {}\n\n\
             [tasks]\nalphabet = {}\ntone_base_hz = {}\ntone_step_hz = {}\nsymbol_ms = {}\namplitude = {}\nmin_symbols = {}\nmax_symbols = {}\nsnr_lo = {}\nsnr_hi = {}\ntrain_per_task = {}\neval_per_task = {}\ncodec_train_clips = {}\ncodec_heldout_clips = {}\n",
            self.numerics.seed, self.numerics.beta1, self.numerics.beta2, self.numerics.eps,
            self.numerics.weight_decay, self.numerics.warmup_steps,
            self.dsp.win, self.dsp.hop, self.dsp.mel_bins, self.dsp.lfr, self.dsp.sample_rate,
            join(&self.codec.strides), join(&self.codec.channels), self.codec.latent_dim,
            self.codec.quantizers, self.codec.codebook_size, self.codec.commit_weight,
            join(&self.codec.spec_windows), self.codec.ema_decay, self.codec.dead_code_steps,
            self.codec.lr, self.codec.steps, self.codec.batch_size,
            self.lm.layers, self.lm.width, self.lm.heads, self.lm.ff_mult, self.lm.max_seq,
            self.lm.enc_blocks, self.lm.enc_norm, self.lm.lr, self.lm.steps, self.lm.batch_size,
            self.lm.decode, self.lm.topk_k, self.lm.topk_seed, self.lm.max_new_tokens,
            self.lm.eval_max_new_tokens,
            self.vocoder.layers, self.vocoder.heads, self.vocoder.ff_mult, self.vocoder.lr,
            self.vocoder.steps, self.vocoder.batch_size,
            self.tasks.alphabet, self.tasks.tone_base_hz, self.tasks.tone_step_hz,
            self.tasks.symbol_ms, self.tasks.amplitude, self.tasks.min_symbols,
            self.tasks.max_symbols, self.tasks.snr_lo, self.tasks.snr_hi,
            self.tasks.train_per_task, self.tasks.eval_per_task, self.tasks.codec_train_clips,
            self.tasks.codec_heldout_clips,
        );
        s
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved_text().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Seed, with the LGPT_SEED environment override applied.
    pub fn effective_seed(&self) -> u64 {
        match std::env::var("LGPT_SEED") {
            Ok(v) => v.parse().unwrap_or(self.numerics.seed),
            Err(_) => self.numerics.seed,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            strides: self.codec.strides.clone(),
            channels: self.codec.channels.clone(),
            latent_dim: self.codec.latent_dim,
            num_quantizers: self.codec.quantizers,
            codebook_size: self.codec.codebook_size,
            sample_rate: self.dsp.sample_rate,
            commit_weight: self.codec.commit_weight,
            spec_windows: self.codec.spec_windows.clone(),
            ema_decay: self.codec.ema_decay,
            dead_code_steps: self.codec.dead_code_steps,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            layers: self.lm.layers,
            width: self.lm.width,
            heads: self.lm.heads,
            ff_mult: self.lm.ff_mult,
            max_seq: self.lm.max_seq,
            lfr_factor: self.dsp.lfr,
            feat_width: self.dsp.mel_bins * self.dsp.lfr,
            audio_encoder: AudioEncoderConfig {
                blocks: self.lm.enc_blocks,
                norm: if self.lm.enc_norm == "batch" {
                    NormKind::Batch
                } else {
                    NormKind::Layer
                },
            },
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            layers: self.vocoder.layers,
            width: self.codec.latent_dim,
            heads: self.vocoder.heads,
            ff_mult: self.vocoder.ff_mult,
            cond_feat_width: self.dsp.mel_bins * self.dsp.lfr,
        }
    }

    pub fn corpus_spec(&self) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            alphabet: self.tasks.alphabet,
            tone_base_hz: self.tasks.tone_base_hz,
            tone_step_hz: self.tasks.tone_step_hz,
            symbol_ms: self.tasks.symbol_ms,
            amplitude: self.tasks.amplitude,
            min_symbols: self.tasks.min_symbols,
            max_symbols: self.tasks.max_symbols,
            snr_db_lo: self.tasks.snr_lo,
            snr_db_hi: self.tasks.snr_hi,
            sample_rate: self.dsp.sample_rate,
        }
    }

    pub fn adam(&self, peak_lr: f64) -> AdamConfig {
        AdamConfig {
            peak_lr,
            warmup_steps: self.numerics.warmup_steps,
            beta1: self.numerics.beta1,
            beta2: self.numerics.beta2,
            eps: self.numerics.eps,
            weight_decay: self.numerics.weight_decay,
        }
    }

    pub fn decode_config(&self, eval: bool) -> DecodeConfig {
        DecodeConfig {
            strategy: if self.lm.decode == "topk" {
                DecodeStrategy::TopK {
                    k: self.lm.topk_k,
                    seed: self.lm.topk_seed,
                }
            } else {
                DecodeStrategy::Greedy
            },
            max_new_tokens: if eval {
                self.lm.eval_max_new_tokens
            } else {
                self.lm.max_new_tokens
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.resolved_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back.resolved_text(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[codec]\nstrides = 8,5,4,2,2\nnot_a_key = 3\n";
        match Config::parse(text) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("not_a_key"));
            }
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(Config::parse("[nope]\nx = 1\n").is_err());
    }

    #[test]
    fn key_before_section_rejected() {
        assert!(Config::parse("seed = 1\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let text = "[lm]\nlayers = 2\nwidth = 32\n[numerics]\nseed = 7\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.lm.layers, 2);
        assert_eq!(cfg.lm.width, 32);
        assert_eq!(cfg.numerics.seed, 7);
        // untouched defaults survive
        assert_eq!(cfg.codec.quantizers, 32);
    }

    #[test]
    fn hash_changes_with_values() {
        let a = Config::default();
        let mut b = Config::default();
        b.numerics.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }
}
