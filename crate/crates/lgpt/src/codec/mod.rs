//! Neural audio codec: strided convolutional encoder, residual vector
//! quantizer with structured dropout, transposed-convolution decoder, and
//! the combined time/spectral/commitment reconstruction objective.
//!
//! Five strided blocks with strides [8,5,4,2,2] give one latent frame per
//! 640 samples (25 Hz token rate at 16 kHz). The recurrent layers of the
//! reference coder are replaced by a pointwise residual mixing block at
//! this scale. The first quantizer group is the language model's audio
//! token stream.

pub mod rvq;
mod train;

pub use rvq::{rvq_dequantize, rvq_quantize, CodeFrameSeq, Codebook, RvqResult};
pub use train::{CodecStepReport, CodecTrainer};

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, GraphBuilder, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct CodecConfig {
    /// Strides of the five conv blocks; product is the samples-per-token.
    pub strides: Vec<usize>,
    /// Output channels per block; the last equals `latent_dim`.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub num_quantizers: usize,
    pub codebook_size: usize,
    pub sample_rate: u32,
    pub commit_weight: f64,
    /// Magnitude-spectrum loss window sizes (hop = win/2).
    pub spec_windows: Vec<usize>,
    pub ema_decay: f64,
    /// Codewords unused for this many active steps get reseeded.
    pub dead_code_steps: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            strides: vec![8, 5, 4, 2, 2],
            channels: vec![16, 24, 32, 48, 64],
            latent_dim: 64,
            num_quantizers: 32,
            codebook_size: 1024,
            sample_rate: 16_000,
            commit_weight: 0.25,
            spec_windows: vec![512, 128],
            ema_decay: 0.99,
            dead_code_steps: 200,
        }
    }
}

impl CodecConfig {
    /// Samples per latent frame (640 by default).
    pub fn frame_samples(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn token_rate(&self) -> u32 {
        self.sample_rate / self.frame_samples() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::InvalidArg(
                "need one channel width per stride".into(),
            ));
        }
        let fs = self.frame_samples();
        if fs == 0 || self.sample_rate as usize % fs != 0 {
            return Err(Error::InvalidArg(format!(
                "stride product {} must divide the sample rate {}",
                fs, self.sample_rate
            )));
        }
        if self.channels.last() != Some(&self.latent_dim) {
            return Err(Error::InvalidArg(
                "last channel width must equal latent_dim".into(),
            ));
        }
        if self.num_quantizers < 1 {
            return Err(Error::InvalidArg("need at least one quantizer".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidArg("codebook size must be >= 2".into()));
        }
        if self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::InvalidArg(
                "codebook size exceeds the u16 code file format".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable codec: conv parameters plus EMA-learned codebooks.
#[derive(Debug, Clone)]
pub struct CodecState {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub codebooks: Vec<Codebook>,
    /// EMA cluster masses and sums per stage, plus per-stage activity
    /// counters for dead-code detection.
    pub(crate) ema_count: Vec<Vec<f64>>,
    pub(crate) ema_sum: Vec<Tensor>,
    pub(crate) last_used: Vec<Vec<u64>>,
    pub(crate) stage_steps: Vec<u64>,
}

impl CodecState {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        // encoder blocks: in channels 1, then the block widths
        let mut c_in = 1usize;
        for (i, (&s, &c_out)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            let k = 2 * s;
            params.insert(
                format!("enc.block{}.w", i),
                xavier_uniform(&mut rng, &[c_out, c_in, k], c_in * k, c_out * k),
            );
            params.insert(format!("enc.block{}.b", i), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let d = cfg.latent_dim;
        for prefix in ["enc.mix", "dec.mix"] {
            params.insert(
                format!("{}.w1", prefix),
                xavier_uniform(&mut rng, &[d, d], d, d),
            );
            params.insert(format!("{}.b1", prefix), Tensor::zeros(&[d]));
            params.insert(
                format!("{}.w2", prefix),
                xavier_uniform(&mut rng, &[d, d], d, d),
            );
            params.insert(format!("{}.b2", prefix), Tensor::zeros(&[d]));
        }
        // decoder blocks mirror the encoder in reverse
        let dec_channels = decoder_channels(&cfg);
        let dec_strides = decoder_strides(&cfg);
        for (i, &s) in dec_strides.iter().enumerate() {
            let k = 2 * s;
            let (ci, co) = (dec_channels[i], dec_channels[i + 1]);
            params.insert(
                format!("dec.block{}.w", i),
                xavier_uniform(&mut rng, &[co, ci, k], ci * k, co * k),
            );
            params.insert(format!("dec.block{}.b", i), Tensor::zeros(&[co]));
        }
        // codebooks: entry 0 pinned to zero, the rest spread around it
        let mut codebooks = Vec::with_capacity(cfg.num_quantizers);
        let mut ema_count = Vec::new();
        let mut ema_sum = Vec::new();
        let mut last_used = Vec::new();
        for _ in 0..cfg.num_quantizers {
            let mut w = vec![0.0; cfg.codebook_size * d];
            for v in w.iter_mut().skip(d) {
                *v = rng.gen_range(-0.1..0.1);
            }
            let weights = Tensor::new(vec![cfg.codebook_size, d], w)?;
            ema_sum.push(weights.clone());
            codebooks.push(Codebook::new(weights)?);
            ema_count.push(vec![1.0; cfg.codebook_size]);
            last_used.push(vec![0; cfg.codebook_size]);
        }
        Ok(CodecState {
            stage_steps: vec![0; cfg.num_quantizers],
            cfg,
            params,
            codebooks,
            ema_count,
            ema_sum,
            last_used,
        })
    }

    /// All persistent tensors (conv params, codebooks, EMA stats).
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        for (g, book) in self.codebooks.iter().enumerate() {
            out.insert(format!("codebook.{}", g), book.weights().clone());
            out.insert(
                format!("codebook_ema_count.{}", g),
                Tensor::from_vec(self.ema_count[g].clone()),
            );
            out.insert(format!("codebook_ema_sum.{}", g), self.ema_sum[g].clone());
        }
        out
    }

    pub fn from_tensors(cfg: CodecConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut state = CodecState::new(cfg.clone(), 0)?;
        for (name, t) in tensors {
            if let Some(g) = name.strip_prefix("codebook.") {
                let g: usize = g
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad codebook name '{}'", name)))?;
                if g >= state.codebooks.len() {
                    return Err(Error::Checkpoint(format!(
                        "codebook index {} out of range",
                        g
                    )));
                }
                state.codebooks[g] = Codebook::new(t.clone())?;
            } else if let Some(g) = name.strip_prefix("codebook_ema_count.") {
                let g: usize = g.parse().unwrap_or(usize::MAX);
                if g < state.ema_count.len() {
                    state.ema_count[g] = t.data().to_vec();
                }
            } else if let Some(g) = name.strip_prefix("codebook_ema_sum.") {
                let g: usize = g.parse().unwrap_or(usize::MAX);
                if g < state.ema_sum.len() {
                    state.ema_sum[g] = t.clone();
                }
            } else if state.params.contains_key(name) {
                state.params.insert(name.clone(), t.clone());
            }
        }
        Ok(state)
    }
}

fn decoder_channels(cfg: &CodecConfig) -> Vec<usize> {
    // [latent, reversed interior widths..., 1]
    let mut ch = vec![cfg.latent_dim];
    for &c in cfg.channels.iter().rev().skip(1) {
        ch.push(c);
    }
    ch.push(1);
    ch
}

fn decoder_strides(cfg: &CodecConfig) -> Vec<usize> {
    cfg.strides.iter().rev().copied().collect()
}

/// Zero-pad a waveform at the end to a whole number of latent frames.
pub fn pad_to_frames(w: &Waveform, cfg: &CodecConfig) -> Vec<f64> {
    let fs = cfg.frame_samples();
    let padded = w.len().div_ceil(fs) * fs;
    let mut samples = w.samples.clone();
    samples.resize(padded, 0.0);
    samples
}

/// Encoder graph: padded signal [n] → latents [n/640 × latent_dim].
pub(crate) fn build_encoder(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    signal: NodeId,
    cfg: &CodecConfig,
) -> NodeId {
    let n = b.value(signal).numel();
    let mut x = b.reshape(signal, vec![n, 1]);
    for (i, &s) in cfg.strides.iter().enumerate() {
        let k = 2 * s;
        let pl = (k - s) / 2;
        let pr = (k - s) - pl;
        x = b.conv1d(x, pn[&format!("enc.block{}.w", i)], s, pl, pr);
        x = b.add_row(x, pn[&format!("enc.block{}.b", i)]);
        x = b.gelu(x);
    }
    pointwise_mix(b, pn, x, "enc.mix")
}

/// Decoder graph: sum embedding [T × latent_dim] → signal [T·640].
pub(crate) fn build_decoder(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    embedding: NodeId,
    cfg: &CodecConfig,
) -> NodeId {
    let mut x = pointwise_mix(b, pn, embedding, "dec.mix");
    let strides = decoder_strides(cfg);
    let last = strides.len() - 1;
    for (i, &s) in strides.iter().enumerate() {
        let k = 2 * s;
        let tl = (k - s) / 2;
        let tr = (k - s) - tl;
        x = b.conv_t1d(x, pn[&format!("dec.block{}.w", i)], s, tl, tr);
        x = b.add_row(x, pn[&format!("dec.block{}.b", i)]);
        if i != last {
            x = b.gelu(x);
        }
    }
    let t_out = b.value(x).shape()[0];
    b.reshape(x, vec![t_out])
}

/// Residual pointwise MLP standing in for the reference coder's recurrence.
fn pointwise_mix(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let h = b.matmul(x, pn[&format!("{}.w1", prefix)]);
    let h = b.add_row(h, pn[&format!("{}.b1", prefix)]);
    let h = b.gelu(h);
    let h = b.matmul(h, pn[&format!("{}.w2", prefix)]);
    let h = b.add_row(h, pn[&format!("{}.b2", prefix)]);
    b.add(x, h)
}

/// Magnitude spectrogram inside the graph: frames → Hann window → DFT by
/// matmul against fixed cosine/sine matrices → sqrt(re²+im²+ε).
pub(crate) fn build_magnitude(b: &mut GraphBuilder, signal: NodeId, win: usize) -> NodeId {
    let hop = win / 2;
    let frames = b.frames(signal, win, hop);
    let window = b.constant(Tensor::from_vec(crate::dsp::window_values(
        crate::dsp::WindowKind::Hann,
        win,
    )));
    let windowed = b.mul_row(frames, window);
    let bins = win / 2 + 1;
    let mut cosm = vec![0.0; win * bins];
    let mut sinm = vec![0.0; win * bins];
    for j in 0..win {
        for k in 0..bins {
            let phi = 2.0 * std::f64::consts::PI * (j * k) as f64 / win as f64;
            cosm[j * bins + k] = phi.cos();
            sinm[j * bins + k] = phi.sin();
        }
    }
    let cosn = b.constant(Tensor::new(vec![win, bins], cosm).unwrap());
    let sinn = b.constant(Tensor::new(vec![win, bins], sinm).unwrap());
    let re = b.matmul(windowed, cosn);
    let im = b.matmul(windowed, sinn);
    let re2 = b.square(re);
    let im2 = b.square(im);
    let power = b.add(re2, im2);
    let shifted = b.add_scalar(power, 1e-12);
    b.sqrt(shifted)
}

/// Loss pieces built onto an existing graph. `x`/`recon` are rank-1 signal
/// nodes of equal length; `latents`/`sum_embedding` the RVQ pair.
pub(crate) struct LossNodes {
    pub total: NodeId,
    pub time_l1: NodeId,
    pub spec_l1: NodeId,
    pub commit: NodeId,
}

/// `x_mags` holds precomputed clean-side magnitude nodes, one per entry of
/// `cfg.spec_windows` (the trainer caches these per clip).
pub(crate) fn build_codec_loss_parts(
    b: &mut GraphBuilder,
    x: NodeId,
    x_mags: &[NodeId],
    recon: NodeId,
    latents: NodeId,
    sum_embedding: NodeId,
    cfg: &CodecConfig,
) -> LossNodes {
    let diff = b.sub(x, recon);
    let adiff = b.abs(diff);
    let time_l1 = b.mean(adiff);
    let mut spec_terms = Vec::new();
    for (&win, &mx) in cfg.spec_windows.iter().zip(x_mags) {
        let mr = build_magnitude(b, recon, win);
        let d = b.sub(mx, mr);
        let ad = b.abs(d);
        spec_terms.push(b.mean(ad));
    }
    let mut spec_l1 = spec_terms[0];
    for &term in &spec_terms[1..] {
        spec_l1 = b.add(spec_l1, term);
    }
    spec_l1 = b.scale(spec_l1, 1.0 / spec_terms.len() as f64);
    let cd = b.sub(latents, sum_embedding);
    let csq = b.square(cd);
    let cmean = b.mean(csq);
    let commit = b.scale(cmean, cfg.commit_weight);
    let ts = b.add(time_l1, spec_l1);
    let total = b.add(ts, commit);
    LossNodes {
        total,
        time_l1,
        spec_l1,
        commit,
    }
}

/// Reported components of the reconstruction objective.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecLoss {
    pub total: f64,
    pub time_l1: f64,
    pub spec_l1: f64,
    pub commit: f64,
}

fn bind_const_params(b: &mut GraphBuilder, params: &ParamStore) -> BTreeMap<String, NodeId> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), b.constant(v.clone())))
        .collect()
}

/// Latent frames for a waveform: T = ceil(samples/640).
pub fn encode_latents(w: &Waveform, state: &CodecState) -> Result<Tensor> {
    if w.is_empty() {
        return Err(Error::InvalidArg("cannot encode empty waveform".into()));
    }
    let samples = pad_to_frames(w, &state.cfg);
    let mut b = GraphBuilder::new();
    let pn = bind_const_params(&mut b, &state.params);
    let sig = b.constant(Tensor::from_vec(samples));
    let latents = build_encoder(&mut b, &pn, sig, &state.cfg);
    b.set_name("latents", latents);
    let g = b.finish()?;
    Ok(g.evaluate(&["latents"])?.remove("latents").unwrap())
}

/// Full tokenizer path: encode then quantize all groups.
pub fn encode_codes(w: &Waveform, state: &CodecState) -> Result<CodeFrameSeq> {
    let latents = encode_latents(w, state)?;
    Ok(rvq_quantize(&latents, state.cfg.num_quantizers, &state.codebooks)?.codes)
}

/// Decode a summed codec embedding back to audio; output length is exactly
/// T·640 with samples clamped to [−1, 1] at this boundary.
pub fn decode_waveform(sum_embedding: &Tensor, state: &CodecState) -> Result<Waveform> {
    let (_, d) = sum_embedding.dims2()?;
    if d != state.cfg.latent_dim {
        return Err(Error::ShapeMismatch {
            node: "decode_waveform".into(),
            detail: format!(
                "embedding width {} vs latent_dim {}",
                d, state.cfg.latent_dim
            ),
        });
    }
    let mut b = GraphBuilder::new();
    let pn = bind_const_params(&mut b, &state.params);
    let emb = b.constant(sum_embedding.clone());
    let out = build_decoder(&mut b, &pn, emb, &state.cfg);
    b.set_name("signal", out);
    let g = b.finish()?;
    let signal = g.evaluate(&["signal"])?.remove("signal").unwrap();
    let samples = signal.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Waveform::new(samples, state.cfg.sample_rate)
}

/// Reconstruction objective: time-domain L1 + magnitude-spectrum L1 at the
/// configured windows + commitment λ·mean‖latents − sum_embedding‖².
pub fn codec_loss(
    x: &Waveform,
    recon: &Waveform,
    latents: &Tensor,
    sum_embedding: &Tensor,
    cfg: &CodecConfig,
) -> Result<CodecLoss> {
    if x.len() != recon.len() {
        return Err(Error::ShapeMismatch {
            node: "codec_loss".into(),
            detail: format!("signal lengths {} vs {}", x.len(), recon.len()),
        });
    }
    if latents.shape() != sum_embedding.shape() {
        return Err(Error::ShapeMismatch {
            node: "codec_loss".into(),
            detail: format!(
                "latents {:?} vs sum embedding {:?}",
                latents.shape(),
                sum_embedding.shape()
            ),
        });
    }
    let mut b = GraphBuilder::new();
    let xn = b.constant(Tensor::from_vec(x.samples.clone()));
    let rn = b.constant(Tensor::from_vec(recon.samples.clone()));
    let ln = b.constant(latents.clone());
    let sn = b.constant(sum_embedding.clone());
    let x_mags: Vec<NodeId> = cfg
        .spec_windows
        .iter()
        .map(|&win| build_magnitude(&mut b, xn, win))
        .collect();
    let nodes = build_codec_loss_parts(&mut b, xn, &x_mags, rn, ln, sn, cfg);
    b.set_name("total", nodes.total);
    b.set_name("time_l1", nodes.time_l1);
    b.set_name("spec_l1", nodes.spec_l1);
    b.set_name("commit", nodes.commit);
    let g = b.finish()?;
    let vals = g.evaluate(&["total", "time_l1", "spec_l1", "commit"])?;
    Ok(CodecLoss {
        total: vals["total"].scalar_value()?,
        time_l1: vals["time_l1"].scalar_value()?,
        spec_l1: vals["spec_l1"].scalar_value()?,
        commit: vals["commit"].scalar_value()?,
    })
}

pub const CODES_MAGIC: &[u8; 8] = b"LGPTCODE";

/// Binary codes file: magic, u32 frame count, u16 group count, u16 indices
/// row-major.
pub fn write_codes_binary(path: &Path, codes: &CodeFrameSeq) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CODES_MAGIC)?;
    w.write_all(&(codes.frames() as u32).to_le_bytes())?;
    w.write_all(&(codes.groups() as u16).to_le_bytes())?;
    for row in codes.rows() {
        for &c in row {
            w.write_all(&(c as u16).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes_binary(path: &Path, codebook_size: usize) -> Result<CodeFrameSeq> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CODES_MAGIC {
        return Err(Error::Checkpoint(format!("bad codes magic in {:?}", path)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let frames = u32::from_le_bytes(b4) as usize;
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let groups = u16::from_le_bytes(b2) as usize;
    let mut data = Vec::with_capacity(frames * groups);
    for _ in 0..frames * groups {
        r.read_exact(&mut b2)?;
        data.push(u16::from_le_bytes(b2) as u32);
    }
    CodeFrameSeq::new(data, frames, groups, codebook_size)
}

/// Text dump: `# Q=<q> K=<k> T=<t>` header then one line per frame of
/// space-separated indices.
pub fn write_codes_text(path: &Path, codes: &CodeFrameSeq) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "# Q={} K={} T={}",
        codes.groups(),
        codes.codebook_size(),
        codes.frames()
    )?;
    for row in codes.rows() {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes_text(path: &Path) -> Result<CodeFrameSeq> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("empty codes file {:?}", path)))??;
    let mut q = None;
    let mut k = None;
    let mut t = None;
    for tok in header.trim_start_matches('#').split_whitespace() {
        if let Some(v) = tok.strip_prefix("Q=") {
            q = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("K=") {
            k = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("T=") {
            t = v.parse::<usize>().ok();
        }
    }
    let (q, k, t) = match (q, k, t) {
        (Some(q), Some(k), Some(t)) => (q, k, t),
        _ => {
            return Err(Error::Checkpoint(format!(
                "malformed codes header '{}'",
                header
            )))
        }
    };
    let mut data = Vec::with_capacity(t * q);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<u32>()
                    .map_err(|_| Error::Checkpoint(format!("bad code '{}' in {:?}", tok, path)))?,
            );
        }
    }
    CodeFrameSeq::new(data, t, q, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            channels: vec![4, 4, 4, 4, 8],
            latent_dim: 8,
            num_quantizers: 4,
            codebook_size: 16,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn config_stride_product_must_divide_rate() {
        let mut cfg = CodecConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.frame_samples(), 640);
        assert_eq!(cfg.token_rate(), 25);
        cfg.strides = vec![7, 5, 4, 2, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_second_gives_25_frames() {
        let state = CodecState::new(tiny_cfg(), 1).unwrap();
        let w = Waveform::sine(500.0, 1.0, 0.5, 16_000);
        let latents = encode_latents(&w, &state).unwrap();
        assert_eq!(latents.shape(), &[25, 8]);
    }

    #[test]
    fn padding_rule_rounds_up() {
        let state = CodecState::new(tiny_cfg(), 1).unwrap();
        let w = Waveform::new(vec![0.1; 16_001], 16_000).unwrap();
        let latents = encode_latents(&w, &state).unwrap();
        assert_eq!(latents.shape()[0], 26);
    }

    #[test]
    fn zero_waveform_encodes_finite() {
        let state = CodecState::new(tiny_cfg(), 1).unwrap();
        let w = Waveform::new(vec![0.0; 1280], 16_000).unwrap();
        let latents = encode_latents(&w, &state).unwrap();
        assert!(latents.all_finite());
    }

    #[test]
    fn empty_waveform_rejected() {
        let state = CodecState::new(tiny_cfg(), 1).unwrap();
        let w = Waveform::new(vec![], 16_000).unwrap();
        assert!(encode_latents(&w, &state).is_err());
    }

    #[test]
    fn decode_length_law() {
        let state = CodecState::new(tiny_cfg(), 1).unwrap();
        let emb = Tensor::zeros(&[25, 8]);
        let w = decode_waveform(&emb, &state).unwrap();
        assert_eq!(w.len(), 16_000);
    }

    #[test]
    fn roundtrip_is_finite() {
        let state = CodecState::new(tiny_cfg(), 2).unwrap();
        let w = Waveform::sine(740.0, 0.2, 0.5, 16_000);
        let latents = encode_latents(&w, &state).unwrap();
        let q = rvq_quantize(&latents, 4, &state.codebooks).unwrap();
        let deq = rvq_dequantize(&q.codes, 4, &state.codebooks).unwrap();
        let recon = decode_waveform(&deq, &state).unwrap();
        assert_eq!(recon.len(), 3_200);
        assert!(recon.samples.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn perfect_reconstruction_loss_is_zero() {
        let cfg = tiny_cfg();
        let x = Waveform::sine(600.0, 0.1, 0.5, 16_000);
        let latents = Tensor::full(&[3, 8], 0.25);
        let loss = codec_loss(&x, &x, &latents, &latents, &cfg).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.time_l1, 0.0);
        assert_eq!(loss.spec_l1, 0.0);
        assert_eq!(loss.commit, 0.0);
    }

    #[test]
    fn time_term_of_sine_vs_silence_is_two_over_pi() {
        let cfg = tiny_cfg();
        // 443 Hz is coprime with 16000, so one second of samples visits all
        // 16000 grid phases and the discrete mean |sin| matches the integral
        let x = Waveform::sine(443.0, 1.0, 1.0, 16_000);
        let zero = Waveform::new(vec![0.0; x.len()], 16_000).unwrap();
        let l = Tensor::zeros(&[25, 8]);
        let loss = codec_loss(&x, &zero, &l, &l, &cfg).unwrap();
        let expect = 2.0 / std::f64::consts::PI;
        assert!(
            (loss.time_l1 - expect).abs() < 1e-3,
            "time term {} vs {}",
            loss.time_l1,
            expect
        );
    }

    #[test]
    fn commit_term_scales_linearly_with_lambda() {
        let mut cfg = tiny_cfg();
        let x = Waveform::sine(600.0, 0.05, 0.5, 16_000);
        let latents = Tensor::full(&[1, 8], 0.3);
        let sum = Tensor::zeros(&[1, 8]);
        let base = codec_loss(&x, &x, &latents, &sum, &cfg).unwrap();
        cfg.commit_weight *= 2.0;
        let doubled = codec_loss(&x, &x, &latents, &sum, &cfg).unwrap();
        assert!((doubled.commit - 2.0 * base.commit).abs() < 1e-15);
    }

    #[test]
    fn codes_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let codes = CodeFrameSeq::new(vec![1, 2, 3, 4, 5, 6], 3, 2, 16).unwrap();
        let bin = dir.path().join("c.codes");
        write_codes_binary(&bin, &codes).unwrap();
        assert_eq!(read_codes_binary(&bin, 16).unwrap(), codes);
        let txt = dir.path().join("c.txt");
        write_codes_text(&txt, &codes).unwrap();
        assert_eq!(read_codes_text(&txt).unwrap(), codes);
        let header = std::fs::read_to_string(&txt).unwrap();
        assert!(header.starts_with("# Q=2 K=16 T=3"));
    }
}
