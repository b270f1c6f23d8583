//! One-step codec vocoder.
//!
//! A small bidirectional transformer regresses the summed multi-group
//! codec embedding from first-group tokens plus conditioning inputs (text
//! for speech synthesis, noisy-speech features for enhancement), in a
//! single forward pass. The frozen codec decoder then reconstructs the
//! waveform. A multi-step classification baseline lives in
//! [`multistep`] for comparison runs.

pub mod multistep;
mod train;

pub use multistep::{multistep_baseline, MultiStepState, MultiStepTrainer};
pub use train::{VocoderBatchItem, VocoderStepReport, VocoderTrainer};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode_waveform, CodecState};
use crate::dsp::{LfrFeatures, Waveform};
use crate::error::{Error, Result};
use crate::lm::vocab::N_TEXT;
use crate::nn::{
    affine_ln, bind_const_params, linear, linear_params, ln_params, sinusoidal_pe,
    transformer_block, transformer_block_params,
};
use crate::numerics::{normal_embedding, GraphBuilder, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct PredictorConfig {
    pub layers: usize,
    /// Working width; equals the codec latent dimension.
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Width of one conditioning feature row (mel bins · LFR factor).
    pub cond_feat_width: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ff_mult: 4,
            cond_feat_width: 240,
        }
    }
}

/// Conditioning inputs fed to the predictor alongside the tokens.
#[derive(Debug, Clone)]
pub enum ConditionBundle {
    None,
    /// Text condition for synthesis, with optional prompt-audio codec
    /// embeddings prepended (zero-shot speaker prompt).
    Tts {
        text: Vec<u32>,
        prompt: Option<Tensor>,
    },
    /// Noisy-speech features for enhancement.
    Se { feats: LfrFeatures },
}

/// Trainable predictor parameters plus a forward-pass counter used by the
/// one-step property checks.
#[derive(Debug)]
pub struct VocoderState {
    pub cfg: PredictorConfig,
    pub params: ParamStore,
    pub forward_calls: AtomicU64,
}

impl Clone for VocoderState {
    fn clone(&self) -> Self {
        VocoderState {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            forward_calls: AtomicU64::new(self.forward_calls.load(Ordering::Relaxed)),
        }
    }
}

impl VocoderState {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.width;
        params.insert("text_emb.w".into(), normal_embedding(&mut rng, N_TEXT, d));
        linear_params(&mut rng, &mut params, "cond_proj", cfg.cond_feat_width, d);
        linear_params(&mut rng, &mut params, "prompt_proj", d, d);
        params.insert("seg.w".into(), normal_embedding(&mut rng, 2, d));
        for l in 0..cfg.layers {
            transformer_block_params(&mut rng, &mut params, &format!("p{}", l), d, cfg.ff_mult * d);
        }
        ln_params(&mut params, "final_ln", d);
        linear_params(&mut rng, &mut params, "out", d, d);
        Ok(VocoderState {
            cfg,
            params,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }
}

/// Predictor graph. Input rows are [condition payload, first-group
/// codeword embeddings] concatenated along time, each position tagged
/// with a learned segment marker; attention is bidirectional and only
/// code-segment rows produce output.
pub(crate) fn build_predictor(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    state: &VocoderState,
    codes: &[u32],
    cond: &ConditionBundle,
    codebook0: NodeId,
) -> Result<NodeId> {
    if codes.is_empty() {
        return Err(Error::InvalidArg("empty code sequence".into()));
    }
    let d = state.cfg.width;
    let seg_cond_2d = b.embed(pn["seg.w"], &[0]);
    let seg_cond = b.reshape(seg_cond_2d, vec![d]);
    let seg_code_2d = b.embed(pn["seg.w"], &[1]);
    let seg_code = b.reshape(seg_code_2d, vec![d]);
    let cond_rows: Option<NodeId> = match cond {
        ConditionBundle::None => None,
        ConditionBundle::Tts { text, prompt } => {
            let ids: Vec<usize> = text.iter().map(|&t| t as usize).collect();
            let text_rows = b.embed(pn["text_emb.w"], &ids);
            let rows = match prompt {
                Some(p) => {
                    if p.shape()[1] != d {
                        return Err(Error::ShapeMismatch {
                            node: "predictor.prompt".into(),
                            detail: format!("prompt width {} vs {}", p.shape()[1], d),
                        });
                    }
                    let pr = b.constant(p.clone());
                    let pr = linear(b, pn, pr, "prompt_proj");
                    if ids.is_empty() {
                        pr
                    } else {
                        b.concat_rows(&[pr, text_rows])
                    }
                }
                None => text_rows,
            };
            Some(rows)
        }
        ConditionBundle::Se { feats } => {
            if feats.width() != state.cfg.cond_feat_width {
                return Err(Error::ShapeMismatch {
                    node: "predictor.cond".into(),
                    detail: format!(
                        "condition width {} vs configured {}",
                        feats.width(),
                        state.cfg.cond_feat_width
                    ),
                });
            }
            let f = b.constant(feats.frames.clone());
            Some(linear(b, pn, f, "cond_proj"))
        }
    };
    let code_ids: Vec<usize> = codes.iter().map(|&c| c as usize).collect();
    let code_rows = b.embed(codebook0, &code_ids);
    let code_rows = b.add_row(code_rows, seg_code);
    let (x, cond_len) = match cond_rows {
        Some(c) => {
            let c = b.add_row(c, seg_cond);
            let len = b.value(c).shape()[0];
            (b.concat_rows(&[c, code_rows]), len)
        }
        None => (code_rows, 0),
    };
    let total = b.value(x).shape()[0];
    let pe = b.constant(sinusoidal_pe(total, d));
    let mut x = b.add(x, pe);
    for l in 0..state.cfg.layers {
        x = transformer_block(b, pn, x, &format!("p{}", l), state.cfg.heads, None);
    }
    let x = affine_ln(b, pn, x, "final_ln");
    let x = linear(b, pn, x, "out");
    Ok(b.slice_rows(x, cond_len, total))
}

/// Estimate the summed codec embedding from first-group tokens in a single
/// parallel pass. The codec supplies the frozen first-group codebook.
pub fn predict_sum_embedding(
    codes: &[u32],
    cond: &ConditionBundle,
    codec: &CodecState,
    state: &VocoderState,
) -> Result<Tensor> {
    if codec.cfg.latent_dim != state.cfg.width {
        return Err(Error::ShapeMismatch {
            node: "predict_sum_embedding".into(),
            detail: format!(
                "codec latent {} vs predictor width {}",
                codec.cfg.latent_dim, state.cfg.width
            ),
        });
    }
    if let Some(&bad) = codes
        .iter()
        .find(|&&c| c as usize >= codec.cfg.codebook_size)
    {
        return Err(Error::InvalidArg(format!(
            "code {} out of range for codebook size {}",
            bad, codec.cfg.codebook_size
        )));
    }
    let mut b = GraphBuilder::new();
    let pn = bind_const_params(&mut b, &state.params);
    let cb0 = b.constant(codec.codebooks[0].weights().clone());
    let est = build_predictor(&mut b, &pn, state, codes, cond, cb0)?;
    b.set_name("estimate", est);
    let g = b.finish()?;
    state.forward_calls.fetch_add(1, Ordering::Relaxed);
    Ok(g.evaluate(&["estimate"])?.remove("estimate").unwrap())
}

/// Predictor regression objective: Σ over elements of |d| + d².
/// Nonnegative, zero only at equality, symmetric in the sign of d.
pub fn l_pre(truth: &Tensor, estimate: &Tensor) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch {
            node: "l_pre".into(),
            detail: format!("{:?} vs {:?}", truth.shape(), estimate.shape()),
        });
    }
    Ok(truth
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(&e, &h)| {
            let d = e - h;
            d.abs() + d * d
        })
        .sum())
}

/// In-graph counterpart of [`l_pre`].
pub(crate) fn build_l_pre(b: &mut GraphBuilder, truth: NodeId, estimate: NodeId) -> NodeId {
    let d = b.sub(truth, estimate);
    let a = b.abs(d);
    let sq = b.square(d);
    let both = b.add(a, sq);
    b.sum(both)
}

/// One-step synthesis: a single predictor pass, then the frozen codec
/// decoder. Output length is codes.len()·640.
pub fn synthesize(
    codes: &[u32],
    cond: &ConditionBundle,
    codec: &CodecState,
    state: &VocoderState,
) -> Result<Waveform> {
    let estimate = predict_sum_embedding(codes, cond, codec, state)?;
    decode_waveform(&estimate, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_latents, rvq_dequantize, rvq_quantize, CodecConfig};

    pub(crate) fn tiny_codec() -> CodecState {
        CodecState::new(
            CodecConfig {
                channels: vec![4, 4, 4, 4, 8],
                latent_dim: 8,
                num_quantizers: 4,
                codebook_size: 16,
                ..CodecConfig::default()
            },
            2,
        )
        .unwrap()
    }

    pub(crate) fn tiny_vocoder() -> VocoderState {
        VocoderState::new(
            PredictorConfig {
                layers: 1,
                width: 8,
                heads: 2,
                ff_mult: 2,
                cond_feat_width: 12,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn estimate_shape_matches_frames() {
        let codec = tiny_codec();
        let voc = tiny_vocoder();
        for t in [1usize, 25] {
            let codes: Vec<u32> = (0..t as u32).map(|i| i % 16).collect();
            let e = predict_sum_embedding(&codes, &ConditionBundle::None, &codec, &voc).unwrap();
            assert_eq!(e.shape(), &[t, 8]);
        }
    }

    #[test]
    fn deterministic_given_parameters() {
        let codec = tiny_codec();
        let voc = tiny_vocoder();
        let codes = vec![3, 1, 4, 1, 5];
        let a = predict_sum_embedding(&codes, &ConditionBundle::None, &codec, &voc).unwrap();
        let b = predict_sum_embedding(&codes, &ConditionBundle::None, &codec, &voc).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn condition_changes_output() {
        let codec = tiny_codec();
        let voc = tiny_vocoder();
        let codes = vec![3, 1, 4, 1, 5];
        let none = predict_sum_embedding(&codes, &ConditionBundle::None, &codec, &voc).unwrap();
        let cond = ConditionBundle::Tts {
            text: vec![10, 20],
            prompt: None,
        };
        let with = predict_sum_embedding(&codes, &cond, &codec, &voc).unwrap();
        assert_eq!(none.shape(), with.shape());
        assert!(none.max_abs_diff(&with) > 1e-9, "condition had no effect");
    }

    #[test]
    fn l_pre_examples() {
        let zeros = Tensor::zeros(&[2, 3]);
        let ones = Tensor::full(&[2, 3], 1.0);
        assert_eq!(l_pre(&zeros, &zeros).unwrap(), 0.0);
        // 6 elements · (|1| + 1²) = 12
        assert_eq!(l_pre(&zeros, &ones).unwrap(), 12.0);
        assert_eq!(l_pre(&ones, &zeros).unwrap(), 12.0);
        assert!(l_pre(&zeros, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn l_pre_gradient_matches_finite_differences() {
        let mut b = GraphBuilder::new();
        let truth = b.constant(Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.9]]));
        let est = b.param(
            "est",
            Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.4, 0.3]]),
        );
        let loss = build_l_pre(&mut b, truth, est);
        b.set_name("loss", loss);
        let g = b.finish().unwrap();
        let grads = g.gradients("loss").unwrap();
        let fd = g.finite_difference("loss", "est", 1e-5).unwrap();
        for (a, f) in grads["est"].data().iter().zip(fd.data()) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            assert!(rel < 1e-4, "{} vs {}", a, f);
        }
    }

    #[test]
    fn oracle_embedding_reproduces_codec_reconstruction() {
        let codec = tiny_codec();
        let w = Waveform::sine(800.0, 0.2, 0.5, 16_000);
        let latents = encode_latents(&w, &codec).unwrap();
        let q = rvq_quantize(&latents, 4, &codec.codebooks).unwrap();
        let truth = rvq_dequantize(&q.codes, 4, &codec.codebooks).unwrap();
        let direct = decode_waveform(&truth, &codec).unwrap();
        let via_oracle = decode_waveform(&truth, &codec).unwrap();
        assert_eq!(direct.samples.len(), via_oracle.samples.len());
        for (a, b) in direct.samples.iter().zip(&via_oracle.samples) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn synthesize_length_law_and_single_pass() {
        let codec = tiny_codec();
        let voc = tiny_vocoder();
        let codes: Vec<u32> = (0..25).map(|i| (i % 16) as u32).collect();
        voc.reset_forward_count();
        let w = synthesize(&codes, &ConditionBundle::None, &codec, &voc).unwrap();
        assert_eq!(w.len(), 25 * 640);
        assert_eq!(voc.forward_count(), 1);
    }
}
