//! One-step predictor training. Ground truth is the dequantized sum over
//! all quantizer groups of the reference audio; the codec (including the
//! first-group codebook the predictor reads) stays frozen.

use crate::codec::CodecState;
use crate::error::{Error, Result};
use crate::nn::bind_const_params;
use crate::numerics::{AdamConfig, GraphBuilder, Optimizer, Tensor};
use crate::vocoder::{build_l_pre, build_predictor, ConditionBundle, VocoderState};

/// One training item: first-group tokens, the task-dependent condition,
/// and the ground-truth summed embedding.
#[derive(Debug, Clone)]
pub struct VocoderBatchItem {
    pub codes: Vec<u32>,
    pub cond: ConditionBundle,
    pub truth: Tensor,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VocoderStepReport {
    pub step: u64,
    pub l_pre: f64,
}

pub struct VocoderTrainer {
    pub state: VocoderState,
    pub opt: Optimizer,
    step: u64,
}

impl VocoderTrainer {
    pub fn new(state: VocoderState, adam: AdamConfig) -> Self {
        VocoderTrainer {
            state,
            opt: Optimizer::new(adam),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Mean L_pre over the batch; one optimizer step on predictor
    /// parameters only.
    pub fn step(&mut self, batch: &[VocoderBatchItem], codec: &CodecState) -> Result<VocoderStepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArg("empty vocoder batch".into()));
        }
        let mut b = GraphBuilder::new();
        let pn = b.bind_params(&self.state.params);
        let cb0 = b.constant(codec.codebooks[0].weights().clone());
        let mut losses = Vec::with_capacity(batch.len());
        for item in batch {
            let est = build_predictor(&mut b, &pn, &self.state, &item.codes, &item.cond, cb0)?;
            let truth = b.constant(item.truth.clone());
            losses.push(build_l_pre(&mut b, truth, est));
        }
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = b.add(acc, l);
        }
        let loss = b.scale(acc, 1.0 / losses.len() as f64);
        b.set_name("loss", loss);
        let g = b.finish()?;
        let val = g.value_of("loss")?.scalar_value()?;
        let grads = g.gradients("loss")?;
        self.opt.update(&mut self.state.params, &grads)?;
        self.step += 1;
        Ok(VocoderStepReport {
            step: self.step,
            l_pre: val,
        })
    }

    /// L_pre on a batch without updating parameters.
    pub fn eval(&self, batch: &[VocoderBatchItem], codec: &CodecState) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArg("empty vocoder batch".into()));
        }
        let mut b = GraphBuilder::new();
        let pn = bind_const_params(&mut b, &self.state.params);
        let cb0 = b.constant(codec.codebooks[0].weights().clone());
        let mut losses = Vec::with_capacity(batch.len());
        for item in batch {
            let est = build_predictor(&mut b, &pn, &self.state, &item.codes, &item.cond, cb0)?;
            let truth = b.constant(item.truth.clone());
            losses.push(build_l_pre(&mut b, truth, est));
        }
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = b.add(acc, l);
        }
        let loss = b.scale(acc, 1.0 / losses.len() as f64);
        b.set_name("loss", loss);
        let g = b.finish()?;
        g.value_of("loss")?.scalar_value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_latents, rvq_dequantize, rvq_quantize};
    use crate::dsp::Waveform;
    use crate::vocoder::tests::{tiny_codec, tiny_vocoder};

    fn item(codec: &CodecState, freq: f64) -> VocoderBatchItem {
        let w = Waveform::sine(freq, 0.2, 0.5, 16_000);
        let latents = encode_latents(&w, codec).unwrap();
        let q = rvq_quantize(&latents, 4, &codec.codebooks).unwrap();
        let truth = rvq_dequantize(&q.codes, 4, &codec.codebooks).unwrap();
        VocoderBatchItem {
            codes: q.codes.first_group(),
            cond: ConditionBundle::None,
            truth,
        }
    }

    #[test]
    fn loss_deterministic_per_batch() {
        let codec = tiny_codec();
        let batch = vec![item(&codec, 700.0), item(&codec, 1_100.0)];
        let run = || {
            let mut tr = VocoderTrainer::new(tiny_vocoder(), AdamConfig::default());
            tr.step(&batch, &codec).unwrap().l_pre
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn training_reduces_l_pre() {
        let codec = tiny_codec();
        let batch = vec![item(&codec, 700.0), item(&codec, 1_300.0)];
        let mut tr = VocoderTrainer::new(
            tiny_vocoder(),
            AdamConfig {
                peak_lr: 3e-3,
                warmup_steps: 0,
                ..AdamConfig::default()
            },
        );
        let first = tr.step(&batch, &codec).unwrap().l_pre;
        let mut last = first;
        for _ in 0..40 {
            last = tr.step(&batch, &codec).unwrap().l_pre;
        }
        assert!(last < 0.8 * first, "l_pre {} vs {}", last, first);
    }

    #[test]
    fn empty_batch_rejected() {
        let codec = tiny_codec();
        let mut tr = VocoderTrainer::new(tiny_vocoder(), AdamConfig::default());
        assert!(tr.step(&[], &codec).is_err());
    }
}
