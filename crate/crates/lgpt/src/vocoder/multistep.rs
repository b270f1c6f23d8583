//! Multi-step synthesis baseline: a shared non-causal network predicts
//! the codec tokens of group g as a K-way classification conditioned on
//! the dequantized sum of groups < g, one sequential pass per remaining
//! group (Q−1 passes total). Matched in backbone shape to the one-step
//! predictor for the comparison runs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{rvq_dequantize, CodeFrameSeq, CodecState};
use crate::error::{Error, Result};
use crate::nn::{
    affine_ln, bind_const_params, linear, linear_params, ln_params, sinusoidal_pe,
    transformer_block, transformer_block_params,
};
use crate::numerics::{
    normal_embedding, AdamConfig, GraphBuilder, NodeId, Optimizer, ParamStore,
};
use crate::vocoder::PredictorConfig;

#[derive(Debug)]
pub struct MultiStepState {
    pub cfg: PredictorConfig,
    pub num_groups: usize,
    pub codebook_size: usize,
    pub params: ParamStore,
    pub forward_calls: AtomicU64,
}

impl Clone for MultiStepState {
    fn clone(&self) -> Self {
        MultiStepState {
            cfg: self.cfg.clone(),
            num_groups: self.num_groups,
            codebook_size: self.codebook_size,
            params: self.params.clone(),
            forward_calls: AtomicU64::new(self.forward_calls.load(Ordering::Relaxed)),
        }
    }
}

impl MultiStepState {
    pub fn new(
        cfg: PredictorConfig,
        num_groups: usize,
        codebook_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(Error::InvalidArg("width not divisible by heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.width;
        params.insert(
            "stage_emb.w".into(),
            normal_embedding(&mut rng, num_groups.max(2), d),
        );
        linear_params(&mut rng, &mut params, "in_proj", d, d);
        for l in 0..cfg.layers {
            transformer_block_params(&mut rng, &mut params, &format!("m{}", l), d, cfg.ff_mult * d);
        }
        ln_params(&mut params, "final_ln", d);
        linear_params(&mut rng, &mut params, "head", d, codebook_size);
        Ok(MultiStepState {
            cfg,
            num_groups,
            codebook_size,
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

/// Logits [T×K] for group `stage` given the summed embedding of the
/// preceding groups.
pub(crate) fn build_stage_logits(
    b: &mut GraphBuilder,
    pn: &std::collections::BTreeMap<String, NodeId>,
    state: &MultiStepState,
    partial_sum: NodeId,
    stage: usize,
) -> NodeId {
    let d = state.cfg.width;
    let t_len = b.value(partial_sum).shape()[0];
    let x = linear(b, pn, partial_sum, "in_proj");
    let marker_2d = b.embed(pn["stage_emb.w"], &[stage]);
    let marker = b.reshape(marker_2d, vec![d]);
    let x = b.add_row(x, marker);
    let pe = b.constant(sinusoidal_pe(t_len, d));
    let mut x = b.add(x, pe);
    for l in 0..state.cfg.layers {
        x = transformer_block(b, pn, x, &format!("m{}", l), state.cfg.heads, None);
    }
    let x = affine_ln(b, pn, x, "final_ln");
    linear(b, pn, x, "head")
}

/// Complete the code matrix from first-group tokens: Q−1 sequential
/// network passes, each choosing group g by per-frame argmax.
pub fn multistep_baseline(
    first_group: &[u32],
    state: &MultiStepState,
    codec: &CodecState,
) -> Result<CodeFrameSeq> {
    if first_group.is_empty() {
        return Err(Error::InvalidArg("empty code sequence".into()));
    }
    let q = state.num_groups;
    let mut codes = CodeFrameSeq::new(
        first_group.to_vec(),
        first_group.len(),
        1,
        codec.cfg.codebook_size,
    )?;
    for g in 1..q {
        let partial = rvq_dequantize(&codes, g, &codec.codebooks)?;
        let mut b = GraphBuilder::new();
        let pn = bind_const_params(&mut b, &state.params);
        let ps = b.constant(partial);
        let logits = build_stage_logits(&mut b, &pn, state, ps, g);
        b.set_name("logits", logits);
        let graph = b.finish()?;
        state.forward_calls.fetch_add(1, Ordering::Relaxed);
        let logits = graph.evaluate(&["logits"])?.remove("logits").unwrap();
        let mut group = Vec::with_capacity(first_group.len());
        for t in 0..logits.shape()[0] {
            let row = logits.row(t);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            group.push(best as u32);
        }
        codes = codes.with_group_appended(&group)?;
    }
    Ok(codes)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MultiStepReport {
    pub step: u64,
    pub ce: f64,
}

/// Teacher-forced trainer: each step picks a random group g ≥ 1 per item
/// and minimizes cross-entropy of the true group-g codes given the true
/// groups < g.
pub struct MultiStepTrainer {
    pub state: MultiStepState,
    pub opt: Optimizer,
    rng: ChaCha8Rng,
    step: u64,
}

impl MultiStepTrainer {
    pub fn new(state: MultiStepState, adam: AdamConfig, seed: u64) -> Self {
        MultiStepTrainer {
            state,
            opt: Optimizer::new(adam),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    pub fn step(&mut self, batch: &[&CodeFrameSeq], codec: &CodecState) -> Result<MultiStepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArg("empty multi-step batch".into()));
        }
        let q = self.state.num_groups;
        if q < 2 {
            return Err(Error::InvalidArg(
                "multi-step training needs at least two groups".into(),
            ));
        }
        let mut b = GraphBuilder::new();
        let pn = b.bind_params(&self.state.params);
        let mut losses = Vec::new();
        for codes in batch {
            if codes.groups() < q {
                return Err(Error::InvalidArg(format!(
                    "need {} groups of ground truth, got {}",
                    q,
                    codes.groups()
                )));
            }
            let g = self.rng.gen_range(1..q);
            let partial = rvq_dequantize(codes, g, &codec.codebooks)?;
            let ps = b.constant(partial);
            let logits = build_stage_logits(&mut b, &pn, &self.state, ps, g);
            let logp = b.log_softmax(logits);
            let targets: Vec<usize> = codes.group(g).iter().map(|&c| c as usize).collect();
            let picked = b.pick_per_row(logp, &targets);
            let s = b.sum(picked);
            losses.push(b.scale(s, -1.0 / targets.len() as f64));
        }
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = b.add(acc, l);
        }
        let loss = b.scale(acc, 1.0 / losses.len() as f64);
        b.set_name("loss", loss);
        let graph = b.finish()?;
        let ce = graph.value_of("loss")?.scalar_value()?;
        let grads = graph.gradients("loss")?;
        self.opt.update(&mut self.state.params, &grads)?;
        self.step += 1;
        Ok(MultiStepReport {
            step: self.step,
            ce,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_latents, rvq_quantize, CodecConfig, CodecState};
    use crate::dsp::Waveform;

    fn tiny_codec() -> CodecState {
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

    fn tiny_state(codec: &CodecState) -> MultiStepState {
        MultiStepState::new(
            PredictorConfig {
                layers: 1,
                width: 8,
                heads: 2,
                ff_mult: 2,
                cond_feat_width: 12,
            },
            codec.cfg.num_quantizers,
            codec.cfg.codebook_size,
            7,
        )
        .unwrap()
    }

    #[test]
    fn single_group_config_is_identity() {
        let codec = tiny_codec();
        let state = MultiStepState::new(
            PredictorConfig {
                layers: 1,
                width: 8,
                heads: 2,
                ff_mult: 2,
                cond_feat_width: 12,
            },
            1,
            16,
            7,
        )
        .unwrap();
        state.reset_forward_count();
        let codes = multistep_baseline(&[1, 2, 3], &state, &codec).unwrap();
        assert_eq!(codes.groups(), 1);
        assert_eq!(codes.first_group(), vec![1, 2, 3]);
        assert_eq!(state.forward_count(), 0);
    }

    #[test]
    fn q_minus_one_network_passes() {
        let codec = tiny_codec();
        let state = tiny_state(&codec);
        state.reset_forward_count();
        let codes = multistep_baseline(&[0, 5, 9, 11], &state, &codec).unwrap();
        assert_eq!(codes.groups(), 4);
        assert_eq!(codes.frames(), 4);
        assert_eq!(state.forward_count(), 3);
    }

    #[test]
    fn training_reduces_ce_on_fixed_batch() {
        let codec = tiny_codec();
        let state = tiny_state(&codec);
        let w = Waveform::sine(900.0, 0.3, 0.5, 16_000);
        let latents = encode_latents(&w, &codec).unwrap();
        let codes = rvq_quantize(&latents, 4, &codec.codebooks).unwrap().codes;
        let mut tr = MultiStepTrainer::new(
            state,
            AdamConfig {
                peak_lr: 3e-3,
                warmup_steps: 0,
                ..AdamConfig::default()
            },
            9,
        );
        let first = tr.step(&[&codes], &codec).unwrap().ce;
        let mut last = first;
        for _ in 0..40 {
            last = tr.step(&[&codes], &codec).unwrap().ce;
        }
        assert!(last < first, "ce {} vs {}", last, first);
    }
}
