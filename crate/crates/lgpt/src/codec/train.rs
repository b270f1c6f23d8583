//! Codec training: one optimizer step on the conv parameters per call,
//! EMA updates on the codebooks, structured quantizer dropout per batch.
//!
//! Gradients take the straight-through path: the decoder input is
//! `latents + const(sum_embedding − latents)`, so backpropagation treats
//! the quantizer as the identity while the forward value is the quantized
//! embedding. Codebooks never receive gradients; they follow an EMA of the
//! residuals assigned to each codeword, with dead codewords reseeded from
//! batch residuals. Entry 0 of every codebook stays pinned at zero.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::rvq::quantize_detailed;
use crate::codec::{
    build_codec_loss_parts, build_decoder, build_encoder, build_magnitude, pad_to_frames,
    CodecState,
};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, GraphBuilder, Optimizer, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecStepReport {
    pub step: u64,
    pub total: f64,
    pub time_l1: f64,
    pub spec_l1: f64,
    pub commit: f64,
    pub n_active: usize,
}

pub struct CodecTrainer {
    pub state: CodecState,
    pub opt: Optimizer,
    rng: ChaCha8Rng,
    step: u64,
    /// Clean-side magnitude spectrograms, keyed by (clip id, window).
    mag_cache: HashMap<(usize, usize), Tensor>,
}

/// Structured dropout: uniform over {1,2,4,8,16,32} ∩ [1, Q].
pub fn sample_n_active(rng: &mut impl Rng, q: usize) -> usize {
    let choices: Vec<usize> = [1usize, 2, 4, 8, 16, 32]
        .into_iter()
        .filter(|&v| v <= q)
        .collect();
    choices[rng.gen_range(0..choices.len())]
}

impl CodecTrainer {
    pub fn new(state: CodecState, adam: AdamConfig, seed: u64) -> Self {
        CodecTrainer {
            state,
            opt: Optimizer::new(adam),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            mag_cache: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn cached_magnitude(&mut self, clip_id: usize, samples: &[f64], win: usize) -> Tensor {
        if let Some(t) = self.mag_cache.get(&(clip_id, win)) {
            return t.clone();
        }
        // computed through the same graph ops as the recon side, so a
        // perfect reconstruction yields an exactly zero spectral term
        let mut b = GraphBuilder::new();
        let sig = b.constant(Tensor::from_vec(samples.to_vec()));
        let mag = build_magnitude(&mut b, sig, win);
        b.set_name("mag", mag);
        let g = b.finish().expect("magnitude graph");
        let t = g.value_of("mag").expect("magnitude value").clone();
        self.mag_cache.insert((clip_id, win), t.clone());
        t
    }

    /// One training step over a batch of (stable clip id, waveform) pairs.
    pub fn step(&mut self, batch: &[(usize, &Waveform)]) -> Result<CodecStepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArg("empty codec batch".into()));
        }
        let q = self.state.cfg.num_quantizers;
        let n_active = sample_n_active(&mut self.rng, q);
        let cfg = self.state.cfg.clone();

        let mut b = GraphBuilder::new();
        let pn = b.bind_params(&self.state.params);
        let mut totals = Vec::new();
        let mut times = Vec::new();
        let mut specs = Vec::new();
        let mut commits = Vec::new();
        // per-stage (inputs, codes) pooled over the batch for EMA updates
        let mut pooled: Vec<(Vec<Tensor>, Vec<u32>)> = (0..n_active)
            .map(|_| (Vec::new(), Vec::new()))
            .collect();
        for &(clip_id, wave) in batch {
            let samples = pad_to_frames(wave, &cfg);
            let sig = b.constant(Tensor::from_vec(samples.clone()));
            let latents = build_encoder(&mut b, &pn, sig, &cfg);
            let lat_val = b.value(latents).clone();
            let (rvq, stages) = quantize_detailed(&lat_val, n_active, &self.state.codebooks)?;
            for (g, st) in stages.iter().enumerate() {
                pooled[g].0.push(st.inputs.clone());
                pooled[g].1.extend_from_slice(&st.codes);
            }
            // straight-through bridge: forward value is the quantized sum,
            // gradient passes to the latents unchanged
            let mut bridge_vals = rvq.sum_embedding.clone();
            for (bv, lv) in bridge_vals.data_mut().iter_mut().zip(lat_val.data()) {
                *bv -= lv;
            }
            let bridge = b.constant(bridge_vals);
            let dec_in = b.add(latents, bridge);
            let recon = build_decoder(&mut b, &pn, dec_in, &cfg);
            let x = b.constant(Tensor::from_vec(samples.clone()));
            let mut x_mags = Vec::new();
            for &win in &cfg.spec_windows {
                let t = self.cached_magnitude(clip_id, &samples, win);
                x_mags.push(b.constant(t));
            }
            let sum_const = b.constant(rvq.sum_embedding.clone());
            let nodes = build_codec_loss_parts(&mut b, x, &x_mags, recon, latents, sum_const, &cfg);
            totals.push(nodes.total);
            times.push(nodes.time_l1);
            specs.push(nodes.spec_l1);
            commits.push(nodes.commit);
        }
        let mean_of = |b: &mut GraphBuilder, parts: &[crate::numerics::NodeId]| {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = b.add(acc, p);
            }
            b.scale(acc, 1.0 / parts.len() as f64)
        };
        let loss = mean_of(&mut b, &totals);
        let time_m = mean_of(&mut b, &times);
        let spec_m = mean_of(&mut b, &specs);
        let commit_m = mean_of(&mut b, &commits);
        b.set_name("loss", loss);
        b.set_name("time_l1", time_m);
        b.set_name("spec_l1", spec_m);
        b.set_name("commit", commit_m);
        let graph = b.finish()?;
        let vals = graph.evaluate(&["loss", "time_l1", "spec_l1", "commit"])?;
        let grads = graph.gradients("loss")?;
        self.opt.update(&mut self.state.params, &grads)?;
        self.update_codebooks(n_active, &pooled);
        self.step += 1;
        Ok(CodecStepReport {
            step: self.step,
            total: vals["loss"].scalar_value()?,
            time_l1: vals["time_l1"].scalar_value()?,
            spec_l1: vals["spec_l1"].scalar_value()?,
            commit: vals["commit"].scalar_value()?,
            n_active,
        })
    }

    fn update_codebooks(&mut self, n_active: usize, pooled: &[(Vec<Tensor>, Vec<u32>)]) {
        let decay = self.state.cfg.ema_decay;
        let k_size = self.state.cfg.codebook_size;
        let d = self.state.cfg.latent_dim;
        for g in 0..n_active {
            self.state.stage_steps[g] += 1;
            let now = self.state.stage_steps[g];
            let (inputs, codes) = &pooled[g];
            let mut counts = vec![0.0f64; k_size];
            let mut sums = vec![0.0f64; k_size * d];
            let mut flat_inputs: Vec<&[f64]> = Vec::new();
            let mut frame_iter = 0usize;
            for t in inputs {
                let rows = t.shape()[0];
                for r in 0..rows {
                    let row = t.row(r);
                    flat_inputs.push(row);
                    let k = codes[frame_iter] as usize;
                    frame_iter += 1;
                    counts[k] += 1.0;
                    for i in 0..d {
                        sums[k * d + i] += row[i];
                    }
                }
            }
            // EMA over cluster mass and sum; entry 0 stays pinned
            for k in 1..k_size {
                let ec = &mut self.state.ema_count[g][k];
                *ec = decay * *ec + (1.0 - decay) * counts[k];
                let es = &mut self.state.ema_sum[g].data_mut()[k * d..(k + 1) * d];
                for i in 0..d {
                    es[i] = decay * es[i] + (1.0 - decay) * sums[k * d + i];
                }
                if *ec > 1e-3 {
                    let new_cw: Vec<f64> = es.iter().map(|v| v / *ec).collect();
                    self.state.codebooks[g].set_entry(k, &new_cw);
                }
                if counts[k] > 0.0 {
                    self.state.last_used[g][k] = now;
                }
            }
            // reseed codewords unused for too many active steps
            if !flat_inputs.is_empty() {
                for k in 1..k_size {
                    if now.saturating_sub(self.state.last_used[g][k])
                        >= self.state.cfg.dead_code_steps
                    {
                        let pick = self.rng.gen_range(0..flat_inputs.len());
                        let row = flat_inputs[pick].to_vec();
                        self.state.codebooks[g].set_entry(k, &row);
                        self.state.ema_count[g][k] = 1.0;
                        self.state.ema_sum[g].data_mut()[k * d..(k + 1) * d]
                            .copy_from_slice(&row);
                        self.state.last_used[g][k] = now;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            channels: vec![4, 4, 4, 4, 8],
            latent_dim: 8,
            num_quantizers: 4,
            codebook_size: 16,
            spec_windows: vec![128],
            ..CodecConfig::default()
        }
    }

    #[test]
    fn frozen_params_same_seed_same_loss() {
        let clips: Vec<Waveform> = vec![
            Waveform::sine(500.0, 0.2, 0.5, 16_000),
            Waveform::sine(900.0, 0.2, 0.5, 16_000),
        ];
        let batch: Vec<(usize, &Waveform)> = clips.iter().enumerate().collect();
        let run = || {
            let state = CodecState::new(tiny_cfg(), 7).unwrap();
            let mut tr = CodecTrainer::new(state, AdamConfig::default(), 99);
            tr.step(&batch).unwrap().total
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn ema_decay_one_leaves_codebooks_unchanged() {
        let mut cfg = tiny_cfg();
        cfg.ema_decay = 1.0;
        cfg.dead_code_steps = 1_000_000;
        let state = CodecState::new(cfg, 3).unwrap();
        let before: Vec<Tensor> = state.codebooks.iter().map(|c| c.weights().clone()).collect();
        let mut tr = CodecTrainer::new(state, AdamConfig::default(), 5);
        let clip = Waveform::sine(700.0, 0.2, 0.5, 16_000);
        tr.step(&[(0, &clip)]).unwrap();
        for (a, book) in before.iter().zip(&tr.state.codebooks) {
            assert_eq!(a.data(), book.weights().data());
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let state = CodecState::new(tiny_cfg(), 1).unwrap();
        let mut tr = CodecTrainer::new(state, AdamConfig::default(), 1);
        assert!(tr.step(&[]).is_err());
    }

    #[test]
    fn dropout_samples_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = sample_n_active(&mut rng, 32);
            assert!([1, 2, 4, 8, 16, 32].contains(&n));
            let n = sample_n_active(&mut rng, 3);
            assert!([1, 2].contains(&n));
        }
    }

    #[test]
    fn loss_decreases_over_a_few_steps() {
        let state = CodecState::new(tiny_cfg(), 11).unwrap();
        let mut tr = CodecTrainer::new(
            state,
            AdamConfig {
                peak_lr: 3e-3,
                warmup_steps: 0,
                ..AdamConfig::default()
            },
            4,
        );
        let clip = Waveform::sine(600.0, 0.2, 0.5, 16_000);
        let batch = [(0usize, &clip)];
        let first = tr.step(&batch).unwrap().total;
        let mut last = first;
        for _ in 0..30 {
            last = tr.step(&batch).unwrap().total;
        }
        assert!(
            last < first,
            "loss did not decrease: first {} last {}",
            first,
            last
        );
    }
}
