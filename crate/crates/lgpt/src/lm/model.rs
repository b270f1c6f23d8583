//! Unified audio-and-text decoder-only model.
//!
//! Audio inputs pass through a small conformer-style encoder (feed-forward,
//! self-attention, depthwise-conv sub-block, second feed-forward — layer
//! normalization throughout, with a batch-norm variant behind a config
//! switch). Text, task, and target positions carry rows of the shared
//! embedding matrix, which is also the output projection, so the output
//! layer is (N+M+L)×D. Causal self-attention keeps logits at position j
//! independent of positions > j.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::sequence::{SeqInput, UnifiedSequence};
use crate::lm::vocab::UnifiedVocab;
use crate::nn::{
    affine_ln, attention, attention_params, causal_mask, ffn, linear, linear_params, ln_params,
    transformer_block, transformer_block_params, LN_EPS,
};
pub(crate) use crate::nn::bind_const_params;
pub use crate::nn::sinusoidal_pe;
use crate::numerics::{normal_embedding, xavier_uniform, GraphBuilder, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
}

#[derive(Debug, Clone)]
pub struct AudioEncoderConfig {
    pub blocks: usize,
    pub norm: NormKind,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig {
            blocks: 2,
            norm: NormKind::Layer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_seq: usize,
    pub lfr_factor: usize,
    /// Width of one raw audio feature row (mel bins · LFR factor).
    pub feat_width: usize,
    pub audio_encoder: AudioEncoderConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            layers: 4,
            width: 64,
            heads: 4,
            ff_mult: 4,
            max_seq: 2048,
            lfr_factor: 6,
            feat_width: 40 * 6,
            audio_encoder: AudioEncoderConfig::default(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.audio_encoder.blocks == 0 {
            return Err(Error::InvalidArg("need at least one block".into()));
        }
        Ok(())
    }
}

/// Trainable LM: parameters plus batch-norm running statistics for the
/// batch-norm encoder variant.
#[derive(Debug, Clone)]
pub struct LmState {
    pub cfg: LmConfig,
    pub vocab: UnifiedVocab,
    pub params: ParamStore,
    /// (mean, var) per batch-norm site, updated during training.
    pub bn_running: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl LmState {
    pub fn new(cfg: LmConfig, vocab: UnifiedVocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.width;
        let ff = cfg.ff_mult * d;
        params.insert(
            "emb.w".into(),
            normal_embedding(&mut rng, vocab.total(), d),
        );
        params.insert(
            "pos.w".into(),
            normal_embedding(&mut rng, cfg.max_seq, d),
        );
        // audio encoder
        linear_params(&mut rng, &mut params, "aenc.in", cfg.feat_width, d);
        let mut bn_running = BTreeMap::new();
        for i in 0..cfg.audio_encoder.blocks {
            let p = format!("aenc.{}", i);
            ln_params(&mut params, &format!("{}.ln1", p), d);
            linear_params(&mut rng, &mut params, &format!("{}.ff1.in", p), d, ff);
            linear_params(&mut rng, &mut params, &format!("{}.ff1.out", p), ff, d);
            ln_params(&mut params, &format!("{}.ln2", p), d);
            attention_params(&mut rng, &mut params, &format!("{}.attn", p), d);
            ln_params(&mut params, &format!("{}.ln3", p), d);
            linear_params(&mut rng, &mut params, &format!("{}.conv.pw1", p), d, d);
            params.insert(
                format!("{}.conv.dw.w", p),
                xavier_uniform(&mut rng, &[d, 3], 3, 3),
            );
            ln_params(&mut params, &format!("{}.conv.norm", p), d);
            linear_params(&mut rng, &mut params, &format!("{}.conv.pw2", p), d, d);
            ln_params(&mut params, &format!("{}.ln4", p), d);
            linear_params(&mut rng, &mut params, &format!("{}.ff2.in", p), d, ff);
            linear_params(&mut rng, &mut params, &format!("{}.ff2.out", p), ff, d);
            if cfg.audio_encoder.norm == NormKind::Batch {
                bn_running.insert(format!("{}.conv.norm", p), (vec![0.0; d], vec![1.0; d]));
            }
        }
        ln_params(&mut params, "aenc.final_ln", d);
        // backbone
        for l in 0..cfg.layers {
            transformer_block_params(&mut rng, &mut params, &format!("blk{}", l), d, ff);
        }
        ln_params(&mut params, "final_ln", d);
        Ok(LmState {
            cfg,
            vocab,
            params,
            bn_running,
        })
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        for (k, (mean, var)) in &self.bn_running {
            out.insert(format!("bn_mean.{}", k), Tensor::from_vec(mean.clone()));
            out.insert(format!("bn_var.{}", k), Tensor::from_vec(var.clone()));
        }
        out
    }

    pub fn from_tensors(
        cfg: LmConfig,
        vocab: UnifiedVocab,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut state = LmState::new(cfg, vocab, 0)?;
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix("bn_mean.") {
                state
                    .bn_running
                    .entry(k.to_string())
                    .or_insert_with(|| (vec![], vec![]))
                    .0 = t.data().to_vec();
            } else if let Some(k) = name.strip_prefix("bn_var.") {
                state
                    .bn_running
                    .entry(k.to_string())
                    .or_insert_with(|| (vec![], vec![]))
                    .1 = t.data().to_vec();
            } else if state.params.contains_key(name) {
                if state.params[name].shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{}' has shape {:?}, expected {:?}",
                        name,
                        t.shape(),
                        state.params[name].shape()
                    )));
                }
                state.params.insert(name.clone(), t.clone());
            }
        }
        Ok(state)
    }
}

/// Whether batch-norm sites use batch statistics (training) or running
/// statistics (inference). Irrelevant for the layer-norm encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

/// Batch statistics captured at a batch-norm site during a training pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub key: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Conformer-style audio encoder: length-preserving, width `cfg.width`.
/// Returns the output node plus batch statistics recorded at batch-norm
/// sites (empty for the layer-norm variant).
pub(crate) fn build_audio_encoder(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    state: &LmState,
    feats: NodeId,
    mode: ForwardMode,
) -> (NodeId, Vec<BnBatchStats>) {
    let cfg = &state.cfg;
    let t_len = b.value(feats).shape()[0];
    let mut x = linear(b, pn, feats, "aenc.in");
    let pe = b.constant(sinusoidal_pe(t_len, cfg.width));
    x = b.add(x, pe);
    let mut bn_stats = Vec::new();
    for i in 0..cfg.audio_encoder.blocks {
        let p = format!("aenc.{}", i);
        // macaron feed-forward halves around attention and conv
        let h = affine_ln(b, pn, x, &format!("{}.ln1", p));
        let h = ffn(b, pn, h, &format!("{}.ff1", p));
        let h = b.scale(h, 0.5);
        x = b.add(x, h);
        let h = affine_ln(b, pn, x, &format!("{}.ln2", p));
        let h = attention(b, pn, h, &format!("{}.attn", p), cfg.heads, None);
        x = b.add(x, h);
        // depthwise conv sub-block
        let h = affine_ln(b, pn, x, &format!("{}.ln3", p));
        let h = linear(b, pn, h, &format!("{}.conv.pw1", p));
        let h = b.gelu(h);
        let h = b.depthwise_conv1d(h, pn[&format!("{}.conv.dw.w", p)], 1);
        let norm_key = format!("{}.conv.norm", p);
        let h = match (cfg.audio_encoder.norm, mode) {
            (NormKind::Layer, _) => b.layer_norm(h, LN_EPS),
            (NormKind::Batch, ForwardMode::Train) => {
                let val = b.value(h).clone();
                bn_stats.push(column_stats(&norm_key, &val));
                b.batch_norm_cols(h, LN_EPS)
            }
            (NormKind::Batch, ForwardMode::Infer) => {
                let (mean, var) = state
                    .bn_running
                    .get(&norm_key)
                    .expect("running stats for batch-norm site");
                let neg_mean = b.constant(Tensor::from_vec(mean.iter().map(|m| -m).collect()));
                let inv = b.constant(Tensor::from_vec(
                    var.iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect(),
                ));
                let centered = b.add_row(h, neg_mean);
                b.mul_row(centered, inv)
            }
        };
        let h = b.mul_row(h, pn[&format!("{}.g", norm_key)]);
        let h = b.add_row(h, pn[&format!("{}.b", norm_key)]);
        let h = b.gelu(h);
        let h = linear(b, pn, h, &format!("{}.conv.pw2", p));
        x = b.add(x, h);
        let h = affine_ln(b, pn, x, &format!("{}.ln4", p));
        let h = ffn(b, pn, h, &format!("{}.ff2", p));
        let h = b.scale(h, 0.5);
        x = b.add(x, h);
    }
    (affine_ln(b, pn, x, "aenc.final_ln"), bn_stats)
}

fn column_stats(key: &str, t: &Tensor) -> BnBatchStats {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            mean[j] += t.at2(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= r as f64;
    }
    for i in 0..r {
        for j in 0..c {
            let d = t.at2(i, j) - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= r as f64;
    }
    BnBatchStats {
        key: key.to_string(),
        mean,
        var,
    }
}

/// Embedded position sequence for the unified layout
/// [inputs…, task, ⟨S⟩, targets…, ⟨E⟩?]. `include_eos` is false during
/// decoding where ⟨E⟩ has not been generated.
pub(crate) fn build_input_rows(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    state: &LmState,
    seq: &UnifiedSequence,
    generated: &[u32],
    include_eos: bool,
    mode: ForwardMode,
) -> (NodeId, Vec<BnBatchStats>) {
    let vocab = &state.vocab;
    let mut bn_stats = Vec::new();
    let input_rows = match &seq.input {
        SeqInput::Audio(lfr) => {
            let feats = b.constant(lfr.frames.clone());
            let (enc, stats) = build_audio_encoder(b, pn, state, feats, mode);
            bn_stats = stats;
            enc
        }
        SeqInput::Text(ids) => {
            let unified: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
            b.embed(pn["emb.w"], &unified)
        }
    };
    let mut tail_ids: Vec<usize> = vec![
        vocab.task_id(seq.spec.task) as usize,
        vocab.bos() as usize,
    ];
    tail_ids.extend(seq.targets.iter().map(|&t| t as usize));
    tail_ids.extend(generated.iter().map(|&t| t as usize));
    if include_eos {
        tail_ids.push(vocab.eos() as usize);
    }
    let tail = b.embed(pn["emb.w"], &tail_ids);
    let rows = b.concat_rows(&[input_rows, tail]);
    (rows, bn_stats)
}

/// Backbone graph: embedded rows → causal transformer → logits [T×(N+M+L)].
pub(crate) fn build_backbone(
    b: &mut GraphBuilder,
    pn: &BTreeMap<String, NodeId>,
    state: &LmState,
    rows: NodeId,
) -> NodeId {
    let cfg = &state.cfg;
    let t_len = b.value(rows).shape()[0];
    let pos_ids: Vec<usize> = (0..t_len).collect();
    let pos = b.embed(pn["pos.w"], &pos_ids);
    let mut x = b.add(rows, pos);
    let mask = causal_mask(b, t_len);
    for l in 0..cfg.layers {
        x = transformer_block(b, pn, x, &format!("blk{}", l), cfg.heads, Some(mask));
    }
    let h = affine_ln(b, pn, x, "final_ln");
    let wt = b.transpose(pn["emb.w"]);
    b.matmul(h, wt)
}

/// Forward pass over a complete teacher-forced sequence.
pub fn lm_forward(seq: &UnifiedSequence, state: &LmState) -> Result<Tensor> {
    if seq.len() > state.cfg.max_seq {
        return Err(Error::InvalidArg(format!(
            "sequence length {} exceeds max {}",
            seq.len(),
            state.cfg.max_seq
        )));
    }
    let mut b = GraphBuilder::new();
    let pn = bind_const_params(&mut b, &state.params);
    let (rows, _) = build_input_rows(&mut b, &pn, state, seq, &[], true, ForwardMode::Infer);
    let logits = build_backbone(&mut b, &pn, state, rows);
    b.set_name("logits", logits);
    let g = b.finish()?;
    Ok(g.evaluate(&["logits"])?.remove("logits").unwrap())
}

/// Continuous audio encodings for a stacked feature matrix (the public
/// audio_encode surface; length-preserving).
pub fn audio_encode(feats: &crate::dsp::LfrFeatures, state: &LmState) -> Result<Tensor> {
    if !feats.frames.all_finite() {
        return Err(Error::NonFinite {
            what: "audio features".into(),
        });
    }
    if feats.width() != state.cfg.feat_width {
        return Err(Error::ShapeMismatch {
            node: "audio_encode".into(),
            detail: format!(
                "feature width {} vs configured {}",
                feats.width(),
                state.cfg.feat_width
            ),
        });
    }
    let mut b = GraphBuilder::new();
    let pn = bind_const_params(&mut b, &state.params);
    let f = b.constant(feats.frames.clone());
    let (enc, _) = build_audio_encoder(&mut b, &pn, state, f, ForwardMode::Infer);
    b.set_name("enc", enc);
    let g = b.finish()?;
    Ok(g.evaluate(&["enc"])?.remove("enc").unwrap())
}

/// Masked cross-entropy nodes for a teacher-forced sequence: positions
/// predicting each target token (and ⟨E⟩) are gathered from the logits at
/// the preceding position; everything else is ignored.
pub(crate) fn build_masked_ce(
    b: &mut GraphBuilder,
    logits: NodeId,
    seq: &UnifiedSequence,
    vocab: &UnifiedVocab,
) -> NodeId {
    let mask = seq.mask();
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i - 1)
        .collect();
    let tokens: Vec<usize> = seq
        .masked_tokens(vocab)
        .into_iter()
        .map(|t| t as usize)
        .collect();
    let gathered = b.gather_rows(logits, &rows);
    let logp = b.log_softmax(gathered);
    let picked = b.pick_per_row(logp, &tokens);
    let s = b.sum(picked);
    b.scale(s, -1.0 / rows.len() as f64)
}

/// L = −(1/T_v)·Σ log p(vⱼ|·) over masked positions only.
pub fn masked_ce(logits: &Tensor, seq: &UnifiedSequence, vocab: &UnifiedVocab) -> Result<f64> {
    let (t_len, v) = logits.dims2()?;
    if t_len != seq.len() || v != vocab.total() {
        return Err(Error::ShapeMismatch {
            node: "masked_ce".into(),
            detail: format!(
                "logits {:?} vs layout {}×{}",
                logits.shape(),
                seq.len(),
                vocab.total()
            ),
        });
    }
    if seq.mask().iter().all(|&m| !m) {
        return Err(Error::InvalidArg("all-zero loss mask".into()));
    }
    let mut b = GraphBuilder::new();
    let l = b.constant(logits.clone());
    let loss = build_masked_ce(&mut b, l, seq, vocab);
    b.set_name("loss", loss);
    let g = b.finish()?;
    g.value_of("loss")?.scalar_value()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dsp::MelFeatures;
    use crate::lm::sequence::{build_sequence, BuildInput, TargetTokens};
    use crate::lm::vocab::{task_spec, Task};

    pub(crate) fn tiny_state(n_audio: usize) -> LmState {
        let cfg = LmConfig {
            layers: 2,
            width: 16,
            heads: 2,
            ff_mult: 2,
            max_seq: 128,
            lfr_factor: 2,
            feat_width: 8,
            audio_encoder: AudioEncoderConfig {
                blocks: 1,
                norm: NormKind::Layer,
            },
        };
        LmState::new(cfg, UnifiedVocab::new(n_audio), 3).unwrap()
    }

    fn mel(frames: usize) -> MelFeatures {
        let mut data = Vec::new();
        for t in 0..frames {
            for b in 0..4 {
                data.push(((t * 7 + b) as f64 * 0.37).sin());
            }
        }
        MelFeatures {
            frames: Tensor::new(vec![frames, 4], data).unwrap(),
            frame_shift_ms: 10.0,
            mel_bins: 4,
        }
    }

    fn asr_seq(state: &LmState, frames: usize, targets: Vec<u32>) -> UnifiedSequence {
        build_sequence(
            &task_spec(Task::Asr),
            BuildInput::Audio(mel(frames)),
            TargetTokens::Text(targets),
            &state.vocab,
            state.cfg.lfr_factor,
        )
        .unwrap()
    }

    #[test]
    fn logits_row_width_is_vocab_total() {
        let state = tiny_state(32);
        let seq = asr_seq(&state, 6, vec![4, 5]);
        let logits = lm_forward(&seq, &state).unwrap();
        assert_eq!(logits.shape(), &[seq.len(), 258 + 32 + 7]);
        // 100 text + 1024 audio + 7 task would give 1131 columns
        assert_eq!(100 + 1024 + 7, 1131);
    }

    #[test]
    fn audio_encoder_preserves_length() {
        let state = tiny_state(32);
        for frames in [2usize, 17, 40] {
            let lfr = crate::dsp::lfr_stack(&mel(frames), 2).unwrap();
            let out = audio_encode(&lfr, &state).unwrap();
            assert_eq!(out.shape(), &[frames.div_ceil(2), 16]);
        }
    }

    #[test]
    fn audio_encoder_deterministic() {
        let state = tiny_state(32);
        let lfr = crate::dsp::lfr_stack(&mel(8), 2).unwrap();
        let a = audio_encode(&lfr, &state).unwrap();
        let b = audio_encode(&lfr, &state).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn causality_is_bitwise() {
        let state = tiny_state(32);
        let seq_a = asr_seq(&state, 6, vec![1, 2, 3, 4]);
        let mut seq_b = seq_a.clone();
        // perturb the last target token; logits before it must not move
        *seq_b.targets.last_mut().unwrap() = 9;
        let la = lm_forward(&seq_a, &state).unwrap();
        let lb = lm_forward(&seq_b, &state).unwrap();
        let changed_pos = seq_a.len() - 2; // position of the last target
        for t in 0..changed_pos {
            for j in 0..la.shape()[1] {
                assert_eq!(
                    la.at2(t, j).to_bits(),
                    lb.at2(t, j).to_bits(),
                    "row {} col {}",
                    t,
                    j
                );
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let state = tiny_state(32);
        let seq = asr_seq(&state, 4, vec![7]);
        let logits = lm_forward(&seq, &state).unwrap();
        for t in 0..logits.shape()[0] {
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - m).exp() / s).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_ce_is_log_vocab() {
        let state = tiny_state(1024);
        let seq = asr_seq(&state, 4, vec![10, 20, 30]);
        let v = state.vocab.total();
        let logits = Tensor::zeros(&[seq.len(), v]);
        let loss = masked_ce(&logits, &seq, &state.vocab).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn perfect_logits_drive_ce_to_zero() {
        let state = tiny_state(32);
        let seq = asr_seq(&state, 4, vec![3, 4]);
        let v = state.vocab.total();
        let mut logits = Tensor::zeros(&[seq.len(), v]);
        let mask = seq.mask();
        let tokens = seq.masked_tokens(&state.vocab);
        let mut ti = 0;
        for (pos, &m) in mask.iter().enumerate() {
            if m {
                let row = pos - 1;
                logits.data_mut()[row * v + tokens[ti] as usize] = 1e4;
                ti += 1;
            }
        }
        let loss = masked_ce(&logits, &seq, &state.vocab).unwrap();
        assert!(loss < 1e-9, "loss {}", loss);
    }

    #[test]
    fn masked_positions_do_not_move_loss() {
        let state = tiny_state(32);
        let seq = asr_seq(&state, 4, vec![3, 4]);
        let v = state.vocab.total();
        let logits = Tensor::zeros(&[seq.len(), v]);
        let base = masked_ce(&logits, &seq, &state.vocab).unwrap();
        // rows whose logits are never gathered: every position except those
        // immediately preceding a masked position
        let gathered: Vec<usize> = seq
            .mask()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i - 1)
            .collect();
        let mut perturbed = logits.clone();
        for t in 0..seq.len() {
            if !gathered.contains(&t) {
                for j in 0..v {
                    perturbed.data_mut()[t * v + j] = 1000.0 * ((t * v + j) as f64).sin();
                }
            }
        }
        let after = masked_ce(&perturbed, &seq, &state.vocab).unwrap();
        assert!((after - base).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_variant_runs() {
        let mut state = tiny_state(32);
        state.cfg.audio_encoder.norm = NormKind::Batch;
        let rebuilt = LmState::new(state.cfg.clone(), state.vocab, 3).unwrap();
        let lfr = crate::dsp::lfr_stack(&mel(8), 2).unwrap();
        let out = audio_encode(&lfr, &rebuilt).unwrap();
        assert_eq!(out.shape(), &[4, 16]);
    }
}
