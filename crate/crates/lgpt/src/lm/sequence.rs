//! Unified task expression: [input embeddings, task ID, output tokens].
//!
//! The realized layout is [inputs…, task, ⟨S⟩, targets…, ⟨E⟩]; ⟨S⟩ is
//! prepended to the target segment only. The loss mask is 1 on every
//! target position and on ⟨E⟩, 0 on inputs, the task token, and ⟨S⟩.

use crate::dsp::{lfr_stack, LfrFeatures, MelFeatures};
use crate::error::{Error, Result};
use crate::lm::vocab::{Modality, TaskSpec, TokenKind, UnifiedVocab};

#[derive(Debug, Clone)]
pub enum SeqInput {
    /// Audio input, LFR-stacked and ready for the audio encoder.
    Audio(LfrFeatures),
    /// Text input as local text ids.
    Text(Vec<u32>),
}

#[derive(Debug, Clone)]
pub enum BuildInput {
    Audio(MelFeatures),
    Text(Vec<u32>),
}

#[derive(Debug, Clone)]
pub enum TargetTokens {
    /// Local text ids in [0, N).
    Text(Vec<u32>),
    /// First-group codec codes in [0, M).
    Audio(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct UnifiedSequence {
    pub spec: TaskSpec,
    pub input: SeqInput,
    /// Target tokens as unified ids (audio codes offset into [N, N+M)).
    pub targets: Vec<u32>,
}

/// Assemble a training/eval sequence; validates modalities and id ranges.
pub fn build_sequence(
    spec: &TaskSpec,
    input: BuildInput,
    target: TargetTokens,
    vocab: &UnifiedVocab,
    lfr_factor: usize,
) -> Result<UnifiedSequence> {
    let input = match (spec.input, input) {
        (Modality::Audio, BuildInput::Audio(mel)) => SeqInput::Audio(lfr_stack(&mel, lfr_factor)?),
        (Modality::Text, BuildInput::Text(ids)) => {
            for &t in &ids {
                vocab.text_id(t)?;
            }
            SeqInput::Text(ids)
        }
        (want, _) => {
            return Err(Error::InvalidArg(format!(
                "task {:?} expects {:?} input",
                spec.task, want
            )))
        }
    };
    let targets = match (spec.output, target) {
        (Modality::Text, TargetTokens::Text(ids)) => ids
            .iter()
            .map(|&t| vocab.unified(TokenKind::Text(t)))
            .collect::<Result<Vec<u32>>>()?,
        (Modality::Audio, TargetTokens::Audio(codes)) => codes
            .iter()
            .map(|&c| vocab.unified(TokenKind::Audio(c)))
            .collect::<Result<Vec<u32>>>()?,
        (want, _) => {
            return Err(Error::InvalidArg(format!(
                "task {:?} expects {:?} targets",
                spec.task, want
            )))
        }
    };
    Ok(UnifiedSequence {
        spec: *spec,
        input,
        targets,
    })
}

impl UnifiedSequence {
    /// Number of input positions (LFR frames for audio, tokens for text).
    pub fn input_len(&self) -> usize {
        match &self.input {
            SeqInput::Audio(lfr) => lfr.num_frames(),
            SeqInput::Text(ids) => ids.len(),
        }
    }

    /// Total layout length: inputs + task + ⟨S⟩ + targets + ⟨E⟩.
    pub fn len(&self) -> usize {
        self.input_len() + 3 + self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Loss mask over the layout: 1 on target positions and ⟨E⟩.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        let first_target = self.input_len() + 2; // after task and ⟨S⟩
        for slot in m.iter_mut().skip(first_target) {
            *slot = true;
        }
        m
    }

    /// Masked position count T_v (targets plus ⟨E⟩).
    pub fn target_count(&self) -> usize {
        self.targets.len() + 1
    }

    /// Token ids at masked positions, in order: targets then ⟨E⟩.
    pub fn masked_tokens(&self, vocab: &UnifiedVocab) -> Vec<u32> {
        let mut out = self.targets.clone();
        out.push(vocab.text_id(vocab.eos()).unwrap());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::vocab::{task_spec, Task};
    use crate::numerics::Tensor;

    fn mel(frames: usize) -> MelFeatures {
        MelFeatures {
            frames: Tensor::zeros(&[frames, 40]),
            frame_shift_ms: 10.0,
            mel_bins: 40,
        }
    }

    #[test]
    fn asr_mask_counts_targets_plus_eos() {
        let v = UnifiedVocab::new(1024);
        // 100 mel frames → 17 LFR frames; 5 text targets → 6 mask ones
        let seq = build_sequence(
            &task_spec(Task::Asr),
            BuildInput::Audio(mel(100)),
            TargetTokens::Text(vec![104, 105, 106, 107, 108]),
            &v,
            6,
        )
        .unwrap();
        assert_eq!(seq.input_len(), 17);
        let mask = seq.mask();
        assert_eq!(mask.len(), 17 + 1 + 1 + 5 + 1);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 6);
        // zero over inputs, task, and ⟨S⟩
        assert!(mask[..19].iter().all(|&m| !m));
    }

    #[test]
    fn tts_audio_targets_offset_by_n() {
        let v = UnifiedVocab::new(1024);
        let seq = build_sequence(
            &task_spec(Task::Tts),
            BuildInput::Text(vec![10, 20, 30, 40, 50]),
            TargetTokens::Audio((0..25).collect()),
            &v,
            6,
        )
        .unwrap();
        for (i, &t) in seq.targets.iter().enumerate() {
            assert_eq!(t, 258 + i as u32);
        }
    }

    #[test]
    fn empty_target_masks_only_eos() {
        let v = UnifiedVocab::new(1024);
        let seq = build_sequence(
            &task_spec(Task::Asr),
            BuildInput::Audio(mel(10)),
            TargetTokens::Text(vec![]),
            &v,
            6,
        )
        .unwrap();
        let mask = seq.mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[mask.len() - 1]);
    }

    #[test]
    fn modality_mismatch_rejected() {
        let v = UnifiedVocab::new(1024);
        let err = build_sequence(
            &task_spec(Task::Asr),
            BuildInput::Text(vec![1]),
            TargetTokens::Text(vec![2]),
            &v,
            6,
        );
        assert!(err.is_err());
    }

    #[test]
    fn out_of_range_tokens_rejected() {
        let v = UnifiedVocab::new(1024);
        let err = build_sequence(
            &task_spec(Task::Asr),
            BuildInput::Audio(mel(10)),
            TargetTokens::Text(vec![300]),
            &v,
            6,
        );
        assert!(err.is_err());
        let err = build_sequence(
            &task_spec(Task::Tts),
            BuildInput::Text(vec![1]),
            TargetTokens::Audio(vec![2000]),
            &v,
            6,
        );
        assert!(err.is_err());
    }
}
