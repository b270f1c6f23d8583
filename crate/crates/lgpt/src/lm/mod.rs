//! Unified audio-and-text decoder-only language model.
//!
//! Continuous audio encodings in, text or audio tokens out, over one
//! vocabulary of N text + M audio + L task ids. Training minimizes masked
//! cross-entropy over target positions only; decoding is autoregressive
//! with endless-loop diagnostics.

pub mod decode;
pub mod model;
pub mod sequence;
pub mod train;
pub mod vocab;

pub use decode::{
    decode_autoregressive, has_endless_repeat, loop_ratio, DecodeConfig, DecodeDiag,
    DecodeStrategy, StopReason,
};
pub use model::{
    audio_encode, lm_forward, masked_ce, AudioEncoderConfig, ForwardMode, LmConfig, LmState,
    NormKind,
};
pub use sequence::{build_sequence, BuildInput, SeqInput, TargetTokens, UnifiedSequence};
pub use train::{LmStepReport, LmTrainer};
pub use vocab::{task_spec, Modality, Task, TaskSpec, TokenKind, UnifiedVocab};
