//! Desk-scale unified audio-and-text language model pipeline.
//!
//! The crate wires four trainable pieces together:
//!
//! * [`codec`] — an RVQ neural audio codec (strided conv encoder, residual
//!   vector quantizer with structured dropout, transposed-conv decoder).
//!   The first quantizer's indices are the LM's audio token stream.
//! * [`lm`] — a decoder-only transformer over a unified text+audio+task
//!   vocabulary. Audio inputs enter as continuous encodings, audio outputs
//!   leave as discrete codec tokens; training uses masked cross-entropy.
//! * [`vocoder`] — a one-step (single forward pass) predictor that regresses
//!   the summed multi-group codec embedding from first-group tokens plus
//!   conditioning inputs, then reconstructs audio with the frozen codec
//!   decoder. A multi-step classification baseline is included for
//!   comparison runs.
//! * [`tasks`] — synthetic tone-language corpora, task registry, metrics,
//!   and the task-chaining engine (speech-to-speech translation,
//!   noise-robust recognition).
//!
//! Everything trains on [`numerics`], a small f64 tensor library with
//! reverse-mode differentiation, a finite-difference oracle, and Adam.
//! [`dsp`] provides the STFT/mel/LFR feature frontend and WAV I/O.

pub mod codec;
mod nn;
pub mod config;
pub mod dsp;
pub mod error;
pub mod lm;
pub mod numerics;
pub mod report;
pub mod tasks;
pub mod vocoder;

pub mod cli;

pub use error::{Error, Result};
