//! C ABI for the audio pipeline: opaque handles over the codec, language
//! model, and vocoder, plus flat-buffer encode/decode/synthesize/transcribe
//! calls. Every function returns an `LgptStatus`; the last error message is
//! kept per thread and readable via `lgpt_last_error_message`.
//!
//! The header is generated by cbindgen into `include/lgpt.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lgpt::codec::{
    decode_waveform, encode_latents, rvq_dequantize, rvq_quantize, CodeFrameSeq, CodecState,
};
use lgpt::config::Config;
use lgpt::dsp::Waveform;
use lgpt::lm::{decode_autoregressive, LmState, Task, TokenKind};
use lgpt::tasks::{pair_to_prefix, CorpusPair, PairData};
use lgpt::vocoder::{synthesize, ConditionBundle, VocoderState};

/// Status codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgptStatus {
    Ok = 0,
    /// Assertion-style failure.
    Failed = 1,
    /// Bad arguments, config, or state.
    Invalid = 2,
    /// File or checkpoint I/O failure.
    Io = 3,
    /// Internal panic caught at the boundary.
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &lgpt::Error) -> LgptStatus {
    match err.exit_code() {
        1 => LgptStatus::Failed,
        3 => LgptStatus::Io,
        _ => LgptStatus::Invalid,
    }
}

/// Copy the last error message (UTF-8, NUL-terminated) into `buf`.
/// Returns the full message length in bytes, excluding the terminator.
#[no_mangle]
pub extern "C" fn lgpt_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, LgptStatus> {
    if ptr.is_null() {
        set_error(format!("{} path is null", what));
        return Err(LgptStatus::Invalid);
    }
    let s = unsafe { CStr::from_ptr(ptr) };
    match s.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(format!("{} path is not valid UTF-8", what));
            Err(LgptStatus::Invalid)
        }
    }
}

fn guard<F: FnOnce() -> LgptStatus>(f: F) -> LgptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            LgptStatus::Panic
        }
    }
}

/// Opaque codec handle (config + trained state).
pub struct LgptCodec {
    cfg: Config,
    state: CodecState,
}

/// Opaque language-model handle.
pub struct LgptLm {
    cfg: Config,
    state: LmState,
}

/// Opaque vocoder handle.
pub struct LgptVocoder {
    state: VocoderState,
}

/// Open a codec from a config file and checkpoint.
///
/// # Safety
/// `config_path`/`ckpt_path` must be NUL-terminated strings and `out` a
/// valid pointer; the handle must be released with `lgpt_codec_free`.
#[no_mangle]
pub unsafe extern "C" fn lgpt_codec_open(
    config_path: *const c_char,
    ckpt_path: *const c_char,
    out: *mut *mut LgptCodec,
) -> LgptStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle is null");
            return LgptStatus::Invalid;
        }
        let cfg_p = match path_arg(config_path, "config") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ck_p = match path_arg(ckpt_path, "checkpoint") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match Config::load(&cfg_p) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        match lgpt::cli::load_codec(&ck_p, &cfg) {
            Ok(state) => {
                unsafe { *out = Box::into_raw(Box::new(LgptCodec { cfg, state })) };
                LgptStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `handle` must come from `lgpt_codec_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lgpt_codec_free(handle: *mut LgptCodec) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Latent frame count for a sample count (ceil(samples/frame)).
///
/// # Safety
/// `handle` must be a live codec handle.
#[no_mangle]
pub unsafe extern "C" fn lgpt_codec_frame_count(handle: *const LgptCodec, samples: usize) -> usize {
    if handle.is_null() {
        return 0;
    }
    let codec = unsafe { &*handle };
    samples.div_ceil(codec.state.cfg.frame_samples())
}

/// # Safety
/// `handle` must be a live codec handle.
#[no_mangle]
pub unsafe extern "C" fn lgpt_codec_num_quantizers(handle: *const LgptCodec) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.state.cfg.num_quantizers
}

/// Encode mono f32 samples in [-1,1] into codec codes for the first
/// `groups` quantizers. `codes` must hold frame_count·groups entries,
/// written frame-major.
///
/// # Safety
/// `samples` must point to `num_samples` floats and `codes` to
/// `lgpt_codec_frame_count(...)·groups` u16 slots.
#[no_mangle]
pub unsafe extern "C" fn lgpt_codec_encode(
    handle: *const LgptCodec,
    samples: *const f32,
    num_samples: usize,
    groups: usize,
    codes: *mut u16,
) -> LgptStatus {
    guard(|| {
        if handle.is_null() || samples.is_null() || codes.is_null() {
            set_error("null argument");
            return LgptStatus::Invalid;
        }
        let codec = unsafe { &*handle };
        let buf = unsafe { std::slice::from_raw_parts(samples, num_samples) };
        let wave = match Waveform::new(
            buf.iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect(),
            codec.state.cfg.sample_rate,
        ) {
            Ok(w) => w,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let latents = match encode_latents(&wave, &codec.state) {
            Ok(l) => l,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let q = match rvq_quantize(&latents, groups, &codec.state.codebooks) {
            Ok(q) => q,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let frames = q.codes.frames();
        let out = unsafe { std::slice::from_raw_parts_mut(codes, frames * groups) };
        for t in 0..frames {
            for g in 0..groups {
                out[t * groups + g] = q.codes.get(t, g) as u16;
            }
        }
        LgptStatus::Ok
    })
}

/// Decode codec codes back to audio. `samples` must hold frames·640 f32.
///
/// # Safety
/// `codes` must point to `frames·groups` u16 and `samples` to
/// `frames·frame_samples` f32 slots.
#[no_mangle]
pub unsafe extern "C" fn lgpt_codec_decode(
    handle: *const LgptCodec,
    codes: *const u16,
    frames: usize,
    groups: usize,
    samples: *mut f32,
) -> LgptStatus {
    guard(|| {
        if handle.is_null() || codes.is_null() || samples.is_null() {
            set_error("null argument");
            return LgptStatus::Invalid;
        }
        let codec = unsafe { &*handle };
        let raw = unsafe { std::slice::from_raw_parts(codes, frames * groups) };
        let seq = match CodeFrameSeq::new(
            raw.iter().map(|&c| c as u32).collect(),
            frames,
            groups,
            codec.state.cfg.codebook_size,
        ) {
            Ok(s) => s,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let emb = match rvq_dequantize(&seq, groups, &codec.state.codebooks) {
            Ok(s) => s,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let wave = match decode_waveform(&emb, &codec.state) {
            Ok(w) => w,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let out = unsafe { std::slice::from_raw_parts_mut(samples, wave.len()) };
        for (o, s) in out.iter_mut().zip(&wave.samples) {
            *o = *s as f32;
        }
        LgptStatus::Ok
    })
}

/// # Safety
/// As for `lgpt_codec_open`.
#[no_mangle]
pub unsafe extern "C" fn lgpt_vocoder_open(
    config_path: *const c_char,
    ckpt_path: *const c_char,
    out: *mut *mut LgptVocoder,
) -> LgptStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle is null");
            return LgptStatus::Invalid;
        }
        let cfg_p = match path_arg(config_path, "config") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ck_p = match path_arg(ckpt_path, "checkpoint") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match Config::load(&cfg_p) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        match lgpt::cli::load_vocoder(&ck_p, &cfg) {
            Ok(state) => {
                unsafe { *out = Box::into_raw(Box::new(LgptVocoder { state })) };
                LgptStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `handle` must come from `lgpt_vocoder_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lgpt_vocoder_free(handle: *mut LgptVocoder) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// One-step synthesis from first-group tokens (no condition).
/// `samples` must hold num_tokens·frame_samples f32.
///
/// # Safety
/// `tokens` must point to `num_tokens` u16 and `samples` to
/// `num_tokens·frame_samples` f32 slots.
#[no_mangle]
pub unsafe extern "C" fn lgpt_synthesize(
    codec: *const LgptCodec,
    vocoder: *const LgptVocoder,
    tokens: *const u16,
    num_tokens: usize,
    samples: *mut f32,
) -> LgptStatus {
    guard(|| {
        if codec.is_null() || vocoder.is_null() || tokens.is_null() || samples.is_null() {
            set_error("null argument");
            return LgptStatus::Invalid;
        }
        let codec = unsafe { &*codec };
        let vocoder = unsafe { &*vocoder };
        let toks: Vec<u32> = unsafe { std::slice::from_raw_parts(tokens, num_tokens) }
            .iter()
            .map(|&t| t as u32)
            .collect();
        match synthesize(&toks, &ConditionBundle::None, &codec.state, &vocoder.state) {
            Ok(wave) => {
                let out = unsafe { std::slice::from_raw_parts_mut(samples, wave.len()) };
                for (o, s) in out.iter_mut().zip(&wave.samples) {
                    *o = *s as f32;
                }
                LgptStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// As for `lgpt_codec_open`.
#[no_mangle]
pub unsafe extern "C" fn lgpt_lm_open(
    config_path: *const c_char,
    ckpt_path: *const c_char,
    out: *mut *mut LgptLm,
) -> LgptStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle is null");
            return LgptStatus::Invalid;
        }
        let cfg_p = match path_arg(config_path, "config") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ck_p = match path_arg(ckpt_path, "checkpoint") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match Config::load(&cfg_p) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        match lgpt::cli::load_lm(&ck_p, &cfg) {
            Ok(state) => {
                unsafe { *out = Box::into_raw(Box::new(LgptLm { cfg, state })) };
                LgptStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `handle` must come from `lgpt_lm_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lgpt_lm_free(handle: *mut LgptLm) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Greedy speech recognition: mono f32 samples → UTF-8 transcript.
/// Writes up to `cap-1` bytes plus a NUL terminator; `written` (if non-null)
/// receives the untruncated byte length.
///
/// # Safety
/// `samples` must point to `num_samples` floats, `text` to `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn lgpt_transcribe(
    lm: *const LgptLm,
    samples: *const f32,
    num_samples: usize,
    text: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> LgptStatus {
    guard(|| {
        if lm.is_null() || samples.is_null() || text.is_null() {
            set_error("null argument");
            return LgptStatus::Invalid;
        }
        let lm = unsafe { &*lm };
        let buf = unsafe { std::slice::from_raw_parts(samples, num_samples) };
        let wave = match Waveform::new(
            buf.iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect(),
            lm.cfg.dsp.sample_rate,
        ) {
            Ok(w) => w,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let pair = CorpusPair {
            id: "ffi".into(),
            task: Task::Asr,
            symbols: vec![],
            input: PairData::Audio(wave),
            target: PairData::Text(String::new()),
            snr_db: None,
        };
        let prefix = match pair_to_prefix(&pair, &lm.state) {
            Ok(p) => p,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let (tokens, _diag) =
            match decode_autoregressive(&prefix, &lm.state, &lm.cfg.decode_config(true)) {
                Ok(r) => r,
                Err(e) => {
                    set_error(e.to_string());
                    return status_of(&e);
                }
            };
        let locals: Vec<u32> = tokens
            .iter()
            .filter_map(|&t| match lm.state.vocab.classify(t) {
                Ok(TokenKind::Text(l)) => Some(l),
                _ => None,
            })
            .collect();
        let transcript = lm.state.vocab.decode_text(&locals);
        let bytes = transcript.as_bytes();
        if cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), text as *mut u8, n);
                *text.add(n) = 0;
            }
        }
        if !written.is_null() {
            unsafe { *written = bytes.len() };
        }
        LgptStatus::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn tiny_checkpoint(dir: &std::path::Path) -> (CString, CString) {
        let cfg_text =
            "[codec]\nchannels = 4,4,4,4,8\nlatent_dim = 8\nquantizers = 4\ncodebook_size = 16\n";
        let cfg_path = dir.join("t.cfg");
        std::fs::write(&cfg_path, cfg_text).unwrap();
        let cfg = Config::load(&cfg_path).unwrap();
        let state = CodecState::new(cfg.codec_config(), 3).unwrap();
        let ckpt = dir.join("codec.ckpt");
        lgpt::numerics::checkpoint::save(&ckpt, &state.to_tensors()).unwrap();
        (
            CString::new(cfg_path.to_str().unwrap()).unwrap(),
            CString::new(ckpt.to_str().unwrap()).unwrap(),
        )
    }

    #[test]
    fn open_encode_decode_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, ckpt) = tiny_checkpoint(dir.path());
        let mut handle: *mut LgptCodec = std::ptr::null_mut();
        let status = unsafe { lgpt_codec_open(cfg.as_ptr(), ckpt.as_ptr(), &mut handle) };
        assert_eq!(status, LgptStatus::Ok);
        assert!(!handle.is_null());
        assert_eq!(unsafe { lgpt_codec_num_quantizers(handle) }, 4);

        let samples: Vec<f32> = (0..1280)
            .map(|i| 0.4 * (2.0 * std::f32::consts::PI * 500.0 * i as f32 / 16000.0).sin())
            .collect();
        let frames = unsafe { lgpt_codec_frame_count(handle, samples.len()) };
        assert_eq!(frames, 2);
        let mut codes = vec![0u16; frames * 4];
        let status = unsafe {
            lgpt_codec_encode(handle, samples.as_ptr(), samples.len(), 4, codes.as_mut_ptr())
        };
        assert_eq!(status, LgptStatus::Ok);

        let mut out = vec![0f32; frames * 640];
        let status =
            unsafe { lgpt_codec_decode(handle, codes.as_ptr(), frames, 4, out.as_mut_ptr()) };
        assert_eq!(status, LgptStatus::Ok);
        assert!(out.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        unsafe { lgpt_codec_free(handle) };
    }

    #[test]
    fn bad_path_reports_error() {
        let cfg = CString::new("/nonexistent/x.cfg").unwrap();
        let ckpt = CString::new("/nonexistent/x.ckpt").unwrap();
        let mut handle: *mut LgptCodec = std::ptr::null_mut();
        let status = unsafe { lgpt_codec_open(cfg.as_ptr(), ckpt.as_ptr(), &mut handle) };
        assert_eq!(status, LgptStatus::Io);
        let mut buf = vec![0i8; 256];
        let n = lgpt_last_error_message(buf.as_mut_ptr(), buf.len());
        assert!(n > 0);
    }

    #[test]
    fn null_arguments_rejected() {
        let status =
            unsafe { lgpt_codec_open(std::ptr::null(), std::ptr::null(), std::ptr::null_mut()) };
        assert_eq!(status, LgptStatus::Invalid);
    }
}
