//! Synthetic corpora, task evaluation, and complex-task chaining.

pub mod chain;
pub mod corpus;
pub mod metrics;

pub use chain::{chain_execute, ChainOutcome, ChainPlan, ChainStep, ChainValue, StepSource};
pub use corpus::{
    gen_corpus, gen_pair, gen_split_corpus, split_of, symbols_to_text, text_to_symbols, CorpusPair,
    PairData, Split, SyntheticCorpusSpec,
};
pub use metrics::{
    condition_for, condition_for_spec, edit_distance, evaluate, logmel_distance, pair_to_prefix, pair_to_sequence,
    pair_to_sequence_with_codes, snr_db, token_accuracy, token_error_rate, EvalRecord, Models, TaskMetrics,
};

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::codec::{encode_codes, write_codes_binary, CodecState};
use crate::dsp::wav::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::lm::Task;

/// One corpus manifest line: {id, task, wav_path?, text?, codes_path?, label?}.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codes_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Write pairs as WAV/codes files plus a JSON-lines manifest. Audio-target
/// tasks need the codec to tokenize their targets.
pub fn write_manifest(
    dir: &Path,
    pairs: &[CorpusPair],
    codec: Option<&CodecState>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("wav"))?;
    std::fs::create_dir_all(dir.join("codes"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    for pair in pairs {
        let mut rec = ManifestRecord {
            id: pair.id.clone(),
            task: pair.task.token_str().to_string(),
            wav_path: None,
            text: None,
            codes_path: None,
            label: None,
        };
        match &pair.input {
            PairData::Audio(w) => {
                let p = dir.join("wav").join(format!("{}.wav", pair.id));
                write_wav(&p, w)?;
                rec.wav_path = Some(format!("wav/{}.wav", pair.id));
            }
            PairData::Text(t) => rec.text = Some(t.clone()),
            PairData::Label(_) => unreachable!("labels are targets"),
        }
        match &pair.target {
            PairData::Text(t) => rec.text = Some(t.clone()),
            PairData::Label(l) => rec.label = Some(*l),
            PairData::Audio(w) => {
                let codec = codec.ok_or_else(|| {
                    Error::InvalidArg(format!(
                        "pair {} has an audio target; a codec checkpoint is required",
                        pair.id
                    ))
                })?;
                let codes = encode_codes(w, codec)?;
                let p = dir.join("codes").join(format!("{}.codes", pair.id));
                write_codes_binary(&p, &codes)?;
                rec.codes_path = Some(format!("codes/{}.codes", pair.id));
            }
        }
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| Error::InvalidArg(format!("manifest serialization: {}", e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest_path)
}

/// Read a manifest back into corpus pairs. Tasks with audio targets are
/// reconstructed through the codec decoder at full quantizer depth.
pub fn read_manifest(path: &Path, codec: Option<&CodecState>) -> Result<Vec<CorpusPair>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Config {
            line: lineno + 1,
            msg: format!("manifest: {}", e),
        })?;
        let task = Task::from_name(&rec.task).ok_or_else(|| Error::Config {
            line: lineno + 1,
            msg: format!("unknown task '{}'", rec.task),
        })?;
        let spec = crate::lm::task_spec(task);
        let input = match spec.input {
            crate::lm::Modality::Audio => {
                let rel = rec.wav_path.as_ref().ok_or_else(|| Error::Config {
                    line: lineno + 1,
                    msg: "missing wav_path".into(),
                })?;
                PairData::Audio(read_wav(&dir.join(rel))?)
            }
            crate::lm::Modality::Text => PairData::Text(rec.text.clone().unwrap_or_default()),
        };
        let target = match spec.output {
            crate::lm::Modality::Text => {
                if let Some(l) = rec.label {
                    PairData::Label(l)
                } else {
                    PairData::Text(rec.text.clone().ok_or_else(|| Error::Config {
                        line: lineno + 1,
                        msg: "missing text target".into(),
                    })?)
                }
            }
            crate::lm::Modality::Audio => {
                let rel = rec.codes_path.as_ref().ok_or_else(|| Error::Config {
                    line: lineno + 1,
                    msg: "missing codes_path".into(),
                })?;
                let codec = codec.ok_or_else(|| {
                    Error::InvalidArg("manifest has code targets; codec required".into())
                })?;
                let codes =
                    crate::codec::read_codes_binary(&dir.join(rel), codec.cfg.codebook_size)?;
                let emb = crate::codec::rvq_dequantize(&codes, codes.groups(), &codec.codebooks)?;
                PairData::Audio(crate::codec::decode_waveform(&emb, codec)?)
            }
        };
        let symbols = rec
            .text
            .as_deref()
            .and_then(|t| text_to_symbols(t, 26).ok())
            .unwrap_or_default();
        out.push(CorpusPair {
            id: rec.id,
            task,
            symbols,
            input,
            target,
            snr_db: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_text_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCorpusSpec::default();
        let pairs = gen_corpus(&spec, Task::Asr, 3, 5).unwrap();
        let path = write_manifest(dir.path(), &pairs, None).unwrap();
        let back = read_manifest(&path, None).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.task, b.task);
            match (&a.target, &b.target) {
                (PairData::Text(x), PairData::Text(y)) => assert_eq!(x, y),
                _ => panic!("expected text targets"),
            }
        }
    }

    #[test]
    fn manifest_requires_codec_for_audio_targets() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCorpusSpec::default();
        let pairs = gen_corpus(&spec, Task::Tts, 1, 5).unwrap();
        assert!(write_manifest(dir.path(), &pairs, None).is_err());
    }
}
