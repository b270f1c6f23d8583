//! Unified text+audio+task vocabulary.
//!
//! Id ranges partition [0, N+M+L): text ids in [0,N) (bytes plus the
//! reserved start/end tokens), audio ids in [N,N+M) mapping one-to-one
//! onto first-group codec codes, task ids in [N+M,N+M+L). The task-token
//! registry is bit-exact and ordered: <ASR>=0, <SLU>=1, <S2TT>=2, <SER>=3,
//! <AAC>=4, <SE>=5, <TTS>=6 within the task range.

use crate::error::{Error, Result};

/// Byte-level text tokens plus ⟨S⟩/⟨E⟩.
pub const TEXT_BYTES: usize = 256;
pub const N_TEXT: usize = TEXT_BYTES + 2;
pub const BOS_LOCAL: u32 = 256;
pub const EOS_LOCAL: u32 = 257;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Asr,
    Slu,
    S2tt,
    Ser,
    Aac,
    Se,
    Tts,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Asr,
        Task::Slu,
        Task::S2tt,
        Task::Ser,
        Task::Aac,
        Task::Se,
        Task::Tts,
    ];

    /// Position within the task-id range; fixed registry order.
    pub fn index(self) -> usize {
        match self {
            Task::Asr => 0,
            Task::Slu => 1,
            Task::S2tt => 2,
            Task::Ser => 3,
            Task::Aac => 4,
            Task::Se => 5,
            Task::Tts => 6,
        }
    }

    pub fn from_index(i: usize) -> Option<Task> {
        Task::ALL.get(i).copied()
    }

    pub fn token_str(self) -> &'static str {
        match self {
            Task::Asr => "<ASR>",
            Task::Slu => "<SLU>",
            Task::S2tt => "<S2TT>",
            Task::Ser => "<SER>",
            Task::Aac => "<AAC>",
            Task::Se => "<SE>",
            Task::Tts => "<TTS>",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        let canon = name.trim().trim_start_matches('<').trim_end_matches('>');
        Task::ALL
            .into_iter()
            .find(|t| t.token_str().trim_matches(['<', '>']) == canon.to_uppercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Text,
}

/// Task identity with its input/output modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub task: Task,
    pub input: Modality,
    pub output: Modality,
}

/// TTS takes text in; everything else takes audio. TTS and SE emit audio
/// tokens; the rest emit text tokens.
pub fn task_spec(task: Task) -> TaskSpec {
    let input = match task {
        Task::Tts => Modality::Text,
        _ => Modality::Audio,
    };
    let output = match task {
        Task::Tts | Task::Se => Modality::Audio,
        _ => Modality::Text,
    };
    TaskSpec {
        task,
        input,
        output,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Local text id (bytes, then ⟨S⟩=256, ⟨E⟩=257).
    Text(u32),
    /// First-group codec code.
    Audio(u32),
    Task(Task),
}

/// Vocabulary layout; `n_audio` equals the codec codebook size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnifiedVocab {
    pub n_text: usize,
    pub n_audio: usize,
    pub n_task: usize,
}

impl UnifiedVocab {
    pub fn new(n_audio: usize) -> Self {
        UnifiedVocab {
            n_text: N_TEXT,
            n_audio,
            n_task: Task::ALL.len(),
        }
    }

    /// Output-layer row count N+M+L.
    pub fn total(&self) -> usize {
        self.n_text + self.n_audio + self.n_task
    }

    pub fn bos(&self) -> u32 {
        BOS_LOCAL
    }

    pub fn eos(&self) -> u32 {
        EOS_LOCAL
    }

    pub fn text_id(&self, local: u32) -> Result<u32> {
        if (local as usize) < self.n_text {
            Ok(local)
        } else {
            Err(Error::InvalidArg(format!(
                "text token {} out of range 0..{}",
                local, self.n_text
            )))
        }
    }

    pub fn byte_id(&self, byte: u8) -> u32 {
        byte as u32
    }

    pub fn audio_id(&self, code: u32) -> Result<u32> {
        if (code as usize) < self.n_audio {
            Ok(self.n_text as u32 + code)
        } else {
            Err(Error::InvalidArg(format!(
                "audio code {} out of range 0..{}",
                code, self.n_audio
            )))
        }
    }

    pub fn task_id(&self, task: Task) -> u32 {
        (self.n_text + self.n_audio + task.index()) as u32
    }

    /// Round-trip id → (kind, local index); every id maps to exactly one range.
    pub fn classify(&self, id: u32) -> Result<TokenKind> {
        let id = id as usize;
        if id < self.n_text {
            Ok(TokenKind::Text(id as u32))
        } else if id < self.n_text + self.n_audio {
            Ok(TokenKind::Audio((id - self.n_text) as u32))
        } else if id < self.total() {
            Ok(TokenKind::Task(
                Task::from_index(id - self.n_text - self.n_audio).unwrap(),
            ))
        } else {
            Err(Error::InvalidArg(format!(
                "token id {} outside vocabulary of {}",
                id,
                self.total()
            )))
        }
    }

    pub fn unified(&self, kind: TokenKind) -> Result<u32> {
        match kind {
            TokenKind::Text(t) => self.text_id(t),
            TokenKind::Audio(c) => self.audio_id(c),
            TokenKind::Task(t) => Ok(self.task_id(t)),
        }
    }

    /// Byte-level encode of a text string into local text ids.
    pub fn encode_text(&self, s: &str) -> Vec<u32> {
        s.bytes().map(|b| b as u32).collect()
    }

    /// Decode local text ids back to a string, skipping specials.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&t| t < TEXT_BYTES as u32)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
