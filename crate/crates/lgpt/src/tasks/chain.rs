//! Complex-task chaining: break a task into basic sub-tasks and cascade
//! raw inputs and model outputs. Plans are type-checked against task
//! modalities before anything executes; a failing step aborts with its
//! index, and per-step artifacts are retained for inspection.

use serde::{Deserialize, Serialize};

use crate::dsp::{lfr_stack, mel_features, Waveform};
use crate::error::{Error, Result};
use crate::lm::{
    build_sequence, decode_autoregressive, task_spec, BuildInput, DecodeConfig, DecodeDiag,
    Modality, TargetTokens, Task, TokenKind,
};
use crate::tasks::metrics::Models;
use crate::vocoder::{synthesize, ConditionBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepSource {
    /// The chain's raw input.
    Raw,
    /// The previous step's output.
    Prev,
    /// Concatenation of every previous step's text output.
    PrevTextConcat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainStep {
    pub task: String,
    pub source: StepSource,
    /// Seed the generation with codec tokens of the raw input audio and
    /// condition synthesis on them (personalized synthesis).
    #[serde(default)]
    pub prompt_from_raw: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainPlan {
    pub name: String,
    pub steps: Vec<ChainStep>,
}

impl ChainPlan {
    /// Speech-to-speech translation: translate, then synthesize.
    pub fn s2st() -> ChainPlan {
        ChainPlan {
            name: "s2st".into(),
            steps: vec![
                ChainStep {
                    task: Task::S2tt.token_str().into(),
                    source: StepSource::Raw,
                    prompt_from_raw: false,
                },
                ChainStep {
                    task: Task::Tts.token_str().into(),
                    source: StepSource::Prev,
                    prompt_from_raw: false,
                },
            ],
        }
    }

    /// Enhance first, then recognize the enhanced audio.
    pub fn noise_robust_asr() -> ChainPlan {
        ChainPlan {
            name: "noise_robust_asr".into(),
            steps: vec![
                ChainStep {
                    task: Task::Se.token_str().into(),
                    source: StepSource::Raw,
                    prompt_from_raw: false,
                },
                ChainStep {
                    task: Task::Asr.token_str().into(),
                    source: StepSource::Prev,
                    prompt_from_raw: false,
                },
            ],
        }
    }

    /// Recognize and translate, then synthesize the bilingual text while
    /// prompting with the input speaker's codec tokens.
    pub fn personalized_tts() -> ChainPlan {
        ChainPlan {
            name: "personalized_tts".into(),
            steps: vec![
                ChainStep {
                    task: Task::Asr.token_str().into(),
                    source: StepSource::Raw,
                    prompt_from_raw: false,
                },
                ChainStep {
                    task: Task::S2tt.token_str().into(),
                    source: StepSource::Raw,
                    prompt_from_raw: false,
                },
                ChainStep {
                    task: Task::Tts.token_str().into(),
                    source: StepSource::PrevTextConcat,
                    prompt_from_raw: true,
                },
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<ChainPlan> {
        match name {
            "s2st" => Some(ChainPlan::s2st()),
            "noise_robust_asr" => Some(ChainPlan::noise_robust_asr()),
            "personalized_tts" => Some(ChainPlan::personalized_tts()),
            _ => None,
        }
    }

    pub const KNOWN: [&'static str; 3] = ["s2st", "noise_robust_asr", "personalized_tts"];
}

#[derive(Debug, Clone)]
pub enum ChainValue {
    Audio(Waveform),
    Text(String),
}

impl ChainValue {
    fn modality(&self) -> Modality {
        match self {
            ChainValue::Audio(_) => Modality::Audio,
            ChainValue::Text(_) => Modality::Text,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepArtifact {
    pub index: usize,
    pub task: Task,
    pub output: ChainValue,
    /// Decoded audio tokens when the step emitted audio.
    pub audio_codes: Option<Vec<u32>>,
    pub diag: DecodeDiag,
}

#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub plan: String,
    pub steps: Vec<StepArtifact>,
}

impl ChainOutcome {
    pub fn final_output(&self) -> &ChainValue {
        &self.steps.last().expect("plans are nonempty").output
    }
}

fn parse_task(step: usize, name: &str) -> Result<Task> {
    Task::from_name(name).ok_or_else(|| Error::ChainStep {
        step,
        task: name.to_string(),
        msg: "unknown task token".into(),
    })
}

/// Type-check modality compatibility before execution.
fn typecheck(plan: &ChainPlan, raw: Modality) -> Result<()> {
    if plan.steps.is_empty() {
        return Err(Error::InvalidArg(format!("plan '{}' has no steps", plan.name)));
    }
    let mut prev_out: Option<Modality> = None;
    for (i, step) in plan.steps.iter().enumerate() {
        let task = parse_task(i, &step.task)?;
        let spec = task_spec(task);
        let incoming = match step.source {
            StepSource::Raw => raw,
            StepSource::Prev => prev_out.ok_or_else(|| Error::ChainStep {
                step: i,
                task: step.task.clone(),
                msg: "no previous step output".into(),
            })?,
            StepSource::PrevTextConcat => Modality::Text,
        };
        if incoming != spec.input {
            return Err(Error::ChainStep {
                step: i,
                task: step.task.clone(),
                msg: format!(
                    "modality mismatch: step receives {:?} but task expects {:?}",
                    incoming, spec.input
                ),
            });
        }
        if step.prompt_from_raw && raw != Modality::Audio {
            return Err(Error::ChainStep {
                step: i,
                task: step.task.clone(),
                msg: "prompt_from_raw needs raw audio input".into(),
            });
        }
        prev_out = Some(spec.output);
    }
    Ok(())
}

fn text_tokens_of(value: &ChainValue, models: &Models) -> Vec<u32> {
    match value {
        ChainValue::Text(t) => models.lm.vocab.encode_text(t),
        ChainValue::Audio(_) => vec![],
    }
}

/// Execute a chain plan on a raw input.
pub fn chain_execute(
    plan: &ChainPlan,
    raw: &ChainValue,
    models: &Models,
    decode_cfg: &DecodeConfig,
) -> Result<ChainOutcome> {
    typecheck(plan, raw.modality())?;
    let lm = models.lm;
    let mut steps: Vec<StepArtifact> = Vec::with_capacity(plan.steps.len());
    for (i, step) in plan.steps.iter().enumerate() {
        let task = parse_task(i, &step.task)?;
        let spec = task_spec(task);
        let step_err = |msg: String| Error::ChainStep {
            step: i,
            task: step.task.clone(),
            msg,
        };
        let incoming: ChainValue = match step.source {
            StepSource::Raw => raw.clone(),
            StepSource::Prev => steps
                .last()
                .map(|s| s.output.clone())
                .ok_or_else(|| step_err("no previous output".into()))?,
            StepSource::PrevTextConcat => {
                let mut text = String::new();
                for s in &steps {
                    if let ChainValue::Text(t) = &s.output {
                        text.push_str(t);
                    }
                }
                ChainValue::Text(text)
            }
        };
        let input = match (&spec.input, &incoming) {
            (Modality::Audio, ChainValue::Audio(w)) => {
                BuildInput::Audio(mel_features(w).map_err(|e| step_err(e.to_string()))?)
            }
            (Modality::Text, ChainValue::Text(t)) => BuildInput::Text(lm.vocab.encode_text(t)),
            _ => return Err(step_err("modality mismatch at execution".into())),
        };
        // personalized synthesis: seed generation with the raw speaker's
        // codec tokens and hand them to the vocoder as a prompt
        let prompt_codes: Option<Vec<u32>> = if step.prompt_from_raw {
            let raw_audio = match raw {
                ChainValue::Audio(w) => w,
                _ => return Err(step_err("raw input is not audio".into())),
            };
            let codes = crate::codec::encode_codes(raw_audio, models.codec)
                .map_err(|e| step_err(e.to_string()))?;
            Some(codes.first_group())
        } else {
            None
        };
        let target = match spec.output {
            Modality::Text => TargetTokens::Text(vec![]),
            Modality::Audio => {
                TargetTokens::Audio(prompt_codes.clone().unwrap_or_default())
            }
        };
        let prefix = build_sequence(&spec, input, target, &lm.vocab, lm.cfg.lfr_factor)
            .map_err(|e| step_err(e.to_string()))?;
        let (tokens, diag) =
            decode_autoregressive(&prefix, lm, decode_cfg).map_err(|e| step_err(e.to_string()))?;
        let artifact = match spec.output {
            Modality::Text => {
                let locals: Vec<u32> = tokens
                    .iter()
                    .filter_map(|&t| match lm.vocab.classify(t) {
                        Ok(TokenKind::Text(l)) => Some(l),
                        _ => None,
                    })
                    .collect();
                StepArtifact {
                    index: i,
                    task,
                    output: ChainValue::Text(lm.vocab.decode_text(&locals)),
                    audio_codes: None,
                    diag,
                }
            }
            Modality::Audio => {
                let mut codes: Vec<u32> = prompt_codes.unwrap_or_default();
                codes.extend(tokens.iter().filter_map(|&t| match lm.vocab.classify(t) {
                    Ok(TokenKind::Audio(c)) => Some(c),
                    _ => None,
                }));
                if codes.is_empty() {
                    return Err(step_err("no audio tokens decoded".into()));
                }
                let cond = match task {
                    Task::Se => {
                        let noisy = match &incoming {
                            ChainValue::Audio(w) => w,
                            _ => unreachable!("typechecked"),
                        };
                        ConditionBundle::Se {
                            feats: lfr_stack(
                                &mel_features(noisy).map_err(|e| step_err(e.to_string()))?,
                                lm.cfg.lfr_factor,
                            )
                            .map_err(|e| step_err(e.to_string()))?,
                        }
                    }
                    Task::Tts => {
                        let prompt = match step.prompt_from_raw {
                            true => {
                                let raw_audio = match raw {
                                    ChainValue::Audio(w) => w,
                                    _ => unreachable!("typechecked"),
                                };
                                let latents =
                                    crate::codec::encode_latents(raw_audio, models.codec)
                                        .map_err(|e| step_err(e.to_string()))?;
                                let q = crate::codec::rvq_quantize(
                                    &latents,
                                    models.codec.cfg.num_quantizers,
                                    &models.codec.codebooks,
                                )
                                .map_err(|e| step_err(e.to_string()))?;
                                Some(q.sum_embedding)
                            }
                            false => None,
                        };
                        ConditionBundle::Tts {
                            text: text_tokens_of(&incoming, models),
                            prompt,
                        }
                    }
                    _ => ConditionBundle::None,
                };
                let vocoder = models
                    .vocoder
                    .ok_or_else(|| step_err("audio-output step needs a vocoder".into()))?;
                let wave = synthesize(&codes, &cond, models.codec, vocoder)
                    .map_err(|e| step_err(e.to_string()))?;
                StepArtifact {
                    index: i,
                    task,
                    output: ChainValue::Audio(wave),
                    audio_codes: Some(codes),
                    diag,
                }
            }
        };
        steps.push(artifact);
    }
    Ok(ChainOutcome {
        plan: plan.name.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_plans_typecheck_on_audio() {
        for name in ChainPlan::KNOWN {
            let plan = ChainPlan::by_name(name).unwrap();
            typecheck(&plan, Modality::Audio).unwrap();
        }
        assert!(ChainPlan::by_name("nope").is_none());
    }

    #[test]
    fn ill_typed_plan_rejected_before_execution() {
        // TTS expects text input; feeding it raw audio must fail the check
        let plan = ChainPlan {
            name: "bad".into(),
            steps: vec![ChainStep {
                task: "<TTS>".into(),
                source: StepSource::Raw,
                prompt_from_raw: false,
            }],
        };
        let err = typecheck(&plan, Modality::Audio).unwrap_err();
        match err {
            Error::ChainStep { step, .. } => assert_eq!(step, 0),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn chained_modalities_flow() {
        // s2st: audio → text (S2TT) → audio (TTS): internal handoff typechecks
        let plan = ChainPlan::s2st();
        typecheck(&plan, Modality::Audio).unwrap();
        // but raw text input fails at step 0 (S2TT wants audio)
        assert!(typecheck(&plan, Modality::Text).is_err());
    }
}
