//! Operator surface: train/eval/convert commands plus the training
//! harnesses they share with the acceptance suite. Every run is
//! reproducible from (config, seed, checkpoints); reports embed the
//! config hash and land atomically in the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    decode_waveform, encode_codes, encode_latents, rvq_dequantize, rvq_quantize, CodeFrameSeq,
    CodecState, CodecTrainer,
};
use crate::config::Config;
use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::lm::{LmState, LmTrainer, Task, UnifiedVocab};
use crate::numerics::{checkpoint, Optimizer, Tensor};
use crate::report::{write_atomic, RunReport};
use crate::tasks::{
    chain_execute, evaluate, gen_pair, gen_split_corpus, pair_to_sequence_with_codes, snr_db,
    write_manifest, ChainPlan, ChainValue, CorpusPair, Models, PairData, TaskMetrics,
};
use crate::vocoder::{
    ConditionBundle, MultiStepState, MultiStepTrainer, VocoderBatchItem, VocoderState,
    VocoderTrainer,
};

// Distinct corpus seed streams per consumer, derived from the run seed.
fn codec_corpus_seed(seed: u64) -> u64 {
    seed ^ 0x636f_6465
}
fn lm_corpus_seed(seed: u64) -> u64 {
    seed ^ 0x6c6d_5f63
}
fn vocoder_corpus_seed(seed: u64) -> u64 {
    seed ^ 0x766f_635f
}

/// Mean of the last tenth of a loss log (at least one entry); the "final
/// loss" statistic reported for ratio checks.
pub fn final_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let k = (losses.len() / 10).max(1);
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

// ---------------------------------------------------------------------------
// codec training

/// One-second tone clips for codec training (train + held-out, disjoint).
pub fn codec_clips(cfg: &Config, seed: u64) -> Result<(Vec<Waveform>, Vec<Waveform>)> {
    let mut spec = cfg.corpus_spec();
    // fixed-duration clips: symbols fill exactly one second
    let per_second = (1000 / cfg.tasks.symbol_ms).max(1);
    spec.min_symbols = per_second;
    spec.max_symbols = per_second;
    let (train, heldout) = gen_split_corpus(
        &spec,
        Task::Asr,
        cfg.tasks.codec_train_clips,
        cfg.tasks.codec_heldout_clips,
        codec_corpus_seed(seed),
    )?;
    let audio = |pairs: Vec<CorpusPair>| {
        pairs
            .into_iter()
            .map(|p| match p.input {
                PairData::Audio(w) => w,
                _ => unreachable!("tone corpus"),
            })
            .collect()
    };
    Ok((audio(train), audio(heldout)))
}

/// Encode → quantize n groups → decode.
pub fn reconstruct_with_n(w: &Waveform, n: usize, state: &CodecState) -> Result<Waveform> {
    let latents = encode_latents(w, state)?;
    let q = rvq_quantize(&latents, n, &state.codebooks)?;
    let emb = rvq_dequantize(&q.codes, n, &state.codebooks)?;
    decode_waveform(&emb, state)
}

/// Round-trip SNR against the frame-padded input.
pub fn roundtrip_snr(w: &Waveform, n: usize, state: &CodecState) -> Result<f64> {
    let recon = reconstruct_with_n(w, n, state)?;
    let padded = Waveform::new(crate::codec::pad_to_frames(w, &state.cfg), w.sample_rate)?;
    snr_db(&padded, &recon)
}

pub struct CodecRun {
    pub trainer: CodecTrainer,
    pub report: RunReport,
    pub heldout: Vec<Waveform>,
}

pub fn run_codec_training(
    cfg: &Config,
    steps: u64,
    resume: Option<(CodecState, Optimizer)>,
) -> Result<CodecRun> {
    let seed = cfg.effective_seed();
    let (clips, heldout) = codec_clips(cfg, seed)?;
    let mut trainer = match resume {
        Some((state, opt)) => {
            let mut t = CodecTrainer::new(state, cfg.adam(cfg.codec.lr), seed ^ 0xA11);
            t.opt = opt;
            t
        }
        None => CodecTrainer::new(
            CodecState::new(cfg.codec_config(), seed)?,
            cfg.adam(cfg.codec.lr),
            seed ^ 0xA11,
        ),
    };
    let mut report = RunReport::new("train codec", cfg.hash(), seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB22);
    let mut cursor = clips.len(); // force a shuffle on first use
    let bs = cfg.codec.batch_size.max(1);
    if steps == 0 {
        // log the initial loss without touching the parameters
        let mut probe = CodecTrainer::new(
            trainer.state.clone(),
            cfg.adam(cfg.codec.lr),
            seed ^ 0xA11,
        );
        let batch: Vec<(usize, &Waveform)> =
            order.iter().take(bs).map(|&i| (i, &clips[i])).collect();
        report.losses.push(probe.step(&batch)?.total);
    }
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<(usize, &Waveform)> = batch.into_iter().map(|i| (i, &clips[i])).collect();
        let step = trainer.step(&batch)?;
        report.losses.push(step.total);
    }
    let step0 = report.losses.first().copied().unwrap_or(f64::NAN);
    let fin = final_loss(&report.losses);
    report.set_metric("step0_loss", step0);
    report.set_metric("final_loss", fin);
    report.set_metric("loss_ratio", fin / step0);
    // held-out round-trip SNR at increasing quantizer depth
    let q = trainer.state.cfg.num_quantizers;
    let ns: Vec<usize> = [1usize, 8, 32].into_iter().filter(|&n| n <= q).collect();
    let mut snrs = Vec::new();
    for &n in &ns {
        let mut acc = 0.0;
        for clip in &heldout {
            acc += roundtrip_snr(clip, n, &trainer.state)?;
        }
        let mean = acc / heldout.len().max(1) as f64;
        report.set_metric(&format!("snr_n{}", n), mean);
        snrs.push(mean);
    }
    let monotone = snrs.windows(2).all(|w| w[1] >= w[0] - 0.1);
    report.set_metric("snr_monotone", monotone);
    Ok(CodecRun {
        trainer,
        report,
        heldout,
    })
}

// ---------------------------------------------------------------------------
// LM training

/// Training item regenerable from (task, seed, index); audio-target items
/// carry their cached first-group codes.
#[derive(Debug, Clone)]
pub struct LmItem {
    pub task: Task,
    pub seed: u64,
    pub index: usize,
    pub first_codes: Option<Vec<u32>>,
}

pub struct LmCorpus {
    pub items: Vec<LmItem>,
    pub spec: crate::tasks::SyntheticCorpusSpec,
}

impl LmCorpus {
    pub fn pair(&self, item: &LmItem) -> Result<CorpusPair> {
        gen_pair(&self.spec, item.task, item.seed, item.index)
    }
}

/// Task roster with per-task-token training counts: ASR/S2TT/TTS/SE get the
/// full quota; the classification quota splits across SLU/SER/AAC.
pub fn task_roster(per_task: usize) -> Vec<(Task, usize)> {
    let third = per_task / 3;
    vec![
        (Task::Asr, per_task),
        (Task::S2tt, per_task),
        (Task::Tts, per_task),
        (Task::Se, per_task),
        (Task::Slu, third),
        (Task::Ser, third),
        (Task::Aac, per_task - 2 * third),
    ]
}

/// Build the multi-task training corpus; audio targets are tokenized once
/// through the frozen codec (first group only, by prefix consistency).
pub fn build_lm_corpus(cfg: &Config, codec: &CodecState, seed: u64) -> Result<LmCorpus> {
    let spec = cfg.corpus_spec();
    let corpus_seed = lm_corpus_seed(seed);
    let mut items = Vec::new();
    for (task, quota) in task_roster(cfg.tasks.train_per_task) {
        let mut filled = 0usize;
        let mut index = 0usize;
        while filled < quota {
            let pair = gen_pair(&spec, task, corpus_seed, index)?;
            if crate::tasks::split_of(&pair.id) == crate::tasks::Split::Train {
                let first_codes = match &pair.target {
                    PairData::Audio(w) => {
                        let latents = encode_latents(w, codec)?;
                        Some(rvq_quantize(&latents, 1, &codec.codebooks)?.codes.first_group())
                    }
                    _ => None,
                };
                items.push(LmItem {
                    task,
                    seed: corpus_seed,
                    index,
                    first_codes,
                });
                filled += 1;
            }
            index += 1;
        }
    }
    Ok(LmCorpus { items, spec })
}

/// Held-out eval pairs per task token.
pub fn lm_eval_sets(cfg: &Config, seed: u64) -> Result<Vec<(Task, Vec<CorpusPair>)>> {
    let spec = cfg.corpus_spec();
    let corpus_seed = lm_corpus_seed(seed);
    let per_eval = cfg.tasks.eval_per_task;
    let mut out = Vec::new();
    for (task, quota) in task_roster(per_eval) {
        let quota = quota.max(1);
        let (_, eval) = gen_split_corpus(&spec, task, 0, quota, corpus_seed)?;
        out.push((task, eval));
    }
    let _ = per_eval;
    Ok(out)
}

pub struct LmRun {
    pub trainer: LmTrainer,
    pub report: RunReport,
}

pub fn run_lm_training(
    cfg: &Config,
    codec: &CodecState,
    steps: u64,
    resume: Option<(LmState, Optimizer)>,
) -> Result<LmRun> {
    let seed = cfg.effective_seed();
    let corpus = build_lm_corpus(cfg, codec, seed)?;
    let vocab = UnifiedVocab::new(codec.cfg.codebook_size);
    let mut trainer = match resume {
        Some((state, opt)) => {
            let mut t = LmTrainer::new(state, cfg.adam(cfg.lm.lr));
            t.opt = opt;
            t
        }
        None => LmTrainer::new(LmState::new(cfg.lm_config(), vocab, seed)?, cfg.adam(cfg.lm.lr)),
    };
    let mut report = RunReport::new("train lm", cfg.hash(), seed);
    let mut order: Vec<usize> = (0..corpus.items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC33);
    let mut cursor = corpus.items.len();
    let bs = cfg.lm.batch_size.max(1);
    let make_batch = |idxs: &[usize], corpus: &LmCorpus, trainer: &LmTrainer| -> Result<Vec<_>> {
        idxs.iter()
            .map(|&i| {
                let item = &corpus.items[i];
                let pair = corpus.pair(item)?;
                pair_to_sequence_with_codes(
                    &pair,
                    item.first_codes.as_deref(),
                    codec,
                    &trainer.state,
                )
            })
            .collect()
    };
    if steps == 0 {
        let idxs: Vec<usize> = order.iter().take(bs).copied().collect();
        let batch = make_batch(&idxs, &corpus, &trainer)?;
        let mut probe = LmTrainer::new(trainer.state.clone(), cfg.adam(cfg.lm.lr));
        report.losses.push(probe.step(&batch)?.loss);
    }
    for _ in 0..steps {
        let mut idxs = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idxs.push(order[cursor]);
            cursor += 1;
        }
        let batch = make_batch(&idxs, &corpus, &trainer)?;
        report.losses.push(trainer.step(&batch)?.loss);
    }
    report.set_metric(
        "step0_loss",
        report.losses.first().copied().unwrap_or(f64::NAN),
    );
    report.set_metric("final_loss", final_loss(&report.losses));
    Ok(LmRun { trainer, report })
}

// ---------------------------------------------------------------------------
// vocoder training

/// Items from the synthesis and enhancement corpora. The regression truth
/// is always the full-depth summed embedding of the clean reference audio.
/// Synthesis items carry clean-audio tokens plus the text condition;
/// enhancement items carry tokens of the NOISY input plus noisy-feature
/// conditions, so the predictor learns to restore detail the tokens lack.
pub fn vocoder_items(
    cfg: &Config,
    codec: &CodecState,
    seed: u64,
    conditioned: bool,
    per_task: usize,
    eval: bool,
) -> Result<Vec<VocoderBatchItem>> {
    let spec = cfg.corpus_spec();
    let corpus_seed = vocoder_corpus_seed(seed);
    let mut items = Vec::new();
    for task in [Task::Tts, Task::Se] {
        let (train, heldout) = gen_split_corpus(
            &spec,
            task,
            if eval { 0 } else { per_task },
            if eval { per_task } else { 0 },
            corpus_seed,
        )?;
        let pairs = if eval { heldout } else { train };
        for pair in pairs {
            items.push(vocoder_item_for(&pair, cfg, codec, conditioned)?);
        }
    }
    Ok(items)
}

/// Build one predictor training/eval item from a synthesis or enhancement
/// pair.
pub fn vocoder_item_for(
    pair: &CorpusPair,
    cfg: &Config,
    codec: &CodecState,
    conditioned: bool,
) -> Result<VocoderBatchItem> {
    let clean = match &pair.target {
        PairData::Audio(w) => w,
        _ => {
            return Err(Error::InvalidArg(format!(
                "pair {} has no audio target",
                pair.id
            )))
        }
    };
    let clean_latents = encode_latents(clean, codec)?;
    let q = rvq_quantize(&clean_latents, codec.cfg.num_quantizers, &codec.codebooks)?;
    let truth = rvq_dequantize(&q.codes, codec.cfg.num_quantizers, &codec.codebooks)?;
    // enhancement pairs tokenize the noisy input; the clean detail must
    // come from the conditions
    let codes = match (&pair.task, &pair.input) {
        (Task::Se, PairData::Audio(noisy)) => {
            let noisy_latents = encode_latents(noisy, codec)?;
            rvq_quantize(&noisy_latents, 1, &codec.codebooks)?
                .codes
                .first_group()
        }
        _ => q.codes.first_group(),
    };
    let cond = if conditioned {
        crate::tasks::condition_for_spec(pair, cfg.dsp.lfr)?
    } else {
        ConditionBundle::None
    };
    Ok(VocoderBatchItem { codes, cond, truth })
}

pub struct VocoderRun {
    pub trainer: VocoderTrainer,
    pub report: RunReport,
}

pub fn run_vocoder_training(
    cfg: &Config,
    codec: &CodecState,
    steps: u64,
    seed: u64,
    conditioned: bool,
) -> Result<VocoderRun> {
    let per_task = (cfg.tasks.train_per_task / 4).max(64);
    let items = vocoder_items(cfg, codec, seed, conditioned, per_task, false)?;
    let mut trainer = VocoderTrainer::new(
        VocoderState::new(cfg.predictor_config(), seed)?,
        cfg.adam(cfg.vocoder.lr),
    );
    let mut report = RunReport::new("train vocoder", cfg.hash(), seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD44);
    let mut cursor = items.len();
    let bs = cfg.vocoder.batch_size.max(1);
    if steps == 0 {
        let batch: Vec<VocoderBatchItem> =
            order.iter().take(bs).map(|&i| items[i].clone()).collect();
        report.losses.push(trainer.eval(&batch, codec)?);
    }
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(items[order[cursor]].clone());
            cursor += 1;
        }
        report.losses.push(trainer.step(&batch, codec)?.l_pre);
    }
    report.set_metric(
        "step0_loss",
        report.losses.first().copied().unwrap_or(f64::NAN),
    );
    report.set_metric("final_loss", final_loss(&report.losses));
    report.set_metric(
        "loss_ratio",
        final_loss(&report.losses) / report.losses.first().copied().unwrap_or(f64::NAN),
    );
    Ok(VocoderRun { trainer, report })
}

/// Train the multi-step classification baseline on the same corpora.
pub fn run_multistep_training(
    cfg: &Config,
    codec: &CodecState,
    steps: u64,
    seed: u64,
) -> Result<(MultiStepTrainer, RunReport)> {
    let per_task = (cfg.tasks.train_per_task / 4).max(64);
    let spec = cfg.corpus_spec();
    let corpus_seed = vocoder_corpus_seed(seed);
    let mut code_sets: Vec<CodeFrameSeq> = Vec::new();
    for task in [Task::Tts, Task::Se] {
        let (train, _) = gen_split_corpus(&spec, task, per_task, 0, corpus_seed)?;
        for pair in train {
            let clean = match &pair.target {
                PairData::Audio(w) => w,
                _ => unreachable!(),
            };
            code_sets.push(encode_codes(clean, codec)?);
        }
    }
    let mut trainer = MultiStepTrainer::new(
        MultiStepState::new(
            cfg.predictor_config(),
            codec.cfg.num_quantizers,
            codec.cfg.codebook_size,
            seed,
        )?,
        cfg.adam(cfg.vocoder.lr),
        seed ^ 0xE55,
    );
    let mut report = RunReport::new("train multistep", cfg.hash(), seed);
    let mut order: Vec<usize> = (0..code_sets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF66);
    let mut cursor = code_sets.len();
    let bs = cfg.vocoder.batch_size.max(1);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&code_sets[order[cursor]]);
            cursor += 1;
        }
        report.losses.push(trainer.step(&batch, codec)?.ce);
    }
    report.set_metric("final_loss", final_loss(&report.losses));
    Ok((trainer, report))
}

// ---------------------------------------------------------------------------
// checkpoint helpers

pub fn save_checkpoint_with_opt(
    path: &Path,
    tensors: BTreeMap<String, Tensor>,
    opt: &Optimizer,
) -> Result<()> {
    let mut all = tensors;
    all.extend(opt.state_tensors());
    checkpoint::save(path, &all)
}

pub fn split_opt_tensors(
    all: BTreeMap<String, Tensor>,
) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let (opt, model): (BTreeMap<_, _>, BTreeMap<_, _>) =
        all.into_iter().partition(|(k, _)| k.starts_with("opt."));
    (model, opt)
}

pub fn load_codec(path: &Path, cfg: &Config) -> Result<CodecState> {
    let (model, _) = split_opt_tensors(checkpoint::load(path)?);
    CodecState::from_tensors(cfg.codec_config(), &model)
}

pub fn load_lm(path: &Path, cfg: &Config) -> Result<LmState> {
    let (model, _) = split_opt_tensors(checkpoint::load(path)?);
    let vocab = UnifiedVocab::new(cfg.codec.codebook_size);
    LmState::from_tensors(cfg.lm_config(), vocab, &model)
}

pub fn load_vocoder(path: &Path, cfg: &Config) -> Result<VocoderState> {
    let (model, _) = split_opt_tensors(checkpoint::load(path)?);
    let mut state = VocoderState::new(cfg.predictor_config(), 0)?;
    for (k, v) in model {
        if state.params.contains_key(&k) {
            state.params.insert(k, v);
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// commands

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub component: String,
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub steps: Option<u64>,
    pub codec_ckpt: Option<PathBuf>,
    pub resume: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunReport> {
    let cfg = Config::load(&args.config)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_atomic(
        &args.out_dir.join("config.resolved.cfg"),
        cfg.resolved_text().as_bytes(),
    )?;
    let ckpt_path = args.out_dir.join("checkpoint.ckpt");
    let started = Instant::now();
    let mut report = match args.component.as_str() {
        "codec" => {
            let steps = args.steps.unwrap_or(cfg.codec.steps);
            let resume = if args.resume {
                let (model, opt_t) = split_opt_tensors(checkpoint::load(&ckpt_path)?);
                let state = CodecState::from_tensors(cfg.codec_config(), &model)?;
                let mut opt = Optimizer::new(cfg.adam(cfg.codec.lr));
                opt.restore_state(&opt_t);
                Some((state, opt))
            } else {
                None
            };
            let run = run_codec_training(&cfg, steps, resume)?;
            save_checkpoint_with_opt(&ckpt_path, run.trainer.state.to_tensors(), &run.trainer.opt)?;
            run.report
        }
        "lm" => {
            let codec_path = args.codec_ckpt.as_ref().ok_or_else(|| {
                Error::InvalidArg("train lm requires --codec <checkpoint>".into())
            })?;
            let codec = load_codec(codec_path, &cfg)?;
            let steps = args.steps.unwrap_or(cfg.lm.steps);
            let resume = if args.resume {
                let (model, opt_t) = split_opt_tensors(checkpoint::load(&ckpt_path)?);
                let vocab = UnifiedVocab::new(cfg.codec.codebook_size);
                let state = LmState::from_tensors(cfg.lm_config(), vocab, &model)?;
                let mut opt = Optimizer::new(cfg.adam(cfg.lm.lr));
                opt.restore_state(&opt_t);
                Some((state, opt))
            } else {
                None
            };
            let run = run_lm_training(&cfg, &codec, steps, resume)?;
            save_checkpoint_with_opt(&ckpt_path, run.trainer.state.to_tensors(), &run.trainer.opt)?;
            run.report
        }
        "vocoder" => {
            let codec_path = args.codec_ckpt.as_ref().ok_or_else(|| {
                Error::InvalidArg("train vocoder requires --codec <checkpoint>".into())
            })?;
            let codec = load_codec(codec_path, &cfg)?;
            let steps = args.steps.unwrap_or(cfg.vocoder.steps);
            let run = run_vocoder_training(&cfg, &codec, steps, cfg.effective_seed(), true)?;
            save_checkpoint_with_opt(
                &ckpt_path,
                run.trainer.state.params.clone(),
                &run.trainer.opt,
            )?;
            run.report
        }
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown component '{}': expected codec|lm|vocoder",
                other
            )))
        }
    };
    report.wall_time_secs = started.elapsed().as_secs_f64();
    report.write(&args.out_dir.join("report.json"))?;
    Ok(report)
}

/// Parse "metric>=0.9"-style assertions.
pub fn parse_assertion(expr: &str) -> Result<(String, String, f64)> {
    for op in [">=", "<=", "==", ">", "<"] {
        if let Some((lhs, rhs)) = expr.split_once(op) {
            let value: f64 = rhs.trim().parse().map_err(|_| {
                Error::InvalidArg(format!("bad assertion value in '{}'", expr))
            })?;
            return Ok((lhs.trim().to_string(), op.to_string(), value));
        }
    }
    Err(Error::InvalidArg(format!(
        "bad assertion '{}': expected metric OP value",
        expr
    )))
}

pub fn check_assertion(metrics: &TaskMetrics, expr: &str) -> Result<()> {
    let (key, op, want) = parse_assertion(expr)?;
    let got = metrics
        .lookup(&key)
        .ok_or_else(|| Error::InvalidArg(format!("unknown metric '{}'", key)))?;
    let pass = match op.as_str() {
        ">=" => got >= want,
        "<=" => got <= want,
        ">" => got > want,
        "<" => got < want,
        _ => got == want,
    };
    if pass {
        Ok(())
    } else {
        Err(Error::Assertion(format!(
            "{} = {} violates '{}'",
            key, got, expr
        )))
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub task: String,
    pub config: PathBuf,
    pub codec_ckpt: PathBuf,
    pub lm_ckpt: PathBuf,
    pub vocoder_ckpt: Option<PathBuf>,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub asserts: Vec<String>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<TaskMetrics> {
    let cfg = Config::load(&args.config)?;
    let task = Task::from_name(&args.task)
        .ok_or_else(|| Error::InvalidArg(format!("unknown task '{}'", args.task)))?;
    let codec = load_codec(&args.codec_ckpt, &cfg)?;
    let lm = load_lm(&args.lm_ckpt, &cfg)?;
    let vocoder = match &args.vocoder_ckpt {
        Some(p) => Some(load_vocoder(p, &cfg)?),
        None => None,
    };
    let pairs = crate::tasks::read_manifest(&args.manifest, Some(&codec))?;
    let pairs: Vec<CorpusPair> = pairs.into_iter().filter(|p| p.task == task).collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArg(format!(
            "manifest holds no {:?} pairs",
            task
        )));
    }
    let models = Models {
        lm: &lm,
        codec: &codec,
        vocoder: vocoder.as_ref(),
    };
    let metrics = evaluate(task, &models, &pairs, &cfg.decode_config(true))?;
    std::fs::create_dir_all(&args.out_dir)?;
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::InvalidArg(format!("metric serialization: {}", e)))?;
    write_atomic(&args.out_dir.join("metrics.json"), json.as_bytes())?;
    println!("{}", json);
    for expr in &args.asserts {
        check_assertion(&metrics, expr)?;
    }
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct RoundtripArgs {
    pub config: PathBuf,
    pub codec_ckpt: PathBuf,
    pub wav_in: PathBuf,
    pub wav_out: PathBuf,
    pub quantizers: Vec<usize>,
}

pub fn cmd_codec_roundtrip(args: &RoundtripArgs) -> Result<serde_json::Value> {
    let cfg = Config::load(&args.config)?;
    let codec = load_codec(&args.codec_ckpt, &cfg)?;
    let w = read_wav(&args.wav_in)?;
    if w.is_empty() {
        return Err(Error::InvalidArg("input audio is empty".into()));
    }
    if args.quantizers.is_empty() {
        return Err(Error::InvalidArg("need at least one quantizer count".into()));
    }
    let stem = args
        .wav_out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "roundtrip".into());
    let dir = args.wav_out.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&dir)?;
    let mut snrs = serde_json::Map::new();
    let mut seq = Vec::new();
    for &n in &args.quantizers {
        if n == 0 || n > codec.cfg.num_quantizers {
            return Err(Error::InvalidArg(format!(
                "quantizer count {} out of range 1..={}",
                n, codec.cfg.num_quantizers
            )));
        }
        let recon = reconstruct_with_n(&w, n, &codec)?;
        let out = dir.join(format!("{}_n{}.wav", stem, n));
        write_wav(&out, &recon)?;
        let snr = roundtrip_snr(&w, n, &codec)?;
        snrs.insert(format!("n{}", n), serde_json::json!(snr));
        seq.push(snr);
    }
    let monotone = seq.windows(2).all(|p| p[1] >= p[0] - 0.1);
    let report = serde_json::json!({
        "input": args.wav_in.to_string_lossy(),
        "samples": w.len(),
        "output_samples": 640 * w.len().div_ceil(codec.cfg.frame_samples()),
        "snr_db": serde_json::Value::Object(snrs),
        "snr_monotone": monotone,
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ChainArgs {
    pub plan: String,
    pub config: PathBuf,
    pub codec_ckpt: PathBuf,
    pub lm_ckpt: PathBuf,
    pub vocoder_ckpt: PathBuf,
    pub wav_in: PathBuf,
    pub out_dir: PathBuf,
}

pub fn cmd_chain(args: &ChainArgs) -> Result<()> {
    let cfg = Config::load(&args.config)?;
    let plan = ChainPlan::by_name(&args.plan).ok_or_else(|| {
        Error::InvalidArg(format!(
            "unknown plan '{}': valid plans are {}",
            args.plan,
            ChainPlan::KNOWN.join(", ")
        ))
    })?;
    let codec = load_codec(&args.codec_ckpt, &cfg)?;
    let lm = load_lm(&args.lm_ckpt, &cfg)?;
    let vocoder = load_vocoder(&args.vocoder_ckpt, &cfg)?;
    let w = read_wav(&args.wav_in)?;
    let models = Models {
        lm: &lm,
        codec: &codec,
        vocoder: Some(&vocoder),
    };
    let outcome = chain_execute(
        &plan,
        &ChainValue::Audio(w),
        &models,
        &cfg.decode_config(true),
    )?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut step_reports = Vec::new();
    for step in &outcome.steps {
        let tag = format!(
            "step{}_{}",
            step.index,
            step.task.token_str().trim_matches(['<', '>']).to_lowercase()
        );
        match &step.output {
            ChainValue::Text(t) => {
                write_atomic(&args.out_dir.join(format!("{}.txt", tag)), t.as_bytes())?;
            }
            ChainValue::Audio(w) => {
                write_wav(&args.out_dir.join(format!("{}.wav", tag)), w)?;
            }
        }
        if let Some(codes) = &step.audio_codes {
            let seq = CodeFrameSeq::new(
                codes.clone(),
                codes.len(),
                1,
                codec.cfg.codebook_size,
            )?;
            crate::codec::write_codes_text(&args.out_dir.join(format!("{}.codes", tag)), &seq)?;
        }
        step_reports.push(serde_json::json!({
            "step": step.index,
            "task": step.task.token_str(),
            "looped": step.diag.looped,
            "decoded_len": step.diag.length,
        }));
    }
    let report = serde_json::json!({ "plan": outcome.plan, "steps": step_reports });
    write_atomic(
        &args.out_dir.join("chain_report.json"),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenCorpusArgs {
    pub config: PathBuf,
    pub task: String,
    pub count: usize,
    pub split: String,
    pub out_dir: PathBuf,
    pub codec_ckpt: Option<PathBuf>,
}

pub fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<PathBuf> {
    let cfg = Config::load(&args.config)?;
    let task = Task::from_name(&args.task)
        .ok_or_else(|| Error::InvalidArg(format!("unknown task '{}'", args.task)))?;
    let spec = cfg.corpus_spec();
    let seed = lm_corpus_seed(cfg.effective_seed());
    let (train, eval) = match args.split.as_str() {
        "train" => gen_split_corpus(&spec, task, args.count, 0, seed)?,
        "eval" => gen_split_corpus(&spec, task, 0, args.count, seed)?,
        other => {
            return Err(Error::InvalidArg(format!(
                "split must be train|eval, got '{}'",
                other
            )))
        }
    };
    let pairs = if args.split == "train" { train } else { eval };
    let codec = match &args.codec_ckpt {
        Some(p) => Some(load_codec(p, &cfg)?),
        None => None,
    };
    write_manifest(&args.out_dir, &pairs, codec.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assertion_parsing() {
        assert_eq!(
            parse_assertion("token_acc>=0.9").unwrap(),
            ("token_acc".into(), ">=".into(), 0.9)
        );
        assert_eq!(
            parse_assertion("loop_ratio <= 0.05").unwrap(),
            ("loop_ratio".into(), "<=".into(), 0.05)
        );
        assert!(parse_assertion("nonsense").is_err());
    }

    #[test]
    fn task_roster_quotas() {
        let roster = task_roster(2000);
        let total: usize = roster
            .iter()
            .filter(|(t, _)| matches!(t, Task::Slu | Task::Ser | Task::Aac))
            .map(|(_, n)| n)
            .sum();
        assert_eq!(total, 2000);
        assert_eq!(roster.len(), 7);
    }

    #[test]
    fn final_loss_uses_last_tenth() {
        let mut losses = vec![10.0; 90];
        losses.extend(vec![1.0; 10]);
        assert!((final_loss(&losses) - 1.0).abs() < 1e-12);
        assert!((final_loss(&[5.0]) - 5.0).abs() < 1e-12);
    }
}
