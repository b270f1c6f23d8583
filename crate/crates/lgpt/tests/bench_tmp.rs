use lgpt::cli::{run_codec_training, run_multistep_training, run_vocoder_training, vocoder_items};
use lgpt::config::Config;
use lgpt::tasks::logmel_distance;
use lgpt::vocoder::{multistep_baseline, synthesize};
use lgpt::codec::{rvq_dequantize, decode_waveform};

#[test]
#[ignore]
fn vocoder_diag() {
    let mut cfg = Config::default();
    cfg.tasks.train_per_task = 400;   // vocoder corpus = 100/task here
    cfg.tasks.codec_train_clips = 64;
    cfg.tasks.codec_heldout_clips = 8;
    let codec = run_codec_training(&cfg, 400, None).unwrap().trainer.state;
    eprintln!("codec done");
    // conditioned vs unconditioned, 700 steps
    for conditioned in [true, false] {
        let run = run_vocoder_training(&cfg, &codec, 700, 11, conditioned).unwrap();
        eprintln!(
            "cond={} step0 {:.2} final {:.2} ratio {:.3}",
            conditioned,
            run.report.losses[0],
            lgpt::cli::final_loss(&run.report.losses),
            run.report.metric("loss_ratio").unwrap()
        );
        if conditioned {
            // held-out logmel: one-step vs full-codec roundtrip vs multistep
            let eval_items = vocoder_items(&cfg, &codec, 11, true, 10, true).unwrap();
            let (ms, _) = run_multistep_training(&cfg, &codec, 700, 11).unwrap();
            let mut one_acc = 0.0; let mut full_acc = 0.0; let mut ms_acc = 0.0;
            for item in &eval_items {
                let full_emb = &item.truth;
                let reference = decode_waveform(full_emb, &codec).unwrap();
                let one = synthesize(&item.codes, &item.cond, &codec, &run.trainer.state).unwrap();
                one_acc += logmel_distance(&reference, &one).unwrap();
                let codes = multistep_baseline(&item.codes, &ms.state, &codec).unwrap();
                let emb = rvq_dequantize(&codes, codes.groups(), &codec.codebooks).unwrap();
                let msw = decode_waveform(&emb, &codec).unwrap();
                ms_acc += logmel_distance(&reference, &msw).unwrap();
                full_acc += 0.0; // reference is the full-codec reconstruction itself
            }
            let n = eval_items.len() as f64;
            eprintln!("one-step logmel {:.4} multi-step logmel {:.4} (n={}) full {:.4}", one_acc/n, ms_acc/n, n, full_acc/n);
        }
    }
}
