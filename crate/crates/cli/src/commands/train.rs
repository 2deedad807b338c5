use std::path::Path;

use anyhow::anyhow;
use histopair::cliptrain::{
    objective, retrieval_eval, train_two_stage, write_checkpoint, PairedFeatures, StageSchedule, TrainState,
};
use histopair::evaluation::ResultsHeader;
use histopair::digest::derive_seed;
use histopair::synth::CorrelatedTask;
use histopair::vectors::read_embeddings;
use serde::Serialize;

use super::{write_jsonl, Ctx};
use crate::config::TrainConfig;
use crate::exit::{CmdResult, Failure};

struct Sources {
    stage1: PairedFeatures,
    stage2: PairedFeatures,
    heldout: PairedFeatures,
}

fn load_pair(images: Option<&Path>, texts: Option<&Path>, what: &str) -> CmdResult<PairedFeatures> {
    let (Some(i), Some(t)) = (images, texts) else {
        return Err(Failure::usage(anyhow!("train.source = \"files\" needs {what}_images and {what}_texts")));
    };
    let read = |p: &Path| read_embeddings(p).map_err(|e| Failure::input(e).context(format!("{}", p.display())));
    Ok(PairedFeatures::new(read(i)?.to_array(), read(t)?.to_array())?)
}

fn sources(t: &TrainConfig, seed: u64) -> CmdResult<Sources> {
    match t.source.as_str() {
        "synthetic" => {
            let task = CorrelatedTask::new(t.d, t.noise, derive_seed(seed, "train:task"));
            Ok(Sources {
                stage1: task.sample(t.n_stage1, derive_seed(seed, "train:stage1")),
                stage2: task.sample(t.n_stage2, derive_seed(seed, "train:stage2")),
                heldout: task.sample(t.n_heldout, derive_seed(seed, "train:heldout")),
            })
        }
        "files" => Ok(Sources {
            stage1: load_pair(t.stage1_images.as_deref(), t.stage1_texts.as_deref(), "stage1")?,
            stage2: load_pair(t.stage2_images.as_deref(), t.stage2_texts.as_deref(), "stage2")?,
            heldout: load_pair(t.heldout_images.as_deref(), t.heldout_texts.as_deref(), "heldout")?,
        }),
        other => Err(Failure::usage(anyhow!("unknown train.source {other:?}"))),
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub config_digest: String,
    pub steps: u64,
    pub tau: f64,
    pub heldout_loss_init: f64,
    pub heldout_loss_final: f64,
    pub heldout_r1_init: f64,
    pub heldout_r1_final: f64,
}

pub fn run(ctx: &Ctx) -> CmdResult<TrainSummary> {
    let cfg = &ctx.config;
    let t = &cfg.train;
    let src = sources(t, cfg.seed)?;
    let (stage1, stage2, epochs2) = if t.merged {
        (src.stage1.concat(&src.stage2)?, src.stage2.select(&[]), 0)
    } else {
        (src.stage1, src.stage2, t.epochs2)
    };
    let schedule = StageSchedule {
        stage1,
        stage2,
        epochs1: t.epochs1,
        epochs2,
        batch_size: t.batch_size,
        lr: t.lr,
        momentum: t.momentum,
        d_out: t.d_out,
    };
    let run = train_two_stage(&schedule, cfg.seed)?;
    let init = TrainState::init(schedule.stage1.images.ncols(), schedule.stage1.texts.ncols(), t.d_out, cfg.seed);

    let dir = ctx.out("train")?;
    write_jsonl(&dir.join("telemetry.jsonl"), &ResultsHeader::new(&ctx.digest), &run.telemetry)?;
    write_checkpoint(&run.state, &dir.join("checkpoint"))?;

    let held = &src.heldout;
    let (loss_init, loss_final) = if held.len() >= 2 {
        (objective(&init, held)?, objective(&run.state, held)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    let summary = TrainSummary {
        config_digest: ctx.digest.clone(),
        steps: run.state.step,
        tau: run.state.tau(),
        heldout_loss_init: loss_init,
        heldout_loss_final: loss_final,
        heldout_r1_init: retrieval_eval(&init, held, 1).image_to_text,
        heldout_r1_final: retrieval_eval(&run.state, held, 1).image_to_text,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("serializes") + "\n")?;
    for r in &run.telemetry {
        println!("step {:>5}  {}  epoch {:>3}  loss {:.4}  tau {:.4}", r.step, r.stage, r.epoch, r.loss, r.tau);
    }
    println!(
        "held-out R@1 {:.3} -> {:.3}, loss {:.4} -> {:.4}",
        summary.heldout_r1_init, summary.heldout_r1_final, summary.heldout_loss_init, summary.heldout_loss_final
    );
    Ok(summary)
}
