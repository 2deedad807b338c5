use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context};
use clap::ValueEnum;
use histopair::digest::derive_seed;
use histopair::evaluation::{
    abmil_train, evaluate_bags, linear_probe, render_mil_table, render_probe_table, render_zeroshot_table,
    seeded_replicates, write_results, zero_shot_classify, AbmilHyper, MilBag, MilSplit, ProbeTask, ResultRecord,
    ResultsHeader, ZeroShotTask, TASK_MIL, TASK_PROBE, TASK_ZEROSHOT,
};
use histopair::par::{self, Exec};
use histopair::synth::{self, GaussianClasses, SignalBags};
use histopair::vectors::{read_embeddings, EmbeddingMatrix};
use serde::Deserialize;

use super::Ctx;
use crate::config::{MilDataset, ProbeDataset, ZeroShotDataset};
use crate::exit::{CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Zeroshot,
    Probe,
    Mil,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Zeroshot => TASK_ZEROSHOT,
            EvalTask::Probe => TASK_PROBE,
            EvalTask::Mil => TASK_MIL,
        }
    }
}

fn read_matrix(p: &Path) -> CmdResult<EmbeddingMatrix> {
    read_embeddings(p).map_err(|e| Failure::input(e).context(format!("{}", p.display())))
}

fn read_labels(p: &Path) -> CmdResult<Vec<usize>> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::input)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Failure::input(anyhow!("{}:{}: not a class index: {l}", p.display(), i + 1)))
        })
        .collect()
}

fn zeroshot_task(ctx: &Ctx, agents: &histopair::agents::Agents, d: &ZeroShotDataset) -> CmdResult<ZeroShotTask> {
    match (&d.features, &d.labels) {
        (Some(f), Some(l)) => {
            let m = histopair::vectors::l2_normalize(&read_matrix(f)?).map_err(Failure::input)?;
            Ok(ZeroShotTask::new(d.classes.clone(), m, read_labels(l)?)?)
        }
        (None, None) => {
            let names: Vec<&str> = d.classes.iter().map(String::as_str).collect();
            let seed = derive_seed(ctx.config.seed, &format!("zeroshot:{}", d.name));
            synth::zero_shot_task(agents, &names, d.n_per_class, d.noise, seed).map_err(|e| match e {
                synth::SynthError::Agent(a) => Failure::from(a),
                other => Failure::input(other),
            })
        }
        _ => Err(Failure::usage(anyhow!("zero-shot dataset {}: give both features and labels, or neither", d.name))),
    }
}

fn probe_task(ctx: &Ctx, d: &ProbeDataset) -> CmdResult<ProbeTask> {
    let e = &ctx.config.eval;
    let (tx, mut ty, ex, mut ey, c) = match (&d.train_features, &d.train_labels, &d.test_features, &d.test_labels) {
        (Some(a), Some(b), Some(c), Some(dl)) => {
            let ty = read_labels(b)?;
            let ey = read_labels(dl)?;
            let classes = ty.iter().chain(&ey).max().map_or(0, |m| m + 1);
            (read_matrix(a)?.to_array(), ty, read_matrix(c)?.to_array(), ey, classes)
        }
        (None, None, None, None) => {
            let g = GaussianClasses::new(d.n_classes, d.d, d.separation, derive_seed(ctx.config.seed, &format!("probe:{}", d.name)));
            let (tx, ty) = g.sample(d.n_train_per_class, derive_seed(ctx.config.seed, &format!("probe-train:{}", d.name)));
            let (ex, ey) = g.sample(d.n_test_per_class, derive_seed(ctx.config.seed, &format!("probe-test:{}", d.name)));
            (tx, ty, ex, ey, d.n_classes)
        }
        _ => return Err(Failure::usage(anyhow!("probe dataset {}: give all four feature/label files, or none", d.name))),
    };
    if d.shuffle_labels {
        synth::shuffle_labels(&mut ty, derive_seed(ctx.config.seed, "shuffle-train"));
        synth::shuffle_labels(&mut ey, derive_seed(ctx.config.seed, "shuffle-test"));
    }
    let mut task = ProbeTask::new(tx, ty, ex, ey, c);
    task.shots = e.shots.clone();
    task.repeats = e.repeats;
    task.l2_reg = e.l2_reg;
    Ok(task)
}

#[derive(Deserialize)]
struct BagLine {
    slide_id: String,
    label: usize,
    split: String,
    embeddings: std::path::PathBuf,
}

fn mil_bags(ctx: &Ctx, d: &MilDataset) -> CmdResult<(Vec<MilBag>, MilSplit)> {
    match &d.bags {
        None => {
            let task = SignalBags::generate(d.n_train + d.n_test, d.d, derive_seed(ctx.config.seed, &format!("mil:{}", d.name)));
            let split = MilSplit { train: (0..d.n_train).collect(), val: (d.n_train..d.n_train + d.n_test).collect() };
            Ok((task.bags, split))
        }
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::input)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut bags = Vec::new();
            let mut split = MilSplit { train: Vec::new(), val: Vec::new() };
            for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let b: BagLine = serde_json::from_str(line)
                    .map_err(|e| Failure::input(anyhow!("{}:{}: {e}", path.display(), i + 1)))?;
                let m = read_matrix(&base.join(&b.embeddings))?;
                match b.split.as_str() {
                    "train" => split.train.push(bags.len()),
                    "test" | "val" => split.val.push(bags.len()),
                    s => return Err(Failure::input(anyhow!("{}:{}: unknown split {s}", path.display(), i + 1))),
                }
                bags.push(MilBag::new(b.slide_id, m.to_array(), b.label)?);
            }
            Ok((bags, split))
        }
    }
}

fn with_seed(mut r: ResultRecord, seed: Option<u64>, repeat: Option<usize>, shot: Option<usize>) -> ResultRecord {
    r.seed = seed;
    r.repeat = repeat;
    r.shot = shot;
    r
}

pub fn run(ctx: &Ctx, task: EvalTask) -> CmdResult<Vec<ResultRecord>> {
    let cfg = &ctx.config;
    let mut records = Vec::new();
    let table = match task {
        EvalTask::Zeroshot => {
            let agents = cfg.agents()?;
            for d in &cfg.eval.zeroshot {
                let t = zeroshot_task(ctx, &agents, d)?;
                let r = par::with_workers(ctx.workers(), || zero_shot_classify(&t, &agents))?;
                records.push(with_seed(ResultRecord::new(TASK_ZEROSHOT, &d.name, "accuracy", r.accuracy), Some(cfg.seed), None, None));
            }
            render_zeroshot_table(&records)
        }
        EvalTask::Probe => {
            for d in &cfg.eval.probe {
                let t = probe_task(ctx, d)?;
                let r = par::with_workers(ctx.workers(), || linear_probe(&t, cfg.seed))?;
                for (rep, row) in r.grid.iter().enumerate() {
                    for (&shot, &acc) in r.shots.iter().zip(row) {
                        records.push(with_seed(ResultRecord::new(TASK_PROBE, &d.name, "accuracy", acc), Some(cfg.seed), Some(rep), Some(shot)));
                    }
                }
                println!("{}: accuracy grid {} repeats x {} shots", d.name, r.grid.len(), r.shots.len());
            }
            render_probe_table(&records)
        }
        EvalTask::Mil => {
            let e = &cfg.eval;
            let hyper = AbmilHyper { hidden: e.hidden, gated: e.gated, epochs: e.epochs, lr: e.lr };
            for d in &e.mil {
                let (bags, split) = mil_bags(ctx, d)?;
                let reps = par::with_workers(ctx.workers(), || {
                    seeded_replicates(e.n_seeds, cfg.seed, Exec::Parallel, |s| {
                        let (p, _) = abmil_train(&bags, &split, &hyper, s)?;
                        let scores = evaluate_bags(&p, &bags, &split.val);
                        let mut m = BTreeMap::from([("f1".to_string(), scores.f1)]);
                        if let Some(a) = scores.auc {
                            m.insert("auc".into(), a);
                        }
                        Ok(m)
                    })
                })?;
                for run in &reps.runs {
                    for (metric, &v) in &run.metrics {
                        records.push(with_seed(ResultRecord::new(TASK_MIL, &d.name, metric, v), Some(run.seed), Some(run.run), None));
                    }
                }
            }
            render_mil_table(&records)
        }
    };
    let dir = ctx.out("eval")?;
    write_results(&records, &ResultsHeader::new(&ctx.digest), &dir.join(format!("{}.jsonl", task.name())))?;
    std::fs::write(dir.join(format!("{}.txt", task.name())), &table)?;
    print!("{table}");
    Ok(records)
}
