use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;

use anyhow::anyhow;
use histopair::agents::orchestrate_slide_with;
use histopair::corpus::{load_manifest, PairWriter, PairsHeader};
use histopair::extraction::{kept_candidates, read_candidate_dump};
use histopair::par::{self, Exec};
use log::{info, warn};

use super::{candidates_path, Ctx};
use crate::exit::{CmdResult, Failure};

#[derive(Debug, Default, Clone, Copy)]
pub struct GenerateSummary {
    pub resumed: usize,
    pub written: usize,
    pub dropped: usize,
}

pub fn run(ctx: &Ctx) -> CmdResult<GenerateSummary> {
    let cfg = &ctx.config;
    let budget = cfg.pipeline.token_budget;
    let manifest = load_manifest(&cfg.paths.manifest)
        .map_err(|e| Failure::from(e).context(format!("manifest {}", cfg.paths.manifest.display())))?;
    let agents = cfg.agents()?;
    let cand_dir = cfg.paths.output_dir.join("candidates");
    let out = ctx.out("")?;
    let pairs_path = out.join("pairs.jsonl");

    let mut summary = GenerateSummary::default();
    let (mut writer, done) = if pairs_path.exists() {
        let (w, header, records) = PairWriter::resume(&pairs_path, budget)?;
        if header.config_digest != ctx.digest {
            return Err(Failure::input(anyhow!(
                "{} was produced with config {}, current config is {}; remove it to start over",
                pairs_path.display(),
                header.config_digest,
                ctx.digest
            )));
        }
        summary.resumed = records.len();
        info!("resuming after {} completed pairs", records.len());
        (w, records.into_iter().map(|r| r.patch.patch_id).collect::<HashSet<_>>())
    } else {
        (PairWriter::create(&pairs_path, &PairsHeader::new(ctx.digest.clone()), budget)?, HashSet::new())
    };
    let mut transcripts = OpenOptions::new().create(true).append(true).open(out.join("transcripts.jsonl"))?;

    for slide in &manifest.slides {
        let id = &slide.slide_id;
        let dump = candidates_path(&cand_dir, id);
        if !dump.exists() {
            return Err(Failure::input(anyhow!("slide {id}: no candidate dump at {}; run extract first", dump.display())));
        }
        let (_, records) = read_candidate_dump(&dump)?;
        let mut cand = kept_candidates(id, &records);
        cand.entries.retain(|e| !done.contains(&e.patch.patch_id));
        if cand.entries.is_empty() {
            continue;
        }
        let result = par::with_workers(ctx.workers(), || orchestrate_slide_with(&agents, &cand, slide, Exec::Parallel));
        let slide_out = match result {
            Ok(o) => o,
            Err(e) => {
                writer.finish()?;
                return Err(Failure::from(e).context(format!("slide {id}; completed pairs were kept")));
            }
        };
        for pair in &slide_out.pairs {
            writer.append(pair)?;
        }
        for t in agents.take_transcripts() {
            writeln!(transcripts, "{}", serde_json::to_string(&t).expect("transcript serializes"))?;
        }
        for f in &slide_out.failures {
            warn!("slide {id}: dropped {}: {}", f.patch_id, f.error);
        }
        summary.written += slide_out.pairs.len();
        summary.dropped += slide_out.failures.len();
    }
    writer.finish()?;
    println!(
        "pairs: {} written, {} resumed, {} dropped -> {}",
        summary.written,
        summary.resumed,
        summary.dropped,
        pairs_path.display()
    );
    Ok(summary)
}
