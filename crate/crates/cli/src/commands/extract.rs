use std::collections::BTreeMap;

use anyhow::anyhow;
use histopair::corpus::{load_manifest, SelectionRoute, SlideRecord};
use histopair::extraction::{build_candidate_set, probabilistic_dedup, write_candidate_dump, DumpHeader, SlidePatches};
use histopair::par::{self, Exec};
use histopair::vectors::read_embeddings;
use log::info;

use super::{candidates_path, Ctx};
use crate::exit::{CmdResult, Failure};

#[derive(Debug, Clone)]
pub struct SlideCensus {
    pub slide_id: String,
    pub routes: BTreeMap<SelectionRoute, usize>,
    pub total: usize,
    pub kept: usize,
}

fn process(ctx: &Ctx, agents: &histopair::agents::Agents, slide: &SlideRecord) -> CmdResult<SlideCensus> {
    let cfg = &ctx.config;
    let id = &slide.slide_id;
    let descriptor = cfg.paths.embeddings_dir.join(format!("{id}.json"));
    if !descriptor.exists() {
        return Err(Failure::input(anyhow!("slide {id}: embeddings file {} not found", descriptor.display())));
    }
    let embeds = read_embeddings(&descriptor).map_err(|e| Failure::input(e).context(format!("slide {id}")))?;

    let mut slide = slide.clone();
    if slide.findings.is_empty() {
        if let Some(raw) = &slide.report_raw {
            slide.findings = agents.refine_report(raw, cfg.pipeline.token_budget)?.value;
        }
    }
    let patches = SlidePatches::new(&slide, embeds).map_err(|e| Failure::from(e).context(format!("slide {id}")))?;
    let cand = build_candidate_set(&slide, &patches, agents, &cfg.pipeline)
        .map_err(|e| Failure::from(e).context(format!("slide {id}")))?;
    let kept = probabilistic_dedup(&cand, &patches, &cfg.pipeline)?;
    let dir = ctx.out("candidates")?;
    write_candidate_dump(&cand, &kept, &DumpHeader::new(id, &ctx.digest), &candidates_path(&dir, id))?;
    let routes = cand.route_counts().into_iter().collect();
    info!("{id}: {} candidates, {} kept", cand.entries.len(), kept.entries.len());
    Ok(SlideCensus { slide_id: id.clone(), routes, total: cand.entries.len(), kept: kept.entries.len() })
}

pub fn run(ctx: &Ctx) -> CmdResult<Vec<SlideCensus>> {
    let manifest = load_manifest(&ctx.config.paths.manifest)
        .map_err(|e| Failure::from(e).context(format!("manifest {}", ctx.config.paths.manifest.display())))?;
    let agents = ctx.config.agents()?;
    let results =
        par::with_workers(ctx.workers(), || par::map_slice(Exec::Parallel, &manifest.slides, |s| process(ctx, &agents, s)));
    let census = results.into_iter().collect::<CmdResult<Vec<_>>>()?;

    let rows: Vec<Vec<String>> = census
        .iter()
        .map(|c| {
            let n = |r| c.routes.get(&r).copied().unwrap_or(0).to_string();
            vec![
                c.slide_id.clone(),
                n(SelectionRoute::ReportPrompt),
                n(SelectionRoute::AttributePrompt),
                n(SelectionRoute::Cluster),
                c.total.to_string(),
                c.kept.to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        histopair::evaluation::render_table(&["Slide", "Report", "Attribute", "Cluster", "Total", "Kept"], &rows)
    );
    Ok(census)
}
