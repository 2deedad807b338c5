use std::path::PathBuf;

use anyhow::anyhow;
use histopair::evaluation::{read_results, render_report, TASK_MIL, TASK_PROBE, TASK_ZEROSHOT};

use super::Ctx;
use crate::exit::{CmdResult, Failure};

/// Collect result files (the eval outputs plus any extra paths) into one report.
pub fn run(ctx: &Ctx, extra: &[PathBuf]) -> CmdResult<String> {
    let eval_dir = ctx.config.paths.output_dir.join("eval");
    let mut files: Vec<PathBuf> = [TASK_ZEROSHOT, TASK_PROBE, TASK_MIL]
        .iter()
        .map(|t| eval_dir.join(format!("{t}.jsonl")))
        .filter(|p| p.exists())
        .collect();
    files.extend(extra.iter().cloned());
    if files.is_empty() {
        return Err(Failure::input(anyhow!("no results found under {}; run eval first", eval_dir.display())));
    }
    let mut records = Vec::new();
    for f in &files {
        let (_, rs) = read_results(f).map_err(|e| Failure::from(e).context(format!("{}", f.display())))?;
        records.extend(rs);
    }
    let text = render_report(&records);
    let out = ctx.config.paths.output_dir.join("report.txt");
    std::fs::create_dir_all(&ctx.config.paths.output_dir)?;
    std::fs::write(&out, &text)?;
    print!("{text}");
    Ok(text)
}
