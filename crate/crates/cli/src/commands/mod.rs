pub mod eval;
pub mod extract;
pub mod generate;
pub mod report;
pub mod serve;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::exit::{CmdResult, Failure};

/// Loaded configuration plus its digest.
pub struct Ctx {
    pub config: RunConfig,
    pub digest: String,
}

impl Ctx {
    pub fn out(&self, sub: &str) -> CmdResult<PathBuf> {
        let p = self.config.paths.output_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Failure::input(e).context(format!("creating {}", p.display())))?;
        Ok(p)
    }

    pub fn workers(&self) -> usize {
        self.config.workers
    }
}

pub fn candidates_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.jsonl"))
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, header: &impl serde::Serialize, rows: &[T]) -> CmdResult {
    let mut text = serde_json::to_string(header).expect("header serializes") + "\n";
    for r in rows {
        text += &serde_json::to_string(r).expect("row serializes");
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Failure::input(e).context(format!("writing {}", path.display())))
}
