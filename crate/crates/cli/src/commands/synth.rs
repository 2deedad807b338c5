use std::path::Path;

use histopair::agents::Agents;
use histopair::corpus::write_manifest;
use histopair::synth::{mock_patch_embeddings, synthetic_manifest, SynthError};
use histopair::vectors::write_embeddings;

use crate::exit::{CmdResult, Failure};

/// Write a synthetic manifest plus mock patch embeddings into `dir`.
pub fn run(dir: &Path, n_slides: usize, side: u32, seed: u64) -> CmdResult {
    let manifest = synthetic_manifest(n_slides, side, seed);
    let emb_dir = dir.join("embeddings");
    std::fs::create_dir_all(&emb_dir)?;
    write_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    let agents = Agents::mock(seed);
    for slide in &manifest.slides {
        let m = mock_patch_embeddings(&agents, slide).map_err(|e| match e {
            SynthError::Agent(a) => Failure::from(a),
            other => Failure::internal(other),
        })?;
        write_embeddings(&m, &emb_dir, &slide.slide_id).map_err(Failure::input)?;
    }
    println!(
        "wrote {} slides of {} patches to {}",
        manifest.slides.len(),
        side as usize * side as usize,
        dir.display()
    );
    Ok(())
}
