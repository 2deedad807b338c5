use histopair::agents::{orchestrate_slide, Agents};
use histopair::corpus::{read_pairs, write_manifest, load_manifest, PairWriter, PairsHeader, SelectionRoute};
use histopair::extraction::{
    build_candidate_set, kept_candidates, probabilistic_dedup, read_candidate_dump, write_candidate_dump, DumpHeader,
    SlidePatches,
};
use histopair::synth::{mock_patch_embeddings, synthetic_manifest};
use histopair::vectors::{read_embeddings, write_embeddings};
use histopair::PipelineConfig;

#[test]
fn manifest_to_pairs_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_manifest(2, 30, 4);
    let mpath = dir.path().join("manifest.jsonl");
    write_manifest(&manifest, &mpath).unwrap();
    let loaded = load_manifest(&mpath).unwrap();
    assert_eq!(loaded.slides, manifest.slides);

    let agents = Agents::mock(4);
    let cfg = PipelineConfig { seed: 4, ..PipelineConfig::default() };
    let pairs_path = dir.path().join("pairs.jsonl");
    let mut writer = PairWriter::create(&pairs_path, &PairsHeader::new("test"), cfg.token_budget).unwrap();
    let mut total = 0;
    for slide in &loaded.slides {
        let m = mock_patch_embeddings(&agents, slide).unwrap();
        let desc = write_embeddings(&m, dir.path(), &slide.slide_id).unwrap();
        let patches = SlidePatches::new(slide, read_embeddings(&desc).unwrap()).unwrap();
        let cand = build_candidate_set(slide, &patches, &agents, &cfg).unwrap();
        let counts = cand.route_counts();
        assert_eq!(counts[&SelectionRoute::ReportPrompt], 64);
        assert_eq!(counts[&SelectionRoute::AttributePrompt], 64);
        assert_eq!(counts[&SelectionRoute::Cluster], 256);
        let kept = probabilistic_dedup(&cand, &patches, &cfg).unwrap();

        let dump = dir.path().join(format!("{}.cand.jsonl", slide.slide_id));
        write_candidate_dump(&cand, &kept, &DumpHeader::new(&slide.slide_id, "test"), &dump).unwrap();
        let (header, records) = read_candidate_dump(&dump).unwrap();
        assert_eq!(header.slide_id, slide.slide_id);
        let reread = kept_candidates(&slide.slide_id, &records);
        assert_eq!(reread.entries, kept.entries);

        let out = orchestrate_slide(&agents, &reread, slide).unwrap();
        assert!(out.failures.is_empty());
        for p in &out.pairs {
            writer.append(p).unwrap();
        }
        total += out.pairs.len();
    }
    assert_eq!(writer.finish().unwrap(), total);
    let (header, records) = read_pairs(&pairs_path).unwrap();
    assert_eq!(header.config_digest, "test");
    assert_eq!(records.len(), total);
    assert!(records.iter().all(|r| r.check_complete(77).is_ok()));
}

#[test]
fn torn_pairs_file_resumes_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_manifest(1, 20, 1);
    let slide = &manifest.slides[0];
    let agents = Agents::mock(1);
    let cfg = PipelineConfig::default();
    let patches = SlidePatches::new(slide, mock_patch_embeddings(&agents, slide).unwrap()).unwrap();
    let cand = probabilistic_dedup(&build_candidate_set(slide, &patches, &agents, &cfg).unwrap(), &patches, &cfg).unwrap();
    let out = orchestrate_slide(&agents, &cand, slide).unwrap();

    let path = dir.path().join("pairs.jsonl");
    let mut w = PairWriter::create(&path, &PairsHeader::new("d"), 77).unwrap();
    for p in &out.pairs[..10] {
        w.append(p).unwrap();
    }
    w.finish().unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(b"{\"patch\":{\"slide_id\":");
    std::fs::write(&path, &bytes).unwrap();

    let (mut w, header, done) = PairWriter::resume(&path, 77).unwrap();
    assert_eq!(header.config_digest, "d");
    assert_eq!(done.len(), 10);
    for p in &out.pairs[10..] {
        w.append(p).unwrap();
    }
    w.finish().unwrap();
    let (_, all) = read_pairs(&path).unwrap();
    assert_eq!(all, out.pairs);
}
