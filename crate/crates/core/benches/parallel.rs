use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use histopair::agents::Agents;
use histopair::evaluation::{linear_probe_with, ProbeTask};
use histopair::extraction::{build_candidate_set_with, SlidePatches};
use histopair::par::Exec;
use histopair::synth::{mock_patch_embeddings, synthetic_manifest, GaussianClasses};
use histopair::vectors::{kmeans_fit_with, score_all};
use histopair::PipelineConfig;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn extraction(c: &mut Criterion) {
    let manifest = synthetic_manifest(1, 100, 0);
    let slide = &manifest.slides[0];
    let agents = Agents::mock(0);
    let embeds = mock_patch_embeddings(&agents, slide).unwrap();
    let patches = SlidePatches::new(slide, embeds.clone()).unwrap();
    let cfg = PipelineConfig::default();
    let query = embeds.row(0).to_vec();

    let mut g = c.benchmark_group("extraction");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("score_all", name), &exec, |b, &e| b.iter(|| score_all(&query, &embeds, e)));
        g.bench_with_input(BenchmarkId::new("kmeans_100", name), &exec, |b, &e| {
            b.iter(|| kmeans_fit_with(&embeds, 100, 0, 20, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("candidate_set", name), &exec, |b, &e| {
            b.iter(|| build_candidate_set_with(slide, &patches, &agents, &cfg, e).unwrap())
        });
    }
    g.finish();
}

fn probe(c: &mut Criterion) {
    let g3 = GaussianClasses::new(3, 32, 4.0, 1);
    let (tx, ty) = g3.sample(300, 2);
    let (ex, ey) = g3.sample(300, 3);
    let mut task = ProbeTask::new(tx, ty, ex, ey, 3);
    task.repeats = 4;
    task.shots = vec![8, 64];
    let mut g = c.benchmark_group("probe");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("linear_probe", name), &exec, |b, &e| {
            b.iter(|| linear_probe_with(&task, 0, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, extraction, probe);
criterion_main!(benches);
