use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dobcbf::envs::PlantKind;
use dobcbf::harness::{run_experiment_with, ExperimentConfig};
use dobcbf::par::Execution;

fn episodes(c: &mut Criterion) {
    let mut group = c.benchmark_group("episode_batch");
    group.sample_size(10);
    for plant in [PlantKind::Unicycle, PlantKind::Quadrotor] {
        let mut cfg = ExperimentConfig::defaults(plant);
        cfg.episodes = 16;
        cfg.steps_per_episode = 200;
        cfg.calibration_episodes = 4;
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new(plant.name(), format!("{exec:?}")), &cfg, |b, cfg| {
                b.iter(|| run_experiment_with(cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, episodes);
criterion_main!(benches);
