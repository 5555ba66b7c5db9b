use aslora_core::{
    AdapterBank, AdapterConfig, AdapterMode, MergeEngine, MergeSchedule, ModeName, PairScope,
    ProjectionType, RunConfig,
};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_desk");
    group.sample_size(20);
    for mode in [ModeName::Lora, ModeName::Aslora] {
        let cfg = RunConfig {
            mode,
            num_train: 64,
            num_eval: 0,
            ..RunConfig::default()
        };
        let mut tr = cfg.build_trainer().unwrap();
        group.bench_function(format!("{mode:?}").to_lowercase(), |b| {
            b.iter(|| black_box(tr.step().unwrap().record.loss))
        });
    }
    group.finish();
}

fn merge_hook(c: &mut Criterion) {
    let cfg = AdapterConfig {
        rank: 8,
        alpha: 16.0,
        num_layers: 12,
        model_dim: 64,
        adapted_types: ProjectionType::ALL.to_vec(),
        mode: AdapterMode::Aslora,
        a_init_std: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let banks: Vec<AdapterBank<f32>> = ProjectionType::ALL
        .iter()
        .map(|&p| AdapterBank::init(&cfg, p, &mut rng).unwrap())
        .collect();
    let schedule = MergeSchedule {
        start_step: 0,
        interval: 1,
        budget: 8,
        pair_scope: PairScope::AllPairs,
    };
    c.bench_function("merge_hook_all_pairs_l12", |b| {
        b.iter_batched(
            || (banks.clone(), MergeEngine::new(schedule, &ProjectionType::ALL)),
            |(mut banks, mut engine)| black_box(engine.step_hook(&mut banks, 1).unwrap().events.len()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, train_step, merge_hook);
criterion_main!(benches);
