use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fskd_bench::bench_setup;
use fskd_core::autodiff::Tape;
use fskd_core::config::EpisodeMode;
use fskd_core::pipeline::forward::bind_model;
use fskd_core::pipeline::{detect, encode_episode, episode_loss_graph, ModelState};
use fskd_core::rng::Rng;
use fskd_core::synth::sample_episode;

fn episode_step(c: &mut Criterion) {
    let (config, dataset) = bench_setup();
    let state = ModelState::init(&config);
    let mut rng = Rng::seed_from(5);
    let episode = sample_episode(
        &dataset,
        &dataset.split.train_images,
        &dataset.split.base_types,
        config.k_shots,
        EpisodeMode::Same,
        &mut rng,
    )
    .unwrap();
    let encoded = encode_episode(&state.params, &dataset, &episode, config.patch_size).unwrap();

    c.bench_function("episode forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &state.params, true);
            let (loss, breakdown) = episode_loss_graph(
                &mut tape,
                &bound,
                &encoded,
                &dataset,
                &episode,
                &config,
                black_box(7),
            )
            .unwrap();
            let grads = tape.backward(loss).unwrap();
            black_box((breakdown.total, grads.get(bound.named[0].1).is_some()))
        })
    });

    c.bench_function("detect one query", |b| {
        let support = &dataset.images[episode.supports[0]];
        let query = &dataset.images[episode.query];
        b.iter(|| {
            detect(
                &state,
                &[support],
                black_box(&query.pixels),
                &dataset.split.base_types,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, episode_step);
criterion_main!(benches);
