use fskd_core::config::RunConfig;
use fskd_core::pipeline::{evaluate, train};
use fskd_core::synth::generate;
use std::sync::Mutex;

#[test]
#[ignore]
fn probe_fill_change() {
    let mut jobs: Vec<(String, RunConfig)> = Vec::new();
    for seed in [3u64, 4, 5] {
        for (label, scales) in [("s4", vec![4usize]), ("s6", vec![6]), ("s8", vec![8]), ("ms", vec![4, 6, 8])] {
            let mut c = RunConfig::default();
            c.train_seed = seed;
            c.model_seed = seed;
            c.val_every = 0;
            c.scales = scales;
            jobs.push((format!("{label}_seed{seed}"), c));
        }
    }
    let queue = Mutex::new(jobs);
    std::thread::scope(|s| {
        for _ in 0..2 {
            s.spawn(|| loop {
                let Some((label, config)) = queue.lock().unwrap().pop() else { break };
                let dataset = generate(&config).unwrap();
                let outcome = train(&config, &dataset).unwrap();
                let (r, _) = evaluate(&outcome.state, &dataset, &dataset.split.test_images,
                    &dataset.split.novel_types, &config, config.eval_seed, 0).unwrap();
                println!("{label}: novel {:.4}", r.pck_mean);
            });
        }
    });
}
