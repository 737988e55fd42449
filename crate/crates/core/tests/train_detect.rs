//! End-to-end training oracles: self-match localization after a miniature
//! training run, prototype scale equivariance at the pre-activation tap,
//! and detection determinism.

use fskd_core::pipeline::features::{encode_image, extract_keypoint_repr, modulate};
use fskd_core::pipeline::forward::descriptor_preactivation;
use fskd_core::pipeline::{detect, miniature_config, train, ModelState};
use fskd_core::synth::generate;

#[test]
fn trained_model_localizes_support_equals_query() {
    let mut config = miniature_config();
    config.train_episodes = 600;
    config.species_count = 3;
    config.images_per_species = 12;
    let dataset = generate(&config).unwrap();
    let outcome = train(&config, &dataset).unwrap();
    assert!(outcome.aborted_at.is_none());
    let cell = config.image_size as f64 / config.scales[0] as f64;

    let feet: Vec<usize> = ["foot_fl", "foot_fr", "foot_bl", "foot_br"]
        .iter()
        .map(|n| dataset.split.type_names.iter().position(|t| t == n).unwrap())
        .collect();
    let mut within = 0usize;
    let mut total = 0usize;
    let mut feet_within = 0usize;
    let mut feet_total = 0usize;
    for &img_idx in dataset.split.train_images.iter().take(10) {
        let img = &dataset.images[img_idx];
        let requested: Vec<usize> = img
            .keypoints
            .iter()
            .filter(|k| k.visible)
            .map(|k| k.type_id)
            .collect();
        let results = detect(&outcome.state, &[img], &img.pixels, &requested).unwrap();
        for (t, est) in results {
            let Some(est) = est else { continue };
            let gt = img.keypoint(t).pos;
            let d = ((est.position[0] - gt[0]).powi(2) + (est.position[1] - gt[1]).powi(2)).sqrt();
            total += 1;
            if d <= cell {
                within += 1;
            }
            if feet.contains(&t) {
                feet_total += 1;
                if d <= cell {
                    feet_within += 1;
                }
            }
        }
    }
    let overall = within as f64 / total as f64;
    let feet_rate = feet_within as f64 / feet_total as f64;
    assert!(
        overall >= 0.5,
        "only {within}/{total} self-match predictions within one cell width"
    );
    assert!(
        feet_rate >= 0.55,
        "sharply localized parts: {feet_within}/{feet_total} within one cell"
    );
}

#[test]
fn prototype_scaling_leaves_preactivation_order_unchanged() {
    // scaling one support's feature map by c > 0 scales the prototype, the
    // attentive map, and (with the zero first-layer bias) the descriptor
    // pre-activation tap exactly linearly
    let config = miniature_config();
    let dataset = generate(&config).unwrap();
    let state = ModelState::init(&config);
    let support = &dataset.images[dataset.split.train_images[0]];
    let query = &dataset.images[dataset.split.train_images[1]];
    let s_fm = encode_image(&support.pixels, &state.params.encoder, config.patch_size).unwrap();
    let q_fm = encode_image(&query.pixels, &state.params.encoder, config.patch_size).unwrap();
    let kp = support.keypoints.iter().find(|k| k.visible).unwrap();
    let proto = extract_keypoint_repr(
        &s_fm,
        kp.pos,
        config.extract_mode,
        config.pooling_xi(),
        config.normalize_pooling,
        config.image_size,
    )
    .unwrap();
    let c = 3.7;
    let scaled_proto: Vec<f64> = proto.iter().map(|v| v * c).collect();
    let attentive = modulate(&q_fm, &proto).unwrap();
    let attentive_scaled = modulate(&q_fm, &scaled_proto).unwrap();
    assert!(attentive_scaled.max_abs_diff(&attentive.scale(c)) < 1e-9);
    let tap = descriptor_preactivation(&state.params, &attentive, config.descriptor_pool).unwrap();
    let tap_scaled =
        descriptor_preactivation(&state.params, &attentive_scaled, config.descriptor_pool).unwrap();
    assert!(tap_scaled.max_abs_diff(&tap.scale(c)) < 1e-9);
    // argmax at the tap is invariant to the scaling
    let argmax = |t: &fskd_core::tensor::Tensor| {
        t.data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    assert_eq!(argmax(&tap), argmax(&tap_scaled));
}

#[test]
fn detection_is_deterministic() {
    let config = miniature_config();
    let dataset = generate(&config).unwrap();
    let state = ModelState::init(&config);
    let support = &dataset.images[dataset.split.train_images[0]];
    let query = &dataset.images[dataset.split.train_images[1]];
    let requested = dataset.split.base_types.clone();
    let a = detect(&state, &[support], &query.pixels, &requested).unwrap();
    let b = detect(&state, &[support], &query.pixels, &requested).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        match (&ra.1, &rb.1) {
            (Some(ea), Some(eb)) => {
                assert_eq!(ea.position[0].to_bits(), eb.position[0].to_bits());
                assert_eq!(ea.covariance[0][0].to_bits(), eb.covariance[0][0].to_bits());
            }
            (None, None) => {}
            _ => panic!("presence mismatch"),
        }
    }
}
