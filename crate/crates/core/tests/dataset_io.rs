//! Dataset persistence: byte-identical regeneration, load/save
//! equivalence, split integrity, and the training-episode audit.

use fskd_core::config::{EpisodeMode, RunConfig};
use fskd_core::rng::Rng;
use fskd_core::synth::{build_dataset, directory_digest, load_dataset, sample_episode};
use std::path::PathBuf;

fn tiny_config(data_dir: &str) -> RunConfig {
    RunConfig {
        species_count: 3,
        images_per_species: 8,
        test_species_fraction: 0.34,
        data_dir: data_dir.to_string(),
        ..Default::default()
    }
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fskd-dataset-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn regeneration_is_byte_identical() {
    let dir_a = temp_dir("a");
    let dir_b = temp_dir("b");
    let config = tiny_config("");
    build_dataset(&config, &dir_a).unwrap();
    build_dataset(&config, &dir_b).unwrap();
    assert_eq!(
        directory_digest(&dir_a).unwrap(),
        directory_digest(&dir_b).unwrap()
    );
    let _ = std::fs::remove_dir_all(&dir_a);
    let _ = std::fs::remove_dir_all(&dir_b);
}

#[test]
fn loaded_dataset_matches_generated() {
    let dir = temp_dir("load");
    let config = tiny_config("");
    let built = build_dataset(&config, &dir).unwrap();
    let loaded = load_dataset(&dir, &config.split_file).unwrap();
    assert_eq!(loaded.images.len(), built.images.len());
    assert_eq!(loaded.l0, built.l0);
    assert_eq!(loaded.split.base_types, built.split.base_types);
    assert_eq!(loaded.split.novel_types, built.split.novel_types);
    assert_eq!(loaded.split.train_images, built.split.train_images);
    for (a, b) in loaded.images.iter().zip(&built.images) {
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.species, b.species);
        assert_eq!(a.keypoints.len(), b.keypoints.len());
        for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
            assert_eq!(ka.type_id, kb.type_id);
            assert_eq!(ka.pos, kb.pos);
            assert_eq!(ka.visible, kb.visible);
        }
        assert_eq!(a.bbox, b.bbox);
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn leave_one_out_writes_one_split_per_species() {
    let dir = temp_dir("loo");
    let mut config = tiny_config("");
    config.leave_one_out = true;
    build_dataset(&config, &dir).unwrap();
    for species in 0..config.species_count {
        let split = load_dataset(&dir, &format!("split_fold_{species}.json")).unwrap();
        assert_eq!(split.split.test_species, vec![species]);
        assert!(!split.split.train_species.contains(&species));
        assert_eq!(split.split.train_species.len(), config.species_count - 1);
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn corrupted_split_type_is_rejected() {
    let dir = temp_dir("orphan");
    let config = tiny_config("");
    build_dataset(&config, &dir).unwrap();
    let split_path = dir.join("split.json");
    let text = std::fs::read_to_string(&split_path).unwrap();
    std::fs::write(&split_path, text.replace("\"hip\"", "\"antler\"")).unwrap();
    assert!(load_dataset(&dir, "split.json").is_err());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn training_episode_stream_never_contains_novel_types() {
    // audit pass over the episode stream in the unseen + novel setting
    let config = tiny_config("");
    let dataset = fskd_core::synth::generate(&config).unwrap();
    let novel = &dataset.split.novel_types;
    let mut rng = Rng::seed_from(123);
    for _ in 0..200 {
        let episode = sample_episode(
            &dataset,
            &dataset.split.train_images,
            &dataset.split.base_types,
            1,
            EpisodeMode::Same,
            &mut rng,
        )
        .unwrap();
        for t in &episode.active_types {
            assert!(!novel.contains(t), "novel type {t} leaked into training");
        }
        for img in episode.supports.iter().chain([&episode.query]) {
            assert!(
                dataset.split.train_species.contains(&dataset.images[*img].species),
                "test species leaked into training"
            );
        }
    }
}
