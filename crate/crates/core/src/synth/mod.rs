//! Procedurally generated articulated-creature dataset: deterministic
//! species templates, instance rendering, base/novel keypoint splits,
//! seen/unseen species splits, on-disk persistence, and episode sampling.

pub mod render;
pub mod template;

pub use render::{flip_annotated, render_instance};
pub use template::{make_template, SpeciesTemplate, LIMB_PATHS, TYPE_NAMES};

use crate::config::{EpisodeMode, RunConfig, SpeciesSplit};
use crate::grid::Vec2;
use crate::io::image::{ImageGray, ImageRgb};
use crate::io::{ppm, IoError};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image edge {0} below the minimum of 64")]
    ImageTooSmall(usize),
    #[error("degenerate pose for seed {seed} after bounded retries")]
    DegeneratePose { seed: u64 },
    #[error("unknown keypoint type `{0}`")]
    UnknownType(String),
    #[error("keypoint type partition invalid: {0}")]
    BadPartition(String),
    #[error("insufficient images: need {need}, pool has {have}")]
    InsufficientImages { need: usize, have: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Axis-aligned box, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub type_id: usize,
    pub pos: Vec2,
    pub visible: bool,
}

/// One rendered instance with annotations.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub pixels: ImageRgb,
    pub mask: ImageGray,
    /// One entry per global keypoint type, ordered by type id.
    pub keypoints: Vec<Keypoint>,
    pub bbox: Rect,
    pub species: usize,
}

impl AnnotatedImage {
    pub fn keypoint(&self, type_id: usize) -> &Keypoint {
        &self.keypoints[type_id]
    }
}

/// Species and keypoint-type partitions plus designated limb paths.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub type_names: Vec<String>,
    pub base_types: Vec<usize>,
    pub novel_types: Vec<usize>,
    pub train_species: Vec<usize>,
    pub test_species: Vec<usize>,
    pub train_images: Vec<usize>,
    pub test_images: Vec<usize>,
    pub limb_paths: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    pub split: DatasetSplit,
    pub l0: usize,
}

// ---------------------------------------------------------------------------
// on-disk documents

#[derive(Serialize, Deserialize)]
struct ManifestKeypoint {
    #[serde(rename = "type")]
    type_name: String,
    x: f64,
    y: f64,
    visible: bool,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    mask: String,
    species: usize,
    bbox: Rect,
    keypoints: Vec<ManifestKeypoint>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    image_size: usize,
    records: Vec<ManifestRecord>,
}

#[derive(Serialize, Deserialize)]
struct SpeciesPartitionDoc {
    train: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SplitDoc {
    species_partition: SpeciesPartitionDoc,
    base_types: Vec<String>,
    novel_types: Vec<String>,
    limb_paths: Vec<(String, String)>,
    train_images: Vec<usize>,
    test_images: Vec<usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).expect("serializable document");
    std::fs::write(path, text + "\n").map_err(IoError::from)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(IoError::from)?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn resolve_types(names: &[String]) -> Result<Vec<usize>, DataError> {
    names
        .iter()
        .map(|n| template::type_id(n).ok_or_else(|| DataError::UnknownType(n.clone())))
        .collect()
}

fn partition_types(novel_names: &[String]) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    let novel = resolve_types(novel_names)?;
    let mut seen = vec![false; TYPE_NAMES.len()];
    for &t in &novel {
        if seen[t] {
            return Err(DataError::BadPartition(format!(
                "type `{}` listed twice in novel set",
                TYPE_NAMES[t]
            )));
        }
        seen[t] = true;
    }
    let base: Vec<usize> = (0..TYPE_NAMES.len()).filter(|t| !seen[*t]).collect();
    if base.is_empty() {
        return Err(DataError::BadPartition(
            "novel set covers every type; no base types left".into(),
        ));
    }
    Ok((base, novel))
}

// ---------------------------------------------------------------------------
// generation

/// Render every instance of the configured dataset into memory.
pub fn generate(config: &RunConfig) -> Result<Dataset, DataError> {
    let (base_types, novel_types) = partition_types(&config.novel_types)?;
    let l0 = config.image_size;
    let mut images = Vec::with_capacity(config.species_count * config.images_per_species);
    for species in 0..config.species_count {
        let mut template = make_template(species_seed(config.dataset_seed, species));
        template.species = species;
        for instance in 0..config.images_per_species {
            let pose_seed = instance_seed(config.dataset_seed, species, instance);
            images.push(render_instance(&template, pose_seed, l0)?);
        }
    }

    let mut rng = Rng::derive(config.dataset_seed, &[0x73706c69]);
    let (train_species, test_species, train_images, test_images) = match config.species_split {
        SpeciesSplit::Unseen => {
            let mut order: Vec<usize> = (0..config.species_count).collect();
            rng.shuffle(&mut order);
            let n_test = ((config.species_count as f64 * config.test_species_fraction).round()
                as usize)
                .clamp(1, config.species_count - 1);
            let test: Vec<usize> = {
                let mut t = order[..n_test].to_vec();
                t.sort_unstable();
                t
            };
            let train: Vec<usize> = {
                let mut t = order[n_test..].to_vec();
                t.sort_unstable();
                t
            };
            let train_images = images_of_species(&images, &train);
            let test_images = images_of_species(&images, &test);
            (train, test, train_images, test_images)
        }
        SpeciesSplit::Seen => {
            let all: Vec<usize> = (0..config.species_count).collect();
            let mut train_images = Vec::new();
            let mut test_images = Vec::new();
            for &s in &all {
                let mut members: Vec<usize> = images
                    .iter()
                    .enumerate()
                    .filter(|(_, img)| img.species == s)
                    .map(|(i, _)| i)
                    .collect();
                rng.shuffle(&mut members);
                let n_test = ((members.len() as f64) * config.holdout_fraction).round() as usize;
                test_images.extend_from_slice(&members[..n_test]);
                train_images.extend_from_slice(&members[n_test..]);
            }
            train_images.sort_unstable();
            test_images.sort_unstable();
            (all.clone(), all, train_images, test_images)
        }
    };

    let limb_paths = LIMB_PATHS
        .iter()
        .map(|(a, b)| (template::type_id(a).unwrap(), template::type_id(b).unwrap()))
        .collect();

    Ok(Dataset {
        images,
        split: DatasetSplit {
            type_names: TYPE_NAMES.iter().map(|s| s.to_string()).collect(),
            base_types,
            novel_types,
            train_species,
            test_species,
            train_images,
            test_images,
            limb_paths,
        },
        l0,
    })
}

fn species_seed(dataset_seed: u64, species: usize) -> u64 {
    let mut rng = Rng::derive(dataset_seed, &[0x73706563, species as u64]);
    rng.next_u64()
}

fn instance_seed(dataset_seed: u64, species: usize, instance: usize) -> u64 {
    let mut rng = Rng::derive(dataset_seed, &[0x696e7374, species as u64, instance as u64]);
    rng.next_u64()
}

fn images_of_species(images: &[AnnotatedImage], species: &[usize]) -> Vec<usize> {
    images
        .iter()
        .enumerate()
        .filter(|(_, img)| species.contains(&img.species))
        .map(|(i, _)| i)
        .collect()
}

/// Generate and persist the dataset directory: PPM images, PGM masks,
/// `manifest.json`, and the split document (plus one split per fold when
/// leave-one-out is requested).
pub fn build_dataset(config: &RunConfig, dir: &Path) -> Result<Dataset, DataError> {
    let dataset = generate(config)?;
    std::fs::create_dir_all(dir.join("images")).map_err(IoError::from)?;
    std::fs::create_dir_all(dir.join("masks")).map_err(IoError::from)?;

    let mut records = Vec::with_capacity(dataset.images.len());
    for (i, img) in dataset.images.iter().enumerate() {
        let file = format!("images/img_{i:05}.ppm");
        let mask = format!("masks/img_{i:05}.pgm");
        ppm::write_ppm(&dir.join(&file), &img.pixels)?;
        ppm::write_pgm(&dir.join(&mask), &img.mask)?;
        records.push(ManifestRecord {
            file,
            mask,
            species: img.species,
            bbox: img.bbox,
            keypoints: img
                .keypoints
                .iter()
                .map(|kp| ManifestKeypoint {
                    type_name: TYPE_NAMES[kp.type_id].to_string(),
                    x: kp.pos[0],
                    y: kp.pos[1],
                    visible: kp.visible,
                })
                .collect(),
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &ManifestDoc {
            image_size: dataset.l0,
            records,
        },
    )?;

    write_json(&dir.join(&config.split_file), &split_doc(&dataset.split))?;

    if config.leave_one_out {
        for held_out in 0..config.species_count {
            let mut split = dataset.split.clone();
            split.test_species = vec![held_out];
            split.train_species = (0..config.species_count).filter(|&s| s != held_out).collect();
            split.train_images = images_of_species(&dataset.images, &split.train_species);
            split.test_images = images_of_species(&dataset.images, &split.test_species);
            write_json(
                &dir.join(format!("split_fold_{held_out}.json")),
                &split_doc(&split),
            )?;
        }
    }
    Ok(dataset)
}

fn split_doc(split: &DatasetSplit) -> SplitDoc {
    let name = |t: &usize| split.type_names[*t].clone();
    SplitDoc {
        species_partition: SpeciesPartitionDoc {
            train: split.train_species.clone(),
            test: split.test_species.clone(),
        },
        base_types: split.base_types.iter().map(name).collect(),
        novel_types: split.novel_types.iter().map(name).collect(),
        limb_paths: split
            .limb_paths
            .iter()
            .map(|(a, b)| (split.type_names[*a].clone(), split.type_names[*b].clone()))
            .collect(),
        train_images: split.train_images.clone(),
        test_images: split.test_images.clone(),
    }
}

/// Load a persisted dataset. Every keypoint type name in the manifest and
/// split document must resolve; base and novel sets must be disjoint.
pub fn load_dataset(dir: &Path, split_file: &str) -> Result<Dataset, DataError> {
    let manifest: ManifestDoc = read_json(&dir.join("manifest.json"))?;
    let split: SplitDoc = read_json(&dir.join(split_file))?;

    let base_types = resolve_types(&split.base_types)?;
    let novel_types = resolve_types(&split.novel_types)?;
    for t in &base_types {
        if novel_types.contains(t) {
            return Err(DataError::BadPartition(format!(
                "type `{}` appears in both base and novel sets",
                TYPE_NAMES[*t]
            )));
        }
    }
    let limb_paths = split
        .limb_paths
        .iter()
        .map(|(a, b)| {
            Ok((
                template::type_id(a).ok_or_else(|| DataError::UnknownType(a.clone()))?,
                template::type_id(b).ok_or_else(|| DataError::UnknownType(b.clone()))?,
            ))
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    let mut images = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let pixels = ppm::read_ppm(&dir.join(&record.file))?;
        let mask = ppm::read_pgm(&dir.join(&record.mask))?;
        let mut keypoints: Vec<Keypoint> = Vec::with_capacity(record.keypoints.len());
        for kp in &record.keypoints {
            let type_id = template::type_id(&kp.type_name)
                .ok_or_else(|| DataError::UnknownType(kp.type_name.clone()))?;
            keypoints.push(Keypoint {
                type_id,
                pos: [kp.x, kp.y],
                visible: kp.visible,
            });
        }
        keypoints.sort_by_key(|kp| kp.type_id);
        images.push(AnnotatedImage {
            pixels,
            mask,
            keypoints,
            bbox: record.bbox,
            species: record.species,
        });
    }

    Ok(Dataset {
        l0: manifest.image_size,
        images,
        split: DatasetSplit {
            type_names: TYPE_NAMES.iter().map(|s| s.to_string()).collect(),
            base_types,
            novel_types,
            train_species: split.species_partition.train,
            test_species: split.species_partition.test,
            train_images: split.train_images,
            test_images: split.test_images,
            limb_paths,
        },
    })
}

/// FNV-1a digest over every file in the directory (sorted by path), for
/// byte-identical regeneration checks.
pub fn directory_digest(dir: &Path) -> Result<u64, DataError> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files).map_err(IoError::from)?;
    files.sort();
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for path in &files {
        feed(path.strip_prefix(dir).unwrap_or(path).to_string_lossy().as_bytes());
        feed(&std::fs::read(path).map_err(IoError::from)?);
    }
    Ok(hash)
}

// ---------------------------------------------------------------------------
// episodes

/// One N-way-K-shot task.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Indices into `Dataset::images`.
    pub supports: Vec<usize>,
    pub query: usize,
    /// Requested types visible in at least one support.
    pub active_types: Vec<usize>,
    pub mode: EpisodeMode,
}

/// Draw supports and a query without replacement from `pool`.
///
/// In same-species mode all images share one species (chosen uniformly
/// among species with enough images); in mix-species mode images are drawn
/// from the whole pool.
pub fn sample_episode(
    dataset: &Dataset,
    pool: &[usize],
    requested_types: &[usize],
    k: usize,
    mode: EpisodeMode,
    rng: &mut Rng,
) -> Result<Episode, DataError> {
    let need = k + 1;
    let chosen: Vec<usize> = match mode {
        EpisodeMode::Same => {
            let mut by_species: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &idx in pool {
                by_species.entry(dataset.images[idx].species).or_default().push(idx);
            }
            let eligible: Vec<&Vec<usize>> =
                by_species.values().filter(|v| v.len() >= need).collect();
            if eligible.is_empty() {
                return Err(DataError::InsufficientImages {
                    need,
                    have: by_species.values().map(|v| v.len()).max().unwrap_or(0),
                });
            }
            let members = eligible[rng.below(eligible.len())];
            rng.choose_distinct(members.len(), need)
                .into_iter()
                .map(|i| members[i])
                .collect()
        }
        EpisodeMode::Mix => {
            if pool.len() < need {
                return Err(DataError::InsufficientImages {
                    need,
                    have: pool.len(),
                });
            }
            rng.choose_distinct(pool.len(), need)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        }
    };
    let (supports, query) = (chosen[..k].to_vec(), chosen[k]);
    let active_types: Vec<usize> = requested_types
        .iter()
        .copied()
        .filter(|&t| supports.iter().any(|&s| dataset.images[s].keypoint(t).visible))
        .collect();
    Ok(Episode {
        supports,
        query,
        active_types,
        mode,
    })
}
