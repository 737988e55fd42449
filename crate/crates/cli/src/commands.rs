//! Command implementations.

use crate::args::{self, load_config};
use crate::errors::CliError;
use crate::figures;
use fskd_core::autodiff::{grad_check as op_grad_check, registered_op_checks};
use fskd_core::config::{EvalTypes, RunConfig};
use fskd_core::io::image::ImageRgb;
use fskd_core::io::ppm;
use fskd_core::pipeline::{
    self, compute_ukp, episode_grad_check, evaluate, miniature_config, train_from, ModelState,
    TrainSnapshot,
};
use fskd_core::rng::Rng;
use fskd_core::synth::{self, sample_episode, AnnotatedImage, Dataset};
use fskd_core::tps::{solve_tps, tps_objective, warp_image, Correspondences};
use fskd_core::uncertainty::uncertainty_ellipse;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// The "Identical UC" baseline strength: 20^2 log(20^2).
fn identical_uc_strength() -> f64 {
    400.0 * 400.0f64.ln()
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(config.resolved_out_root()).join(&config.run_name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new("json.encode", e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    if config.data_dir.is_empty() {
        return Err(CliError::new("data.missing-path", "config key `data_dir` is empty"));
    }
    Ok(synth::load_dataset(Path::new(&config.data_dir), &config.split_file)?)
}

fn requested_types(config: &RunConfig, dataset: &Dataset) -> Vec<usize> {
    match config.eval_types {
        EvalTypes::Novel => dataset.split.novel_types.clone(),
        EvalTypes::Base => dataset.split.base_types.clone(),
    }
}

// ---------------------------------------------------------------------------

pub fn gen_data(argv: &[String]) -> Result<(), CliError> {
    let parsed = args::parse(argv, &["config"])?;
    let config = load_config(&parsed)?;
    if config.data_dir.is_empty() {
        return Err(CliError::new("data.missing-path", "config key `data_dir` is empty"));
    }
    let dir = PathBuf::from(&config.data_dir);
    std::fs::create_dir_all(&dir)?;
    let dataset = synth::build_dataset(&config, &dir)?;
    // resolved configuration rides along for provenance
    write_json(&dir.join("gen_config.json"), &config)?;
    let digest = synth::directory_digest(&dir)?;
    println!(
        "dataset: {} images, {} species ({} train / {} test), {} base + {} novel types",
        dataset.images.len(),
        config.species_count,
        dataset.split.train_species.len(),
        dataset.split.test_species.len(),
        dataset.split.base_types.len(),
        dataset.split.novel_types.len(),
    );
    println!("digest: {digest:016x}");
    Ok(())
}

#[derive(Serialize)]
struct TrainingLogDoc<'a> {
    config: &'a RunConfig,
    records: &'a [pipeline::TrainRecord],
    validation: &'a [pipeline::train::ValRecord],
    aborted_at: Option<usize>,
}

pub fn train(argv: &[String]) -> Result<(), CliError> {
    let parsed = args::parse(argv, &["config", "resume"])?;
    let config = load_config(&parsed)?;
    let dataset = load_dataset(&config)?;
    let dir = out_dir(&config)?;

    let (initial, snapshot) = match parsed.flag("resume") {
        Some(resume_dir) => {
            let resume_dir = Path::new(resume_dir);
            let state = ModelState::load(&resume_dir.join("checkpoint.json"))?;
            let text = std::fs::read_to_string(resume_dir.join("train_state.json"))?;
            let snapshot: TrainSnapshot = serde_json::from_str(&text)
                .map_err(|e| CliError::new("checkpoint", format!("train_state.json: {e}")))?;
            (state, Some(snapshot))
        }
        None => (ModelState::init(&config), None),
    };

    let outcome = train_from(&config, &dataset, initial, snapshot.as_ref())?;
    outcome.state.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("train_state.json"), &outcome.snapshot)?;
    write_json(
        &dir.join("training_log.json"),
        &TrainingLogDoc {
            config: &config,
            records: &outcome.log,
            validation: &outcome.validation,
            aborted_at: outcome.aborted_at,
        },
    )?;
    let trained = outcome.log.iter().filter(|r| !r.skipped).count();
    let tail: Vec<&pipeline::TrainRecord> =
        outcome.log.iter().filter(|r| !r.skipped).rev().take(50).collect();
    let tail_mean = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64
    };
    println!(
        "trained {} episodes ({} skipped); mean loss over last {}: {:.4}",
        trained,
        outcome.log.len() - trained,
        tail.len(),
        tail_mean
    );
    println!("checkpoint: {}", dir.join("checkpoint.json").display());
    if let Some(step) = outcome.aborted_at {
        return Err(CliError::new(
            "train.non-finite",
            format!("aborted at step {step}; last good checkpoint written"),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    config: &'a RunConfig,
    checkpoint: &'a str,
    report: &'a pipeline::EvalReport,
}

pub fn eval(argv: &[String]) -> Result<(), CliError> {
    let parsed = args::parse(argv, &["config", "checkpoint"])?;
    let config = load_config(&parsed)?;
    if config.eval_episodes == 0 {
        return Err(CliError::new("eval.zero-episodes", "eval_episodes must be positive"));
    }
    let checkpoint_path = parsed.require("checkpoint")?;
    let state = ModelState::load(Path::new(checkpoint_path))?;
    let dataset = load_dataset(&config)?;
    let dir = out_dir(&config)?.join("eval");
    std::fs::create_dir_all(&dir)?;

    let pool = dataset.split.test_images.clone();
    let requested = requested_types(&config, &dataset);
    let (report, overlays) = evaluate(
        &state,
        &dataset,
        &pool,
        &requested,
        &config,
        config.eval_seed,
        config.overlay_count,
    )?;
    write_json(
        &dir.join("metrics.json"),
        &MetricsDoc {
            config: &config,
            checkpoint: checkpoint_path,
            report: &report,
        },
    )?;
    for (i, overlay) in overlays.iter().enumerate() {
        let svg = figures::detection_overlay(&dataset, overlay, 2.0);
        std::fs::write(dir.join(format!("overlay_{i}.svg")), svg)?;
    }
    println!(
        "PCK@{:.2} = {:.4} +- {:.4} over {} episodes ({:?} types)",
        config.tau, report.pck_mean, report.ci95_half_width, report.episodes_scored, config.eval_types
    );
    for t in &report.per_type {
        println!("  {:10} {:.4} ({}/{})", t.name, t.pck, t.correct, t.visible);
    }
    if let (Some(sj), Some(sw)) = (report.spearman_strength, report.spearman_distinctiveness) {
        println!("calibration: spearman(J', d') = {sj:.3}, spearman(w, d') = {sw:.3}");
    }
    println!("metrics: {}", dir.join("metrics.json").display());
    Ok(())
}

fn read_correspondences(path: &str) -> Result<Correspondences, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("warp.corr-read", format!("{path}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::new(
            "warp.corr-parse",
            format!("{path}: line {} column {}: {e}", e.line(), e.column()),
        )
    })
}

/// Detection-driven correspondences: run the detector on one sampled test
/// episode and pair support keypoints with predicted query keypoints.
fn correspondences_from_checkpoint(
    state: &ModelState,
    dataset: &Dataset,
    config: &RunConfig,
    episode_seed: u64,
) -> Result<(Correspondences, ImageRgb), CliError> {
    let pool = dataset.split.test_images.clone();
    let all_types: Vec<usize> = (0..dataset.split.type_names.len()).collect();
    let mut rng = Rng::derive(episode_seed, &[0x77617270]);
    let episode = sample_episode(
        dataset,
        &pool,
        &all_types,
        config.k_shots,
        config.episode_mode,
        &mut rng,
    )?;
    let supports: Vec<&AnnotatedImage> =
        episode.supports.iter().map(|&i| &dataset.images[i]).collect();
    let query = &dataset.images[episode.query];
    let results = pipeline::detect(state, &supports, &query.pixels, &episode.active_types)?;
    let mut corr = Correspondences {
        source: Vec::new(),
        target: Vec::new(),
        strengths: Vec::new(),
        lambda: 1.0,
        target_gt: Some(Vec::new()),
    };
    for (type_id, estimate) in results {
        let Some(estimate) = estimate else { continue };
        let query_kp = query.keypoint(type_id);
        let support_kp = supports
            .iter()
            .find_map(|s| {
                let kp = s.keypoint(type_id);
                kp.visible.then_some(kp.pos)
            });
        let (Some(support_pos), true) = (support_kp, query_kp.visible) else {
            continue;
        };
        corr.source.push(support_pos);
        corr.target.push(estimate.position);
        corr.strengths
            .push(uncertainty_ellipse(estimate.covariance).map(|e| e.strength).unwrap_or(0.0));
        corr.target_gt.as_mut().unwrap().push(query_kp.pos);
    }
    if corr.source.len() < 3 {
        return Err(CliError::new(
            "warp.too-few-landmarks",
            format!("episode produced {} usable correspondences, need 3", corr.source.len()),
        ));
    }
    Ok((corr, query.pixels.clone()))
}

pub fn warp(argv: &[String]) -> Result<(), CliError> {
    let parsed = args::parse(
        argv,
        &["config", "query", "corr", "checkpoint", "mode", "out", "episode-seed"],
    )?;
    let mode = parsed.flag("mode").unwrap_or("all");
    if !["all", "gt", "identical-uc", "uncertainty"].contains(&mode) {
        return Err(CliError::usage(format!("unknown warp mode `{mode}`")));
    }
    let out = PathBuf::from(parsed.require("out")?);
    std::fs::create_dir_all(&out)?;

    let (corr, query) = match (parsed.flag("corr"), parsed.flag("checkpoint")) {
        (Some(corr_path), None) => {
            let corr = read_correspondences(corr_path)?;
            let query_path = parsed.require("query")?;
            let query = ppm::read_ppm(Path::new(query_path))?;
            (corr, query)
        }
        (None, Some(ckpt)) => {
            let config = load_config(&parsed)?;
            let state = ModelState::load(Path::new(ckpt))?;
            let dataset = load_dataset(&config)?;
            let seed: u64 = parsed
                .flag("episode-seed")
                .map(|s| s.parse().map_err(|_| CliError::usage("bad --episode-seed")))
                .transpose()?
                .unwrap_or(config.eval_seed);
            let (corr, query) = correspondences_from_checkpoint(&state, &dataset, &config, seed)?;
            #[derive(Serialize)]
            struct CorrDoc<'a> {
                config: &'a RunConfig,
                episode_seed: u64,
                #[serde(flatten)]
                correspondences: &'a Correspondences,
            }
            write_json(
                &out.join("correspondences.json"),
                &CorrDoc {
                    config: &config,
                    episode_seed: seed,
                    correspondences: &corr,
                },
            )?;
            (corr, query)
        }
        _ => {
            return Err(CliError::usage(
                "warp needs exactly one of --corr FILE or --checkpoint FILE",
            ))
        }
    };

    let size = (query.width, query.height);
    let pad = [0u8; 3];
    let mut emitted = Vec::new();
    let run_mode = |wanted: &str| mode == "all" || mode == wanted;

    if run_mode("gt") {
        if let Some(gt) = &corr.target_gt {
            let classic = Correspondences {
                source: corr.source.clone(),
                target: gt.clone(),
                strengths: vec![1.0; corr.source.len()],
                lambda: 0.0,
                target_gt: None,
            };
            let t = solve_tps(&classic, 0.0)?;
            ppm::write_ppm(&out.join("warped_gt.ppm"), &warp_image(&query, &t, size, pad))?;
            emitted.push("warped_gt.ppm");
        } else if mode == "gt" {
            return Err(CliError::new(
                "warp.missing-gt",
                "gt mode needs `P_gt` in the correspondence document",
            ));
        }
    }
    if run_mode("identical-uc") {
        let identical = Correspondences {
            strengths: vec![identical_uc_strength(); corr.source.len()],
            target_gt: None,
            ..corr.clone()
        };
        let t = solve_tps(&identical, corr.lambda)?;
        ppm::write_ppm(
            &out.join("warped_identical_uc.ppm"),
            &warp_image(&query, &t, size, pad),
        )?;
        emitted.push("warped_identical_uc.ppm");
    }
    if run_mode("uncertainty") {
        let t = solve_tps(&corr, corr.lambda)?;
        let objective = tps_objective(&corr, &t, corr.lambda)?;
        ppm::write_ppm(
            &out.join("warped_uncertainty.ppm"),
            &warp_image(&query, &t, size, pad),
        )?;
        emitted.push("warped_uncertainty.ppm");
        println!("uncertainty warp objective: {objective:.4}");
    }
    std::fs::write(out.join("comparison.svg"), figures::warp_overview(&query, &corr, 2.0))?;
    println!("wrote {} + comparison.svg in {}", emitted.join(", "), out.display());
    Ok(())
}

#[derive(Serialize)]
struct OpCheckRow {
    name: String,
    seeds: usize,
    max_rel_err: f64,
    pass: bool,
}

#[derive(Serialize)]
struct EpisodeCheckRow {
    seed: u64,
    max_rel_err: f64,
    worst_param: String,
    checked_params: usize,
    pass: bool,
}

#[derive(Serialize)]
struct GradCheckDoc<'a> {
    config: &'a RunConfig,
    op_tolerance: f64,
    episode_tolerance: f64,
    fd_step: f64,
    ops: Vec<OpCheckRow>,
    episode: Vec<EpisodeCheckRow>,
    pass: bool,
}

pub fn grad_check(argv: &[String]) -> Result<(), CliError> {
    let parsed = args::parse(argv, &["config", "out", "episode-seeds"])?;
    let config = load_config(&parsed)?;
    let episode_seeds: u64 = parsed
        .flag("episode-seeds")
        .map(|s| s.parse().map_err(|_| CliError::usage("bad --episode-seeds")))
        .transpose()?
        .unwrap_or(3);
    let step = 1e-5;
    let op_tol = 1e-4;
    let episode_tol = 1e-3;

    let mut ops = Vec::new();
    println!("{:<20} {:>12}  result", "op", "max rel err");
    for check in registered_op_checks() {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let x = check.sample_input(seed);
            let report = op_grad_check(check.build, &x, step, op_tol)
                .map_err(|e| CliError::new("gradcheck.op", format!("{}: {e}", check.name)))?;
            worst = worst.max(report.max_rel_err);
        }
        let pass = worst < op_tol;
        println!("{:<20} {:>12.3e}  {}", check.name, worst, if pass { "ok" } else { "FAIL" });
        ops.push(OpCheckRow {
            name: check.name.to_string(),
            seeds: 10,
            max_rel_err: worst,
            pass,
        });
    }

    // composed episode loss on the miniature configuration
    let mut mini = miniature_config();
    let mut episode_rows = Vec::new();
    println!("{:<20} {:>12}  result", "episode loss", "max rel err");
    let dataset = synth::generate(&mini)?;
    for seed in 0..episode_seeds {
        mini.model_seed = 1000 + seed;
        let state = ModelState::init(&mini);
        let mut rng = Rng::seed_from(seed);
        let episode = sample_episode(
            &dataset,
            &dataset.split.train_images,
            &dataset.split.base_types,
            mini.k_shots,
            mini.episode_mode,
            &mut rng,
        )?;
        let report = episode_grad_check(&state, &dataset, &episode, seed, step, episode_tol)?;
        println!(
            "{:<20} {:>12.3e}  {} (worst {})",
            format!("seed {seed}"),
            report.max_rel_err,
            if report.pass { "ok" } else { "FAIL" },
            report.worst_param
        );
        episode_rows.push(EpisodeCheckRow {
            seed,
            max_rel_err: report.max_rel_err,
            worst_param: report.worst_param,
            checked_params: report.checked_params,
            pass: report.pass,
        });
    }

    let pass = ops.iter().all(|r| r.pass) && episode_rows.iter().all(|r| r.pass);
    let doc = GradCheckDoc {
        config: &config,
        op_tolerance: op_tol,
        episode_tolerance: episode_tol,
        fd_step: step,
        ops,
        episode: episode_rows,
        pass,
    };
    let out_path = match parsed.flag("out") {
        Some(p) => PathBuf::from(p),
        None => out_dir(&config)?.join("gradcheck.json"),
    };
    write_json(&out_path, &doc)?;
    println!("report: {}", out_path.display());
    if !pass {
        return Err(CliError::new("gradcheck.failed", "gradient check failed"));
    }
    Ok(())
}

#[derive(Serialize)]
struct UkpDoc<'a> {
    config: &'a RunConfig,
    checkpoint: &'a str,
    episodes: usize,
    prototypes: Vec<UkpEntry>,
}

#[derive(Serialize)]
struct UkpEntry {
    name: String,
    values: Vec<f64>,
}

pub fn ukp(argv: &[String]) -> Result<(), CliError> {
    let parsed = args::parse(argv, &["config", "checkpoint"])?;
    let config = load_config(&parsed)?;
    let checkpoint_path = parsed.require("checkpoint")?;
    let state = ModelState::load(Path::new(checkpoint_path))?;
    let dataset = load_dataset(&config)?;
    let pool = dataset.split.test_images.clone();
    let all_types: Vec<usize> = (0..dataset.split.type_names.len()).collect();
    let prototypes = compute_ukp(
        &state,
        &dataset,
        &pool,
        &all_types,
        config.ukp_episodes,
        config.episode_mode,
        config.eval_seed,
    )?;
    let dir = out_dir(&config)?;
    let doc = UkpDoc {
        config: &config,
        checkpoint: checkpoint_path,
        episodes: config.ukp_episodes,
        prototypes: prototypes
            .iter()
            .map(|(t, v)| UkpEntry {
                name: dataset.split.type_names[*t].clone(),
                values: v.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("ukp.json"), &doc)?;
    println!(
        "universal prototypes for {} types over {} episodes -> {}",
        doc.prototypes.len(),
        config.ukp_episodes,
        dir.join("ukp.json").display()
    );
    Ok(())
}
