//! Episodic training with Adam, plus the whole-pipeline gradient check.

use super::forward::bind_model;
use super::loss::{episode_loss_graph, episode_loss_value, EncodedEpisode};
use super::model::{ModelParams, ModelState};
use super::PipelineError;
use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::pipeline::features::FeatureMap;
use crate::rng::Rng;
use crate::synth::{sample_episode, Dataset, Episode};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One training step's logged losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub group: f64,
    /// Episode skipped (no supervisable keypoints).
    pub skipped: bool,
}

/// Validation PCK measured during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub pck: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<TrainRecord>,
    pub validation: Vec<ValRecord>,
    /// Step at which training aborted on a non-finite loss, if any; the
    /// returned state is the last good one.
    pub aborted_at: Option<usize>,
    /// Optimizer state + step counter for exact resumption.
    pub snapshot: TrainSnapshot,
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub next_step: usize,
    pub adam: AdamSnapshot,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(shapes: &[Vec<usize>], lr: f64) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            lr,
        }
    }

    fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            m: self.m.clone(),
            v: self.v.clone(),
            t: self.t,
        }
    }

    fn restore(snapshot: &AdamSnapshot, lr: f64) -> Self {
        Self {
            m: snapshot.m.clone(),
            v: snapshot.v.clone(),
            t: snapshot.t,
            lr,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = grad.data()[i];
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn episode_rng(train_seed: u64, step: usize) -> Rng {
    Rng::derive(train_seed, &[0x65706973, step as u64])
}

fn path_seed(train_seed: u64, step: usize) -> u64 {
    let mut rng = Rng::derive(train_seed, &[0x70736565, step as u64]);
    rng.next_u64()
}

/// Encode an episode, reusing cached frozen feature maps per image.
fn encode_cached(
    params: &ModelParams,
    dataset: &Dataset,
    episode: &Episode,
    patch: usize,
    cache: &mut HashMap<usize, FeatureMap>,
) -> Result<EncodedEpisode, PipelineError> {
    let get = |idx: usize, cache: &mut HashMap<usize, FeatureMap>| -> Result<FeatureMap, PipelineError> {
        if let Some(fm) = cache.get(&idx) {
            return Ok(fm.clone());
        }
        let fm = super::features::encode_image(&dataset.images[idx].pixels, &params.encoder, patch)?;
        cache.insert(idx, fm.clone());
        Ok(fm)
    };
    let supports = episode
        .supports
        .iter()
        .map(|&i| get(i, cache))
        .collect::<Result<Vec<_>, _>>()?;
    let query = get(episode.query, cache)?;
    Ok(EncodedEpisode { supports, query })
}

/// Train a fresh model on the dataset's training pool with base keypoints.
/// Deterministic for fixed (dataset, config) seeds; episodes without
/// supervisable keypoints are skipped and logged.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome, PipelineError> {
    train_from(config, dataset, ModelState::init(config), None)
}

/// Continue training from a saved model and optimizer snapshot. Resuming
/// reproduces the non-resumed run bit-exactly because episode sampling is
/// keyed on the absolute step index.
pub fn train_from(
    config: &RunConfig,
    dataset: &Dataset,
    state: ModelState,
    resume: Option<&TrainSnapshot>,
) -> Result<TrainOutcome, PipelineError> {
    let mut state = state;
    // the run's config governs from here on; architecture must agree
    let reference = ModelParams::init(config);
    for ((name_a, t_a), (name_b, t_b)) in reference.named().iter().zip(state.params.named().iter())
    {
        if name_a != name_b || t_a.shape() != t_b.shape() {
            return Err(PipelineError::Checkpoint(format!(
                "resumed parameters incompatible with config: {name_b} {:?} vs {name_a} {:?}",
                t_b.shape(),
                t_a.shape()
            )));
        }
    }
    if reference.named().len() != state.params.named().len() {
        return Err(PipelineError::Checkpoint(
            "resumed parameter count differs from config".into(),
        ));
    }
    state.config = config.clone();
    let trainable: Vec<String> = state
        .params
        .named()
        .iter()
        .filter(|(n, _)| ModelParams::is_trainable(n))
        .map(|(n, _)| n.clone())
        .collect();
    let shapes: Vec<Vec<usize>> = state
        .params
        .named()
        .iter()
        .filter(|(n, _)| ModelParams::is_trainable(n))
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = match resume {
        Some(snapshot) => Adam::restore(&snapshot.adam, config.learning_rate),
        None => Adam::new(&shapes, config.learning_rate),
    };
    let start_step = resume.map(|s| s.next_step).unwrap_or(0);

    let mut log = Vec::with_capacity(config.train_episodes.saturating_sub(start_step));
    let mut validation = Vec::new();
    let mut cache: HashMap<usize, FeatureMap> = HashMap::new();
    let pool = dataset.split.train_images.clone();

    for step in start_step..config.train_episodes {
        let mut rng = episode_rng(config.train_seed, step);
        let episode = sample_episode(
            dataset,
            &pool,
            &dataset.split.base_types,
            config.k_shots,
            config.episode_mode,
            &mut rng,
        )?;
        let encoded = encode_cached(&state.params, dataset, &episode, config.patch_size, &mut cache)?;

        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &state.params, true);
        let built = episode_loss_graph(
            &mut tape,
            &bound,
            &encoded,
            dataset,
            &episode,
            config,
            path_seed(config.train_seed, step),
        );
        let (loss, breakdown) = match built {
            Ok(ok) => ok,
            Err(PipelineError::NoSupervision) => {
                log.push(TrainRecord {
                    step,
                    total: 0.0,
                    main: 0.0,
                    aux: 0.0,
                    group: 0.0,
                    skipped: true,
                });
                continue;
            }
            Err(other) => return Err(other),
        };
        if !breakdown.total.is_finite() {
            let snapshot = TrainSnapshot {
                next_step: step,
                adam: adam.snapshot(),
            };
            return Ok(TrainOutcome {
                state,
                log,
                validation,
                aborted_at: Some(step),
                snapshot,
            });
        }

        let grads = tape.backward(loss)?;
        let grad_tensors: Vec<Tensor> = trainable
            .iter()
            .map(|name| {
                let (_, var) = bound
                    .named
                    .iter()
                    .find(|(n, _)| n == name)
                    .expect("bound model covers trainable params");
                let shape = tape.value(*var).shape().to_vec();
                grads.get_or_zeros(*var, &shape)
            })
            .collect();
        {
            let mut views = state.params.named_mut();
            let mut refs: Vec<&mut Tensor> = views
                .iter_mut()
                .filter(|(n, _)| ModelParams::is_trainable(n))
                .map(|(_, t)| &mut **t)
                .collect();
            adam.step(&mut refs, &grad_tensors);
        }

        log.push(TrainRecord {
            step,
            total: breakdown.total,
            main: breakdown.main,
            aux: breakdown.aux,
            group: breakdown.group,
            skipped: false,
        });

        if config.val_every > 0 && (step + 1) % config.val_every == 0 {
            let pck = validation_pck(&state, dataset, config, step)?;
            validation.push(ValRecord { step: step + 1, pck });
        }
    }

    let snapshot = TrainSnapshot {
        next_step: config.train_episodes,
        adam: adam.snapshot(),
    };
    Ok(TrainOutcome {
        state,
        log,
        validation,
        aborted_at: None,
        snapshot,
    })
}

/// Mean PCK over a few held-seed episodes from the training pool (base
/// types), used as the periodic validation signal.
fn validation_pck(
    state: &ModelState,
    dataset: &Dataset,
    config: &RunConfig,
    step: usize,
) -> Result<f64, PipelineError> {
    let mut scores = Vec::new();
    for i in 0..config.val_episodes {
        let mut rng = Rng::derive(config.train_seed, &[0x76616c, step as u64, i as u64]);
        let episode = sample_episode(
            dataset,
            &dataset.split.train_images,
            &dataset.split.base_types,
            config.k_shots,
            config.episode_mode,
            &mut rng,
        )?;
        if let Some(score) = super::analysis::episode_pck(state, dataset, &episode, config.tau)? {
            scores.push(score);
        }
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Report of the whole-pipeline finite-difference check.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeGradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_component: usize,
    pub checked_params: usize,
    /// Components excluded because the difference stencil straddled a
    /// relu/clamp kink (the two one-sided slopes disagree while one of
    /// them matches the backward subgradient).
    pub kink_skips: usize,
    pub pass: bool,
}

/// Finite-difference check of every trainable parameter through the full
/// episode loss. Central differences with the given step; relative error
/// must stay below `tol`.
///
/// Central differences only estimate a derivative where the loss is
/// smooth across `[x - step, x + step]`. The network is piecewise smooth
/// (relu, clamps), so a perturbed coordinate occasionally pushes some
/// activation across its kink; such stencils are detected (the forward
/// and backward one-sided slopes disagree while one of them confirms the
/// backward-pass subgradient) and excluded rather than counted as
/// gradient errors.
pub fn episode_grad_check(
    state: &ModelState,
    dataset: &Dataset,
    episode: &Episode,
    path_seed: u64,
    fd_step: f64,
    tol: f64,
) -> Result<EpisodeGradCheck, PipelineError> {
    let config = &state.config;
    let encoded = super::loss::encode_episode(&state.params, dataset, episode, config.patch_size)?;

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &state.params, true);
    let (loss, breakdown) =
        episode_loss_graph(&mut tape, &bound, &encoded, dataset, episode, config, path_seed)?;
    let base_value = breakdown.total;
    let grads = tape.backward(loss)?;
    let analytic: Vec<(String, Tensor)> = bound
        .named
        .iter()
        .filter(|(n, _)| ModelParams::is_trainable(n))
        .map(|(n, var)| {
            let shape = tape.value(*var).shape().to_vec();
            (n.clone(), grads.get_or_zeros(*var, &shape))
        })
        .collect();

    let mut probe = state.params.clone();
    let mut max_rel = 0.0f64;
    let mut worst_param = String::new();
    let mut worst_component = 0usize;
    let mut checked = 0usize;
    let mut kink_skips = 0usize;
    let rel_of = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    for (name, grad) in &analytic {
        checked += 1;
        let n = grad.numel();
        for i in 0..n {
            let orig = {
                let mut views = probe.named_mut();
                let (_, t) = views.iter_mut().find(|(pn, _)| pn == name).unwrap();
                let orig = t.data()[i];
                t.data_mut()[i] = orig + fd_step;
                orig
            };
            let plus =
                episode_loss_value(&probe, &encoded, dataset, episode, config, path_seed)?.total;
            {
                let mut views = probe.named_mut();
                let (_, t) = views.iter_mut().find(|(pn, _)| pn == name).unwrap();
                t.data_mut()[i] = orig - fd_step;
            }
            let minus =
                episode_loss_value(&probe, &encoded, dataset, episode, config, path_seed)?.total;
            {
                let mut views = probe.named_mut();
                let (_, t) = views.iter_mut().find(|(pn, _)| pn == name).unwrap();
                t.data_mut()[i] = orig;
            }
            let central = (plus - minus) / (2.0 * fd_step);
            let a = grad.data()[i];
            if a.abs() < 1e-9 && central.abs() < 1e-9 {
                continue;
            }
            let rel = rel_of(a, central);
            if rel >= tol {
                // kink check from the same three evaluations: a straddled
                // kink leaves exactly one one-sided slope on the analytic
                // branch while the other deviates asymmetrically; a wrong
                // gradient on a smooth stretch matches neither side
                let forward = (plus - base_value) / fd_step;
                let backward = (base_value - minus) / fd_step;
                let near = rel_of(a, forward).min(rel_of(a, backward));
                let far = rel_of(a, forward).max(rel_of(a, backward));
                if near < tol && far > tol && far > 5.0 * near.max(1e-12) {
                    kink_skips += 1;
                    continue;
                }
            }
            if rel > max_rel {
                max_rel = rel;
                worst_param = name.clone();
                worst_component = i;
            }
        }
    }
    Ok(EpisodeGradCheck {
        max_rel_err: max_rel,
        worst_param,
        worst_component,
        checked_params: checked,
        kink_skips,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EpisodeMode;
    use crate::pipeline::tests_support::{mini_config, mini_dataset};

    #[test]
    fn zero_steps_returns_initialized_state() {
        let mut config = mini_config();
        config.train_episodes = 0;
        let dataset = mini_dataset(&config);
        let outcome = train(&config, &dataset).unwrap();
        assert_eq!(outcome.state, ModelState::init(&config));
        assert!(outcome.log.is_empty());
        assert!(outcome.aborted_at.is_none());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let mut config = mini_config();
        config.train_episodes = 6;
        let dataset = mini_dataset(&config);
        let a = train(&config, &dataset).unwrap();
        let b = train(&config, &dataset).unwrap();
        assert_eq!(a.state, b.state);
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let mut config = mini_config();
        config.train_episodes = 8;
        let dataset = mini_dataset(&config);
        let full = train(&config, &dataset).unwrap();

        let mut half_config = config.clone();
        half_config.train_episodes = 4;
        let half = train(&half_config, &dataset).unwrap();
        let resumed = train_from(&config, &dataset, half.state, Some(&half.snapshot)).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.log.len(), 4);
        assert_eq!(
            resumed.log.last().unwrap().total.to_bits(),
            full.log.last().unwrap().total.to_bits()
        );
    }

    #[test]
    fn checkpoint_resume_reproduces_losses() {
        let mut config = mini_config();
        config.train_episodes = 4;
        let dataset = mini_dataset(&config);
        let outcome = train(&config, &dataset).unwrap();
        let json = outcome.state.to_json();
        let restored = ModelState::from_json(&json).unwrap();
        // identical losses on a fresh episode
        let mut rng = Rng::seed_from(77);
        let episode = sample_episode(
            &dataset,
            &dataset.split.train_images,
            &dataset.split.base_types,
            config.k_shots,
            EpisodeMode::Same,
            &mut rng,
        )
        .unwrap();
        let enc_a =
            super::super::loss::encode_episode(&outcome.state.params, &dataset, &episode, config.patch_size)
                .unwrap();
        let a = episode_loss_value(&outcome.state.params, &enc_a, &dataset, &episode, &config, 1)
            .unwrap();
        let enc_b =
            super::super::loss::encode_episode(&restored.params, &dataset, &episode, config.patch_size)
                .unwrap();
        let b = episode_loss_value(&restored.params, &enc_b, &dataset, &episode, &config, 1).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn loss_decreases_on_fixed_episode() {
        // repeated gradient steps on one episode must reduce its loss
        let mut config = mini_config();
        config.train_episodes = 0;
        let dataset = mini_dataset(&config);
        for seed in [1u64, 2, 3] {
            let mut state = ModelState::init(&{
                let mut c = config.clone();
                c.model_seed = seed;
                c
            });
            let mut rng = Rng::seed_from(seed);
            let episode = sample_episode(
                &dataset,
                &dataset.split.train_images,
                &dataset.split.base_types,
                1,
                EpisodeMode::Same,
                &mut rng,
            )
            .unwrap();
            let encoded = super::super::loss::encode_episode(
                &state.params,
                &dataset,
                &episode,
                config.patch_size,
            )
            .unwrap();
            let shapes: Vec<Vec<usize>> = state
                .params
                .named()
                .iter()
                .filter(|(n, _)| ModelParams::is_trainable(n))
                .map(|(_, t)| t.shape().to_vec())
                .collect();
            let names: Vec<String> = state
                .params
                .named()
                .iter()
                .filter(|(n, _)| ModelParams::is_trainable(n))
                .map(|(n, _)| n.clone())
                .collect();
            let mut adam = Adam::new(&shapes, 1e-3);
            let mut first = None;
            let mut last = 0.0;
            for _ in 0..200 {
                let mut tape = Tape::new();
                let bound = bind_model(&mut tape, &state.params, true);
                let (loss, breakdown) =
                    episode_loss_graph(&mut tape, &bound, &encoded, &dataset, &episode, &config, 9)
                        .unwrap();
                let grads = tape.backward(loss).unwrap();
                let grad_tensors: Vec<Tensor> = names
                    .iter()
                    .map(|name| {
                        let (_, var) =
                            bound.named.iter().find(|(n, _)| n == name).unwrap();
                        let shape = tape.value(*var).shape().to_vec();
                        grads.get_or_zeros(*var, &shape)
                    })
                    .collect();
                let mut views = state.params.named_mut();
                let mut refs: Vec<&mut Tensor> = views
                    .iter_mut()
                    .filter(|(n, _)| ModelParams::is_trainable(n))
                    .map(|(_, t)| &mut **t)
                    .collect();
                adam.step(&mut refs, &grad_tensors);
                first.get_or_insert(breakdown.total);
                last = breakdown.total;
            }
            let first = first.unwrap();
            assert!(
                last < first,
                "seed {seed}: loss failed to decrease ({first} -> {last})"
            );
        }
    }
}
