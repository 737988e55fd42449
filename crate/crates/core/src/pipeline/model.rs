//! Model parameters: the frozen patch encoder, the descriptor extractor,
//! per-scale localization heads, the group covariance head, and the
//! semantic-distinctiveness head. Includes seeded initialization and
//! bit-exact JSON checkpointing.

use super::PipelineError;
use crate::config::RunConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out, in]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

/// Two dense layers; the activation between/after them is decided by the
/// forward builders.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: DenseParams,
    pub l2: DenseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleHeadParams {
    pub scale: usize,
    /// grid classifier: descriptor -> hidden -> S^2 logits
    pub cls: Mlp2,
    /// offset regressor: descriptor -> hidden -> 2 S^2
    pub offset: Mlp2,
    /// latent covariance field: descriptor -> hidden -> 2d S^2
    pub covariance: Option<Mlp2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Frozen random patch projection `[C, 3 p^2]` (+ bias).
    pub encoder: DenseParams,
    /// Pooled attentive map -> descriptor.
    pub descriptor: Mlp2,
    pub heads: Vec<ScaleHeadParams>,
    /// Multi-keypoint covariance head: concat of m descriptors -> (2m)^2.
    pub group: Option<Mlp2>,
    /// Semantic distinctiveness head, per feature-map position: C -> 1.
    pub sd: Option<Mlp2>,
}

/// Trained (or initialized) model plus the configuration it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: RunConfig,
    pub params: ModelParams,
}

fn init_dense(rng_seed: u64, name: &str, out: usize, input: usize, bias: f64) -> DenseParams {
    let mut label: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        label ^= b as u64;
        label = label.wrapping_mul(0x100000001b3);
    }
    let mut rng = Rng::derive(rng_seed, &[label, out as u64, input as u64]);
    let scale = 1.0 / (input as f64).sqrt();
    let w = Tensor::new(
        vec![out, input],
        (0..out * input).map(|_| rng.normal() * scale).collect(),
    )
    .expect("init shape");
    DenseParams {
        w,
        b: Tensor::filled(&[out], bias),
    }
}

fn init_encoder(rng_seed: u64, out: usize, input: usize) -> DenseParams {
    let mut dense = init_dense(rng_seed, "encoder", out, input, 0.0);
    // non-zero bias so constant images still produce a feature response
    let mut rng = Rng::derive(rng_seed, &[0x656e632d62]);
    dense.b = Tensor::new(vec![out], (0..out).map(|_| rng.normal() * 0.3).collect())
        .expect("bias shape");
    dense
}

/// Small positive bias keeps relu inputs off the exact-zero kink even when
/// a whole feature vector vanishes (background positions produce exact
/// zeros through the frozen relu encoder).
const BIAS_INIT: f64 = 0.01;

fn init_mlp(seed: u64, name: &str, input: usize, hidden: usize, out: usize) -> Mlp2 {
    Mlp2 {
        l1: init_dense(seed, &format!("{name}.l1"), hidden, input, BIAS_INIT),
        l2: init_dense(seed, &format!("{name}.l2"), out, hidden, BIAS_INIT),
    }
}

impl ModelParams {
    /// Fresh parameters for a configuration, deterministic in the model seed.
    pub fn init(config: &RunConfig) -> Self {
        let seed = config.model_seed;
        let c = config.channels;
        let patch_in = 3 * config.patch_size * config.patch_size;
        let pooled = config.descriptor_pool * config.descriptor_pool * c;
        let d_psi = config.descriptor_dim;
        let heads = config
            .scales
            .iter()
            .map(|&s| ScaleHeadParams {
                scale: s,
                cls: init_mlp(seed, &format!("head.s{s}.cls"), d_psi, config.head_hidden, s * s),
                offset: init_mlp(
                    seed,
                    &format!("head.s{s}.offset"),
                    d_psi,
                    config.head_hidden,
                    2 * s * s,
                ),
                covariance: config.uncertainty.then(|| {
                    init_mlp(
                        seed,
                        &format!("head.s{s}.covariance"),
                        d_psi,
                        config.head_hidden,
                        2 * config.latent_dim * s * s,
                    )
                }),
            })
            .collect();
        let m = config.group_size;
        let group = (config.uncertainty && config.aux_keypoints && m >= 2).then(|| {
            init_mlp(
                seed,
                "group",
                m * d_psi,
                config.group_hidden,
                (2 * m) * (2 * m),
            )
        });
        let sd = config.uncertainty.then(|| {
            let mut mlp = init_mlp(seed, "sd", c, config.sd_hidden, 1);
            // start the distinctiveness output mid-range so the positivity
            // transform's pass-through band is occupied from the first step
            mlp.l2.b = Tensor::vector(&[0.3]);
            mlp
        });
        let mut descriptor = init_mlp(seed, "descriptor", pooled, d_psi, d_psi);
        // zero first-layer bias: the pre-activation tap stays exactly
        // linear in the attentive map (its input cannot vanish entirely,
        // so the relu kink is not reachable there)
        descriptor.l1.b = Tensor::zeros(&[d_psi]);
        Self {
            encoder: init_encoder(seed, c, patch_in),
            descriptor,
            heads,
            group,
            sd,
        }
    }

    fn mlp_names(prefix: &str) -> [String; 4] {
        [
            format!("{prefix}.l1.w"),
            format!("{prefix}.l1.b"),
            format!("{prefix}.l2.w"),
            format!("{prefix}.l2.b"),
        ]
    }

    /// Named views of every parameter tensor, frozen encoder included,
    /// in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        fn mlp<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, m: &'a Mlp2) {
            let names = ModelParams::mlp_names(prefix);
            let tensors = [&m.l1.w, &m.l1.b, &m.l2.w, &m.l2.b];
            for (name, t) in names.into_iter().zip(tensors) {
                out.push((name, t));
            }
        }
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.w".into(), &self.encoder.w),
            ("encoder.b".into(), &self.encoder.b),
        ];
        mlp(&mut out, "descriptor", &self.descriptor);
        for head in &self.heads {
            let s = head.scale;
            mlp(&mut out, &format!("head.s{s}.cls"), &head.cls);
            mlp(&mut out, &format!("head.s{s}.offset"), &head.offset);
            if let Some(cov) = &head.covariance {
                mlp(&mut out, &format!("head.s{s}.covariance"), cov);
            }
        }
        if let Some(group) = &self.group {
            mlp(&mut out, "group", group);
        }
        if let Some(sd) = &self.sd {
            mlp(&mut out, "sd", sd);
        }
        out
    }

    /// Mutable views in the same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn mlp<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, m: &'a mut Mlp2) {
            let names = ModelParams::mlp_names(prefix);
            let tensors = [&mut m.l1.w, &mut m.l1.b, &mut m.l2.w, &mut m.l2.b];
            for (name, t) in names.into_iter().zip(tensors) {
                out.push((name, t));
            }
        }
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("encoder.w".into(), &mut self.encoder.w),
            ("encoder.b".into(), &mut self.encoder.b),
        ];
        mlp(&mut out, "descriptor", &mut self.descriptor);
        for head in &mut self.heads {
            let s = head.scale;
            mlp(&mut out, &format!("head.s{s}.cls"), &mut head.cls);
            mlp(&mut out, &format!("head.s{s}.offset"), &mut head.offset);
            if let Some(cov) = &mut head.covariance {
                mlp(&mut out, &format!("head.s{s}.covariance"), cov);
            }
        }
        if let Some(group) = &mut self.group {
            mlp(&mut out, "group", group);
        }
        if let Some(sd) = &mut self.sd {
            mlp(&mut out, "sd", sd);
        }
        out
    }

    /// Names of trainable tensors (everything except the frozen encoder).
    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with("encoder.")
    }
}

// ---------------------------------------------------------------------------
// checkpointing

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    config: RunConfig,
    params: Vec<ParamDoc>,
}

impl ModelState {
    pub fn init(config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            params: ModelParams::init(config),
        }
    }

    pub fn to_json(&self) -> String {
        let doc = CheckpointDoc {
            config: self.config.clone(),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| ParamDoc {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        let mut state = Self::init(&doc.config);
        let mut loaded = 0usize;
        {
            let mut views = state.params.named_mut();
            for param in &doc.params {
                let Some((_, tensor)) = views.iter_mut().find(|(n, _)| n == &param.name) else {
                    return Err(PipelineError::Checkpoint(format!(
                        "unknown parameter `{}` for this configuration",
                        param.name
                    )));
                };
                if tensor.shape() != param.shape.as_slice() {
                    return Err(PipelineError::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        param.name,
                        param.shape,
                        tensor.shape()
                    )));
                }
                **tensor = Tensor::new(param.shape.clone(), param.values.clone())
                    .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
                loaded += 1;
            }
        }
        let expected = state.params.named().len();
        if loaded != expected {
            return Err(PipelineError::Checkpoint(format!(
                "checkpoint holds {loaded} parameters, model needs {expected}"
            )));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| PipelineError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
