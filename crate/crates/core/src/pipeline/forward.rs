//! Differentiable forward builders shared by training and inference.
//!
//! Parameters are bound onto a tape as leaves (training) or constants
//! (inference); attentive feature maps enter as constants either way.

use super::model::{Mlp2, ModelParams};
use super::PipelineError;
use crate::autodiff::{Tape, VarId};
use crate::pipeline::features::FeatureMap;
use crate::tensor::Tensor;

/// Epsilon of the distinctiveness positivity transform
/// `f(x) = (x + sqrt(x^2 + eps)) / 2`. Kept well above the gradient
/// checker's finite-difference step: the transform's curvature peaks at
/// `1 / (2 sqrt(eps))`, and a smaller eps makes central differences at
/// step 1e-5 lose the tolerance to truncation error near x = 0.
pub const SD_TRANSFORM_EPS: f64 = 1e-2;
/// Lower clip of the distinctiveness map (the transform alone only
/// guarantees positivity).
pub const SD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy)]
pub struct BoundMlp {
    pub l1w: VarId,
    pub l1b: VarId,
    pub l2w: VarId,
    pub l2b: VarId,
}

pub struct BoundHead {
    pub scale: usize,
    pub cls: BoundMlp,
    pub offset: BoundMlp,
    pub covariance: Option<BoundMlp>,
}

/// Model parameters bound to tape nodes, plus the name -> node map used to
/// read gradients back out.
pub struct BoundModel {
    pub descriptor: BoundMlp,
    pub heads: Vec<BoundHead>,
    pub group: Option<BoundMlp>,
    pub sd: Option<BoundMlp>,
    /// Trainable tensors only, in [`ModelParams::named`] order.
    pub named: Vec<(String, VarId)>,
}

pub fn bind_model(tape: &mut Tape, params: &ModelParams, trainable: bool) -> BoundModel {
    let mut named = Vec::new();
    let mut bind = |tape: &mut Tape, name: &str, t: &Tensor| -> VarId {
        let id = if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        };
        named.push((name.to_string(), id));
        id
    };
    let mut bind_mlp = |tape: &mut Tape, prefix: &str, m: &Mlp2| -> BoundMlp {
        BoundMlp {
            l1w: bind(tape, &format!("{prefix}.l1.w"), &m.l1.w),
            l1b: bind(tape, &format!("{prefix}.l1.b"), &m.l1.b),
            l2w: bind(tape, &format!("{prefix}.l2.w"), &m.l2.w),
            l2b: bind(tape, &format!("{prefix}.l2.b"), &m.l2.b),
        }
    };
    let descriptor = bind_mlp(tape, "descriptor", &params.descriptor);
    let heads = params
        .heads
        .iter()
        .map(|h| BoundHead {
            scale: h.scale,
            cls: bind_mlp(tape, &format!("head.s{}.cls", h.scale), &h.cls),
            offset: bind_mlp(tape, &format!("head.s{}.offset", h.scale), &h.offset),
            covariance: h
                .covariance
                .as_ref()
                .map(|c| bind_mlp(tape, &format!("head.s{}.covariance", h.scale), c)),
        })
        .collect();
    let group = params.group.as_ref().map(|g| bind_mlp(tape, "group", g));
    let sd = params.sd.as_ref().map(|s| bind_mlp(tape, "sd", s));
    BoundModel {
        descriptor,
        heads,
        group,
        sd,
        named,
    }
}

fn dense(tape: &mut Tape, w: VarId, b: VarId, x: VarId) -> Result<VarId, PipelineError> {
    let wx = tape.matmul(w, x)?;
    Ok(tape.add(wx, b)?)
}

/// Hidden relu, linear output.
pub fn mlp_head(tape: &mut Tape, m: &BoundMlp, x: VarId) -> Result<VarId, PipelineError> {
    let h = dense(tape, m.l1w, m.l1b, x)?;
    let h = tape.relu(h);
    dense(tape, m.l2w, m.l2b, h)
}

/// Attentive map -> keypoint descriptor: block-average pool to r x r,
/// flatten, two dense+relu layers.
pub fn descriptor_node(
    tape: &mut Tape,
    bound: &BoundModel,
    attentive: &Tensor,
    pooled_side: usize,
) -> Result<VarId, PipelineError> {
    let side = attentive.shape()[0];
    let channels = attentive.shape()[2];
    let block = side / pooled_side;
    let a = tape.constant(attentive.clone());
    let pooled = tape.block_average_pool(a, block)?;
    let flat = tape.reshape(pooled, &[pooled_side * pooled_side * channels])?;
    let h = dense(tape, bound.descriptor.l1w, bound.descriptor.l1b, flat)?;
    let h = tape.relu(h);
    let out = dense(tape, bound.descriptor.l2w, bound.descriptor.l2b, h)?;
    Ok(tape.relu(out))
}

/// Pre-activation tap of the descriptor's first dense layer, on plain
/// tensors (used by the scale-equivariance property).
pub fn descriptor_preactivation(
    params: &ModelParams,
    attentive: &Tensor,
    pooled_side: usize,
) -> Result<Tensor, PipelineError> {
    let mut tape = Tape::new();
    let side = attentive.shape()[0];
    let channels = attentive.shape()[2];
    let a = tape.constant(attentive.clone());
    let pooled = tape.block_average_pool(a, side / pooled_side)?;
    let flat = tape.reshape(pooled, &[pooled_side * pooled_side * channels])?;
    let w = tape.constant(params.descriptor.l1.w.clone());
    let b = tape.constant(params.descriptor.l1.b.clone());
    let pre = dense(&mut tape, w, b, flat)?;
    Ok(tape.value(pre).clone())
}

/// One scale's head outputs for a descriptor.
pub struct HeadNodes {
    pub scale: usize,
    /// Softmaxed `[S, S]` grid probability map.
    pub prob: VarId,
    /// `[S, S, 2]` offset field squashed into (-1, 1).
    pub offsets: VarId,
    /// `[S, S, 2d]` latent covariance field (uncertainty mode).
    pub latent: Option<VarId>,
}

pub fn head_forward(
    tape: &mut Tape,
    head: &BoundHead,
    psi: VarId,
    latent_dim: usize,
) -> Result<HeadNodes, PipelineError> {
    let s = head.scale;
    let logits = mlp_head(tape, &head.cls, psi)?;
    let logits = tape.reshape(logits, &[s, s])?;
    let prob = tape.softmax(logits);
    let off = mlp_head(tape, &head.offset, psi)?;
    let off = tape.tanh(off);
    let offsets = tape.reshape(off, &[s, s, 2])?;
    let latent = match &head.covariance {
        Some(cov) => {
            let raw = mlp_head(tape, cov, psi)?;
            Some(tape.reshape(raw, &[s, s, 2 * latent_dim])?)
        }
        None => None,
    };
    Ok(HeadNodes {
        scale: s,
        prob,
        offsets,
        latent,
    })
}

/// Predicted offset (2-vector) at a grid cell, `cell = [x, y]`.
pub fn offset_at_cell(tape: &mut Tape, offsets: VarId, cell: [usize; 2]) -> Result<VarId, PipelineError> {
    Ok(tape.gather_cell(offsets, cell[1], cell[0])?)
}

/// Latent factor `Q` (2 x d) at a grid cell of the covariance field.
pub fn factor_at_cell(
    tape: &mut Tape,
    latent: VarId,
    cell: [usize; 2],
    latent_dim: usize,
) -> Result<VarId, PipelineError> {
    let v = tape.gather_cell(latent, cell[1], cell[0])?;
    Ok(tape.reshape(v, &[2, latent_dim])?)
}

/// Semantic distinctiveness map over an encoded image: per-position MLP,
/// positivity transform, clip into `(SD_FLOOR, 1]`. Returns an `[l, l]`
/// node.
pub fn sd_map_node(
    tape: &mut Tape,
    sd: &BoundMlp,
    fm: &FeatureMap,
) -> Result<VarId, PipelineError> {
    let positions = fm.side * fm.side;
    let x = tape.constant(fm.data.reshape(&[positions, fm.channels])?);
    let hidden = tape.value(sd.l1b).shape()[0];
    // bias rows via ones-column matmul so the bound bias stays trainable
    let ones = tape.constant(Tensor::new(vec![positions, 1], vec![1.0; positions]).unwrap());
    let w1t = tape.transpose(sd.l1w)?;
    let h = tape.matmul(x, w1t)?; // [positions, hidden]
    let b1_row = tape.reshape(sd.l1b, &[1, hidden])?;
    let b1 = tape.matmul(ones, b1_row)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let w2t = tape.transpose(sd.l2w)?;
    let raw = tape.matmul(h, w2t)?; // [positions, 1]
    let b2_row = tape.reshape(sd.l2b, &[1, 1])?;
    let b2 = tape.matmul(ones, b2_row)?;
    let raw = tape.add(raw, b2)?;
    let flat = tape.reshape(raw, &[positions])?;
    // f(x) = (x + sqrt(x^2 + eps)) / 2
    let sq = tape.mul(flat, flat)?;
    let sq = tape.add_scalar(sq, SD_TRANSFORM_EPS);
    let root = tape.sqrt(sq);
    let sum = tape.add(flat, root)?;
    let positive = tape.scale(sum, 0.5);
    let clipped = tape.clamp(positive, SD_FLOOR, 1.0);
    Ok(tape.reshape(clipped, &[fm.side, fm.side])?)
}

/// Bilinear sample of an `[l, l]` map node at pixel position `u`
/// (converted by the downsize factor). Corner samples return corner
/// values exactly.
pub fn sd_sample_node(
    tape: &mut Tape,
    map: VarId,
    side: usize,
    u: [f64; 2],
    downsize: f64,
) -> Result<VarId, PipelineError> {
    let last = (side - 1) as f64;
    let x = (u[0] * downsize).clamp(0.0, last);
    let y = (u[1] * downsize).clamp(0.0, last);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(side - 1), (y0 + 1).min(side - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut acc: Option<VarId> = None;
    for (yy, xx, weight) in [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ] {
        if weight == 0.0 {
            continue;
        }
        let v = tape.gather_flat(map, yy * side + xx)?;
        let term = tape.scale(v, weight);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one bilinear corner has weight"))
}

/// Flat argmax of a probability map value (first maximum wins).
pub fn argmax_cell(prob: &Tensor) -> [usize; 2] {
    let s = prob.shape()[1];
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in prob.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    [best % s, best / s]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::io::image::ImageRgb;
    use crate::pipeline::features::encode_image;
    use crate::pipeline::model::ModelParams;

    fn mini_config() -> RunConfig {
        let c = RunConfig {
            image_size: 72,
            channels: 8,
            descriptor_dim: 12,
            head_hidden: 6,
            sd_hidden: 4,
            group_hidden: 6,
            latent_dim: 4,
            scales: vec![4],
            group_size: 2,
            ..Default::default()
        };
        c.validate().unwrap();
        c
    }

    #[test]
    fn head_outputs_have_contracted_shapes_and_ranges() {
        let c = mini_config();
        let params = ModelParams::init(&c);
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, false);
        let attentive = Tensor::filled(&[6, 6, 8], 0.3);
        let psi = descriptor_node(&mut tape, &bound, &attentive, c.descriptor_pool).unwrap();
        assert_eq!(tape.value(psi).shape(), &[12]);
        let head = head_forward(&mut tape, &bound.heads[0], psi, c.latent_dim).unwrap();
        let prob = tape.value(head.prob);
        assert_eq!(prob.shape(), &[4, 4]);
        assert!((prob.sum() - 1.0).abs() < 1e-9);
        let offsets = tape.value(head.offsets);
        assert_eq!(offsets.shape(), &[4, 4, 2]);
        assert!(offsets.data().iter().all(|v| v.abs() < 1.0));
        let latent = tape.value(head.latent.unwrap());
        assert_eq!(latent.shape(), &[4, 4, 8]);
        let cell = argmax_cell(prob);
        assert!(cell[0] < 4 && cell[1] < 4);
    }

    #[test]
    fn sd_map_values_in_contracted_range() {
        let c = mini_config();
        let params = ModelParams::init(&c);
        let img = ImageRgb::filled(72, 72, [120, 80, 40]);
        let fm = encode_image(&img, &params.encoder, c.patch_size).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, false);
        let map = sd_map_node(&mut tape, bound.sd.as_ref().unwrap(), &fm).unwrap();
        let values = tape.value(map);
        assert_eq!(values.shape(), &[6, 6]);
        for &v in values.data() {
            assert!(v > 0.0 && v <= 1.0, "sd value {v} outside (0, 1]");
        }
    }

    #[test]
    fn sd_corner_sample_equals_corner_value() {
        let mut tape = Tape::new();
        let mut map_t = Tensor::zeros(&[4, 4]);
        map_t.data_mut()[0] = 0.7;
        let map = tape.constant(map_t);
        let v = sd_sample_node(&mut tape, map, 4, [0.0, 0.0], 4.0 / 48.0).unwrap();
        assert_eq!(tape.value(v).item(), 0.7);
    }

    #[test]
    fn sd_sample_interpolates_bilinearly() {
        let mut tape = Tape::new();
        let mut map_t = Tensor::zeros(&[2, 2]);
        map_t.set2(0, 0, 0.0);
        map_t.set2(0, 1, 1.0);
        map_t.set2(1, 0, 0.0);
        map_t.set2(1, 1, 1.0);
        let map = tape.constant(map_t);
        // halfway between columns -> 0.5
        let v = sd_sample_node(&mut tape, map, 2, [0.5, 0.0], 1.0).unwrap();
        assert!((tape.value(v).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn descriptor_preactivation_is_linear_in_input() {
        let c = mini_config();
        let params = ModelParams::init(&c);
        let a = {
            let mut t = Tensor::zeros(&[6, 6, 8]);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
            t
        };
        let base = descriptor_preactivation(&params, &a, c.descriptor_pool).unwrap();
        let scaled = descriptor_preactivation(&params, &a.scale(3.0), c.descriptor_pool).unwrap();
        // init biases are zero, so the pre-activation is exactly linear
        assert!(scaled.max_abs_diff(&base.scale(3.0)) < 1e-12);
    }

    #[test]
    fn gradient_flows_through_sd_map() {
        let c = mini_config();
        let mut params = ModelParams::init(&c);
        // shrink the output layer so the transform sits in its unclamped band
        if let Some(sd) = &mut params.sd {
            sd.l2.w = sd.l2.w.scale(0.01);
        }
        let mut img = ImageRgb::new(72, 72);
        for y in 0..72 {
            for x in 0..72 {
                img.put(x, y, [(x * 3) as u8, (y * 3) as u8, ((x + y) * 2) as u8]);
            }
        }
        let fm = encode_image(&img, &params.encoder, c.patch_size).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, true);
        let map = sd_map_node(&mut tape, bound.sd.as_ref().unwrap(), &fm).unwrap();
        let sample = sd_sample_node(&mut tape, map, fm.side, [30.0, 40.0], fm.downsize).unwrap();
        let grads = tape.backward(sample).unwrap();
        let w1 = bound
            .named
            .iter()
            .find(|(n, _)| n == "sd.l1.w")
            .map(|(_, v)| *v)
            .unwrap();
        let g = grads.get(w1);
        assert!(g.is_some());
        assert!(g.unwrap().data().iter().any(|v| v.abs() > 0.0));
    }
}
