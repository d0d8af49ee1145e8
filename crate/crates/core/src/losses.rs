//! Region-amplified diffusion loss and the total training objective.

use serde::{Deserialize, Serialize};

use crate::attention::RegionMasks;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_hand: f64,
    pub lambda_face: f64,
    pub beta: f64,
    /// Divide by the sum of weights instead of the element count.
    pub weighted_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_hand: 5.0, lambda_face: 2.0, beta: 1e-4, weighted_mean: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_hand >= 1.0 && self.lambda_face >= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "amplification factors must be >= 1, got {} / {}",
                self.lambda_hand, self.lambda_face
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::ConfigInvalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// `lambda` where `mask > 0`, `1` elsewhere.
pub fn amplification_weights(mask: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::ConfigInvalid(format!("amplification factor must be > 0, got {lambda}")));
    }
    mask.map(|m| if m > 0.0 { lambda } else { 1.0 }, "amplification weights")
}

/// Combined per-cell weight `W_hand · W_face`, `[b, f, h, w, 1]`.
pub fn region_weights(masks: &RegionMasks, cfg: &LossConfig) -> Result<Tensor> {
    amplification_weights(&masks.hand, cfg.lambda_hand)?.mul(&amplification_weights(&masks.face, cfg.lambda_face)?)
}

/// Mean over all elements of `(target − pred)² · W_hand · W_face`.
pub fn diffusion_loss(tape: &mut Tape, target: Var, pred: Var, masks: &RegionMasks, cfg: &LossConfig) -> Result<Var> {
    let shape = tape.shape(target).to_vec();
    if shape != tape.shape(pred) {
        return Err(Error::ShapeMismatch(format!("target {shape:?} vs prediction {:?}", tape.shape(pred))));
    }
    let weights = region_weights(masks, cfg)?;
    let full = Tensor::zeros(shape.clone())?.add(&weights).map_err(|_| {
        Error::ShapeMismatch(format!("masks {:?} do not broadcast to {shape:?}", masks.hand.shape()))
    })?;
    if full.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("masks {:?} do not broadcast to {shape:?}", masks.hand.shape())));
    }
    let denom = if cfg.weighted_mean { full.sum_all() } else { full.numel() as f64 };
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    let w = tape.constant(weights);
    let weighted = tape.mul(sq, w)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, 1.0 / denom)
}

/// Convenience: [`diffusion_loss`] on plain tensors.
pub fn diffusion_loss_value(target: &Tensor, pred: &Tensor, masks: &RegionMasks, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let p = tape.constant(pred.clone());
    let l = diffusion_loss(&mut tape, t, p, masks, cfg)?;
    tape.value(l).item()
}

/// `diff + beta · ortho`.
pub fn total_loss(tape: &mut Tape, diff: Var, ortho: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::ConfigInvalid(format!("beta must be >= 0, got {beta}")));
    }
    let o = tape.scale(ortho, beta)?;
    tape.add(diff, o)
}

/// Downsamples a `[..., H, W, 1]` mask by `factor` with max-pooling, so a
/// latent cell is marked when any pixel it covers is.
pub fn downsample_mask_max(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let shape = mask.shape();
    let r = shape.len();
    if r < 3 || shape[r - 1] != 1 || factor == 0 || shape[r - 3] % factor != 0 || shape[r - 2] % factor != 0 {
        return Err(Error::ShapeMismatch(format!("cannot pool mask {shape:?} by {factor}")));
    }
    let (h, w) = (shape[r - 3], shape[r - 2]);
    let (oh, ow) = (h / factor, w / factor);
    let outer: usize = shape[..r - 3].iter().product();
    let mut out = vec![0.0f64; outer * oh * ow];
    for o in 0..outer {
        for y in 0..h {
            for x in 0..w {
                let v = mask.data()[(o * h + y) * w + x];
                let cell = &mut out[(o * oh + y / factor) * ow + x / factor];
                *cell = cell.max(v);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[r - 3] = oh;
    new_shape[r - 2] = ow;
    Tensor::new(new_shape, out)
}
