//! The region attention block: quantize, cross-attend spatially and
//! temporally against the interaction latents, mix, mask to the hand/face
//! region and add back onto the input.
//!
//! Hidden states are `[b, f, h, w, c]`. Spatial attention groups tokens by
//! `(batch, frame)` with `h·w` tokens each; temporal attention groups them by
//! `(batch, h, w)` with `f` tokens each. Keys and values are the latent rows,
//! shared across groups (`[k, d]`) or given per sample (`[b, 1, k, d]`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::softquant::{soft_quantize, QuantConfig};
use crate::tensor::Tensor;

/// A `[b, f, h, w, c]` activation block.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(Tensor);

impl HiddenStates {
    pub fn new(t: Tensor) -> Result<Self> {
        hidden_dims(t.shape())?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> [usize; 5] {
        hidden_dims(self.0.shape()).expect("validated on construction")
    }
}

pub(crate) fn hidden_dims(shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        &[b, f, h, w, c] => Ok([b, f, h, w, c]),
        _ => Err(Error::DimMismatch(format!("hidden states must be [b,f,h,w,c], got {shape:?}"))),
    }
}

/// Binary hand and face masks, `[b, f, h, w, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub hand: Tensor,
    pub face: Tensor,
}

impl RegionMasks {
    pub fn new(hand: Tensor, face: Tensor) -> Result<Self> {
        if hand.shape() != face.shape() {
            return Err(Error::ShapeMismatch(format!(
                "hand mask {:?} vs face mask {:?}",
                hand.shape(),
                face.shape()
            )));
        }
        let dims = hidden_dims(hand.shape())?;
        if dims[4] != 1 {
            return Err(Error::ShapeMismatch(format!("masks need a trailing unit axis, got {:?}", hand.shape())));
        }
        if hand.data().iter().chain(face.data()).any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::ConfigInvalid("masks must be binary".into()));
        }
        Ok(Self { hand, face })
    }

    pub fn ones(b: usize, f: usize, h: usize, w: usize) -> Result<Self> {
        let t = Tensor::ones(vec![b, f, h, w, 1])?;
        Ok(Self { hand: t.clone(), face: t })
    }

    pub fn zeros(b: usize, f: usize, h: usize, w: usize) -> Result<Self> {
        let t = Tensor::zeros(vec![b, f, h, w, 1])?;
        Ok(Self { hand: t.clone(), face: t })
    }

    /// The support the region block writes to.
    pub fn combined(&self, combine: MaskCombine) -> Result<Tensor> {
        match combine {
            MaskCombine::Product => self.hand.mul(&self.face),
            MaskCombine::Union => self.hand.maximum(&self.face),
        }
    }

    fn check_against(&self, states: &[usize]) -> Result<()> {
        let m = self.hand.shape();
        if m[..4] != states[..4] {
            return Err(Error::ShapeMismatch(format!("masks {m:?} do not cover states {states:?}")));
        }
        Ok(())
    }
}

/// How the hand and face masks are combined before masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskCombine {
    /// `M_h · M_f`: only cells covered by both.
    #[default]
    Product,
    /// `max(M_h, M_f)`: cells covered by either.
    Union,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub alpha: f64,
    pub mask_combine: MaskCombine,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self { alpha: 0.5, mask_combine: MaskCombine::Product }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("alpha must lie in [0, 1], got {}", self.alpha)))
        }
    }
}

/// Settings for [`region_attention_block`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockConfig {
    pub quant: QuantConfig,
    pub mixer: MixerConfig,
    /// When true the raw states go straight to attention.
    pub skip_quantize: bool,
}

/// Optional learned query/key/value maps, each `[d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnProjections {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// `softmax(Q Kᵀ / √d) · V` over the last two axes, leading axes broadcast.
pub fn cross_attn(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() < 2 || ks.len() < 2 || vs.len() < 2 {
        return Err(Error::DimMismatch("cross_attn operands need rank >= 2".into()));
    }
    let d = ks[ks.len() - 1];
    if qs[qs.len() - 1] != d {
        return Err(Error::DimMismatch(format!("query dim {} != key dim {d}", qs[qs.len() - 1])));
    }
    if ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(Error::DimMismatch(format!("keys {ks:?} and values {vs:?} disagree")));
    }
    let kt = tape.t(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let rank = tape.shape(scores).len();
    let weights = tape.softmax(scores, rank - 1)?;
    tape.matmul(weights, v)
}

fn project(tape: &mut Tape, x: Var, w: Option<Var>) -> Result<Var> {
    match w {
        Some(w) => tape.matmul(x, w),
        None => Ok(x),
    }
}

/// Checks keys are `[k, d]` or `[b, 1, k, d]` with `d` matching the states.
fn check_keys(tape: &Tape, keys: Var, b: usize, c: usize) -> Result<()> {
    match *tape.shape(keys) {
        [_, d] | [_, 1, _, d] if d != c => Err(Error::DimMismatch(format!("channel {c} != latent dim {d}"))),
        [_, _] => Ok(()),
        [kb, 1, _, _] if kb == b => Ok(()),
        ref s => Err(Error::DimMismatch(format!("keys must be [k,d] or [{b},1,k,d], got {s:?}"))),
    }
}

fn attend(tape: &mut Tape, q: Var, kv: Var, proj: Option<&AttnProjections>) -> Result<Var> {
    let q = project(tape, q, proj.map(|p| p.query))?;
    let k = project(tape, kv, proj.map(|p| p.key))?;
    let v = project(tape, kv, proj.map(|p| p.value))?;
    cross_attn(tape, q, k, v)
}

/// Attends every spatial token of each `(batch, frame)` slice against `kv`.
pub fn spatial_cross_attn(tape: &mut Tape, states: Var, kv: Var, proj: Option<&AttnProjections>) -> Result<Var> {
    let [b, f, h, w, c] = hidden_dims(tape.shape(states))?;
    check_keys(tape, kv, b, c)?;
    let q = tape.reshape(states, vec![b, f, h * w, c])?;
    let out = attend(tape, q, kv, proj)?;
    let d = *tape.shape(out).last().unwrap();
    tape.reshape(out, vec![b, f, h, w, d])
}

/// Attends the `f` frames at each `(batch, h, w)` site against `kv`.
pub fn temporal_cross_attn(tape: &mut Tape, states: Var, kv: Var, proj: Option<&AttnProjections>) -> Result<Var> {
    let [b, f, h, w, c] = hidden_dims(tape.shape(states))?;
    check_keys(tape, kv, b, c)?;
    let moved = tape.transpose(states, &[0, 2, 3, 1, 4])?;
    let q = tape.reshape(moved, vec![b, h * w, f, c])?;
    let out = attend(tape, q, kv, proj)?;
    let d = *tape.shape(out).last().unwrap();
    let out = tape.reshape(out, vec![b, h, w, f, d])?;
    tape.transpose(out, &[0, 3, 1, 2, 4])
}

/// `alpha · spatial + (1 − alpha) · temporal`.
pub fn mixer(tape: &mut Tape, spatial: Var, temporal: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::ConfigInvalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if tape.shape(spatial) != tape.shape(temporal) {
        return Err(Error::ShapeMismatch(format!(
            "mixer inputs {:?} and {:?}",
            tape.shape(spatial),
            tape.shape(temporal)
        )));
    }
    let s = tape.scale(spatial, alpha)?;
    let t = tape.scale(temporal, 1.0 - alpha)?;
    tape.add(s, t)
}

/// Restricts `states` to the hand/face region.
pub fn apply_region_mask(tape: &mut Tape, states: Var, masks: &RegionMasks, combine: MaskCombine) -> Result<Var> {
    masks.check_against(tape.shape(states))?;
    match combine {
        MaskCombine::Product => {
            let mh = tape.constant(masks.hand.clone());
            let mf = tape.constant(masks.face.clone());
            let x = tape.mul(states, mh)?;
            tape.mul(x, mf)
        }
        MaskCombine::Union => {
            let m = tape.constant(masks.combined(MaskCombine::Union)?);
            tape.mul(states, m)
        }
    }
}

/// Intermediate values of one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub quantized_spatial: Var,
    pub quantized_temporal: Var,
    pub attended_spatial: Var,
    pub attended_temporal: Var,
    pub mixed: Var,
    pub masked: Var,
    pub output: Var,
}

/// Full region attention block with every intermediate exposed.
pub fn region_attention_block_traced(
    tape: &mut Tape,
    input: Var,
    spatial_latents: Var,
    temporal_latents: Var,
    masks: &RegionMasks,
    cfg: &BlockConfig,
    proj: Option<&AttnProjections>,
) -> Result<BlockTrace> {
    cfg.mixer.validate()?;
    hidden_dims(tape.shape(input))?;
    masks.check_against(tape.shape(input))?;
    let (quantized_spatial, quantized_temporal) = if cfg.skip_quantize {
        (input, input)
    } else {
        (
            soft_quantize(tape, input, spatial_latents, &cfg.quant)?,
            soft_quantize(tape, input, temporal_latents, &cfg.quant)?,
        )
    };
    let attended_spatial = spatial_cross_attn(tape, quantized_spatial, spatial_latents, proj)?;
    let attended_temporal = temporal_cross_attn(tape, quantized_temporal, temporal_latents, proj)?;
    let mixed = mixer(tape, attended_spatial, attended_temporal, cfg.mixer.alpha)?;
    let masked = apply_region_mask(tape, mixed, masks, cfg.mixer.mask_combine)?;
    if tape.shape(masked) != tape.shape(input) {
        return Err(Error::ShapeMismatch(format!(
            "block output {:?} differs from input {:?}",
            tape.shape(masked),
            tape.shape(input)
        )));
    }
    let output = tape.add(input, masked)?;
    Ok(BlockTrace {
        quantized_spatial,
        quantized_temporal,
        attended_spatial,
        attended_temporal,
        mixed,
        masked,
        output,
    })
}

/// Region attention block: returns `input + mask(mix(attn_s, attn_t))`.
pub fn region_attention_block(
    tape: &mut Tape,
    input: Var,
    spatial_latents: Var,
    temporal_latents: Var,
    masks: &RegionMasks,
    cfg: &BlockConfig,
    proj: Option<&AttnProjections>,
) -> Result<Var> {
    Ok(region_attention_block_traced(tape, input, spatial_latents, temporal_latents, masks, cfg, proj)?.output)
}
