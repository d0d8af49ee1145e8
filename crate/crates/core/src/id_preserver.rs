//! Identity injection: project face embeddings, cross-attend the hidden
//! states against them, and keep the result only inside the face mask.

use crate::attention::{hidden_dims, mixer, spatial_cross_attn, temporal_cross_attn, RegionMasks};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One or more identity embedding rows, `[e, d_face]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding(Tensor);

impl FaceEmbedding {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::DimMismatch(format!("face embedding must be [e, d_face], got {:?}", rows.shape())));
        }
        Ok(Self(rows))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// One affine layer of the embedding projection.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

/// Projection from face-embedding space to the hidden dimension. Hidden
/// layers, if any, use `tanh`.
#[derive(Debug, Clone)]
pub struct IdProjection {
    pub layers: Vec<AffineVars>,
}

impl IdProjection {
    pub fn single(weight: Var, bias: Var) -> Self {
        Self { layers: vec![AffineVars { weight, bias }] }
    }
}

/// `A_emb = W(A_face)`; accepts `[e, d_face]` or per-sample `[b, e, d_face]`.
pub fn project_embedding(tape: &mut Tape, face: Var, proj: &IdProjection) -> Result<Var> {
    let mut x = face;
    let last = proj.layers.len().checked_sub(1).ok_or_else(|| Error::ConfigInvalid("empty projection".into()))?;
    for (i, layer) in proj.layers.iter().enumerate() {
        let ws = tape.shape(layer.weight).to_vec();
        let xin = *tape.shape(x).last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != xin || tape.shape(layer.bias) != [ws[1]] {
            return Err(Error::DimMismatch(format!(
                "projection layer {i} is {ws:?} / {:?}, input dim {xin}",
                tape.shape(layer.bias)
            )));
        }
        let y = tape.matmul(x, layer.weight)?;
        x = tape.add(y, layer.bias)?;
        if i != last {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

/// Spatial and temporal cross-attention against the projected embedding,
/// mixed with `alpha`, then multiplied by the face mask.
///
/// `embedding` is `[e, d]` (shared) or `[b, 1, e, d]` (per sample).
pub fn id_attend(tape: &mut Tape, states: Var, embedding: Var, masks: &RegionMasks, alpha: f64) -> Result<Var> {
    let dims = hidden_dims(tape.shape(states))?;
    if masks.face.shape()[..4] != dims[..4] {
        return Err(Error::ShapeMismatch(format!(
            "face mask {:?} does not cover states {dims:?}",
            masks.face.shape()
        )));
    }
    let s = spatial_cross_attn(tape, states, embedding, None)?;
    let t = temporal_cross_attn(tape, states, embedding, None)?;
    let mixed = mixer(tape, s, t, alpha)?;
    let mf = tape.constant(masks.face.clone());
    tape.mul(mixed, mf)
}

/// `V^o = V_att + V_face`; shapes must match exactly.
pub fn fuse_outputs(tape: &mut Tape, attended: Var, face: Var) -> Result<Var> {
    if tape.shape(attended) != tape.shape(face) {
        return Err(Error::ShapeMismatch(format!(
            "fuse {:?} with {:?}",
            tape.shape(attended),
            tape.shape(face)
        )));
    }
    tape.add(attended, face)
}
