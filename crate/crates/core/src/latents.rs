//! Learnable interaction latents and their orthogonality penalty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default standard deviation of the latent initialization.
pub const DEFAULT_INIT_SCALE: f64 = 0.02;

/// Spatial (`n × d`) and temporal (`m × d`) interaction latents.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLatents {
    pub spatial: Tensor,
    pub temporal: Tensor,
}

impl InteractionLatents {
    /// Draws both matrices i.i.d. from normal(0, scale²), spatial first, from
    /// a generator seeded with `seed`.
    pub fn init(n: usize, m: usize, d: usize, seed: u64, scale: f64) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::InvalidDimension(format!("latents need n, m, d >= 1, got {n}, {m}, {d}")));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidDimension(format!("latent init scale must be >= 0, got {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spatial = Tensor::randn(vec![n, d], scale, &mut rng)?;
        let temporal = Tensor::randn(vec![m, d], scale, &mut rng)?;
        Ok(Self { spatial, temporal })
    }

    pub fn from_parts(spatial: Tensor, temporal: Tensor) -> Result<Self> {
        if spatial.rank() != 2 || temporal.rank() != 2 || spatial.shape()[1] != temporal.shape()[1] {
            return Err(Error::DimMismatch(format!(
                "latents must be [n,d] and [m,d], got {:?} and {:?}",
                spatial.shape(),
                temporal.shape()
            )));
        }
        Ok(Self { spatial, temporal })
    }

    pub fn n(&self) -> usize {
        self.spatial.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.temporal.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.spatial.shape()[1]
    }
}

/// Mean squared error between the off-diagonal entries of `L Lᵀ` and zero.
///
/// The denominator is the number of off-diagonal entries, `k·(k−1)`. With
/// `normalize` the rows are scaled to unit length first (cosine Gram).
pub fn orthogonality_loss(tape: &mut Tape, latents: Var, normalize: bool) -> Result<Var> {
    let shape = tape.shape(latents).to_vec();
    if shape.len() != 2 {
        return Err(Error::DimMismatch(format!("latents must be rank 2, got {shape:?}")));
    }
    let k = shape[0];
    if k < 2 {
        return Err(Error::TooFewLatents(k));
    }
    let rows = if normalize { tape.normalize_last(latents)? } else { latents };
    let rows_t = tape.t(rows)?;
    let gram = tape.matmul(rows, rows_t)?;
    let eye = tape.constant(Tensor::eye(k)?);
    let off = tape.constant(Tensor::ones(vec![k, k])?.sub(&Tensor::eye(k)?)?);
    let diff = tape.sub(gram, eye)?;
    let masked = tape.mul(diff, off)?;
    let sq = tape.mul(masked, masked)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / (k * (k - 1)) as f64)
}

/// Spatial plus temporal orthogonality loss.
pub fn combined_ortho_loss(tape: &mut Tape, spatial: Var, temporal: Var, normalize: bool) -> Result<Var> {
    let ls = orthogonality_loss(tape, spatial, normalize)?;
    let lt = orthogonality_loss(tape, temporal, normalize)?;
    tape.add(ls, lt)
}

/// Evaluates [`orthogonality_loss`] on a plain tensor.
pub fn orthogonality_loss_value(latents: &Tensor, normalize: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(latents.clone());
    let loss = orthogonality_loss(&mut tape, l, normalize)?;
    tape.value(loss).item()
}

/// Evaluates [`combined_ortho_loss`] on a latent pair.
pub fn combined_ortho_loss_value(latents: &InteractionLatents, normalize: bool) -> Result<f64> {
    Ok(orthogonality_loss_value(&latents.spatial, normalize)?
        + orthogonality_loss_value(&latents.temporal, normalize)?)
}
