//! Soft nearest-neighbor quantization of hidden states against a latent set.
//!
//! Every position of the hidden-state block is replaced by a softmax-weighted
//! mixture of latent rows, weighted by negative squared Euclidean distance
//! over a temperature. As the temperature goes to zero this approaches a hard
//! nearest-neighbor lookup; as it grows, the plain mean of the latents.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub tau: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau.is_finite() {
            Ok(())
        } else {
            Err(Error::NonPositiveTemperature(self.tau))
        }
    }
}

/// Intermediate values of one quantization, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct Quantized {
    /// Squared distances, `[positions, k]`.
    pub distances: Var,
    /// Softmax weights over latents, `[positions, k]`.
    pub weights: Var,
    /// Quantized states, same shape as the input.
    pub output: Var,
}

/// Squared distances between the rows of `flat` (`[N, c]`) and `latents`
/// (`[k, c]`) via `‖v‖² + ‖l‖² − 2·v·lᵀ`.
pub fn squared_distances(tape: &mut Tape, flat: Var, latents: Var) -> Result<Var> {
    let k = tape.shape(latents)[0];
    let vsq = tape.mul(flat, flat)?;
    let vsq = tape.sum_axis(vsq, 1, true)?;
    let lsq = tape.mul(latents, latents)?;
    let lsq = tape.sum_axis(lsq, 1, true)?;
    let lsq = tape.reshape(lsq, vec![1, k])?;
    let lt = tape.t(latents)?;
    let cross = tape.matmul(flat, lt)?;
    let cross = tape.scale(cross, -2.0)?;
    let d = tape.add(vsq, lsq)?;
    tape.add(d, cross)
}

/// Full quantization returning distances and weights alongside the output.
pub fn soft_quantize_parts(tape: &mut Tape, states: Var, latents: Var, cfg: &QuantConfig) -> Result<Quantized> {
    cfg.validate()?;
    let shape = tape.shape(states).to_vec();
    let lshape = tape.shape(latents).to_vec();
    let c = *shape.last().ok_or_else(|| Error::DimMismatch("hidden states must have a channel axis".into()))?;
    if lshape.len() != 2 || lshape[1] != c {
        return Err(Error::DimMismatch(format!(
            "channel dim {c} must equal latent dim, latents are {lshape:?}"
        )));
    }
    let positions = tape.value(states).numel() / c;
    let flat = tape.reshape(states, vec![positions, c])?;
    let distances = squared_distances(tape, flat, latents)?;
    let logits = tape.scale(distances, -1.0 / cfg.tau)?;
    let weights = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(weights, latents)?;
    let output = tape.reshape(mixed, shape)?;
    Ok(Quantized { distances, weights, output })
}

/// Soft-quantizes `states` (`[..., c]`, usually `[b,f,h,w,c]`) against
/// `latents` (`[k, c]`). Differentiable in both arguments.
pub fn soft_quantize(tape: &mut Tape, states: Var, latents: Var, cfg: &QuantConfig) -> Result<Var> {
    Ok(soft_quantize_parts(tape, states, latents, cfg)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantize(states: &Tensor, latents: &Tensor, tau: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let l = tape.constant(latents.clone());
        let out = soft_quantize(&mut tape, s, l, &QuantConfig { tau })?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn single_latent_is_returned_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = Tensor::randn(vec![1, 2, 2, 2, 3], 1.0, &mut rng).unwrap();
        let l = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = quantize(&v, &l, 1.0).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, l.data());
        }
    }

    #[test]
    fn errors() {
        let v = Tensor::zeros(vec![1, 1, 1, 1, 3]).unwrap();
        let l = Tensor::zeros(vec![2, 4]).unwrap();
        assert!(matches!(quantize(&v, &l, 1.0), Err(Error::DimMismatch(_))));
        let l = Tensor::zeros(vec![2, 3]).unwrap();
        assert!(matches!(quantize(&v, &l, 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(matches!(quantize(&v, &l, -1.0), Err(Error::NonPositiveTemperature(_))));
    }

    #[test]
    fn expansion_matches_brute_force_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let v = Tensor::randn(vec![10, 4], 1.0, &mut rng).unwrap();
        let l = Tensor::randn(vec![6, 4], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let lv = tape.constant(l.clone());
        let d = squared_distances(&mut tape, vv, lv).unwrap();
        let d = tape.value(d);
        for i in 0..10 {
            for k in 0..6 {
                let brute: f64 = (0..4).map(|c| (v.at(&[i, c]) - l.at(&[k, c])).powi(2)).sum();
                assert!(d.at(&[i, k]) >= -1e-9);
                assert!((d.at(&[i, k]) - brute).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gradients_in_both_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let v = Tensor::randn(vec![1, 2, 2, 2, 4], 1.0, &mut rng).unwrap();
        let l = Tensor::randn(vec![5, 4], 1.0, &mut rng).unwrap();
        let w = Tensor::randn(vec![1, 2, 2, 2, 4], 1.0, &mut rng).unwrap();
        let cfg = QuantConfig::default();
        let weighted = |t: &mut Tape, out: Var| {
            let wv = t.constant(w.clone());
            let p = t.mul(out, wv)?;
            t.sum_all(p)
        };
        let ev = finite_diff_check(
            |t, x| {
                let lv = t.constant(l.clone());
                let o = soft_quantize(t, x, lv, &cfg)?;
                weighted(t, o)
            },
            &v,
            1e-4,
        )
        .unwrap();
        let el = finite_diff_check(
            |t, x| {
                let vv = t.constant(v.clone());
                let o = soft_quantize(t, vv, x, &cfg)?;
                weighted(t, o)
            },
            &l,
            1e-4,
        )
        .unwrap();
        assert!(ev < 1e-4 && el < 1e-4, "{ev} {el}");
    }

    #[test]
    fn lower_temperature_sharpens() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let v = Tensor::randn(vec![12, 4], 1.0, &mut rng).unwrap();
        let l = Tensor::randn(vec![7, 4], 1.0, &mut rng).unwrap();
        let max_weights = |tau: f64| {
            let mut tape = Tape::new();
            let vv = tape.constant(v.clone());
            let lv = tape.constant(l.clone());
            let q = soft_quantize_parts(&mut tape, vv, lv, &QuantConfig { tau }).unwrap();
            tape.value(q.weights).data().chunks(7).map(|r| r.iter().cloned().fold(0.0, f64::max)).collect::<Vec<_>>()
        };
        let taus = [10.0, 3.0, 1.0, 0.3, 0.1, 0.01];
        for pair in taus.windows(2) {
            let (hi, lo) = (max_weights(pair[0]), max_weights(pair[1]));
            for (a, b) in hi.iter().zip(&lo) {
                assert!(b + 1e-12 >= *a);
            }
        }
    }
}
