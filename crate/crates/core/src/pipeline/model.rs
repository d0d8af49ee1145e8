//! The toy denoiser: per-cell input projection, timestep FiLM, one region
//! attention block, the identity path, and an output projection predicting
//! the added noise.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{region_attention_block, AttnProjections, RegionMasks};
use crate::autodiff::{Tape, Var};
use crate::config::{AblationFlags, TrainConfig};
use crate::container::TensorMap;
use crate::error::{Error, Result};
use crate::id_preserver::{fuse_outputs, id_attend, project_embedding, AffineVars, IdProjection};
use crate::latents::InteractionLatents;
use crate::tensor::Tensor;

pub const SPATIAL_LATENTS: &str = "latents.spatial";
pub const TEMPORAL_LATENTS: &str = "latents.temporal";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// N(0, 1/fan_in).
    LeCun,
    Zeros,
    Latent,
}

fn layout(cfg: &TrainConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (c, d) = (cfg.channels, cfg.d);
    let mut v = vec![
        ("in_proj.weight".to_string(), vec![c, d], Init::LeCun),
        ("in_proj.bias".to_string(), vec![d], Init::Zeros),
        ("time.scale.weight".to_string(), vec![d, d], Init::LeCun),
        ("time.shift.weight".to_string(), vec![d, d], Init::LeCun),
        (SPATIAL_LATENTS.to_string(), vec![cfg.n, d], Init::Latent),
        (TEMPORAL_LATENTS.to_string(), vec![cfg.m, d], Init::Latent),
        ("id.0.weight".to_string(), vec![cfg.face_dim, d], Init::LeCun),
        ("id.0.bias".to_string(), vec![d], Init::Zeros),
        ("out_proj.weight".to_string(), vec![d, c], Init::LeCun),
        ("out_proj.bias".to_string(), vec![c], Init::Zeros),
    ];
    if cfg.id_two_layer {
        v.push(("id.1.weight".to_string(), vec![d, d], Init::LeCun));
        v.push(("id.1.bias".to_string(), vec![d], Init::Zeros));
    }
    if cfg.attn_projections {
        for p in ["query", "key", "value"] {
            v.push((format!("attn.{p}.weight"), vec![d, d], Init::LeCun));
        }
    }
    v
}

/// Named parameters of the denoiser. The parameter set depends only on the
/// config, never on the ablation flags, so every variant starts from the
/// same weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    params: TensorMap,
}

impl ToyDenoiser {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = TensorMap::new();
        let mut entries = layout(cfg);
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, shape, init) in entries {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape)?,
                Init::LeCun => {
                    let fan_in = shape[0] as f64;
                    Tensor::randn(shape, 1.0 / fan_in.sqrt(), &mut rng)?
                }
                Init::Latent => Tensor::randn(shape, cfg.latent_init_scale, &mut rng)?,
            };
            params.insert(name, t);
        }
        Ok(Self { params })
    }

    /// Wraps loaded parameters after checking names and shapes against `cfg`.
    pub fn from_params(cfg: &TrainConfig, params: TensorMap) -> Result<Self> {
        let want = layout(cfg);
        if want.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &want {
            let t = params.get(name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    pub fn into_params(self) -> TensorMap {
        self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn latents(&self) -> Result<InteractionLatents> {
        InteractionLatents::from_parts(self.param(SPATIAL_LATENTS)?.clone(), self.param(TEMPORAL_LATENTS)?.clone())
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingEntry(name.to_string()))
    }
}

/// Sinusoidal embedding of each step, `[b, 1, 1, 1, d]`.
pub fn timestep_embedding(t: &[usize], d: usize) -> Result<Tensor> {
    let half = d / 2;
    let mut out = vec![0.0; t.len() * d];
    for (i, &step) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            let a = step as f64 * freq;
            out[i * d + j] = a.sin();
            out[i * d + half + j] = a.cos();
        }
    }
    Tensor::new(vec![t.len(), 1, 1, 1, d], out)
}

/// Inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInputs<'a> {
    /// `[b, f, h, w, c]`.
    pub z_t: Var,
    pub t: &'a [usize],
    pub masks: &'a RegionMasks,
    /// `[b, face_dim]`.
    pub identity: &'a Tensor,
}

/// Predicts the noise in `z_t`. Which paths run is decided by `flags`;
/// the remaining model settings come from `cfg`.
pub fn denoise_step(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &TrainConfig,
    flags: AblationFlags,
    inputs: DenoiseInputs<'_>,
) -> Result<Var> {
    let shape = tape.shape(inputs.z_t).to_vec();
    let b = shape[0];
    if shape.len() != 5 || shape[4] != cfg.channels || inputs.t.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "z_t {shape:?} with {} steps, expected [b, f, h, w, {}]",
            inputs.t.len(),
            cfg.channels
        )));
    }
    let x = tape.matmul(inputs.z_t, p.get("in_proj.weight")?)?;
    let h0 = tape.add(x, p.get("in_proj.bias")?)?;

    let emb = tape.constant(timestep_embedding(inputs.t, cfg.d)?);
    let scale = tape.matmul(emb, p.get("time.scale.weight")?)?;
    let shift = tape.matmul(emb, p.get("time.shift.weight")?)?;
    let gained = tape.mul(h0, scale)?;
    let h1 = tape.add(h0, gained)?;
    let v_in = tape.add(h1, shift)?;

    let v_att = if flags.use_ris {
        let proj = if cfg.attn_projections {
            Some(AttnProjections {
                query: p.get("attn.query.weight")?,
                key: p.get("attn.key.weight")?,
                value: p.get("attn.value.weight")?,
            })
        } else {
            None
        };
        let block = crate::attention::BlockConfig { skip_quantize: !flags.use_quantize, ..cfg.block() };
        region_attention_block(
            tape,
            v_in,
            p.get(SPATIAL_LATENTS)?,
            p.get(TEMPORAL_LATENTS)?,
            inputs.masks,
            &block,
            proj.as_ref(),
        )?
    } else {
        v_in
    };

    let v_out = if flags.use_id {
        let idv = inputs.identity;
        if idv.shape() != [b, cfg.face_dim] {
            return Err(Error::DimMismatch(format!(
                "identity {:?}, expected [{b}, {}]",
                idv.shape(),
                cfg.face_dim
            )));
        }
        let face = tape.constant(idv.reshape(vec![b, 1, cfg.face_dim])?);
        let mut layers = vec![AffineVars { weight: p.get("id.0.weight")?, bias: p.get("id.0.bias")? }];
        if cfg.id_two_layer {
            layers.push(AffineVars { weight: p.get("id.1.weight")?, bias: p.get("id.1.bias")? });
        }
        let emb = project_embedding(tape, face, &IdProjection { layers })?;
        let emb = tape.reshape(emb, vec![b, 1, 1, cfg.d])?;
        let v_face = id_attend(tape, v_att, emb, inputs.masks, cfg.alpha)?;
        fuse_outputs(tape, v_att, v_face)?
    } else {
        v_att
    };

    let y = tape.matmul(v_out, p.get("out_proj.weight")?)?;
    tape.add(y, p.get("out_proj.bias")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> TrainConfig {
        TrainConfig { n: 4, m: 3, d: 6, channels: 2, face_dim: 5, ..TrainConfig::default() }
    }

    fn run(cfg: &TrainConfig, model: &ToyDenoiser, flags: AblationFlags, masks: &RegionMasks) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let z = Tensor::randn(vec![2, 3, 2, 2, cfg.channels], 1.0, &mut rng).unwrap();
        let id = Tensor::randn(vec![2, cfg.face_dim], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let zv = tape.constant(z);
        let inputs = DenoiseInputs { z_t: zv, t: &[3, 60], masks, identity: &id };
        let out = denoise_step(&mut tape, &p, cfg, flags, inputs).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn parameter_set_is_fixed_by_config() {
        let cfg = small();
        let a = ToyDenoiser::init(&cfg).unwrap();
        let b = ToyDenoiser::init(&cfg.with_flags(AblationFlags::NONE)).unwrap();
        assert_eq!(a, b);
        // 2*6+6 + 2*36 + 4*6+3*6 + 5*6+6 + 6*2+2
        assert_eq!(a.param_count(), 18 + 72 + 42 + 36 + 14);
        let two = ToyDenoiser::init(&TrainConfig { id_two_layer: true, attn_projections: true, ..cfg }).unwrap();
        assert_eq!(two.param_count(), a.param_count() + 42 + 108);
        assert!(ToyDenoiser::from_params(&small(), two.into_params()).is_err());
    }

    #[test]
    fn all_flags_off_is_plain_projection() {
        let cfg = small();
        let model = ToyDenoiser::init(&cfg).unwrap();
        let masks = RegionMasks::ones(2, 3, 2, 2).unwrap();
        let out = run(&cfg, &model, AblationFlags::NONE, &masks);
        let zero_masks = RegionMasks::zeros(2, 3, 2, 2).unwrap();
        assert_eq!(out, run(&cfg, &model, AblationFlags::NONE, &zero_masks));
        let ris_only = AblationFlags { use_ris: true, use_quantize: true, ..AblationFlags::NONE };
        assert_eq!(out, run(&cfg, &model, ris_only, &zero_masks));
        assert_ne!(out, run(&cfg, &model, ris_only, &masks));
    }

    #[test]
    fn full_forward_is_reproducible() {
        let cfg = small();
        let model = ToyDenoiser::init(&cfg).unwrap();
        let masks = RegionMasks::ones(2, 3, 2, 2).unwrap();
        let a = run(&cfg, &model, AblationFlags::FULL, &masks);
        let b = run(&cfg, &ToyDenoiser::init(&cfg).unwrap(), AblationFlags::FULL, &masks);
        assert_eq!(a.shape(), &[2, 3, 2, 2, 2]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(&[0, 5], 4).unwrap();
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 5f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (5.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
