//! Training configuration: one flat, JSON-compatible record of every tunable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{BlockConfig, MaskCombine, MixerConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::softquant::QuantConfig;
use crate::synthdata::ClipDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_ris: bool,
    /// Only consulted when `use_ris` is set.
    pub use_quantize: bool,
    pub use_ortho: bool,
    pub use_id: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self { use_ris: true, use_quantize: true, use_ortho: true, use_id: true };
    pub const NONE: Self = Self { use_ris: false, use_quantize: false, use_ortho: false, use_id: false };
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub lambda_hand: f64,
    pub lambda_face: f64,
    pub beta: f64,

    /// Spatial latent count.
    pub n: usize,
    /// Temporal latent count.
    pub m: usize,
    /// Hidden width, shared by the latents.
    pub d: usize,
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Channels of the clip latents fed to the denoiser.
    pub channels: usize,
    pub face_dim: usize,

    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,

    pub use_ris: bool,
    pub use_quantize: bool,
    pub use_ortho: bool,
    pub use_id: bool,
    pub mask_combine: MaskCombine,
    pub ortho_normalize: bool,
    pub weighted_mean: bool,
    pub attn_projections: bool,
    pub id_two_layer: bool,
    pub latent_init_scale: f64,

    /// Loss on the fixed probe batch is recorded every this many steps.
    pub probe_every: usize,
    /// Clips in the probe batch.
    pub probe_size: usize,
    /// Write an intermediate checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Diffusion step used for single-step reconstruction in eval.
    pub eval_t: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            alpha: 0.5,
            lambda_hand: 5.0,
            lambda_face: 2.0,
            beta: 1e-4,
            n: 32,
            m: 32,
            d: 16,
            batch: 2,
            frames: 4,
            height: 8,
            width: 8,
            channels: 4,
            face_dim: 16,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 300,
            lr: 1e-3,
            optimizer: OptimizerKind::Sgd,
            seed: 7,
            use_ris: true,
            use_quantize: true,
            use_ortho: true,
            use_id: true,
            mask_combine: MaskCombine::Product,
            ortho_normalize: false,
            weighted_mean: false,
            attn_projections: false,
            id_two_layer: false,
            latent_init_scale: crate::latents::DEFAULT_INIT_SCALE,
            probe_every: 10,
            probe_size: 4,
            checkpoint_every: 0,
            eval_t: 50,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::ConfigInvalid(format!("{name} must be >= 1")))
    } else {
        Ok(())
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization. Field order is fixed by the
    /// struct and floats use shortest round-trip formatting, so the digest is
    /// platform independent.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("m", self.m),
            ("d", self.d),
            ("batch", self.batch),
            ("channels", self.channels),
            ("face_dim", self.face_dim),
            ("timesteps", self.timesteps),
            ("probe_size", self.probe_size),
        ] {
            positive(name, v)?;
        }
        self.quant().validate()?;
        self.mixer().validate()?;
        self.loss().validate()?;
        self.clip_dims().validate()?;
        if self.use_ortho && (self.n < 2 || self.m < 2) {
            return Err(Error::ConfigInvalid("orthogonality loss needs n, m >= 2".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::ConfigInvalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {} / {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.eval_t >= self.timesteps {
            return Err(Error::ConfigInvalid(format!("eval_t {} >= timesteps {}", self.eval_t, self.timesteps)));
        }
        if !(self.latent_init_scale >= 0.0 && self.latent_init_scale.is_finite()) {
            return Err(Error::ConfigInvalid("latent_init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_ris: self.use_ris,
            use_quantize: self.use_quantize,
            use_ortho: self.use_ortho,
            use_id: self.use_id,
        }
    }

    pub fn with_flags(&self, flags: AblationFlags) -> Self {
        Self {
            use_ris: flags.use_ris,
            use_quantize: flags.use_quantize,
            use_ortho: flags.use_ortho,
            use_id: flags.use_id,
            ..self.clone()
        }
    }

    pub fn quant(&self) -> QuantConfig {
        QuantConfig { tau: self.tau }
    }

    pub fn mixer(&self) -> MixerConfig {
        MixerConfig { alpha: self.alpha, mask_combine: self.mask_combine }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig { quant: self.quant(), mixer: self.mixer(), skip_quantize: !self.use_quantize }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_hand: self.lambda_hand,
            lambda_face: self.lambda_face,
            beta: self.beta,
            weighted_mean: self.weighted_mean,
        }
    }

    pub fn clip_dims(&self) -> ClipDims {
        ClipDims {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            face_dim: self.face_dim,
        }
    }
}
