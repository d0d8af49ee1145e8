//! Five-variant component ablation under identical seeds and step counts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, TrainConfig};
use crate::error::Result;
use crate::latents::combined_ortho_loss_value;
use crate::pipeline::eval::reconstruct;
use crate::pipeline::model::ToyDenoiser;
use crate::pipeline::schedule::NoiseSchedule;
use crate::pipeline::train::{train, LossTerms};
use crate::synthdata::Dataset;

pub const ABLATION_VERSION: u32 = 1;
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutRis,
    WithoutQuantize,
    WithoutOrtho,
    WithoutId,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::WithoutRis, Variant::WithoutQuantize, Variant::WithoutOrtho, Variant::WithoutId];

    pub fn flags(self) -> AblationFlags {
        let full = AblationFlags::FULL;
        match self {
            Variant::Full => full,
            Variant::WithoutRis => AblationFlags { use_ris: false, use_quantize: false, ..full },
            Variant::WithoutQuantize => AblationFlags { use_quantize: false, ..full },
            Variant::WithoutOrtho => AblationFlags { use_ortho: false, ..full },
            Variant::WithoutId => AblationFlags { use_id: false, ..full },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutRis => "w/o RIS",
            Variant::WithoutQuantize => "w/o quantize",
            Variant::WithoutOrtho => "w/o o-loss",
            Variant::WithoutId => "w/o ID",
        }
    }
}

/// Mean squared error of single-step clean-latent estimates, restricted to
/// cells inside the hand or face mask. Averaged over every clip and the
/// steps `T/4, T/2, 3T/4`, with fixed noise.
pub fn masked_reconstruction_error(model: &ToyDenoiser, cfg: &TrainConfig, dataset: &Dataset) -> Result<f64> {
    let sched = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let steps = [cfg.timesteps / 4, cfg.timesteps / 2, 3 * cfg.timesteps / 4];
    let (mut err, mut count) = (0.0, 0usize);
    for index in 0..dataset.clips.len() {
        for &t in &steps {
            let (batch, z0_hat) = reconstruct(model, cfg, cfg.flags(), &sched, dataset, index, t)?;
            let c = cfg.channels;
            let region = batch.masks.hand.maximum(&batch.masks.face)?;
            for (cell, &m) in region.data().iter().enumerate() {
                if m > 0.0 {
                    for k in 0..c {
                        let i = cell * c + k;
                        err += (z0_hat.data()[i] - batch.z0.data()[i]).powi(2);
                    }
                    count += c;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { err / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: String,
    pub flags: AblationFlags,
    pub steps: usize,
    pub initial: LossTerms,
    #[serde(rename = "final")]
    pub final_loss: LossTerms,
    /// Orthogonality loss of the trained latents, whether or not it was optimized.
    pub combined_ortho_loss: f64,
    pub masked_recon_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub config_digest: String,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

/// Trains each variant from the same initial weights, batches and noise.
/// Variant `i` runs on `cfg` with its flags substituted; `cfg`'s own flags
/// are ignored.
pub fn ablate(cfg: &TrainConfig, dataset: &Dataset) -> Result<AblationReport> {
    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let vcfg = cfg.with_flags(v.flags());
        let out = train(&vcfg, dataset, None)?;
        let model = &out.state.model;
        variants.push(VariantResult {
            variant: v,
            label: v.label().to_string(),
            flags: v.flags(),
            steps: out.report.steps,
            initial: out.report.initial,
            final_loss: out.report.final_loss,
            combined_ortho_loss: combined_ortho_loss_value(&model.latents()?, cfg.ortho_normalize)?,
            masked_recon_error: masked_reconstruction_error(model, &vcfg, dataset)?,
        });
    }
    Ok(AblationReport { version: ABLATION_VERSION, config_digest: cfg.digest(), variants })
}
