//! Optimizer loop, checkpoints and the metrics report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::RegionMasks;
use crate::autodiff::Tape;
use crate::config::{AblationFlags, OptimizerKind, TrainConfig};
use crate::container::{self, TensorMap};
use crate::error::{Error, Result};
use crate::latents::{combined_ortho_loss, combined_ortho_loss_value};
use crate::losses::{diffusion_loss, total_loss};
use crate::pipeline::model::{denoise_step, BoundParams, DenoiseInputs, ToyDenoiser, SPATIAL_LATENTS, TEMPORAL_LATENTS};
use crate::pipeline::schedule::{add_noise, NoiseSchedule};
use crate::synthdata::{clip_seed, Dataset, Split};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.ialt";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_VERSION: u32 = 1;

const STEP_KEY: &str = "train.step";
const ADAM_T_KEY: &str = "optim.adam.t";
const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;
const BATCH_STREAM: u64 = 0x6261_7463_6800_0000;
const PROBE_STREAM: u64 = 0x7072_6f62_6500_0000;

/// One training (or probe) batch, fully materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[b, f, h, w, c]`.
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub masks: RegionMasks,
    /// `[b, face_dim]`.
    pub identity: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

impl Batch {
    /// Gathers clips `indices` from `dataset` with the given steps and a noise
    /// draw from `rng`.
    pub fn assemble<R: Rng + ?Sized>(dataset: &Dataset, indices: &[usize], t: Vec<usize>, rng: &mut R) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let clips: Vec<_> = indices.iter().map(|&i| &dataset.clips[i]).collect();
        let z0 = stack(&clips.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
        let eps = Tensor::randn(z0.shape().to_vec(), 1.0, rng)?;
        let masks = RegionMasks::new(
            stack(&clips.iter().map(|c| &c.hand_mask).collect::<Vec<_>>())?,
            stack(&clips.iter().map(|c| &c.face_mask).collect::<Vec<_>>())?,
        )?;
        let identity = stack(&clips.iter().map(|c| &c.identity).collect::<Vec<_>>())?;
        Ok(Self { z0, eps, t, masks, identity })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub diff: f64,
    pub ortho: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossTerms,
}

/// Builds the training objective on `tape`. Returns the scalar to minimize
/// together with the logged terms. The orthogonality value is always
/// reported; it only enters the objective when `use_ortho` is set.
pub fn objective(
    tape: &mut Tape,
    p: &BoundParams,
    model: &ToyDenoiser,
    cfg: &TrainConfig,
    flags: AblationFlags,
    sched: &NoiseSchedule,
    batch: &Batch,
) -> Result<(crate::autodiff::Var, LossTerms)> {
    let z_t = batch
        .t
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let per = batch.z0.numel() / batch.t.len();
            let z0 = Tensor::new(batch.z0.shape()[1..].to_vec(), batch.z0.data()[i * per..(i + 1) * per].to_vec())?;
            let e = Tensor::new(z0.shape().to_vec(), batch.eps.data()[i * per..(i + 1) * per].to_vec())?;
            add_noise(&z0, t, &e, sched)
        })
        .collect::<Result<Vec<_>>>()?;
    let z_t = stack(&z_t.iter().collect::<Vec<_>>())?;
    let zv = tape.constant(z_t);
    let inputs = DenoiseInputs { z_t: zv, t: &batch.t, masks: &batch.masks, identity: &batch.identity };
    let eps_hat = denoise_step(tape, p, cfg, flags, inputs)?;
    let target = tape.constant(batch.eps.clone());
    let diff = diffusion_loss(tape, target, eps_hat, &batch.masks, &cfg.loss())?;
    let diff_v = tape.value(diff).item()?;
    let (root, ortho_v) = if flags.use_ortho {
        let o = combined_ortho_loss(tape, p.get(SPATIAL_LATENTS)?, p.get(TEMPORAL_LATENTS)?, cfg.ortho_normalize)?;
        let ov = tape.value(o).item()?;
        (total_loss(tape, diff, o, cfg.beta)?, ov)
    } else {
        (diff, combined_ortho_loss_value(&model.latents()?, cfg.ortho_normalize)?)
    };
    let total = tape.value(root).item()?;
    Ok((root, LossTerms { diff: diff_v, ortho: ortho_v, total }))
}

/// Loss terms of `model` on `batch` without recording gradients.
pub fn evaluate_loss(model: &ToyDenoiser, cfg: &TrainConfig, sched: &NoiseSchedule, batch: &Batch) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    Ok(objective(&mut tape, &p, model, cfg, cfg.flags(), sched, batch)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { t: u64, m: TensorMap, v: TensorMap },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &ToyDenoiser) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => {
                let zeros = model
                    .params()
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), Tensor::zeros(v.shape().to_vec())?)))
                    .collect::<Result<TensorMap>>()?;
                Self::Adam { t: 0, m: zeros.clone(), v: zeros }
            }
        })
    }

    fn apply(&mut self, model: &mut ToyDenoiser, grads: &TensorMap, lr: f64) -> Result<()> {
        match self {
            Self::Sgd => {
                for (name, g) in grads {
                    let p = model.params_mut().get_mut(name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
                    *p = p.sub(&g.scale(lr)?)?;
                }
            }
            Self::Adam { t, m, v } => {
                *t += 1;
                let (b1, b2) = ADAM_BETAS;
                let c1 = 1.0 - b1.powi(*t as i32);
                let c2 = 1.0 - b2.powi(*t as i32);
                for (name, g) in grads {
                    let p = model.params_mut().get_mut(name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
                    let (mi, vi) = (m.get_mut(name).unwrap(), v.get_mut(name).unwrap());
                    let mut pd = p.data().to_vec();
                    let mut md = mi.data().to_vec();
                    let mut vd = vi.data().to_vec();
                    for (((pj, mj), vj), gj) in pd.iter_mut().zip(&mut md).zip(&mut vd).zip(g.data()) {
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + ADAM_EPS);
                    }
                    *p = Tensor::new(p.shape().to_vec(), pd)?;
                    *mi = Tensor::new(mi.shape().to_vec(), md)?;
                    *vi = Tensor::new(vi.shape().to_vec(), vd)?;
                }
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run: parameters, optimizer state and
/// the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ToyDenoiser,
    pub optimizer: OptimizerState,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let model = ToyDenoiser::init(cfg)?;
        let optimizer = OptimizerState::new(cfg.optimizer, &model)?;
        Ok(Self { model, optimizer, step: 0 })
    }

    pub fn to_map(&self) -> Result<TensorMap> {
        let mut map: TensorMap = self.model.params().iter().map(|(k, v)| (format!("param.{k}"), v.clone())).collect();
        map.insert(STEP_KEY.into(), Tensor::scalar(self.step as f64)?);
        if let OptimizerState::Adam { t, m, v } = &self.optimizer {
            map.insert(ADAM_T_KEY.into(), Tensor::scalar(*t as f64)?);
            for (k, x) in m {
                map.insert(format!("optim.adam.m.{k}"), x.clone());
            }
            for (k, x) in v {
                map.insert(format!("optim.adam.v.{k}"), x.clone());
            }
        }
        Ok(map)
    }

    pub fn from_map(cfg: &TrainConfig, mut map: TensorMap) -> Result<Self> {
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::MissingEntry(k.to_string()));
        let step = take(STEP_KEY)?.item()? as usize;
        let adam_t = match cfg.optimizer {
            OptimizerKind::Adam => Some(take(ADAM_T_KEY)?.item()? as u64),
            OptimizerKind::Sgd => None,
        };
        let mut params = TensorMap::new();
        let mut m = TensorMap::new();
        let mut v = TensorMap::new();
        for (k, x) in map {
            if let Some(name) = k.strip_prefix("param.") {
                params.insert(name.to_string(), x);
            } else if let (Some(name), Some(_)) = (k.strip_prefix("optim.adam.m."), adam_t) {
                m.insert(name.to_string(), x);
            } else if let (Some(name), Some(_)) = (k.strip_prefix("optim.adam.v."), adam_t) {
                v.insert(name.to_string(), x);
            } else {
                return Err(Error::FormatVersionMismatch(format!("unexpected checkpoint entry {k}")));
            }
        }
        let model = ToyDenoiser::from_params(cfg, params)?;
        let optimizer = match adam_t {
            Some(t) => {
                if m.len() != model.params().len() || v.len() != model.params().len() {
                    return Err(Error::MissingEntry("adam moments".into()));
                }
                OptimizerState::Adam { t, m, v }
            }
            None => OptimizerState::Sgd,
        };
        Ok(Self { model, optimizer, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, &self.to_map()?)
    }

    pub fn load(cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_map(cfg, container::load(path)?)
    }
}

/// Steps `t` for a probe batch of `k` clips, spread evenly over the schedule.
fn probe_steps(k: usize, steps: usize) -> Vec<usize> {
    (0..k).map(|i| ((2 * i + 1) * steps) / (2 * k)).collect()
}

/// Stateful trainer over one dataset. Each step's batch, timesteps and noise
/// are a pure function of `(seed, step)`, so a resumed run replays the same
/// sequence as an uninterrupted one.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    sched: NoiseSchedule,
    dataset: &'a Dataset,
    train_idx: Vec<usize>,
    probe: Batch,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        Self::with_state(cfg, dataset, TrainState::fresh(cfg)?)
    }

    pub fn with_state(cfg: &TrainConfig, dataset: &'a Dataset, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let train_idx = dataset.indices(Split::Train);
        if train_idx.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let dims = dataset.manifest.dims;
        if dims.channels != cfg.channels || dims.face_dim != cfg.face_dim {
            return Err(Error::ConfigInvalid(format!(
                "dataset has {} channels / face_dim {}, config wants {} / {}",
                dims.channels, dims.face_dim, cfg.channels, cfg.face_dim
            )));
        }
        let sched = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
        let probe_idx: Vec<usize> = (0..cfg.probe_size).map(|i| train_idx[i % train_idx.len()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_STREAM);
        let probe = Batch::assemble(dataset, &probe_idx, probe_steps(cfg.probe_size, cfg.timesteps), &mut rng)?;
        Ok(Self { cfg: cfg.clone(), sched, dataset, train_idx, probe, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn probe_batch(&self) -> &Batch {
        &self.probe
    }

    /// The minibatch drawn at `step`.
    pub fn batch_for(&self, step: usize) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(self.cfg.seed ^ BATCH_STREAM, step));
        let idx: Vec<usize> =
            (0..self.cfg.batch).map(|_| self.train_idx[rng.gen_range(0..self.train_idx.len())]).collect();
        let t = (0..self.cfg.batch).map(|_| rng.gen_range(0..self.cfg.timesteps)).collect();
        Batch::assemble(self.dataset, &idx, t, &mut rng)
    }

    pub fn probe_loss(&self) -> Result<LossTerms> {
        evaluate_loss(&self.state.model, &self.cfg, &self.sched, &self.probe)
    }

    /// Runs one optimizer step and returns the minibatch loss before the update.
    pub fn step(&mut self) -> Result<LossTerms> {
        let step = self.state.step;
        let numeric = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        };
        let batch = self.batch_for(step)?;
        let mut tape = Tape::new();
        let p = self.state.model.bind(&mut tape, true);
        let (root, terms) =
            objective(&mut tape, &p, &self.state.model, &self.cfg, self.cfg.flags(), &self.sched, &batch)
                .map_err(numeric)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(root).map_err(numeric)?;
        let grads: TensorMap =
            p.vars.iter().filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone()))).collect();
        self.state.optimizer.apply(&mut self.state.model, &grads, self.cfg.lr).map_err(numeric)?;
        self.state.step += 1;
        Ok(terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub config_digest: String,
    pub start_step: usize,
    pub steps: usize,
    /// Minibatch loss at each step, before that step's update.
    pub losses: Vec<StepLoss>,
    /// Loss on the fixed probe batch, at the start, every `probe_every` steps and at the end.
    pub probe: Vec<StepLoss>,
    pub initial: LossTerms,
    #[serde(rename = "final")]
    pub final_loss: LossTerms,
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub report: MetricsReport,
}

/// Runs `cfg.steps` steps (counted from step 0) from `state`, writing the
/// checkpoint and metrics into `out_dir` when given.
pub fn train_from(cfg: &TrainConfig, dataset: &Dataset, state: TrainState, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut trainer = Trainer::with_state(cfg, dataset, state)?;
    let start_step = trainer.state().step;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let ckpt: Option<PathBuf> = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let initial = trainer.probe_loss()?;
    let mut probe = vec![StepLoss { step: start_step, loss: initial }];
    let mut losses = Vec::new();
    while trainer.state().step < cfg.steps {
        let step = trainer.state().step;
        let loss = trainer.step()?;
        losses.push(StepLoss { step, loss });
        let done = trainer.state().step;
        if cfg.probe_every > 0 && done % cfg.probe_every == 0 && done < cfg.steps {
            probe.push(StepLoss { step: done, loss: trainer.probe_loss()? });
        }
        if let (Some(path), true) = (&ckpt, cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            trainer.state().save(path)?;
        }
    }
    let final_loss = trainer.probe_loss()?;
    if probe.last().map(|p| p.step) != Some(trainer.state().step) {
        probe.push(StepLoss { step: trainer.state().step, loss: final_loss });
    }
    let report = MetricsReport {
        version: METRICS_VERSION,
        config_digest: cfg.digest(),
        start_step,
        steps: trainer.state().step,
        losses,
        probe,
        initial,
        final_loss,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let state = trainer.into_state();
    if let Some(dir) = out_dir {
        state.save(dir.join(CHECKPOINT_FILE))?;
        report.write(dir.join(METRICS_FILE))?;
    }
    Ok(TrainOutcome { state, report })
}

/// Trains a fresh model for `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_from(cfg, dataset, TrainState::fresh(cfg)?, out_dir)
}
