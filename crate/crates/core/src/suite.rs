//! The named finite-difference suite behind `ria gradcheck`.
//!
//! Every differentiable op, each component of the region attention block,
//! the identity path, both losses and the full training objective are
//! checked against central differences at f64.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_region_mask, mixer, region_attention_block, spatial_cross_attn, temporal_cross_attn, BlockConfig,
    MaskCombine, RegionMasks,
};
use crate::autodiff::{Tape, Var};
use crate::config::{AblationFlags, TrainConfig};
use crate::error::Result;
use crate::gradcheck::{check_with, DEFAULT_EPS};
use crate::id_preserver::{id_attend, project_embedding, AffineVars, IdProjection};
use crate::latents::{combined_ortho_loss, orthogonality_loss};
use crate::losses::{diffusion_loss, total_loss, LossConfig};
use crate::pipeline::model::{BoundParams, ToyDenoiser};
use crate::pipeline::schedule::NoiseSchedule;
use crate::pipeline::train::{objective, Batch};
use crate::softquant::{soft_quantize, QuantConfig};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One entry of the suite: a scalar function of `input`.
pub struct Target {
    pub name: String,
    pub input: Tensor,
    pub f: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub tolerance: f64,
    pub results: Vec<TargetResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TargetResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

fn target(name: &str, input: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static) -> Target {
    Target { name: name.to_string(), input, f: Box::new(f) }
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum_all(p)
}

fn binary_mask(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::uniform(shape, 0.0, 1.0, rng)?.map(|x| if x < 0.5 { 0.0 } else { 1.0 }, "mask")
}

fn random_masks(b: usize, f: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<RegionMasks> {
    RegionMasks::new(binary_mask(vec![b, f, h, w, 1], rng)?, binary_mask(vec![b, f, h, w, 1], rng)?)
}

fn tensor_targets(rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let a = Tensor::randn(vec![2, 3, 4], 1.0, rng)?;
    let b = Tensor::randn(vec![4, 5], 1.0, rng)?;
    let wm = Tensor::randn(vec![2, 3, 5], 1.0, rng)?;
    let ws = Tensor::randn(vec![2, 3, 4], 1.0, rng)?;
    let wa = Tensor::randn(vec![2, 4], 1.0, rng)?;
    let row = Tensor::randn(vec![1, 4], 1.0, rng)?;
    let wt = Tensor::randn(vec![4, 3, 2], 1.0, rng)?;

    let mut v = Vec::new();
    let (b1, wm1) = (b.clone(), wm.clone());
    v.push(target("tensor.matmul.lhs", a.clone(), move |t, x| {
        let bv = t.constant(b1.clone());
        let y = t.matmul(x, bv)?;
        weighted_sum(t, y, &wm1)
    }));
    let (a2, wm2) = (a.clone(), wm.clone());
    v.push(target("tensor.matmul.rhs", b.clone(), move |t, x| {
        let av = t.constant(a2.clone());
        let y = t.matmul(av, x)?;
        weighted_sum(t, y, &wm2)
    }));
    let ws1 = ws.clone();
    v.push(target("tensor.softmax", a.clone(), move |t, x| {
        let y = t.softmax(x, 2)?;
        weighted_sum(t, y, &ws1)
    }));
    let wa1 = wa.clone();
    v.push(target("tensor.sum_axis", a.clone(), move |t, x| {
        let y = t.sum_axis(x, 1, false)?;
        weighted_sum(t, y, &wa1)
    }));
    v.push(target("tensor.mean_all", a.clone(), |t, x| {
        let sq = t.mul(x, x)?;
        t.mean_all(sq)
    }));
    let (row1, ws2) = (row.clone(), ws.clone());
    v.push(target("tensor.broadcast", a.clone(), move |t, x| {
        let r = t.constant(row1.clone());
        let p = t.mul(x, r)?;
        let s = t.sub(p, r)?;
        let q = t.add(s, x)?;
        weighted_sum(t, q, &ws2)
    }));
    let (a3, ws3) = (a.clone(), ws.clone());
    v.push(target("tensor.broadcast.reduced_operand", row, move |t, x| {
        let av = t.constant(a3.clone());
        let p = t.mul(av, x)?;
        weighted_sum(t, p, &ws3)
    }));
    v.push(target("tensor.transpose_reshape", a.clone(), move |t, x| {
        let y = t.transpose(x, &[2, 1, 0])?;
        let y = t.reshape(y, vec![4, 3, 2])?;
        let y = t.scale(y, 0.5)?;
        weighted_sum(t, y, &wt)
    }));
    let ws4 = ws.clone();
    v.push(target("tensor.tanh", a.clone(), move |t, x| {
        let y = t.tanh(x)?;
        weighted_sum(t, y, &ws4)
    }));
    v.push(target("tensor.normalize_last", a, move |t, x| {
        let y = t.normalize_last(x)?;
        weighted_sum(t, y, &ws)
    }));
    Ok(v)
}

fn softquant_targets(rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let states = Tensor::randn(vec![1, 2, 2, 2, 4], 1.0, rng)?;
    let lat = Tensor::randn(vec![5, 4], 1.0, rng)?;
    let w = Tensor::randn(vec![1, 2, 2, 2, 4], 1.0, rng)?;
    let cfg = QuantConfig::default();
    let (l1, w1) = (lat.clone(), w.clone());
    let s2 = states.clone();
    Ok(vec![
        target("softquant.states", states, move |t, x| {
            let l = t.constant(l1.clone());
            let q = soft_quantize(t, x, l, &cfg)?;
            weighted_sum(t, q, &w1)
        }),
        target("softquant.latents", lat, move |t, x| {
            let s = t.constant(s2.clone());
            let q = soft_quantize(t, s, x, &cfg)?;
            weighted_sum(t, q, &w)
        }),
    ])
}

fn attention_targets(rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let (b, f, h, w, d) = (1, 3, 2, 2, 4);
    let states = Tensor::randn(vec![b, f, h, w, d], 1.0, rng)?;
    let keys = Tensor::randn(vec![5, d], 1.0, rng)?;
    let other = Tensor::randn(vec![b, f, h, w, d], 1.0, rng)?;
    let wt = Tensor::randn(vec![b, f, h, w, d], 1.0, rng)?;
    let masks = random_masks(b, f, h, w, rng)?;
    let lt = Tensor::randn(vec![4, d], 1.0, rng)?;

    let mut v = Vec::new();
    for (label, temporal) in [("spatial", false), ("temporal", true)] {
        let attn = move |t: &mut Tape, s: Var, k: Var| {
            if temporal {
                temporal_cross_attn(t, s, k, None)
            } else {
                spatial_cross_attn(t, s, k, None)
            }
        };
        let (k1, w1) = (keys.clone(), wt.clone());
        v.push(target(&format!("attention.{label}.states"), states.clone(), move |t, x| {
            let k = t.constant(k1.clone());
            let y = attn(t, x, k)?;
            weighted_sum(t, y, &w1)
        }));
        let (s1, w2) = (states.clone(), wt.clone());
        v.push(target(&format!("attention.{label}.keys"), keys.clone(), move |t, x| {
            let s = t.constant(s1.clone());
            let y = attn(t, s, x)?;
            weighted_sum(t, y, &w2)
        }));
    }
    let (o1, w3) = (other.clone(), wt.clone());
    v.push(target("attention.mixer", states.clone(), move |t, x| {
        let o = t.constant(o1.clone());
        let y = mixer(t, x, o, 0.3)?;
        weighted_sum(t, y, &w3)
    }));
    for combine in [MaskCombine::Product, MaskCombine::Union] {
        let (m1, w4) = (masks.clone(), wt.clone());
        let name = format!("attention.mask.{}", if combine == MaskCombine::Product { "product" } else { "union" });
        v.push(target(&name, states.clone(), move |t, x| {
            let y = apply_region_mask(t, x, &m1, combine)?;
            weighted_sum(t, y, &w4)
        }));
    }
    let ones = RegionMasks::ones(b, f, h, w)?;
    let (s2, lt1, m2, w5) = (states.clone(), lt.clone(), ones.clone(), wt.clone());
    v.push(target("attention.block.spatial_latents", keys.clone(), move |t, x| {
        let s = t.constant(s2.clone());
        let l = t.constant(lt1.clone());
        let y = region_attention_block(t, s, x, l, &m2, &BlockConfig::default(), None)?;
        weighted_sum(t, y, &w5)
    }));
    let (k3, lt2, w6) = (keys, lt, wt);
    v.push(target("attention.block.states", states, move |t, x| {
        let ks = t.constant(k3.clone());
        let l = t.constant(lt2.clone());
        let y = region_attention_block(t, x, ks, l, &ones, &BlockConfig::default(), None)?;
        weighted_sum(t, y, &w6)
    }));
    Ok(v)
}

fn id_targets(rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let (b, f, h, w, d, df) = (2, 2, 2, 2, 4, 3);
    let face = Tensor::randn(vec![b, 2, df], 1.0, rng)?;
    let weight = Tensor::randn(vec![df, d], 1.0, rng)?;
    let bias = Tensor::randn(vec![d], 0.5, rng)?;
    let w2 = Tensor::randn(vec![d, d], 0.5, rng)?;
    let wout = Tensor::randn(vec![b, 2, d], 1.0, rng)?;
    let states = Tensor::randn(vec![b, f, h, w, d], 1.0, rng)?;
    let emb = Tensor::randn(vec![b, 1, 2, d], 1.0, rng)?;
    let masks = random_masks(b, f, h, w, rng)?;
    let wt = Tensor::randn(vec![b, f, h, w, d], 1.0, rng)?;

    let (f1, bi1, w21, wo1) = (face.clone(), bias.clone(), w2.clone(), wout.clone());
    let (e1, m1, wt1) = (emb.clone(), masks.clone(), wt.clone());
    Ok(vec![
        target("id.projection", weight, move |t, x| {
            let fv = t.constant(f1.clone());
            let bv = t.constant(bi1.clone());
            let w2v = t.constant(w21.clone());
            let b2v = t.constant(bi1.clone());
            let proj = IdProjection {
                layers: vec![AffineVars { weight: x, bias: bv }, AffineVars { weight: w2v, bias: b2v }],
            };
            let y = project_embedding(t, fv, &proj)?;
            weighted_sum(t, y, &wo1)
        }),
        target("id.attend.states", states.clone(), move |t, x| {
            let e = t.constant(e1.clone());
            let y = id_attend(t, x, e, &m1, 0.5)?;
            weighted_sum(t, y, &wt1)
        }),
        target("id.attend.embedding", emb, move |t, x| {
            let s = t.constant(states.clone());
            let y = id_attend(t, s, x, &masks, 0.5)?;
            weighted_sum(t, y, &wt)
        }),
    ])
}

fn loss_targets(rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let shape = vec![1, 2, 2, 2, 3];
    let target_t = Tensor::randn(shape.clone(), 1.0, rng)?;
    let pred = Tensor::randn(shape, 1.0, rng)?;
    let masks = random_masks(1, 2, 2, 2, rng)?;
    let lat = Tensor::randn(vec![6, 4], 1.0, rng)?;
    let other = Tensor::randn(vec![5, 4], 1.0, rng)?;
    let cfg = LossConfig::default();
    let weighted = LossConfig { weighted_mean: true, ..cfg };
    let (tt1, m1) = (target_t.clone(), masks.clone());
    let o1 = other.clone();
    let (tt2, p2, m2, o2) = (target_t, pred.clone(), masks, other);
    Ok(vec![
        target("losses.diffusion", pred.clone(), move |t, x| {
            let tv = t.constant(tt1.clone());
            diffusion_loss(t, tv, x, &m1, &cfg)
        }),
        target("losses.diffusion.weighted_mean", pred, {
            let (tt, m) = (tt2.clone(), m2.clone());
            move |t, x| {
                let tv = t.constant(tt.clone());
                diffusion_loss(t, tv, x, &m, &weighted)
            }
        }),
        target("losses.ortho", lat.clone(), |t, x| orthogonality_loss(t, x, false)),
        target("losses.ortho.normalized", lat.clone(), |t, x| orthogonality_loss(t, x, true)),
        target("losses.ortho.combined", lat.clone(), move |t, x| {
            let o = t.constant(o1.clone());
            combined_ortho_loss(t, x, o, false)
        }),
        target("losses.total", lat, move |t, x| {
            let tv = t.constant(tt2.clone());
            let pv = t.constant(p2.clone());
            let d = diffusion_loss(t, tv, pv, &m2, &cfg)?;
            let o = t.constant(o2.clone());
            let ortho = combined_ortho_loss(t, x, o, false)?;
            // a large beta so the ortho branch is visible at this tolerance
            total_loss(t, d, ortho, 0.5)
        }),
    ])
}

/// Reduced model dims so the end-to-end checks finish quickly.
pub fn end_to_end_config() -> TrainConfig {
    TrainConfig {
        n: 3,
        m: 3,
        d: 4,
        batch: 1,
        channels: 2,
        face_dim: 3,
        timesteps: 20,
        // scaled up so the latents' gradient is not swamped by rounding
        latent_init_scale: 0.5,
        beta: 0.1,
        mask_combine: MaskCombine::Union,
        attn_projections: true,
        id_two_layer: true,
        ..TrainConfig::default()
    }
}

fn end_to_end_targets(rng: &mut ChaCha8Rng) -> Result<Vec<Target>> {
    let cfg = end_to_end_config();
    let model = ToyDenoiser::init(&cfg)?;
    let sched = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let (f, h, w) = (2, 2, 2);
    let batch = Batch {
        z0: Tensor::uniform(vec![1, f, h, w, cfg.channels], -1.0, 1.0, rng)?,
        eps: Tensor::randn(vec![1, f, h, w, cfg.channels], 1.0, rng)?,
        t: vec![11],
        masks: RegionMasks::new(
            Tensor::new(vec![1, f, h, w, 1], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0])?,
            Tensor::new(vec![1, f, h, w, 1], vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0])?,
        )?,
        identity: Tensor::randn(vec![1, cfg.face_dim], 1.0, rng)?,
    };
    let mut v = Vec::new();
    for name in model.params().keys() {
        let (model, cfg, sched, batch, name) = (model.clone(), cfg.clone(), sched.clone(), batch.clone(), name.clone());
        let input = model.params()[&name].clone();
        v.push(target(&format!("end_to_end.{name}"), input, move |t, x| {
            let mut vars = std::collections::BTreeMap::new();
            for (k, val) in model.params() {
                let var = if *k == name { x } else { t.constant(val.clone()) };
                vars.insert(k.clone(), var);
            }
            let p = BoundParams { vars };
            Ok(objective(t, &p, &model, &cfg, AblationFlags::FULL, &sched, &batch)?.0)
        }));
    }
    v.extend(default_config_targets()?);
    Ok(v)
}

/// The default config on one synthetic clip, for the parameters the
/// region block owns and the output layer.
fn default_config_targets() -> Result<Vec<Target>> {
    let cfg = TrainConfig { batch: 1, ..TrainConfig::default() };
    let model = ToyDenoiser::init(&cfg)?;
    let sched = NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let dataset = crate::synthdata::generate_dataset(18, cfg.seed, &cfg.clip_dims())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = Batch::assemble(&dataset, &[0], vec![40], &mut rng)?;
    let mut v = Vec::new();
    for name in ["latents.spatial", "out_proj.weight"] {
        let (model, cfg, sched, batch) = (model.clone(), cfg.clone(), sched.clone(), batch.clone());
        let input = model.param(name)?.clone();
        v.push(target(&format!("end_to_end.default_config.{name}"), input, move |t, x| {
            let mut vars = std::collections::BTreeMap::new();
            for (k, val) in model.params() {
                let var = if k == name { x } else { t.constant(val.clone()) };
                vars.insert(k.clone(), var);
            }
            let p = BoundParams { vars };
            Ok(objective(t, &p, &model, &cfg, AblationFlags::FULL, &sched, &batch)?.0)
        }));
    }
    Ok(v)
}

/// Every target of the suite, built from a fixed seed.
pub fn all_targets() -> Result<Vec<Target>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut v = tensor_targets(&mut rng)?;
    v.extend(softquant_targets(&mut rng)?);
    v.extend(attention_targets(&mut rng)?);
    v.extend(id_targets(&mut rng)?);
    v.extend(loss_targets(&mut rng)?);
    v.extend(end_to_end_targets(&mut rng)?);
    Ok(v)
}

/// Whether `name` is selected by a `--only` filter: an exact name or a
/// dot-separated prefix of it.
pub fn matches_filter(name: &str, filter: &str) -> bool {
    name == filter || name.strip_prefix(filter).is_some_and(|rest| rest.starts_with('.'))
}

/// Runs the targets selected by `only` (all when empty). Targets selected by
/// `inject_fault` have their analytic gradient scaled by 1.5 before the
/// comparison, as a negative control.
pub fn run_suite(only: &[String], inject_fault: Option<&str>) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for t in all_targets()? {
        if !only.is_empty() && !only.iter().any(|f| matches_filter(&t.name, f)) {
            continue;
        }
        let faulty = inject_fault.is_some_and(|f| matches_filter(&t.name, f));
        let started = Instant::now();
        let err = check_with(&t.f, &t.input, DEFAULT_EPS, |g| if faulty { g.scale(1.5) } else { Ok(g.clone()) })?;
        results.push(TargetResult {
            name: t.name,
            max_rel_error: err,
            passed: err < TOLERANCE,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(SuiteReport { eps: DEFAULT_EPS, tolerance: TOLERANCE, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_matches_prefixes_on_dots() {
        assert!(matches_filter("softquant.states", "softquant"));
        assert!(matches_filter("softquant.states", "softquant.states"));
        assert!(!matches_filter("softquantx.states", "softquant"));
        assert!(!matches_filter("tensor.softmax", "softmax"));
    }

    #[test]
    fn target_names_are_unique() {
        let names: Vec<String> = all_targets().unwrap().into_iter().map(|t| t.name).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }
}
