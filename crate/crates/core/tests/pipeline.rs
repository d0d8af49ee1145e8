use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ria_core::attention::RegionMasks;
use ria_core::config::{AblationFlags, OptimizerKind};
use ria_core::pipeline::model::{denoise_step, DenoiseInputs};
use ria_core::pipeline::{ablate, add_noise, train, train_from, NoiseSchedule, ToyDenoiser, TrainState, Variant};
use ria_core::synthdata::generate_dataset;
use ria_core::{Tape, Tensor, TrainConfig};

fn small() -> TrainConfig {
    TrainConfig { steps: 6, probe_every: 2, ..TrainConfig::default() }
}

fn forward(model: &ToyDenoiser, cfg: &TrainConfig, flags: AblationFlags, masks: &RegionMasks) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = Tensor::randn(vec![2, cfg.frames, cfg.height, cfg.width, cfg.channels], 1.0, &mut rng).unwrap();
    let identity = Tensor::randn(vec![2, cfg.face_dim], 1.0, &mut rng).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let zv = tape.constant(z);
    let out = denoise_step(&mut tape, &p, cfg, flags, DenoiseInputs { z_t: zv, t: &[10, 60], masks, identity: &identity })
        .unwrap();
    tape.value(out).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_masks_make_the_region_block_a_no_op() {
    let cfg = TrainConfig { latent_init_scale: 0.5, ..TrainConfig::default() };
    let model = ToyDenoiser::init(&cfg).unwrap();
    let masks = RegionMasks::zeros(2, cfg.frames, cfg.height, cfg.width).unwrap();
    let with = forward(&model, &cfg, AblationFlags { use_id: false, ..AblationFlags::FULL }, &masks);
    let without = forward(&model, &cfg, AblationFlags::NONE, &masks);
    assert_eq!(with, without);
    // The ID path is zeroed outside the face mask too.
    assert_eq!(forward(&model, &cfg, AblationFlags::FULL, &masks), without);
}

#[test]
fn full_forward_repeats_bit_for_bit() {
    let cfg = TrainConfig::default();
    let masks = RegionMasks::ones(2, cfg.frames, cfg.height, cfg.width).unwrap();
    let a = forward(&ToyDenoiser::init(&cfg).unwrap(), &cfg, AblationFlags::FULL, &masks);
    let b = forward(&ToyDenoiser::init(&cfg).unwrap(), &cfg, AblationFlags::FULL, &masks);
    assert_eq!(a, b);
}

#[test]
fn add_noise_variance_matches_schedule() {
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let t = 40;
    let ab = sched.alpha_bar(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = Tensor::randn(vec![10_000], 1.5, &mut rng).unwrap();
    let eps = Tensor::randn(vec![10_000], 1.0, &mut rng).unwrap();
    let zt = add_noise(&z0, t, &eps, &sched).unwrap();
    let var = |x: &Tensor| {
        let m = x.mean_all();
        x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.numel() as f64
    };
    let want = ab * var(&z0) + (1.0 - ab);
    assert!((var(&zt) - want).abs() / want < 0.05, "{} vs {want}", var(&zt));
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let cfg = TrainConfig { lr: 0.0, ..small() };
    let data = generate_dataset(18, 2, &cfg.clip_dims()).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.state.model, ToyDenoiser::init(&cfg).unwrap());
    assert_eq!(out.report.initial, out.report.final_loss);
    assert_eq!(out.report.losses.len(), cfg.steps);
}

#[test]
fn resume_matches_an_uninterrupted_run_for_both_optimizers() {
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig { optimizer, ..small() };
        let data = generate_dataset(18, 3, &cfg.clip_dims()).unwrap();
        let whole = train(&cfg, &data, None).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        train(&TrainConfig { steps: 2, ..cfg.clone() }, &data, Some(tmp.path())).unwrap();
        let state = TrainState::load(&cfg, tmp.path().join("checkpoint.ialt")).unwrap();
        assert_eq!(state.step, 2);
        let rest = train_from(&cfg, &data, state, None).unwrap();
        assert_eq!(rest.state, whole.state);
        assert_eq!(rest.report.losses[..], whole.report.losses[2..]);
        assert_eq!(rest.report.start_step, 2);
    }
}

#[test]
fn outputs_are_written() {
    let cfg = small();
    let data = generate_dataset(18, 4, &cfg.clip_dims()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, Some(tmp.path())).unwrap();
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["config_digest"], cfg.digest());
    assert_eq!(m["losses"].as_array().unwrap().len(), cfg.steps);
    assert_eq!(m["final"]["total"].as_f64().unwrap(), out.report.final_loss.total);
}

#[test]
fn ablation_has_five_variants_sharing_the_start() {
    let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
    let data = generate_dataset(18, 5, &cfg.clip_dims()).unwrap();
    let r = ablate(&cfg, &data).unwrap();
    assert_eq!(r.variants.len(), 5);
    assert!(r.variants.iter().all(|v| v.steps == 3));
    let full = r.get(Variant::Full).unwrap();
    assert!(r.variants.iter().all(|v| v.initial.ortho == full.initial.ortho));
    assert!(r.variants.iter().all(|v| v.masked_recon_error.is_finite() && v.masked_recon_error > 0.0));
}

#[test]
fn default_config_stays_finite_for_a_long_run() {
    let cfg = TrainConfig { steps: 1000, probe_every: 0, ..TrainConfig::default() };
    let data = generate_dataset(36, 7, &cfg.clip_dims()).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert!(out.report.losses.iter().all(|l| l.loss.total.is_finite()));
}
