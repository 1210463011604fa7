use nalgebra::Vector3;
use rand::Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::step::{check_gradients, loss_and_grads, StepData};
use super::*;
use crate::pipeline::{self, ShadingModel};
use crate::quat;
use crate::scene::LightModel;
use crate::sh::{EnvLight, ShVector};
use crate::util::{salted_rng, sample_sphere};

fn ring_camera(i: usize, n: usize, size: u32) -> Camera {
    let angle = std::f64::consts::TAU * i as f64 / n as f64;
    let eye = Vector3::new(3.0 * angle.cos(), 3.0 * angle.sin(), 2.0);
    Camera::look_at(
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, 1.0),
        size as f64 * 0.9,
        size as f64 * 0.9,
        size,
        size,
    )
}

fn ambient_light(rng: &mut impl Rng) -> EnvLight {
    let mut l = EnvLight::zero();
    for ch in 0..3 {
        l.channels[ch] = ShVector::constant(rng.random_range(0.8..1.2));
        for i in 1..crate::sh::SH_COEFFS {
            l.channels[ch].coeffs[i] = rng.random_range(-0.1..0.1);
        }
    }
    l
}

fn plane_scene(rng: &mut impl Rng, n: usize) -> Vec<Surfel> {
    (0..n)
        .map(|i| {
            let g = (n as f64).sqrt().ceil() as usize;
            let (ix, iy) = (i % g, i / g);
            let spread = 1.6;
            let pos = Vector3::new(
                (ix as f64 / g.max(1) as f64 - 0.5) * spread,
                (iy as f64 / g.max(1) as f64 - 0.5) * spread,
                rng.random_range(-0.05..0.05),
            );
            let axis = sample_sphere(rng);
            let tilt = quat::from_axis_angle(&axis, rng.random_range(-0.3..0.3));
            Surfel::new(
                pos,
                tilt,
                [0.45, 0.45],
                0.8,
                [
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.3..0.8),
                ],
            )
        })
        .collect()
}

/// Self-consistent toy setup: targets rendered from the scene itself under
/// per-view ambient lights.
fn make_trainer(n_views: usize, n_surfels: usize, size: u32, seed: u64) -> Trainer {
    let mut rng = salted_rng(seed, 0, 0x54455354);
    let surfels = plane_scene(&mut rng, n_surfels);
    let views: Vec<TrainView> = (0..n_views)
        .map(|i| {
            let cam = ring_camera(i, n_views, size);
            let light = ambient_light(&mut rng);
            let buffers = pipeline::render_scene(
                &surfels,
                &light,
                &cam,
                &crate::rasterizer::RenderOptions::default(),
                ShadingModel::Unshadowed,
            )
            .unwrap();
            TrainView {
                camera: cam,
                image: buffers.color,
                valid_mask: crate::img::Mask::filled(size as usize, size as usize, true),
            }
        })
        .collect();
    let model = LightModel::init(n_views, seed);
    let config = TrainConfig {
        total_iters: 40,
        stage1_iters: 20,
        densify_interval: 10,
        opacity_reset_interval: 1_000_000,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(surfels, model, views, config).unwrap()
}

#[test]
fn zero_learning_rates_leave_scene_bit_identical() {
    let mut t = make_trainer(2, 9, 16, 1);
    t.config.lr_position = 0.0;
    t.config.lr_rotation = 0.0;
    t.config.lr_scale = 0.0;
    t.config.lr_opacity = 0.0;
    t.config.lr_albedo = 0.0;
    t.config.lr_transfer_sh = 0.0;
    t.config.lr_mlp_embedding = 0.0;
    t.config.lr_mlp_embedding_stage2 = 0.0;
    let before_scene = t.surfels.clone();
    let before_model = t.model.clone();
    t.step().unwrap();
    assert_eq!(t.surfels, before_scene);
    assert_eq!(t.model, before_model);
}

#[test]
fn perfect_target_gives_negligible_photometric_gradients() {
    // Single-surfel scene whose target IS the current render: the
    // photometric term and its gradients vanish.
    let mut rng = salted_rng(2, 0, 0);
    let surfels = vec![Surfel::new(
        Vector3::zeros(),
        quat::IDENTITY,
        [1.5, 1.5],
        0.7,
        [0.5, 0.6, 0.7],
    )];
    let cam = ring_camera(0, 1, 16);
    let model = LightModel::init(1, 7);
    let light = crate::scene::mlp_forward(&model, 0).unwrap();
    let target = pipeline::render_scene(
        &surfels,
        &light,
        &cam,
        &crate::rasterizer::RenderOptions::default(),
        ShadingModel::Unshadowed,
    )
    .unwrap()
    .color;
    let mask = crate::img::Mask::filled(16, 16, true);
    let dirs = crate::losses::sample_directions(3, 0, 32);
    let mut weights = LossWeights::default();
    // Isolate the photometric path.
    weights.l01 = 0.0;
    weights.positive_light = 0.0;
    weights.transfer_match = 0.0;
    weights.shadow_only_stage1 = 0.0;
    weights.normal_consistency = 0.0;
    weights.depth_distortion = 0.0;
    let data = StepData {
        surfels: &surfels,
        model: &model,
        image_index: 0,
        camera: &cam,
        target: &target,
        valid_mask: &mask,
        dirs: &dirs,
        weights: &weights,
        stage: Stage::Pretrain,
        render_opts: &crate::rasterizer::RenderOptions::default(),
    };
    let (terms, _, grads) = loss_and_grads(&data).unwrap();
    assert!(terms.rec_unshadowed < 1e-12);
    let _ = rng.random_range(0..2);
    for g in &grads.albedo_param {
        for v in g {
            assert!(v.abs() < 1e-9, "albedo grad {v:e}");
        }
    }
    for v in &grads.position {
        assert!(v.norm() < 1e-9);
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let reports_a = {
        let mut t = make_trainer(3, 12, 16, 5);
        let mut out = Vec::new();
        for _ in 0..12 {
            out.push(serde_json::to_string(&t.step().unwrap()).unwrap());
        }
        out
    };
    let reports_b = {
        let mut t = make_trainer(3, 12, 16, 5);
        let mut out = Vec::new();
        for _ in 0..12 {
            out.push(serde_json::to_string(&t.step().unwrap()).unwrap());
        }
        out
    };
    assert_eq!(reports_a, reports_b);
}

#[test]
fn stage_schedule_is_exact() {
    let mut t = make_trainer(2, 9, 16, 6);
    // schedule: stage1 = 20 of 40 total.
    let mut reports = Vec::new();
    for _ in 0..t.config.schedule().total_iters {
        reports.push(t.step().unwrap());
    }
    for r in &reports {
        let total = r.recomputed_total();
        assert!((total - r.total).abs() < 1e-15, "total mismatch");
        if r.step < 20 {
            assert_eq!(r.stage, 1);
            assert_eq!(r.weights.rec_shadowed, 0.0);
            assert_eq!(r.weights.shadow_only, 10.0);
            assert_eq!(r.lrs.mlp_embedding, 0.002);
        } else {
            assert_eq!(r.stage, 2);
            assert_eq!(r.weights.rec_shadowed, 1.0);
            assert_eq!(r.weights.shadow_only, 0.001);
            assert_eq!(r.lrs.mlp_embedding, 0.0001);
        }
    }
}

#[test]
fn image_sampling_covers_every_view_each_epoch() {
    let t = make_trainer(5, 9, 16, 7);
    for epoch in 0..3u64 {
        let mut seen: Vec<usize> = (0..5)
            .map(|i| t.image_for_step(epoch * 5 + i as u64))
            .collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn surfel_count_never_drops_below_floor() {
    let mut t = make_trainer(2, 20, 16, 8);
    t.config.min_surfels = 16;
    // Force mass pruning: make everything transparent.
    for s in &mut t.surfels {
        s.opacity_logit = crate::util::logit(0.0001);
    }
    t.densify_accum = vec![0.0; t.surfels.len()];
    let stats = t.run_density_control();
    assert_eq!(stats.after, 16);
    assert!(t.surfels.len() == 16);
    assert_eq!(t.opt.position.rows(), 16);
    assert_eq!(t.densify_accum.len(), 16);
}

#[test]
fn training_reduces_photometric_loss() {
    let mut t = make_trainer(3, 16, 16, 9);
    t.config.total_iters = 60;
    t.config.stage1_iters = 40;
    t.config.densify_interval = 1_000_000; // keep topology fixed here
    let first = t.step().unwrap();
    let mut last = first.clone();
    for _ in 1..60 {
        last = t.step().unwrap();
    }
    assert!(
        last.terms.rec_unshadowed < first.terms.rec_unshadowed,
        "loss did not decrease: {} -> {}",
        first.terms.rec_unshadowed,
        last.terms.rec_unshadowed
    );
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    // Continuous run.
    let mut full = make_trainer(3, 12, 16, 10);
    let mut full_reports = Vec::new();
    for _ in 0..16 {
        full_reports.push(serde_json::to_string(&full.step().unwrap()).unwrap());
    }

    // Interrupted run: checkpoint at step 7, reload, continue.
    let mut part = make_trainer(3, 12, 16, 10);
    let mut part_reports = Vec::new();
    for _ in 0..7 {
        part_reports.push(serde_json::to_string(&part.step().unwrap()).unwrap());
    }
    save_checkpoint(dir.path(), &part).unwrap();
    let views = part.views.clone();
    let mut resumed = load_checkpoint(dir.path(), views).unwrap();
    assert_eq!(resumed.iter, 7);
    assert_eq!(resumed.surfels, part.surfels);
    assert_eq!(resumed.opt, part.opt);
    for _ in 7..16 {
        part_reports.push(serde_json::to_string(&resumed.step().unwrap()).unwrap());
    }
    assert_eq!(full_reports, part_reports);

    // Saving the same state twice is byte-identical.
    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(dir2.path(), &resumed).unwrap();
    let dir3 = tempfile::tempdir().unwrap();
    save_checkpoint(dir3.path(), &resumed).unwrap();
    for name in ["scene.json", "surfels.bin", "light_model.bin", "optimizer.bin"] {
        assert_eq!(
            std::fs::read(dir2.path().join(name)).unwrap(),
            std::fs::read(dir3.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn full_pipeline_gradients_match_finite_differences_small() {
    // Small version of the acceptance gradient suite (4 surfels, 8x8).
    let mut rng = salted_rng(11, 0, 0);
    let surfels = plane_scene(&mut rng, 4);
    let cam = ring_camera(0, 1, 8);
    // Hidden activations bounded away from the ReLU kinks so central
    // differences see a smooth function.
    let model = LightModel::init_kink_free(2, 11, 5e-3);
    let light = crate::scene::mlp_forward(&model, 0).unwrap();
    let target = pipeline::render_scene(
        &surfels,
        &light,
        &cam,
        &crate::rasterizer::RenderOptions::default(),
        ShadingModel::Unshadowed,
    )
    .unwrap()
    .color;
    // Perturb the target so photometric gradients are non-trivial.
    let target = crate::img::ImageF {
        data: target
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.02 + 0.05 * (i % 7) as f64 / 7.0)
            .collect(),
        ..target
    };
    let mask = crate::img::Mask::filled(8, 8, true);
    let dirs = crate::losses::sample_directions(12, 3, 16);
    let weights = LossWeights::default();
    let opts = crate::rasterizer::RenderOptions {
        gaussian_cutoff: 1e-12,
        transmittance_floor: 1e-9,
        ..crate::rasterizer::RenderOptions::default()
    };
    let data = StepData {
        surfels: &surfels,
        model: &model,
        image_index: 0,
        camera: &cam,
        target: &target,
        valid_mask: &mask,
        dirs: &dirs,
        weights: &weights,
        stage: Stage::Shadow,
        render_opts: &opts,
    };
    check_gradients(&data, 1e-4, 1e-3, 1e-6).unwrap();
}

#[test]
fn non_finite_loss_is_reported_with_term_name() {
    let mut t = make_trainer(2, 9, 16, 12);
    t.surfels[0].transfer.coeffs[0] = f64::NAN;
    let err = t.step().unwrap_err();
    match err {
        Error::NonFinite { term, .. } => {
            assert!(!term.is_empty());
        }
        other => panic!("expected NonFinite, got {other}"),
    }
}
