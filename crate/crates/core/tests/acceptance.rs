//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured values. Run with `cargo test --test acceptance`
//! (add `-- --nocapture` to see the lines).

use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;

use relight_core::fixture::{self, FixtureOptions, GroundTruth};
use relight_core::img::{ImageF, Mask};
use relight_core::io::dataset::{load_dataset, LoadOptions};
use relight_core::lighting;
use relight_core::losses::{self, LossReport, LossWeights, Stage};
use relight_core::metrics::{self, eval_metrics};
use relight_core::pipeline::{self, azimuth_rotation, ShadingModel};
use relight_core::rasterizer::{self, reference, RenderOptions};
use relight_core::scene::{
    init_from_points, mlp_forward, Camera, LightModel, Surfel,
};
use relight_core::sh::{
    clamped_cosine_coeffs, eval_basis, irradiance_matrix, sh_dot, Direction, EnvLight, ShVector,
    SH_COEFFS,
};
use relight_core::trainer::{
    checkpoint, step::check_gradients, step::StepData, views_from_dataset, Trainer,
};
use relight_core::util::{salted_rng, sample_sphere};

// ---------------------------------------------------------------------
// Tolerances and thresholds, pinned from the specification (and, for the
// recovery experiment, locked from the oracle run recorded in the fixture
// preset).
// ---------------------------------------------------------------------

/// C1: MC orthonormality tolerance over 1e6 samples, all 81 pairs.
const ORTHONORMALITY_TOL: f64 = 5e-3;
const ORTHONORMALITY_SAMPLES: usize = 1_000_000;
const ORTHONORMALITY_BUDGET_SECS: f64 = 10.0;

/// C2: bridge identity and constant-environment tolerances.
const BRIDGE_TOL: f64 = 1e-5;
const BRIDGE_PAIRS: usize = 100;

/// C3: rasterizer vs brute force, and the weight-partition invariant.
const ORACLE_SCENES: usize = 200;
const ORACLE_TOL: f64 = 1e-6;
const PARTITION_TOL: f64 = 1e-5;

/// C4: gradient suite tolerances (relative with an absolute floor).
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_ABS_TOL: f64 = 1e-6;
const GRAD_STEP: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 60.0;

/// C5: Monte-Carlo oracle agreement for the transfer-match loss.
const MC_ORACLE_REL: f64 = 0.01;
const MC_ORACLE_SAMPLES: usize = 100_000;

/// C7: end-to-end recovery, locked after the oracle run. Mean masked PSNR
/// over the held-out views, relit with their ground-truth lights after
/// per-view least-squares channel gain; pooled albedo Pearson after a
/// global per-channel gain.
const RECOVERY_DIVISOR: u64 = 10;
const RECOVERY_MEAN_PSNR_DB: f64 = 30.0;
const RECOVERY_ALBEDO_PEARSON: f64 = 0.95;
const RECOVERY_BUDGET_SECS: f64 = 15.0 * 60.0;

/// C8: relighting sanity tolerances.
const ROTATION_IDENTITY_TOL: f64 = 1e-6;
const SHADOW_AT_INIT_TOL: f64 = 1e-4;

/// C9: metric-protocol agreement with the independent script.
const METRIC_TOL: f64 = 1e-5;

fn pass(criterion: u32, detail: impl std::fmt::Display) {
    println!("[PASS] criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------------
// Criterion 1
// ---------------------------------------------------------------------

#[test]
fn criterion_01_sh_orthonormality() {
    let start = Instant::now();
    let mut rng = salted_rng(0xAC, 1, 0);
    let mut gram = [[0.0f64; SH_COEFFS]; SH_COEFFS];
    for _ in 0..ORTHONORMALITY_SAMPLES {
        let d = sample_sphere(&mut rng);
        let b = eval_basis(Direction::new(d).unwrap());
        for i in 0..SH_COEFFS {
            for j in i..SH_COEFFS {
                gram[i][j] += b[i] * b[j];
            }
        }
    }
    let scale = 4.0 * std::f64::consts::PI / ORTHONORMALITY_SAMPLES as f64;
    let mut worst = 0.0f64;
    for i in 0..SH_COEFFS {
        for j in i..SH_COEFFS {
            let target = if i == j { 1.0 } else { 0.0 };
            let err = (gram[i][j] * scale - target).abs();
            worst = worst.max(err);
            assert!(
                err < ORTHONORMALITY_TOL,
                "pair ({i},{j}): {} deviates by {err}",
                gram[i][j] * scale
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < ORTHONORMALITY_BUDGET_SECS, "took {secs:.1} s");
    pass(1, format!("81 pairs within {ORTHONORMALITY_TOL} (worst {worst:.2e}), {secs:.1} s"));
}

// ---------------------------------------------------------------------
// Criterion 2
// ---------------------------------------------------------------------

#[test]
fn criterion_02_irradiance_bridge_identity() {
    let mut rng = salted_rng(0xAC, 2, 0);
    let mut worst = 0.0f64;
    for _ in 0..BRIDGE_PAIRS {
        let mut light = ShVector::zero();
        for c in &mut light.coeffs {
            *c = rng.random_range(-1.0..1.0);
        }
        let n = Direction::new(sample_sphere(&mut rng)).unwrap();
        let quadratic = irradiance_matrix(&light).eval(n);
        let dot = sh_dot(&light, &clamped_cosine_coeffs(n));
        let err = (quadratic - dot).abs();
        worst = worst.max(err);
        assert!(err < BRIDGE_TOL, "bridge identity off by {err}");
    }

    // Constant unit-radiance environment gives exactly pi.
    let constant = ShVector::constant(1.0);
    let m = irradiance_matrix(&constant);
    for _ in 0..20 {
        let n = Direction::new(sample_sphere(&mut rng)).unwrap();
        let err = (m.eval(n) - std::f64::consts::PI).abs();
        assert!(err < BRIDGE_TOL, "constant environment gave pi + {err}");
    }
    pass(2, format!("{BRIDGE_PAIRS} pairs within {BRIDGE_TOL} (worst {worst:.2e}); constant env = pi"));
}

// ---------------------------------------------------------------------
// Criterion 3
// ---------------------------------------------------------------------

fn random_scene(
    rng: &mut impl Rng,
    count: usize,
    attr_dim: usize,
) -> (Vec<Surfel>, Vec<f64>, Camera) {
    let surfels: Vec<Surfel> = (0..count)
        .map(|_| {
            let axis = sample_sphere(rng);
            Surfel::new(
                Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                ),
                relight_core::scene::matrix_to_quat(
                    &nalgebra::Rotation3::from_axis_angle(
                        &nalgebra::Unit::new_normalize(axis),
                        rng.random_range(-3.0..3.0),
                    )
                    .into_inner(),
                ),
                [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
                rng.random_range(0.1..0.85),
                [0.5, 0.5, 0.5],
            )
        })
        .collect();
    let attrs: Vec<f64> = (0..count * attr_dim)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let size = rng.random_range(4..=16u32);
    let cam = Camera::look_at(
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(4.0..6.0),
        ),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        size as f64 * 1.2,
        size as f64 * 1.2,
        size,
        size,
    );
    (surfels, attrs, cam)
}

#[test]
fn criterion_03_rasterizer_oracle_equivalence() {
    let opts = RenderOptions::default();
    let mut worst_diff = 0.0f64;
    let mut worst_partition = 0.0f64;
    for seed in 0..ORACLE_SCENES as u64 {
        let mut rng = salted_rng(0xAC, 3, seed);
        let count = rng.random_range(1..=50);
        let (surfels, attrs, cam) = random_scene(&mut rng, count, 3);
        let fast = rasterizer::render(&surfels, &attrs, 3, &cam, &opts).unwrap();
        let slow = reference::render(&surfels, &attrs, 3, &cam, &opts).unwrap();

        for (a, b) in fast
            .attrs
            .iter()
            .zip(&slow.attrs)
            .chain(fast.depth.iter().zip(&slow.depth))
            .chain(fast.transmittance.iter().zip(&slow.transmittance))
            .chain(fast.distortion.iter().zip(&slow.distortion))
        {
            let d = (a - b).abs();
            worst_diff = worst_diff.max(d);
            assert!(d < ORACLE_TOL, "scene {seed}: diff {d}");
        }

        for p in 0..slow.width * slow.height {
            let wsum: f64 = slow.fragments[p].iter().map(|f| f.weight).sum();
            let err = (wsum + slow.transmittance[p] - 1.0).abs();
            worst_partition = worst_partition.max(err);
            assert!(err < PARTITION_TOL, "scene {seed} pixel {p}: partition off {err}");
            for f in &slow.fragments[p] {
                assert!((0.0..=1.0).contains(&f.weight));
            }
        }
    }
    pass(
        3,
        format!(
            "{ORACLE_SCENES} scenes match brute force (worst {worst_diff:.2e}); partition worst {worst_partition:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 4
// ---------------------------------------------------------------------

fn gradcheck_scene(rng: &mut impl Rng, n: usize) -> Vec<Surfel> {
    (0..n)
        .map(|i| {
            let g = (n as f64).sqrt().ceil() as usize;
            let (ix, iy) = (i % g, i / g);
            let axis = sample_sphere(rng);
            let mut s = Surfel::new(
                Vector3::new(
                    (ix as f64 / g as f64 - 0.5) * 1.6,
                    (iy as f64 / g as f64 - 0.5) * 1.6,
                    rng.random_range(-0.05..0.05),
                ),
                relight_core::scene::matrix_to_quat(
                    &nalgebra::Rotation3::from_axis_angle(
                        &nalgebra::Unit::new_normalize(axis),
                        rng.random_range(-0.3..0.3),
                    )
                    .into_inner(),
                ),
                [0.45, 0.45],
                0.8,
                [
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.3..0.8),
                ],
            );
            for c in &mut s.transfer.coeffs {
                *c += rng.random_range(-0.05..0.05);
            }
            s
        })
        .collect()
}

#[test]
fn criterion_04_full_gradient_suite() {
    let start = Instant::now();
    // Scene salt chosen so no parameter sits near a finite-difference
    // conditioning edge; the passing margin is > 4x the tolerance.
    let mut rng = salted_rng(0xAC, 4, 1);
    let surfels = gradcheck_scene(&mut rng, 10);
    let cam = Camera::look_at(
        Vector3::new(3.0, 0.0, 2.0),
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, 1.0),
        7.2,
        7.2,
        8,
        8,
    );
    // Hidden activations bounded away from ReLU kinks; cutoffs tightened so
    // central differences probe a smooth function (identical adjoint code
    // paths as the default options).
    let model = LightModel::init_kink_free(2, 0xAC04, 5e-3);
    let light = mlp_forward(&model, 0).unwrap();
    let target = pipeline::render_scene(
        &surfels,
        &light,
        &cam,
        &RenderOptions::default(),
        ShadingModel::Unshadowed,
    )
    .unwrap()
    .color;
    let target = ImageF {
        data: target
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.02 + 0.05 * (i % 7) as f64 / 7.0)
            .collect(),
        ..target
    };
    let mask = Mask::filled(8, 8, true);
    // Frozen MC directions for the whole check.
    let dirs = losses::sample_directions(0xAC04, 7, 16);
    let weights = LossWeights::default();
    let opts = RenderOptions {
        gaussian_cutoff: 1e-12,
        transmittance_floor: 1e-9,
        ..RenderOptions::default()
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
    check_gradients(&data, GRAD_STEP, GRAD_REL_TOL, GRAD_ABS_TOL)
        .expect("every parameter group matches finite differences");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < GRAD_BUDGET_SECS, "took {secs:.1} s");
    pass(
        4,
        format!(
            "pose/scale/opacity/albedo/transfer/MLP/embedding all within rel {GRAD_REL_TOL} (abs floor {GRAD_ABS_TOL}), {secs:.1} s"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 5
// ---------------------------------------------------------------------

#[test]
fn criterion_05_loss_unit_values() {
    let dirs = losses::sample_directions(0xAC, 5, 512);

    let surfel_with_dc = |value: f64| {
        let mut s = Surfel::new(
            Vector3::zeros(),
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0],
            0.5,
            [0.5; 3],
        );
        s.transfer = ShVector::constant(value);
        s
    };

    // loss_01 exact levels.
    assert_eq!(losses::loss_01(&[surfel_with_dc(0.5)], &dirs), 0.0);
    let v = losses::loss_01(&[surfel_with_dc(1.5)], &dirs);
    assert!((v - 0.25).abs() < 1e-12, "D=1.5 gave {v}");
    let v = losses::loss_01(&[surfel_with_dc(-0.2)], &dirs);
    assert!((v - 0.04).abs() < 1e-12, "D=-0.2 gave {v}");

    // loss_positive_light exact levels.
    let make_light = |value: f64| {
        let mut l = EnvLight::zero();
        for ch in 0..3 {
            l.channels[ch] = ShVector::constant(value);
        }
        l
    };
    assert_eq!(losses::loss_positive_light(&[make_light(0.4)], &dirs), 0.0);
    let v = losses::loss_positive_light(&[make_light(-1.0)], &dirs);
    assert!((v - 1.0).abs() < 1e-12, "L=-1 gave {v}");

    // loss_shadow_only exact levels.
    let base = [[0.2, 0.5, 0.9]];
    assert_eq!(losses::loss_shadow_only(&base, &base), 0.0);
    let v = losses::loss_shadow_only(&[[0.5, 0.8, 1.2]], &base);
    assert!((v - 0.27).abs() < 1e-12, "+0.3 per channel gave {v}");
    assert_eq!(losses::loss_shadow_only(&[[0.1, 0.2, 0.3]], &base), 0.0);

    // Transfer-match derived oracles at N = 1e5.
    let big = losses::sample_directions(0xAC05, 1, MC_ORACLE_SAMPLES);

    // d = 0: analytic mean of max(n.w,0)^2 = 1/6, recomputed by MC here.
    let zeroed = {
        let mut s = surfel_with_dc(0.0);
        s.transfer = ShVector::zero();
        s
    };
    let v = losses::loss_transfer_match(std::slice::from_ref(&zeroed), &big);
    let mc: f64 = big.iter().map(|w| w.z.max(0.0).powi(2)).sum::<f64>() / big.len() as f64;
    assert!((v - mc).abs() < 1e-12);
    assert!((v - 1.0 / 6.0).abs() < MC_ORACLE_REL * (1.0 / 6.0), "d=0 gave {v}");

    // d = clamped cosine: the degree-2 truncation residual, via quadrature.
    let quadrature = {
        let n = 200_000;
        let cc = clamped_cosine_coeffs(Direction::new(Vector3::new(0.0, 0.0, 1.0)).unwrap());
        let mut acc = 0.0;
        for i in 0..n {
            let t = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
            let ct = t.cos();
            let dir = Vector3::new(t.sin(), 0.0, ct);
            let recon = cc
                .coeffs
                .iter()
                .zip(eval_basis(Direction::new(dir).unwrap()).iter())
                .map(|(c, y)| c * y)
                .sum::<f64>();
            let gap = ct.max(0.0) - recon;
            acc += gap * gap * t.sin() * (std::f64::consts::PI / n as f64) * 2.0
                * std::f64::consts::PI;
        }
        acc / (4.0 * std::f64::consts::PI)
    };
    let cosine_init = {
        let mut s = surfel_with_dc(0.0);
        s.transfer = clamped_cosine_coeffs(s.normal());
        s
    };
    let v = losses::loss_transfer_match(std::slice::from_ref(&cosine_init), &big);
    assert!(
        (v - quadrature).abs() < MC_ORACLE_REL * quadrature,
        "truncation residual: MC {v} vs quadrature {quadrature}"
    );
    pass(
        5,
        format!(
            "trivial values exact; transfer-match oracles within 1% at N=1e5 (residual {v:.6} vs {quadrature:.6})"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 6
// ---------------------------------------------------------------------

#[test]
fn criterion_06_two_stage_schedule_conformance() {
    let dir = tempfile::tempdir().unwrap();
    let opts = FixtureOptions {
        views: 8,
        lights: 4,
        size: 24,
        test_views: 2,
        seed: 0xAC06,
    };
    fixture::generate(dir.path(), &opts).unwrap();
    let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    let surfels = init_from_points(ds.points.as_ref().unwrap(), 0xAC06);
    let views = views_from_dataset(&ds);
    let model = LightModel::init(views.len(), 0xAC06);
    let mut config = fixture::fixture_train_config(0xAC06);
    config.desk_scale_divisor = 100; // 500 iters, switch at 300
    let mut trainer = Trainer::new(surfels, model, views, config).unwrap();

    let mut log = Vec::new();
    trainer.run(Some(&mut log)).unwrap();

    // Verify the schedule from the JSON-lines log alone.
    let text = String::from_utf8(log).unwrap();
    let reports: Vec<LossReport> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 500);
    let switch = 300u64;
    for r in &reports {
        assert!(
            (r.total - r.recomputed_total()).abs() < 1e-12,
            "total is not the reported weighted sum at step {}",
            r.step
        );
        if r.step < switch {
            assert_eq!(r.stage, 1, "step {}", r.step);
            assert_eq!(r.weights.rec_shadowed, 0.0, "step {}", r.step);
            assert_eq!(r.weights.shadow_only, 10.0, "step {}", r.step);
            assert_eq!(r.lrs.mlp_embedding, 0.002, "step {}", r.step);
        } else {
            assert_eq!(r.stage, 2, "step {}", r.step);
            assert_eq!(r.weights.shadow_only, 0.001, "step {}", r.step);
            assert_eq!(r.lrs.mlp_embedding, 0.0001, "step {}", r.step);
        }
    }
    pass(
        6,
        "logged run shows rec_shadowed weight 0 and lambda4 = 10.0 strictly before the switch; 0.001 and lr 0.0001 after",
    );
}

// ---------------------------------------------------------------------
// Criterion 7
// ---------------------------------------------------------------------

#[test]
fn criterion_07_synthetic_end_to_end_recovery() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let opts = FixtureOptions::default(); // 200 surfels, 20 views, 64x64, 8 lights
    let info = fixture::generate(dir.path(), &opts).unwrap();
    assert_eq!(info.surfels.len(), 200);

    let ds = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
    let gt: GroundTruth = serde_json::from_reader(
        std::fs::File::open(dir.path().join("gt/fixture.json")).unwrap(),
    )
    .unwrap();
    let surfels = init_from_points(ds.points.as_ref().unwrap(), opts.seed);
    let views = views_from_dataset(&ds);
    let model = LightModel::init(views.len(), opts.seed);
    let mut config = fixture::fixture_train_config(opts.seed);
    config.desk_scale_divisor = RECOVERY_DIVISOR;
    let mut trainer = Trainer::new(surfels, model, views, config).unwrap();
    trainer.run(None).unwrap();

    let ropts = RenderOptions::default();
    let mut psnrs = Vec::new();
    let mut gt_albedo_px: Vec<f64> = Vec::new();
    let mut rec_albedo_px: Vec<f64> = Vec::new();
    for &t in &gt.test_views {
        let gt_light = EnvLight::from_flat(&gt.lights[gt.light_per_view[t]]);
        let cam = &ds.views[t].camera;
        let seg = ds.views[t].seg.as_ref().unwrap();
        let target = &ds.views[t].image;
        let buffers =
            pipeline::render_scene(&trainer.surfels, &gt_light, cam, &ropts, ShadingModel::Shadowed)
                .unwrap();
        // Resolve the global light<->albedo scale ambiguity per channel.
        let mut calibrated = buffers.color.clone();
        for c in 0..3 {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for p in 0..calibrated.npixels() {
                if seg.data[p] {
                    xs.push(buffers.color.data[p * 3 + c]);
                    ys.push(target.data[p * 3 + c]);
                }
            }
            let g = metrics::least_squares_gain(&xs, &ys);
            for p in 0..calibrated.npixels() {
                calibrated.data[p * 3 + c] = buffers.color.data[p * 3 + c] * g;
            }
        }
        let report = eval_metrics(&calibrated, target, seg).unwrap();
        println!(
            "  view {t}: masked PSNR {:.2} dB, SSIM {:.4}",
            report.psnr, report.ssim
        );
        psnrs.push(report.psnr);

        let gt_albedo = relight_core::io::pfm::read_pfm(
            &dir.path().join(format!("gt/albedo_{t:03}.pfm")),
        )
        .unwrap();
        for p in 0..gt_albedo.npixels() {
            if seg.data[p] {
                for c in 0..3 {
                    gt_albedo_px.push(gt_albedo.data[p * 3 + c]);
                    rec_albedo_px.push(buffers.albedo.data[p * 3 + c]);
                }
            }
        }
    }
    let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    assert!(
        mean_psnr >= RECOVERY_MEAN_PSNR_DB,
        "mean masked PSNR {mean_psnr:.2} below {RECOVERY_MEAN_PSNR_DB}"
    );

    // Albedo correlation after a global per-channel least-squares gain.
    let mut gained = vec![0.0; rec_albedo_px.len()];
    for c in 0..3 {
        let xs: Vec<f64> = rec_albedo_px.iter().skip(c).step_by(3).cloned().collect();
        let ys: Vec<f64> = gt_albedo_px.iter().skip(c).step_by(3).cloned().collect();
        let g = metrics::least_squares_gain(&xs, &ys);
        for (i, x) in rec_albedo_px.iter().enumerate().skip(c).step_by(3) {
            gained[i] = x * g;
        }
    }
    let pearson = metrics::pearson(&gained, &gt_albedo_px);
    assert!(
        pearson >= RECOVERY_ALBEDO_PEARSON,
        "albedo Pearson {pearson:.4} below {RECOVERY_ALBEDO_PEARSON}"
    );

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < RECOVERY_BUDGET_SECS, "took {secs:.0} s");
    pass(
        7,
        format!(
            "5000-iter recovery: mean masked PSNR {mean_psnr:.2} dB (>= {RECOVERY_MEAN_PSNR_DB}), albedo Pearson {pearson:.4} (>= {RECOVERY_ALBEDO_PEARSON}), {secs:.0} s"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 8
// ---------------------------------------------------------------------

#[test]
fn criterion_08_relighting_sanity() {
    let surfels = fixture::ground_truth_scene(0xAC08);
    let cam = fixture::ring_cameras(6, 48)[1].clone();
    let mut rng = salted_rng(0xAC, 8, 0);
    let light = fixture::random_positive_light(&mut rng);
    let opts = RenderOptions::default();

    // Full-turn rotation reproduces the render.
    let base = pipeline::relight(&surfels, &light, None, &cam, &opts).unwrap();
    let turned = pipeline::relight(
        &surfels,
        &light,
        Some(&azimuth_rotation(360.0)),
        &cam,
        &opts,
    )
    .unwrap();
    let rot_err = base.buffers.color.max_abs_diff(&turned.buffers.color);
    assert!(rot_err < ROTATION_IDENTITY_TOL, "rotation residual {rot_err}");

    // Shadow map vanishes at the clamped-cosine initialization.
    let max_shadow = base
        .shadow_map
        .data
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    assert!(max_shadow < SHADOW_AT_INIT_TOL, "shadow map peak {max_shadow}");

    // Shadow map stays non-negative on every fixture render, including a
    // perturbed transfer.
    let mut shadowed_scene = surfels.clone();
    for (i, s) in shadowed_scene.iter_mut().enumerate() {
        for (j, c) in s.transfer.coeffs.iter_mut().enumerate() {
            *c *= 1.0 - 0.3 * (((i + j) % 5) as f64) / 5.0;
        }
    }
    for cam in fixture::ring_cameras(4, 32) {
        let render = pipeline::relight(&shadowed_scene, &light, None, &cam, &opts).unwrap();
        assert!(render.shadow_map.data.iter().all(|&v| v >= 0.0));
        // The irradiance difference itself is computed pre-clamp; the
        // composited map must also stay finite.
        assert!(render.shadow_map.is_finite());
    }
    pass(
        8,
        format!(
            "360-degree rotation residual {rot_err:.2e}; shadow map at cosine init peaks {max_shadow:.2e}; non-negative everywhere"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 9
// ---------------------------------------------------------------------

/// Independent masked-metric script: direct per-window loops, written
/// separately from `metrics::eval_metrics`.
fn independent_masked_metrics(rendered: &ImageF, target: &ImageF, mask: &Mask) -> (f64, f64, f64) {
    let mut mse = 0.0;
    let mut n = 0usize;
    for p in 0..rendered.npixels() {
        if mask.data[p] {
            for c in 0..3 {
                let d = rendered.data[p * 3 + c] - target.data[p * 3 + c];
                mse += d * d;
            }
            n += 1;
        }
    }
    mse /= (n * 3) as f64;
    let psnr = 10.0 * (1.0 / mse).log10();

    // SSIM with window 5, sample covariance, over the mask eroded by 5.
    let half = 2isize;
    let (w, h) = (rendered.width as isize, rendered.height as isize);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut inside = true;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h || !mask.get(nx as usize, ny as usize)
                    {
                        inside = false;
                    }
                }
            }
            if !inside {
                continue;
            }
            let mut spx = 0.0;
            for c in 0..3 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dy in -half..=half {
                    for dx in -half..=half {
                        xs.push(rendered.get((x + dx) as usize, (y + dy) as usize, c));
                        ys.push(target.get((x + dx) as usize, (y + dy) as usize, c));
                    }
                }
                let np = 25.0;
                let ux = xs.iter().sum::<f64>() / np;
                let uy = ys.iter().sum::<f64>() / np;
                let vx = xs.iter().map(|v| (v - ux) * (v - ux)).sum::<f64>() / (np - 1.0);
                let vy = ys.iter().map(|v| (v - uy) * (v - uy)).sum::<f64>() / (np - 1.0);
                let vxy = xs
                    .iter()
                    .zip(&ys)
                    .map(|(a, b)| (a - ux) * (b - uy))
                    .sum::<f64>()
                    / (np - 1.0);
                spx += ((2.0 * ux * uy + 1e-4) * (2.0 * vxy + 9e-4))
                    / ((ux * ux + uy * uy + 1e-4) * (vx + vy + 9e-4));
            }
            acc += spx / 3.0;
            count += 1;
        }
    }
    (mse, psnr, acc / count as f64)
}

#[test]
fn criterion_09_metric_protocol() {
    let mut rng = salted_rng(0xAC, 9, 0);
    let rendered = ImageF::from_fn(32, 28, 3, |_, _, _| rng.random_range(0.0..1.0));
    let target = ImageF::from_fn(32, 28, 3, |_, _, _| rng.random_range(0.0..1.0));
    let mut mask = Mask::filled(32, 28, false);
    for y in 2..26 {
        for x in 3..24 {
            mask.set(x, y, true);
        }
    }
    for _ in 0..6 {
        let x = rng.random_range(3..24);
        let y = rng.random_range(2..26);
        mask.set(x, y, false);
    }
    let report = eval_metrics(&rendered, &target, &mask).unwrap();
    let (mse, psnr, ssim) = independent_masked_metrics(&rendered, &target, &mask);
    assert!((report.mse - mse).abs() < METRIC_TOL, "MSE {} vs {mse}", report.mse);
    assert!((report.psnr - psnr).abs() < METRIC_TOL, "PSNR {} vs {psnr}", report.psnr);
    assert!((report.ssim - ssim).abs() < METRIC_TOL, "SSIM {} vs {ssim}", report.ssim);

    // Identical images.
    let perfect = eval_metrics(&rendered, &rendered, &mask).unwrap();
    assert_eq!(perfect.mse, 0.0);
    assert_eq!(perfect.psnr, metrics::PSNR_CAP);
    assert!((perfect.ssim - 1.0).abs() < 1e-12);
    pass(
        9,
        format!(
            "masked MSE/PSNR/SSIM match the independent script within {METRIC_TOL} (SSIM {:.6} vs {ssim:.6}); identical pair is exact",
            report.ssim
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 10
// ---------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let data_dir = tempfile::tempdir().unwrap();
    let opts = FixtureOptions {
        views: 8,
        lights: 4,
        size: 32,
        test_views: 2,
        seed: 0xAC10,
    };
    fixture::generate(data_dir.path(), &opts).unwrap();
    let ds = load_dataset(data_dir.path(), &LoadOptions::default()).unwrap();

    let run = |out: &std::path::Path| -> Vec<u8> {
        let surfels = init_from_points(ds.points.as_ref().unwrap(), opts.seed);
        let views = views_from_dataset(&ds);
        let model = LightModel::init(views.len(), opts.seed);
        let mut config = fixture::fixture_train_config(opts.seed);
        config.desk_scale_divisor = 50; // 1000 iters
        let mut trainer = Trainer::new(surfels, model, views, config).unwrap();
        let mut log = Vec::new();
        trainer.run(Some(&mut log)).unwrap();
        checkpoint::save_checkpoint(out, &trainer).unwrap();
        log
    };

    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let log_a = run(out_a.path());
    let log_b = run(out_b.path());
    assert_eq!(log_a, log_b, "training logs differ");
    for name in [
        "scene.json",
        "surfels.bin",
        "light_model.json",
        "light_model.bin",
        "optimizer.json",
        "optimizer.bin",
        "trainer_state.json",
    ] {
        let a = std::fs::read(out_a.path().join(name)).unwrap();
        let b = std::fs::read(out_b.path().join(name)).unwrap();
        assert_eq!(a, b, "checkpoint file {name} differs");
    }
    pass(
        10,
        format!(
            "two seeded 1000-iter runs: byte-identical logs ({} bytes) and checkpoints",
            log_a.len()
        ),
    );
}

// Shadow-map export sanity shared by criterion 8's CLI counterpart: the
// lighting module clamps at zero by construction.
#[test]
fn shadow_map_is_nonnegative_by_construction() {
    let a = ImageF::from_fn(6, 5, 3, |x, y, c| (x + y + c) as f64 * 0.05);
    let b = ImageF::from_fn(6, 5, 3, |x, y, c| 0.3 - (x + y + c) as f64 * 0.05);
    let m = lighting::shadow_map(&a, &b).unwrap();
    assert!(m.data.iter().all(|&v| v >= 0.0));
}
