use nalgebra::Vector3;
use rand::Rng;

use super::reference;
use super::*;
use crate::quat;
use crate::scene::{Camera, Surfel};
use crate::util::{salted_rng, sample_sphere};

fn camera_on_axis() -> Camera {
    // 65 px wide so the center pixel (32,32) has its center exactly on the
    // optical axis.
    Camera::look_at(
        Vector3::new(0.0, 0.0, 5.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        60.0,
        60.0,
        65,
        65,
    )
}

fn facing_surfel(z: f64, opacity: f64, scale: f64) -> Surfel {
    Surfel::new(
        Vector3::new(0.0, 0.0, z),
        quat::IDENTITY,
        [scale, scale],
        opacity,
        [0.5, 0.5, 0.5],
    )
}

pub(crate) fn random_scene(
    rng: &mut impl Rng,
    count: usize,
    attr_dim: usize,
) -> (Vec<Surfel>, Vec<f64>, Camera) {
    let surfels: Vec<Surfel> = (0..count)
        .map(|_| {
            let pos = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
            );
            let axis = sample_sphere(rng);
            let angle = rng.random_range(-3.0..3.0);
            let mut s = Surfel::new(
                pos,
                quat::from_axis_angle(&axis, angle),
                [
                    rng.random_range(0.2f64..1.0),
                    rng.random_range(0.2f64..1.0),
                ],
                rng.random_range(0.1..0.85),
                [0.5, 0.5, 0.5],
            );
            s.opacity_logit = crate::util::logit(rng.random_range(0.1..0.85));
            s
        })
        .collect();
    let attrs: Vec<f64> = (0..count * attr_dim)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let eye = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(4.0..6.0),
    );
    let cam = Camera::look_at(
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        20.0,
        20.0,
        16,
        16,
    );
    (surfels, attrs, cam)
}

#[test]
fn empty_scene_renders_black_with_full_transmittance() {
    let cam = camera_on_axis();
    let out = render(&[], &[], 3, &cam, &RenderOptions::default()).unwrap();
    assert!(out.attrs.iter().all(|&v| v == 0.0));
    assert!(out.transmittance.iter().all(|&v| v == 1.0));
    assert!(out.depth.iter().all(|&v| v == 0.0));
}

#[test]
fn single_opaque_surfel_hits_pixel_center() {
    let cam = camera_on_axis();
    let mut s = facing_surfel(0.0, 0.5, 2.0);
    s.opacity_logit = 25.0; // opacity -> 1
    let attrs = vec![0.2, 0.6, 0.9];
    let out = render(&[s], &attrs, 3, &cam, &RenderOptions::default()).unwrap();
    let p = 32 * 65 + 32;
    for d in 0..3 {
        assert!((out.attrs[p * 3 + d] - attrs[d]).abs() < 1e-8);
    }
    // Intersection depth: camera sits 5 units away along the axis.
    assert!((out.depth[p] - 5.0).abs() < 1e-8);
    assert!(out.transmittance[p] < 1e-8);
}

#[test]
fn two_stacked_surfels_composite_by_hand() {
    let cam = camera_on_axis();
    let front = facing_surfel(0.5, 0.5, 2.0);
    let back = facing_surfel(-0.5, 0.5, 2.0);
    let attrs = vec![
        1.0, 0.0, 0.0, // front color c1
        0.0, 1.0, 0.0, // back color c2
    ];
    let out = render(
        &[front, back],
        &attrs,
        3,
        &cam,
        &RenderOptions::default(),
    )
    .unwrap();
    let p = 32 * 65 + 32;
    // 0.5*c1 + 0.5*0.5*c2, transmittance 0.25.
    assert!((out.attrs[p * 3] - 0.5).abs() < 1e-12);
    assert!((out.attrs[p * 3 + 1] - 0.25).abs() < 1e-12);
    assert!((out.transmittance[p] - 0.25).abs() < 1e-12);
    // Distortion pair: w1 w2 |z1 - z2| = 0.5 * 0.25 * 1.
    assert!((out.distortion[p] - 0.125).abs() < 1e-12);
}

#[test]
fn matches_brute_force_reference_on_random_scenes() {
    let opts = RenderOptions::default();
    for seed in 0..40u64 {
        let mut rng = salted_rng(seed, 100, 0);
        let count = rng.random_range(1..=50);
        let (surfels, attrs, cam) = random_scene(&mut rng, count, 3);
        let fast = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
        let slow = reference::render(&surfels, &attrs, 3, &cam, &opts).unwrap();
        let diff_attr = fast
            .attrs
            .iter()
            .zip(&slow.attrs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let diff_t = fast
            .transmittance
            .iter()
            .zip(&slow.transmittance)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let diff_d = fast
            .depth
            .iter()
            .zip(&slow.depth)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let diff_dist = fast
            .distortion
            .iter()
            .zip(&slow.distortion)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            diff_attr < 1e-6 && diff_t < 1e-6 && diff_d < 1e-6 && diff_dist < 1e-6,
            "seed {seed}: attr {diff_attr} T {diff_t} depth {diff_d} dist {diff_dist}"
        );

        // Weight-partition invariant: sum of weights + T = 1 per pixel.
        for p in 0..slow.width * slow.height {
            let wsum: f64 = slow.fragments[p].iter().map(|f| f.weight).sum();
            // Early-terminated rays keep their residual transmittance.
            assert!(
                (wsum + slow.transmittance[p] - 1.0).abs() < 1e-5,
                "pixel {p}: wsum {wsum} + T {} != 1",
                slow.transmittance[p]
            );
            for f in &slow.fragments[p] {
                assert!(f.weight >= 0.0 && f.weight <= 1.0);
            }
        }
    }
}

#[test]
fn permuting_surfels_leaves_output_unchanged() {
    let mut rng = salted_rng(7, 200, 0);
    let (surfels, attrs, cam) = random_scene(&mut rng, 20, 3);
    let opts = RenderOptions::default();
    let base = render(&surfels, &attrs, 3, &cam, &opts).unwrap();

    let mut perm: Vec<usize> = (0..surfels.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let surfels_p: Vec<Surfel> = perm.iter().map(|&i| surfels[i].clone()).collect();
    let attrs_p: Vec<f64> = perm
        .iter()
        .flat_map(|&i| attrs[i * 3..(i + 1) * 3].to_vec())
        .collect();
    let permuted = render(&surfels_p, &attrs_p, 3, &cam, &opts).unwrap();
    assert!(base
        .attrs
        .iter()
        .zip(&permuted.attrs)
        .all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(base
        .transmittance
        .iter()
        .zip(&permuted.transmittance)
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn attribute_compositing_is_linear() {
    let mut rng = salted_rng(8, 300, 0);
    let (surfels, _, cam) = random_scene(&mut rng, 15, 2);
    let opts = RenderOptions::default();
    let x: Vec<f64> = (0..surfels.len() * 2)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let y: Vec<f64> = (0..surfels.len() * 2)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
    let rx = render(&surfels, &x, 2, &cam, &opts).unwrap();
    let ry = render(&surfels, &y, 2, &cam, &opts).unwrap();
    let rc = render(&surfels, &combo, 2, &cam, &opts).unwrap();
    for p in 0..rc.attrs.len() {
        assert!((rc.attrs[p] - (a * rx.attrs[p] + b * ry.attrs[p])).abs() < 1e-6);
    }
}

#[test]
fn degenerate_camera_is_rejected() {
    let mut cam = camera_on_axis();
    cam.fy = -1.0;
    assert!(render(&[], &[], 1, &cam, &RenderOptions::default()).is_err());
}

#[test]
fn backward_requires_fragments_and_fresh_scene() {
    let cam = camera_on_axis();
    let surfels = vec![facing_surfel(0.0, 0.5, 1.0)];
    let attrs = vec![1.0, 0.0, 0.0];
    let opts = RenderOptions::default();
    let out = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    let grads = OutputGrads::default();
    assert!(backward(&surfels, &attrs, 3, &cam, &opts, &out, &grads).is_err());

    let opts = RenderOptions {
        retain_fragments: true,
        ..RenderOptions::default()
    };
    let out = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    let mut mutated = surfels.clone();
    mutated[0].position.x += 0.1;
    assert!(backward(&mutated, &attrs, 3, &cam, &opts, &out, &grads).is_err());
    assert!(backward(&surfels, &attrs, 3, &cam, &opts, &out, &grads).is_ok());
}

#[test]
fn backward_front_color_gradient_is_half() {
    let cam = camera_on_axis();
    let front = facing_surfel(0.5, 0.5, 2.0);
    let back = facing_surfel(-0.5, 0.5, 2.0);
    let surfels = vec![front, back];
    let attrs = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let opts = RenderOptions {
        retain_fragments: true,
        ..RenderOptions::default()
    };
    let out = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    // Probe only the center pixel's red channel.
    let p = 32 * 65 + 32;
    let mut d_attrs = vec![0.0; 65 * 65 * 3];
    d_attrs[p * 3] = 1.0;
    let grads_in = OutputGrads {
        d_attrs: Some(&d_attrs),
        ..OutputGrads::default()
    };
    let grads = backward(&surfels, &attrs, 3, &cam, &opts, &out, &grads_in).unwrap();
    assert!((grads.d_attrs[0] - 0.5).abs() < 1e-12);
    assert!((grads.d_attrs[3] - 0.25).abs() < 1e-12);
}

#[test]
fn backward_zero_upstream_gives_zero_gradients() {
    let mut rng = salted_rng(9, 400, 0);
    let (surfels, attrs, cam) = random_scene(&mut rng, 10, 3);
    let opts = RenderOptions {
        retain_fragments: true,
        ..RenderOptions::default()
    };
    let out = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    let grads = backward(
        &surfels,
        &attrs,
        3,
        &cam,
        &opts,
        &out,
        &OutputGrads::default(),
    )
    .unwrap();
    assert!(grads.d_attrs.iter().all(|&v| v == 0.0));
    assert!(grads.d_position.iter().all(|v| v.norm() == 0.0));
    assert!(grads.d_rotation.iter().flatten().all(|&v| v == 0.0));
    assert!(grads.d_log_scale.iter().flatten().all(|&v| v == 0.0));
    assert!(grads.d_opacity_logit.iter().all(|&v| v == 0.0));
}

/// Scalar probe loss over all output buffers, used by the FD check.
fn probe_loss(
    surfels: &[Surfel],
    attrs: &[f64],
    cam: &Camera,
    opts: &RenderOptions,
    probes: &(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
) -> f64 {
    let out = render(surfels, attrs, 3, cam, opts).unwrap();
    let mut loss = 0.0;
    for (v, p) in out.attrs.iter().zip(&probes.0) {
        loss += v * p;
    }
    for (v, p) in out.depth.iter().zip(&probes.1) {
        loss += v * p;
    }
    for (v, p) in out.transmittance.iter().zip(&probes.2) {
        loss += v * p;
    }
    for (v, p) in out.distortion.iter().zip(&probes.3) {
        loss += v * p;
    }
    loss
}

#[test]
fn backward_matches_finite_differences() {
    // Tight cutoffs remove the inherent compositing discontinuities so the
    // finite-difference probe sees a smooth function; the adjoint code path
    // is identical at the default cutoffs.
    let opts = RenderOptions {
        retain_fragments: true,
        gaussian_cutoff: 1e-12,
        transmittance_floor: 1e-9,
        ..RenderOptions::default()
    };
    let mut rng = salted_rng(10, 500, 0);
    let (surfels, attrs, cam) = random_scene(&mut rng, 6, 3);
    let npx = (cam.width * cam.height) as usize;
    let probes: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = (
        (0..npx * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..npx).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..npx).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..npx).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );

    let out = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    let grads_in = OutputGrads {
        d_attrs: Some(&probes.0),
        d_depth: Some(&probes.1),
        d_transmittance: Some(&probes.2),
        d_distortion: Some(&probes.3),
    };
    let grads = backward(&surfels, &attrs, 3, &cam, &opts, &out, &grads_in).unwrap();

    let h = 1e-5;
    let check = |fd: f64, analytic: f64, what: &str| {
        let tol = 1e-3 * fd.abs().max(analytic.abs()) + 1e-6;
        assert!(
            (fd - analytic).abs() < tol,
            "{what}: fd {fd} vs analytic {analytic}"
        );
    };

    for i in 0..surfels.len() {
        for k in 0..3 {
            let mut sp = surfels.clone();
            sp[i].position[k] += h;
            let mut sm = surfels.clone();
            sm[i].position[k] -= h;
            let fd = (probe_loss(&sp, &attrs, &cam, &opts, &probes)
                - probe_loss(&sm, &attrs, &cam, &opts, &probes))
                / (2.0 * h);
            check(fd, grads.d_position[i][k], &format!("position[{i}][{k}]"));
        }
        for k in 0..4 {
            let mut sp = surfels.clone();
            sp[i].rotation[k] += h;
            let mut sm = surfels.clone();
            sm[i].rotation[k] -= h;
            let fd = (probe_loss(&sp, &attrs, &cam, &opts, &probes)
                - probe_loss(&sm, &attrs, &cam, &opts, &probes))
                / (2.0 * h);
            check(fd, grads.d_rotation[i][k], &format!("rotation[{i}][{k}]"));
        }
        for k in 0..2 {
            let mut sp = surfels.clone();
            sp[i].log_scale[k] += h;
            let mut sm = surfels.clone();
            sm[i].log_scale[k] -= h;
            let fd = (probe_loss(&sp, &attrs, &cam, &opts, &probes)
                - probe_loss(&sm, &attrs, &cam, &opts, &probes))
                / (2.0 * h);
            check(fd, grads.d_log_scale[i][k], &format!("log_scale[{i}][{k}]"));
        }
        {
            let mut sp = surfels.clone();
            sp[i].opacity_logit += h;
            let mut sm = surfels.clone();
            sm[i].opacity_logit -= h;
            let fd = (probe_loss(&sp, &attrs, &cam, &opts, &probes)
                - probe_loss(&sm, &attrs, &cam, &opts, &probes))
                / (2.0 * h);
            check(fd, grads.d_opacity_logit[i], &format!("opacity[{i}]"));
        }
        for k in 0..3 {
            let mut ap = attrs.clone();
            ap[i * 3 + k] += h;
            let mut am = attrs.clone();
            am[i * 3 + k] -= h;
            let fd = (probe_loss(&surfels, &ap, &cam, &opts, &probes)
                - probe_loss(&surfels, &am, &cam, &opts, &probes))
                / (2.0 * h);
            check(fd, grads.d_attrs[i * 3 + k], &format!("attr[{i}][{k}]"));
        }
    }
}

#[test]
fn tiled_traversal_handles_large_frames() {
    // Frame larger than one tile with surfels straddling tile borders.
    let mut rng = salted_rng(11, 600, 0);
    let (mut surfels, attrs, mut cam) = random_scene(&mut rng, 30, 3);
    cam.width = 48;
    cam.height = 40;
    cam.cx = 24.0;
    cam.cy = 20.0;
    for s in &mut surfels {
        s.log_scale = [s.log_scale[0] + 0.5, s.log_scale[1] + 0.5];
    }
    let opts = RenderOptions::default();
    let fast = render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    let slow = reference::render(&surfels, &attrs, 3, &cam, &opts).unwrap();
    let diff = fast
        .attrs
        .iter()
        .zip(&slow.attrs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(diff < 1e-6, "max diff {diff}");
}
