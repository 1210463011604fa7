//! One training step as pure functions over a scene snapshot.
//!
//! `loss_value` and `loss_and_grads` share a single code path so the
//! finite-difference suite probes exactly the function the optimizer sees.
//! All stochastic inputs (the image pick and the Monte-Carlo direction
//! batch) are supplied by the caller and stay frozen within a step.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::img::{ImageF, Mask};
use crate::losses::{
    self, geometric, photometric_loss_with_grad, LossTerms, LossWeights, Stage,
    TransferMatchGrads,
};
use crate::pipeline::{self, channels};
use crate::rasterizer::{self, OutputGrads, RenderOptions};
use crate::scene::{Camera, LightModel, MlpGrads, Surfel, EMBED_DIM};
use crate::sh::{EnvLight, SH_COEFFS};

/// Inputs of one step, borrowed from the trainer.
#[derive(Clone, Copy)]
pub struct StepData<'a> {
    pub surfels: &'a [Surfel],
    pub model: &'a LightModel,
    /// Embedding index of the sampled training image.
    pub image_index: usize,
    pub camera: &'a Camera,
    pub target: &'a ImageF,
    /// Valid (non-occluder) pixels.
    pub valid_mask: &'a Mask,
    pub dirs: &'a [Vector3<f64>],
    pub weights: &'a LossWeights,
    pub stage: Stage,
    pub render_opts: &'a RenderOptions,
}

/// Gradients for every trainable parameter group.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 2]>,
    pub opacity_logit: Vec<f64>,
    pub albedo_param: Vec<[f64; 3]>,
    pub transfer: Vec<[f64; SH_COEFFS]>,
    pub mlp: MlpGrads,
    /// Gradient of the sampled image's embedding; other rows are zero by
    /// construction (one image per step).
    pub embedding: [f64; EMBED_DIM],
    /// Per-surfel NDC positional gradient norms, the densification signal.
    pub ndc_grad_norm: Vec<f64>,
}

pub fn loss_value(data: &StepData) -> Result<(LossTerms, f64)> {
    let (terms, total, _) = run_step(data, false)?;
    Ok((terms, total))
}

pub fn loss_and_grads(data: &StepData) -> Result<(LossTerms, f64, ParamGrads)> {
    let (terms, total, grads) = run_step(data, true)?;
    Ok((terms, total, grads.expect("gradients requested")))
}

fn run_step(data: &StepData, with_grads: bool) -> Result<(LossTerms, f64, Option<ParamGrads>)> {
    let n = data.surfels.len();
    let stage_w = data.weights.stage_weights(data.stage);
    let (light, mlp_cache) = data.model.forward_cached(data.image_index)?;

    // Forward: shading + one splatting pass with all attributes.
    let mut opts = data.render_opts.clone();
    opts.retain_fragments = with_grads;
    let (shading, attrs, output) =
        pipeline::training_forward(data.surfels, &light, data.camera, &opts)?;

    // Photometric terms (both models are always reported).
    let shadowed_img = output.attr_image(channels::SHADOWED);
    let unshadowed_img = output.attr_image(channels::UNSHADOWED);
    let want_sh_grad = with_grads && stage_w.rec_shadowed != 0.0;
    let want_unsh_grad = with_grads && stage_w.rec_unshadowed != 0.0;
    let (rec_shadowed, d_img_sh) = if want_sh_grad {
        let (v, g) = photometric_loss_with_grad(
            &shadowed_img,
            data.target,
            data.valid_mask,
            data.weights.ssim,
        )?;
        (v, Some(g))
    } else {
        (
            losses::photometric_loss(
                &shadowed_img,
                data.target,
                data.valid_mask,
                data.weights.ssim,
            )?,
            None,
        )
    };
    let (rec_unshadowed, d_img_unsh) = if want_unsh_grad {
        let (v, g) = photometric_loss_with_grad(
            &unshadowed_img,
            data.target,
            data.valid_mask,
            data.weights.ssim,
        )?;
        (v, Some(g))
    } else {
        (
            losses::photometric_loss(
                &unshadowed_img,
                data.target,
                data.valid_mask,
                data.weights.ssim,
            )?,
            None,
        )
    };

    // Geometric regularizers.
    let (normal_consistency, nc_grads) =
        geometric::normal_consistency(&output, channels::NORMAL, data.camera);
    let depth_distortion = geometric::depth_distortion(&output);

    // Physical-constraint regularizers (values; gradients on demand below).
    let mut d_transfer = vec![[0.0; SH_COEFFS]; n];
    let mut d_rotation = vec![[0.0; 4]; n];
    let mut d_light_arr = [EnvLight::zero()];
    let mut d_rad_sh = vec![[0.0; 3]; n];
    let mut d_rad_unsh = vec![[0.0; 3]; n];

    let (l01, transfer_match, positive_light, shadow_only);
    if with_grads {
        l01 = losses::loss_01_with_grad(data.surfels, data.dirs, &mut d_transfer, data.weights.l01);
        transfer_match = losses::loss_transfer_match_with_grad(
            data.surfels,
            data.dirs,
            TransferMatchGrads {
                d_transfer: &mut d_transfer,
                d_rotation: &mut d_rotation,
            },
            data.weights.transfer_match,
        );
        positive_light = losses::loss_positive_light_with_grad(
            std::slice::from_ref(&light),
            data.dirs,
            &mut d_light_arr,
            data.weights.positive_light,
        );
        shadow_only = losses::loss_shadow_only_with_grad(
            &shading.radiance_shadowed,
            &shading.radiance_unshadowed,
            (&mut d_rad_sh, &mut d_rad_unsh),
            stage_w.shadow_only,
        );
    } else {
        l01 = losses::loss_01(data.surfels, data.dirs);
        transfer_match = losses::loss_transfer_match(data.surfels, data.dirs);
        positive_light =
            losses::loss_positive_light(std::slice::from_ref(&light), data.dirs);
        shadow_only = losses::loss_shadow_only(
            &shading.radiance_shadowed,
            &shading.radiance_unshadowed,
        );
    }

    let terms = LossTerms {
        rec_unshadowed,
        rec_shadowed,
        l01,
        positive_light,
        transfer_match,
        shadow_only,
        normal_consistency,
        depth_distortion,
    };
    let total = stage_w.rec_unshadowed * rec_unshadowed
        + stage_w.rec_shadowed * rec_shadowed
        + data.weights.l01 * l01
        + data.weights.positive_light * positive_light
        + data.weights.transfer_match * transfer_match
        + stage_w.shadow_only * shadow_only
        + data.weights.normal_consistency * normal_consistency
        + data.weights.depth_distortion * depth_distortion;

    if !with_grads {
        return Ok((terms, total, None));
    }

    // Assemble upstream buffer gradients for the rasterizer backward.
    let npx = output.width * output.height;
    let mut d_attrs_buf = vec![0.0; npx * channels::DIM];
    for p in 0..npx {
        if let Some(g) = &d_img_sh {
            for c in 0..3 {
                d_attrs_buf[p * channels::DIM + channels::SHADOWED.start + c] +=
                    stage_w.rec_shadowed * g.data[p * 3 + c];
            }
        }
        if let Some(g) = &d_img_unsh {
            for c in 0..3 {
                d_attrs_buf[p * channels::DIM + channels::UNSHADOWED.start + c] +=
                    stage_w.rec_unshadowed * g.data[p * 3 + c];
            }
        }
        for c in 0..3 {
            d_attrs_buf[p * channels::DIM + channels::NORMAL.start + c] +=
                data.weights.normal_consistency * nc_grads.d_normal[p * 3 + c];
        }
    }
    let d_depth: Vec<f64> = nc_grads
        .d_depth
        .iter()
        .map(|g| data.weights.normal_consistency * g)
        .collect();
    let d_trans: Vec<f64> = nc_grads
        .d_transmittance
        .iter()
        .map(|g| data.weights.normal_consistency * g)
        .collect();
    let d_dist = vec![data.weights.depth_distortion / npx as f64; npx];

    let raster = rasterizer::backward(
        data.surfels,
        &attrs,
        channels::DIM,
        data.camera,
        &opts,
        &output,
        &OutputGrads {
            d_attrs: Some(&d_attrs_buf),
            d_depth: Some(&d_depth),
            d_transmittance: Some(&d_trans),
            d_distortion: Some(&d_dist),
        },
    )?;

    // Shading chain: attribute rows + per-surfel radiance pairs.
    let shade = pipeline::shading_backward(
        data.surfels,
        &light,
        &shading,
        &raster.d_attrs,
        &d_rad_sh,
        &d_rad_unsh,
    );

    // Light gradients flow through the MLP into weights and the embedding.
    let mut d_light_total = [0.0; 27];
    let shade_flat = shade.d_light.to_flat();
    let reg_flat = d_light_arr[0].to_flat();
    for i in 0..27 {
        d_light_total[i] = shade_flat[i] + reg_flat[i];
    }
    let (mlp_grads, d_embedding) = data.model.mlp.backward(&mlp_cache, &d_light_total);

    // Densification signal: positional gradient pushed through the NDC map.
    let mut ndc_grad_norm = vec![0.0; n];
    for k in 0..n {
        if let Some([jx, jy]) = rasterizer::ndc_jacobian(data.camera, &data.surfels[k].position)
        {
            let gx = jx.dot(&raster.d_position[k]);
            let gy = jy.dot(&raster.d_position[k]);
            ndc_grad_norm[k] = (gx * gx + gy * gy).sqrt();
        }
    }

    let mut grads = ParamGrads {
        position: raster.d_position,
        rotation: raster.d_rotation,
        log_scale: raster.d_log_scale,
        opacity_logit: raster.d_opacity_logit,
        albedo_param: shade.d_albedo_param,
        transfer: d_transfer,
        mlp: mlp_grads,
        embedding: d_embedding,
        ndc_grad_norm,
    };
    for k in 0..n {
        for c in 0..4 {
            grads.rotation[k][c] += shade.d_rotation[k][c] + d_rotation[k][c];
        }
        for i in 0..SH_COEFFS {
            grads.transfer[k][i] += shade.d_transfer[k][i];
        }
    }
    Ok((terms, total, Some(grads)))
}

/// Name the first non-finite loss term, if any.
pub fn first_non_finite(terms: &LossTerms, total: f64) -> Option<&'static str> {
    let named = [
        ("rec_unshadowed", terms.rec_unshadowed),
        ("rec_shadowed", terms.rec_shadowed),
        ("l01", terms.l01),
        ("positive_light", terms.positive_light),
        ("transfer_match", terms.transfer_match),
        ("shadow_only", terms.shadow_only),
        ("normal_consistency", terms.normal_consistency),
        ("depth_distortion", terms.depth_distortion),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Some(name);
        }
    }
    if !total.is_finite() {
        return Some("total");
    }
    None
}

/// Convenience for tests and the acceptance suite: per-group gradient check
/// against central finite differences with frozen directions. Errors with
/// the failing entries if any parameter disagrees.
pub fn check_gradients(data: &StepData, h: f64, rel_tol: f64, abs_tol: f64) -> Result<()> {
    let (_, _, grads) = run_step(data, true)?;
    let grads = grads.unwrap();
    let mut failures = Vec::new();

    let eval = |surfels: &[Surfel], model: &LightModel| -> f64 {
        let probe = StepData {
            surfels,
            model,
            ..*data
        };
        loss_value(&probe).map(|(_, total)| total).unwrap_or(f64::NAN)
    };

    let mut check = |name: String, fd: f64, analytic: f64| {
        let tol = abs_tol + rel_tol * fd.abs().max(analytic.abs());
        if (fd - analytic).abs() > tol {
            failures.push(format!("{name}: fd {fd:.6e} vs analytic {analytic:.6e}"));
        }
    };

    for k in 0..data.surfels.len() {
        let perturb = |set: &dyn Fn(&mut Surfel, f64), get: &dyn Fn(&Surfel) -> f64| -> f64 {
            let base = get(&data.surfels[k]);
            let mut sp = data.surfels.to_vec();
            set(&mut sp[k], base + h);
            let mut sm = data.surfels.to_vec();
            set(&mut sm[k], base - h);
            (eval(&sp, data.model) - eval(&sm, data.model)) / (2.0 * h)
        };
        for a in 0..3 {
            let fd = perturb(&move |s, v| s.position[a] = v, &move |s| s.position[a]);
            check(format!("surfel{k}.position[{a}]"), fd, grads.position[k][a]);
        }
        for a in 0..4 {
            let fd = perturb(&move |s, v| s.rotation[a] = v, &move |s| s.rotation[a]);
            check(format!("surfel{k}.rotation[{a}]"), fd, grads.rotation[k][a]);
        }
        for a in 0..2 {
            let fd = perturb(&move |s, v| s.log_scale[a] = v, &move |s| s.log_scale[a]);
            check(format!("surfel{k}.log_scale[{a}]"), fd, grads.log_scale[k][a]);
        }
        {
            let fd = perturb(&move |s, v| s.opacity_logit = v, &move |s| s.opacity_logit);
            check(format!("surfel{k}.opacity"), fd, grads.opacity_logit[k]);
        }
        for a in 0..3 {
            let fd = perturb(&move |s, v| s.albedo_param[a] = v, &move |s| s.albedo_param[a]);
            check(format!("surfel{k}.albedo[{a}]"), fd, grads.albedo_param[k][a]);
        }
        for a in 0..SH_COEFFS {
            let fd = perturb(
                &move |s, v| s.transfer.coeffs[a] = v,
                &move |s| s.transfer.coeffs[a],
            );
            check(format!("surfel{k}.transfer[{a}]"), fd, grads.transfer[k][a]);
        }
    }

    // MLP parameter groups.
    let mlp_slots: Vec<(&'static str, usize)> = vec![
        ("w1", data.model.mlp.w1.len()),
        ("b1", data.model.mlp.b1.len()),
        ("w2", data.model.mlp.w2.len()),
        ("b2", data.model.mlp.b2.len()),
        ("w3", data.model.mlp.w3.len()),
        ("b3", data.model.mlp.b3.len()),
    ];
    for (layer, len) in mlp_slots {
        for i in 0..len {
            let get = |m: &LightModel| -> f64 {
                match layer {
                    "w1" => m.mlp.w1[i],
                    "b1" => m.mlp.b1[i],
                    "w2" => m.mlp.w2[i],
                    "b2" => m.mlp.b2[i],
                    "w3" => m.mlp.w3[i],
                    _ => m.mlp.b3[i],
                }
            };
            let set = |m: &mut LightModel, v: f64| match layer {
                "w1" => m.mlp.w1[i] = v,
                "b1" => m.mlp.b1[i] = v,
                "w2" => m.mlp.w2[i] = v,
                "b2" => m.mlp.b2[i] = v,
                "w3" => m.mlp.w3[i] = v,
                _ => m.mlp.b3[i] = v,
            };
            let analytic = match layer {
                "w1" => grads.mlp.w1[i],
                "b1" => grads.mlp.b1[i],
                "w2" => grads.mlp.w2[i],
                "b2" => grads.mlp.b2[i],
                "w3" => grads.mlp.w3[i],
                _ => grads.mlp.b3[i],
            };
            let base = get(data.model);
            let mut mp = data.model.clone();
            set(&mut mp, base + h);
            let mut mm = data.model.clone();
            set(&mut mm, base - h);
            let fd = (eval(data.surfels, &mp) - eval(data.surfels, &mm)) / (2.0 * h);
            check(format!("mlp.{layer}[{i}]"), fd, analytic);
        }
    }

    // Active embedding.
    for i in 0..EMBED_DIM {
        let base = data.model.embeddings[data.image_index][i];
        let mut mp = data.model.clone();
        mp.embeddings[data.image_index][i] = base + h;
        let mut mm = data.model.clone();
        mm.embeddings[data.image_index][i] = base - h;
        let fd = (eval(data.surfels, &mp) - eval(data.surfels, &mm)) / (2.0 * h);
        check(format!("embedding[{i}]"), fd, grads.embedding[i]);
    }

    if data.model.embeddings.len() > 1 {
        // Inactive embeddings must not influence the loss.
        let other = (data.image_index + 1) % data.model.embeddings.len();
        let mut mp = data.model.clone();
        mp.embeddings[other][0] += 10.0 * h;
        let delta = (eval(data.surfels, &mp) - eval(data.surfels, data.model)).abs();
        if delta > abs_tol {
            failures.push(format!("inactive embedding influenced the loss by {delta:e}"));
        }
    }

    if !failures.is_empty() {
        return Err(Error::Contract(format!(
            "gradient check failed for {} entries; first: {}",
            failures.len(),
            failures[0]
        )));
    }
    Ok(())
}
