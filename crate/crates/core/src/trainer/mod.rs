//! The optimization loop: Adam parameter groups, the two-stage schedule,
//! and adaptive density control.
//!
//! Steps are strictly sequential; within a step the renderer parallelizes
//! over tiles. Every stochastic choice derives from `(seed, step)` so a
//! run is a pure function of its config and data, and checkpoints resume
//! bit-exactly.

pub mod adam;
pub mod checkpoint;
pub mod density;
pub mod step;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{ImageF, Mask};
use crate::losses::{AppliedLrs, AppliedWeights, LossReport, LossWeights, Stage};
use crate::rasterizer::RenderOptions;
use crate::scene::{Camera, LightModel, Surfel, EMBED_DIM};
use crate::sh::SH_COEFFS;
use crate::util::salted_rng;

use adam::Adam;
use density::{DensityConfig, DensityStats};
use step::{loss_and_grads, StepData};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub stage1_iters: u64,
    /// MLP + embedding learning rate; drops to the stage-2 value after the
    /// stage switch.
    pub lr_mlp_embedding: f64,
    pub lr_mlp_embedding_stage2: f64,
    /// Transfer-function SH learning rate.
    pub lr_transfer_sh: f64,
    /// Position rate is multiplied by the scene extent.
    pub lr_position: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_albedo: f64,
    pub densify_interval: u64,
    pub opacity_reset_interval: u64,
    pub densify_grad_threshold: f64,
    pub prune_opacity_threshold: f64,
    /// Split/clone cutoff as a fraction of the scene extent.
    pub split_scale_fraction: f64,
    pub min_surfels: usize,
    pub max_surfels: usize,
    pub seed: u64,
    /// Divides every iteration count for desk-scale runs.
    pub desk_scale_divisor: u64,
    /// Override the camera-derived scene extent.
    pub scene_extent: Option<f64>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 50_000,
            stage1_iters: 30_000,
            lr_mlp_embedding: 0.002,
            lr_mlp_embedding_stage2: 0.0001,
            lr_transfer_sh: 0.002,
            lr_position: 1.6e-4,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_albedo: 2.5e-3,
            densify_interval: 500,
            opacity_reset_interval: 3000,
            densify_grad_threshold: 2e-4,
            prune_opacity_threshold: 0.005,
            split_scale_fraction: 0.01,
            min_surfels: 16,
            max_surfels: 200_000,
            seed: 0,
            desk_scale_divisor: 1,
            scene_extent: None,
            loss: LossWeights::default(),
        }
    }
}

/// Iteration counts after applying the desk-scale divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_iters: u64,
    pub stage1_iters: u64,
    pub densify_interval: u64,
    pub opacity_reset_interval: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_iters > self.total_iters {
            return Err(Error::contract(
                "stage1_iters must not exceed total_iters".to_string(),
            ));
        }
        let lrs = [
            self.lr_mlp_embedding,
            self.lr_mlp_embedding_stage2,
            self.lr_transfer_sh,
            self.lr_position,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_albedo,
        ];
        if lrs.iter().any(|&lr| lr < 0.0) || self.desk_scale_divisor == 0 {
            return Err(Error::contract(
                "learning rates must be >= 0 and desk_scale_divisor >= 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        let d = self.desk_scale_divisor.max(1);
        Schedule {
            total_iters: (self.total_iters / d).max(1),
            stage1_iters: (self.stage1_iters / d).max(1),
            densify_interval: (self.densify_interval / d).max(1),
            opacity_reset_interval: (self.opacity_reset_interval / d).max(1),
        }
    }

    pub fn stage_at(&self, iter: u64) -> Stage {
        if iter < self.schedule().stage1_iters {
            Stage::Pretrain
        } else {
            Stage::Shadow
        }
    }
}

/// One training image with its camera and valid-pixel mask.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ImageF,
    pub valid_mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct OptimizerBank {
    pub position: Adam,
    pub rotation: Adam,
    pub log_scale: Adam,
    pub opacity: Adam,
    pub albedo: Adam,
    pub transfer: Adam,
    pub mlp: Adam,
    pub embedding: Adam,
}

impl OptimizerBank {
    fn new(n_surfels: usize, mlp_params: usize, n_images: usize) -> Self {
        OptimizerBank {
            position: Adam::new(3, n_surfels),
            rotation: Adam::new(4, n_surfels),
            log_scale: Adam::new(2, n_surfels),
            opacity: Adam::new(1, n_surfels),
            albedo: Adam::new(3, n_surfels),
            transfer: Adam::new(SH_COEFFS, n_surfels),
            mlp: Adam::new(mlp_params, 1),
            embedding: Adam::new(EMBED_DIM, n_images),
        }
    }

    fn remap_surfels(&mut self, map: &[Option<usize>]) {
        self.position.remap(map);
        self.rotation.remap(map);
        self.log_scale.remap(map);
        self.opacity.remap(map);
        self.albedo.remap(map);
        self.transfer.remap(map);
    }
}

pub struct Trainer {
    pub surfels: Vec<Surfel>,
    pub model: LightModel,
    pub views: Vec<TrainView>,
    pub config: TrainConfig,
    pub iter: u64,
    pub scene_extent: f64,
    pub render_opts: RenderOptions,
    pub(crate) opt: OptimizerBank,
    pub(crate) densify_accum: Vec<f64>,
    pub(crate) densify_steps: u64,
}

/// Build trainer views from a dataset's training split (in split order, so
/// embedding index i corresponds to `dataset.train[i]`).
pub fn views_from_dataset(dataset: &crate::io::dataset::Dataset) -> Vec<TrainView> {
    dataset
        .train
        .iter()
        .map(|&idx| {
            let v = &dataset.views[idx];
            TrainView {
                camera: v.camera.clone(),
                image: v.image.clone(),
                valid_mask: v.valid_mask(),
            }
        })
        .collect()
}

/// Scene extent: radius of the camera-position bounding sphere.
pub fn camera_extent(views: &[TrainView]) -> f64 {
    if views.is_empty() {
        return 1.0;
    }
    let positions: Vec<_> = views.iter().map(|v| v.camera.position()).collect();
    let centroid = positions.iter().sum::<nalgebra::Vector3<f64>>() / positions.len() as f64;
    positions
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max)
        .max(1e-6)
}

impl Trainer {
    pub fn new(
        surfels: Vec<Surfel>,
        model: LightModel,
        views: Vec<TrainView>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::contract("trainer needs at least one view".to_string()));
        }
        if model.image_count() != views.len() {
            return Err(Error::contract(format!(
                "light model has {} embeddings for {} views",
                model.image_count(),
                views.len()
            )));
        }
        let extent = config.scene_extent.unwrap_or_else(|| camera_extent(&views));
        let n = surfels.len();
        let mlp_params = model.mlp.param_count();
        let n_images = views.len();
        Ok(Trainer {
            surfels,
            model,
            views,
            config,
            iter: 0,
            scene_extent: extent,
            render_opts: RenderOptions::default(),
            opt: OptimizerBank::new(n, mlp_params, n_images),
            densify_accum: vec![0.0; n],
            densify_steps: 0,
        })
    }

    pub fn stage(&self) -> Stage {
        self.config.stage_at(self.iter)
    }

    fn lrs(&self, stage: Stage) -> AppliedLrs {
        let mlp_lr = match stage {
            Stage::Pretrain => self.config.lr_mlp_embedding,
            Stage::Shadow => self.config.lr_mlp_embedding_stage2,
        };
        // Splatting-convention position schedule: exponential decay to 1%
        // of the initial rate across the run.
        let total = self.config.schedule().total_iters.max(1);
        let progress = (self.iter as f64 / total as f64).clamp(0.0, 1.0);
        let position = self.config.lr_position * self.scene_extent * 0.01f64.powf(progress);
        AppliedLrs {
            position,
            rotation: self.config.lr_rotation,
            scale: self.config.lr_scale,
            opacity: self.config.lr_opacity,
            albedo: self.config.lr_albedo,
            transfer_sh: self.config.lr_transfer_sh,
            mlp_embedding: mlp_lr,
        }
    }

    /// The training image sampled at a step: a seeded per-epoch shuffle.
    pub fn image_for_step(&self, iter: u64) -> usize {
        let n = self.views.len() as u64;
        let epoch = iter / n;
        let pos = (iter % n) as usize;
        let mut order: Vec<usize> = (0..self.views.len()).collect();
        let mut rng = salted_rng(self.config.seed, epoch, 0x5348_5546);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        order[pos]
    }

    /// One optimization step: render both models, evaluate every loss,
    /// backpropagate, and apply per-group Adam updates.
    pub fn step(&mut self) -> Result<LossReport> {
        let stage = self.stage();
        let stage_w = self.config.loss.stage_weights(stage);
        let image_index = self.image_for_step(self.iter);
        let dirs = crate::losses::sample_directions(
            self.config.seed,
            self.iter,
            self.config.loss.mc_samples.max(1),
        );
        let view = &self.views[image_index];
        let data = StepData {
            surfels: &self.surfels,
            model: &self.model,
            image_index,
            camera: &view.camera,
            target: &view.image,
            valid_mask: &view.valid_mask,
            dirs: &dirs,
            weights: &self.config.loss,
            stage,
            render_opts: &self.render_opts,
        };
        let (terms, total, grads) = loss_and_grads(&data)?;
        if let Some(term) = step::first_non_finite(&terms, total) {
            return Err(Error::NonFinite {
                step: self.iter,
                term: term.to_string(),
            });
        }

        let lrs = self.lrs(stage);
        let n = self.surfels.len();

        // Gather / step / scatter per parameter group.
        let mut buf3 = vec![0.0; n * 3];
        let mut gbuf3 = vec![0.0; n * 3];
        for k in 0..n {
            for a in 0..3 {
                buf3[k * 3 + a] = self.surfels[k].position[a];
                gbuf3[k * 3 + a] = grads.position[k][a];
            }
        }
        self.opt.position.step_all(&mut buf3, &gbuf3, lrs.position);
        for k in 0..n {
            for a in 0..3 {
                self.surfels[k].position[a] = buf3[k * 3 + a];
            }
        }

        let mut buf4 = vec![0.0; n * 4];
        let mut gbuf4 = vec![0.0; n * 4];
        for k in 0..n {
            for a in 0..4 {
                buf4[k * 4 + a] = self.surfels[k].rotation[a];
                gbuf4[k * 4 + a] = grads.rotation[k][a];
            }
        }
        self.opt.rotation.step_all(&mut buf4, &gbuf4, lrs.rotation);
        for k in 0..n {
            for a in 0..4 {
                self.surfels[k].rotation[a] = buf4[k * 4 + a];
            }
            self.surfels[k].renormalize_rotation();
        }

        let mut buf2 = vec![0.0; n * 2];
        let mut gbuf2 = vec![0.0; n * 2];
        for k in 0..n {
            for a in 0..2 {
                buf2[k * 2 + a] = self.surfels[k].log_scale[a];
                gbuf2[k * 2 + a] = grads.log_scale[k][a];
            }
        }
        self.opt.log_scale.step_all(&mut buf2, &gbuf2, lrs.scale);
        for k in 0..n {
            for a in 0..2 {
                self.surfels[k].log_scale[a] = buf2[k * 2 + a];
            }
        }

        let mut buf1 = vec![0.0; n];
        for k in 0..n {
            buf1[k] = self.surfels[k].opacity_logit;
        }
        self.opt
            .opacity
            .step_all(&mut buf1, &grads.opacity_logit, lrs.opacity);
        for k in 0..n {
            self.surfels[k].opacity_logit = buf1[k];
        }

        for k in 0..n {
            for a in 0..3 {
                buf3[k * 3 + a] = self.surfels[k].albedo_param[a];
                gbuf3[k * 3 + a] = grads.albedo_param[k][a];
            }
        }
        self.opt.albedo.step_all(&mut buf3, &gbuf3, lrs.albedo);
        for k in 0..n {
            for a in 0..3 {
                self.surfels[k].albedo_param[a] = buf3[k * 3 + a];
            }
        }

        let mut buf9 = vec![0.0; n * SH_COEFFS];
        let mut gbuf9 = vec![0.0; n * SH_COEFFS];
        for k in 0..n {
            for a in 0..SH_COEFFS {
                buf9[k * SH_COEFFS + a] = self.surfels[k].transfer.coeffs[a];
                gbuf9[k * SH_COEFFS + a] = grads.transfer[k][a];
            }
        }
        self.opt
            .transfer
            .step_all(&mut buf9, &gbuf9, lrs.transfer_sh);
        for k in 0..n {
            for a in 0..SH_COEFFS {
                self.surfels[k].transfer.coeffs[a] = buf9[k * SH_COEFFS + a];
            }
        }

        // MLP (one row) and the active embedding (sparse row).
        let mut mlp_params = self.model.mlp.to_flat();
        let mlp_grads = {
            let g = &grads.mlp;
            let mut flat = Vec::with_capacity(mlp_params.len());
            flat.extend_from_slice(&g.w1);
            flat.extend_from_slice(&g.b1);
            flat.extend_from_slice(&g.w2);
            flat.extend_from_slice(&g.b2);
            flat.extend_from_slice(&g.w3);
            flat.extend_from_slice(&g.b3);
            flat
        };
        self.opt
            .mlp
            .step_all(&mut mlp_params, &mlp_grads, lrs.mlp_embedding);
        self.model.mlp = crate::scene::Mlp::from_flat(&mlp_params)?;

        let n_images = self.model.embeddings.len();
        let mut emb_params = vec![0.0; n_images * EMBED_DIM];
        let mut emb_grads = vec![0.0; n_images * EMBED_DIM];
        for (i, e) in self.model.embeddings.iter().enumerate() {
            emb_params[i * EMBED_DIM..(i + 1) * EMBED_DIM].copy_from_slice(e);
        }
        emb_grads[image_index * EMBED_DIM..(image_index + 1) * EMBED_DIM]
            .copy_from_slice(&grads.embedding);
        self.opt.embedding.step_rows(
            &mut emb_params,
            &emb_grads,
            lrs.mlp_embedding,
            &[image_index],
        );
        for (i, e) in self.model.embeddings.iter_mut().enumerate() {
            e.copy_from_slice(&emb_params[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
        }

        // Densification bookkeeping and events (stage 1 only).
        let sched = self.config.schedule();
        for k in 0..n {
            self.densify_accum[k] += grads.ndc_grad_norm[k];
        }
        self.densify_steps += 1;
        let completed = self.iter + 1;
        if stage == Stage::Pretrain {
            if completed % sched.densify_interval == 0 {
                self.run_density_control();
            }
            if completed % sched.opacity_reset_interval == 0 {
                density::reset_opacity(&mut self.surfels);
            }
        }

        let report = LossReport {
            step: self.iter,
            stage: stage.index(),
            image_index,
            surfel_count: self.surfels.len(),
            terms,
            weights: AppliedWeights {
                rec_unshadowed: stage_w.rec_unshadowed,
                rec_shadowed: stage_w.rec_shadowed,
                l01: self.config.loss.l01,
                positive_light: self.config.loss.positive_light,
                transfer_match: self.config.loss.transfer_match,
                shadow_only: stage_w.shadow_only,
                normal_consistency: self.config.loss.normal_consistency,
                depth_distortion: self.config.loss.depth_distortion,
            },
            lrs,
            total,
        };
        self.iter += 1;
        Ok(report)
    }

    /// Windowed average of the densification signal per surfel (for logs
    /// and threshold calibration).
    pub fn densify_averages(&self) -> Vec<f64> {
        let steps = self.densify_steps.max(1) as f64;
        self.densify_accum.iter().map(|a| a / steps).collect()
    }

    fn run_density_control(&mut self) -> DensityStats {
        let steps = self.densify_steps.max(1) as f64;
        let avg: Vec<f64> = self.densify_accum.iter().map(|a| a / steps).collect();
        let cfg = DensityConfig {
            grad_threshold: self.config.densify_grad_threshold,
            prune_opacity: self.config.prune_opacity_threshold,
            split_scale_cutoff: self.config.split_scale_fraction * self.scene_extent,
            min_surfels: self.config.min_surfels,
            max_surfels: self.config.max_surfels,
        };
        let mut rng = salted_rng(self.config.seed, self.iter, 0x4445_4e53);
        let (stats, remap) =
            density::densify_and_prune(&mut self.surfels, &avg, &cfg, &mut rng);
        self.opt.remap_surfels(&remap);
        self.densify_accum = vec![0.0; self.surfels.len()];
        self.densify_steps = 0;
        stats
    }

    /// Run to completion, writing one JSON line per step into `log`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<()> {
        let total = self.config.schedule().total_iters;
        while self.iter < total {
            let report = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &report)?;
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
