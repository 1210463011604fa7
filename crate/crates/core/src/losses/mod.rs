//! Training objectives.
//!
//! Photometric reconstruction (masked L1 + D-SSIM) lives in [`ssim`]; the
//! 2DGS geometric regularizers in [`geometric`]. This module holds the four
//! physical-constraint regularizers and their Monte-Carlo estimator: the
//! transfer range penalty, the light positivity penalty, the
//! shadowed/unshadowed transfer match, and the shadow-only darkening
//! constraint. One fresh batch of uniform sphere directions per step is
//! shared across all four terms.

pub mod geometric;
pub mod ssim;

pub use ssim::{photometric_loss, photometric_loss_with_grad};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::lighting::Rgb;
use crate::quat;
use crate::scene::Surfel;
use crate::sh::{eval_basis_raw, EnvLight, SH_COEFFS};
#[cfg(test)]
use crate::sh::ShVector;
use crate::util::{salted_rng, sample_sphere_batch};

/// Loss weights; stage-dependent entries carry both values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Transfer range penalty weight (lambda_1).
    pub l01: f64,
    /// Light positivity weight (lambda_2).
    pub positive_light: f64,
    /// Transfer/cosine match weight (lambda_3).
    pub transfer_match: f64,
    /// Shadow-only constraint weight in stage 1 (lambda_4).
    pub shadow_only_stage1: f64,
    /// Shadow-only constraint weight in stage 2.
    pub shadow_only_stage2: f64,
    /// D-SSIM blend inside the photometric loss.
    pub ssim: f64,
    /// Unshadowed reconstruction weight after the stage switch
    /// (unpublished; kept small so the pretrained model is not degraded).
    pub rec_unshadowed_stage2: f64,
    pub normal_consistency: f64,
    pub depth_distortion: f64,
    /// Monte-Carlo sample count N per training step.
    pub mc_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l01: 0.001,
            positive_light: 0.05,
            transfer_match: 1.0,
            shadow_only_stage1: 10.0,
            shadow_only_stage2: 0.001,
            ssim: 0.2,
            rec_unshadowed_stage2: 0.1,
            normal_consistency: 0.05,
            depth_distortion: 100.0,
            mc_samples: 64,
        }
    }
}

/// Training stage of the two-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Unshadowed pretraining: the shadowed photometric weight is zero.
    Pretrain,
    /// Shadow fitting: shadowed reconstruction on, lambda_4 small.
    Shadow,
}

impl Stage {
    pub fn index(&self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Shadow => 2,
        }
    }
}

/// Stage-resolved photometric and shadow weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageWeights {
    pub rec_shadowed: f64,
    pub rec_unshadowed: f64,
    pub shadow_only: f64,
}

impl LossWeights {
    pub fn stage_weights(&self, stage: Stage) -> StageWeights {
        match stage {
            Stage::Pretrain => StageWeights {
                rec_shadowed: 0.0,
                rec_unshadowed: 1.0,
                shadow_only: self.shadow_only_stage1,
            },
            Stage::Shadow => StageWeights {
                rec_shadowed: 1.0,
                rec_unshadowed: self.rec_unshadowed_stage2,
                shadow_only: self.shadow_only_stage2,
            },
        }
    }
}

/// Raw (unweighted) loss terms of one step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec_unshadowed: f64,
    pub rec_shadowed: f64,
    pub l01: f64,
    pub positive_light: f64,
    pub transfer_match: f64,
    pub shadow_only: f64,
    pub normal_consistency: f64,
    pub depth_distortion: f64,
}

/// Effective weights applied at one step (for log-based verification of the
/// stage schedule).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AppliedWeights {
    pub rec_unshadowed: f64,
    pub rec_shadowed: f64,
    pub l01: f64,
    pub positive_light: f64,
    pub transfer_match: f64,
    pub shadow_only: f64,
    pub normal_consistency: f64,
    pub depth_distortion: f64,
}

/// Learning rates in effect at one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AppliedLrs {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub albedo: f64,
    pub transfer_sh: f64,
    pub mlp_embedding: f64,
}

/// One JSON-lines record per training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stage: u8,
    pub image_index: usize,
    pub surfel_count: usize,
    pub terms: LossTerms,
    pub weights: AppliedWeights,
    pub lrs: AppliedLrs,
    pub total: f64,
}

impl LossReport {
    /// Recompute the weighted sum from the reported terms; must equal
    /// `total` exactly.
    pub fn recomputed_total(&self) -> f64 {
        let t = &self.terms;
        let w = &self.weights;
        w.rec_unshadowed * t.rec_unshadowed
            + w.rec_shadowed * t.rec_shadowed
            + w.l01 * t.l01
            + w.positive_light * t.positive_light
            + w.transfer_match * t.transfer_match
            + w.shadow_only * t.shadow_only
            + w.normal_consistency * t.normal_consistency
            + w.depth_distortion * t.depth_distortion
    }
}

/// The shared Monte-Carlo direction batch for one training step.
pub fn sample_directions(seed: u64, step: u64, n: usize) -> Vec<Vector3<f64>> {
    let mut rng = salted_rng(seed, step, 0x4449_5253);
    sample_sphere_batch(&mut rng, n)
}

/// Transfer range penalty: mean over surfels and directions of
/// `max(D-1, 0)^2 + min(D, 0)^2`.
pub fn loss_01(surfels: &[Surfel], dirs: &[Vector3<f64>]) -> f64 {
    loss_01_impl(surfels, dirs, None, 0.0)
}

/// Same, accumulating `weight`-scaled gradients into per-surfel transfer
/// coefficient slots.
pub fn loss_01_with_grad(
    surfels: &[Surfel],
    dirs: &[Vector3<f64>],
    d_transfer: &mut [[f64; SH_COEFFS]],
    weight: f64,
) -> f64 {
    loss_01_impl(surfels, dirs, Some(d_transfer), weight)
}

fn loss_01_impl(
    surfels: &[Surfel],
    dirs: &[Vector3<f64>],
    mut d_transfer: Option<&mut [[f64; SH_COEFFS]]>,
    weight: f64,
) -> f64 {
    assert!(!dirs.is_empty());
    if surfels.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / (surfels.len() * dirs.len()) as f64;
    let mut acc = 0.0;
    for (k, s) in surfels.iter().enumerate() {
        for w in dirs {
            let basis = eval_basis_raw(w);
            let d: f64 = s
                .transfer
                .coeffs
                .iter()
                .zip(basis.iter())
                .map(|(c, y)| c * y)
                .sum();
            let over = (d - 1.0).max(0.0);
            let under = d.min(0.0);
            acc += over * over + under * under;
            if let Some(grads) = d_transfer.as_deref_mut() {
                let dd = 2.0 * (over + under) * norm * weight;
                if dd != 0.0 {
                    for i in 0..SH_COEFFS {
                        grads[k][i] += dd * basis[i];
                    }
                }
            }
        }
    }
    acc * norm
}

/// Light positivity penalty: mean over channels, lights, and directions of
/// `min(L, 0)^2`.
pub fn loss_positive_light(lights: &[EnvLight], dirs: &[Vector3<f64>]) -> f64 {
    loss_positive_light_impl(lights, dirs, None, 0.0)
}

pub fn loss_positive_light_with_grad(
    lights: &[EnvLight],
    dirs: &[Vector3<f64>],
    d_lights: &mut [EnvLight],
    weight: f64,
) -> f64 {
    loss_positive_light_impl(lights, dirs, Some(d_lights), weight)
}

fn loss_positive_light_impl(
    lights: &[EnvLight],
    dirs: &[Vector3<f64>],
    mut d_lights: Option<&mut [EnvLight]>,
    weight: f64,
) -> f64 {
    assert!(!dirs.is_empty());
    if lights.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / (lights.len() * 3 * dirs.len()) as f64;
    let mut acc = 0.0;
    for (li, light) in lights.iter().enumerate() {
        for w in dirs {
            let basis = eval_basis_raw(w);
            for ch in 0..3 {
                let v: f64 = light.channels[ch]
                    .coeffs
                    .iter()
                    .zip(basis.iter())
                    .map(|(c, y)| c * y)
                    .sum();
                let under = v.min(0.0);
                acc += under * under;
                if under < 0.0 {
                    if let Some(grads) = d_lights.as_deref_mut() {
                        let dv = 2.0 * under * norm * weight;
                        for i in 0..SH_COEFFS {
                            grads[li].channels[ch].coeffs[i] += dv * basis[i];
                        }
                    }
                }
            }
        }
    }
    acc * norm
}

/// Gradient sink for [`loss_transfer_match_with_grad`].
pub struct TransferMatchGrads<'a> {
    pub d_transfer: &'a mut [[f64; SH_COEFFS]],
    pub d_rotation: &'a mut [[f64; 4]],
}

/// Transfer/cosine gap: mean over surfels and directions of
/// `(max(n . w, 0) - D(w))^2` about the world (unflipped) normal.
pub fn loss_transfer_match(surfels: &[Surfel], dirs: &[Vector3<f64>]) -> f64 {
    loss_transfer_match_impl(surfels, dirs, None, 0.0)
}

pub fn loss_transfer_match_with_grad(
    surfels: &[Surfel],
    dirs: &[Vector3<f64>],
    grads: TransferMatchGrads,
    weight: f64,
) -> f64 {
    loss_transfer_match_impl(surfels, dirs, Some(grads), weight)
}

fn loss_transfer_match_impl(
    surfels: &[Surfel],
    dirs: &[Vector3<f64>],
    mut grads: Option<TransferMatchGrads>,
    weight: f64,
) -> f64 {
    assert!(!dirs.is_empty());
    if surfels.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / (surfels.len() * dirs.len()) as f64;
    let mut acc = 0.0;
    for (k, s) in surfels.iter().enumerate() {
        let n = s.normal().as_vec();
        let mut d_normal = Vector3::zeros();
        for w in dirs {
            let basis = eval_basis_raw(w);
            let d: f64 = s
                .transfer
                .coeffs
                .iter()
                .zip(basis.iter())
                .map(|(c, y)| c * y)
                .sum();
            let cos = n.dot(w);
            let gap = cos.max(0.0) - d;
            acc += gap * gap;
            if let Some(g) = grads.as_mut() {
                let scale = 2.0 * gap * norm * weight;
                for i in 0..SH_COEFFS {
                    g.d_transfer[k][i] += -scale * basis[i];
                }
                if cos > 0.0 {
                    d_normal += w * scale;
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            let dq = quat::backprop_column_grads(
                &s.rotation,
                &Vector3::zeros(),
                &Vector3::zeros(),
                &d_normal,
            );
            for c in 0..4 {
                g.d_rotation[k][c] += dq[c];
            }
        }
    }
    acc * norm
}

/// Shadow-only constraint over per-surfel radiance pairs: mean over surfels
/// of the squared positive part of (shadowed - unshadowed), summed over
/// channels. Shadows may only darken.
pub fn loss_shadow_only(shadowed: &[Rgb], unshadowed: &[Rgb]) -> f64 {
    loss_shadow_only_impl(shadowed, unshadowed, None, 0.0)
}

pub fn loss_shadow_only_with_grad(
    shadowed: &[Rgb],
    unshadowed: &[Rgb],
    grads: (&mut [Rgb], &mut [Rgb]),
    weight: f64,
) -> f64 {
    loss_shadow_only_impl(shadowed, unshadowed, Some(grads), weight)
}

fn loss_shadow_only_impl(
    shadowed: &[Rgb],
    unshadowed: &[Rgb],
    mut grads: Option<(&mut [Rgb], &mut [Rgb])>,
    weight: f64,
) -> f64 {
    assert_eq!(shadowed.len(), unshadowed.len());
    if shadowed.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / shadowed.len() as f64;
    let mut acc = 0.0;
    for k in 0..shadowed.len() {
        for ch in 0..3 {
            let excess = (shadowed[k][ch] - unshadowed[k][ch]).max(0.0);
            acc += excess * excess;
            if excess > 0.0 {
                if let Some((d_sh, d_unsh)) = grads.as_mut() {
                    let g = 2.0 * excess * norm * weight;
                    d_sh[k][ch] += g;
                    d_unsh[k][ch] -= g;
                }
            }
        }
    }
    acc * norm
}

/// The four constraint terms evaluated on one shared direction batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegularizerTerms {
    pub l01: f64,
    pub positive_light: f64,
    pub transfer_match: f64,
    pub shadow_only: f64,
}

impl RegularizerTerms {
    pub fn weighted_total(&self, w: &LossWeights, stage: Stage) -> f64 {
        w.l01 * self.l01
            + w.positive_light * self.positive_light
            + w.transfer_match * self.transfer_match
            + w.stage_weights(stage).shadow_only * self.shadow_only
    }
}

/// Value-only evaluation of the full regularizer R(G) on a fresh direction
/// batch; the returned terms are raw and the total is weighted.
pub fn total_regularizer(
    surfels: &[Surfel],
    light: &EnvLight,
    shadowed: &[Rgb],
    unshadowed: &[Rgb],
    dirs: &[Vector3<f64>],
    weights: &LossWeights,
    stage: Stage,
) -> (RegularizerTerms, f64) {
    let terms = RegularizerTerms {
        l01: loss_01(surfels, dirs),
        positive_light: loss_positive_light(std::slice::from_ref(light), dirs),
        transfer_match: loss_transfer_match(surfels, dirs),
        shadow_only: loss_shadow_only(shadowed, unshadowed),
    };
    let total = terms.weighted_total(weights, stage);
    (terms, total)
}
