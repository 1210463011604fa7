//! Adaptive density control: clone, split, prune, and opacity reset.

use rand::Rng;

use crate::scene::Surfel;
use crate::util::logit;

pub const SPLIT_SCALE_SHRINK: f64 = 1.6;
pub const OPACITY_RESET_VALUE: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DensityStats {
    pub before: usize,
    pub after: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
}

#[derive(Debug, Clone)]
pub struct DensityConfig {
    /// Average NDC positional gradient above this marks a surfel for growth.
    pub grad_threshold: f64,
    /// Surfels with opacity below this are removed.
    pub prune_opacity: f64,
    /// Mean world scale above this splits instead of cloning.
    pub split_scale_cutoff: f64,
    /// Pruning never drops the scene below this count.
    pub min_surfels: usize,
    /// Growth stops at this count.
    pub max_surfels: usize,
}

fn gauss_pair(rng: &mut impl Rng) -> (f64, f64) {
    // Box-Muller.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (-2.0 * u1.ln()).sqrt();
    (r * u2.cos(), r * u2.sin())
}

/// Clone high-gradient small surfels, split high-gradient large ones (two
/// children sampled in the parent's plane with scale / 1.6), and prune
/// near-transparent surfels. Children inherit the parent's transfer
/// coefficients. Returns the per-row optimizer remap: `map[new] = Some(old)`
/// keeps state, `None` starts fresh.
pub fn densify_and_prune(
    surfels: &mut Vec<Surfel>,
    avg_grad: &[f64],
    cfg: &DensityConfig,
    rng: &mut impl Rng,
) -> (DensityStats, Vec<Option<usize>>) {
    let before = surfels.len();
    assert_eq!(avg_grad.len(), before);

    // Prune, guarding the population floor by keeping the most opaque of
    // the would-be-pruned surfels.
    let mut keep: Vec<bool> = surfels
        .iter()
        .map(|s| s.opacity() >= cfg.prune_opacity)
        .collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept < cfg.min_surfels {
        let mut rescued: Vec<usize> = (0..before).filter(|&i| !keep[i]).collect();
        rescued.sort_by(|&a, &b| {
            surfels[b]
                .opacity()
                .total_cmp(&surfels[a].opacity())
                .then(a.cmp(&b))
        });
        for &i in rescued.iter().take(cfg.min_surfels - kept) {
            keep[i] = true;
        }
    }

    let mut out: Vec<Surfel> = Vec::with_capacity(before + 16);
    let mut remap: Vec<Option<usize>> = Vec::with_capacity(before + 16);
    let mut stats = DensityStats {
        before,
        ..Default::default()
    };

    for i in 0..before {
        if !keep[i] {
            stats.pruned += 1;
            continue;
        }
        let grow = avg_grad[i] > cfg.grad_threshold
            && out.len() + 2 <= cfg.max_surfels.max(cfg.min_surfels);
        let s = &surfels[i];
        let [su, sv] = s.scale();
        let mean_scale = 0.5 * (su + sv);
        if grow && mean_scale > cfg.split_scale_cutoff {
            // Split: two children sampled from the parent's in-plane
            // Gaussian, scales shrunk; parent removed, optimizer fresh.
            let (r1, r2, _) = s.frame();
            for _ in 0..2 {
                let (g1, g2) = gauss_pair(rng);
                let mut child = s.clone();
                child.position = s.position + r1 * (su * g1) + r2 * (sv * g2);
                child.log_scale = [
                    s.log_scale[0] - SPLIT_SCALE_SHRINK.ln(),
                    s.log_scale[1] - SPLIT_SCALE_SHRINK.ln(),
                ];
                out.push(child);
                remap.push(None);
            }
            stats.split += 1;
        } else if grow {
            // Clone at the same position; the pair separates by gradient.
            out.push(s.clone());
            remap.push(Some(i));
            out.push(s.clone());
            remap.push(None);
            stats.cloned += 1;
        } else {
            out.push(s.clone());
            remap.push(Some(i));
        }
    }

    stats.after = out.len();
    *surfels = out;
    (stats, remap)
}

/// Clamp every opacity to at most `OPACITY_RESET_VALUE` in logit space; the
/// min keeps already-transparent surfels (and logits) untouched and finite.
pub fn reset_opacity(surfels: &mut [Surfel]) {
    let cap = logit(OPACITY_RESET_VALUE);
    for s in surfels {
        s.opacity_logit = s.opacity_logit.min(cap);
    }
}
