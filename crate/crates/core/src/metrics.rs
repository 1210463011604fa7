//! Evaluation metrics over masked regions.
//!
//! MSE, MAE, and PSNR average over segmentation-mask pixels; SSIM uses a
//! 5x5 uniform window with sample-covariance normalization and averages
//! over the mask eroded by the same window, excluding boundary influence.
//! This is the evaluation protocol, distinct from the 11x11 Gaussian SSIM
//! inside the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{ImageF, Mask};

pub const SSIM_WINDOW: usize = 5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// PSNR is capped here for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Masked evaluation of one (rendered, target) pair.
///
/// The segmentation mask marks pixels INCLUDED in the metrics (the
/// opposite role of a training occluder mask).
pub fn eval_metrics(rendered: &ImageF, target: &ImageF, seg_mask: &Mask) -> Result<MetricReport> {
    rendered.assert_shape(target, "eval_metrics")?;
    if seg_mask.width != rendered.width || seg_mask.height != rendered.height {
        return Err(Error::contract(
            "eval_metrics mask shape mismatch".to_string(),
        ));
    }
    let n_masked = seg_mask.count();
    if n_masked == 0 {
        return Err(Error::MetricUndefined(
            "segmentation mask is empty".to_string(),
        ));
    }
    let channels = rendered.channels;

    let mut mse = 0.0;
    let mut mae = 0.0;
    for p in 0..rendered.npixels() {
        if !seg_mask.data[p] {
            continue;
        }
        for c in 0..channels {
            let diff = rendered.data[p * channels + c] - target.data[p * channels + c];
            mse += diff * diff;
            mae += diff.abs();
        }
    }
    let denom = (n_masked * channels) as f64;
    mse /= denom;
    mae /= denom;
    let psnr = if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    };

    let ssim = masked_ssim(rendered, target, seg_mask)?;
    Ok(MetricReport {
        mse,
        mae,
        psnr,
        ssim,
    })
}

/// SSIM map over full 5x5 windows, averaged on the eroded mask.
fn masked_ssim(rendered: &ImageF, target: &ImageF, seg_mask: &Mask) -> Result<f64> {
    let eroded = seg_mask.erode(SSIM_WINDOW);
    if eroded.count() == 0 {
        return Err(Error::MetricUndefined(
            "segmentation mask is empty after erosion".to_string(),
        ));
    }
    let channels = rendered.channels;
    let (w, h) = (rendered.width, rendered.height);
    let half = SSIM_WINDOW / 2;
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    // Sample-covariance normalization matching the scikit-image protocol.
    let cov_norm = np / (np - 1.0);

    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !eroded.get(x, y) {
                continue;
            }
            // Erosion with the same window keeps every window in-bounds.
            debug_assert!(x >= half && y >= half && x + half < w && y + half < h);
            let mut ssim_px = 0.0;
            for c in 0..channels {
                let mut sx = 0.0;
                let mut sy = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for wy in y - half..=y + half {
                    for wx in x - half..=x + half {
                        let a = rendered.get(wx, wy, c);
                        let b = target.get(wx, wy, c);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let ux = sx / np;
                let uy = sy / np;
                let vx = cov_norm * (sxx / np - ux * ux);
                let vy = cov_norm * (syy / np - uy * uy);
                let vxy = cov_norm * (sxy / np - ux * uy);
                ssim_px += ((2.0 * ux * uy + C1) * (2.0 * vxy + C2))
                    / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
            }
            acc += ssim_px / channels as f64;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Pearson correlation over paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares gain g minimizing ||g * x - y||^2.
pub fn least_squares_gain(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let den: f64 = xs.iter().map(|x| x * x).sum();
    if den <= 0.0 {
        1.0
    } else {
        num / den
    }
}
