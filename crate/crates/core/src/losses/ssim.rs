//! Photometric reconstruction loss: masked L1 plus D-SSIM.
//!
//! The training-loss SSIM uses the splatting-literature convention: an
//! 11x11 Gaussian window with sigma 1.5 and zero-padded 'same' convolution.
//! This is deliberately distinct from the evaluation protocol in
//! [`crate::metrics`] (5x5 uniform window, mask erosion); the two must not
//! be merged.

use crate::error::{Error, Result};
use crate::img::{ImageF, Mask};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable zero-padded 'same' convolution of one channel plane.
fn convolve(src: &[f64], width: usize, height: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let half = WINDOW as isize / 2;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = x + k as isize - half;
                if sx >= 0 && sx < width as isize {
                    acc += w * src[(y * width as isize + sx) as usize];
                }
            }
            tmp[(y * width as isize + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = y + k as isize - half;
                if sy >= 0 && sy < height as isize {
                    acc += w * tmp[(sy * width as isize + x) as usize];
                }
            }
            out[(y * width as isize + x) as usize] = acc;
        }
    }
    out
}

struct SsimPlanes {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    m_xx: Vec<f64>,
    m_yy: Vec<f64>,
    m_xy: Vec<f64>,
    ssim: Vec<f64>,
}

fn ssim_channel(x: &[f64], y: &[f64], width: usize, height: usize) -> SsimPlanes {
    let kernel = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = convolve(x, width, height, &kernel);
    let mu_y = convolve(y, width, height, &kernel);
    let m_xx = convolve(&xx, width, height, &kernel);
    let m_yy = convolve(&yy, width, height, &kernel);
    let m_xy = convolve(&xy, width, height, &kernel);
    let mut ssim = vec![0.0; x.len()];
    for p in 0..x.len() {
        let (ux, uy) = (mu_x[p], mu_y[p]);
        let sx = m_xx[p] - ux * ux;
        let sy = m_yy[p] - uy * uy;
        let sxy = m_xy[p] - ux * uy;
        let a1 = 2.0 * ux * uy + C1;
        let a2 = 2.0 * sxy + C2;
        let b1 = ux * ux + uy * uy + C1;
        let b2 = sx + sy + C2;
        ssim[p] = (a1 * a2) / (b1 * b2);
    }
    SsimPlanes {
        mu_x,
        mu_y,
        m_xx,
        m_yy,
        m_xy,
        ssim,
    }
}

fn valid_count(mask: &Mask) -> Result<usize> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::LossUndefined(
            "photometric loss needs at least one valid pixel".to_string(),
        ));
    }
    Ok(n)
}

/// Masked-mean L1 plus `lambda_ssim * (1 - SSIM)/2`.
///
/// The mask marks valid (non-occluder) pixels; SSIM statistics are computed
/// over the full frame and the per-pixel SSIM map is averaged over the mask.
pub fn photometric_loss(
    rendered: &ImageF,
    target: &ImageF,
    mask: &Mask,
    lambda_ssim: f64,
) -> Result<f64> {
    let (loss, _) = photometric_impl(rendered, target, mask, lambda_ssim, false)?;
    Ok(loss)
}

/// Loss value plus its gradient with respect to the rendered image.
pub fn photometric_loss_with_grad(
    rendered: &ImageF,
    target: &ImageF,
    mask: &Mask,
    lambda_ssim: f64,
) -> Result<(f64, ImageF)> {
    let (loss, grad) = photometric_impl(rendered, target, mask, lambda_ssim, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn photometric_impl(
    rendered: &ImageF,
    target: &ImageF,
    mask: &Mask,
    lambda_ssim: f64,
    with_grad: bool,
) -> Result<(f64, Option<ImageF>)> {
    rendered.assert_shape(target, "photometric_loss")?;
    if mask.width != rendered.width || mask.height != rendered.height {
        return Err(Error::contract(
            "photometric_loss mask shape mismatch".to_string(),
        ));
    }
    let n_valid = valid_count(mask)?;
    let channels = rendered.channels;
    let npx = rendered.npixels();
    let l1_norm = 1.0 / (n_valid * channels) as f64;

    let mut grad = with_grad.then(|| ImageF::zeros(rendered.width, rendered.height, channels));

    // L1 over valid pixels.
    let mut l1 = 0.0;
    for p in 0..npx {
        if !mask.data[p] {
            continue;
        }
        for c in 0..channels {
            let diff = rendered.data[p * channels + c] - target.data[p * channels + c];
            l1 += diff.abs();
            if let Some(g) = grad.as_mut() {
                // Subgradient of |x| with value 0 at x = 0 (f64::signum
                // would return 1 there).
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g.data[p * channels + c] += sign * l1_norm;
            }
        }
    }
    l1 *= l1_norm;

    if lambda_ssim == 0.0 {
        return Ok((l1, grad));
    }

    // D-SSIM over the channel-mean SSIM map, averaged on valid pixels.
    let kernel = gaussian_kernel();
    let mut mean_ssim = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = (0..npx).map(|p| rendered.data[p * channels + c]).collect();
        let y: Vec<f64> = (0..npx).map(|p| target.data[p * channels + c]).collect();
        let planes = ssim_channel(&x, &y, rendered.width, rendered.height);
        for p in 0..npx {
            if mask.data[p] {
                mean_ssim += planes.ssim[p];
            }
        }

        if let Some(g) = grad.as_mut() {
            // dL/dS(p) for the D-SSIM part.
            let d_s = -lambda_ssim / (2.0 * (n_valid * channels) as f64);
            let mut z_mu = vec![0.0; npx];
            let mut z_mxx = vec![0.0; npx];
            let mut z_mxy = vec![0.0; npx];
            for p in 0..npx {
                if !mask.data[p] {
                    continue;
                }
                let (ux, uy) = (planes.mu_x[p], planes.mu_y[p]);
                let sxy = planes.m_xy[p] - ux * uy;
                let sx = planes.m_xx[p] - ux * ux;
                let sy = planes.m_yy[p] - uy * uy;
                let a1 = 2.0 * ux * uy + C1;
                let a2 = 2.0 * sxy + C2;
                let b1 = ux * ux + uy * uy + C1;
                let b2 = sx + sy + C2;
                let s = planes.ssim[p];
                // Partials of S through the convolved statistics.
                let ds_dmu = 2.0 * uy * (a2 - a1) / (b1 * b2)
                    - 2.0 * ux * s * (1.0 / b1 - 1.0 / b2);
                let ds_dmxx = -s / b2;
                let ds_dmxy = 2.0 * a1 / (b1 * b2);
                z_mu[p] = d_s * ds_dmu;
                z_mxx[p] = d_s * ds_dmxx;
                z_mxy[p] = d_s * ds_dmxy;
            }
            // Adjoint of the symmetric zero-padded convolution is itself.
            let back_mu = convolve(&z_mu, rendered.width, rendered.height, &kernel);
            let back_mxx = convolve(&z_mxx, rendered.width, rendered.height, &kernel);
            let back_mxy = convolve(&z_mxy, rendered.width, rendered.height, &kernel);
            for p in 0..npx {
                let xq = rendered.data[p * channels + c];
                let yq = target.data[p * channels + c];
                g.data[p * channels + c] +=
                    back_mu[p] + 2.0 * xq * back_mxx[p] + yq * back_mxy[p];
            }
        }
    }
    mean_ssim /= (n_valid * channels) as f64;
    let loss = l1 + lambda_ssim * (1.0 - mean_ssim) / 2.0;
    Ok((loss, grad))
}
