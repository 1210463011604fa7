//! File formats: PFM/PNG images, dataset manifests, scene serialization.
//!
//! Everything is linear float internally. 8-bit PNG export clamps to [0, 1]
//! and scales by 255 with no gamma; PNG import divides by 255. That is the
//! whole tone-mapping contract.

pub mod dataset;
pub mod pfm;
pub mod scene_io;

use std::path::Path;

use crate::error::{Error, Result};
use crate::img::{ImageF, Mask};

/// Load a linear-float image by extension (.pfm or .png).
pub fn read_image(path: &Path) -> Result<ImageF> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => pfm::read_pfm(path),
        Some("png") => read_png_linear(path),
        _ => Err(Error::invalid_data(format!(
            "{}: unsupported image extension (expected .pfm or .png)",
            path.display()
        ))),
    }
}

pub fn read_png_linear(path: &Path) -> Result<ImageF> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageF::zeros(w, h, 3);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(x as usize, y as usize, c, px[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Write an 8-bit PNG using the linear tone-mapping contract.
pub fn write_png(path: &Path, img: &ImageF) -> Result<()> {
    let bytes = img.to_u8();
    match img.channels {
        3 => {
            let buf: image::RgbImage =
                image::ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
                    .expect("buffer size matches");
            buf.save(path)?;
        }
        1 => {
            let buf: image::GrayImage =
                image::ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
                    .expect("buffer size matches");
            buf.save(path)?;
        }
        c => {
            return Err(Error::contract(format!(
                "PNG export supports 1 or 3 channels, got {c}"
            )))
        }
    }
    Ok(())
}

/// Read a binary mask from PNG: nonzero = marked. `invert` flips the
/// convention for datasets encoded the other way around.
pub fn read_mask(path: &Path, invert: bool) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Mask::filled(w, h, false);
    for (x, y, px) in img.enumerate_pixels() {
        let marked = px[0] != 0;
        mask.set(x as usize, y as usize, marked != invert);
    }
    Ok(mask)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(mask.width as u32, mask.height as u32, bytes)
            .expect("buffer size matches");
    buf.save(path)?;
    Ok(())
}
