//! Dataset ingestion.
//!
//! A dataset directory holds `cameras.json` (one entry per image),
//! `split.json` (train/test indices), optional `points.json` (surfel seed
//! points), images as PFM or PNG, and PNG masks. Two mask roles exist:
//! training occluder masks mark pixels EXCLUDED from the photometric loss;
//! evaluation segmentation masks mark pixels INCLUDED in metrics. The
//! loader validates everything and names the offending entry instead of
//! silently skipping.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{ImageF, Mask};
use crate::scene::{Camera, PointInit};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4x4 rigid world-to-camera transform.
    pub world_to_camera: [f64; 16],
    pub image_path: String,
    /// Training occluder mask (nonzero = excluded from the loss).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// Evaluation segmentation mask (nonzero = included in metrics).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraManifest {
    pub format_version: u32,
    pub cameras: Vec<CameraEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl CameraEntry {
    pub fn camera(&self) -> Camera {
        let m = Matrix4::from_row_slice(&self.world_to_camera);
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: m,
        }
    }

    pub fn from_camera(cam: &Camera, image_path: String) -> CameraEntry {
        let mut w2c = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                w2c[r * 4 + c] = cam.world_to_camera[(r, c)];
            }
        }
        CameraEntry {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_camera: w2c,
            image_path,
            mask_path: None,
            seg_path: None,
        }
    }
}

/// One loaded image with its camera and masks.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub camera: Camera,
    pub image: ImageF,
    /// Occluder mask: true = excluded from training.
    pub occluder: Option<Mask>,
    /// Segmentation mask: true = included in evaluation.
    pub seg: Option<Mask>,
    pub image_path: String,
}

impl DatasetView {
    /// Valid-pixel mask for the photometric loss (inverse of the occluder).
    pub fn valid_mask(&self) -> Mask {
        match &self.occluder {
            Some(occ) => {
                let mut m = occ.clone();
                m.invert();
                m
            }
            None => Mask::filled(self.image.width, self.image.height, true),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<DatasetView>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub points: Option<Vec<PointInit>>,
    pub root: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Flip the nonzero-=-marked convention of every mask.
    pub invert_masks: bool,
}

fn entry_err(index: usize, entry: &CameraEntry, msg: impl std::fmt::Display) -> Error {
    Error::invalid_data(format!("camera entry {index} ({}): {msg}", entry.image_path))
}

pub fn load_dataset(dir: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let manifest: CameraManifest = serde_json::from_reader(BufReader::new(
        File::open(dir.join("cameras.json")).map_err(|e| {
            Error::invalid_data(format!("{}: cameras.json: {e}", dir.display()))
        })?,
    ))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::invalid_data(format!(
            "cameras.json format version {} unsupported",
            manifest.format_version
        )));
    }
    let split: SplitManifest = serde_json::from_reader(BufReader::new(
        File::open(dir.join("split.json"))
            .map_err(|e| Error::invalid_data(format!("{}: split.json: {e}", dir.display())))?,
    ))?;

    let mut views = Vec::with_capacity(manifest.cameras.len());
    for (i, entry) in manifest.cameras.iter().enumerate() {
        let camera = entry.camera();
        camera
            .validate()
            .map_err(|e| entry_err(i, entry, format!("invalid camera: {e}")))?;
        let image = crate::io::read_image(&dir.join(&entry.image_path))
            .map_err(|e| entry_err(i, entry, e))?;
        if image.width != camera.width as usize || image.height != camera.height as usize {
            return Err(entry_err(
                i,
                entry,
                format!(
                    "image is {}x{} but the camera declares {}x{}",
                    image.width, image.height, camera.width, camera.height
                ),
            ));
        }
        let occluder = match &entry.mask_path {
            Some(p) => {
                let m = crate::io::read_mask(&dir.join(p), opts.invert_masks)
                    .map_err(|e| entry_err(i, entry, e))?;
                if m.width != image.width || m.height != image.height {
                    return Err(entry_err(i, entry, "occluder mask size mismatch"));
                }
                Some(m)
            }
            None => None,
        };
        let seg = match &entry.seg_path {
            Some(p) => {
                let m = crate::io::read_mask(&dir.join(p), opts.invert_masks)
                    .map_err(|e| entry_err(i, entry, e))?;
                if m.width != image.width || m.height != image.height {
                    return Err(entry_err(i, entry, "segmentation mask size mismatch"));
                }
                Some(m)
            }
            None => None,
        };
        views.push(DatasetView {
            camera,
            image,
            occluder,
            seg,
            image_path: entry.image_path.clone(),
        });
    }

    for &idx in split.train.iter().chain(split.test.iter()) {
        if idx >= views.len() {
            return Err(Error::invalid_data(format!(
                "split.json references image {idx} but only {} exist",
                views.len()
            )));
        }
    }
    for &idx in &split.test {
        if views[idx].seg.is_none() {
            return Err(Error::invalid_data(format!(
                "test image {idx} ({}) has no segmentation mask",
                views[idx].image_path
            )));
        }
    }
    if split.train.is_empty() {
        return Err(Error::invalid_data("split.json has no training images".to_string()));
    }

    let points = {
        let p = dir.join("points.json");
        if p.exists() {
            let pts: Vec<PointInit> = serde_json::from_reader(BufReader::new(File::open(p)?))?;
            if pts.is_empty() {
                return Err(Error::invalid_data("points.json is empty".to_string()));
            }
            Some(pts)
        } else {
            None
        }
    };

    Ok(Dataset {
        views,
        train: split.train,
        test: split.test,
        points,
        root: dir.to_path_buf(),
    })
}
