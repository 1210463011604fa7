//! Scene and light-model serialization.
//!
//! A scene is a JSON header plus a little-endian binary blob of surfels in
//! declared field order; the light model is a JSON shape manifest plus a
//! flat float blob (embeddings first, then the MLP layers in order).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{LightModel, Mlp, Surfel, EMBED_DIM, MLP_HIDDEN, MLP_OUT};
use crate::sh::ShVector;

pub const FORMAT_VERSION: u32 = 1;
/// f64 values per surfel in the blob.
pub const SURFEL_STRIDE: usize = 22;

pub const SURFEL_FIELD_ORDER: [&str; 6] = [
    "position",
    "rotation",
    "log_scale",
    "opacity_logit",
    "albedo_param",
    "transfer",
];

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneHeader {
    pub format_version: u32,
    pub surfel_count: usize,
    pub sh_degree: u32,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub blob: String,
    pub field_order: Vec<String>,
}

fn bbox(surfels: &[Surfel]) -> ([f64; 3], [f64; 3]) {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for s in surfels {
        for i in 0..3 {
            min[i] = min[i].min(s.position[i]);
            max[i] = max[i].max(s.position[i]);
        }
    }
    if surfels.is_empty() {
        (min, max) = ([0.0; 3], [0.0; 3]);
    }
    (min, max)
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Write `scene.json` + `surfels.bin` into a directory.
pub fn save_scene(dir: &Path, surfels: &[Surfel]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (bbox_min, bbox_max) = bbox(surfels);
    let header = SceneHeader {
        format_version: FORMAT_VERSION,
        surfel_count: surfels.len(),
        sh_degree: 2,
        bbox_min,
        bbox_max,
        blob: "surfels.bin".to_string(),
        field_order: SURFEL_FIELD_ORDER.iter().map(|s| s.to_string()).collect(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("scene.json"))?), &header)?;

    let mut w = BufWriter::new(File::create(dir.join(&header.blob))?);
    for s in surfels {
        let mut row = [0.0f64; SURFEL_STRIDE];
        row[0..3].copy_from_slice(s.position.as_slice());
        row[3..7].copy_from_slice(&s.rotation);
        row[7..9].copy_from_slice(&s.log_scale);
        row[9] = s.opacity_logit;
        row[10..13].copy_from_slice(&s.albedo_param);
        row[13..22].copy_from_slice(&s.transfer.coeffs);
        write_f64s(&mut w, &row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Vec<Surfel>> {
    let header: SceneHeader =
        serde_json::from_reader(BufReader::new(File::open(dir.join("scene.json"))?))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::invalid_data(format!(
            "scene format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.sh_degree != 2 {
        return Err(Error::invalid_data(format!(
            "scene SH degree {} unsupported",
            header.sh_degree
        )));
    }
    let mut r = BufReader::new(File::open(dir.join(&header.blob))?);
    let flat = read_f64s(&mut r, header.surfel_count * SURFEL_STRIDE)?;
    let mut surfels = Vec::with_capacity(header.surfel_count);
    for row in flat.chunks_exact(SURFEL_STRIDE) {
        surfels.push(Surfel {
            position: Vector3::new(row[0], row[1], row[2]),
            rotation: [row[3], row[4], row[5], row[6]],
            log_scale: [row[7], row[8]],
            opacity_logit: row[9],
            albedo_param: [row[10], row[11], row[12]],
            transfer: ShVector::new(row[13..22].try_into().unwrap()),
        });
    }
    Ok(surfels)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LightModelHeader {
    pub format_version: u32,
    pub image_count: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub out: usize,
    pub blob: String,
    pub layout: Vec<String>,
}

pub fn save_light_model(dir: &Path, model: &LightModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = LightModelHeader {
        format_version: FORMAT_VERSION,
        image_count: model.embeddings.len(),
        embed_dim: EMBED_DIM,
        hidden: MLP_HIDDEN,
        out: MLP_OUT,
        blob: "light_model.bin".to_string(),
        layout: ["embeddings", "w1", "b1", "w2", "b2", "w3", "b3"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(dir.join("light_model.json"))?),
        &header,
    )?;
    let mut w = BufWriter::new(File::create(dir.join(&header.blob))?);
    for e in &model.embeddings {
        write_f64s(&mut w, e)?;
    }
    write_f64s(&mut w, &model.mlp.to_flat())?;
    w.flush()?;
    Ok(())
}

pub fn load_light_model(dir: &Path) -> Result<LightModel> {
    let header: LightModelHeader =
        serde_json::from_reader(BufReader::new(File::open(dir.join("light_model.json"))?))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::invalid_data(format!(
            "light model format version {} unsupported",
            header.format_version
        )));
    }
    if header.embed_dim != EMBED_DIM || header.hidden != MLP_HIDDEN || header.out != MLP_OUT {
        return Err(Error::invalid_data(
            "light model shape manifest does not match this build".to_string(),
        ));
    }
    let mut r = BufReader::new(File::open(dir.join(&header.blob))?);
    let emb_flat = read_f64s(&mut r, header.image_count * EMBED_DIM)?;
    let embeddings = emb_flat
        .chunks_exact(EMBED_DIM)
        .map(|c| {
            let mut e = [0.0; EMBED_DIM];
            e.copy_from_slice(c);
            e
        })
        .collect();
    let mlp_flat = read_f64s(&mut r, Mlp::zeros().param_count())?;
    Ok(LightModel {
        embeddings,
        mlp: Mlp::from_flat(&mlp_flat)?,
    })
}
