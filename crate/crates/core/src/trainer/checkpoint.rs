//! Checkpoints: scene + light model + optimizer state + step counter,
//! resumable bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::scene_io;
use crate::scene::EMBED_DIM;
use crate::sh::SH_COEFFS;

use super::adam::Adam;
use super::{OptimizerBank, TrainConfig, Trainer, TrainView};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GroupHeader {
    name: String,
    stride: usize,
    rows: usize,
    t: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    format_version: u32,
    blob: String,
    groups: Vec<GroupHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    format_version: u32,
    iter: u64,
    scene_extent: f64,
    densify_steps: u64,
    densify_accum: Vec<f64>,
    config: TrainConfig,
}

fn group_list(bank: &OptimizerBank) -> [(&'static str, &Adam); 8] {
    [
        ("position", &bank.position),
        ("rotation", &bank.rotation),
        ("log_scale", &bank.log_scale),
        ("opacity", &bank.opacity),
        ("albedo", &bank.albedo),
        ("transfer", &bank.transfer),
        ("mlp", &bank.mlp),
        ("embedding", &bank.embedding),
    ]
}

pub fn save_checkpoint(dir: &Path, trainer: &Trainer) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    scene_io::save_scene(dir, &trainer.surfels)?;
    scene_io::save_light_model(dir, &trainer.model)?;

    let groups = group_list(&trainer.opt);
    let header = OptimizerHeader {
        format_version: FORMAT_VERSION,
        blob: "optimizer.bin".to_string(),
        groups: groups
            .iter()
            .map(|(name, a)| GroupHeader {
                name: name.to_string(),
                stride: a.stride,
                rows: a.rows(),
                t: a.t.clone(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(dir.join("optimizer.json"))?),
        &header,
    )?;
    let mut w = BufWriter::new(File::create(dir.join("optimizer.bin"))?);
    for (_, a) in &groups {
        for v in a.m.iter().chain(a.v.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let state = TrainerState {
        format_version: FORMAT_VERSION,
        iter: trainer.iter,
        scene_extent: trainer.scene_extent,
        densify_steps: trainer.densify_steps,
        densify_accum: trainer.densify_accum.clone(),
        config: trainer.config.clone(),
    };
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(dir.join("trainer_state.json"))?),
        &state,
    )?;
    Ok(())
}

/// Rebuild a trainer from a checkpoint; the training views are external
/// data and are supplied by the caller.
pub fn load_checkpoint(dir: &Path, views: Vec<TrainView>) -> Result<Trainer> {
    let surfels = scene_io::load_scene(dir)?;
    let model = scene_io::load_light_model(dir)?;
    let state: TrainerState = serde_json::from_reader(BufReader::new(File::open(
        dir.join("trainer_state.json"),
    )?))?;
    if state.format_version != FORMAT_VERSION {
        return Err(Error::invalid_data(
            "trainer state format version unsupported".to_string(),
        ));
    }

    let header: OptimizerHeader =
        serde_json::from_reader(BufReader::new(File::open(dir.join("optimizer.json"))?))?;
    let mut r = BufReader::new(File::open(dir.join(&header.blob))?);
    let mut bank = OptimizerBank::new(surfels.len(), model.mlp.param_count(), views.len());
    {
        let mut load_group = |adam: &mut Adam, gh: &GroupHeader| -> Result<()> {
            if gh.stride != adam.stride {
                return Err(Error::invalid_data(format!(
                    "optimizer group {} stride mismatch",
                    gh.name
                )));
            }
            let len = gh.stride * gh.rows;
            let mut raw = vec![0u8; len * 8 * 2];
            r.read_exact(&mut raw)?;
            let floats: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            adam.m = floats[..len].to_vec();
            adam.v = floats[len..].to_vec();
            adam.t = gh.t.clone();
            Ok(())
        };
        let mut groups = header.groups.iter();
        let mut next = |name: &str| -> Result<&GroupHeader> {
            groups
                .next()
                .filter(|g| g.name == name)
                .ok_or_else(|| Error::invalid_data(format!("optimizer group {name} missing")))
        };
        load_group(&mut bank.position, next("position")?)?;
        load_group(&mut bank.rotation, next("rotation")?)?;
        load_group(&mut bank.log_scale, next("log_scale")?)?;
        load_group(&mut bank.opacity, next("opacity")?)?;
        load_group(&mut bank.albedo, next("albedo")?)?;
        load_group(&mut bank.transfer, next("transfer")?)?;
        load_group(&mut bank.mlp, next("mlp")?)?;
        load_group(&mut bank.embedding, next("embedding")?)?;
    }

    // Sanity: strides of surfel groups must match the surfel count.
    for (name, adam) in group_list(&bank) {
        let expect = match name {
            "mlp" => 1,
            "embedding" => views.len(),
            _ => surfels.len(),
        };
        if adam.rows() != expect {
            return Err(Error::invalid_data(format!(
                "optimizer group {name} has {} rows, expected {expect}",
                adam.rows()
            )));
        }
        let _ = SH_COEFFS;
        let _ = EMBED_DIM;
    }

    if model.image_count() != views.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} embeddings for {} views",
            model.image_count(),
            views.len()
        )));
    }

    Ok(Trainer {
        surfels,
        model,
        views,
        iter: state.iter,
        scene_extent: state.scene_extent,
        render_opts: crate::rasterizer::RenderOptions::default(),
        opt: bank,
        densify_accum: state.densify_accum,
        densify_steps: state.densify_steps,
        config: state.config,
    })
}
