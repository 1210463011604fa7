//! Portable Float Map (PFM) reader/writer.
//!
//! `PF` is 3-channel color, `Pf` single channel; a negative scale marks
//! little-endian data, which is all this crate writes. PFM stores rows
//! bottom-to-top, so writing flips our top-down row order and reading
//! flips it back.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::img::ImageF;

pub fn write_pfm(path: &Path, img: &ImageF) -> Result<()> {
    let magic = match img.channels {
        3 => "PF",
        1 => "Pf",
        c => {
            return Err(Error::contract(format!(
                "PFM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                w.write_all(&(img.get(x, y, c) as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_token(r: &mut impl Read) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::invalid_data("PFM header is not ASCII".to_string()))
}

pub fn read_pfm(path: &Path) -> Result<ImageF> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_token(&mut r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => {
            return Err(Error::invalid_data(format!(
                "{}: not a PFM file (magic {other:?})",
                path.display()
            )))
        }
    };
    let width: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::invalid_data("bad PFM width".to_string()))?;
    let height: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::invalid_data("bad PFM height".to_string()))?;
    let scale: f64 = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::invalid_data("bad PFM scale".to_string()))?;
    if width == 0 || height == 0 {
        return Err(Error::invalid_data("empty PFM image".to_string()));
    }
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut raw)?;

    let mut img = ImageF::zeros(width, height, channels);
    for (i, bytes) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = bytes.try_into().unwrap();
        let v = if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        } as f64;
        // Flip rows: PFM row 0 is the bottom.
        let per_row = width * channels;
        let src_row = i / per_row;
        let within = i % per_row;
        let dst_row = height - 1 - src_row;
        img.data[dst_row * per_row + within] = v;
    }
    Ok(img)
}
