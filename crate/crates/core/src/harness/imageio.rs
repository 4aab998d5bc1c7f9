//! Binary 8-bit PGM (P5) and PPM (P6) rasters.
//!
//! Pixels map to `[0, 1]` by `/255`. On write, values are clamped to
//! `[0, 1]` and rounded to the nearest level.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Format(format!("{c} channels cannot be stored as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            out.push(quantize(d[ch * h * w + i]));
        }
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let c = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported magic `{other}`"))),
    };
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported; only 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing raster separator".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    let n = c * h * w;
    if raster.len() != n {
        return Err(Error::Format(format!("raster has {} bytes, expected {n}", raster.len())));
    }
    let mut data = vec![0.0; n];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = f64::from(raster[i * c + ch]) / 255.0;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} `{tok}`")))
}
