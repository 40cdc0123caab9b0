//! Reading and writing grids: binary masks as PNG/PGM (value >= 128 means
//! inside), scalar fields as min-max scaled PGM for inspection and as flat
//! row-major CSV for exact round-trips.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::grid::{Field, GridDims};
use crate::{BinaryMask, Error, Result, ScalarField};

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let gray: Vec<u8>;
    let dims;
    if ext == "pgm" {
        let (d, data) = read_pgm(path)?;
        dims = d;
        gray = data;
    } else {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path_str(path), source: e })?
            .into_luma8();
        dims = GridDims::new(img.height() as usize, img.width() as usize);
        gray = img.into_raw();
    }
    Ok(Field::from_vec(dims, gray.into_iter().map(|v| v >= 128).collect()))
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let dims = mask.dims();
    let raw: Vec<u8> = mask.values().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(dims.width as u32, dims.height as u32, raw)
        .expect("buffer size matches dims");
    img.save(path).map_err(|e| Error::Image { path: path_str(path), source: e })
}

pub fn write_rgb_png(path: &Path, dims: GridDims, rgb: &[[u8; 3]]) -> Result<()> {
    assert_eq!(rgb.len(), dims.len());
    let raw: Vec<u8> = rgb.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(dims.width as u32, dims.height as u32, raw)
        .expect("buffer size matches dims");
    img.save(path).map_err(|e| Error::Image { path: path_str(path), source: e })
}

fn read_pgm(path: &Path) -> Result<(GridDims, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let bad = |msg: &str| Error::dataset(path_str(path), msg);
    // header tokens: magic, width, height, maxval (comments start with '#')
    let mut tokens = Vec::new();
    let mut pos = 0usize;
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("invalid PGM header"))?
                .to_string(),
        );
    }
    if tokens.len() < 4 {
        return Err(bad("truncated PGM header"));
    }
    let magic = tokens[0].as_str();
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PGM maxval"));
    }
    let dims = GridDims::new(height, width);
    let data = match magic {
        "P5" => {
            pos += 1; // single whitespace after maxval
            if bytes.len() < pos + dims.len() {
                return Err(bad("truncated PGM data"));
            }
            bytes[pos..pos + dims.len()].to_vec()
        }
        "P2" => {
            let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("invalid PGM data"))?;
            let vals: Vec<u8> = text
                .split_ascii_whitespace()
                .map(|t| t.parse::<u8>().map_err(|_| bad("bad PGM value")))
                .collect::<Result<_>>()?;
            if vals.len() != dims.len() {
                return Err(bad("PGM value count mismatch"));
            }
            vals
        }
        _ => return Err(bad("not a PGM file")),
    };
    Ok((dims, data))
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let gray: Vec<u8> = mask.values().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm_raw(path, mask.dims(), &gray)
}

/// Min-max scaled 8-bit PGM; a constant field maps to 0.
pub fn write_scalar_pgm(path: &Path, field: &ScalarField) -> Result<()> {
    let lo = field.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<u8> = field
        .values()
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm_raw(path, field.dims(), &gray)
}

fn write_pgm_raw(path: &Path, dims: GridDims, gray: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(gray.len() + 32);
    write!(out, "P5\n{} {}\n255\n", dims.width, dims.height).unwrap();
    out.extend_from_slice(gray);
    std::fs::write(path, out).map_err(|e| Error::io(path_str(path), e))
}

/// One CSV row per grid row, shortest-round-trip float formatting.
pub fn write_scalar_csv(path: &Path, field: &ScalarField) -> Result<()> {
    let dims = field.dims();
    let mut out = String::new();
    for y in 0..dims.height {
        let row: Vec<String> =
            (0..dims.width).map(|x| format!("{}", field.get(y, x))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_scalar_csv(path: &Path) -> Result<ScalarField> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path_str(path), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::dataset(path_str(path), format!("bad value {t:?}")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::dataset(path_str(path), "ragged CSV rows"));
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::dataset(path_str(path), "empty CSV"))?;
    Ok(Field::from_vec(GridDims::new(height, width), values))
}
