//! Loading training shapes from disk and synthesizing test images: binary
//! masks grouped by class directory, IDX-packed digit sets, and foreground/
//! background test scenes with calibrated Gaussian noise and optional
//! occlusion.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;

use crate::align::RawShape;
use crate::gridio::read_mask;
use crate::{BinaryMask, Error, Result, ScalarField};

pub const FOREGROUND: f64 = 200.0;
pub const BACKGROUND: f64 = 50.0;

/// Loads `dir/<class>/<shape>.(png|pgm)` into raw shapes. Classes and
/// shapes are traversed in lexicographic order so ids are stable across
/// platforms.
pub fn load_shape_dir(dir: &Path) -> Result<Vec<RawShape>> {
    let list = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p.display().to_string(), e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(p.display().to_string(), e))?
            .into_iter()
            .map(|e| e.path())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut shapes = Vec::new();
    for class_dir in list(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class_name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::dataset(class_dir.display().to_string(), "bad class name"))?
            .to_string();
        for file in list(&class_dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "pgm") {
                continue;
            }
            let stem = file
                .file_stem()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::dataset(file.display().to_string(), "bad file name"))?;
            let mask = read_mask(&file)?;
            if let Some(first) = shapes.first() {
                let expected: &RawShape = first;
                if mask.dims() != expected.mask.dims() {
                    return Err(Error::dataset(
                        file.display().to_string(),
                        format!(
                            "mask is {} but the corpus is {}",
                            mask.dims(),
                            expected.mask.dims()
                        ),
                    ));
                }
            }
            shapes.push(RawShape {
                id: format!("{class_name}/{stem}"),
                class_name: class_name.clone(),
                mask,
            });
        }
    }
    if shapes.is_empty() {
        return Err(Error::dataset(dir.display().to_string(), "no mask files found"));
    }
    Ok(shapes)
}

fn read_be_u32(bytes: &[u8], pos: usize, path: &Path) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::dataset(path.display().to_string(), "truncated IDX header"))
}

/// Loads an IDX image file (magic 2051) and its label file (magic 2049)
/// into one raw shape per item; pixels >= 128 are inside and the label
/// digit becomes the class name. `limit_per_class` caps each digit, in
/// file order.
pub fn load_idx_digits(
    images_path: &Path,
    labels_path: &Path,
    limit_per_class: Option<usize>,
) -> Result<Vec<RawShape>> {
    let images = std::fs::read(images_path)
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let labels = std::fs::read(labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    if read_be_u32(&images, 0, images_path)? != 2051 {
        return Err(Error::dataset(images_path.display().to_string(), "not an IDX image file"));
    }
    if read_be_u32(&labels, 0, labels_path)? != 2049 {
        return Err(Error::dataset(labels_path.display().to_string(), "not an IDX label file"));
    }
    let n = read_be_u32(&images, 4, images_path)? as usize;
    let h = read_be_u32(&images, 8, images_path)? as usize;
    let w = read_be_u32(&images, 12, images_path)? as usize;
    if read_be_u32(&labels, 4, labels_path)? as usize != n {
        return Err(Error::dataset(labels_path.display().to_string(), "label count mismatch"));
    }
    let px = h * w;
    if images.len() < 16 + n * px || labels.len() < 8 + n {
        return Err(Error::dataset(images_path.display().to_string(), "truncated IDX data"));
    }
    let dims = crate::grid::GridDims::new(h, w);
    let mut per_class = [0usize; 10];
    let mut shapes = Vec::new();
    for i in 0..n {
        let label = labels[8 + i] as usize;
        if label > 9 {
            return Err(Error::dataset(labels_path.display().to_string(), "label out of range"));
        }
        if let Some(cap) = limit_per_class {
            if per_class[label] >= cap {
                continue;
            }
        }
        let start = 16 + i * px;
        let mask = BinaryMask::from_vec(
            dims,
            images[start..start + px].iter().map(|&v| v >= 128).collect(),
        );
        shapes.push(RawShape {
            id: format!("{label}/{i:05}"),
            class_name: label.to_string(),
            mask,
        });
        per_class[label] += 1;
    }
    if shapes.is_empty() {
        return Err(Error::dataset(images_path.display().to_string(), "no items loaded"));
    }
    Ok(shapes)
}

/// Pixel rectangle painted to the background intensity before noise is
/// added, to model an occluded scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OccludeRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// A synthesized segmentation problem with its ground truth (the original,
/// unoccluded mask).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestCase {
    pub id: String,
    pub image: ScalarField,
    pub truth: BinaryMask,
    pub snr_db: Option<f64>,
    pub occlusion: Option<OccludeRect>,
    pub fg: f64,
    pub bg: f64,
}

/// Renders a mask as a foreground/background intensity image, paints the
/// occlusion rectangle to background, then adds white Gaussian noise with
/// variance set so `snr_db = 10 log10((fg - bg)^2 / var(noise))` — the
/// signal power is the squared contrast over the (occluded) foreground.
/// `snr_db = None` leaves the two-valued image noiseless.
pub fn synthesize_test(
    truth: &BinaryMask,
    occlusion: Option<OccludeRect>,
    snr_db: Option<f64>,
    fg: f64,
    bg: f64,
    seed: u64,
) -> Result<TestCase> {
    if fg == bg || !fg.is_finite() || !bg.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "foreground {fg} and background {bg} must be distinct finite intensities"
        )));
    }
    let dims = truth.dims();
    let mut values: Vec<f64> =
        truth.values().iter().map(|&v| if v { fg } else { bg }).collect();
    if let Some(rect) = occlusion {
        if rect.x + rect.width > dims.width || rect.y + rect.height > dims.height {
            return Err(Error::InvalidParameter(format!(
                "occlusion rectangle exceeds the {dims} grid"
            )));
        }
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                values[dims.index(y, x)] = bg;
            }
        }
    }
    if let Some(snr) = snr_db {
        if !snr.is_finite() {
            return Err(Error::InvalidParameter(format!("snr_db must be finite, got {snr}")));
        }
        let signal_power = (fg - bg) * (fg - bg);
        let noise_std = (signal_power / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std)
            .map_err(|_| Error::InvalidParameter("bad noise std".into()))?;
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    let snr_tag = snr_db.map(|s| format!("snr{s}")).unwrap_or_else(|| "clean".into());
    Ok(TestCase {
        id: format!("{snr_tag}_seed{seed}"),
        image: ScalarField::from_vec(dims, values),
        truth: truth.clone(),
        snr_db,
        occlusion,
        fg,
        bg,
    })
}

/// One leave-one-out fold: the held-out shape and the remaining training
/// shapes.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<RawShape>,
    pub held_out: RawShape,
}

pub fn leave_one_out(shapes: &[RawShape], index: usize) -> Result<Split> {
    if shapes.len() < 2 {
        return Err(Error::EmptyInput("leave-one-out needs at least two shapes"));
    }
    if index >= shapes.len() {
        return Err(Error::InvalidParameter(format!(
            "fold index {index} out of range for {} shapes",
            shapes.len()
        )));
    }
    let mut train = shapes.to_vec();
    let held_out = train.remove(index);
    Ok(Split { train, held_out })
}

/// All leave-one-out folds in order.
pub fn leave_one_out_folds(shapes: &[RawShape]) -> Result<Vec<Split>> {
    (0..shapes.len()).map(|i| leave_one_out(shapes, i)).collect()
}

/// Empirical signal-to-noise ratio of a synthesized case against its clean
/// rendering, in dB, using the same squared-contrast signal power as the
/// synthesis.
pub fn measured_snr_db(case: &TestCase) -> f64 {
    let dims = case.truth.dims();
    let mut clean: Vec<f64> = case
        .truth
        .values()
        .iter()
        .map(|&v| if v { case.fg } else { case.bg })
        .collect();
    if let Some(rect) = case.occlusion {
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                clean[dims.index(y, x)] = case.bg;
            }
        }
    }
    let n = clean.len() as f64;
    let noise_var = clean
        .iter()
        .zip(case.image.values())
        .map(|(&c, &i)| (i - c) * (i - c))
        .sum::<f64>()
        / n;
    let signal_power = (case.fg - case.bg) * (case.fg - case.bg);
    10.0 * (signal_power / noise_var).log10()
}
