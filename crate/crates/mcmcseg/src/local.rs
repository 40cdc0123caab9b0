//! Local shape priors: shapes are decomposed into rectangular patches,
//! training sources are selected per patch, and the shape component of the
//! proposal field is assembled patch by patch so object parts can vary
//! independently.

use rand::Rng;

use crate::align::TrainingSet;
use crate::energy::{self, ChanVeseParams};
use crate::grid::{log_gaussian_kernel, GridDims};
use crate::sampler::{select_subset_log, SelectionRecord};
use crate::{Error, KernelParams, Result, ScalarField, SignedDistanceField};

/// One pixel rectangle of the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchRect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRect {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }
}

/// Rectangular decomposition shared by all shapes; patches tile the grid
/// exactly, remainder pixels absorbed by the last row/column of patches.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchLayout {
    pub dims: GridDims,
    pub rows: usize,
    pub cols: usize,
    pub rects: Vec<PatchRect>,
}

impl PatchLayout {
    pub fn n_patches(&self) -> usize {
        self.rects.len()
    }
}

fn band_edges(total: usize, bands: usize) -> Vec<usize> {
    // starts of each band; base size with the remainder in the last band
    let base = total / bands;
    (0..bands).map(|k| k * base).collect()
}

pub fn make_patch_layout(dims: GridDims, rows: usize, cols: usize) -> Result<PatchLayout> {
    if rows < 1 || cols < 1 || rows > dims.height || cols > dims.width {
        return Err(Error::InvalidParameter(format!(
            "patch grid {rows}x{cols} invalid for {dims}"
        )));
    }
    let row_starts = band_edges(dims.height, rows);
    let col_starts = band_edges(dims.width, cols);
    let mut rects = Vec::with_capacity(rows * cols);
    for (r, &y0) in row_starts.iter().enumerate() {
        let y1 = if r + 1 < rows { row_starts[r + 1] } else { dims.height };
        for (c, &x0) in col_starts.iter().enumerate() {
            let x1 = if c + 1 < cols { col_starts[c + 1] } else { dims.width };
            rects.push(PatchRect { y0, x0, height: y1 - y0, width: x1 - x0 });
        }
    }
    Ok(PatchLayout { dims, rows, cols, rects })
}

/// Kernel size for one patch: the global sigma scaled by the square root of
/// the patch area fraction, keeping patch distances on a comparable kernel
/// scale.
pub fn patch_sigma(global: KernelParams, rect: &PatchRect, dims: GridDims) -> KernelParams {
    let frac = rect.len() as f64 / dims.len() as f64;
    KernelParams { sigma: global.sigma * frac.sqrt() }
}

/// L2 distance restricted to one patch, row-major within the rectangle.
pub fn patch_distance(a: &SignedDistanceField, b: &SignedDistanceField, rect: &PatchRect) -> f64 {
    let mut acc = 0.0;
    for y in rect.y0..rect.y0 + rect.height {
        for x in rect.x0..rect.x0 + rect.width {
            let d = a.get(y, x) - b.get(y, x);
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// Log similarity of every shape of a class with the current curve, per
/// patch: log k(d_P, sigma_P).
pub fn log_patch_similarities(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
    layout: &PatchLayout,
) -> Result<Vec<Vec<f64>>> {
    crate::grid::check_dims(sdf.dims(), ts.dims())?;
    let shapes = ts.class(class_id)?;
    layout
        .rects
        .iter()
        .map(|rect| {
            let kp = patch_sigma(ts.kernel(), rect, layout.dims);
            Ok(shapes
                .iter()
                .map(|s| log_gaussian_kernel(patch_distance(sdf, &s.sdf, rect), kp))
                .collect())
        })
        .collect()
}

/// Linear-domain per-patch similarity vectors.
pub fn patch_similarities(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
    layout: &PatchLayout,
) -> Result<Vec<Vec<f64>>> {
    Ok(log_patch_similarities(sdf, ts, class_id, layout)?
        .iter()
        .map(|row| row.iter().map(|l| l.exp()).collect())
        .collect())
}

/// Per-patch selection: one gamma-draw record per patch, class fixed to the
/// chain's class.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchSelection {
    pub class_id: usize,
    pub patches: Vec<SelectionRecord>,
}

impl PatchSelection {
    /// Sum of per-patch log selection probabilities; the forward/reverse
    /// perturbation probability becomes a product over patches.
    pub fn total_log_prob(&self) -> f64 {
        self.patches.iter().map(|p| p.log_prob).sum()
    }

    pub fn any_fallback(&self) -> bool {
        self.patches.iter().any(|p| p.fallback)
    }
}

/// Independent gamma-draw selection per patch, same rule as the global
/// subset selection.
pub fn select_patch_sources(
    rng: &mut impl Rng,
    patch_log_sims: &[Vec<f64>],
    gamma: usize,
    class_id: usize,
) -> Result<PatchSelection> {
    let patches = patch_log_sims
        .iter()
        .map(|logs| select_subset_log(rng, logs, gamma, class_id))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSelection { class_id, patches })
}

/// 1D partition-of-unity weights for the band decomposition with a 3 px
/// linear cross-fade at internal boundaries.
fn band_weights(total: usize, bands: usize) -> Vec<Vec<f64>> {
    let starts = band_edges(total, bands);
    let ramp = |i: usize, b: usize| ((i as f64 - b as f64 + 1.5) / 3.0).clamp(0.0, 1.0);
    (0..bands)
        .map(|k| {
            (0..total)
                .map(|i| {
                    let lower = if k == 0 { 1.0 } else { ramp(i, starts[k]) };
                    let upper = if k + 1 == bands { 1.0 } else { 1.0 - ramp(i, starts[k + 1]) };
                    lower * upper
                })
                .collect()
        })
        .collect()
}

/// Shape field of one patch's selection, defined on the whole frame:
/// (1/sigma_P^2) sum_j w_j (phi_j - phi) with kernel softmax weights from
/// the patch-restricted distances.
fn patch_shape_field(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    record: &SelectionRecord,
    rect: &PatchRect,
    layout: &PatchLayout,
) -> Result<ScalarField> {
    let shapes = ts.class(record.class_id)?;
    let kp = patch_sigma(ts.kernel(), rect, layout.dims);
    let logs: Vec<f64> = record
        .shape_indices
        .iter()
        .map(|&j| log_gaussian_kernel(patch_distance(sdf, &shapes[j].sdf, rect), kp))
        .collect();
    let lse = energy::logsumexp(&logs);
    let inv_s2 = 1.0 / (kp.sigma * kp.sigma);
    let mut f = ScalarField::filled(sdf.dims(), 0.0);
    for (&j, &l) in record.shape_indices.iter().zip(&logs) {
        let w = (l - lse).exp();
        let phi_j = shapes[j].sdf.phi();
        for (out, (&pj, &pc)) in f.values_mut().iter_mut().zip(phi_j.iter().zip(sdf.phi())) {
            *out += inv_s2 * w * (pj - pc);
        }
    }
    Ok(f)
}

/// Composite proposal field: global data term plus the per-patch shape
/// fields cross-faded over a 3 px band at patch borders. With a 1x1 layout
/// this reduces exactly to the global perturbation field.
pub fn composite_perturbation(
    sdf: &SignedDistanceField,
    patch_sel: &PatchSelection,
    image: &ScalarField,
    ts: &TrainingSet,
    params: &ChanVeseParams,
    beta_shape: f64,
    layout: &PatchLayout,
) -> Result<ScalarField> {
    if patch_sel.patches.len() != layout.n_patches() {
        return Err(Error::InvalidParameter("selection does not match layout".into()));
    }
    crate::grid::check_dims(sdf.dims(), image.dims())?;
    let dims = sdf.dims();
    let row_w = band_weights(dims.height, layout.rows);
    let col_w = band_weights(dims.width, layout.cols);

    let mut shape = ScalarField::filled(dims, 0.0);
    for (p, (rect, record)) in layout.rects.iter().zip(&patch_sel.patches).enumerate() {
        let f_p = patch_shape_field(sdf, ts, record, rect, layout)?;
        let (r, c) = (p / layout.cols, p % layout.cols);
        for y in 0..dims.height {
            let wy = row_w[r][y];
            if wy == 0.0 {
                continue;
            }
            for x in 0..dims.width {
                let w = wy * col_w[c][x];
                if w != 0.0 {
                    let v = w * f_p.get(y, x);
                    shape.set(y, x, shape.get(y, x) + v);
                }
            }
        }
    }

    let mut f = energy::chan_vese_gradient(image, sdf, params)?;
    for (out, &s) in f.values_mut().iter_mut().zip(shape.values()) {
        *out += beta_shape * s;
    }
    Ok(f)
}

/// Log probability of re-drawing a previous patch selection under the patch
/// similarities of another curve (the reverse proposal factor).
pub fn log_prob_of_patch_selection(
    patch_log_sims: &[Vec<f64>],
    sel: &PatchSelection,
) -> f64 {
    sel.patches
        .iter()
        .zip(patch_log_sims)
        .map(|(rec, logs)| crate::sampler::log_prob_of_indices(logs, &rec.shape_indices))
        .sum()
}
