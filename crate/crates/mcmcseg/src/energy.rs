//! Energy terms and their gradient fields: the piecewise-constant data term,
//! the kernel shape prior, class-conditional densities, per-shape
//! similarities and the composite perturbation field driving proposals.
//!
//! Density arithmetic stays in the log domain throughout; shape distances on
//! realistic grids are far into the Gaussian tail.

use crate::align::TrainingSet;
use crate::grid::{l2_distance, log_gaussian_kernel, Field};
use crate::sampler::SelectionRecord;
use crate::{Error, Result, ScalarField, SignedDistanceField};

/// Parameters of the piecewise-constant data term. `epsilon` is the smoothed
/// Heaviside width in pixels; `epsilon = 0` selects the hard Heaviside.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChanVeseParams {
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu_length: f64,
}

impl ChanVeseParams {
    pub fn new(epsilon: f64, lambda1: f64, lambda2: f64, mu_length: f64) -> Result<Self> {
        if epsilon < 0.0 || lambda1 <= 0.0 || lambda2 <= 0.0 || mu_length < 0.0 {
            return Err(Error::InvalidParameter("invalid Chan-Vese parameters".into()));
        }
        Ok(ChanVeseParams { epsilon, lambda1, lambda2, mu_length })
    }

    pub fn with_mu(self, mu_length: f64) -> Self {
        ChanVeseParams { mu_length, ..self }
    }

    /// Length penalty scaled to the image dynamic range.
    pub fn for_image(image: &ScalarField) -> Self {
        let lo = image.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = image.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = (hi - lo).max(1.0);
        ChanVeseParams { epsilon: 1.5, lambda1: 1.0, lambda2: 1.0, mu_length: 0.1 * range * range }
    }
}

impl Default for ChanVeseParams {
    fn default() -> Self {
        ChanVeseParams { epsilon: 1.5, lambda1: 1.0, lambda2: 1.0, mu_length: 0.0 }
    }
}

/// Which target density the chain samples from. `ShapeOnly` is the occlusion
/// mode: pi proportional to exp(-E_shape).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Full,
    ShapeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnergyBreakdown {
    pub e_data: f64,
    pub e_shape: f64,
    pub e_total: f64,
    pub beta_shape: f64,
}

impl EnergyBreakdown {
    pub fn is_finite(&self) -> bool {
        self.e_data.is_finite() && self.e_shape.is_finite() && self.e_total.is_finite()
    }
}

/// Smoothed Heaviside, H(z) = 1/2 (1 + 2/pi atan(z / eps)).
#[inline]
fn heaviside(z: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        if z > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        0.5 * (1.0 + std::f64::consts::FRAC_2_PI * (z / eps).atan())
    }
}

#[inline]
fn delta(z: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        0.0
    } else {
        std::f64::consts::FRAC_1_PI * eps / (eps * eps + z * z)
    }
}

/// Region means under the smoothed interior indicator H(-phi).
fn region_means(image: &ScalarField, sdf: &SignedDistanceField, eps: f64) -> (f64, f64) {
    let mut num1 = 0.0;
    let mut den1 = 0.0;
    let mut num2 = 0.0;
    let mut den2 = 0.0;
    for (&i, &p) in image.values().iter().zip(sdf.phi()) {
        let h = heaviside(-p, eps);
        num1 += h * i;
        den1 += h;
        num2 += (1.0 - h) * i;
        den2 += 1.0 - h;
    }
    let c1 = if den1 > 0.0 { num1 / den1 } else { 0.0 };
    let c2 = if den2 > 0.0 { num2 / den2 } else { 0.0 };
    (c1, c2)
}

#[inline]
fn clamped(sdf: &SignedDistanceField, y: isize, x: isize) -> f64 {
    let dims = sdf.dims();
    let yy = y.clamp(0, dims.height as isize - 1) as usize;
    let xx = x.clamp(0, dims.width as isize - 1) as usize;
    sdf.get(yy, xx)
}

fn curve_length(sdf: &SignedDistanceField, eps: f64) -> f64 {
    let dims = sdf.dims();
    let mut len = 0.0;
    for y in 0..dims.height as isize {
        for x in 0..dims.width as isize {
            let px = 0.5 * (clamped(sdf, y, x + 1) - clamped(sdf, y, x - 1));
            let py = 0.5 * (clamped(sdf, y + 1, x) - clamped(sdf, y - 1, x));
            len += delta(sdf.get(y as usize, x as usize), eps) * (px * px + py * py).sqrt();
        }
    }
    len
}

fn curvature(sdf: &SignedDistanceField, y: isize, x: isize) -> f64 {
    let p = |dy: isize, dx: isize| clamped(sdf, y + dy, x + dx);
    let px = 0.5 * (p(0, 1) - p(0, -1));
    let py = 0.5 * (p(1, 0) - p(-1, 0));
    let pxx = p(0, 1) - 2.0 * p(0, 0) + p(0, -1);
    let pyy = p(1, 0) - 2.0 * p(0, 0) + p(-1, 0);
    let pxy = 0.25 * (p(1, 1) - p(1, -1) - p(-1, 1) + p(-1, -1));
    let g2 = px * px + py * py;
    (pxx * py * py - 2.0 * px * py * pxy + pyy * px * px) / (g2.powf(1.5) + 1e-8)
}

/// Piecewise-constant data energy with region means computed from the
/// current field.
pub fn chan_vese_energy(
    image: &ScalarField,
    sdf: &SignedDistanceField,
    p: &ChanVeseParams,
) -> Result<f64> {
    crate::grid::check_dims(image.dims(), sdf.dims())?;
    let (c1, c2) = region_means(image, sdf, p.epsilon);
    let mut e = 0.0;
    for (&i, &phi) in image.values().iter().zip(sdf.phi()) {
        let h = heaviside(-phi, p.epsilon);
        e += p.lambda1 * h * (i - c1) * (i - c1);
        e += p.lambda2 * (1.0 - h) * (i - c2) * (i - c2);
    }
    if p.mu_length > 0.0 {
        e += p.mu_length * curve_length(sdf, p.epsilon);
    }
    Ok(e)
}

/// Descent direction of the data term: stepping phi by +alpha * g decreases
/// the energy. Supported on the delta band around the zero level set. The
/// region means are stationary at their optimum, so this is the exact
/// derivative of `chan_vese_energy` when `mu_length` is zero.
pub fn chan_vese_gradient(
    image: &ScalarField,
    sdf: &SignedDistanceField,
    p: &ChanVeseParams,
) -> Result<ScalarField> {
    crate::grid::check_dims(image.dims(), sdf.dims())?;
    let dims = sdf.dims();
    let (c1, c2) = region_means(image, sdf, p.epsilon);
    let mut g = vec![0.0f64; dims.len()];
    for y in 0..dims.height {
        for x in 0..dims.width {
            let idx = dims.index(y, x);
            let i = image.values()[idx];
            let phi = sdf.phi()[idx];
            let d = delta(phi, p.epsilon);
            let mut f = d * (p.lambda1 * (i - c1) * (i - c1) - p.lambda2 * (i - c2) * (i - c2));
            if p.mu_length > 0.0 {
                f += p.mu_length * d * curvature(sdf, y as isize, x as isize);
            }
            g[idx] = f;
        }
    }
    Ok(Field::from_vec(dims, g))
}

pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log kernel value per shape of one class, evaluated at `sdf`.
pub fn log_shape_similarities(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
) -> Result<Vec<f64>> {
    let shapes = ts.class(class_id)?;
    shapes
        .iter()
        .map(|s| Ok(log_gaussian_kernel(l2_distance(sdf, &s.sdf)?, ts.kernel())))
        .collect()
}

/// Unnormalized similarity of each shape in a class with the current curve;
/// downstream selection normalizes these into a probability vector.
pub fn shape_similarities(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
) -> Result<Vec<f64>> {
    Ok(log_shape_similarities(sdf, ts, class_id)?.iter().map(|l| l.exp()).collect())
}

/// Log of the class-conditional kernel density, log[(1/m_i) sum_j k(d_ij)].
pub fn log_class_conditional(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
) -> Result<f64> {
    let logs = log_shape_similarities(sdf, ts, class_id)?;
    Ok(logsumexp(&logs) - (logs.len() as f64).ln())
}

/// Class-conditional density with the proportionality constant fixed to 1.
pub fn class_conditional_density(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    class_id: usize,
) -> Result<f64> {
    Ok(log_class_conditional(sdf, ts, class_id)?.exp())
}

/// Log of the full kernel shape prior: the 1/n average of class
/// conditionals.
pub fn log_shape_prior(sdf: &SignedDistanceField, ts: &TrainingSet) -> Result<f64> {
    let logs: Vec<f64> = (0..ts.n_classes())
        .map(|i| log_class_conditional(sdf, ts, i))
        .collect::<Result<_>>()?;
    Ok(logsumexp(&logs) - (ts.n_classes() as f64).ln())
}

pub fn shape_prior_density(sdf: &SignedDistanceField, ts: &TrainingSet) -> Result<f64> {
    Ok(log_shape_prior(sdf, ts)?.exp())
}

/// Shape energy of the selected subset: -log[(1/gamma) sum_j k(d_j, sigma)].
/// The shape term of `perturbation_field` is its exact negative gradient.
pub fn selected_subset_energy(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    selection: &SelectionRecord,
) -> Result<f64> {
    if selection.shape_indices.is_empty() {
        return Err(Error::EmptyInput("empty selection"));
    }
    let shapes = ts.class(selection.class_id)?;
    let logs: Vec<f64> = selection
        .shape_indices
        .iter()
        .map(|&j| Ok(log_gaussian_kernel(l2_distance(sdf, &shapes[j].sdf)?, ts.kernel())))
        .collect::<Result<_>>()?;
    Ok(-(logsumexp(&logs) - (logs.len() as f64).ln()))
}

/// Kernel-weighted softmax weights over the selected shapes. The kernel
/// normalization constant cancels, so only the exponents enter.
fn selection_weights(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    selection: &SelectionRecord,
) -> Result<Vec<f64>> {
    let shapes = ts.class(selection.class_id)?;
    let kernel = ts.kernel();
    let logs: Vec<f64> = selection
        .shape_indices
        .iter()
        .map(|&j| Ok(log_gaussian_kernel(l2_distance(sdf, &shapes[j].sdf)?, kernel)))
        .collect::<Result<_>>()?;
    let lse = logsumexp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

/// The negative energy gradient built from the selected training shapes:
/// data descent direction plus beta times the subset shape term
/// (1/sigma^2) sum_j w_j (phi_j - phi) with kernel softmax weights w.
pub fn perturbation_field(
    sdf: &SignedDistanceField,
    selection: &SelectionRecord,
    image: &ScalarField,
    ts: &TrainingSet,
    p: &ChanVeseParams,
    beta_shape: f64,
) -> Result<ScalarField> {
    if selection.shape_indices.is_empty() {
        return Err(Error::EmptyInput("empty selection"));
    }
    let mut f = chan_vese_gradient(image, sdf, p)?;
    let st = shape_term(sdf, ts, selection)?;
    for (out, &s) in f.values_mut().iter_mut().zip(st.values()) {
        *out += beta_shape * s;
    }
    Ok(f)
}

/// Shape component alone, shared by the patch-composite variant.
pub(crate) fn shape_term(
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    selection: &SelectionRecord,
) -> Result<ScalarField> {
    let weights = selection_weights(sdf, ts, selection)?;
    let shapes = ts.class(selection.class_id)?;
    let sigma = ts.kernel().sigma;
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut f = ScalarField::filled(sdf.dims(), 0.0);
    for (&j, &w) in selection.shape_indices.iter().zip(&weights) {
        let phi_j = shapes[j].sdf.phi();
        for (out, (&pj, &pc)) in f.values_mut().iter_mut().zip(phi_j.iter().zip(sdf.phi())) {
            *out += inv_s2 * w * (pj - pc);
        }
    }
    Ok(f)
}

/// Full energy breakdown for the requested target mode. The caller supplies
/// an sdf already aligned to the training frame.
pub fn total_energy(
    image: &ScalarField,
    sdf: &SignedDistanceField,
    ts: &TrainingSet,
    p: &ChanVeseParams,
    beta_shape: f64,
    mode: TargetMode,
) -> Result<EnergyBreakdown> {
    let e_data = chan_vese_energy(image, sdf, p)?;
    let e_shape = -log_shape_prior(sdf, ts)?;
    let e_total = match mode {
        TargetMode::Full => e_data + beta_shape * e_shape,
        TargetMode::ShapeOnly => e_shape,
    };
    Ok(EnergyBreakdown { e_data, e_shape, e_total, beta_shape })
}
