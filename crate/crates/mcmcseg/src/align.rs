//! Pose removal among training shapes and between the evolving curve and the
//! training set.
//!
//! The alignment is a gradient-free coarse-to-fine search: centroid match
//! seeds the translation, the area ratio seeds the scale, a 1-degree rotation
//! sweep seeds the angle, and a pattern search refines all four parameters by
//! minimizing the area of symmetric difference. The identity pose is kept
//! whenever the search fails to improve on it.

use std::collections::BTreeMap;

use crate::grid::{self, Field, GridDims};
use crate::{BinaryMask, Error, KernelParams, Result, ScalarField, SignedDistanceField};

pub const LOG_SCALE_MIN: f64 = -1.3862943611198906; // ln 0.25
pub const LOG_SCALE_MAX: f64 = 1.3862943611198906; // ln 4

/// Similarity transform: x' = s R(theta) (x - c) + c + t about the grid
/// center c, with s = exp(log_scale).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub log_scale: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { tx: 0.0, ty: 0.0, theta: 0.0, log_scale: 0.0 }
    }

    pub fn new(tx: f64, ty: f64, theta: f64, log_scale: f64) -> Self {
        Pose { tx, ty, theta: wrap_angle(theta), log_scale: log_scale.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX) }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn inverse(&self) -> Pose {
        let s = self.scale();
        let (sin, cos) = self.theta.sin_cos();
        // T^-1(x) = (1/s) R(-theta) (x - c - t) + c
        let tx = -(cos * self.tx + sin * self.ty) / s;
        let ty = -(-sin * self.tx + cos * self.ty) / s;
        Pose { tx, ty, theta: wrap_angle(-self.theta), log_scale: -self.log_scale }
    }

    /// Source coordinate in the moving frame for an output pixel (x, y).
    #[inline]
    fn source(&self, x: f64, y: f64, center: (f64, f64)) -> (f64, f64) {
        let (cx, cy) = center;
        let s = self.scale();
        let (sin, cos) = self.theta.sin_cos();
        let dx = x - cx - self.tx;
        let dy = y - cy - self.ty;
        // (1/s) R(-theta) (x - c - t) + c
        let sx = (cos * dx + sin * dy) / s + cx;
        let sy = (-sin * dx + cos * dy) / s + cy;
        (sx, sy)
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * std::f64::consts::PI);
    if t > std::f64::consts::PI {
        t -= 2.0 * std::f64::consts::PI;
    }
    t
}

/// Nearest-neighbor resampling; out-of-frame sources are background.
pub fn apply_pose_mask(mask: &BinaryMask, pose: &Pose) -> BinaryMask {
    let dims = mask.dims();
    let c = dims.center();
    let mut out = BinaryMask::filled(dims, false);
    for y in 0..dims.height {
        for x in 0..dims.width {
            let (sx, sy) = pose.source(x as f64, y as f64, c);
            let ix = sx.round();
            let iy = sy.round();
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < dims.width && (iy as usize) < dims.height
            {
                out.set(y, x, *mask.get(iy as usize, ix as usize));
            }
        }
    }
    out
}

fn bilinear(values: &Field<f64>, sx: f64, sy: f64) -> f64 {
    let dims = values.dims();
    let cx = sx.clamp(0.0, (dims.width - 1) as f64);
    let cy = sy.clamp(0.0, (dims.height - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(dims.width - 1);
    let y1 = (y0 + 1).min(dims.height - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let v00 = *values.get(y0, x0);
    let v01 = *values.get(y0, x1);
    let v10 = *values.get(y1, x0);
    let v11 = *values.get(y1, x1);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Bilinear resampling with values multiplied by the scale factor so the
/// distance property survives scaling. Out-of-frame sources extend the edge
/// value by the out-of-frame distance, giving a large positive phi far from
/// the frame.
pub fn apply_pose_sdf(sdf: &SignedDistanceField, pose: &Pose) -> SignedDistanceField {
    let dims = sdf.dims();
    let c = dims.center();
    let s = pose.scale();
    let mut phi = vec![0.0f64; dims.len()];
    for y in 0..dims.height {
        for x in 0..dims.width {
            let (sx, sy) = pose.source(x as f64, y as f64, c);
            let cx = sx.clamp(0.0, (dims.width - 1) as f64);
            let cy = sy.clamp(0.0, (dims.height - 1) as f64);
            let beyond = ((sx - cx).powi(2) + (sy - cy).powi(2)).sqrt();
            phi[dims.index(y, x)] = s * (bilinear(sdf.field(), cx, cy) + beyond);
        }
    }
    SignedDistanceField::from_field(Field::from_vec(dims, phi))
}

/// Bilinear resampling with edge extension; used to carry the observed image
/// into the aligned frame.
pub fn apply_pose_scalar(field: &ScalarField, pose: &Pose) -> ScalarField {
    let dims = field.dims();
    let c = dims.center();
    let mut out = vec![0.0f64; dims.len()];
    for y in 0..dims.height {
        for x in 0..dims.width {
            let (sx, sy) = pose.source(x as f64, y as f64, c);
            out[dims.index(y, x)] = bilinear(field, sx, sy);
        }
    }
    Field::from_vec(dims, out)
}

fn objective(moving: &BinaryMask, fixed: &BinaryMask, pose: &Pose) -> usize {
    apply_pose_mask(moving, pose).sym_diff(fixed).expect("same dims")
}

/// Estimates the similarity transform carrying `moving` onto `fixed` by
/// minimizing the area of symmetric difference. Never worse than identity.
pub fn estimate_pose(moving: &BinaryMask, fixed: &BinaryMask) -> Result<Pose> {
    grid::check_dims(moving.dims(), fixed.dims())?;
    let area_m = moving.count_inside();
    let area_f = fixed.count_inside();
    if area_m == 0 || area_m == moving.dims().len() {
        return Err(Error::DegenerateMask("moving mask degenerate"));
    }
    if area_f == 0 || area_f == fixed.dims().len() {
        return Err(Error::DegenerateMask("fixed mask degenerate"));
    }

    let identity = Pose::identity();
    let id_cost = objective(moving, fixed, &identity);
    if id_cost == 0 {
        return Ok(identity);
    }

    let (mcx, mcy) = moving.centroid().expect("non-degenerate");
    let (fcx, fcy) = fixed.centroid().expect("non-degenerate");
    let tx0 = fcx - mcx;
    let ty0 = fcy - mcy;
    let ls0 = (0.5 * (area_f as f64 / area_m as f64).ln()).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);

    // rotation sweep at 1-degree steps with translation/scale seeds
    let deg = std::f64::consts::PI / 180.0;
    let mut best = Pose::new(tx0, ty0, 0.0, ls0);
    let mut best_cost = objective(moving, fixed, &best);
    for k in -179i32..=180 {
        let p = Pose::new(tx0, ty0, k as f64 * deg, ls0);
        let cost = objective(moving, fixed, &p);
        if cost < best_cost {
            best_cost = cost;
            best = p;
        }
    }

    // pattern search refinement
    let mut steps = [1.0f64, 1.0, 2.0 * deg, 0.05];
    for _ in 0..4 {
        loop {
            let mut improved = false;
            for dim in 0..4 {
                for sign in [-1.0, 1.0] {
                    let mut q = [best.tx, best.ty, best.theta, best.log_scale];
                    q[dim] += sign * steps[dim];
                    let p = Pose::new(q[0], q[1], q[2], q[3]);
                    let cost = objective(moving, fixed, &p);
                    if cost < best_cost {
                        best_cost = cost;
                        best = p;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        for s in &mut steps {
            *s *= 0.5;
        }
    }

    if best_cost < id_cost {
        Ok(best)
    } else {
        Ok(identity)
    }
}

/// One pose-normalized training example.
#[derive(Debug, Clone)]
pub struct AlignedShape {
    pub id: String,
    pub class_id: usize,
    pub mask: BinaryMask,
    pub sdf: SignedDistanceField,
    pub pose_from_raw: Pose,
}

/// Raw corpus entry before alignment.
#[derive(Debug, Clone)]
pub struct RawShape {
    pub id: String,
    pub class_name: String,
    pub mask: BinaryMask,
}

/// Kernel-size selection for the shape density.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum KernelRule {
    /// Mean over shapes of the L2 distance to the nearest other shape,
    /// pooled across classes. Falls back to sqrt(H*W) for a lone shape.
    MeanNearestNeighbor,
    Fixed(f64),
}

/// Aligned training shapes partitioned into classes, with the kernel size.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    dims: GridDims,
    classes: Vec<Vec<AlignedShape>>,
    class_names: Vec<String>,
    kernel: KernelParams,
    reference_id: String,
}

impl TrainingSet {
    pub fn from_aligned(
        classes: Vec<Vec<AlignedShape>>,
        class_names: Vec<String>,
        kernel: KernelParams,
        reference_id: String,
    ) -> Result<Self> {
        if classes.is_empty() || classes.iter().any(|c| c.is_empty()) {
            return Err(Error::EmptyInput("training set needs at least one shape per class"));
        }
        assert_eq!(classes.len(), class_names.len());
        let dims = classes[0][0].mask.dims();
        for shape in classes.iter().flatten() {
            grid::check_dims(dims, shape.mask.dims())?;
        }
        Ok(TrainingSet { dims, classes, class_names, kernel, reference_id })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, class_id: usize) -> Result<&[AlignedShape]> {
        self.classes
            .get(class_id)
            .map(|c| c.as_slice())
            .ok_or(Error::InvalidClass { class_id, n_classes: self.classes.len() })
    }

    pub fn class_name(&self, class_id: usize) -> &str {
        &self.class_names[class_id]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn kernel(&self) -> KernelParams {
        self.kernel
    }

    pub fn reference_id(&self) -> &str {
        &self.reference_id
    }

    pub fn shapes(&self) -> impl Iterator<Item = &AlignedShape> {
        self.classes.iter().flatten()
    }

    pub fn n_shapes(&self) -> usize {
        self.classes.iter().map(|c| c.len()).sum()
    }

    /// Aligned mask of the reference shape; the target every pose is
    /// estimated against.
    pub fn reference_mask(&self) -> &BinaryMask {
        self.shapes()
            .find(|s| s.id == self.reference_id)
            .map(|s| &s.mask)
            .expect("reference shape present")
    }
}

/// Aligns every shape to the first shape (by sorted id) and fixes the kernel
/// size per `rule`.
pub fn align_training_set(raw: &[RawShape], rule: KernelRule) -> Result<TrainingSet> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("no training shapes"));
    }
    let dims = raw[0].mask.dims();
    for shape in raw {
        grid::check_dims(dims, shape.mask.dims())?;
    }

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[a].id.cmp(&raw[b].id));
    let reference = &raw[order[0]];
    let reference_id = reference.id.clone();

    // class ids by sorted class name
    let mut names: Vec<String> = raw.iter().map(|s| s.class_name.clone()).collect();
    names.sort();
    names.dedup();
    let class_index: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let mut classes: Vec<Vec<AlignedShape>> = vec![Vec::new(); names.len()];
    for &i in &order {
        let shape = &raw[i];
        let class_id = class_index[shape.class_name.as_str()];
        let mut pose = if shape.id == reference_id {
            Pose::identity()
        } else {
            estimate_pose(&shape.mask, &reference.mask)?
        };
        let mut mask = apply_pose_mask(&shape.mask, &pose);
        if crate::grid::mask_to_sdf::<f64>(&mask).is_err() {
            // alignment pushed the shape out of frame; keep it unaligned
            pose = Pose::identity();
            mask = shape.mask.clone();
        }
        let sdf = crate::grid::mask_to_sdf(&mask)?;
        classes[class_id].push(AlignedShape {
            id: shape.id.clone(),
            class_id,
            mask,
            sdf,
            pose_from_raw: pose,
        });
    }
    if classes.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyInput("empty class after grouping"));
    }

    let sigma = match rule {
        KernelRule::Fixed(s) => s,
        KernelRule::MeanNearestNeighbor => {
            let shapes: Vec<&AlignedShape> = classes.iter().flatten().collect();
            if shapes.len() < 2 {
                ((dims.len()) as f64).sqrt()
            } else {
                let mut total = 0.0;
                for (i, a) in shapes.iter().enumerate() {
                    let mut nearest = f64::INFINITY;
                    for (j, b) in shapes.iter().enumerate() {
                        if i != j {
                            let d = crate::grid::l2_distance(&a.sdf, &b.sdf)?;
                            nearest = nearest.min(d);
                        }
                    }
                    total += nearest;
                }
                let sigma = total / shapes.len() as f64;
                if sigma > 0.0 {
                    sigma
                } else {
                    // all shapes identical; any positive kernel works
                    (dims.len() as f64).sqrt()
                }
            }
        }
    };
    let kernel = KernelParams::new(sigma)?;
    TrainingSet::from_aligned(classes, names, kernel, reference_id)
}

/// Aligns the evolving curve to the training reference. The returned pose
/// maps the curve into the training frame; its inverse carries emitted
/// samples back to image coordinates.
pub fn align_to_training(
    current: &SignedDistanceField,
    ts: &TrainingSet,
) -> Result<(SignedDistanceField, Pose)> {
    let mask = crate::grid::sdf_to_mask(current);
    let pose = estimate_pose(&mask, ts.reference_mask())?;
    let moved = apply_pose_sdf(current, &pose);
    let aligned = crate::grid::reinitialize(&moved)?;
    Ok((aligned, pose))
}
