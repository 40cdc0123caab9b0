//! Scalar fields on pixel grids, binary masks, signed distance fields and the
//! kernel/distance primitives shared by every other module.
//!
//! Generic over the scalar type through `num_traits::Float`; the crate root
//! exports `f64` aliases which the sampler uses throughout.

use num_traits::Float;

use crate::{Error, Result};

/// Grid size in pixels, row-major semantics everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "grid dims must be positive");
        GridDims { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        debug_assert!(y < self.height && x < self.width);
        y * self.width + x
    }

    /// Grid center in pixel coordinates; rotation/scaling pivot.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

impl std::fmt::Display for GridDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Dense row-major grid of values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Field<T> {
    dims: GridDims,
    data: Vec<T>,
}

impl<T: Clone> Field<T> {
    pub fn filled(dims: GridDims, value: T) -> Self {
        Field { dims, data: vec![value; dims.len()] }
    }

    pub fn from_vec(dims: GridDims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.len(), "value count must match dims");
        Field { dims, data }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[self.dims.index(y, x)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        let i = self.dims.index(y, x);
        self.data[i] = value;
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Field<U> {
        Field { dims: self.dims, data: self.data.iter().map(f).collect() }
    }
}

/// Binary mask; `true` marks the interior of the curve.
pub type Mask = Field<bool>;

impl Mask {
    pub fn count_inside(&self) -> usize {
        self.values().iter().filter(|&&b| b).count()
    }

    /// Area of symmetric difference in pixels.
    pub fn sym_diff(&self, other: &Mask) -> Result<usize> {
        check_dims(self.dims(), other.dims())?;
        Ok(self
            .values()
            .iter()
            .zip(other.values())
            .filter(|(a, b)| a != b)
            .count())
    }

    /// Foreground centroid in (x, y) pixel coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..self.dims().height {
            for x in 0..self.dims().width {
                if *self.get(y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Level-set representation of a curve: negative strictly inside, positive
/// strictly outside, |phi| the Euclidean distance to the nearest
/// opposite-sign pixel center.
#[derive(Debug, Clone, PartialEq)]
pub struct Sdf<F> {
    field: Field<F>,
}

impl<F: Float> Sdf<F> {
    /// Wraps a field as an SDF without re-deriving distances. The caller
    /// vouches for the sign convention; use `reinitialize` to restore the
    /// distance property after perturbing.
    pub fn from_field(field: Field<F>) -> Self {
        Sdf { field }
    }

    pub fn dims(&self) -> GridDims {
        self.field.dims()
    }

    pub fn phi(&self) -> &[F] {
        self.field.values()
    }

    pub fn phi_mut(&mut self) -> &mut [F] {
        self.field.values_mut()
    }

    pub fn field(&self) -> &Field<F> {
        &self.field
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> F {
        *self.field.get(y, x)
    }
}

/// Gaussian kernel size sigma, in units of the L2 shape distance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams<F> {
    pub sigma: F,
}

impl<F: Float> KernelParams<F> {
    pub fn new(sigma: F) -> Result<Self> {
        if sigma <= F::zero() || !sigma.is_finite() {
            return Err(Error::InvalidParameter("sigma must be > 0".into()));
        }
        Ok(KernelParams { sigma })
    }
}

pub(crate) fn check_dims(a: GridDims, b: GridDims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(a, b));
    }
    Ok(())
}

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher),
/// distance from every pixel to the nearest `true` pixel center.
fn edt_squared<F: Float>(mask: &Mask) -> Field<F> {
    let dims = mask.dims();
    let (h, w) = (dims.height, dims.width);
    let inf = F::max_value();

    // column-wise pass over the 0/inf indicator
    let mut g = vec![inf; h * w];
    for x in 0..w {
        let mut col: Vec<F> = (0..h)
            .map(|y| if *mask.get(y, x) { F::zero() } else { inf })
            .collect();
        dt_1d(&mut col);
        for y in 0..h {
            g[y * w + x] = col[y];
        }
    }
    // row-wise pass over the column distances
    let mut out = vec![inf; h * w];
    for y in 0..h {
        let mut row: Vec<F> = g[y * w..(y + 1) * w].to_vec();
        dt_1d(&mut row);
        out[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    Field::from_vec(dims, out)
}

/// 1D squared-distance transform via the lower envelope of parabolas.
fn dt_1d<F: Float>(f: &mut [F]) {
    let n = f.len();
    if n == 1 {
        return;
    }
    let inf = F::max_value();
    let mut v = vec![0usize; n];
    let mut z = vec![F::zero(); n + 1];
    let mut d = vec![F::zero(); n];
    let mut k = 0usize;
    z[0] = -inf;
    z[1] = inf;
    let sq = |q: usize| F::from(q * q).unwrap();
    let fq = |q: usize| F::from(q).unwrap();
    for q in 1..n {
        if f[q] == inf {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p] == inf {
                // parabola at p is absent; replace outright
                -inf
            } else {
                ((f[q] + sq(q)) - (f[p] + sq(p))) / (F::from(2 * (q - p)).unwrap())
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = inf;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = inf;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < fq(q) {
            k += 1;
        }
        let p = v[k];
        d[q] = if f[p] == inf {
            inf
        } else {
            let dq = fq(q) - fq(p);
            dq * dq + f[p]
        };
    }
    f.copy_from_slice(&d);
}

fn ensure_non_degenerate(mask: &Mask) -> Result<()> {
    let inside = mask.count_inside();
    if inside == 0 {
        return Err(Error::DegenerateMask("all pixels outside"));
    }
    if inside == mask.dims().len() {
        return Err(Error::DegenerateMask("all pixels inside"));
    }
    Ok(())
}

/// Signed distance field of a mask: negative inside, positive outside,
/// magnitude the exact Euclidean distance to the nearest opposite-sign pixel.
pub fn mask_to_sdf<F: Float>(mask: &Mask) -> Result<Sdf<F>> {
    ensure_non_degenerate(mask)?;
    let d_to_inside = edt_squared::<F>(mask);
    let outside = mask.map(|&b| !b);
    let d_to_outside = edt_squared::<F>(&outside);
    let phi: Vec<F> = mask
        .values()
        .iter()
        .zip(d_to_inside.values().iter().zip(d_to_outside.values()))
        .map(|(&inside, (&din, &dout))| {
            if inside {
                -dout.sqrt()
            } else {
                din.sqrt()
            }
        })
        .collect();
    Ok(Sdf::from_field(Field::from_vec(mask.dims(), phi)))
}

/// Interior of the curve: phi < 0. Ties (phi = 0 exactly) map to outside.
pub fn sdf_to_mask<F: Float>(sdf: &Sdf<F>) -> Mask {
    sdf.field().map(|&p| p < F::zero())
}

/// Root-sum-of-squares distance between two level-set fields.
pub fn l2_distance<F: Float>(a: &Sdf<F>, b: &Sdf<F>) -> Result<F> {
    check_dims(a.dims(), b.dims())?;
    let mut acc = F::zero();
    for (&pa, &pb) in a.phi().iter().zip(b.phi()) {
        let d = pa - pb;
        acc = acc + d * d;
    }
    Ok(acc.sqrt())
}

/// 1D Gaussian kernel: exp(-d^2 / 2 sigma^2) / (sigma sqrt(2 pi)).
pub fn gaussian_kernel<F: Float>(d: F, params: KernelParams<F>) -> F {
    log_gaussian_kernel(d, params).exp()
}

/// Log of `gaussian_kernel`; all density arithmetic downstream stays in the
/// log domain to survive large shape distances.
pub fn log_gaussian_kernel<F: Float>(d: F, params: KernelParams<F>) -> F {
    let s = params.sigma;
    let half = F::from(0.5).unwrap();
    let ln_norm = s.ln() + F::from(0.5 * (2.0 * std::f64::consts::PI).ln()).unwrap();
    -half * (d / s) * (d / s) - ln_norm
}

/// Restores the distance property after perturbation: the mask is extracted
/// and the exact distance transform recomputed, so the zero level set (as
/// seen through `sdf_to_mask`) is unchanged.
pub fn reinitialize<F: Float>(sdf: &Sdf<F>) -> Result<Sdf<F>> {
    let mask = sdf_to_mask(sdf);
    mask_to_sdf(&mask).map_err(|e| match e {
        Error::DegenerateMask(_) => Error::DegenerateMask("single-signed field"),
        other => other,
    })
}

// Also used by the integration and acceptance suites, hence public.
pub mod test_util {
    use super::*;
    use rand::Rng;

    /// Brute-force oracle: min over all pixel pairs.
    pub fn sdf_bruteforce(mask: &Mask) -> Sdf<f64> {
        let dims = mask.dims();
        let mut phi = vec![0.0f64; dims.len()];
        for y in 0..dims.height {
            for x in 0..dims.width {
                let inside = *mask.get(y, x);
                let mut best = f64::INFINITY;
                for yy in 0..dims.height {
                    for xx in 0..dims.width {
                        if *mask.get(yy, xx) != inside {
                            let dy = yy as f64 - y as f64;
                            let dx = xx as f64 - x as f64;
                            best = best.min(dy * dy + dx * dx);
                        }
                    }
                }
                let d = best.sqrt();
                phi[dims.index(y, x)] = if inside { -d } else { d };
            }
        }
        Sdf::from_field(Field::from_vec(dims, phi))
    }

    pub fn random_mask(rng: &mut impl Rng, dims: GridDims, p: f64) -> Mask {
        loop {
            let m = Field::from_vec(dims, (0..dims.len()).map(|_| rng.gen_bool(p)).collect());
            let n = m.count_inside();
            if n > 0 && n < dims.len() {
                return m;
            }
        }
    }

    pub fn disk_mask(dims: GridDims, cy: f64, cx: f64, r: f64) -> Mask {
        let mut m = Mask::filled(dims, false);
        for y in 0..dims.height {
            for x in 0..dims.width {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}
