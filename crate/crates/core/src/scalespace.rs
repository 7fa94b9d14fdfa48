//! Gaussian scale space and the first-order lift onto directions of the sphere.
//!
//! Filters are separable correlations with zero extension outside the grid.
//! Kernels are truncated at 4σ. The smoothing kernel is renormalized to unit
//! sum, the first-derivative kernel to unit response on a unit ramp, and the
//! second-derivative kernel to zero sum and response 2 on x², so constants,
//! ramps and quadratics are reproduced exactly away from the boundary.

use rayon::prelude::*;

use crate::error::{FlorError, Result};
use crate::volume::VolumeGrid;
use crate::{dot, norm, Vec3};

const TRUNCATION: f64 = 4.0;
const UNIT_TOL: f64 = 1e-9;

/// Sampled 1D kernel on offsets `-radius..=radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel1D {
    sigma: f64,
    radius: usize,
    taps: Vec<f64>,
}

impl GaussianKernel1D {
    fn raw(sigma: f64) -> Result<(usize, Vec<f64>)> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(FlorError::invalid(format!("sigma must be > 0, got {sigma}")));
        }
        let radius = ((TRUNCATION * sigma).ceil() as usize).max(1);
        let g = (-(radius as isize)..=radius as isize)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        Ok((radius, g))
    }

    /// Smoothing kernel, unit sum.
    pub fn new(sigma: f64) -> Result<Self> {
        let (radius, mut taps) = Self::raw(sigma)?;
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        Ok(Self { sigma, radius, taps })
    }

    /// First-derivative kernel for correlation: `Σ w[k] f(x+k) = f'(x)` on ramps.
    pub fn derivative(sigma: f64) -> Result<Self> {
        let (radius, g) = Self::raw(sigma)?;
        let r = radius as isize;
        let mut taps: Vec<f64> = (-r..=r).zip(&g).map(|(k, gk)| k as f64 * gk).collect();
        let moment: f64 = (-r..=r).zip(&taps).map(|(k, t)| k as f64 * t).sum();
        taps.iter_mut().for_each(|t| *t /= moment);
        Ok(Self { sigma, radius, taps })
    }

    /// Second-derivative kernel: zero sum, `Σ w[k] k² = 2`.
    pub fn second_derivative(sigma: f64) -> Result<Self> {
        let (radius, g) = Self::raw(sigma)?;
        let r = radius as isize;
        let s2 = sigma * sigma;
        let mut taps: Vec<f64> = (-r..=r).zip(&g).map(|(k, gk)| ((k * k) as f64 - s2) * gk).collect();
        let shift = taps.iter().sum::<f64>() / g.iter().sum::<f64>();
        taps.iter_mut().zip(&g).for_each(|(t, gk)| *t -= shift * gk);
        let moment: f64 = (-r..=r).zip(&taps).map(|(k, t)| (k * k) as f64 * t).sum();
        taps.iter_mut().for_each(|t| *t *= 2.0 / moment);
        Ok(Self { sigma, radius, taps })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

/// Correlates along one axis with zero extension.
fn correlate_axis(values: &[f64], dims: [usize; 3], kernel: &GaussianKernel1D, axis: usize) -> Vec<f64> {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as isize;
    let r = kernel.radius as isize;
    let taps = &kernel.taps;
    (0..values.len())
        .into_par_iter()
        .map(|idx| {
            let pos = ((idx / stride) % dims[axis]) as isize;
            let lo = (-r).max(-pos);
            let hi = r.min(n - 1 - pos);
            let mut acc = 0.0;
            for k in lo..=hi {
                let src = (idx as isize + k * stride as isize) as usize;
                acc += taps[(k + r) as usize] * values[src];
            }
            acc
        })
        .collect()
}

fn separable(values: &[f64], dims: [usize; 3], kernels: [&GaussianKernel1D; 3]) -> Vec<f64> {
    let a = correlate_axis(values, dims, kernels[0], 0);
    let b = correlate_axis(&a, dims, kernels[1], 1);
    correlate_axis(&b, dims, kernels[2], 2)
}

/// `I * G_σ`; σ = 0 returns a copy.
pub fn gaussian_smooth(grid: &VolumeGrid, sigma: f64) -> Result<VolumeGrid> {
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let g = GaussianKernel1D::new(sigma)?;
    grid.with_values(separable(grid.values(), grid.dims(), [&g, &g, &g]))
}

/// Per-voxel `∇(I * G_σ)` in intensity per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    dims: [usize; 3],
    data: Vec<Vec3>,
}

impl GradientField {
    pub fn new(dims: [usize; 3], data: Vec<Vec3>) -> Result<Self> {
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(FlorError::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|g| g.iter().any(|c| !c.is_finite())) {
            return Err(FlorError::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.data.iter().map(|g| g[axis]).collect()
    }

    pub fn negated(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|g| [-g[0], -g[1], -g[2]]).collect(),
        }
    }
}

pub fn gradient_field(grid: &VolumeGrid, sigma: f64) -> Result<GradientField> {
    let g = GaussianKernel1D::new(sigma)?;
    let d = GaussianKernel1D::derivative(sigma)?;
    let dims = grid.dims();
    let v = grid.values();
    let gx = separable(v, dims, [&d, &g, &g]);
    let gy = separable(v, dims, [&g, &d, &g]);
    let gz = separable(v, dims, [&g, &g, &d]);
    let data = (0..v.len()).map(|i| [gx[i], gy[i], gz[i]]).collect();
    GradientField::new(dims, data)
}

pub(crate) fn check_unit(v: &Vec3) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(FlorError::invalid(format!(
            "direction {v:?} is not unit length (|v| = {n})"
        )));
    }
    Ok(())
}

/// Directional response `∇I_σ(x)ᵀ v` at every voxel.
pub fn lift(field: &GradientField, v: &Vec3) -> Result<Vec<f64>> {
    check_unit(v)?;
    Ok(field.data.iter().map(|g| dot(g, v)).collect())
}

/// Discretization of S² by unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    directions: Vec<Vec3>,
}

impl DirectionSet {
    pub fn new(directions: Vec<Vec3>) -> Result<Self> {
        if directions.is_empty() {
            return Err(FlorError::invalid("direction set is empty"));
        }
        for (i, v) in directions.iter().enumerate() {
            if (norm(v) - 1.0).abs() > 1e-12 {
                return Err(FlorError::invalid(format!("direction {v:?} is not unit length")));
            }
            if directions[..i].iter().any(|w| w == v) {
                return Err(FlorError::invalid(format!("duplicate direction {v:?}")));
            }
        }
        Ok(Self { directions })
    }

    /// The 26 nonzero offsets of a 3×3×3 neighbourhood, normalized.
    pub fn neighbours_26() -> Self {
        let mut directions = Vec::with_capacity(26);
        for z in -1i32..=1 {
            for y in -1i32..=1 {
                for x in -1i32..=1 {
                    if (x, y, z) == (0, 0, 0) {
                        continue;
                    }
                    let o = [x as f64, y as f64, z as f64];
                    let n = norm(&o);
                    directions.push([o[0] / n, o[1] / n, o[2] / n]);
                }
            }
        }
        Self { directions }
    }

    /// A single direction.
    pub fn single(v: Vec3) -> Result<Self> {
        check_unit(&v)?;
        Ok(Self { directions: vec![v] })
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn is_antipodally_closed(&self) -> bool {
        self.directions
            .iter()
            .all(|v| self.directions.contains(&[-v[0], -v[1], -v[2]]))
    }
}

pub fn direction_set_26() -> DirectionSet {
    DirectionSet::neighbours_26()
}

/// `vᵀ ∇²I_σ(x) v` at every voxel.
pub fn hessian_probe(grid: &VolumeGrid, sigma: f64, v: &Vec3) -> Result<Vec<f64>> {
    check_unit(v)?;
    let g = GaussianKernel1D::new(sigma)?;
    let d = GaussianKernel1D::derivative(sigma)?;
    let dd = GaussianKernel1D::second_derivative(sigma)?;
    let dims = grid.dims();
    let vals = grid.values();
    let mut out = vec![0.0; vals.len()];
    let mut accumulate = |weight: f64, kernels: [&GaussianKernel1D; 3]| {
        if weight != 0.0 {
            let h = separable(vals, dims, kernels);
            out.iter_mut().zip(h).for_each(|(o, h)| *o += weight * h);
        }
    };
    accumulate(v[0] * v[0], [&dd, &g, &g]);
    accumulate(v[1] * v[1], [&g, &dd, &g]);
    accumulate(v[2] * v[2], [&g, &g, &dd]);
    accumulate(2.0 * v[0] * v[1], [&d, &d, &g]);
    accumulate(2.0 * v[0] * v[2], [&d, &g, &d]);
    accumulate(2.0 * v[1] * v[2], [&g, &d, &d]);
    Ok(out)
}
