//! Interpolating cubic B-splines on a voxel lattice.
//!
//! Coefficients outside the lattice are zero. The prefilter solves the
//! resulting tridiagonal system `(c[i-1] + 4 c[i] + c[i+1]) / 6 = s[i]` along
//! each axis, so the spline passes through every sample and decays to zero
//! two voxels beyond the lattice.

use rayon::prelude::*;

use crate::scalespace::GradientField;
use crate::volume::VolumeGrid;
use crate::Vec3;

/// Cubic B-spline weights and derivatives for taps `i-1..=i+2`, `f = u - i`.
#[inline]
pub fn cubic_weights(f: f64) -> ([f64; 4], [f64; 4]) {
    let g = 1.0 - f;
    let f2 = f * f;
    let f3 = f2 * f;
    (
        [
            g * g * g / 6.0,
            (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
            (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
            f3 / 6.0,
        ],
        [-0.5 * g * g, 1.5 * f2 - 2.0 * f, -1.5 * f2 + f + 0.5, 0.5 * f2],
    )
}

/// Tensor-product tap weights at one point.
#[derive(Debug, Clone, Copy)]
pub struct SplineWeights {
    /// Index of the first tap per axis (`floor(u) - 1`).
    pub first: [isize; 3],
    pub w: [[f64; 4]; 3],
    pub dw: [[f64; 4]; 3],
}

impl SplineWeights {
    #[inline]
    pub fn at(p: &Vec3) -> Self {
        let mut first = [0isize; 3];
        let mut w = [[0.0; 4]; 3];
        let mut dw = [[0.0; 4]; 3];
        for k in 0..3 {
            let fl = p[k].floor();
            first[k] = fl as isize - 1;
            let (a, b) = cubic_weights(p[k] - fl);
            w[k] = a;
            dw[k] = b;
        }
        Self { first, w, dw }
    }
}

fn prefilter_line(line: &mut [f64], cp: &[f64]) {
    let n = line.len();
    line[0] = 6.0 * line[0] * cp[0];
    for i in 1..n {
        line[i] = (6.0 * line[i] - line[i - 1]) * cp[i];
    }
    for i in (0..n - 1).rev() {
        line[i] -= cp[i] * line[i + 1];
    }
}

fn thomas_factors(n: usize) -> Vec<f64> {
    let mut cp = vec![0.0; n];
    cp[0] = 0.25;
    for i in 1..n {
        cp[i] = 1.0 / (4.0 - cp[i - 1]);
    }
    cp
}

/// Sample values to spline coefficients, axis by axis.
pub fn prefilter(values: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let mut c = values.to_vec();
    let [nx, ny, nz] = dims;
    let cpx = thomas_factors(nx);
    c.par_chunks_mut(nx).for_each(|line| prefilter_line(line, &cpx));

    let cpy = thomas_factors(ny);
    c.par_chunks_mut(nx * ny).for_each(|slab| {
        let mut line = vec![0.0; ny];
        for x in 0..nx {
            for y in 0..ny {
                line[y] = slab[x + nx * y];
            }
            prefilter_line(&mut line, &cpy);
            for y in 0..ny {
                slab[x + nx * y] = line[y];
            }
        }
    });

    let cpz = thomas_factors(nz);
    let plane = nx * ny;
    let columns: Vec<Vec<f64>> = (0..plane)
        .into_par_iter()
        .map(|xy| {
            let mut line: Vec<f64> = (0..nz).map(|z| c[xy + plane * z]).collect();
            prefilter_line(&mut line, &cpz);
            line
        })
        .collect();
    for (xy, line) in columns.into_iter().enumerate() {
        for (z, v) in line.into_iter().enumerate() {
            c[xy + plane * z] = v;
        }
    }
    c
}

/// A scalar volume as a C² cubic spline.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineVolume {
    dims: [usize; 3],
    coeffs: Vec<f64>,
}

impl BSplineVolume {
    pub fn from_values(dims: [usize; 3], values: &[f64]) -> Self {
        Self {
            dims,
            coeffs: prefilter(values, dims),
        }
    }

    pub fn from_grid(grid: &VolumeGrid) -> Self {
        Self::from_values(grid.dims(), grid.values())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    fn tap_range(&self, w: &SplineWeights, axis: usize) -> (usize, usize) {
        let lo = (-w.first[axis]).clamp(0, 4) as usize;
        let hi = (self.dims[axis] as isize - w.first[axis]).clamp(0, 4) as usize;
        (lo, hi)
    }

    /// Value and spatial gradient at precomputed weights.
    #[inline]
    pub fn eval_with(&self, w: &SplineWeights) -> (f64, Vec3) {
        let (xl, xh) = self.tap_range(w, 0);
        let (yl, yh) = self.tap_range(w, 1);
        let (zl, zh) = self.tap_range(w, 2);
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let mut val = 0.0;
        let mut grad = [0.0; 3];
        for c in zl..zh {
            let z = (w.first[2] + c as isize) as usize;
            let (wz, dwz) = (w.w[2][c], w.dw[2][c]);
            for b in yl..yh {
                let y = (w.first[1] + b as isize) as usize;
                let (wy, dwy) = (w.w[1][b], w.dw[1][b]);
                let row = nx * (y + ny * z);
                let mut s = 0.0;
                let mut ds = 0.0;
                for a in xl..xh {
                    let x = (w.first[0] + a as isize) as usize;
                    let coef = self.coeffs[row + x];
                    s += coef * w.w[0][a];
                    ds += coef * w.dw[0][a];
                }
                val += s * wy * wz;
                grad[0] += ds * wy * wz;
                grad[1] += s * dwy * wz;
                grad[2] += s * wy * dwz;
            }
        }
        (val, grad)
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        self.eval_with(&SplineWeights::at(p)).0
    }

    pub fn eval_grad(&self, p: &Vec3) -> (f64, Vec3) {
        self.eval_with(&SplineWeights::at(p))
    }
}

/// A gradient field with each channel interpolated by a cubic spline.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSpline {
    channels: [BSplineVolume; 3],
}

impl GradientSpline {
    pub fn new(field: &GradientField) -> Self {
        let dims = field.dims();
        let ch = |k: usize| BSplineVolume::from_values(dims, &field.component(k));
        Self {
            channels: [ch(0), ch(1), ch(2)],
        }
    }

    /// Interpolated gradient and its spatial Jacobian `m[c][k] = ∂G_c/∂x_k`.
    #[inline]
    pub fn eval_with(&self, w: &SplineWeights) -> (Vec3, [[f64; 3]; 3]) {
        let mut g = [0.0; 3];
        let mut m = [[0.0; 3]; 3];
        for c in 0..3 {
            let (v, d) = self.channels[c].eval_with(w);
            g[c] = v;
            m[c] = d;
        }
        (g, m)
    }

    pub fn eval(&self, p: &Vec3) -> Vec3 {
        self.eval_with(&SplineWeights::at(p)).0
    }
}
