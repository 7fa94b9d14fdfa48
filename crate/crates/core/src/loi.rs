//! Locally orderless histograms and densities.
//!
//! Every sample deposits exactly one unit of mass, smeared over bin centers by
//! a Parzen window that is truncated and renormalized per deposit. Histograms
//! therefore store masses; densities divide by total mass and bin area.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{FlorError, Result};
use crate::scalespace::{lift, DirectionSet, GradientField};
use crate::Vec3;

const GAUSS_SUPPORT: f64 = 4.0;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParzenKind {
    Gaussian,
    BSpline3,
}

/// Intensity-scale kernel `P_β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParzenWindow {
    kind: ParzenKind,
    beta: f64,
}

fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

impl ParzenWindow {
    pub fn new(kind: ParzenKind, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(FlorError::invalid(format!("parzen beta must be > 0, got {beta}")));
        }
        Ok(Self { kind, beta })
    }

    pub fn gaussian(beta: f64) -> Result<Self> {
        Self::new(ParzenKind::Gaussian, beta)
    }

    pub fn kind(&self) -> ParzenKind {
        self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Half-width beyond which the window is zero.
    pub fn support(&self) -> f64 {
        match self.kind {
            ParzenKind::Gaussian => GAUSS_SUPPORT * self.beta,
            ParzenKind::BSpline3 => 2.0 * self.beta,
        }
    }

    /// Continuous unit-mass kernel (the Gaussian is not truncated here).
    pub fn density(&self, t: f64) -> f64 {
        match self.kind {
            ParzenKind::Gaussian => {
                (-(t * t) / (2.0 * self.beta * self.beta)).exp() / (self.beta * (2.0 * std::f64::consts::PI).sqrt())
            }
            ParzenKind::BSpline3 => bspline3(t / self.beta) / self.beta,
        }
    }

    /// Bin weights for one sample, summing to one.
    fn deposit(&self, value: f64, range: &IntensityRange, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let bw = range.bin_width();
        let reach = self.support();
        let first = ((value - reach - range.lo) / bw - 0.5).ceil().max(0.0);
        let last = ((value + reach - range.lo) / bw - 0.5)
            .floor()
            .min(range.bins as f64 - 1.0);
        let mut total = 0.0;
        if first <= last {
            for b in first as usize..=last as usize {
                let w = match self.kind {
                    ParzenKind::Gaussian => {
                        let t = (range.center(b) - value) / self.beta;
                        (-0.5 * t * t).exp()
                    }
                    ParzenKind::BSpline3 => bspline3((range.center(b) - value) / self.beta),
                };
                if w > 0.0 {
                    out.push((b, w));
                    total += w;
                }
            }
        }
        if total > 0.0 {
            out.iter_mut().for_each(|(_, w)| *w /= total);
        } else {
            out.clear();
            out.push((range.nearest_bin(value), 1.0));
        }
    }
}

/// Integration-scale window `W_α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntegrationWindow {
    Gaussian { alpha: f64 },
    Global,
}

/// The interval Λ and its binning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityRange {
    lo: f64,
    hi: f64,
    bins: usize,
}

impl IntensityRange {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(FlorError::invalid(format!("degenerate intensity range [{lo}, {hi}]")));
        }
        if bins < 2 {
            return Err(FlorError::invalid(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self { lo, hi, bins })
    }

    /// `[min - 4β, max + 4β]` with `β = beta_bins` bin widths.
    ///
    /// Both the bin width and β follow from the value range, so this solves
    /// `width = (max - min) / (bins - 8·beta_bins)`.
    pub fn covering(min: f64, max: f64, bins: usize, beta_bins: f64) -> Result<Self> {
        let usable = bins as f64 - 2.0 * GAUSS_SUPPORT * beta_bins;
        if !(usable > 0.0) || !(beta_bins > 0.0) {
            return Err(FlorError::invalid(format!(
                "{bins} bins cannot hold a {beta_bins}-bin Parzen margin"
            )));
        }
        let span = if max > min { max - min } else { 1.0 };
        let width = span / usable;
        let pad = GAUSS_SUPPORT * beta_bins * width;
        let (lo, hi) = if max > min { (min, max) } else { (min - 0.5, min + 0.5) };
        Self::new(lo - pad, hi + pad, bins)
    }

    /// Covering range over several value sets jointly.
    pub fn covering_all(sets: &[&[f64]], bins: usize, beta_bins: f64) -> Result<Self> {
        let (min, max) = sets
            .iter()
            .flat_map(|s| s.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !min.is_finite() {
            return Err(FlorError::invalid("cannot build a range over no values"));
        }
        Self::covering(min, max, bins, beta_bins)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * self.bin_width()
    }

    pub fn nearest_bin(&self, value: f64) -> usize {
        let b = ((value - self.lo) / self.bin_width()).floor();
        b.clamp(0.0, self.bins as f64 - 1.0) as usize
    }
}

/// Range of all directional responses of a gradient field, padded by 4β.
pub fn lifted_range(
    fields: &[&GradientField],
    dirs: &DirectionSet,
    bins: usize,
    beta_bins: f64,
) -> Result<IntensityRange> {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for f in fields {
        for v in dirs.directions() {
            for r in lift(f, v)? {
                min = min.min(r);
                max = max.max(r);
            }
        }
    }
    if !min.is_finite() {
        return Err(FlorError::invalid("cannot build a range over no values"));
    }
    IntensityRange::covering(min, max, bins, beta_bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram1D {
    range: IntensityRange,
    counts: Vec<f64>,
}

impl Histogram1D {
    pub fn from_counts(range: IntensityRange, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != range.bins {
            return Err(FlorError::LengthMismatch(range.bins, counts.len()));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(FlorError::invalid("histogram counts must be finite and nonnegative"));
        }
        Ok(Self { range, counts })
    }

    pub fn range(&self) -> &IntensityRange {
        &self.range
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# bins={} lo={:?} hi={:?}\n",
            self.range.bins, self.range.lo, self.range.hi
        );
        for c in &self.counts {
            let _ = writeln!(s, "{c:?}");
        }
        s
    }
}

/// Joint histogram, row index over the first image, column over the second.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    range_a: IntensityRange,
    range_b: IntensityRange,
    counts: Vec<f64>,
}

impl Histogram2D {
    pub fn from_counts(range_a: IntensityRange, range_b: IntensityRange, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != range_a.bins * range_b.bins {
            return Err(FlorError::LengthMismatch(range_a.bins * range_b.bins, counts.len()));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(FlorError::invalid("histogram counts must be finite and nonnegative"));
        }
        Ok(Self {
            range_a,
            range_b,
            counts,
        })
    }

    pub fn range_a(&self) -> &IntensityRange {
        &self.range_a
    }

    pub fn range_b(&self) -> &IntensityRange {
        &self.range_b
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.range_b.bins + j]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn transposed(&self) -> Self {
        let (na, nb) = (self.range_a.bins, self.range_b.bins);
        let mut counts = vec![0.0; na * nb];
        for i in 0..na {
            for j in 0..nb {
                counts[j * na + i] = self.get(i, j);
            }
        }
        Self {
            range_a: self.range_b,
            range_b: self.range_a,
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# bins={} lo={:?} hi={:?}",
            self.range_a.bins, self.range_a.lo, self.range_a.hi
        );
        if self.range_b != self.range_a {
            let _ = write!(
                s,
                " bins_j={} lo_j={:?} hi_j={:?}",
                self.range_b.bins, self.range_b.lo, self.range_b.hi
            );
        }
        s.push('\n');
        for row in self.counts.chunks(self.range_b.bins) {
            let line: Vec<String> = row.iter().map(|c| format!("{c:?}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Density1D {
    range: IntensityRange,
    values: Vec<f64>,
}

impl Density1D {
    pub fn range(&self) -> &IntensityRange {
        &self.range
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Σ p · Δi`, one for a valid density.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.range.bin_width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Density2D {
    range_a: IntensityRange,
    range_b: IntensityRange,
    values: Vec<f64>,
}

impl Density2D {
    /// Builds a density from per-unit-area values, checking normalization.
    pub fn new(range_a: IntensityRange, range_b: IntensityRange, values: Vec<f64>) -> Result<Self> {
        if values.len() != range_a.bins * range_b.bins {
            return Err(FlorError::LengthMismatch(range_a.bins * range_b.bins, values.len()));
        }
        let d = Self {
            range_a,
            range_b,
            values,
        };
        if d.values.iter().any(|p| !(*p >= 0.0)) || (d.integral() - 1.0).abs() > 1e-9 {
            return Err(FlorError::invalid("density must be nonnegative and integrate to one"));
        }
        Ok(d)
    }

    pub fn range_a(&self) -> &IntensityRange {
        &self.range_a
    }

    pub fn range_b(&self) -> &IntensityRange {
        &self.range_b
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.range_b.bins + j]
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.range_a.bin_width() * self.range_b.bin_width()
    }

    /// Per-bin probabilities `p · Δi · Δj`.
    pub fn bin_masses(&self) -> Vec<f64> {
        let area = self.range_a.bin_width() * self.range_b.bin_width();
        self.values.iter().map(|p| p * area).collect()
    }

    /// Integrates out one axis with bin-width quadrature.
    pub fn marginal(&self, axis: Axis) -> Density1D {
        let (na, nb) = (self.range_a.bins, self.range_b.bins);
        match axis {
            Axis::First => {
                let w = self.range_b.bin_width();
                Density1D {
                    range: self.range_a,
                    values: (0..na)
                        .map(|i| (0..nb).map(|j| self.get(i, j)).sum::<f64>() * w)
                        .collect(),
                }
            }
            Axis::Second => {
                let w = self.range_a.bin_width();
                Density1D {
                    range: self.range_b,
                    values: (0..nb)
                        .map(|j| (0..na).map(|i| self.get(i, j)).sum::<f64>() * w)
                        .collect(),
                }
            }
        }
    }
}

/// Which axis of a joint histogram is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    First,
    Second,
}

fn check_finite(field: &[f64]) -> Result<()> {
    match field.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(FlorError::NonFinite(i)),
        None => Ok(()),
    }
}

fn merge(mut acc: Vec<f64>, part: Vec<f64>) -> Vec<f64> {
    acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
    acc
}

/// `h(i) = Σ_x P_β(I(x) - i)`.
pub fn global_histogram(field: &[f64], parzen: &ParzenWindow, range: &IntensityRange) -> Result<Histogram1D> {
    check_finite(field)?;
    let partials: Vec<Vec<f64>> = field
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut counts = vec![0.0; range.bins];
            let mut w = Vec::new();
            for &v in chunk {
                parzen.deposit(v, range, &mut w);
                for &(b, wb) in &w {
                    counts[b] += wb;
                }
            }
            counts
        })
        .collect();
    let counts = partials.into_iter().fold(vec![0.0; range.bins], merge);
    Histogram1D::from_counts(*range, counts)
}

/// Histogram at `x` weighted by a Gaussian integration window truncated at 4α.
pub fn local_histogram(
    field: &[f64],
    dims: [usize; 3],
    parzen: &ParzenWindow,
    integration: &IntegrationWindow,
    range: &IntensityRange,
    x: &Vec3,
) -> Result<Histogram1D> {
    let alpha = match *integration {
        IntegrationWindow::Gaussian { alpha } if alpha > 0.0 => alpha,
        IntegrationWindow::Gaussian { alpha } => {
            return Err(FlorError::invalid(format!(
                "integration alpha must be > 0, got {alpha}"
            )))
        }
        IntegrationWindow::Global => {
            return Err(FlorError::invalid(
                "local_histogram needs a gaussian integration window",
            ))
        }
    };
    if field.len() != dims.iter().product::<usize>() {
        return Err(FlorError::LengthMismatch(dims.iter().product(), field.len()));
    }
    check_finite(field)?;
    let reach = GAUSS_SUPPORT * alpha;
    let axis_range = |k: usize| {
        let lo = (x[k] - reach).ceil().max(0.0) as usize;
        let hi = (x[k] + reach).floor().min(dims[k] as f64 - 1.0);
        (lo, hi)
    };
    let mut counts = vec![0.0; range.bins];
    let mut w = Vec::new();
    let (zl, zh) = axis_range(2);
    let (yl, yh) = axis_range(1);
    let (xl, xh) = axis_range(0);
    if zh < 0.0 || yh < 0.0 || xh < 0.0 {
        return Histogram1D::from_counts(*range, counts);
    }
    for z in zl..=zh as usize {
        for y in yl..=yh as usize {
            for xx in xl..=xh as usize {
                let d2 = (xx as f64 - x[0]).powi(2) + (y as f64 - x[1]).powi(2) + (z as f64 - x[2]).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                let weight = (-d2 / (2.0 * alpha * alpha)).exp();
                parzen.deposit(field[xx + dims[0] * (y + dims[1] * z)], range, &mut w);
                for &(b, wb) in &w {
                    counts[b] += weight * wb;
                }
            }
        }
    }
    Histogram1D::from_counts(*range, counts)
}

fn joint_counts(a: &[f64], b: &[f64], parzen: &ParzenWindow, ra: &IntensityRange, rb: &IntensityRange) -> Vec<f64> {
    let nb = rb.bins;
    let partials: Vec<Vec<f64>> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| {
            let mut counts = vec![0.0; ra.bins * nb];
            let (mut wa, mut wb) = (Vec::new(), Vec::new());
            for (&va, &vb) in ca.iter().zip(cb) {
                parzen.deposit(va, ra, &mut wa);
                parzen.deposit(vb, rb, &mut wb);
                for &(i, wi) in &wa {
                    let row = &mut counts[i * nb..(i + 1) * nb];
                    for &(j, wj) in &wb {
                        row[j] += wi * wj;
                    }
                }
            }
            counts
        })
        .collect();
    partials.into_iter().fold(vec![0.0; ra.bins * nb], merge)
}

/// `h(i, j) = Σ_x P_β(A(x) - i) P_β(B(x) - j)`.
pub fn joint_global_histogram(
    a: &[f64],
    b: &[f64],
    parzen: &ParzenWindow,
    range_a: &IntensityRange,
    range_b: &IntensityRange,
) -> Result<Histogram2D> {
    if a.len() != b.len() {
        return Err(FlorError::LengthMismatch(a.len(), b.len()));
    }
    check_finite(a)?;
    check_finite(b)?;
    Histogram2D::from_counts(*range_a, *range_b, joint_counts(a, b, parzen, range_a, range_b))
}

/// Joint histogram of two lifted images, pooled over directions.
pub fn joint_lifted_histogram(
    grad_a: &GradientField,
    grad_b: &GradientField,
    dirs: &DirectionSet,
    parzen: &ParzenWindow,
    range_a: &IntensityRange,
    range_b: &IntensityRange,
) -> Result<Histogram2D> {
    if grad_a.dims() != grad_b.dims() {
        return Err(FlorError::DimensionMismatch(grad_a.dims(), grad_b.dims()));
    }
    let mut counts = vec![0.0; range_a.bins * range_b.bins];
    for v in dirs.directions() {
        let la = lift(grad_a, v)?;
        let lb = lift(grad_b, v)?;
        counts = merge(counts, joint_counts(&la, &lb, parzen, range_a, range_b));
    }
    Histogram2D::from_counts(*range_a, *range_b, counts)
}

pub fn normalize(hist: &Histogram1D) -> Result<Density1D> {
    let total = hist.total();
    if !(total > 0.0) {
        return Err(FlorError::ZeroMass);
    }
    let scale = 1.0 / (total * hist.range.bin_width());
    Ok(Density1D {
        range: hist.range,
        values: hist.counts.iter().map(|c| c * scale).collect(),
    })
}

pub fn normalize_joint(hist: &Histogram2D) -> Result<Density2D> {
    let total = hist.total();
    if !(total > 0.0) {
        return Err(FlorError::ZeroMass);
    }
    let scale = 1.0 / (total * hist.range_a.bin_width() * hist.range_b.bin_width());
    Ok(Density2D {
        range_a: hist.range_a,
        range_b: hist.range_b,
        values: hist.counts.iter().map(|c| c * scale).collect(),
    })
}

/// Sums out one axis. Counts are masses, so no bin-width factor enters.
pub fn marginalize(joint: &Histogram2D, axis: Axis) -> Histogram1D {
    let (na, nb) = (joint.range_a.bins, joint.range_b.bins);
    match axis {
        Axis::First => Histogram1D {
            range: joint.range_a,
            counts: (0..na).map(|i| (0..nb).map(|j| joint.get(i, j)).sum()).collect(),
        },
        Axis::Second => Histogram1D {
            range: joint.range_b,
            counts: (0..nb).map(|j| (0..na).map(|i| joint.get(i, j)).sum()).collect(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalespace::gradient_field;
    use crate::volume::VolumeGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_values(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..3.0)).collect()
    }

    fn setup(values: &[&[f64]], bins: usize, beta_bins: f64) -> (ParzenWindow, IntensityRange) {
        let r = IntensityRange::covering_all(values, bins, beta_bins).unwrap();
        (ParzenWindow::gaussian(beta_bins * r.bin_width()).unwrap(), r)
    }

    #[test]
    fn windows_integrate_to_one() {
        for kind in [ParzenKind::Gaussian, ParzenKind::BSpline3] {
            let p = ParzenWindow::new(kind, 0.37).unwrap();
            let h = 1e-4;
            let n = (10.0 * 0.37 / h) as i64;
            let integral: f64 = (-n..=n).map(|k| p.density(k as f64 * h) * h).sum();
            assert!((integral - 1.0).abs() < 1e-9, "{kind:?}: {integral}");
            assert!(p.density(0.1) == p.density(-0.1) && p.density(0.9) >= 0.0);
        }
        assert!(ParzenWindow::gaussian(0.0).is_err());
    }

    #[test]
    fn range_validation() {
        assert!(IntensityRange::new(1.0, 1.0, 8).is_err());
        assert!(IntensityRange::new(0.0, 1.0, 1).is_err());
        let r = IntensityRange::covering(0.0, 1.0, 64, 1.0).unwrap();
        assert!((r.lo() + 4.0 * r.bin_width()).abs() < 1e-12);
        assert!((r.hi() - 1.0 - 4.0 * r.bin_width()).abs() < 1e-12);
    }

    #[test]
    fn constant_image_single_peak() {
        let field = vec![0.35; 1000];
        let r = IntensityRange::new(0.0, 1.0, 10).unwrap();
        let p = ParzenWindow::gaussian(1e-4).unwrap();
        let h = global_histogram(&field, &p, &r).unwrap();
        assert_eq!(h.counts()[3], 1000.0);
        assert_eq!(h.total(), 1000.0);
    }

    #[test]
    fn mass_conservation() {
        let f = random_values(4096, 1);
        let (p, r) = setup(&[&f], 64, 1.0);
        let h = global_histogram(&f, &p, &r).unwrap();
        assert!((h.total() - 4096.0).abs() / 4096.0 < 1e-6);
    }

    #[test]
    fn two_value_image_bin_masses() {
        let n = 1000;
        let f: Vec<f64> = (0..n).map(|i| if i < 600 { 0.0 } else { 1.0 }).collect();
        let (p, r) = setup(&[&f], 256, 1.0);
        let h = global_histogram(&f, &p, &r).unwrap();
        let low: f64 = (0..r.bins())
            .filter(|&b| r.center(b) < 0.5)
            .map(|b| h.counts()[b])
            .sum();
        let high: f64 = (0..r.bins())
            .filter(|&b| r.center(b) >= 0.5)
            .map(|b| h.counts()[b])
            .sum();
        assert!((low - 600.0).abs() < 1e-6 * n as f64);
        assert!((high - 400.0).abs() < 1e-6 * n as f64);
    }

    #[test]
    fn out_of_range_values_keep_unit_mass() {
        let r = IntensityRange::new(0.0, 1.0, 4).unwrap();
        let p = ParzenWindow::gaussian(0.01).unwrap();
        let h = global_histogram(&[-5.0, 9.0], &p, &r).unwrap();
        assert_eq!(h.counts(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(global_histogram(&[f64::NAN], &p, &r).is_err());
    }

    #[test]
    fn local_histogram_brute_force() {
        // Oracle: double loop over every voxel and every bin with the
        // truncated Gaussian evaluated independently.
        let dims = [8, 8, 8];
        let f = random_values(512, 2);
        let (p, r) = setup(&[&f], 16, 1.0);
        let x = [3.2, 4.0, 5.5];
        let alpha = 2.0;
        let got = local_histogram(&f, dims, &p, &IntegrationWindow::Gaussian { alpha }, &r, &x).unwrap();
        let beta = p.beta();
        let mut want = vec![0.0; r.bins()];
        for z in 0..8 {
            for y in 0..8 {
                for xx in 0..8 {
                    let d2 = (xx as f64 - x[0]).powi(2) + (y as f64 - x[1]).powi(2) + (z as f64 - x[2]).powi(2);
                    if d2.sqrt() > 4.0 * alpha {
                        continue;
                    }
                    let wa = (-d2 / (2.0 * alpha * alpha)).exp();
                    let v = f[xx + 8 * (y + 8 * z)];
                    let raw: Vec<f64> = (0..r.bins())
                        .map(|b| {
                            let t = r.center(b) - v;
                            if t.abs() <= 4.0 * beta {
                                (-t * t / (2.0 * beta * beta)).exp()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let s: f64 = raw.iter().sum();
                    for b in 0..r.bins() {
                        want[b] += wa * raw[b] / s;
                    }
                }
            }
        }
        for (b, (g, w)) in got.counts().iter().zip(&want).enumerate() {
            assert!((g - w).abs() < 1e-12, "bin {b}");
        }
    }

    #[test]
    fn local_histogram_large_alpha_is_global() {
        let dims = [16, 16, 16];
        let f = random_values(4096, 3);
        let (p, r) = setup(&[&f], 32, 1.0);
        let g = global_histogram(&f, &p, &r).unwrap();
        let l = local_histogram(
            &f,
            dims,
            &p,
            &IntegrationWindow::Gaussian { alpha: 1000.0 },
            &r,
            &[7.5; 3],
        )
        .unwrap();
        let k = l.total() / g.total();
        for (a, b) in l.counts().iter().zip(g.counts()) {
            assert!((a - k * b).abs() <= 1e-3 * b.max(1e-9));
        }
        assert!(local_histogram(&f, dims, &p, &IntegrationWindow::Global, &r, &[0.0; 3]).is_err());
    }

    #[test]
    fn local_histogram_on_constant_patch() {
        let dims = [20, 20, 20];
        let f: Vec<f64> = (0..8000).map(|i| if i % 20 < 10 { 1.0 } else { 5.0 }).collect();
        let (p, r) = setup(&[&f], 32, 0.5);
        let l = local_histogram(
            &f,
            dims,
            &p,
            &IntegrationWindow::Gaussian { alpha: 0.5 },
            &r,
            &[3.0, 10.0, 10.0],
        )
        .unwrap();
        let near: f64 = (0..r.bins())
            .filter(|&b| (r.center(b) - 1.0).abs() < 0.5)
            .map(|b| l.counts()[b])
            .sum();
        assert!((near - l.total()).abs() < 1e-12 * l.total());
    }

    #[test]
    fn joint_brute_force_and_diagonal() {
        let a = random_values(512, 4);
        let b = random_values(512, 5);
        let (p, r) = setup(&[&a, &b], 24, 1.0);
        let h = joint_global_histogram(&a, &b, &p, &r, &r).unwrap();
        let beta = p.beta();
        let weights = |v: f64| {
            let raw: Vec<f64> = (0..r.bins())
                .map(|k| {
                    let t = r.center(k) - v;
                    if t.abs() <= 4.0 * beta {
                        (-t * t / (2.0 * beta * beta)).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / s).collect::<Vec<_>>()
        };
        let mut want = vec![0.0; r.bins() * r.bins()];
        for (va, vb) in a.iter().zip(&b) {
            let (wa, wb) = (weights(*va), weights(*vb));
            for i in 0..r.bins() {
                for j in 0..r.bins() {
                    want[i * r.bins() + j] += wa[i] * wb[j];
                }
            }
        }
        for (g, w) in h.counts().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let d = joint_global_histogram(&a, &a, &p, &r, &r).unwrap();
        let off: f64 = (0..r.bins())
            .flat_map(|i| (0..r.bins()).map(move |j| (i, j)))
            .filter(|(i, j)| i.abs_diff(*j) > 8)
            .map(|(i, j)| d.get(i, j))
            .sum();
        assert_eq!(off, 0.0);
        assert!(joint_global_histogram(&a, &b[..10], &p, &r, &r).is_err());
    }

    #[test]
    fn joint_of_constants_is_a_delta() {
        let r = IntensityRange::new(0.0, 10.0, 10).unwrap();
        let p = ParzenWindow::gaussian(0.01).unwrap();
        let h = joint_global_histogram(&[2.5; 50], &[7.5; 50], &p, &r, &r).unwrap();
        assert_eq!(h.get(2, 7), 50.0);
        let m = marginalize(&h, Axis::First);
        assert_eq!(m.counts()[2], 50.0);
        assert_eq!(m.total(), 50.0);
    }

    fn lifted_pair() -> (GradientField, GradientField) {
        let dims = [8, 8, 8];
        let a = VolumeGrid::from_values(dims, random_values(512, 6)).unwrap();
        let b = VolumeGrid::from_values(dims, random_values(512, 7)).unwrap();
        (gradient_field(&a, 1.0).unwrap(), gradient_field(&b, 1.0).unwrap())
    }

    #[test]
    fn lifted_joint_single_direction_and_mass() {
        let (ga, gb) = lifted_pair();
        let dirs = DirectionSet::neighbours_26();
        let r = lifted_range(&[&ga, &gb], &dirs, 32, 1.0).unwrap();
        let p = ParzenWindow::gaussian(r.bin_width()).unwrap();
        let h = joint_lifted_histogram(&ga, &gb, &dirs, &p, &r, &r).unwrap();
        assert!((h.total() - 512.0 * 26.0).abs() < 1e-6 * h.total());

        let v = [0.0, 0.6, 0.8];
        let one = DirectionSet::single(v).unwrap();
        let hl = joint_lifted_histogram(&ga, &gb, &one, &p, &r, &r).unwrap();
        let hd = joint_global_histogram(&lift(&ga, &v).unwrap(), &lift(&gb, &v).unwrap(), &p, &r, &r).unwrap();
        assert_eq!(hl, hd);
    }

    #[test]
    fn lifted_joint_reflection_symmetry() {
        let (ga, gb) = lifted_pair();
        let dirs = DirectionSet::neighbours_26();
        let r = lifted_range(&[&ga, &gb], &dirs, 32, 1.0).unwrap();
        // Symmetric range so that reflection maps bins onto bins.
        let m = r.lo().abs().max(r.hi().abs());
        let r = IntensityRange::new(-m, m, 32).unwrap();
        let p = ParzenWindow::gaussian(r.bin_width()).unwrap();
        let h = joint_lifted_histogram(&ga, &gb, &dirs, &p, &r, &r).unwrap();
        let n = r.bins();
        for i in 0..n {
            for j in 0..n {
                assert!((h.get(i, j) - h.get(n - 1 - i, n - 1 - j)).abs() < 1e-9);
            }
        }
        let same = joint_lifted_histogram(&ga, &ga, &dirs, &p, &r, &r).unwrap();
        let diag: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i.abs_diff(*j) <= 8)
            .map(|(i, j)| same.get(i, j))
            .sum();
        assert!((diag - same.total()).abs() < 1e-6 * same.total());
    }

    #[test]
    fn normalization() {
        let f = random_values(777, 8);
        let (p, r) = setup(&[&f], 50, 1.0);
        let h = global_histogram(&f, &p, &r).unwrap();
        let d = normalize(&h).unwrap();
        assert!((d.integral() - 1.0).abs() < 1e-9);
        let scaled = Histogram1D::from_counts(r, h.counts().iter().map(|c| c * 7.0).collect()).unwrap();
        let d7 = normalize(&scaled).unwrap();
        for (a, b) in d.values().iter().zip(d7.values()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
        let uniform = Histogram1D::from_counts(IntensityRange::new(-1.0, 3.0, 8).unwrap(), vec![2.0; 8]).unwrap();
        assert!(normalize(&uniform)
            .unwrap()
            .values()
            .iter()
            .all(|p| (p - 0.25).abs() < 1e-15));
        let zero = Histogram1D::from_counts(r, vec![0.0; 50]).unwrap();
        assert!(matches!(normalize(&zero), Err(FlorError::ZeroMass)));

        let j = joint_global_histogram(&f, &f, &p, &r, &r).unwrap();
        assert!((normalize_joint(&j).unwrap().integral() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn marginal_consistency() {
        let a = random_values(3000, 9);
        let b = random_values(3000, 10);
        let (p, r) = setup(&[&a, &b], 64, 1.0);
        let j = joint_global_histogram(&a, &b, &p, &r, &r).unwrap();
        let ma = marginalize(&j, Axis::First);
        let mb = marginalize(&j, Axis::Second);
        assert!((ma.total() - j.total()).abs() < 1e-12 * j.total());
        let ga = global_histogram(&a, &p, &r).unwrap();
        let gb = global_histogram(&b, &p, &r).unwrap();
        for k in 0..r.bins() {
            assert!((ma.counts()[k] - ga.counts()[k]).abs() < 1e-6 * ga.total());
            assert!((mb.counts()[k] - gb.counts()[k]).abs() < 1e-6 * gb.total());
        }
        let jaa = joint_global_histogram(&a, &a, &p, &r, &r).unwrap();
        let m2 = marginalize(&jaa, Axis::Second);
        for k in 0..r.bins() {
            assert!((m2.counts()[k] - ga.counts()[k]).abs() < 1e-6 * ga.total());
        }
        let dens = normalize_joint(&j).unwrap().marginal(Axis::First);
        assert!((dens.integral() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_merge_matches_sequential() {
        let f = random_values(50_000, 11);
        let (p, r) = setup(&[&f], 64, 1.0);
        let par = global_histogram(&f, &p, &r).unwrap();
        let mut seq = vec![0.0; r.bins()];
        let mut w = Vec::new();
        for &v in &f {
            p.deposit(v, &r, &mut w);
            for &(b, wb) in &w {
                seq[b] += wb;
            }
        }
        for (a, b) in par.counts().iter().zip(&seq) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn csv_headers() {
        let r = IntensityRange::new(0.0, 1.0, 2).unwrap();
        let h = Histogram1D::from_counts(r, vec![1.0, 3.0]).unwrap();
        assert_eq!(h.to_csv(), "# bins=2 lo=0.0 hi=1.0\n1.0\n3.0\n");
        let j = Histogram2D::from_counts(r, r, vec![1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(j.to_csv(), "# bins=2 lo=0.0 hi=1.0\n1.0,0.0\n0.5,2.0\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn histograms_are_linear_in_mass(vals in proptest::collection::vec(-5.0f64..5.0, 1..200), k in 1usize..4) {
            let (p, r) = setup(&[&vals], 20, 1.0);
            let h = global_histogram(&vals, &p, &r).unwrap();
            let rep: Vec<f64> = vals.iter().cycle().take(vals.len() * k).cloned().collect();
            let hk = global_histogram(&rep, &p, &r).unwrap();
            for (a, b) in h.counts().iter().zip(hk.counts()) {
                prop_assert!((a * k as f64 - b).abs() < 1e-9 * (1.0 + b));
            }
            prop_assert!((h.total() - vals.len() as f64).abs() < 1e-9 * vals.len() as f64);
        }
    }
}
