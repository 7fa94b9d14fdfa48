//! Similarity measures and the combined zeroth + first order objective.
//!
//! Every objective is a loss: SSD is used as is, NCC / MI / NMI are negated.
//! The first-order term is `Σ_v M(φ.I_σ(·, v), J_σ(·, v))` over the direction
//! set, or a single measure over all (point, direction) pairs when pooled.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlorError, Result};
use crate::loi::{
    joint_global_histogram, marginalize, normalize_joint, Axis, Density2D, Histogram2D, IntensityRange, ParzenKind,
    ParzenWindow,
};
use crate::scalespace::{gradient_field, DirectionSet};
use crate::transform::{
    ActionMode, BSplineVolume, GradientSpline, JacobianMatrix, SplineWeights, Transform, DEGENERATE_EPS,
};
use crate::volume::VolumeGrid;
use crate::{dot, norm, Vec3};

/// Sum of squared differences.
pub fn ssd_direct(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlorError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Centered second moments of a paired sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairMoments {
    pub mean_a: f64,
    pub mean_b: f64,
    pub saa: f64,
    pub sbb: f64,
    pub sab: f64,
}

impl PairMoments {
    pub fn new(n: usize, a: impl Fn(usize) -> f64, b: impl Fn(usize) -> f64) -> Self {
        let (mut ma, mut mb) = (0.0, 0.0);
        for i in 0..n {
            ma += a(i);
            mb += b(i);
        }
        ma /= n as f64;
        mb /= n as f64;
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (da, db) = (a(i) - ma, b(i) - mb);
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        Self {
            mean_a: ma,
            mean_b: mb,
            saa,
            sbb,
            sab,
        }
    }

    /// `None` when either side has zero variance.
    pub fn ncc(&self) -> Option<f64> {
        (self.saa > 0.0 && self.sbb > 0.0).then(|| self.sab / (self.saa * self.sbb).sqrt())
    }

    /// `∂ncc / ∂a_i` given `a_i` and `b_i`; zero for degenerate input.
    #[inline]
    pub fn dncc_da(&self, ai: f64, bi: f64) -> f64 {
        match self.ncc() {
            Some(r) => (bi - self.mean_b) / (self.saa * self.sbb).sqrt() - r * (ai - self.mean_a) / self.saa,
            None => 0.0,
        }
    }
}

/// Pearson correlation; zero variance is an error here.
pub fn ncc_direct(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlorError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(FlorError::ZeroVariance);
    }
    PairMoments::new(a.len(), |i| a[i], |i| b[i])
        .ncc()
        .map(|r| r.clamp(-1.0, 1.0))
        .ok_or(FlorError::ZeroVariance)
}

/// `Σ (i - j)² h(i, j)` over bin centers.
pub fn ssd_from_joint(joint: &Histogram2D) -> f64 {
    let (ra, rb) = (joint.range_a(), joint.range_b());
    let mut s = 0.0;
    for i in 0..ra.bins() {
        let ci = ra.center(i);
        for j in 0..rb.bins() {
            let d = ci - rb.center(j);
            s += d * d * joint.get(i, j);
        }
    }
    s
}

/// NCC with means and norms from the marginals and the inner product from the joint.
pub fn ncc_from_joint(joint: &Histogram2D) -> Result<f64> {
    let mass = joint.total();
    if !(mass > 0.0) {
        return Err(FlorError::ZeroMass);
    }
    let (ra, rb) = (joint.range_a(), joint.range_b());
    let ha = marginalize(joint, Axis::First);
    let hb = marginalize(joint, Axis::Second);
    let mean = |h: &[f64], r: &IntensityRange| (0..r.bins()).map(|k| r.center(k) * h[k]).sum::<f64>() / mass;
    let (ma, mb) = (mean(ha.counts(), ra), mean(hb.counts(), rb));
    let var =
        |h: &[f64], r: &IntensityRange, m: f64| (0..r.bins()).map(|k| (r.center(k) - m).powi(2) * h[k]).sum::<f64>();
    let (va, vb) = (var(ha.counts(), ra, ma), var(hb.counts(), rb, mb));
    if !(va > 0.0 && vb > 0.0) {
        return Err(FlorError::ZeroVariance);
    }
    let mut inner = 0.0;
    for i in 0..ra.bins() {
        let ci = ra.center(i) - ma;
        for j in 0..rb.bins() {
            inner += ci * (rb.center(j) - mb) * joint.get(i, j);
        }
    }
    Ok(inner / (va * vb).sqrt())
}

fn entropy(masses: impl Iterator<Item = f64>) -> f64 {
    masses.filter(|&q| q > 0.0).map(|q| -q * q.ln()).sum()
}

fn marginal_masses(p: &Density2D) -> (Vec<f64>, Vec<f64>) {
    let q = p.bin_masses();
    let (na, nb) = (p.range_a().bins(), p.range_b().bins());
    let qa = (0..na).map(|i| q[i * nb..(i + 1) * nb].iter().sum()).collect();
    let qb = (0..nb).map(|j| (0..na).map(|i| q[i * nb + j]).sum()).collect();
    (qa, qb)
}

/// Mutual information in nats.
pub fn mi_from_density(p: &Density2D) -> f64 {
    let q = p.bin_masses();
    let (qa, qb) = marginal_masses(p);
    let nb = qb.len();
    let mut mi = 0.0;
    for (i, qi) in qa.iter().enumerate() {
        for (j, qj) in qb.iter().enumerate() {
            let qij = q[i * nb + j];
            if qij > 0.0 {
                mi += qij * (qij / (qi * qj)).ln();
            }
        }
    }
    mi
}

/// `(H(A) + H(B)) / H(A, B)`.
pub fn nmi_from_density(p: &Density2D) -> Result<f64> {
    let (qa, qb) = marginal_masses(p);
    let hab = entropy(p.bin_masses().into_iter());
    if !(hab > 0.0) {
        return Err(FlorError::invalid("joint entropy is zero"));
    }
    Ok((entropy(qa.into_iter()) + entropy(qb.into_iter())) / hab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Ssd,
    Ncc,
    Mi,
    Nmi,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Ssd => "ssd",
            Measure::Ncc => "ncc",
            Measure::Mi => "mi",
            Measure::Nmi => "nmi",
        }
    }

    pub fn is_differentiable(self) -> bool {
        matches!(self, Measure::Ssd | Measure::Ncc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Zeroth,
    First,
    Combined,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::Zeroth => "zeroth",
            Order::First => "first",
            Order::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluationMode {
    Direct,
    Histogram,
}

/// How the first-order measure combines directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstOrderReduction {
    /// One measure per direction, summed.
    PerDirection,
    /// One measure over every (point, direction) pair.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramParams {
    pub bins: usize,
    /// Parzen β in units of the bin width.
    pub beta_bins: f64,
    pub parzen: ParzenKind,
    /// Zeroth-order Λ override.
    pub range: Option<(f64, f64)>,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self {
            bins: 64,
            beta_bins: 1.0,
            parzen: ParzenKind::Gaussian,
            range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySpec {
    pub measure: Measure,
    pub order: Order,
    /// Weight of the first-order term in `Combined`.
    pub lambda: f64,
    /// Spatial scale of the gradient fields.
    pub sigma: f64,
    pub directions: DirectionSet,
    pub action: ActionMode,
    pub reduction: FirstOrderReduction,
    pub mode: EvaluationMode,
    pub histogram: HistogramParams,
    /// Evaluate on every `stride`-th voxel along each axis.
    pub stride: usize,
}

impl SimilaritySpec {
    pub fn new(measure: Measure, order: Order) -> Self {
        Self {
            measure,
            order,
            lambda: 1.0 / 26.0,
            sigma: 1.0,
            directions: DirectionSet::neighbours_26(),
            action: ActionMode::Scaled,
            reduction: FirstOrderReduction::PerDirection,
            mode: EvaluationMode::Direct,
            histogram: HistogramParams::default(),
            stride: 2,
        }
    }

    /// Weights of the zeroth and first-order terms.
    pub fn weights(&self) -> (f64, f64) {
        match self.order {
            Order::Zeroth => (1.0, 0.0),
            Order::First => (0.0, 1.0),
            Order::Combined => (1.0, self.lambda),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(FlorError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0) {
            return Err(FlorError::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.stride == 0 {
            return Err(FlorError::invalid("stride must be >= 1"));
        }
        Ok(())
    }

    fn uses_histograms(&self) -> bool {
        self.mode == EvaluationMode::Histogram || !self.measure.is_differentiable()
    }
}

/// Loss terms at one transform. `zeroth` and `first` are unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub zeroth: f64,
    pub first: f64,
}

/// Moving-image quantities at `φ(x)` for one evaluation point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PointSample {
    pub value: f64,
    pub dvalue: Vec3,
    pub grad: Vec3,
    pub dgrad: [[f64; 3]; 3],
    pub jac: JacobianMatrix,
}

impl PointSample {
    /// `(φ.I_σ)(x, v)`.
    #[inline]
    pub fn lifted(&self, v: &Vec3, action: ActionMode) -> f64 {
        let w = self.jac.apply(v);
        match action {
            ActionMode::Scaled => dot(&self.grad, &w),
            ActionMode::Unscaled => {
                let n = norm(&w);
                if n > DEGENERATE_EPS {
                    dot(&self.grad, &w) / n
                } else {
                    0.0
                }
            }
        }
    }
}

/// A fixed/moving pair prepared for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: SimilaritySpec,
    dims: [usize; 3],
    points: Vec<Vec3>,
    fixed_values: Vec<f64>,
    /// Point-major, `points × directions`.
    fixed_lifted: Vec<f64>,
    moving: BSplineVolume,
    moving_grad: GradientSpline,
    range0: IntensityRange,
    range1: IntensityRange,
}

impl Objective {
    pub fn new(fixed: &VolumeGrid, moving: &VolumeGrid, spec: &SimilaritySpec) -> Result<Self> {
        spec.validate()?;
        if fixed.dims() != moving.dims() {
            return Err(FlorError::DimensionMismatch(fixed.dims(), moving.dims()));
        }
        let dims = fixed.dims();
        let s = spec.stride;
        let mut points = Vec::new();
        let mut idx = Vec::new();
        for z in (0..dims[2]).step_by(s) {
            for y in (0..dims[1]).step_by(s) {
                for x in (0..dims[0]).step_by(s) {
                    points.push([x as f64, y as f64, z as f64]);
                    idx.push(fixed.index(x, y, z));
                }
            }
        }
        let fixed_field = gradient_field(fixed, spec.sigma)?;
        let moving_field = gradient_field(moving, spec.sigma)?;
        let dirs = spec.directions.directions();
        let fixed_values: Vec<f64> = idx.iter().map(|&i| fixed.values()[i]).collect();
        let fixed_lifted: Vec<f64> = idx
            .iter()
            .flat_map(|&i| {
                let g = fixed_field.data()[i];
                dirs.iter().map(move |v| dot(&g, v))
            })
            .collect();

        let hp = &spec.histogram;
        let range0 = match hp.range {
            Some((lo, hi)) => IntensityRange::new(lo, hi, hp.bins)?,
            None => IntensityRange::covering_all(&[fixed.values(), moving.values()], hp.bins, hp.beta_bins)?,
        };
        let moving_lifted: Vec<f64> = moving_field
            .data()
            .iter()
            .flat_map(|g| dirs.iter().map(move |v| dot(g, v)))
            .collect();
        let range1 = IntensityRange::covering_all(&[&fixed_lifted, &moving_lifted], hp.bins, hp.beta_bins)?;

        Ok(Self {
            spec: spec.clone(),
            dims,
            points,
            fixed_values,
            fixed_lifted,
            moving: BSplineVolume::from_grid(moving),
            moving_grad: GradientSpline::new(&moving_field),
            range0,
            range1,
        })
    }

    pub fn spec(&self) -> &SimilaritySpec {
        &self.spec
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub(crate) fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub(crate) fn fixed_values(&self) -> &[f64] {
        &self.fixed_values
    }

    pub(crate) fn fixed_lifted(&self) -> &[f64] {
        &self.fixed_lifted
    }

    pub(crate) fn samples(&self, transform: &Transform) -> Vec<PointSample> {
        self.points
            .par_iter()
            .map(|x| {
                let (p, jac) = transform.apply_with_jacobian(x);
                let w = SplineWeights::at(&p);
                let (value, dvalue) = self.moving.eval_with(&w);
                let (grad, dgrad) = self.moving_grad.eval_with(&w);
                PointSample {
                    value,
                    dvalue,
                    grad,
                    dgrad,
                    jac,
                }
            })
            .collect()
    }

    /// Moving lifted values, point-major.
    pub(crate) fn moving_lifted(&self, samples: &[PointSample]) -> Vec<f64> {
        let dirs = self.spec.directions.directions();
        let action = self.spec.action;
        samples
            .iter()
            .flat_map(|s| dirs.iter().map(move |v| s.lifted(v, action)))
            .collect()
    }

    fn parzen(&self, range: &IntensityRange) -> Result<ParzenWindow> {
        ParzenWindow::new(
            self.spec.histogram.parzen,
            self.spec.histogram.beta_bins * range.bin_width(),
        )
    }

    fn histogram_loss(&self, a: &[f64], b: &[f64], range: &IntensityRange) -> Result<f64> {
        let joint = joint_global_histogram(a, b, &self.parzen(range)?, range, range)?;
        Ok(match self.spec.measure {
            Measure::Ssd => ssd_from_joint(&joint),
            Measure::Ncc => -ncc_from_joint(&joint).unwrap_or(0.0),
            Measure::Mi => -mi_from_density(&normalize_joint(&joint)?),
            Measure::Nmi => -nmi_from_density(&normalize_joint(&joint)?)?,
        })
    }

    fn direct_loss(&self, n: usize, a: impl Fn(usize) -> f64, b: impl Fn(usize) -> f64) -> f64 {
        match self.spec.measure {
            Measure::Ssd => (0..n).map(|i| (a(i) - b(i)).powi(2)).sum(),
            _ => -PairMoments::new(n, a, b).ncc().unwrap_or(0.0),
        }
    }

    pub(crate) fn zeroth_loss(&self, samples: &[PointSample]) -> Result<f64> {
        let fv = &self.fixed_values;
        if self.spec.uses_histograms() {
            let mv: Vec<f64> = samples.iter().map(|s| s.value).collect();
            self.histogram_loss(&mv, fv, &self.range0)
        } else {
            Ok(self.direct_loss(samples.len(), |i| samples[i].value, |i| fv[i]))
        }
    }

    pub(crate) fn first_loss(&self, moving_lifted: &[f64]) -> Result<f64> {
        let fl = &self.fixed_lifted;
        let nd = self.spec.directions.len();
        let np = fl.len() / nd;
        match (self.spec.reduction, self.spec.uses_histograms()) {
            (FirstOrderReduction::Pooled, false) => Ok(self.direct_loss(fl.len(), |i| moving_lifted[i], |i| fl[i])),
            (FirstOrderReduction::Pooled, true) => self.histogram_loss(moving_lifted, fl, &self.range1),
            (FirstOrderReduction::PerDirection, false) => Ok((0..nd)
                .map(|d| self.direct_loss(np, |i| moving_lifted[i * nd + d], |i| fl[i * nd + d]))
                .sum()),
            (FirstOrderReduction::PerDirection, true) => {
                let mut total = 0.0;
                for d in 0..nd {
                    let a: Vec<f64> = (0..np).map(|i| moving_lifted[i * nd + d]).collect();
                    let b: Vec<f64> = (0..np).map(|i| fl[i * nd + d]).collect();
                    total += self.histogram_loss(&a, &b, &self.range1)?;
                }
                Ok(total)
            }
        }
    }

    /// Both terms and the weighted total at `transform`.
    pub fn evaluate(&self, transform: &Transform) -> Result<ObjectiveValue> {
        let samples = self.samples(transform);
        let zeroth = self.zeroth_loss(&samples)?;
        let first = self.first_loss(&self.moving_lifted(&samples))?;
        let (w0, w1) = self.spec.weights();
        Ok(ObjectiveValue {
            total: w0 * zeroth + w1 * first,
            zeroth,
            first,
        })
    }
}

/// `M(I∘φ, J) + λ 𝐌(φ.I_σ, J_σ)` as a loss.
pub fn combined_objective(
    fixed: &VolumeGrid,
    moving: &VolumeGrid,
    transform: &Transform,
    spec: &SimilaritySpec,
) -> Result<f64> {
    Ok(Objective::new(fixed, moving, spec)?.evaluate(transform)?.total)
}

/// Objective values over in-plane translations, one row per y offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub offsets_x: Vec<f64>,
    pub offsets_y: Vec<f64>,
    pub measure: Measure,
    pub order: Order,
    pub values: Vec<f64>,
}

impl LandscapeGrid {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.offsets_x.len() + ix]
    }

    pub fn row(&self, iy: usize) -> &[f64] {
        let n = self.offsets_x.len();
        &self.values[iy * n..(iy + 1) * n]
    }

    pub fn column(&self, ix: usize) -> Vec<f64> {
        (0..self.offsets_y.len()).map(|iy| self.get(ix, iy)).collect()
    }

    pub fn to_csv(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|o| format!("{o:?}")).collect::<Vec<_>>().join(",");
        let mut s = format!(
            "# tx_offsets={} ty_offsets={} measure={} order={}\n",
            list(&self.offsets_x),
            list(&self.offsets_y),
            self.measure.name(),
            self.order.name()
        );
        for iy in 0..self.offsets_y.len() {
            let _ = writeln!(s, "{}", list(self.row(iy)));
        }
        s
    }
}

pub fn landscape(
    fixed: &VolumeGrid,
    moving: &VolumeGrid,
    spec: &SimilaritySpec,
    offsets_x: &[f64],
    offsets_y: &[f64],
) -> Result<LandscapeGrid> {
    if offsets_x.is_empty() || offsets_y.is_empty() {
        return Err(FlorError::invalid("landscape needs nonempty offset lists"));
    }
    let objective = Objective::new(fixed, moving, spec)?;
    let values = offsets_y
        .iter()
        .flat_map(|&ty| offsets_x.iter().map(move |&tx| [tx, ty, 0.0]))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|t| objective.evaluate(&Transform::translation(t)).map(|v| v.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        offsets_x: offsets_x.to_vec(),
        offsets_y: offsets_y.to_vec(),
        measure: spec.measure,
        order: spec.order,
        values,
    })
}
