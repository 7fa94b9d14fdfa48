//! Deformation models, their Jacobians, and the action of a deformation on
//! scalar and lifted images.

pub mod spline;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlorError, Result};
use crate::scalespace::check_unit;
use crate::volume::VolumeGrid;
use crate::{dot, norm, Vec3};

pub use spline::{BSplineVolume, GradientSpline, SplineWeights};

/// Below this `|J v|` a transported direction is considered degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianMatrix(pub [[f64; 3]; 3]);

impl JacobianMatrix {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub t: Vec3,
}

/// Cubic B-spline free-form deformation `φ(x) = x + Σ_p B_p(x) d_p`.
///
/// Control point `k` along an axis sits at `(k - 1) · knot_spacing`, so the
/// lattice extends one knot beyond the domain `[0, n - 1]` on the low side
/// and at least two on the high side. Outside the domain `φ` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineFfd {
    knot_spacing: f64,
    domain: [usize; 3],
    lattice: [usize; 3],
    displacements: Vec<Vec3>,
}

/// The 4×4×4 control points influencing one location.
#[derive(Debug, Clone, Copy)]
pub struct FfdSupport {
    first: [usize; 3],
    w: [[f64; 4]; 3],
    dw: [[f64; 4]; 3],
}

impl FfdSupport {
    /// Calls `f(control index, weight, weight gradient)` for each of the 64 taps.
    #[inline]
    pub fn for_each(&self, lattice: [usize; 3], mut f: impl FnMut(usize, f64, Vec3)) {
        for c in 0..4 {
            let z = self.first[2] + c;
            for b in 0..4 {
                let y = self.first[1] + b;
                let wyz = self.w[1][b] * self.w[2][c];
                let row = lattice[0] * (y + lattice[1] * z);
                for a in 0..4 {
                    let x = self.first[0] + a;
                    let grad = [
                        self.dw[0][a] * wyz,
                        self.w[0][a] * self.dw[1][b] * self.w[2][c],
                        self.w[0][a] * self.w[1][b] * self.dw[2][c],
                    ];
                    f(row + x, self.w[0][a] * wyz, grad);
                }
            }
        }
    }
}

impl BSplineFfd {
    /// Zero-displacement FFD over a `domain`-sized volume.
    pub fn identity(domain: [usize; 3], knot_spacing: f64) -> Result<Self> {
        if !(knot_spacing > 0.0) || !knot_spacing.is_finite() {
            return Err(FlorError::invalid(format!(
                "knot spacing must be > 0, got {knot_spacing}"
            )));
        }
        if domain.contains(&0) {
            return Err(FlorError::invalid("FFD domain must be nonempty"));
        }
        let lattice = domain.map(|n| ((n - 1) as f64 / knot_spacing).floor() as usize + 4);
        Ok(Self {
            knot_spacing,
            domain,
            lattice,
            displacements: vec![[0.0; 3]; lattice.iter().product()],
        })
    }

    /// Sets every control displacement to `f(control position)`.
    ///
    /// Affine `f` is reproduced exactly inside the domain.
    pub fn from_fn(domain: [usize; 3], knot_spacing: f64, mut f: impl FnMut(Vec3) -> Vec3) -> Result<Self> {
        let mut ffd = Self::identity(domain, knot_spacing)?;
        let [lx, ly, _] = ffd.lattice;
        for (i, d) in ffd.displacements.iter_mut().enumerate() {
            let idx = [i % lx, (i / lx) % ly, i / (lx * ly)];
            *d = f(idx.map(|k| (k as f64 - 1.0) * knot_spacing));
        }
        ffd.check_finite()?;
        Ok(ffd)
    }

    pub fn with_displacements(&self, displacements: Vec<Vec3>) -> Result<Self> {
        if displacements.len() != self.displacements.len() {
            return Err(FlorError::LengthMismatch(self.displacements.len(), displacements.len()));
        }
        let out = Self {
            displacements,
            ..self.clone()
        };
        out.check_finite()?;
        Ok(out)
    }

    fn check_finite(&self) -> Result<()> {
        match self.displacements.iter().position(|d| d.iter().any(|c| !c.is_finite())) {
            Some(i) => Err(FlorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn knot_spacing(&self) -> f64 {
        self.knot_spacing
    }

    pub fn domain(&self) -> [usize; 3] {
        self.domain
    }

    pub fn lattice(&self) -> [usize; 3] {
        self.lattice
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacements
    }

    pub fn max_abs_displacement(&self) -> f64 {
        self.displacements
            .iter()
            .flat_map(|d| d.iter())
            .fold(0.0f64, |m, c| m.max(c.abs()))
    }

    fn inside(&self, x: &Vec3) -> bool {
        (0..3).all(|k| x[k] >= 0.0 && x[k] <= (self.domain[k] - 1) as f64)
    }

    /// Taps influencing `x`, or `None` outside the domain.
    #[inline]
    pub fn support(&self, x: &Vec3) -> Option<FfdSupport> {
        if !self.inside(x) {
            return None;
        }
        let mut first = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        let mut dw = [[0.0; 4]; 3];
        for k in 0..3 {
            let u = x[k] / self.knot_spacing;
            let base = (u.floor() as usize).min(self.lattice[k] - 4);
            first[k] = base;
            let (a, b) = spline::cubic_weights(u - base as f64);
            w[k] = a;
            dw[k] = b.map(|d| d / self.knot_spacing);
        }
        Some(FfdSupport { first, w, dw })
    }

    /// `φ(x)` and `J_x φ` in one pass.
    #[inline]
    pub fn apply_with_jacobian(&self, x: &Vec3) -> (Vec3, JacobianMatrix) {
        let Some(s) = self.support(x) else {
            return (*x, JacobianMatrix::IDENTITY);
        };
        let mut p = *x;
        let mut j = JacobianMatrix::IDENTITY.0;
        s.for_each(self.lattice, |idx, b, db| {
            let d = &self.displacements[idx];
            for c in 0..3 {
                p[c] += b * d[c];
                for k in 0..3 {
                    j[c][k] += d[c] * db[k];
                }
            }
        });
        (p, JacobianMatrix(j))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Translation(Translation),
    BSpline(BSplineFfd),
}

impl Transform {
    pub fn translation(t: Vec3) -> Self {
        Transform::Translation(Translation { t })
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        match self {
            Transform::Translation(tr) => [x[0] + tr.t[0], x[1] + tr.t[1], x[2] + tr.t[2]],
            Transform::BSpline(ffd) => ffd.apply_with_jacobian(x).0,
        }
    }

    pub fn jacobian(&self, x: &Vec3) -> JacobianMatrix {
        match self {
            Transform::Translation(_) => JacobianMatrix::IDENTITY,
            Transform::BSpline(ffd) => ffd.apply_with_jacobian(x).1,
        }
    }

    #[inline]
    pub fn apply_with_jacobian(&self, x: &Vec3) -> (Vec3, JacobianMatrix) {
        match self {
            Transform::Translation(_) => (self.apply(x), JacobianMatrix::IDENTITY),
            Transform::BSpline(ffd) => ffd.apply_with_jacobian(x),
        }
    }

    /// Flat parameter vector: `t`, or control displacements interleaved xyz.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Transform::Translation(tr) => tr.t.to_vec(),
            Transform::BSpline(ffd) => ffd.displacements.iter().flat_map(|d| d.iter().copied()).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Transform::Translation(_) => 3,
            Transform::BSpline(ffd) => 3 * ffd.displacements.len(),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.n_params() {
            return Err(FlorError::LengthMismatch(self.n_params(), params.len()));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(FlorError::NonFinite(i));
        }
        Ok(match self {
            Transform::Translation(_) => Transform::translation([params[0], params[1], params[2]]),
            Transform::BSpline(ffd) => Transform::BSpline(
                ffd.with_displacements(params.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())?,
            ),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TransformDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<TransformDoc>(text)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| FlorError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlorError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum TransformDoc {
    Translation {
        t: Vec3,
    },
    Bspline {
        knot_spacing: f64,
        domain: [usize; 3],
        lattice: [usize; 3],
        displacements: Vec<f64>,
    },
}

impl From<&Transform> for TransformDoc {
    fn from(t: &Transform) -> Self {
        match t {
            Transform::Translation(tr) => TransformDoc::Translation { t: tr.t },
            Transform::BSpline(ffd) => TransformDoc::Bspline {
                knot_spacing: ffd.knot_spacing,
                domain: ffd.domain,
                lattice: ffd.lattice,
                displacements: t.params(),
            },
        }
    }
}

impl TryFrom<TransformDoc> for Transform {
    type Error = FlorError;

    fn try_from(doc: TransformDoc) -> Result<Self> {
        match doc {
            TransformDoc::Translation { t } => Transform::translation([0.0; 3]).with_params(&t),
            TransformDoc::Bspline {
                knot_spacing,
                domain,
                lattice,
                displacements,
            } => {
                let base = Transform::BSpline(BSplineFfd::identity(domain, knot_spacing)?);
                if let Transform::BSpline(ffd) = &base {
                    if ffd.lattice != lattice {
                        return Err(FlorError::invalid(format!(
                            "lattice {lattice:?} inconsistent with domain {domain:?} and spacing {knot_spacing}"
                        )));
                    }
                }
                base.with_params(&displacements)
            }
        }
    }
}

/// `ψ_x(v) = J v / |J v|`.
pub fn map_direction(transform: &Transform, x: &Vec3, v: &Vec3) -> Result<Vec3> {
    check_unit(v)?;
    let w = transform.jacobian(x).apply(v);
    let n = norm(&w);
    if !(n > DEGENERATE_EPS) {
        return Err(FlorError::DegenerateDirection(n));
    }
    Ok([w[0] / n, w[1] / n, w[2] / n])
}

/// How a deformation acts on a lifted image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// `|J v| · I(φ(x), ψ_x(v))`
    Scaled,
    /// `I(φ(x), ψ_x(v))`
    Unscaled,
}

/// The deformed lifted moving image `(φ.I_σ)(x, v)`.
pub fn act_on_lifted(
    transform: &Transform,
    grad_moving: &GradientSpline,
    x: &Vec3,
    v: &Vec3,
    mode: ActionMode,
) -> Result<f64> {
    let psi = map_direction(transform, x, v)?;
    let (p, j) = transform.apply_with_jacobian(x);
    let g = grad_moving.eval(&p);
    Ok(match mode {
        ActionMode::Scaled => norm(&j.apply(v)) * dot(&g, &psi),
        ActionMode::Unscaled => dot(&g, &psi),
    })
}

/// Pullback `I ∘ φ` sampled on the moving grid's lattice.
pub fn resample(moving: &VolumeGrid, transform: &Transform) -> Result<VolumeGrid> {
    let spline = BSplineVolume::from_grid(moving);
    let [nx, ny, _] = moving.dims();
    let values = (0..moving.len())
        .into_par_iter()
        .map(|i| {
            let x = [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
            spline.eval(&transform.apply(&x))
        })
        .collect();
    moving.with_values(values)
}

/// Per-component clamp of control displacements to `[-max_disp, max_disp]`.
pub fn clamp_control_points(ffd: &BSplineFfd, max_disp: f64) -> Result<BSplineFfd> {
    if !(max_disp > 0.0) {
        return Err(FlorError::invalid(format!("max_disp must be > 0, got {max_disp}")));
    }
    ffd.with_displacements(
        ffd.displacements
            .iter()
            .map(|d| d.map(|c| c.clamp(-max_disp, max_disp)))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalespace::{gradient_field, lift, DirectionSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ffd(domain: [usize; 3], h: f64, amp: f64, seed: u64) -> BSplineFfd {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = BSplineFfd::identity(domain, h).unwrap();
        let d = (0..base.displacements().len())
            .map(|_| [0; 3].map(|_| rng.random_range(-amp..amp)))
            .collect();
        base.with_displacements(d).unwrap()
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

    #[test]
    fn lattice_size() {
        let f = BSplineFfd::identity([64, 64, 64], 5.0).unwrap();
        assert_eq!(f.lattice(), [16, 16, 16]);
        let f = BSplineFfd::identity([16, 11, 1], 5.0).unwrap();
        assert_eq!(f.lattice(), [7, 6, 4]);
    }

    #[test]
    fn zero_ffd_is_identity() {
        let t = Transform::BSpline(BSplineFfd::identity([10, 10, 10], 3.0).unwrap());
        for x in [[0.0, 0.0, 0.0], [4.3, 2.2, 9.0], [9.0, 9.0, 9.0]] {
            assert_eq!(t.apply(&x), x);
            assert_eq!(t.jacobian(&x), JacobianMatrix::IDENTITY);
        }
    }

    #[test]
    fn translation_apply_and_jacobian() {
        let t = Transform::translation([1.5, -2.0, 0.25]);
        assert_eq!(t.apply(&[1.0, 1.0, 1.0]), [2.5, -1.0, 1.25]);
        assert_eq!(t.jacobian(&[3.0, 4.0, 5.0]), JacobianMatrix::IDENTITY);
        assert_eq!(map_direction(&t, &[0.0; 3], &[0.6, 0.8, 0.0]).unwrap(), [0.6, 0.8, 0.0]);
    }

    #[test]
    fn single_control_point_matches_dense_sum() {
        // Oracle: direct evaluation of the tensor-product basis at every
        // control point of the lattice.
        let base = BSplineFfd::identity([12, 12, 12], 4.0).unwrap();
        let lat = base.lattice();
        let mut d = vec![[0.0; 3]; base.displacements().len()];
        let target = [2, 2, 2];
        let ti = target[0] + lat[0] * (target[1] + lat[1] * target[2]);
        d[ti] = [1.0, -2.0, 0.5];
        let t = Transform::BSpline(base.with_displacements(d.clone()).unwrap());
        for x in [[4.0, 4.0, 4.0], [3.3, 5.1, 6.7], [0.0, 11.0, 2.0]] {
            let mut want = x;
            for (i, dp) in d.iter().enumerate() {
                let idx = [i % lat[0], (i / lat[0]) % lat[1], i / (lat[0] * lat[1])];
                let w: f64 = (0..3).map(|k| bspline3(x[k] / 4.0 - (idx[k] as f64 - 1.0))).product();
                for c in 0..3 {
                    want[c] += w * dp[c];
                }
            }
            let got = t.apply(&x);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-14);
            }
        }
        // At the collocated control point the tensor weight is (2/3)³.
        let got = t.apply(&[4.0, 4.0, 4.0]);
        assert!((got[0] - 4.0 - (2.0f64 / 3.0).powi(3)).abs() < 1e-14);
    }

    #[test]
    fn partition_of_unity() {
        let d = [0.7, -1.1, 0.3];
        let t = Transform::BSpline(BSplineFfd::from_fn([13, 9, 7], 2.5, |_| d).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [
                rng.random_range(0.0..12.0),
                rng.random_range(0.0..8.0),
                rng.random_range(0.0..6.0),
            ];
            let y = t.apply(&x);
            for k in 0..3 {
                assert!((y[k] - x[k] - d[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_outside_domain() {
        let t = Transform::BSpline(random_ffd([10, 10, 10], 3.0, 1.0, 1));
        for x in [[-0.5, 3.0, 3.0], [3.0, 9.01, 3.0], [20.0, -4.0, 1.0]] {
            assert_eq!(t.apply(&x), x);
            assert_eq!(t.jacobian(&x), JacobianMatrix::IDENTITY);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let ffd = random_ffd([16, 16, 16], 5.0, 0.4 * 5.0, 2);
        let t = Transform::BSpline(ffd);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..40 {
            let x = [0; 3].map(|_| rng.random_range(0.5..14.5));
            let j = t.jacobian(&x);
            let scale = j.0.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..3 {
                let mut a = x;
                let mut b = x;
                a[k] += h;
                b[k] -= h;
                let (pa, pb) = (t.apply(&a), t.apply(&b));
                for c in 0..3 {
                    let fd = (pa[c] - pb[c]) / (2.0 * h);
                    assert!((fd - j.0[c][k]).abs() < 1e-6 * scale, "{fd} vs {}", j.0[c][k]);
                }
            }
        }
    }

    #[test]
    fn rotation_like_jacobian_transports_directions() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let ffd = BSplineFfd::from_fn([12, 12, 12], 3.0, |p| {
            let rp = JacobianMatrix(r).apply(&p);
            [rp[0] - p[0], rp[1] - p[1], rp[2] - p[2]]
        })
        .unwrap();
        let t = Transform::BSpline(ffd);
        for v in DirectionSet::neighbours_26().directions() {
            let psi = map_direction(&t, &[5.5, 6.1, 4.0], v).unwrap();
            let want = JacobianMatrix(r).apply(v);
            for k in 0..3 {
                assert!((psi[k] - want[k]).abs() < 1e-6);
            }
            let neg = map_direction(&t, &[5.5, 6.1, 4.0], &v.map(|c| -c)).unwrap();
            assert_eq!(neg, psi.map(|c| -c));
        }
    }

    #[test]
    fn degenerate_direction() {
        // Collapse x: φ_x(x) = 0 inside the domain.
        let ffd = BSplineFfd::from_fn([8, 8, 8], 2.0, |p| [-p[0], 0.0, 0.0]).unwrap();
        let t = Transform::BSpline(ffd);
        let err = map_direction(&t, &[3.0, 3.0, 3.0], &[1.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, FlorError::DegenerateDirection(_)));
        assert!(map_direction(&t, &[3.0, 3.0, 3.0], &[0.0, 1.0, 0.0]).is_ok());
    }

    fn phantom(dims: [usize; 3]) -> VolumeGrid {
        VolumeGrid::from_fn(dims, |x, y, z| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            (0.3 * x).sin() + (0.2 * y + 0.1 * z).cos() + 0.05 * x * y
        })
        .unwrap()
    }

    #[test]
    fn action_identity_and_antisymmetry() {
        let img = phantom([12, 12, 12]);
        let field = gradient_field(&img, 1.0).unwrap();
        let gs = GradientSpline::new(&field);
        let id = Transform::translation([0.0; 3]);
        let dirs = DirectionSet::neighbours_26();
        for v in dirs.directions() {
            let lifted = lift(&field, v).unwrap();
            let x = [4.0, 7.0, 5.0];
            for mode in [ActionMode::Scaled, ActionMode::Unscaled] {
                let a = act_on_lifted(&id, &gs, &x, v, mode).unwrap();
                assert!((a - lifted[img.index(4, 7, 5)]).abs() < 1e-12);
            }
        }
        let t = Transform::BSpline(random_ffd([12, 12, 12], 4.0, 1.5, 7));
        for v in dirs.directions() {
            let x = [3.3, 8.2, 6.6];
            for mode in [ActionMode::Scaled, ActionMode::Unscaled] {
                let a = act_on_lifted(&t, &gs, &x, v, mode).unwrap();
                let b = act_on_lifted(&t, &gs, &x, &v.map(|c| -c), mode).unwrap();
                assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn modes_agree_for_translation() {
        let img = phantom([10, 10, 10]);
        let gs = GradientSpline::new(&gradient_field(&img, 1.0).unwrap());
        let t = Transform::translation([0.3, -0.7, 1.1]);
        for v in DirectionSet::neighbours_26().directions() {
            let a = act_on_lifted(&t, &gs, &[4.0, 4.5, 5.0], v, ActionMode::Scaled).unwrap();
            let b = act_on_lifted(&t, &gs, &[4.0, 4.5, 5.0], v, ActionMode::Unscaled).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_identity_and_integer_shift() {
        let img = phantom([14, 12, 10]);
        let same = resample(&img, &Transform::translation([0.0; 3])).unwrap();
        for (a, b) in same.values().iter().zip(img.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let shifted = resample(&img, &Transform::translation([3.0, 0.0, 0.0])).unwrap();
        for z in 0..10 {
            for y in 0..12 {
                for x in 0..11 {
                    assert!((shifted.get(x, y, z) - img.get(x + 3, y, z)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn resample_reproduces_ramp_shift() {
        let img = VolumeGrid::from_fn([32, 32, 32], |x, _, _| 0.5 * x as f64 + 1.0).unwrap();
        let out = resample(&img, &Transform::translation([0.37, -0.2, 0.6])).unwrap();
        for z in 14..18 {
            for y in 14..18 {
                for x in 14..18 {
                    let want = 0.5 * (x as f64 + 0.37) + 1.0;
                    assert!((out.get(x, y, z) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resample_is_linear() {
        let a = phantom([9, 9, 9]);
        let b = VolumeGrid::from_fn([9, 9, 9], |x, y, z| ((x * y + z) % 5) as f64).unwrap();
        let mix = a
            .with_values(
                a.values()
                    .iter()
                    .zip(b.values())
                    .map(|(p, q)| 2.0 * p - 0.5 * q)
                    .collect(),
            )
            .unwrap();
        let t = Transform::BSpline(random_ffd([9, 9, 9], 3.0, 1.0, 9));
        let (ra, rb, rm) = (
            resample(&a, &t).unwrap(),
            resample(&b, &t).unwrap(),
            resample(&mix, &t).unwrap(),
        );
        for i in 0..rm.len() {
            assert!((rm.values()[i] - (2.0 * ra.values()[i] - 0.5 * rb.values()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping() {
        let ffd = BSplineFfd::identity([6, 6, 6], 2.0).unwrap();
        let mut d = ffd.displacements().to_vec();
        d[0] = [3.7, -0.5, -9.0];
        d[1] = [1.0, 1.0, 1.0];
        let ffd = ffd.with_displacements(d).unwrap();
        let c = clamp_control_points(&ffd, 2.0).unwrap();
        assert_eq!(c.displacements()[0], [2.0, -0.5, -2.0]);
        assert_eq!(c.displacements()[1], [1.0, 1.0, 1.0]);
        assert_eq!(clamp_control_points(&c, 2.0).unwrap(), c);
        assert!(clamp_control_points(&c, 0.0).is_err());
    }

    #[test]
    fn transform_document_round_trip() {
        let t = Transform::BSpline(random_ffd([9, 8, 7], 2.5, 1.0, 11));
        assert_eq!(Transform::from_json(&t.to_json().unwrap()).unwrap(), t);
        let tr = Transform::translation([0.1, 1.0 / 3.0, -2.5]);
        assert_eq!(Transform::from_json(&tr.to_json().unwrap()).unwrap(), tr);
        assert!(Transform::from_json(r#"{"kind":"translation","t":[0,0,0],"x":1}"#).is_err());
        assert!(Transform::from_json(
            r#"{"kind":"bspline","knot_spacing":2.0,"domain":[4,4,4],"lattice":[9,9,9],"displacements":[]}"#
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn action_antisymmetry_random_ffd(seed in 0u64..1000, vx in -1.0f64..1.0, vy in -1.0f64..1.0, vz in -1.0f64..1.0) {
            let n = (vx * vx + vy * vy + vz * vz).sqrt();
            prop_assume!(n > 0.1);
            let v = [vx / n, vy / n, vz / n];
            let img = phantom([10, 10, 10]);
            let gs = GradientSpline::new(&gradient_field(&img, 1.0).unwrap());
            let t = Transform::BSpline(random_ffd([10, 10, 10], 3.0, 1.2, seed));
            let x = [4.4, 5.5, 3.3];
            for mode in [ActionMode::Scaled, ActionMode::Unscaled] {
                let a = act_on_lifted(&t, &gs, &x, &v, mode).unwrap();
                let b = act_on_lifted(&t, &gs, &x, &v.map(|c| -c), mode).unwrap();
                prop_assert!((a + b).abs() <= 1e-12);
            }
        }
    }
}
