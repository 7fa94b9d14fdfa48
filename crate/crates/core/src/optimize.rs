//! Analytic objective gradients, Adam, and the registration driver.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlorError, Result};
use crate::similarity::{
    EvaluationMode, FirstOrderReduction, Measure, Objective, ObjectiveValue, PairMoments, PointSample, SimilaritySpec,
};
use crate::transform::{clamp_control_points, ActionMode, Transform, DEGENERATE_EPS};
use crate::volume::VolumeGrid;
use crate::{dot, norm, Vec3};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradientOptions {
    /// Treat `ψₓ(v)` as constant in the unscaled action.
    pub freeze_directions: bool,
}

fn check_differentiable(spec: &SimilaritySpec) -> Result<()> {
    if !spec.measure.is_differentiable() {
        return Err(FlorError::NotDifferentiable(format!(
            "{} has no gradient",
            spec.measure.name()
        )));
    }
    if spec.mode != EvaluationMode::Direct {
        return Err(FlorError::NotDifferentiable("histogram evaluation mode".into()));
    }
    Ok(())
}

/// `∂loss/∂a_i` for a direct-mode measure over `n` pairs.
fn loss_derivatives(measure: Measure, n: usize, a: impl Fn(usize) -> f64, b: impl Fn(usize) -> f64) -> Vec<f64> {
    match measure {
        Measure::Ssd => (0..n).map(|i| 2.0 * (a(i) - b(i))).collect(),
        _ => {
            let m = PairMoments::new(n, &a, &b);
            (0..n).map(|i| -m.dncc_da(a(i), b(i))).collect()
        }
    }
}

/// Per-point coefficients of `B_p` and `∂_k B_p` in the gradient with respect to control `p`.
fn point_coefficients(
    s: &PointSample,
    g0: f64,
    g1: &[f64],
    dirs: &[Vec3],
    action: ActionMode,
    opts: GradientOptions,
) -> (Vec3, [Vec3; 3]) {
    let mut p = [g0 * s.dvalue[0], g0 * s.dvalue[1], g0 * s.dvalue[2]];
    let mut q = [[0.0; 3]; 3];
    for (v, &g) in dirs.iter().zip(g1) {
        if g == 0.0 {
            continue;
        }
        let w = s.jac.apply(v);
        let (u, a2) = match action {
            ActionMode::Scaled => (w, s.grad),
            ActionMode::Unscaled => {
                let n = norm(&w);
                if n <= DEGENERATE_EPS {
                    continue;
                }
                let u = [w[0] / n, w[1] / n, w[2] / n];
                let gu = dot(&s.grad, &u);
                let a2 = if opts.freeze_directions {
                    [0.0; 3]
                } else {
                    [
                        (s.grad[0] - gu * u[0]) / n,
                        (s.grad[1] - gu * u[1]) / n,
                        (s.grad[2] - gu * u[2]) / n,
                    ]
                };
                (u, a2)
            }
        };
        for c in 0..3 {
            let a1 = s.dgrad[0][c] * u[0] + s.dgrad[1][c] * u[1] + s.dgrad[2][c] * u[2];
            p[c] += g * a1;
            for k in 0..3 {
                q[c][k] += g * a2[c] * v[k];
            }
        }
    }
    (p, q)
}

/// Loss terms and `∂total/∂params` at `transform`.
pub fn objective_and_gradient(objective: &Objective, transform: &Transform) -> Result<(ObjectiveValue, Vec<f64>)> {
    objective_and_gradient_with(objective, transform, GradientOptions::default())
}

pub fn objective_and_gradient_with(
    objective: &Objective,
    transform: &Transform,
    opts: GradientOptions,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    let spec = objective.spec();
    check_differentiable(spec)?;
    let (w0, w1) = spec.weights();
    let samples = objective.samples(transform);
    let moving_lifted = objective.moving_lifted(&samples);
    let zeroth = objective.zeroth_loss(&samples)?;
    let first = objective.first_loss(&moving_lifted)?;
    let value = ObjectiveValue {
        total: w0 * zeroth + w1 * first,
        zeroth,
        first,
    };

    let np = samples.len();
    let dirs = spec.directions.directions();
    let nd = dirs.len();
    let fv = objective.fixed_values();
    let fl = objective.fixed_lifted();

    let mut g0 = loss_derivatives(spec.measure, np, |i| samples[i].value, |i| fv[i]);
    g0.iter_mut().for_each(|g| *g *= w0);
    let mut g1 = vec![0.0; np * nd];
    if w1 != 0.0 {
        match spec.reduction {
            FirstOrderReduction::Pooled => {
                g1 = loss_derivatives(spec.measure, np * nd, |i| moving_lifted[i], |i| fl[i]);
            }
            FirstOrderReduction::PerDirection => {
                for d in 0..nd {
                    let gd = loss_derivatives(spec.measure, np, |i| moving_lifted[i * nd + d], |i| fl[i * nd + d]);
                    for (i, g) in gd.into_iter().enumerate() {
                        g1[i * nd + d] = g;
                    }
                }
            }
        }
        g1.iter_mut().for_each(|g| *g *= w1);
    }

    let points = objective.points();
    let n_params = transform.n_params();
    let accumulate = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut grad = vec![0.0; n_params];
        for i in range {
            let (p, q) = point_coefficients(&samples[i], g0[i], &g1[i * nd..(i + 1) * nd], dirs, spec.action, opts);
            match transform {
                Transform::Translation(_) => {
                    for c in 0..3 {
                        grad[c] += p[c];
                    }
                }
                Transform::BSpline(ffd) => {
                    if let Some(support) = ffd.support(&points[i]) {
                        support.for_each(ffd.lattice(), |idx, b, db| {
                            for c in 0..3 {
                                grad[3 * idx + c] += b * p[c] + dot(&db, &q[c]);
                            }
                        });
                    }
                }
            }
        }
        grad
    };
    let chunks: Vec<_> = (0..np).step_by(CHUNK).map(|s| s..(s + CHUNK).min(np)).collect();
    let partials: Vec<Vec<f64>> = chunks.into_par_iter().map(accumulate).collect();
    let mut grad = vec![0.0; n_params];
    for part in partials {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::for_translation()
    }
}

impl AdamConfig {
    pub fn for_translation() -> Self {
        Self {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 500,
            grad_tol: 1e-6,
        }
    }

    pub fn for_ffd() -> Self {
        Self {
            learning_rate: 0.5,
            ..Self::for_translation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.grad_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FlorError::invalid(format!("invalid Adam configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &AdamState, grad: &[f64], params: &[f64], cfg: &AdamConfig) -> Result<(AdamState, Vec<f64>)> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(FlorError::LengthMismatch(state.m.len(), params.len()));
    }
    if grad.len() != params.len() {
        return Err(FlorError::LengthMismatch(grad.len(), params.len()));
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut next = AdamState {
        m: Vec::with_capacity(params.len()),
        v: Vec::with_capacity(params.len()),
        t,
    };
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        out.push(params[i] - cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.epsilon));
        next.m.push(m);
        next.v.push(v);
    }
    Ok((next, out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub total_loss: f64,
    pub zeroth_term: f64,
    pub first_term: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,total_loss,zeroth_term,first_term,grad_norm,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:.6}",
                r.iter, r.total_loss, r.zeroth_term, r.first_term, r.grad_norm, r.seconds
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIters,
    GradTol,
    Stalled,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::MaxIters => "max_iters",
            Termination::GradTol => "grad_tol",
            Termination::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Lowest-loss iterate seen.
    pub transform: Transform,
    pub trace: ConvergenceTrace,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterOptions {
    pub adam: AdamConfig,
    /// Control displacement bound applied after every FFD step.
    pub max_disp: Option<f64>,
    pub gradient: GradientOptions,
    pub stall_iters: usize,
    pub stall_tol: f64,
}

impl RegisterOptions {
    pub fn new(adam: AdamConfig) -> Self {
        Self {
            adam,
            max_disp: None,
            gradient: GradientOptions::default(),
            stall_iters: 25,
            stall_tol: 1e-12,
        }
    }
}

pub fn register(
    fixed: &VolumeGrid,
    moving: &VolumeGrid,
    spec: &SimilaritySpec,
    init: &Transform,
    opts: &RegisterOptions,
) -> Result<RegistrationResult> {
    check_differentiable(spec)?;
    let objective = Objective::new(fixed, moving, spec)?;
    register_objective(&objective, init, opts)
}

/// Adam on a prepared objective.
pub fn register_objective(
    objective: &Objective,
    init: &Transform,
    opts: &RegisterOptions,
) -> Result<RegistrationResult> {
    opts.adam.validate()?;
    if let Some(d) = opts.max_disp {
        if !(d > 0.0) {
            return Err(FlorError::invalid(format!("max_disp must be > 0, got {d}")));
        }
    }
    let clamp = |t: Transform| -> Result<Transform> {
        match (&t, opts.max_disp) {
            (Transform::BSpline(ffd), Some(d)) => Ok(Transform::BSpline(clamp_control_points(ffd, d)?)),
            _ => Ok(t),
        }
    };
    let start = Instant::now();
    let mut transform = clamp(init.clone())?;
    let mut state = AdamState::new(transform.n_params());
    let mut trace = ConvergenceTrace::default();
    let mut best = (f64::INFINITY, transform.clone());
    let mut stalled = 0;
    let mut termination = Termination::MaxIters;

    for iter in 0..opts.adam.max_iters {
        let (value, grad) = objective_and_gradient_with(objective, &transform, opts.gradient)?;
        if !value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FlorError::NonFiniteLoss(iter));
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.records.push(TraceRecord {
            iter,
            total_loss: value.total,
            zeroth_term: value.zeroth,
            first_term: value.first,
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.0 - value.total < opts.stall_tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if value.total < best.0 {
            best = (value.total, transform.clone());
        }
        if grad_norm < opts.adam.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        if stalled >= opts.stall_iters {
            termination = Termination::Stalled;
            break;
        }
        let (next, params) = adam_step(&state, &grad, &transform.params(), &opts.adam)?;
        state = next;
        transform = clamp(transform.with_params(&params)?)?;
    }
    Ok(RegistrationResult {
        transform: best.1,
        trace,
        termination,
    })
}

/// Worst per-parameter disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// Relative errors are `|a - n| / max(|a|, |n|, 1e-3 · max|n|)` so that
/// near-zero components are judged against the gradient's own scale.
pub fn gradient_check(
    objective: &Objective,
    transform: &Transform,
    step: f64,
    max_params: Option<usize>,
) -> Result<GradientCheck> {
    if !(step > 0.0) {
        return Err(FlorError::invalid(format!("step must be > 0, got {step}")));
    }
    let (_, analytic_all) = objective_and_gradient(objective, transform)?;
    let n = transform.n_params();
    let indices: Vec<usize> = match max_params {
        Some(k) if k < n => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(0x5eed), n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let params = transform.params();
    let numeric = indices
        .par_iter()
        .map(|&i| {
            let at = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p[i] += delta;
                Ok(objective.evaluate(&transform.with_params(&p)?)?.total)
            };
            Ok((at(step)? - at(-step)?) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    let analytic: Vec<f64> = indices.iter().map(|&i| analytic_all[i]).collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    Ok(GradientCheck {
        indices,
        analytic,
        numeric,
        max_rel_error,
    })
}
