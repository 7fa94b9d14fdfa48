use std::fs;
use std::path::{Path, PathBuf};

use flor_core::loi::ParzenKind;
use flor_core::optimize::AdamConfig;
use flor_core::scalespace::DirectionSet;
use flor_core::similarity::{EvaluationMode, FirstOrderReduction, HistogramParams, Measure, Order, SimilaritySpec};
use flor_core::transform::ActionMode;
use serde::Deserialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Worker threads; 0 defers to `FLOR_THREADS`, then to the core count.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub io: IoConfig,
    #[serde(default)]
    pub scale: ScaleConfig,
    #[serde(default)]
    pub histogram: HistogramConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub adam: AdamSection,
    #[serde(default)]
    pub landscape: LandscapeConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub fixed: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub volume_format: VolumeExt,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeExt {
    #[default]
    Nrrd,
    Raw,
}

impl VolumeExt {
    pub fn extension(self) -> &'static str {
        match self {
            VolumeExt::Nrrd => "nrrd",
            VolumeExt::Raw => "raw",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub sigma: f64,
    /// Gaussian pre-blur of the intensities, 0 for none.
    pub presmooth: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            presmooth: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramConfig {
    pub bins: usize,
    pub beta_bins: f64,
    pub parzen: ParzenName,
    pub range: Option<[f64; 2]>,
    /// Integration scale for local histograms; absent means global.
    pub alpha: Option<f64>,
    pub at: Option<[f64; 3]>,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            beta_bins: 1.0,
            parzen: ParzenName::Gaussian,
            range: None,
            alpha: None,
            at: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParzenName {
    Gaussian,
    Bspline,
}

impl From<ParzenName> for ParzenKind {
    fn from(p: ParzenName) -> Self {
        match p {
            ParzenName::Gaussian => ParzenKind::Gaussian,
            ParzenName::Bspline => ParzenKind::BSpline3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub measure: Measure,
    pub order: Order,
    pub lambda: f64,
    /// Explicit unit directions; empty means the 26-neighbourhood.
    pub directions: Vec<[f64; 3]>,
    pub action: ActionMode,
    pub reduction: FirstOrderReduction,
    pub mode: EvaluationMode,
    pub stride: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            measure: Measure::Ncc,
            order: Order::Combined,
            lambda: 1.0 / 26.0,
            directions: Vec::new(),
            action: ActionMode::Scaled,
            reduction: FirstOrderReduction::PerDirection,
            mode: EvaluationMode::Direct,
            stride: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Translation,
    Bspline,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub model: Model,
    pub knot_spacing: f64,
    /// Defaults to 0.4 × knot spacing.
    pub max_disp: Option<f64>,
    pub init: Option<PathBuf>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            model: Model::Bspline,
            knot_spacing: 5.0,
            max_disp: None,
            init: None,
        }
    }
}

/// Adam settings; unset values take the per-model defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub stall_iters: usize,
    pub freeze_directions: bool,
}

impl Default for AdamSection {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            learning_rate: None,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            max_iters: d.max_iters,
            grad_tol: d.grad_tol,
            stall_iters: 25,
            freeze_directions: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub measures: Vec<Measure>,
    pub orders: Vec<Order>,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            min: -10.0,
            max: 10.0,
            step: 1.0,
            measures: vec![Measure::Ncc],
            orders: vec![Order::Zeroth, Order::First],
        }
    }
}

impl LandscapeConfig {
    pub fn offsets(&self) -> Result<Vec<f64>, CliError> {
        if !(self.step > 0.0) || !(self.max >= self.min) {
            return Err(CliError::Config(format!(
                "landscape needs step > 0 and max >= min, got min={} max={} step={}",
                self.min, self.max, self.step
            )));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| self.min + k as f64 * self.step).collect())
    }
}

impl RunConfig {
    /// Config file (if any) with `key=value` overrides applied on top.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => {
                let mut t = toml::Table::new();
                t.insert("schema_version".into(), toml::Value::Integer(SCHEMA_VERSION.into()));
                t
            }
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn similarity_spec(&self) -> Result<SimilaritySpec, CliError> {
        let s = &self.similarity;
        let directions = if s.directions.is_empty() {
            DirectionSet::neighbours_26()
        } else {
            DirectionSet::new(s.directions.clone())
                .map_err(|e| CliError::Config(format!("similarity.directions: {e}")))?
        };
        let h = &self.histogram;
        Ok(SimilaritySpec {
            measure: s.measure,
            order: s.order,
            lambda: s.lambda,
            sigma: self.scale.sigma,
            directions,
            action: s.action,
            reduction: s.reduction,
            mode: s.mode,
            histogram: HistogramParams {
                bins: h.bins,
                beta_bins: h.beta_bins,
                parzen: h.parzen.into(),
                range: h.range.map(|[lo, hi]| (lo, hi)),
            },
            stride: s.stride,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        let a = &self.adam;
        let base = match self.transform.model {
            Model::Translation => AdamConfig::for_translation(),
            Model::Bspline => AdamConfig::for_ffd(),
        };
        AdamConfig {
            learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            max_iters: a.max_iters,
            grad_tol: a.grad_tol,
        }
    }

    pub fn max_disp(&self) -> f64 {
        self.transform.max_disp.unwrap_or(0.4 * self.transform.knot_spacing)
    }
}

/// Applies `a.b.c=value`; the value is read as TOML, falling back to a bare string.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("invalid key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
