use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use flor_core::loi::{
    global_histogram, joint_global_histogram, joint_lifted_histogram, lifted_range, local_histogram, IntegrationWindow,
    IntensityRange, ParzenWindow,
};
use flor_core::optimize::{register_objective, GradientOptions, RegisterOptions};
use flor_core::scalespace::{gaussian_smooth, gradient_field, lift};
use flor_core::similarity::{landscape as landscape_grid, Objective};
use flor_core::transform::{resample, BSplineFfd, Transform};
use flor_core::volume::{load_volume, make_synthetic, save_volume, Blob, SyntheticSpec};
use flor_core::VolumeGrid;
use serde::Deserialize;

use crate::config::{Model, RunConfig};
use crate::output::Staged;
use crate::CliError;

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("missing `io.{name}` (or --{name})")))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn presmoothed(grid: &VolumeGrid, sigma: f64) -> Result<VolumeGrid, CliError> {
    Ok(if sigma > 0.0 {
        gaussian_smooth(grid, sigma)?
    } else {
        grid.clone()
    })
}

fn load_pair(cfg: &RunConfig) -> Result<(VolumeGrid, VolumeGrid), CliError> {
    let fixed = load_volume(required(&cfg.io.fixed, "fixed")?)?;
    let moving = load_volume(required(&cfg.io.moving, "moving")?)?;
    if fixed.dims() != moving.dims() {
        return Err(CliError::Io(format!(
            "fixed {:?} and moving {:?} volumes differ in size",
            fixed.dims(),
            moving.dims()
        )));
    }
    Ok((fixed, moving))
}

pub fn register(cfg: &RunConfig) -> Result<(), CliError> {
    let prefix = required(&cfg.io.out, "out")?.to_path_buf();
    let spec = cfg.similarity_spec()?;
    let adam = cfg.adam();
    adam.validate()?;
    let (fixed, moving) = load_pair(cfg)?;

    let init = match &cfg.transform.init {
        Some(p) => Transform::load(p)?,
        None => match cfg.transform.model {
            Model::Translation => Transform::translation([0.0; 3]),
            Model::Bspline => Transform::BSpline(BSplineFfd::identity(fixed.dims(), cfg.transform.knot_spacing)?),
        },
    };
    let mut opts = RegisterOptions::new(adam);
    if matches!(init, Transform::BSpline(_)) {
        opts.max_disp = Some(cfg.max_disp());
    }
    opts.gradient = GradientOptions {
        freeze_directions: cfg.adam.freeze_directions,
    };
    opts.stall_iters = cfg.adam.stall_iters;

    let objective = Objective::new(
        &presmoothed(&fixed, cfg.scale.presmooth)?,
        &presmoothed(&moving, cfg.scale.presmooth)?,
        &spec,
    )?;
    let result = register_objective(&objective, &init, &opts)?;
    let warped = resample(&moving, &result.transform)?;
    let diff = warped.with_values(warped.values().iter().zip(fixed.values()).map(|(w, f)| w - f).collect())?;

    let ext = cfg.io.volume_format.extension();
    let mut staged = Staged::new(&prefix)?;
    staged.write(&with_suffix(&prefix, ".transform"), &result.transform.to_json()?)?;
    staged.write(&with_suffix(&prefix, ".trace.csv"), &result.trace.to_csv())?;
    let p = staged.path(&with_suffix(&prefix, &format!(".warped.{ext}")));
    save_volume(&warped, &p)?;
    let p = staged.path(&with_suffix(&prefix, &format!(".diff.{ext}")));
    save_volume(&diff, &p)?;
    staged.commit()?;

    let last = result.trace.last();
    let mut summary = format!(
        "termination={} iterations={} final_loss={:?}",
        result.termination.name(),
        result.trace.len(),
        last.map_or(f64::NAN, |r| r.total_loss)
    );
    match &result.transform {
        Transform::Translation(t) => summary.push_str(&format!(" translation={:?}", t.t)),
        Transform::BSpline(ffd) => summary.push_str(&format!(" max_displacement={:?}", ffd.max_abs_displacement())),
    }
    println!("{summary}");
    Ok(())
}

pub fn landscape(cfg: &RunConfig) -> Result<(), CliError> {
    let out = required(&cfg.io.out, "out")?.to_path_buf();
    let offsets = cfg.landscape.offsets()?;
    let base = cfg.similarity_spec()?;
    let (fixed, moving) = load_pair(cfg)?;
    let (fixed, moving) = (
        presmoothed(&fixed, cfg.scale.presmooth)?,
        presmoothed(&moving, cfg.scale.presmooth)?,
    );

    let pairs: Vec<_> = cfg
        .landscape
        .measures
        .iter()
        .flat_map(|&m| cfg.landscape.orders.iter().map(move |&o| (m, o)))
        .collect();
    if pairs.is_empty() {
        return Err(CliError::Config(
            "landscape.measures and landscape.orders must be nonempty".into(),
        ));
    }
    let mut staged = Staged::new(&out)?;
    for &(measure, order) in &pairs {
        let mut spec = base.clone();
        spec.measure = measure;
        spec.order = order;
        let grid = landscape_grid(&fixed, &moving, &spec, &offsets, &offsets)?;
        let target = if pairs.len() == 1 {
            out.clone()
        } else {
            let stem = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let ext = out
                .extension()
                .map_or("csv".into(), |e| e.to_string_lossy().into_owned());
            out.with_file_name(format!("{stem}.{}-{}.{ext}", measure.name(), order.name()))
        };
        staged.write(&target, &grid.to_csv())?;
    }
    for p in staged.commit()? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    spacing: [f64; 3],
    blobs: Vec<Blob>,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    seed: u64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

pub fn synth(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::Io(format!("{}: {e}", spec_path.display())))?;
    let file: SynthFile = if spec_path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", spec_path.display(), e.message())))?
    };
    let spec = SyntheticSpec {
        blobs: file.blobs,
        noise_sigma: file.noise_sigma,
        seed: file.seed,
    };
    let grid = make_synthetic(&spec, file.dims, file.spacing).map_err(|e| CliError::Config(e.to_string()))?;
    let mut staged = Staged::new(out)?;
    let p = staged.path(out);
    save_volume(&grid, &p)?;
    staged.commit()?;
    Ok(())
}

pub fn hist(cfg: &RunConfig, inputs: &[PathBuf], out: &Path, lifted: bool) -> Result<(), CliError> {
    let h = &cfg.histogram;
    let grids = inputs.iter().map(|p| load_volume(p)).collect::<Result<Vec<_>, _>>()?;
    if grids.len() == 2 && grids[0].dims() != grids[1].dims() {
        return Err(CliError::Io(format!(
            "input volumes differ in size: {:?} vs {:?}",
            grids[0].dims(),
            grids[1].dims()
        )));
    }
    let range_from = |values: &[&[f64]]| -> Result<IntensityRange, CliError> {
        Ok(match h.range {
            Some([lo, hi]) => IntensityRange::new(lo, hi, h.bins)?,
            None => IntensityRange::covering_all(values, h.bins, h.beta_bins)?,
        })
    };
    let csv = if lifted {
        if h.alpha.is_some() {
            return Err(CliError::Config(
                "local histograms of lifted images are not supported".into(),
            ));
        }
        let spec = cfg.similarity_spec()?;
        let fields = grids
            .iter()
            .map(|g| gradient_field(g, cfg.scale.sigma))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = fields.iter().collect();
        let range = match h.range {
            Some([lo, hi]) => IntensityRange::new(lo, hi, h.bins)?,
            None => lifted_range(&refs, &spec.directions, h.bins, h.beta_bins)?,
        };
        let parzen = ParzenWindow::new(h.parzen.into(), h.beta_bins * range.bin_width())?;
        if fields.len() == 2 {
            joint_lifted_histogram(&fields[0], &fields[1], &spec.directions, &parzen, &range, &range)?.to_csv()
        } else {
            let mut pooled = Vec::with_capacity(fields[0].len() * spec.directions.len());
            for v in spec.directions.directions() {
                pooled.extend(lift(&fields[0], v)?);
            }
            global_histogram(&pooled, &parzen, &range)?.to_csv()
        }
    } else {
        let values: Vec<&[f64]> = grids.iter().map(|g| g.values()).collect();
        let range = range_from(&values)?;
        let parzen = ParzenWindow::new(h.parzen.into(), h.beta_bins * range.bin_width())?;
        match (values.len(), h.alpha) {
            (2, None) => joint_global_histogram(values[0], values[1], &parzen, &range, &range)?.to_csv(),
            (2, Some(_)) => return Err(CliError::Config("local joint histograms are not supported".into())),
            (_, None) => global_histogram(values[0], &parzen, &range)?.to_csv(),
            (_, Some(alpha)) => {
                let at =
                    h.at.ok_or_else(|| CliError::Config("histogram.alpha needs histogram.at".into()))?;
                let window = IntegrationWindow::Gaussian { alpha };
                local_histogram(values[0], grids[0].dims(), &parzen, &window, &range, &at)?.to_csv()
            }
        }
    };
    let mut staged = Staged::new(out)?;
    staged.write(out, &csv)?;
    staged.commit()?;
    Ok(())
}

pub fn convert(input: &Path, output: &Path) -> Result<(), CliError> {
    let grid = load_volume(input)?;
    let mut staged = Staged::new(output)?;
    let p = staged.path(output);
    save_volume(&grid, &p)?;
    staged.commit()?;
    Ok(())
}
