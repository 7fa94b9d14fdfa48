//! Regular-grid scalar volumes, NRRD / RAW+sidecar I/O and synthetic phantoms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlorError, Result};
use crate::Vec3;

/// A scalar image on a regular 3D lattice, x-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    values: Vec<f64>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, values: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(FlorError::invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(FlorError::invalid(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(FlorError::invalid("origin must be finite"));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(FlorError::SizeMismatch {
                expected,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FlorError::NonFinite(i));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            values,
        })
    }

    /// Unit spacing, zero origin.
    pub fn from_values(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3], values)
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Result<Self> {
        Self::from_values(dims, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Evaluates `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::from_values(dims, values)
    }

    /// Same geometry, new values. Values must be finite and of matching length.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, values)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    /// Zero outside the lattice.
    pub fn get_or_zero(&self, x: isize, y: isize, z: isize) -> f64 {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= nx || y as usize >= ny || z as usize >= nz {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }
}

/// Exact extrema and mean of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn grid_stats(grid: &VolumeGrid) -> GridStats {
    value_stats(grid.values())
}

pub(crate) fn value_stats(values: &[f64]) -> GridStats {
    let (min, max, sum) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), &v| {
            (lo.min(v), hi.max(v), s + v)
        });
    GridStats {
        min,
        max,
        mean: sum / values.len() as f64,
    }
}

/// One isotropic Gaussian blob, in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec3,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub blobs: Vec<Blob>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Sum of Gaussian blobs sampled at voxel centers plus seeded Gaussian noise.
pub fn make_synthetic(spec: &SyntheticSpec, dims: [usize; 3], spacing: Vec3) -> Result<VolumeGrid> {
    if let Some(b) = spec.blobs.iter().find(|b| !(b.sigma > 0.0)) {
        return Err(FlorError::invalid(format!("blob sigma must be > 0, got {}", b.sigma)));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(FlorError::invalid("noise_sigma must be >= 0"));
    }
    let mut values = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let v: f64 = spec
                    .blobs
                    .iter()
                    .map(|b| {
                        let d2: f64 = (0..3).map(|k| (p[k] - b.center[k]).powi(2)).sum();
                        b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
                values.push(v);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| FlorError::invalid(format!("noise distribution: {e}")))?;
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    VolumeGrid::new(dims, spacing, [0.0; 3], values)
}

/// On-disk volume encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// Attached-header NRRD, raw little-endian payload.
    Nrrd,
    /// Little-endian f64 payload with a JSON sidecar (`<stem>.json`).
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "nrrd" => Ok(VolumeFormat::Nrrd),
            Some(e) if e == "raw" => Ok(VolumeFormat::Raw),
            _ => Err(FlorError::invalid(format!(
                "cannot infer volume format from {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    dims: [usize; 3],
    spacing: Vec3,
    #[serde(default)]
    origin: Vec3,
}

pub fn raw_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_volume(path: &Path) -> Result<VolumeGrid> {
    load_volume_as(path, VolumeFormat::from_path(path)?)
}

pub fn load_volume_as(path: &Path, format: VolumeFormat) -> Result<VolumeGrid> {
    match format {
        VolumeFormat::Nrrd => {
            let bytes = fs::read(path).map_err(|e| FlorError::io(path, e))?;
            parse_nrrd(&bytes)
        }
        VolumeFormat::Raw => {
            let side = raw_sidecar_path(path);
            let text = fs::read_to_string(&side).map_err(|e| FlorError::io(&side, e))?;
            let meta: RawSidecar =
                serde_json::from_str(&text).map_err(|e| FlorError::Header(format!("{}: {e}", side.display())))?;
            let bytes = fs::read(path).map_err(|e| FlorError::io(path, e))?;
            let values = decode_payload(&bytes, ScalarType::F64, meta.dims)?;
            VolumeGrid::new(meta.dims, meta.spacing, meta.origin, values)
        }
    }
}

pub fn save_volume(grid: &VolumeGrid, path: &Path) -> Result<()> {
    save_volume_as(grid, path, VolumeFormat::from_path(path)?)
}

pub fn save_volume_as(grid: &VolumeGrid, path: &Path, format: VolumeFormat) -> Result<()> {
    let payload = encode_payload(grid.values());
    match format {
        VolumeFormat::Nrrd => {
            let mut out = nrrd_header(grid).into_bytes();
            out.extend_from_slice(&payload);
            write_file(path, &out)
        }
        VolumeFormat::Raw => {
            let meta = RawSidecar {
                dims: grid.dims,
                spacing: grid.spacing,
                origin: grid.origin,
            };
            let text = serde_json::to_string_pretty(&meta)?;
            write_file(&raw_sidecar_path(path), text.as_bytes())?;
            write_file(path, &payload)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| FlorError::io(path, e))?;
    f.write_all(bytes).map_err(|e| FlorError::io(path, e))
}

fn nrrd_header(grid: &VolumeGrid) -> String {
    let [nx, ny, nz] = grid.dims;
    let [sx, sy, sz] = grid.spacing;
    let [ox, oy, oz] = grid.origin;
    format!(
        "NRRD0004\n\
         # written by flor\n\
         type: double\n\
         dimension: 3\n\
         sizes: {nx} {ny} {nz}\n\
         spacings: {sx:?} {sy:?} {sz:?}\n\
         encoding: raw\n\
         endian: little\n\
         origin:={ox:?} {oy:?} {oz:?}\n\n"
    )
}

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    F32,
    F64,
}

impl ScalarType {
    fn width(self) -> usize {
        match self {
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

fn encode_payload(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_payload(bytes: &[u8], ty: ScalarType, dims: [usize; 3]) -> Result<Vec<f64>> {
    let expected = dims[0] * dims[1] * dims[2];
    let width = ty.width();
    if !bytes.len().is_multiple_of(width) || bytes.len() / width != expected {
        return Err(FlorError::SizeMismatch {
            expected,
            found: bytes.len() / width,
        });
    }
    let values: Vec<f64> = match ty {
        ScalarType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        ScalarType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FlorError::NonFinite(i));
    }
    Ok(values)
}

fn parse_vec3(text: &str, what: &str) -> Result<Vec3> {
    let cleaned: String = text
        .chars()
        .map(|c| if c == '(' || c == ')' || c == ',' { ' ' } else { c })
        .collect();
    let parts: Vec<f64> = cleaned
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| FlorError::Header(format!("{what}: {e}")))?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| FlorError::Header(format!("{what}: expected 3 values, got {}", p.len())))
}

fn parse_nrrd(bytes: &[u8]) -> Result<VolumeGrid> {
    if !bytes.starts_with(b"NRRD") {
        return Err(FlorError::Header("missing NRRD magic".into()));
    }
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| FlorError::Header("header not terminated by a blank line".into()))?;
    let header =
        std::str::from_utf8(&bytes[..split]).map_err(|_| FlorError::Header("header is not valid UTF-8".into()))?;
    let payload = &bytes[split + 2..];

    let mut ty = None;
    let mut dimension = None;
    let mut sizes = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut encoding = None;
    let mut endian = None;

    for line in header.lines().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once(":=") {
            if key.trim() == "origin" {
                origin = parse_vec3(value, "origin")?;
            }
            continue;
        }
        let (field, desc) = line
            .split_once(':')
            .ok_or_else(|| FlorError::Header(format!("unparseable line `{line}`")))?;
        let desc = desc.trim();
        match field.trim() {
            "type" => {
                ty = Some(match desc {
                    "double" | "float64" => ScalarType::F64,
                    "float" | "float32" => ScalarType::F32,
                    other => return Err(FlorError::Header(format!("unsupported type `{other}`"))),
                })
            }
            "dimension" => {
                dimension = Some(
                    desc.parse::<usize>()
                        .map_err(|e| FlorError::Header(format!("dimension: {e}")))?,
                )
            }
            "sizes" => {
                let s: Vec<usize> = desc
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| FlorError::Header(format!("sizes: {e}")))?;
                sizes = Some(s);
            }
            "spacings" => spacing = parse_vec3(desc, "spacings")?,
            "space origin" => origin = parse_vec3(desc, "space origin")?,
            "encoding" => encoding = Some(desc.to_string()),
            "endian" => endian = Some(desc.to_string()),
            "data file" | "datafile" => return Err(FlorError::Header("detached data files are not supported".into())),
            _ => {}
        }
    }

    let ty = ty.ok_or_else(|| FlorError::Header("missing `type`".into()))?;
    if dimension != Some(3) {
        return Err(FlorError::Header(format!("expected dimension 3, got {dimension:?}")));
    }
    let sizes = sizes.ok_or_else(|| FlorError::Header("missing `sizes`".into()))?;
    let dims: [usize; 3] = sizes
        .try_into()
        .map_err(|_| FlorError::Header("`sizes` must list 3 values".into()))?;
    if encoding.as_deref() != Some("raw") {
        return Err(FlorError::Header(format!("unsupported encoding {encoding:?}")));
    }
    if endian.as_deref() != Some("little") {
        return Err(FlorError::Header(format!("unsupported endian {endian:?}")));
    }
    let values = decode_payload(payload, ty, dims)?;
    VolumeGrid::new(dims, spacing, origin, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nrrd_bytes(sizes: &str, n_values: usize) -> Vec<u8> {
        let mut b = format!("NRRD0004\ntype: double\ndimension: 3\nsizes: {sizes}\nencoding: raw\nendian: little\n\n")
            .into_bytes();
        for i in 0..n_values {
            b.extend_from_slice(&(i as f64).to_le_bytes());
        }
        b
    }

    #[test]
    fn header_dims_are_echoed() {
        let g = parse_nrrd(&nrrd_bytes("4 4 4", 64)).unwrap();
        assert_eq!(g.dims(), [4, 4, 4]);
        assert_eq!(g.get(3, 3, 3), 63.0);
    }

    #[test]
    fn short_payload_is_rejected() {
        let err = parse_nrrd(&nrrd_bytes("4 4 4", 63)).unwrap_err();
        assert!(matches!(
            err,
            FlorError::SizeMismatch {
                expected: 64,
                found: 63
            }
        ));
    }

    #[test]
    fn float32_payload_and_space_origin() {
        let mut b = b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 1 1\nspace origin: (1,2,3)\nencoding: raw\nendian: little\n\n".to_vec();
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        let g = parse_nrrd(&b).unwrap();
        assert_eq!(g.values(), &[1.5, -2.0]);
        assert_eq!(g.origin(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(parse_nrrd(b"P6\n\n"), Err(FlorError::Header(_))));
        let gz = b"NRRD0004\ntype: double\ndimension: 3\nsizes: 1 1 1\nencoding: gzip\nendian: little\n\n";
        assert!(matches!(parse_nrrd(gz), Err(FlorError::Header(_))));
        let two_d = b"NRRD0004\ntype: double\ndimension: 2\nsizes: 1 1\nencoding: raw\nendian: little\n\n";
        assert!(matches!(parse_nrrd(two_d), Err(FlorError::Header(_))));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut b = nrrd_bytes("2 1 1", 1);
        b.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(parse_nrrd(&b), Err(FlorError::NonFinite(1))));
    }

    #[test]
    fn missing_file() {
        let err = load_volume(Path::new("/nonexistent/dir/v.nrrd")).unwrap_err();
        assert!(matches!(err, FlorError::Io { .. }));
    }

    #[test]
    fn constant_volume_payload_and_spacing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ones.nrrd");
        let g = VolumeGrid::new([3, 2, 2], [1.0, 1.0, 2.0], [0.0; 3], vec![1.0; 12]).unwrap();
        save_volume(&g, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("spacings: 1.0 1.0 2.0\n"));
        let split = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        assert!(bytes[split..]
            .chunks_exact(8)
            .all(|c| f64::from_le_bytes(c.try_into().unwrap()) == 1.0));
    }

    #[test]
    fn resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.nrrd");
        let b = dir.path().join("b.nrrd");
        let g = make_synthetic(
            &SyntheticSpec {
                blobs: vec![],
                noise_sigma: 1.0,
                seed: 3,
            },
            [5, 4, 3],
            [0.5, 1.0, 1.5],
        )
        .unwrap();
        save_volume(&g, &a).unwrap();
        save_volume(&load_volume(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn unknown_extension() {
        assert!(VolumeFormat::from_path(Path::new("x.nii")).is_err());
    }

    #[test]
    fn synthetic_zero_and_peak() {
        let empty = SyntheticSpec {
            blobs: vec![],
            noise_sigma: 0.0,
            seed: 0,
        };
        let g = make_synthetic(&empty, [4, 4, 4], [1.0; 3]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));

        let one = SyntheticSpec {
            blobs: vec![Blob {
                center: [3.0, 4.0, 2.0],
                sigma: 1.5,
                amplitude: 7.0,
            }],
            noise_sigma: 0.0,
            seed: 0,
        };
        let g = make_synthetic(&one, [8, 8, 8], [1.0; 3]).unwrap();
        let s = grid_stats(&g);
        assert_eq!(s.max, 7.0);
        assert_eq!(g.get(3, 4, 2), 7.0);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            blobs: vec![Blob {
                center: [2.0; 3],
                sigma: 1.0,
                amplitude: 1.0,
            }],
            noise_sigma: 0.3,
            seed: 42,
        };
        let a = make_synthetic(&spec, [6, 6, 6], [1.0; 3]).unwrap();
        let b = make_synthetic(&spec, [6, 6, 6], [1.0; 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_rejects_bad_sigma() {
        let spec = SyntheticSpec {
            blobs: vec![Blob {
                center: [0.0; 3],
                sigma: 0.0,
                amplitude: 1.0,
            }],
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(make_synthetic(&spec, [2, 2, 2], [1.0; 3]).is_err());
    }

    #[test]
    fn stats_simple_cases() {
        let g = VolumeGrid::filled([3, 3, 3], 5.0).unwrap();
        assert_eq!(
            grid_stats(&g),
            GridStats {
                min: 5.0,
                max: 5.0,
                mean: 5.0
            }
        );
        let g = VolumeGrid::from_fn([4, 1, 1], |x, _, _| (x % 2) as f64).unwrap();
        assert_eq!(grid_stats(&g).mean, 0.5);
    }

    #[test]
    fn invalid_grids() {
        assert!(VolumeGrid::new([0, 1, 1], [1.0; 3], [0.0; 3], vec![]).is_err());
        assert!(VolumeGrid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3], vec![0.0]).is_err());
        assert!(VolumeGrid::from_values([1, 1, 1], vec![f64::INFINITY]).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = VolumeGrid> {
        (
            [1usize..5, 1usize..5, 1usize..5],
            [0.1f64..4.0, 0.1f64..4.0, 0.1f64..4.0],
            [-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0],
        )
            .prop_flat_map(|(dims, spacing, origin)| {
                let n = dims[0] * dims[1] * dims[2];
                proptest::collection::vec(-1e6f64..1e6, n)
                    .prop_map(move |v| VolumeGrid::new(dims, spacing, origin, v).unwrap())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_both_formats(g in arb_grid()) {
            let dir = tempfile::tempdir().unwrap();
            for name in ["v.nrrd", "v.raw"] {
                let p = dir.path().join(name);
                save_volume(&g, &p).unwrap();
                prop_assert_eq!(&load_volume(&p).unwrap(), &g);
            }
        }

        #[test]
        fn stats_bound_values(g in arb_grid()) {
            let s = grid_stats(&g);
            let brute_min = g.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let brute_max = g.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(s.min, brute_min);
            prop_assert_eq!(s.max, brute_max);
            prop_assert!(g.values().iter().all(|&v| s.min <= v && v <= s.max));
        }
    }
}
