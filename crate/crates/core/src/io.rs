//! File formats: RVOL volumes, keypoint CSV, `key=value` configs and case
//! descriptions, plus intensity preprocessing.
//!
//! An RVOL volume is a small text header next to a raw little-endian payload:
//!
//! ```text
//! RVOL 1
//! dims=64,64
//! spacing=1,1
//! dtype=float32
//! endian=little
//! order=x-fastest
//! components=1
//! layout=planar
//! data=fixed.raw
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridDomain, ScalarGrid};
use crate::metrics::{EvalData, KeypointSet, LabelGrid};
use crate::phantom::Phantom;
use crate::sweep::SweepCase;

pub const RVOL_MAGIC: &str = "RVOL 1";
pub const DEFAULT_CLIP: (f64, f64) = (-1100.0, 1518.0);
pub const KEYPOINT_HEADER: [&str; 3] = ["x_mm", "y_mm", "z_mm"];

/// Payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Float32,
    Float64,
    Int32,
}

impl Dtype {
    pub fn tag(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Float64 => "float64",
            Dtype::Int32 => "int32",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "float32" => Some(Dtype::Float32),
            "float64" => Some(Dtype::Float64),
            "int32" => Some(Dtype::Int32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::Float64 => 8,
            Dtype::Float32 | Dtype::Int32 => 4,
        }
    }
}

/// Parse `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; later keys override earlier ones.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::format(path, format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_key_value_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

/// Decoded RVOL file.
#[derive(Debug, Clone)]
pub struct RawVolume {
    pub domain: GridDomain,
    pub components: usize,
    pub dtype: Dtype,
    pub values: Vec<f64>,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad {what} entry `{x}`")))
        })
        .collect()
}

fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn read_rvol(path: &Path) -> Result<RawVolume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.splitn(2, '\n');
    if lines.next().map(str::trim) != Some(RVOL_MAGIC) {
        return Err(Error::format(
            path,
            format!("missing `{RVOL_MAGIC}` first line"),
        ));
    }
    let kv = parse_key_values(lines.next().unwrap_or(""), path)?;
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("missing header key `{k}`")))
    };
    let dims: Vec<usize> = parse_list(get("dims")?, "dims", path)?;
    let spacing: Vec<f64> = parse_list(get("spacing")?, "spacing", path)?;
    let domain = GridDomain::new(&dims, &spacing)?;
    let dtype = Dtype::from_tag(get("dtype")?)
        .ok_or_else(|| Error::format(path, format!("unknown dtype `{}`", kv["dtype"])))?;
    let endian = kv.get("endian").map(String::as_str).unwrap_or("little");
    if endian != "little" {
        return Err(Error::format(
            path,
            format!("unsupported endianness `{endian}`"),
        ));
    }
    let order = kv.get("order").map(String::as_str).unwrap_or("x-fastest");
    if order != "x-fastest" {
        return Err(Error::format(path, format!("unsupported order `{order}`")));
    }
    let layout = kv.get("layout").map(String::as_str).unwrap_or("planar");
    if layout != "planar" {
        return Err(Error::format(
            path,
            format!("unsupported layout `{layout}`"),
        ));
    }
    let components: usize = match kv.get("components") {
        Some(c) => c
            .parse()
            .map_err(|_| Error::format(path, format!("bad components `{c}`")))?,
        None => 1,
    };
    if components == 0 {
        return Err(Error::format(path, "components must be at least 1"));
    }
    let data = match kv.get("data") {
        Some(d) => path.parent().unwrap_or(Path::new(".")).join(d),
        None => payload_path(path),
    };
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let expected = domain.len() * components * dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            &data,
            format!(
                "payload holds {} bytes, header implies {expected} ({} values of {})",
                bytes.len(),
                domain.len() * components,
                dtype.tag()
            ),
        ));
    }
    let values = match dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        Dtype::Float64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::Int32 => bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
    };
    Ok(RawVolume {
        domain,
        components,
        dtype,
        values,
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Write header `path` and payload `<path stem>.raw` beside it.
pub fn write_rvol(
    path: &Path,
    domain: &GridDomain,
    components: usize,
    dtype: Dtype,
    values: &[f64],
) -> Result<()> {
    if values.len() != domain.len() * components {
        return Err(Error::Shape(format!(
            "{} values for {} voxels × {components} components",
            values.len(),
            domain.len()
        )));
    }
    let data = payload_path(path);
    let data_name = data
        .file_name()
        .ok_or_else(|| Error::Param(format!("bad volume path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let header = format!(
        "{RVOL_MAGIC}\ndims={}\nspacing={}\ndtype={}\nendian=little\norder=x-fastest\ncomponents={components}\nlayout=planar\ndata={data_name}\n",
        join(domain.dims()),
        join(domain.spacing()),
        dtype.tag()
    );
    let mut bytes = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            Dtype::Float32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::Float64 => bytes.extend_from_slice(&v.to_le_bytes()),
            Dtype::Int32 => {
                if v.fract() != 0.0 || v < i32::MIN as f64 || v > i32::MAX as f64 {
                    return Err(Error::Param(format!("{v} is not representable as int32")));
                }
                bytes.extend_from_slice(&(v as i32).to_le_bytes());
            }
        }
    }
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    fs::write(&data, bytes).map_err(|e| Error::io(&data, e))
}

pub fn load_volume(path: &Path) -> Result<ScalarGrid> {
    let raw = read_rvol(path)?;
    if raw.components != 1 {
        return Err(Error::format(
            path,
            format!(
                "expected a scalar volume, found {} components",
                raw.components
            ),
        ));
    }
    ScalarGrid::new(raw.domain, raw.values)
}

/// Save as float32.
pub fn save_volume(path: &Path, grid: &ScalarGrid) -> Result<()> {
    save_volume_as(path, grid, Dtype::Float32)
}

pub fn save_volume_as(path: &Path, grid: &ScalarGrid, dtype: Dtype) -> Result<()> {
    if dtype == Dtype::Int32 {
        return Err(Error::Param(
            "intensity volumes are stored as floats".into(),
        ));
    }
    write_rvol(path, grid.domain(), 1, dtype, grid.values())
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let raw = read_rvol(path)?;
    if raw.components != raw.domain.ndim() {
        return Err(Error::format(
            path,
            format!(
                "a {}-D displacement field needs {} components, found {}",
                raw.domain.ndim(),
                raw.domain.ndim(),
                raw.components
            ),
        ));
    }
    DisplacementField::new(raw.domain, raw.values)
}

/// Save as float32.
pub fn save_field(path: &Path, field: &DisplacementField) -> Result<()> {
    save_field_as(path, field, Dtype::Float32)
}

pub fn save_field_as(path: &Path, field: &DisplacementField, dtype: Dtype) -> Result<()> {
    if dtype == Dtype::Int32 {
        return Err(Error::Param(
            "displacement fields are stored as floats".into(),
        ));
    }
    write_rvol(path, field.domain(), field.ndim(), dtype, field.data())
}

pub fn load_labels(path: &Path) -> Result<LabelGrid> {
    let raw = read_rvol(path)?;
    if raw.dtype != Dtype::Int32 || raw.components != 1 {
        return Err(Error::format(
            path,
            "label maps must be single-component int32",
        ));
    }
    let labels = raw
        .values
        .iter()
        .map(|&v| {
            if v < 0.0 {
                Err(Error::format(path, format!("negative label {v}")))
            } else {
                Ok(v as u32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelGrid::new(raw.domain, labels)
}

pub fn save_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    let values: Vec<f64> = labels.labels().iter().map(|&l| l as f64).collect();
    write_rvol(path, labels.domain(), 1, Dtype::Int32, &values)
}

/// Points in millimetres, one per row; 2-D sets use `z_mm = 0`.
pub fn load_keypoints(path: &Path) -> Result<KeypointSet> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != KEYPOINT_HEADER {
        return Err(Error::format(
            path,
            format!("expected header x_mm,y_mm,z_mm, found {}", names.join(",")),
        ));
    }
    let mut points = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let mut p = [0.0; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            let cell = rec.get(k).unwrap_or("").trim();
            *slot = cell
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: bad number `{cell}`", n + 1)))?;
        }
        points.push(p);
    }
    KeypointSet::new(points).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_keypoints(path: &Path, points: &KeypointSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(KEYPOINT_HEADER).map_err(wrap)?;
    for p in points.points() {
        w.write_record(p.iter().map(|v| v.to_string()))
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Clip to `[low, high]` and map linearly so that `low → 0` and `high → 1`.
pub fn preprocess(grid: &ScalarGrid, low: f64, high: f64) -> Result<ScalarGrid> {
    if !(low.is_finite() && high.is_finite() && low < high) {
        return Err(Error::Param(format!(
            "clip range must satisfy low < high, got ({low}, {high})"
        )));
    }
    let range = high - low;
    grid.map(|v| (v.clamp(low, high) - low) / range)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Clip and min-max scale with the clip bounds.
    MinMax,
    /// Use intensities as stored.
    None,
}

/// Files and preprocessing for one image pair, read from a `case.cfg`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub fixed_labels: Option<PathBuf>,
    pub moving_labels: Option<PathBuf>,
    pub fixed_keypoints: Option<PathBuf>,
    pub moving_keypoints: Option<PathBuf>,
    pub clip: (f64, f64),
    pub normalization: Normalization,
}

impl CaseSpec {
    pub fn new(fixed: PathBuf, moving: PathBuf) -> Self {
        Self {
            fixed,
            moving,
            fixed_labels: None,
            moving_labels: None,
            fixed_keypoints: None,
            moving_keypoints: None,
            clip: DEFAULT_CLIP,
            normalization: Normalization::MinMax,
        }
    }

    /// Relative paths are resolved against the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let kv = read_key_value_file(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let file = |k: &str| kv.get(k).map(|v| base.join(v));
        let req =
            |k: &str| file(k).ok_or_else(|| Error::format(path, format!("missing key `{k}`")));
        let num = |k: &str, default: f64| -> Result<f64> {
            match kv.get(k) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::format(path, format!("`{k}` is not a number"))),
            }
        };
        let normalization = match kv.get("normalization").map(String::as_str) {
            None | Some("minmax") => Normalization::MinMax,
            Some("none") => Normalization::None,
            Some(other) => {
                return Err(Error::format(
                    path,
                    format!("unknown normalization `{other}`"),
                ))
            }
        };
        let clip = (
            num("clip_low", DEFAULT_CLIP.0)?,
            num("clip_high", DEFAULT_CLIP.1)?,
        );
        if clip.0 >= clip.1 {
            return Err(Error::format(path, "clip_low must be below clip_high"));
        }
        let known = [
            "fixed",
            "moving",
            "fixed_labels",
            "moving_labels",
            "fixed_keypoints",
            "moving_keypoints",
            "clip_low",
            "clip_high",
            "normalization",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::format(path, format!("unknown key `{k}`")));
        }
        Ok(Self {
            fixed: req("fixed")?,
            moving: req("moving")?,
            fixed_labels: file("fixed_labels"),
            moving_labels: file("moving_labels"),
            fixed_keypoints: file("fixed_keypoints"),
            moving_keypoints: file("moving_keypoints"),
            clip,
            normalization,
        })
    }

    /// Write as `case.cfg` text with paths relative to `dir` where possible.
    pub fn to_config_text(&self, dir: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut s = format!("fixed={}\nmoving={}\n", rel(&self.fixed), rel(&self.moving));
        for (k, v) in [
            ("fixed_labels", &self.fixed_labels),
            ("moving_labels", &self.moving_labels),
            ("fixed_keypoints", &self.fixed_keypoints),
            ("moving_keypoints", &self.moving_keypoints),
        ] {
            if let Some(p) = v {
                s.push_str(&format!("{k}={}\n", rel(p)));
            }
        }
        s.push_str(&format!(
            "clip_low={}\nclip_high={}\n",
            self.clip.0, self.clip.1
        ));
        s.push_str(match self.normalization {
            Normalization::MinMax => "normalization=minmax\n",
            Normalization::None => "normalization=none\n",
        });
        s
    }

    /// Read, check and preprocess every file of the case.
    pub fn load(&self) -> Result<SweepCase> {
        let mut fixed = load_volume(&self.fixed)?;
        let mut moving = load_volume(&self.moving)?;
        fixed
            .domain()
            .ensure_same(moving.domain(), "fixed/moving volumes")?;
        if self.normalization == Normalization::MinMax {
            fixed = preprocess(&fixed, self.clip.0, self.clip.1)?;
            moving = preprocess(&moving, self.clip.0, self.clip.1)?;
        }
        let labels = |p: &Option<PathBuf>| p.as_deref().map(load_labels).transpose();
        let points = |p: &Option<PathBuf>| p.as_deref().map(load_keypoints).transpose();
        let eval = EvalData {
            fixed_labels: labels(&self.fixed_labels)?,
            moving_labels: labels(&self.moving_labels)?,
            fixed_keypoints: points(&self.fixed_keypoints)?,
            moving_keypoints: points(&self.moving_keypoints)?,
        };
        for l in [&eval.fixed_labels, &eval.moving_labels]
            .into_iter()
            .flatten()
        {
            fixed.domain().ensure_same(l.domain(), "label map")?;
        }
        if let (Some(f), Some(m)) = (&eval.fixed_keypoints, &eval.moving_keypoints) {
            if f.len() != m.len() {
                return Err(Error::Shape(format!(
                    "{} fixed keypoints but {} moving keypoints",
                    f.len(),
                    m.len()
                )));
            }
        }
        Ok(SweepCase {
            fixed,
            moving,
            eval,
        })
    }
}

pub fn load_case(path: &Path) -> Result<SweepCase> {
    CaseSpec::from_file(path)?.load()
}

/// Write a phantom as a case directory (`case.cfg`, volumes, labels,
/// keypoints and the true field) and return the config path.
pub fn write_phantom_case(dir: &Path, phantom: &Phantom) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| dir.join(name);
    save_volume(&p("fixed.rvol"), &phantom.fixed)?;
    save_volume(&p("moving.rvol"), &phantom.moving)?;
    save_labels(&p("fixed_labels.rvol"), &phantom.fixed_labels)?;
    save_labels(&p("moving_labels.rvol"), &phantom.moving_labels)?;
    save_keypoints(&p("fixed_keypoints.csv"), &phantom.fixed_keypoints)?;
    save_keypoints(&p("moving_keypoints.csv"), &phantom.moving_keypoints)?;
    save_field(&p("true_field.rvol"), &phantom.true_field)?;
    let spec = CaseSpec {
        fixed_labels: Some(p("fixed_labels.rvol")),
        moving_labels: Some(p("moving_labels.rvol")),
        fixed_keypoints: Some(p("fixed_keypoints.csv")),
        moving_keypoints: Some(p("moving_keypoints.csv")),
        normalization: Normalization::None,
        ..CaseSpec::new(p("fixed.rvol"), p("moving.rvol"))
    };
    let cfg = p("case.cfg");
    fs::write(&cfg, spec.to_config_text(dir)).map_err(|e| Error::io(&cfg, e))?;
    Ok(cfg)
}
