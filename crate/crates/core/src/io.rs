//! Point-cloud loading and normalization, run configuration and result
//! exports.
//!
//! Input formats are chosen by extension: `.xyz`, `.txt` and `.pts` hold
//! whitespace-separated coordinates (extra columns are ignored), `.ply` may be
//! ASCII or binary little-endian, and `.obj` contributes its `v` records.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{FitConfig, FitResult, HistoryEntry, MIN_POINTS};
use crate::geometry::{primitive_mesh, DsqParams, MirrorPlane, Pose, ShapeParams};
use crate::losses::LossBreakdown;

/// Centroid and scale removed by normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centroid: [f64; 3],
    /// Longest axis-aligned extent of the raw cloud.
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn denormalize_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p * self.scale + Vector3::from(self.centroid)
    }

    /// Parameters of the same surface in raw coordinates. Sizes and
    /// translations scale with the cloud, bending curvature inversely.
    pub fn denormalize(&self, theta: &DsqParams) -> DsqParams {
        let s = self.scale;
        let g = &theta.geometry;
        let t = Vector3::from(theta.pose.translation);
        DsqParams {
            geometry: ShapeParams {
                size: g.size.map(|a| a * s),
                shape: g.shape,
                taper: g.taper,
                bend: g.bend / s,
                bend_angle: g.bend_angle,
            },
            pose: Pose {
                translation: self.denormalize_point(&t).into(),
                rotation: theta.pose.rotation,
            },
        }
    }
}

/// A cloud centred on its centroid and scaled so its longest axis-aligned
/// extent is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub source: Option<PathBuf>,
    pub normalization: Normalization,
}

impl PointCloud {
    /// Normalizes raw points. Needs at least `min_points` points with a
    /// positive extent.
    pub fn from_raw(raw: Vec<Vector3<f64>>, source: Option<PathBuf>, min_points: usize) -> Result<Self> {
        let label = source.clone().unwrap_or_else(|| PathBuf::from("<memory>"));
        if let Some(index) = raw.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteCoordinate { path: label, index });
        }
        if raw.len() < min_points.max(1) {
            return Err(Error::TooFewPoints {
                path: label,
                found: raw.len(),
                min: min_points.max(1),
            });
        }
        let centroid = raw.iter().sum::<Vector3<f64>>() / raw.len() as f64;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &raw {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let scale = (hi - lo).max();
        if !(scale > 0.0) {
            return Err(Error::Parse {
                path: label,
                line: 0,
                message: "all points coincide".into(),
            });
        }
        Ok(Self {
            points: raw.iter().map(|p| (p - centroid) / scale).collect(),
            source,
            normalization: Normalization {
                centroid: centroid.into(),
                scale,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The points in their original coordinates.
    pub fn raw_points(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| self.normalization.denormalize_point(p)).collect()
    }

    /// Exactly `n` points, renormalized: a random subset when the cloud is
    /// larger, all points plus random repeats when it is smaller.
    pub fn resample(&self, n: usize, seed: u64) -> Result<Self> {
        let raw = self.raw_points();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked: Vec<Vector3<f64>> = if n <= raw.len() {
            let mut idx = sample_indices(&mut rng, raw.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| raw[i]).collect()
        } else {
            let extra: Vec<Vector3<f64>> = (raw.len()..n).map(|_| raw[rng.random_range(0..raw.len())]).collect();
            raw.into_iter().chain(extra).collect()
        };
        Self::from_raw(picked, self.source.clone(), n.min(MIN_POINTS))
    }
}

/// Loads and normalizes a cloud of at least 32 points.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    load_point_cloud_with_min(path, MIN_POINTS)
}

/// [`load_point_cloud`] with a custom minimum point count.
pub fn load_point_cloud_with_min(path: impl AsRef<Path>, min_points: usize) -> Result<PointCloud> {
    let path = path.as_ref();
    let raw = read_points(path)?;
    PointCloud::from_raw(raw, Some(path.to_path_buf()), min_points)
}

/// Raw points of a file, without normalization.
pub fn read_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match ext.as_str() {
        "xyz" | "txt" | "pts" => parse_xyz(path, &text(path, &bytes)?),
        "obj" => parse_obj(path, &text(path, &bytes)?),
        "ply" => parse_ply(path, &bytes),
        _ => Err(Error::UnsupportedFormat { path: path.into() }),
    }
}

fn text<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.into(),
        line: 0,
        message: format!("not UTF-8 text: {e}"),
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn parse_coords<'a>(path: &Path, line: usize, fields: impl Iterator<Item = &'a str>) -> Result<Vector3<f64>> {
    let mut v = [0.0; 3];
    let mut fields = fields;
    for (k, slot) in v.iter_mut().enumerate() {
        let f = fields
            .next()
            .ok_or_else(|| parse_err(path, line, format!("expected 3 coordinates, found {k}")))?;
        // NaN and inf parse here and are rejected after loading
        *slot = f
            .parse()
            .map_err(|_| parse_err(path, line, format!("`{f}` is not a number")))?;
    }
    Ok(Vector3::from(v))
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_coords(path, i + 1, l.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty())))
        .collect()
}

fn parse_obj(path: &Path, text: &str) -> Result<Vec<Vector3<f64>>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let mut f = l.split_whitespace();
            (f.next() == Some("v")).then(|| parse_coords(path, i + 1, f))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<Vec<Vector3<f64>>> {
    const END: &[u8] = b"end_header";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| parse_err(path, 0, "missing end_header"))?;
    let body_start = bytes[header_end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_end + p + 1)
        .ok_or_else(|| parse_err(path, 0, "header is not terminated by a newline"))?;
    let header = text(path, &bytes[..header_end])?;
    let mut lines = header.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(parse_err(path, 1, "missing `ply` magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(parse_err(path, i + 1, format!("unsupported PLY format `{other}`"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, i + 1, format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", len, item, _] => {
                let (len, item) = Scalar::parse(len)
                    .zip(Scalar::parse(item))
                    .ok_or_else(|| parse_err(path, i + 1, "unknown list property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before element"))?
                    .properties
                    .push(Property::List(len, item));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| parse_err(path, i + 1, format!("unknown property type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before element"))?
                    .properties
                    .push(Property::Scalar(name.to_string(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(parse_err(path, i + 1, format!("unrecognized header line `{line}`"))),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, 0, "missing format line"))?;
    let vertex = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    let axis_index = |axis: &str| {
        elements[vertex]
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
            .ok_or_else(|| parse_err(path, 0, format!("vertex element has no `{axis}` property")))
    };
    let xyz = [axis_index("x")?, axis_index("y")?, axis_index("z")?];
    let body = &bytes[body_start..];
    if binary {
        read_ply_binary(path, body, &elements, vertex, xyz)
    } else {
        read_ply_ascii(path, text(path, body)?, &elements, vertex, xyz)
    }
}

fn read_ply_ascii(path: &Path, body: &str, elements: &[Element], vertex: usize, xyz: [usize; 3]) -> Result<Vec<Vector3<f64>>> {
    let mut tokens = body.split_whitespace();
    let mut next = |what: &str| -> Result<f64> {
        let t = tokens
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("unexpected end of data reading {what}")))?;
        t.parse().map_err(|_| parse_err(path, 0, format!("`{t}` is not a number")))
    };
    let mut out = Vec::new();
    for (e, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let mut v = [0.0; 3];
            for (p, prop) in el.properties.iter().enumerate() {
                match prop {
                    Property::Scalar(..) => {
                        let x = next(&el.name)?;
                        if e == vertex {
                            if let Some(k) = xyz.iter().position(|&i| i == p) {
                                v[k] = x;
                            }
                        }
                    }
                    Property::List(..) => {
                        let len = next(&el.name)? as usize;
                        for _ in 0..len {
                            next(&el.name)?;
                        }
                    }
                }
            }
            if e == vertex {
                out.push(Vector3::from(v));
            }
        }
        if e == vertex {
            break;
        }
    }
    Ok(out)
}

fn read_ply_binary(path: &Path, body: &[u8], elements: &[Element], vertex: usize, xyz: [usize; 3]) -> Result<Vec<Vector3<f64>>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body
            .get(pos..pos + n)
            .ok_or_else(|| parse_err(path, 0, "binary body shorter than the header declares"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    for (e, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let mut v = [0.0; 3];
            for (p, prop) in el.properties.iter().enumerate() {
                match *prop {
                    Property::Scalar(_, ty) => {
                        let x = ty.read_le(take(ty.size())?);
                        if e == vertex {
                            if let Some(k) = xyz.iter().position(|&i| i == p) {
                                v[k] = x;
                            }
                        }
                    }
                    Property::List(len_ty, item) => {
                        let len = len_ty.read_le(take(len_ty.size())?) as usize;
                        take(len * item.size())?;
                    }
                }
            }
            if e == vertex {
                out.push(Vector3::from(v));
            }
        }
        if e == vertex {
            break;
        }
    }
    Ok(out)
}

/// Writes one label per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a file with one non-negative integer label per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("`{}` is not a label", l.trim())))
        })
        .collect()
}

/// Writes the given primitives as one OBJ with an object per primitive.
pub fn write_obj(path: &Path, primitives: &[(usize, DsqParams)]) -> Result<()> {
    let mut out = Vec::new();
    let mut offset = 1;
    for (m, theta) in primitives {
        let mesh = primitive_mesh(theta);
        writeln!(out, "o primitive_{m}").expect("write to Vec");
        for v in &mesh.vertices {
            writeln!(out, "v {:.12e} {:.12e} {:.12e}", v.x, v.y, v.z).expect("write to Vec");
        }
        for t in &mesh.triangles {
            writeln!(out, "f {} {} {}", t[0] + offset, t[1] + offset, t[2] + offset).expect("write to Vec");
        }
        offset += mesh.vertices.len();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Which files [`export_result`] writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    pub labels: bool,
    pub meshes: bool,
    pub report: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            labels: true,
            meshes: true,
            report: true,
        }
    }
}

/// A primitive as stored in the report, in raw coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPrimitive {
    pub index: usize,
    pub params: DsqParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportAbstractions {
    pub instance: Vec<ReportPrimitive>,
    pub semantic: Vec<ReportPrimitive>,
    pub repeatable: Vec<ReportPrimitive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub points: usize,
    pub kept_primitives: usize,
    pub instance_segments: usize,
    pub semantic_segments: usize,
}

/// JSON run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub source: Option<PathBuf>,
    pub config: FitConfig,
    pub normalization: Normalization,
    pub existence: Vec<bool>,
    pub repeat: Vec<usize>,
    pub mirror_planes: Vec<MirrorPlane>,
    pub primitives: ReportAbstractions,
    pub final_loss: LossBreakdown,
    pub history: Vec<HistoryEntry>,
    pub diagnostic: Option<String>,
    pub summary: OutputSummary,
}

fn distinct(labels: &[usize]) -> usize {
    labels.iter().collect::<std::collections::BTreeSet<_>>().len()
}

impl RunReport {
    pub fn new(result: &FitResult, cloud: &PointCloud, config: &FitConfig) -> Self {
        let denorm = |theta: &[DsqParams]| {
            result
                .masked(theta)
                .into_iter()
                .map(|(index, t)| ReportPrimitive {
                    index,
                    params: cloud.normalization.denormalize(t),
                })
                .collect()
        };
        Self {
            source: cloud.source.clone(),
            config: config.clone(),
            normalization: cloud.normalization,
            existence: result.existence.clone(),
            repeat: result.repeat.clone(),
            mirror_planes: result.mirror_planes.clone(),
            primitives: ReportAbstractions {
                instance: denorm(&result.theta_ins),
                semantic: denorm(&result.theta_sem),
                repeatable: denorm(&result.theta_rep),
            },
            final_loss: result.final_loss,
            history: result.history.clone(),
            diagnostic: result.diagnostic.clone(),
            summary: OutputSummary {
                points: result.instance_labels.len(),
                kept_primitives: result.kept().len(),
                instance_segments: distinct(&result.instance_labels),
                semantic_segments: distinct(&result.semantic_labels),
            },
        }
    }
}

/// Paths written by [`export_result`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportedFiles {
    pub instance_labels: Option<PathBuf>,
    pub semantic_labels: Option<PathBuf>,
    pub instance_mesh: Option<PathBuf>,
    pub semantic_mesh: Option<PathBuf>,
    pub repeatable_mesh: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Writes labels, one OBJ per abstraction (existing primitives only, raw
/// coordinates) and the JSON report into `out_dir`.
pub fn export_result(
    result: &FitResult,
    cloud: &PointCloud,
    config: &FitConfig,
    out_dir: &Path,
    options: &ExportOptions,
) -> Result<ExportedFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = ExportedFiles::default();
    if options.labels {
        let ins = out_dir.join("instance.labels");
        let sem = out_dir.join("semantic.labels");
        write_labels(&ins, &result.instance_labels)?;
        write_labels(&sem, &result.semantic_labels)?;
        files.instance_labels = Some(ins);
        files.semantic_labels = Some(sem);
    }
    let report = RunReport::new(result, cloud, config);
    if options.meshes {
        let abstractions = [
            ("instance.obj", &report.primitives.instance, &mut files.instance_mesh),
            ("semantic.obj", &report.primitives.semantic, &mut files.semantic_mesh),
            ("repeatable.obj", &report.primitives.repeatable, &mut files.repeatable_mesh),
        ];
        for (name, prims, slot) in abstractions {
            let path = out_dir.join(name);
            let list: Vec<(usize, DsqParams)> = prims.iter().map(|p| (p.index, p.params)).collect();
            write_obj(&path, &list)?;
            *slot = Some(path);
        }
    }
    if options.report {
        let path = out_dir.join("report.json");
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        files.report = Some(path);
    }
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Configuration file of a run. Every field mirrors a command-line flag;
/// flags override the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub export: ExportOptions,
    /// Metric names for `eval`.
    pub metrics: Vec<String>,
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks numeric ranges and that every input exists.
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        for p in &self.inputs {
            if !p.is_file() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Parses OBJ `v` records of an exported mesh, grouped by `o` objects.
pub fn read_obj_objects(path: &Path) -> Result<Vec<(String, Vec<Vector3<f64>>)>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, Vec<Vector3<f64>>)> = Vec::new();
    for (i, line) in s.lines().enumerate() {
        let mut f = line.split_whitespace();
        match f.next() {
            Some("o") => out.push((f.next().unwrap_or_default().to_string(), Vec::new())),
            Some("v") => {
                let p = parse_coords(path, i + 1, f)?;
                match out.last_mut() {
                    Some(o) => o.1.push(p),
                    None => out.push((String::new(), vec![p])),
                }
            }
            _ => {}
        }
    }
    Ok(out)
}
