//! On-disk formats: splat PLY, cameras.json, PNG and raw float images,
//! model checkpoints and the dataset directory layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{CameraModel, PoseW2C};
use crate::gradients::{LeafGroup, ParamSet};
use crate::image::Image;
use crate::model::Model;
use crate::splat::{normalize_quat, sh_coeff_count, sh_degree_for, GaussianPrimitive, Provenance, SplatScene};
use crate::synth::{CameraRig, Dataset, RigView, SceneSpec, Split};
use crate::train::Adam;
use crate::view_adapt::{HyperNet, HyperNetConfig, RefineConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"VASPCKPT";
const FLOAT_IMAGE_MAGIC: &[u8; 8] = b"VASPFIMG";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY at byte {offset}: {reason}")]
    MalformedPly { offset: usize, reason: String },
    #[error("unsupported PLY layout: {0}")]
    UnsupportedLayout(String),
    #[error("schema error at {0}")]
    Schema(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint has sh_degree {file} but {expected} was requested")]
    ShDegreeMismatch { file: usize, expected: usize },
    #[error("image: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

// ---------------------------------------------------------------- PLY

fn ply_property_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (k - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Binary little-endian splat PLY with float32 properties.
pub fn ply_to_bytes(scene: &SplatScene) -> Vec<u8> {
    let k = scene.primitives.first().map_or(1, |g| g.sh.len());
    let names = ply_property_names(k);
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        scene.len()
    );
    for n in &names {
        out.push_str(&format!("property float {n}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    bytes.reserve(scene.len() * names.len() * 4);
    let mut push = |v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
    for g in &scene.primitives {
        g.mu.iter().for_each(|&v| push(v));
        (0..3).for_each(|_| push(0.0));
        g.sh[0].iter().for_each(|&v| push(v));
        // f_rest is channel-major: all red coefficients first
        for c in 0..3 {
            for coeff in &g.sh[1..] {
                push(coeff[c]);
            }
        }
        push(g.logit_opacity);
        g.log_scale.iter().for_each(|&v| push(v));
        g.rot.iter().for_each(|&v| push(v));
    }
    bytes
}

#[derive(Debug, Clone, Copy)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap_or([0; 8])),
        }
    }
}

/// Parse a splat PLY. With `target_degree`, lower-degree files are zero
/// padded; higher-degree files are rejected rather than truncated.
pub fn ply_from_bytes(bytes: &[u8], target_degree: Option<usize>) -> Result<SplatScene, IoError> {
    let malformed = |offset: usize, reason: &str| IoError::MalformedPly {
        offset,
        reason: reason.to_string(),
    };
    let marker = b"end_header\n";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| malformed(bytes.len(), "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|e| malformed(e.valid_up_to(), "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(malformed(0, "missing 'ply' magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    let mut offset = 4;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(IoError::UnsupportedLayout(format!("format {other}"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(IoError::UnsupportedLayout("duplicate vertex element".into()));
                }
                count = Some(n.parse().map_err(|_| malformed(offset, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", name, _] => {
                if count.is_none() {
                    return Err(IoError::UnsupportedLayout(format!("element '{name}' before vertex")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(IoError::UnsupportedLayout("list property in vertex element".into()))
            }
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty).ok_or_else(|| IoError::UnsupportedLayout(format!("property type '{ty}'")))?;
                props.push((name.to_string(), t));
            }
            ["property", ..] => {}
            _ => return Err(malformed(offset, &format!("unrecognised header line '{line}'"))),
        }
        offset += line.len() + 1;
    }
    let n = count.ok_or_else(|| IoError::UnsupportedLayout("no vertex element".into()))?;
    let find = |name: &str| -> Result<usize, IoError> {
        props
            .iter()
            .position(|(p, _)| p == name)
            .ok_or_else(|| IoError::UnsupportedLayout(format!("missing property '{name}'")))
    };
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, t) in &props {
        offsets.push(stride);
        stride += t.size();
    }
    let required = |names: &[&str]| names.iter().map(|n| find(n)).collect::<Result<Vec<_>, _>>();
    let pos = required(&["x", "y", "z"])?;
    let dc = required(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let opacity = find("opacity")?;
    let scale = required(&["scale_0", "scale_1", "scale_2"])?;
    let rot = required(&["rot_0", "rot_1", "rot_2", "rot_3"])?;
    let mut rest = Vec::new();
    while let Ok(i) = find(&format!("f_rest_{}", rest.len())) {
        rest.push(i);
    }
    if rest.len() % 3 != 0 {
        return Err(IoError::UnsupportedLayout(format!("{} f_rest properties is not a multiple of 3", rest.len())));
    }
    let k_file = rest.len() / 3 + 1;
    let file_degree =
        sh_degree_for(k_file).ok_or_else(|| IoError::UnsupportedLayout(format!("{k_file} SH coefficients is not a square")))?;
    let degree = match target_degree {
        Some(d) if d < file_degree => return Err(IoError::ShDegreeMismatch { file: file_degree, expected: d }),
        Some(d) => d,
        None => file_degree,
    };
    let k = sh_coeff_count(degree);
    let needed = header_end + n * stride;
    if bytes.len() < needed {
        let complete = (bytes.len() - header_end) / stride.max(1);
        return Err(malformed(
            bytes.len(),
            &format!("truncated after {complete} of {n} vertices (expected {needed} bytes)"),
        ));
    }
    let mut prims = Vec::with_capacity(n);
    for v in 0..n {
        let base = header_end + v * stride;
        let get = |i: usize| props[i].1.read(&bytes[base + offsets[i]..]);
        let mut sh = vec![[0.0; 3]; k];
        sh[0] = [get(dc[0]), get(dc[1]), get(dc[2])];
        for c in 0..3 {
            for j in 1..k_file {
                sh[j][c] = get(rest[c * (k_file - 1) + j - 1]);
            }
        }
        let q = [get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])];
        let rot = normalize_quat(&q).ok_or_else(|| malformed(base + offsets[rot[0]], "zero quaternion"))?;
        prims.push(GaussianPrimitive {
            mu: [get(pos[0]), get(pos[1]), get(pos[2])],
            rot,
            log_scale: [get(scale[0]), get(scale[1]), get(scale[2])],
            logit_opacity: get(opacity),
            sh,
        });
    }
    Ok(SplatScene::new(prims))
}

pub fn write_ply(path: &Path, scene: &SplatScene) -> Result<(), IoError> {
    write_atomic(path, &ply_to_bytes(scene))
}

pub fn read_ply(path: &Path, target_degree: Option<usize>) -> Result<SplatScene, IoError> {
    ply_from_bytes(&read_bytes(path)?, target_degree)
}

// ---------------------------------------------------------------- cameras

fn num(v: f64) -> String {
    if v == 0.0 {
        // avoid "-0e0" spelling differences; sign of zero is irrelevant here
        "0".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn cameras_to_json(rig: &CameraRig) -> String {
    let mut s = String::from("{\n  \"cameras\": [\n");
    for (i, v) in rig.views.iter().enumerate() {
        let m = v.pose.to_matrix4();
        let rows: Vec<String> = m
            .iter()
            .map(|r| format!("[{}]", r.iter().map(|&x| num(x)).collect::<Vec<_>>().join(", ")))
            .collect();
        s.push_str(&format!(
            "    {{\"fx\": {}, \"fy\": {}, \"cx\": {}, \"cy\": {}, \"width\": {}, \"height\": {}, \"w2c\": [{}], \"split\": \"{}\"}}",
            num(v.cam.fx),
            num(v.cam.fy),
            num(v.cam.cx),
            num(v.cam.cy),
            v.cam.width,
            v.cam.height,
            rows.join(", "),
            split_name(v.split)
        ));
        s.push_str(if i + 1 < rig.views.len() { ",\n" } else { "\n" });
    }
    s.push_str("  ]\n}\n");
    s
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn cameras_from_json(text: &str) -> Result<CameraRig, IoError> {
    let root: Value = serde_json::from_str(text)?;
    let cams = root
        .get("cameras")
        .and_then(Value::as_array)
        .ok_or_else(|| IoError::Schema("cameras".into()))?;
    let mut views = Vec::with_capacity(cams.len());
    for (i, c) in cams.iter().enumerate() {
        let field = |name: &str| format!("cameras[{i}].{name}");
        let f = |name: &str| -> Result<f64, IoError> {
            c.get(name).and_then(Value::as_f64).ok_or_else(|| IoError::Schema(field(name)))
        };
        let u = |name: &str| -> Result<u32, IoError> {
            c.get(name)
                .and_then(Value::as_u64)
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| IoError::Schema(field(name)))
        };
        let (fx, fy, cx, cy) = (f("fx")?, f("fy")?, f("cx")?, f("cy")?);
        let (width, height) = (u("width")?, u("height")?);
        let rows = c
            .get("w2c")
            .and_then(Value::as_array)
            .filter(|r| r.len() == 4)
            .ok_or_else(|| IoError::Schema(field("w2c")))?;
        let mut m = [[0.0; 4]; 4];
        for (r, row) in rows.iter().enumerate() {
            let vals = row
                .as_array()
                .filter(|v| v.len() == 4)
                .ok_or_else(|| IoError::Schema(format!("{}[{r}]", field("w2c"))))?;
            for (k, x) in vals.iter().enumerate() {
                m[r][k] = x.as_f64().ok_or_else(|| IoError::Schema(format!("{}[{r}][{k}]", field("w2c"))))?;
            }
        }
        let split = match c.get("split").and_then(Value::as_str) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(IoError::Schema(field("split"))),
        };
        let r = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
        let pose = PoseW2C::new(r, [m[0][3], m[1][3], m[2][3]]).map_err(|e| IoError::Schema(format!("{}: {e}", field("w2c"))))?;
        let cam = CameraModel::new(fx, fy, cx, cy, width, height).map_err(|e| IoError::Schema(format!("{}: {e}", field("fx"))))?;
        views.push(RigView { pose, cam, split });
    }
    Ok(CameraRig { views })
}

// ---------------------------------------------------------------- images

/// Clamp to `[0,1]` and quantise to 8 bits. Returns the number of clamped samples.
pub fn png_to_bytes(img: &Image) -> Result<(Vec<u8>, usize), IoError> {
    let mut clamped = 0;
    let data: Vec<u8> = img
        .data
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * 255.0).round() as u8
        })
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
        let mut w = enc.write_header().map_err(|e| IoError::Image(e.to_string()))?;
        w.write_image_data(&data).map_err(|e| IoError::Image(e.to_string()))?;
    }
    Ok((out, clamped))
}

pub fn png_from_bytes(bytes: &[u8]) -> Result<Image, IoError> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| IoError::Image(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| IoError::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::Image(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(IoError::Image(format!("unsupported colour type {other:?}"))),
    };
    let mut img = Image::new(info.width, info.height);
    for p in 0..(info.width * info.height) as usize {
        for c in 0..3 {
            let src = if channels < 3 { 0 } else { c };
            img.data[p * 3 + c] = buf[p * channels + src] as f64 / 255.0;
        }
    }
    Ok(img)
}

/// Lossless float image: magic, width, height (u32 LE), then f64 LE samples.
pub fn float_image_to_bytes(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 8);
    out.extend_from_slice(FLOAT_IMAGE_MAGIC);
    out.extend_from_slice(&img.width.to_le_bytes());
    out.extend_from_slice(&img.height.to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn float_image_from_bytes(bytes: &[u8]) -> Result<Image, IoError> {
    if bytes.len() < 16 || &bytes[..8] != FLOAT_IMAGE_MAGIC {
        return Err(IoError::Image("not a float image".into()));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap_or_default());
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap_or_default());
    let n = w as usize * h as usize * 3;
    if bytes.len() != 16 + n * 8 {
        return Err(IoError::Image(format!("expected {} bytes, found {}", 16 + n * 8, bytes.len())));
    }
    let data = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default())).collect();
    Ok(Image { width: w, height: h, data })
}

// ---------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub sh_degree: usize,
    pub gaussians: usize,
    pub provenance: bool,
    /// Head shape; `None` for static models.
    pub hyper: Option<HyperNetConfig>,
    pub refine: RefineConfig,
    pub seed: u64,
    /// Group names and lengths of the optimiser state, when present.
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub groups: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub optimizer: Option<Adam>,
}

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        sh_degree: m.scene.sh_degree(),
        gaussians: m.scene.len(),
        provenance: m.scene.provenance.is_some(),
        hyper: m.hyper.as_ref().map(|h| h.config),
        refine: m.refine,
        seed: ck.seed,
        optimizer: ck.optimizer.as_ref().map(|a| OptimizerHeader {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            groups: a.m.groups.iter().map(|(g, v)| (g.name().to_string(), v.len())).collect(),
        }),
    };
    let json = serde_json::to_vec(&header).unwrap_or_default();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for g in &m.scene.primitives {
        push_f64s(&mut out, &g.mu);
        push_f64s(&mut out, &g.rot);
        push_f64s(&mut out, &g.log_scale);
        push_f64s(&mut out, &[g.logit_opacity]);
        for c in &g.sh {
            push_f64s(&mut out, c);
        }
    }
    if let Some(p) = &m.scene.provenance {
        for e in p {
            out.extend_from_slice(&(e.view as u64).to_le_bytes());
            out.extend_from_slice(&(e.pixel as u64).to_le_bytes());
        }
    }
    if let Some(h) = &m.hyper {
        for block in [&h.context, &h.gen_w1, &h.gen_b1, &h.gen_w2, &h.gen_b2] {
            push_f64s(&mut out, block);
        }
    }
    if let Some(a) = &ck.optimizer {
        for set in [&a.m, &a.v] {
            for (_, v) in &set.groups {
                push_f64s(&mut out, v);
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            IoError::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap_or_default()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| IoError::Checkpoint("block too large".into()))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default())).collect())
    }
}

/// Parse a checkpoint. `expected_degree` fails fast on a degree mismatch.
pub fn checkpoint_from_bytes(bytes: &[u8], expected_degree: Option<usize>) -> Result<Checkpoint, IoError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(IoError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap_or_default());
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = cur.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen)?)?;
    if let Some(d) = expected_degree.filter(|&d| d != header.sh_degree) {
        return Err(IoError::ShDegreeMismatch {
            file: header.sh_degree,
            expected: d,
        });
    }
    let k = sh_coeff_count(header.sh_degree);
    let mut prims = Vec::with_capacity(header.gaussians);
    for _ in 0..header.gaussians {
        let v = cur.f64s(11 + 3 * k)?;
        prims.push(GaussianPrimitive {
            mu: [v[0], v[1], v[2]],
            rot: [v[3], v[4], v[5], v[6]],
            log_scale: [v[7], v[8], v[9]],
            logit_opacity: v[10],
            sh: v[11..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        });
    }
    let scene = if header.provenance {
        let mut prov = Vec::with_capacity(header.gaussians);
        for _ in 0..header.gaussians {
            prov.push(Provenance {
                view: cur.u64()? as usize,
                pixel: cur.u64()? as usize,
            });
        }
        SplatScene::with_provenance(prims, prov).map_err(|e| IoError::Checkpoint(e.to_string()))?
    } else {
        SplatScene::new(prims)
    };
    let hyper = match header.hyper {
        Some(config) => {
            if config.sh_degree != header.sh_degree {
                return Err(IoError::Checkpoint("head and base SH degrees differ".into()));
            }
            let p = config.layout().param_count();
            let (f, h) = (config.feature_dim, config.gen_hidden);
            Some(HyperNet {
                config,
                context: cur.f64s(header.gaussians * f)?,
                gen_w1: cur.f64s(h * f)?,
                gen_b1: cur.f64s(h)?,
                gen_w2: cur.f64s(p * h)?,
                gen_b2: cur.f64s(p)?,
            })
        }
        None => None,
    };
    let optimizer = match &header.optimizer {
        Some(oh) => {
            let groups: Vec<LeafGroup> = oh
                .groups
                .iter()
                .map(|(name, _)| {
                    LeafGroup::ALL
                        .into_iter()
                        .find(|g| g.name() == name)
                        .ok_or_else(|| IoError::Checkpoint(format!("unknown parameter group '{name}'")))
                })
                .collect::<Result<_, _>>()?;
            let mut read_set = || -> Result<ParamSet, IoError> {
                let mut set = ParamSet { groups: Vec::new() };
                for (g, (_, len)) in groups.iter().zip(&oh.groups) {
                    set.groups.push((*g, cur.f64s(*len)?));
                }
                Ok(set)
            };
            let m = read_set()?;
            let v = read_set()?;
            Some(Adam {
                beta1: oh.beta1,
                beta2: oh.beta2,
                eps: oh.eps,
                t: oh.t,
                m,
                v,
            })
        }
        None => None,
    };
    if cur.pos != bytes.len() {
        return Err(IoError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let model = Model {
        scene,
        hyper,
        refine: header.refine,
    };
    Ok(Checkpoint {
        model,
        seed: header.seed,
        optimizer,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), IoError> {
    write_atomic(path, &checkpoint_to_bytes(ck))
}

pub fn read_checkpoint(path: &Path, expected_degree: Option<usize>) -> Result<Checkpoint, IoError> {
    checkpoint_from_bytes(&read_bytes(path)?, expected_degree)
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn image_stem(i: usize) -> String {
    format!("view_{i:03}")
}

/// Write `scene.json`, `cameras.json`, `splits.json` and `images/`
/// (an 8-bit PNG plus a lossless float copy per view).
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<(), IoError> {
    write_atomic(&root.join("scene.json"), serde_json::to_string_pretty(&ds.spec)?.as_bytes())?;
    write_atomic(&root.join("cameras.json"), cameras_to_json(&ds.rig).as_bytes())?;
    let splits = Splits {
        train: ds.indices(Split::Train),
        test: ds.indices(Split::Test),
    };
    write_atomic(&root.join("splits.json"), serde_json::to_string_pretty(&splits)?.as_bytes())?;
    let images = root.join("images");
    for (i, img) in ds.images.iter().enumerate() {
        let (png, _) = png_to_bytes(img)?;
        write_atomic(&images.join(format!("{}.png", image_stem(i))), &png)?;
        write_atomic(&images.join(format!("{}.fimg", image_stem(i))), &float_image_to_bytes(img))?;
    }
    Ok(())
}

/// Load a dataset directory; float images are preferred, PNGs are the fallback.
pub fn read_dataset(root: &Path) -> Result<Dataset, IoError> {
    let spec: SceneSpec = serde_json::from_slice(&read_bytes(&root.join("scene.json"))?)?;
    let text = String::from_utf8_lossy(&read_bytes(&root.join("cameras.json"))?).into_owned();
    let rig = cameras_from_json(&text)?;
    let mut images = Vec::with_capacity(rig.views.len());
    for (i, v) in rig.views.iter().enumerate() {
        let stem = root.join("images").join(image_stem(i));
        let fimg = stem.with_extension("fimg");
        let img = if fimg.exists() {
            float_image_from_bytes(&read_bytes(&fimg)?)?
        } else {
            png_from_bytes(&read_bytes(&stem.with_extension("png"))?)?
        };
        if img.width != v.cam.width || img.height != v.cam.height {
            return Err(IoError::Schema(format!("cameras[{i}]: image is {}x{}", img.width, img.height)));
        }
        images.push(img);
    }
    if let Ok(bytes) = read_bytes(&root.join("splits.json")) {
        let splits: Splits = serde_json::from_slice(&bytes)?;
        let mut expect = Splits {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (i, v) in rig.views.iter().enumerate() {
            match v.split {
                Split::Train => expect.train.push(i),
                Split::Test => expect.test.push(i),
            }
        }
        if splits != expect {
            return Err(IoError::Schema("splits.json disagrees with cameras.json".into()));
        }
    }
    Ok(Dataset { spec, rig, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{RigSpec, SceneSpec};
    use crate::view_adapt::HyperNetConfig;
    use proptest::prelude::*;

    fn scene(n: usize, degree: usize, seed: u64) -> SplatScene {
        let mut s = seed;
        let mut r = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let prims = (0..n)
            .map(|_| {
                let mut g = GaussianPrimitive::isotropic([r(), r(), 3.0 + r()], 0.1 + 0.05 * r(), 0.5, degree);
                g.rot = [r(), r(), r(), r() + 2.0];
                for c in g.sh.iter_mut() {
                    *c = [r(), r(), r()];
                }
                g
            })
            .collect();
        SplatScene::new(prims)
    }

    fn f32_round(x: f64) -> f64 {
        x as f32 as f64
    }

    #[test]
    fn ply_header_property_order() {
        let bytes = ply_to_bytes(&scene(1, 1, 1));
        let text = String::from_utf8_lossy(&bytes[..bytes.windows(10).position(|w| w == b"end_header").unwrap()]).into_owned();
        let props: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("property float ")).collect();
        assert_eq!(
            props,
            [
                "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1", "f_rest_2", "f_rest_3",
                "f_rest_4", "f_rest_5", "f_rest_6", "f_rest_7", "f_rest_8", "opacity", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3"
            ]
        );
    }

    #[test]
    fn ply_round_trip_is_exact_at_f32() {
        let s = scene(20, 3, 2);
        let back = ply_from_bytes(&ply_to_bytes(&s), None).unwrap();
        for (a, b) in s.primitives.iter().zip(&back.primitives) {
            assert_eq!(b.mu, a.mu.map(f32_round));
            assert_eq!(b.log_scale, a.log_scale.map(f32_round));
            assert_eq!(b.logit_opacity, f32_round(a.logit_opacity));
            for (x, y) in a.sh.iter().zip(&b.sh) {
                assert_eq!(*y, x.map(f32_round));
            }
            assert_eq!(b.rot, normalize_quat(&a.rot.map(f32_round)).unwrap());
        }
        // a second trip through stored values is a fixed point
        let again = ply_from_bytes(&ply_to_bytes(&back), None).unwrap();
        assert_eq!(ply_to_bytes(&again), ply_to_bytes(&back));
    }

    #[test]
    fn ply_pads_lower_degree_and_rejects_higher() {
        let s = scene(3, 3, 3);
        let bytes = ply_to_bytes(&s);
        let up = ply_from_bytes(&bytes, Some(4)).unwrap();
        for (a, b) in s.primitives.iter().zip(&up.primitives) {
            assert_eq!(b.sh.len(), 25);
            for k in 0..16 {
                assert_eq!(b.sh[k], a.sh[k].map(f32_round));
            }
            assert!(b.sh[16..].iter().all(|c| *c == [0.0; 3]));
        }
        assert!(matches!(
            ply_from_bytes(&bytes, Some(2)),
            Err(IoError::ShDegreeMismatch { file: 3, expected: 2 })
        ));
    }

    #[test]
    fn ply_truncation_reports_offset() {
        let bytes = ply_to_bytes(&scene(4, 1, 4));
        let cut = &bytes[..bytes.len() - 7];
        match ply_from_bytes(cut, None) {
            Err(IoError::MalformedPly { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
        let text = String::from_utf8_lossy(&bytes).replace("property float opacity\n", "property float opacityx\n");
        // same length header so the data block still parses; opacity is now missing
        let err = ply_from_bytes(&text.into_bytes(), None);
        assert!(matches!(err, Err(IoError::UnsupportedLayout(_)) | Err(IoError::MalformedPly { .. })));
    }

    #[test]
    fn ply_missing_property_is_unsupported() {
        let bytes = ply_to_bytes(&scene(2, 0, 5));
        let pos = bytes.windows(14).position(|w| w == b"property float").unwrap();
        let mut edited = bytes[..pos].to_vec();
        // drop the "x" property line and one float per vertex
        let rest = &bytes[pos + b"property float x\n".len()..];
        edited.extend_from_slice(rest);
        assert!(matches!(ply_from_bytes(&edited, None), Err(IoError::UnsupportedLayout(m)) if m.contains("'x'")));
    }

    fn rig() -> CameraRig {
        crate::synth::make_rig(&RigSpec::desk(3, 2, 16, 4)).unwrap()
    }

    #[test]
    fn cameras_round_trip() {
        let r = rig();
        let back = cameras_from_json(&cameras_to_json(&r)).unwrap();
        assert_eq!(back.views.len(), r.views.len());
        for (a, b) in r.views.iter().zip(&back.views) {
            let (ma, mb) = (a.pose.to_matrix4(), b.pose.to_matrix4());
            for i in 0..4 {
                for j in 0..4 {
                    assert!((ma[i][j] - mb[i][j]).abs() <= 1e-15);
                }
            }
            assert_eq!(a.cam, b.cam);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn identity_pose_serialises_to_identity() {
        let mut r = rig();
        r.views.truncate(1);
        r.views[0].pose = PoseW2C::identity();
        let v: Value = serde_json::from_str(&cameras_to_json(&r)).unwrap();
        let m: Vec<Vec<f64>> = serde_json::from_value(v["cameras"][0]["w2c"].clone()).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                assert_eq!(*x, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn missing_camera_field_names_it() {
        let text = cameras_to_json(&rig()).replacen("\"fx\": ", "\"fz\": ", 1);
        match cameras_from_json(&text) {
            Err(IoError::Schema(f)) => assert_eq!(f, "cameras[0].fx"),
            other => panic!("{other:?}"),
        }
        let text = cameras_to_json(&rig()).replacen("\"width\": 16", "\"width\": \"16\"", 1);
        assert!(matches!(cameras_from_json(&text), Err(IoError::Schema(f)) if f == "cameras[0].width"));
    }

    #[test]
    fn image_round_trips() {
        let mut img = Image::new(5, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.0173).fract();
        }
        assert_eq!(float_image_from_bytes(&float_image_to_bytes(&img)).unwrap(), img);
        let (png, clamped) = png_to_bytes(&img).unwrap();
        assert_eq!(clamped, 0);
        let back = png_from_bytes(&png).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 255.0);
        img.data[0] = 1.7;
        img.data[1] = -0.2;
        let (png, clamped) = png_to_bytes(&img).unwrap();
        assert_eq!(clamped, 2);
        let back = png_from_bytes(&png).unwrap();
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[1], 0.0);
    }

    fn model_with_head() -> Model {
        let s = scene(6, 2, 9);
        let mut cfg = HyperNetConfig::new(2);
        cfg.feature_dim = 4;
        cfg.gen_hidden = 5;
        let mut h = HyperNet::new(6, cfg, 3);
        h.gen_w2.iter_mut().enumerate().for_each(|(i, w)| *w += 1e-3 * i as f64);
        Model::with_hyper(s, h, RefineConfig::default()).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = model_with_head();
        let params = ParamSet::gather(
            &model,
            None,
            &crate::gradients::GradRequest {
                gaussians: true,
                hyper: true,
                poses: false,
            },
        );
        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        adam.t = 7;
        adam.m.groups[0].1[0] = std::f64::consts::PI;
        let ck = Checkpoint {
            model,
            seed: 42,
            optimizer: Some(adam),
        };
        let bytes = checkpoint_to_bytes(&ck);
        let back = checkpoint_from_bytes(&bytes, Some(2)).unwrap();
        assert_eq!(back, ck);
        assert_eq!(checkpoint_to_bytes(&back), bytes);
        assert!(matches!(
            checkpoint_from_bytes(&bytes, Some(4)),
            Err(IoError::ShDegreeMismatch { file: 2, expected: 4 })
        ));
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3], None).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let mut spec = SceneSpec::desk(3);
        spec.gaussian_count = 20;
        let (ds, _) = Dataset::generate(&spec, &RigSpec::desk(2, 1, 8, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.spec, ds.spec);
        for (a, b) in ds.rig.views.iter().zip(&back.rig.views) {
            assert_eq!(a.split, b.split);
            assert!(a.pose.rotation_error_deg(&b.pose) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn float_image_round_trip(w in 1u32..6, h in 1u32..6, seed in any::<u64>()) {
            let mut img = Image::new(w, h);
            let mut s = seed | 1;
            for v in img.data.iter_mut() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                *v = f64::from_bits(s >> 2);
            }
            let back = float_image_from_bytes(&float_image_to_bytes(&img)).unwrap();
            prop_assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn ply_round_trip_any_degree(degree in 0usize..5, n in 1usize..8, seed in any::<u64>()) {
            let s = scene(n, degree, seed);
            let back = ply_from_bytes(&ply_to_bytes(&s), Some(degree)).unwrap();
            prop_assert_eq!(back.len(), n);
            prop_assert_eq!(back.sh_degree(), degree);
        }
    }
}
