//! Binary tensor files, scene manifests and scene validation.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic   b"C3DTENS\0"
//! offset 8   u32     version (1)
//! offset 12  u32     dtype code (0 = f32, 1 = f64)
//! offset 16  u32     ndim
//! offset 20  u64 x ndim dims
//!            payload, row-major little-endian
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"C3DTENS\0";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;
pub const DEFAULT_VOXEL_SIZE: f64 = 0.1;
pub const DEFAULT_FRAME_BUDGET: usize = 32;

const MAX_NDIM: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major tensor of `f32` or `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("tensor dims must be non-empty".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("tensor dims must be positive, got {dims:?}")));
        }
        let count = element_count(&dims)
            .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))?;
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {count} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get_f64(&self, index: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[index] as f64,
            TensorData::F64(v) => v[index],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    /// Permit NaN/Inf in the payload (used for depth maps, where NaN marks a hole).
    pub allow_nonfinite: bool,
}

/// Serializes a tensor into the binary layout described at the module level.
pub fn encode_tensor(t: &Tensor, opts: WriteOptions) -> Result<Vec<u8>> {
    if !opts.allow_nonfinite && !t.is_finite() {
        return Err(Error::Format {
            offset: 0,
            message: "tensor contains non-finite values and allow_nonfinite is unset".into(),
        });
    }
    let header = 20 + 8 * t.dims.len();
    let mut out = Vec::with_capacity(header + t.len() * t.dtype().size_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&t.dtype().code().to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>, opts: WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t, opts)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a tensor from bytes. Errors carry the offset of the first violation.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(fail(8, format!("unsupported version {version}")));
    }
    let code = cur.u32("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| fail(12, format!("unknown dtype code {code}")))?;
    let ndim = cur.u32("ndim")?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(fail(16, format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let at = cur.pos;
        let d = cur.u64("dims")?;
        if d == 0 {
            return Err(fail(at, "zero-length dimension".into()));
        }
        let d = usize::try_from(d).map_err(|_| fail(at, format!("dimension {d} overflows")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| fail(at, "element count overflows".into()))?;
        if count.checked_mul(dtype.size_bytes()).is_none() {
            return Err(fail(at, "payload size overflows".into()));
        }
        dims.push(d);
    }
    let payload_len = count * dtype.size_bytes();
    let payload = cur.take(payload_len, "payload")?;
    if cur.pos != bytes.len() {
        return Err(fail(
            cur.pos,
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// One posed RGB-D view with its feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    /// `[H, W]`, meters; 0 or NaN marks missing depth.
    pub depth: Tensor,
    /// Row-major 3x3 pinhole matrix.
    pub intrinsics: [f64; 9],
    /// Row-major 4x4 camera-to-world transform.
    pub extrinsics: [f64; 16],
    /// `[H', W', d]` student features.
    pub features: Tensor,
    /// `[H'', W'', d_t]` teacher features.
    pub teacher_features: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frames: Vec<FrameRecord>,
    pub voxel_size: f64,
    pub frame_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for scene-level problems.
    pub frame_id: Option<String>,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    fn push(&mut self, frame_id: Option<&str>, field: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            frame_id: frame_id.map(str::to_owned),
            field: field.to_owned(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            match &v.frame_id {
                Some(id) => write!(f, "frame {id}: {}: {}", v.field, v.message)?,
                None => write!(f, "scene: {}: {}", v.field, v.message)?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct FrameShape {
    hw: (usize, usize),
    feat: (usize, usize, usize),
    teacher: Option<(usize, usize, usize)>,
}

fn validate_frame(fr: &FrameRecord, report: &mut ValidationReport) -> Option<FrameShape> {
    let id = Some(fr.id.as_str());

    let depth = match fr.depth.dims() {
        &[h, w] => Some((h, w)),
        d => {
            report.push(id, "depth", format!("expected dims [H, W], got {d:?}"));
            None
        }
    };

    let k = &fr.intrinsics;
    if !k.iter().all(|x| x.is_finite()) {
        report.push(id, "intrinsics", "non-finite entry");
    } else {
        if !(k[0] > 0.0 && k[4] > 0.0) {
            report.push(id, "intrinsics", format!("fx, fy must be positive, got {}, {}", k[0], k[4]));
        }
        if k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0 || k[3] != 0.0 {
            report.push(id, "intrinsics", "rows must be [fx s cx; 0 fy cy; 0 0 1]");
        }
    }

    let t = &fr.extrinsics;
    if !t.iter().all(|x| x.is_finite()) {
        report.push(id, "extrinsics", "non-finite entry");
    } else {
        let bottom = [t[12], t[13], t[14], t[15] - 1.0];
        if bottom.iter().any(|x| x.abs() > 1e-9) {
            report.push(
                id,
                "extrinsics",
                format!("bottom row must be (0,0,0,1), got ({},{},{},{})", t[12], t[13], t[14], t[15]),
            );
        }
        let r = |i: usize, j: usize| t[4 * i + j];
        let mut ortho_err: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|i| r(i, a) * r(i, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                ortho_err = ortho_err.max((dot - target).abs());
            }
        }
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1))
            - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if ortho_err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            report.push(
                id,
                "extrinsics",
                format!("rotation block is not a proper rotation (|R^T R - I| = {ortho_err:.3e}, det = {det})"),
            );
        }
    }

    let feat = match fr.features.dims() {
        &[h, w, d] => Some((h, w, d)),
        d => {
            report.push(id, "features", format!("expected dims [H', W', d], got {d:?}"));
            None
        }
    };
    if !fr.features.is_finite() {
        report.push(id, "features", "non-finite values");
    }

    if let (Some((h, w)), Some((fh, fw, _))) = (depth, feat) {
        if fh > h || fw > w || h % fh != 0 || w % fw != 0 {
            report.push(
                id,
                "features",
                format!("feature grid {fh}x{fw} must evenly divide depth grid {h}x{w}"),
            );
        }
    }

    let mut teacher = None;
    let mut teacher_ok = true;
    if let Some(tf) = &fr.teacher_features {
        match tf.dims() {
            &[th, tw, td] => {
                teacher = Some((th, tw, td));
                if let Some((fh, fw, _)) = feat {
                    if th < fh || tw < fw || th % fh != 0 || tw % fw != 0 {
                        report.push(
                            id,
                            "teacher_features",
                            format!("teacher grid {th}x{tw} must be an integer multiple of feature grid {fh}x{fw}"),
                        );
                    }
                }
            }
            d => {
                report.push(id, "teacher_features", format!("expected dims [H'', W'', d_t], got {d:?}"));
                teacher_ok = false;
            }
        }
        if !tf.is_finite() {
            report.push(id, "teacher_features", "non-finite values");
        }
    }

    // Shapes stay usable for cross-frame checks even when other fields are broken.
    match (depth, feat, teacher_ok) {
        (Some(hw), Some(feat), true) => Some(FrameShape { hw, feat, teacher }),
        _ => None,
    }
}

/// Checks every scene invariant without mutating; returns all violations found.
pub fn validate_scene(scene: &Scene) -> ValidationReport {
    let mut report = ValidationReport::default();
    if scene.frames.is_empty() {
        report.push(None, "frames", "scene needs at least one frame");
    }
    if !(scene.voxel_size > 0.0 && scene.voxel_size.is_finite()) {
        report.push(None, "voxel_size", format!("must be positive and finite, got {}", scene.voxel_size));
    }
    if scene.frame_budget == 0 {
        report.push(None, "frame_budget", "must be at least 1");
    }

    let mut seen = HashSet::new();
    let mut reference: Option<(String, FrameShape)> = None;
    for fr in &scene.frames {
        if !seen.insert(fr.id.as_str()) {
            report.push(Some(&fr.id), "id", "duplicate frame id");
        }
        let Some(shape) = validate_frame(fr, &mut report) else {
            continue;
        };
        match &reference {
            None => reference = Some((fr.id.clone(), shape)),
            Some((ref_id, ref_shape)) => {
                if shape.hw != ref_shape.hw {
                    report.push(
                        Some(&fr.id),
                        "depth",
                        format!("depth grid {:?} differs from frame {ref_id} {:?}", shape.hw, ref_shape.hw),
                    );
                }
                if shape.feat != ref_shape.feat {
                    report.push(
                        Some(&fr.id),
                        "features",
                        format!("feature dims {:?} differ from frame {ref_id} {:?}", shape.feat, ref_shape.feat),
                    );
                }
                if shape.teacher.is_some() != ref_shape.teacher.is_some() {
                    report.push(
                        Some(&fr.id),
                        "teacher_features",
                        format!("teacher presence differs from frame {ref_id}"),
                    );
                } else if shape.teacher != ref_shape.teacher {
                    report.push(
                        Some(&fr.id),
                        "teacher_features",
                        format!("teacher dims {:?} differ from frame {ref_id} {:?}", shape.teacher, ref_shape.teacher),
                    );
                }
            }
        }
    }
    report
}

/// Indices kept when uniformly subsampling `n` frames down to `budget`.
pub fn subsample_indices(n: usize, budget: usize) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    if budget == 1 {
        return vec![0];
    }
    (0..budget).map(|k| k * (n - 1) / (budget - 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub id: String,
    pub depth: String,
    pub intrinsics: Vec<f64>,
    pub extrinsics: Vec<f64>,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_features: Option<String>,
}

/// On-disk scene description; tensor paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    #[serde(default = "default_voxel_size")]
    pub voxel_size: f64,
    #[serde(default = "default_frame_budget")]
    pub frame_budget: usize,
    pub frames: Vec<ManifestFrame>,
}

fn default_voxel_size() -> f64 {
    DEFAULT_VOXEL_SIZE
}

fn default_frame_budget() -> usize {
    DEFAULT_FRAME_BUDGET
}

fn scene_id_from_path(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_owned())
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::Schema(format!(
            "unsupported schema {} (expected {MANIFEST_SCHEMA})",
            m.schema
        )));
    }
    for fr in &m.frames {
        if fr.intrinsics.len() != 9 {
            return Err(Error::Schema(format!(
                "frame {}: intrinsics needs 9 numbers, got {}",
                fr.id,
                fr.intrinsics.len()
            )));
        }
        if fr.extrinsics.len() != 16 {
            return Err(Error::Schema(format!(
                "frame {}: extrinsics needs 16 numbers, got {}",
                fr.id,
                fr.extrinsics.len()
            )));
        }
    }
    Ok(m)
}

fn load_frame(dir: &Path, mf: &ManifestFrame) -> Result<FrameRecord> {
    let teacher_features = match &mf.teacher_features {
        Some(p) => Some(read_tensor(dir.join(p))?),
        None => None,
    };
    Ok(FrameRecord {
        id: mf.id.clone(),
        depth: read_tensor(dir.join(&mf.depth))?,
        intrinsics: mf.intrinsics.as_slice().try_into().unwrap(),
        extrinsics: mf.extrinsics.as_slice().try_into().unwrap(),
        features: read_tensor(dir.join(&mf.features))?,
        teacher_features,
    })
}

/// Reads, subsamples and validates a scene manifest.
pub fn load_scene(manifest_path: impl AsRef<Path>) -> Result<Scene> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);

    let keep = subsample_indices(manifest.frames.len(), manifest.frame_budget.max(1));
    let frames = keep
        .par_iter()
        .map(|&i| load_frame(&dir, &manifest.frames[i]))
        .collect::<Result<Vec<_>>>()?;

    let scene = Scene {
        id: scene_id_from_path(path),
        frames,
        voxel_size: manifest.voxel_size,
        frame_budget: manifest.frame_budget,
    };
    let report = validate_scene(&scene);
    if !report.is_empty() {
        return Err(Error::Validation(report));
    }
    Ok(scene)
}

/// Writes every frame's tensors plus `scene.json` into `dir`; returns the manifest path.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for fr in &scene.frames {
        let depth = format!("{}_depth.c3d", fr.id);
        let features = format!("{}_feat.c3d", fr.id);
        write_tensor(&fr.depth, dir.join(&depth), WriteOptions { allow_nonfinite: true })?;
        write_tensor(&fr.features, dir.join(&features), WriteOptions::default())?;
        let teacher_features = match &fr.teacher_features {
            Some(t) => {
                let name = format!("{}_teach.c3d", fr.id);
                write_tensor(t, dir.join(&name), WriteOptions::default())?;
                Some(name)
            }
            None => None,
        };
        frames.push(ManifestFrame {
            id: fr.id.clone(),
            depth,
            intrinsics: fr.intrinsics.to_vec(),
            extrinsics: fr.extrinsics.to_vec(),
            features,
            teacher_features,
        });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        voxel_size: scene.voxel_size,
        frame_budget: scene.frame_budget,
        frames,
    };
    let path = dir.join("scene.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY4: [f64; 16] = [
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];

    fn frame(id: &str) -> FrameRecord {
        FrameRecord {
            id: id.into(),
            depth: Tensor::from_f32(vec![4, 4], vec![1.0; 16]).unwrap(),
            intrinsics: [2.0, 0.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0, 1.0],
            extrinsics: IDENTITY4,
            features: Tensor::from_f32(vec![2, 2, 3], vec![0.5; 12]).unwrap(),
            teacher_features: None,
        }
    }

    fn scene(frames: Vec<FrameRecord>) -> Scene {
        Scene {
            id: "t".into(),
            frames,
            voxel_size: 0.1,
            frame_budget: 32,
        }
    }

    #[test]
    fn single_element_file_is_32_bytes() {
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let bytes = encode_tensor(&t, WriteOptions::default()).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..8], b"C3DTENS\0");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        assert_eq!(&bytes[20..28], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[28..], &[0, 0, 0, 0]);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
    }

    #[test]
    fn nan_rejected_without_flag() {
        let t = Tensor::from_f32(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(encode_tensor(&t, WriteOptions::default()), Err(Error::Format { .. })));
        let bytes = encode_tensor(&t, WriteOptions { allow_nonfinite: true }).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        assert!(back.get_f64(1).is_nan());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let mut bytes = encode_tensor(&t, WriteOptions::default()).unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        match decode_tensor(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_payload_cites_lengths() {
        let t = Tensor::from_f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&t, WriteOptions::default()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_tensor(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 20 + 16);
                assert!(message.contains("expected 32 bytes, found 29"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_violations() {
        let t = Tensor::from_f32(vec![3], vec![0.0; 3]).unwrap();
        let good = encode_tensor(&t, WriteOptions::default()).unwrap();

        let mut b = good.clone();
        b[8] = 2;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 8, .. })));

        let mut b = good.clone();
        b[12] = 7;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 12, .. })));

        let mut b = good.clone();
        b[20..28].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 20, .. })));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode_tensor(&b), Err(Error::Format { .. })));

        // two huge dims whose product overflows
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&(1u64 << 40).to_le_bytes());
        b.extend_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 28, .. })));
    }

    #[test]
    fn tensor_constructor_checks_shape() {
        assert!(Tensor::from_f32(vec![], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f32(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn subsample_rule() {
        assert_eq!(subsample_indices(2, 32), vec![0, 1]);
        let idx = subsample_indices(64, 32);
        assert_eq!(idx.len(), 32);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(i, k * 63 / 31);
        }
        assert_eq!(idx[0], 0);
        assert_eq!(idx[31], 63);
        assert_eq!(subsample_indices(5, 1), vec![0]);
        assert_eq!(subsample_indices(idx.len(), 32), (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn valid_scene_has_empty_report() {
        assert!(validate_scene(&scene(vec![frame("a"), frame("b")])).is_empty());
    }

    #[test]
    fn depth_rank_violation_is_single_entry() {
        let mut f = frame("a");
        f.depth = Tensor::from_f32(vec![4, 4, 1], vec![1.0; 16]).unwrap();
        let r = validate_scene(&scene(vec![f]));
        assert_eq!(r.len(), 1, "{r}");
        assert_eq!(r.violations[0].field, "depth");
    }

    #[test]
    fn duplicate_id_is_single_entry() {
        let r = validate_scene(&scene(vec![frame("a"), frame("a")]));
        assert_eq!(r.len(), 1, "{r}");
        assert_eq!(r.violations[0].field, "id");
    }

    #[test]
    fn extrinsics_checks() {
        let mut f = frame("cam7");
        f.extrinsics[15] = 2.0;
        let r = validate_scene(&scene(vec![f]));
        assert_eq!(r.len(), 1, "{r}");
        assert_eq!(r.violations[0].frame_id.as_deref(), Some("cam7"));

        // reflection: det = -1
        let mut f = frame("m");
        f.extrinsics[0] = -1.0;
        let r = validate_scene(&scene(vec![f]));
        assert_eq!(r.len(), 1, "{r}");
        assert_eq!(r.violations[0].field, "extrinsics");
    }

    #[test]
    fn intrinsics_and_patch_checks() {
        let mut f = frame("a");
        f.intrinsics[0] = 0.0;
        assert_eq!(validate_scene(&scene(vec![f])).len(), 1);

        let mut f = frame("a");
        f.features = Tensor::from_f32(vec![3, 2, 3], vec![0.5; 18]).unwrap();
        assert_eq!(validate_scene(&scene(vec![f])).len(), 1);

        let mut f = frame("a");
        f.teacher_features = Some(Tensor::from_f32(vec![3, 4, 2], vec![0.5; 24]).unwrap());
        assert_eq!(validate_scene(&scene(vec![f])).len(), 1);
    }

    #[test]
    fn cross_frame_shape_mismatch() {
        let mut b = frame("b");
        b.features = Tensor::from_f32(vec![2, 2, 4], vec![0.5; 16]).unwrap();
        let r = validate_scene(&scene(vec![frame("a"), b]));
        assert_eq!(r.len(), 1, "{r}");
        assert_eq!(r.violations[0].frame_id.as_deref(), Some("b"));
    }

    #[test]
    fn scene_level_checks() {
        let mut s = scene(vec![]);
        s.voxel_size = 0.0;
        assert_eq!(validate_scene(&s).len(), 2);
    }

    #[test]
    fn manifest_is_strict() {
        let ok = r#"{"schema":1,"frames":[]}"#;
        let m = parse_manifest(ok).unwrap();
        assert_eq!(m.voxel_size, 0.1);
        assert_eq!(m.frame_budget, 32);

        assert!(matches!(parse_manifest(r#"{"frames":[]}"#), Err(Error::Schema(_))));
        assert!(matches!(parse_manifest(r#"{"schema":2,"frames":[]}"#), Err(Error::Schema(_))));
        assert!(matches!(
            parse_manifest(r#"{"schema":1,"frames":[],"extra":true}"#),
            Err(Error::Schema(_))
        ));
        let short_k = r#"{"schema":1,"frames":[{"id":"a","depth":"d","intrinsics":[1,0,0],
            "extrinsics":[1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1],"features":"f"}]}"#;
        assert!(matches!(parse_manifest(short_k), Err(Error::Schema(_))));
    }
}
