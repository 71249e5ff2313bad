//! Depth unprojection to world coordinates, coordinate pooling, and the
//! sinusoidal 3D positional encoding added to feature maps.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tensor_io::{Scene, Tensor};

pub type Vec3 = [f64; 3];

/// Pinhole intrinsics `[fx s cx; 0 fy cy; 0 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics(pub [[f64; 3]; 3]);

impl Intrinsics {
    pub fn from_row_major(k: &[f64; 9]) -> Self {
        Intrinsics([[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]])
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Intrinsics([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    /// `K^-1 (u, v, 1)` using the upper-triangular structure of `K`.
    pub fn back_project(&self, u: f64, v: f64) -> Vec3 {
        let [[fx, s, cx], [_, fy, cy], _] = self.0;
        let y = (v - cy) / fy;
        let x = (u - cx - s * y) / fx;
        [x, y, 1.0]
    }

    /// `K p`, before the perspective divide.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }
}

/// Rigid 4x4 transform; camera-to-world when used as an extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub [[f64; 4]; 4]);

impl Pose {
    pub const IDENTITY: Pose = Pose([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    pub fn from_row_major(t: &[f64; 16]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&t[4 * i..4 * i + 4]);
        }
        Pose(m)
    }

    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Vec3) -> Self {
        let mut m = Self::IDENTITY.0;
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        Pose(m)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[4 * i..4 * i + 4].copy_from_slice(&self.0[i]);
        }
        out
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// Inverse of a rigid transform: `[R^T, -R^T t]`.
    pub fn rigid_inverse(&self) -> Pose {
        let m = &self.0;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = m[j][i];
            }
        }
        let t = [m[0][3], m[1][3], m[2][3]];
        let mut nt = [0.0; 3];
        for i in 0..3 {
            nt[i] = -(r[i][0] * t[0] + r[i][1] * t[1] + r[i][2] * t[2]);
        }
        Pose::from_rotation_translation(r, nt)
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Pose(m)
    }
}

/// World point seen at pixel `(u, v)` with the given depth, or `None` when the
/// depth is missing (zero, negative or non-finite).
pub fn unproject_pixel(u: f64, v: f64, depth: f64, k: &Intrinsics, t: &Pose) -> Option<Vec3> {
    if !(depth.is_finite() && depth > 0.0) {
        return None;
    }
    let ray = k.back_project(u, v);
    let cam = [depth * ray[0], depth * ray[1], depth * ray[2]];
    Some(t.transform_point(cam))
}

/// Per-cell world coordinates with a validity mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub rows: usize,
    pub cols: usize,
    pub coords: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl CoordinateMap {
    pub fn invalid(rows: usize, cols: usize) -> Self {
        CoordinateMap {
            rows,
            cols,
            coords: vec![[0.0; 3]; rows * cols],
            valid: vec![false; rows * cols],
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get(&self, index: usize) -> Option<Vec3> {
        self.valid[index].then(|| self.coords[index])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `[rows, cols, 4]` f64 tensor: xyz followed by a 0/1 validity flag.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.cells() * 4);
        for (c, &ok) in self.coords.iter().zip(&self.valid) {
            data.extend_from_slice(c);
            data.push(if ok { 1.0 } else { 0.0 });
        }
        Tensor::from_f64(vec![self.rows, self.cols, 4], data).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[rows, cols, 4] = t.dims() else {
            return Err(Error::Shape(format!("coordinate tensor must be [R, C, 4], got {:?}", t.dims())));
        };
        let raw = t.to_f64_vec();
        let mut cm = CoordinateMap::invalid(rows, cols);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            cm.valid[i] = chunk[3] != 0.0;
            if cm.valid[i] {
                cm.coords[i] = [chunk[0], chunk[1], chunk[2]];
            }
        }
        Ok(cm)
    }
}

/// Unprojects every pixel of a `[H, W]` depth map.
pub fn unproject_frame(depth: &Tensor, k: &Intrinsics, t: &Pose) -> Result<CoordinateMap> {
    let &[rows, cols] = depth.dims() else {
        return Err(Error::Shape(format!("depth must be [H, W], got {:?}", depth.dims())));
    };
    let mut cm = CoordinateMap::invalid(rows, cols);
    for v in 0..rows {
        for u in 0..cols {
            let i = v * cols + u;
            if let Some(p) = unproject_pixel(u as f64, v as f64, depth.get_f64(i), k, t) {
                cm.coords[i] = p;
                cm.valid[i] = true;
            }
        }
    }
    Ok(cm)
}

pub(crate) fn patch_factors(src: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = src;
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!(
            "target grid {th}x{tw} does not evenly divide source grid {h}x{w}"
        )));
    }
    Ok((h / th, w / tw))
}

/// Downsamples by averaging the valid coordinates in each patch; a target cell
/// is invalid only when its whole patch is.
pub fn pool_coordinates(cm: &CoordinateMap, target: (usize, usize)) -> Result<CoordinateMap> {
    let (ph, pw) = patch_factors((cm.rows, cm.cols), target)?;
    let (th, tw) = target;
    let mut out = CoordinateMap::invalid(th, tw);
    for r in 0..th {
        for c in 0..tw {
            let mut sum = [0.0; 3];
            let mut n = 0usize;
            for v in r * ph..(r + 1) * ph {
                for u in c * pw..(c + 1) * pw {
                    let i = v * cm.cols + u;
                    if cm.valid[i] {
                        for a in 0..3 {
                            sum[a] += cm.coords[i][a];
                        }
                        n += 1;
                    }
                }
            }
            if n > 0 {
                let j = r * tw + c;
                out.coords[j] = sum.map(|s| s / n as f64);
                out.valid[j] = true;
            }
        }
    }
    Ok(out)
}

/// World coordinates of every frame, pooled to that frame's feature grid.
pub fn feature_coordinate_maps(scene: &Scene) -> Result<Vec<CoordinateMap>> {
    scene
        .frames
        .par_iter()
        .map(|fr| {
            let k = Intrinsics::from_row_major(&fr.intrinsics);
            let t = Pose::from_row_major(&fr.extrinsics);
            let full = unproject_frame(&fr.depth, &k, &t)?;
            let d = fr.features.dims();
            if d.len() != 3 {
                return Err(Error::Shape(format!("frame {}: features must be [H', W', d]", fr.id)));
            }
            pool_coordinates(&full, (d[0], d[1]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Tight box around all valid cells, or `None` when there are none.
    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a CoordinateMap>) -> Option<Aabb> {
        let mut bb: Option<Aabb> = None;
        for cm in maps {
            for (p, &ok) in cm.coords.iter().zip(&cm.valid) {
                if !ok {
                    continue;
                }
                let b = bb.get_or_insert(Aabb { min: *p, max: *p });
                for a in 0..3 {
                    b.min[a] = b.min[a].min(p[a]);
                    b.max[a] = b.max[a].max(p[a]);
                }
            }
        }
        bb
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let e = self.extent();
        [
            (p[0] - self.min[0]) / e[0],
            (p[1] - self.min[1]) / e[1],
            (p[2] - self.min[2]) / e[2],
        ]
    }
}

/// Per-axis sinusoidal encoding of bbox-normalized coordinates.
///
/// Each axis gets `dim / 6` angular frequencies spaced geometrically from
/// `2π / scale_max` up to `2π / scale_min`; the output is laid out axis-major
/// with interleaved `(sin, cos)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEncoding {
    dim: usize,
    scale_min: f64,
    scale_max: f64,
    bbox: Aabb,
    freqs: Vec<f64>,
}

impl PosEncoding {
    pub fn new(dim: usize, scale_min: f64, scale_max: f64, bbox: Aabb) -> Result<Self> {
        if dim == 0 || dim % 6 != 0 {
            return Err(Error::Config(format!("encoding dim {dim} must be a positive multiple of 6")));
        }
        if !(scale_min > 0.0 && scale_min < scale_max && scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < scale_min < scale_max, got {scale_min}, {scale_max}"
            )));
        }
        if bbox.extent().iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("bbox is degenerate: {bbox:?}")));
        }
        let n = dim / 6;
        let lo = 2.0 * PI / scale_max;
        let ratio = scale_max / scale_min;
        let freqs = (0..n)
            .map(|j| {
                if n == 1 {
                    lo
                } else {
                    lo * ratio.powf(j as f64 / (n - 1) as f64)
                }
            })
            .collect();
        Ok(PosEncoding {
            dim,
            scale_min,
            scale_max,
            bbox,
            freqs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn max_frequency(&self) -> f64 {
        *self.freqs.last().expect("at least one frequency")
    }

    pub fn encode(&self, p: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.encode_into(p, &mut out);
        out
    }

    fn encode_into(&self, p: Vec3, out: &mut [f64]) {
        let x = self.bbox.normalize(p);
        let n = self.freqs.len();
        for a in 0..3 {
            for (j, w) in self.freqs.iter().enumerate() {
                let (s, c) = (w * x[a]).sin_cos();
                out[a * 2 * n + 2 * j] = s;
                out[a * 2 * n + 2 * j + 1] = c;
            }
        }
    }
}

/// `features + φ(coords)` at valid cells; invalid cells pass through.
pub fn inject_position(features: &FeatureMap, cm: &CoordinateMap, enc: &PosEncoding) -> Result<FeatureMap> {
    if features.rows != cm.rows || features.cols != cm.cols {
        return Err(Error::Shape(format!(
            "feature grid {}x{} vs coordinate grid {}x{}",
            features.rows, features.cols, cm.rows, cm.cols
        )));
    }
    if features.dim != enc.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} vs encoding dim {}",
            features.dim,
            enc.dim()
        )));
    }
    let mut out = features.clone();
    let mut code = vec![0.0; enc.dim()];
    for i in 0..cm.cells() {
        if let Some(p) = cm.get(i) {
            enc.encode_into(p, &mut code);
            for (f, e) in out.cell_mut(i).iter_mut().zip(&code) {
                *f += e;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn unproject_hand_values() {
        let k = Intrinsics::pinhole(2.0, 2.0, 1.0, 1.0);
        let p = unproject_pixel(3.0, 5.0, 4.0, &k, &Pose::IDENTITY).unwrap();
        assert!(close(p, [4.0, 8.0, 4.0], 1e-12));

        let t = Pose::from_rotation_translation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [1.0, 0.0, 0.0]);
        let p = unproject_pixel(3.0, 5.0, 4.0, &k, &t).unwrap();
        assert!(close(p, [5.0, 8.0, 4.0], 1e-12));

        assert!(unproject_pixel(3.0, 5.0, 0.0, &k, &t).is_none());
        assert!(unproject_pixel(3.0, 5.0, f64::NAN, &k, &t).is_none());
        assert!(unproject_pixel(3.0, 5.0, -1.0, &k, &t).is_none());
    }

    #[test]
    fn unproject_small_frame() {
        let k = Intrinsics::pinhole(1.0, 1.0, 0.0, 0.0);
        let depth = Tensor::from_f32(vec![2, 2], vec![1.0, 1.0, f32::NAN, 1.0]).unwrap();
        let cm = unproject_frame(&depth, &k, &Pose::IDENTITY).unwrap();
        assert_eq!(cm.get(0), Some([0.0, 0.0, 1.0]));
        assert_eq!(cm.get(1), Some([1.0, 0.0, 1.0]));
        assert_eq!(cm.get(2), None);
        assert_eq!(cm.get(3), Some([1.0, 1.0, 1.0]));
        assert!(unproject_frame(&Tensor::from_f32(vec![4], vec![1.0; 4]).unwrap(), &k, &Pose::IDENTITY).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut cm = CoordinateMap::invalid(2, 2);
        cm.coords = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [2.0, 2.0, 0.0]];
        cm.valid = vec![true; 4];
        let p = pool_coordinates(&cm, (1, 1)).unwrap();
        assert_eq!(p.get(0), Some([1.0, 1.0, 0.0]));

        cm.valid = vec![false, false, false, true];
        cm.coords[3] = [5.0, 5.0, 5.0];
        assert_eq!(pool_coordinates(&cm, (1, 1)).unwrap().get(0), Some([5.0, 5.0, 5.0]));

        cm.valid = vec![false; 4];
        assert_eq!(pool_coordinates(&cm, (1, 1)).unwrap().get(0), None);

        assert!(matches!(pool_coordinates(&cm, (3, 1)), Err(Error::Shape(_))));
        assert!(matches!(
            pool_coordinates(&CoordinateMap::invalid(4, 6), (3, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pooling_same_dims_is_identity() {
        let mut cm = CoordinateMap::invalid(2, 3);
        for i in 0..6 {
            cm.valid[i] = i % 2 == 0;
            if cm.valid[i] {
                cm.coords[i] = [i as f64 * 0.3, -(i as f64), 1.5];
            }
        }
        assert_eq!(pool_coordinates(&cm, (2, 3)).unwrap(), cm);
    }

    fn unit_box() -> Aabb {
        Aabb {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    #[test]
    fn encoding_at_bbox_min() {
        let enc = PosEncoding::new(24, 0.05, 2.0, unit_box()).unwrap();
        let code = enc.encode([0.0; 3]);
        for pair in code.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn encoding_single_frequency() {
        // scale_max = 1 gives ω = 2π for the single frequency
        let enc = PosEncoding::new(6, 0.5, 1.0, unit_box()).unwrap();
        assert_eq!(enc.frequencies(), &[2.0 * PI]);
        let code = enc.encode([0.25, 0.0, 0.0]);
        assert!((code[0] - 1.0).abs() < 1e-15);
        assert!(code[1].abs() < 1e-15);
        assert_eq!(&code[2..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_band_is_geometric() {
        let enc = PosEncoding::new(18, 0.25, 4.0, unit_box()).unwrap();
        let f = enc.frequencies();
        assert!((f[0] - 2.0 * PI / 4.0).abs() < 1e-12);
        assert!((f[1] - 2.0 * PI / 1.0).abs() < 1e-12);
        assert!((f[2] - 2.0 * PI / 0.25).abs() < 1e-12);
    }

    #[test]
    fn encoding_config_errors() {
        assert!(matches!(PosEncoding::new(8, 0.1, 1.0, unit_box()), Err(Error::Config(_))));
        assert!(matches!(PosEncoding::new(6, 1.0, 0.1, unit_box()), Err(Error::Config(_))));
        let flat = Aabb {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
        };
        assert!(matches!(PosEncoding::new(6, 0.1, 1.0, flat), Err(Error::Config(_))));
    }

    #[test]
    fn injection_examples() {
        let enc = PosEncoding::new(6, 0.5, 1.0, unit_box()).unwrap();
        let mut cm = CoordinateMap::invalid(1, 2);
        cm.coords[0] = [0.25, 0.5, 0.0];
        cm.valid[0] = true;
        let zeros = FeatureMap::zeros(1, 2, 6);
        let out = inject_position(&zeros, &cm, &enc).unwrap();
        assert_eq!(out.cell(0), enc.encode([0.25, 0.5, 0.0]).as_slice());
        assert_eq!(out.cell(1), &[0.0; 6]);

        let ones = FeatureMap {
            data: vec![1.0; 12],
            ..zeros.clone()
        };
        let none = CoordinateMap::invalid(1, 2);
        assert_eq!(inject_position(&ones, &none, &enc).unwrap(), ones);

        assert!(matches!(
            inject_position(&FeatureMap::zeros(1, 2, 12), &cm, &enc),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            inject_position(&FeatureMap::zeros(2, 2, 6), &cm, &enc),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pose_inverse_and_compose() {
        let c = 0.6f64;
        let s = 0.8f64;
        let t = Pose::from_rotation_translation([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [1.0, 2.0, 3.0]);
        let id = t.compose(&t.rigid_inverse());
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id.0[i][j] - e).abs() < 1e-12);
            }
        }
        assert_eq!(Pose::from_row_major(&t.to_row_major()), t);
    }

    #[test]
    fn coordinate_map_tensor_round_trip() {
        let mut cm = CoordinateMap::invalid(2, 1);
        cm.coords[1] = [1.0, 2.0, 3.0];
        cm.valid[1] = true;
        let t = cm.to_tensor();
        assert_eq!(t.dims(), &[2, 1, 4]);
        assert_eq!(CoordinateMap::from_tensor(&t).unwrap(), cm);
    }
}
