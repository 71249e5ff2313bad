//! Correspondence loss, teacher-alignment loss and their analytic gradients.
//!
//! Both losses are built on cosine similarity `S(a, b)`, whose gradient is
//! `∂S/∂a = b / (|a||b|) - S a / |a|²` (and symmetrically for `b`).
//!
//! Evaluation is split into fixed-size shards of pairs or cells that run in
//! parallel; shard results are merged in shard order, so values and
//! gradients do not depend on the number of threads.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::patch_factors;
use crate::metrics::{dot, norm, NORM_EPS};
use crate::tensor_io::{read_tensor, write_tensor, Tensor, WriteOptions};
use crate::voxel::PairSet;

/// Pairs or cells per parallel shard. Fixed so reductions are reproducible.
const SHARD: usize = 64;

/// Per-channel mean over integer patches.
pub fn avg_pool_2d(t: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap> {
    let (ph, pw) = patch_factors((t.rows, t.cols), target)?;
    let (th, tw) = target;
    let mut out = FeatureMap::zeros(th, tw, t.dim);
    let area = (ph * pw) as f64;
    for r in 0..th {
        for c in 0..tw {
            let dst = r * tw + c;
            for v in r * ph..(r + 1) * ph {
                for u in c * pw..(c + 1) * pw {
                    let src = v * t.cols + u;
                    for (o, x) in out.cell_mut(dst).iter_mut().zip(t.cell(src)) {
                        *o += x;
                    }
                }
            }
            out.cell_mut(dst).iter_mut().for_each(|o| *o /= area);
        }
    }
    Ok(out)
}

/// Two-layer projection `W2 · relu(W1 f + b1) + b2` from student to teacher space.
///
/// Weights are row-major: `w1` is `[hidden, d_in]`, `w2` is `[d_out, hidden]`.
/// The same struct doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpAlign {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub init_seed: Option<u64>,
}

pub const ACTIVATION: &str = "relu";

/// Hidden width used when none is configured.
pub fn default_hidden(d_in: usize) -> usize {
    2 * d_in
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MlpAlign {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        MlpAlign {
            d_in,
            hidden,
            d_out,
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d_out * hidden],
            b2: vec![0.0; d_out],
            init_seed: None,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn random(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(d_in, hidden, d_out);
        let l1 = Uniform::new_inclusive(-1.0, 1.0);
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = s1 * l1.sample(&mut rng));
        m.b1.iter_mut().for_each(|w| *w = s1 * l1.sample(&mut rng));
        m.w2.iter_mut().for_each(|w| *w = s2 * l1.sample(&mut rng));
        m.b2.iter_mut().for_each(|w| *w = s2 * l1.sample(&mut rng));
        m.init_seed = Some(seed);
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in, self.hidden, self.d_out)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters concatenated as `w1, b1, w2, b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn params(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    fn hidden_pre(&self, f: &[f64], z: &mut [f64]) {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = dot(&self.w1[j * self.d_in..(j + 1) * self.d_in], f) + self.b1[j];
        }
    }

    fn output(&self, act: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(&self.w2[i * self.hidden..(i + 1) * self.hidden], act) + self.b2[i];
        }
    }

    /// Hidden preactivations `W1 f + b1`.
    pub fn preactivations(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_input(f)?;
        let mut z = vec![0.0; self.hidden];
        self.hidden_pre(f, &mut z);
        Ok(z)
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.preactivations(f)?;
        z.iter_mut().for_each(|x| *x = relu(*x));
        let mut y = vec![0.0; self.d_out];
        self.output(&z, &mut y);
        Ok(y)
    }

    fn check_input(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.d_in {
            return Err(Error::Shape(format!(
                "MLP expects input dim {}, got {}",
                self.d_in,
                f.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpMeta {
    pub schema: u32,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub activation: String,
    pub init_seed: Option<u64>,
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

/// Writes the four parameter tensors (f64) and a JSON meta file `<stem>.json`.
pub fn write_mlp(m: &MlpAlign, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = |p: &str| format!("{stem}_{p}.c3d");
    let tensors = [
        (name("w1"), vec![m.hidden, m.d_in], &m.w1),
        (name("b1"), vec![m.hidden], &m.b1),
        (name("w2"), vec![m.d_out, m.hidden], &m.w2),
        (name("b2"), vec![m.d_out], &m.b2),
    ];
    for (file, dims, data) in &tensors {
        let t = Tensor::from_f64(dims.clone(), data.to_vec())?;
        write_tensor(&t, dir.join(file), WriteOptions::default())?;
    }
    let meta = MlpMeta {
        schema: 1,
        d_in: m.d_in,
        hidden: m.hidden,
        d_out: m.d_out,
        activation: ACTIVATION.to_owned(),
        init_seed: m.init_seed,
        w1: tensors[0].0.clone(),
        b1: tensors[1].0.clone(),
        w2: tensors[2].0.clone(),
        b2: tensors[3].0.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_mlp(meta_path: impl AsRef<Path>) -> Result<MlpAlign> {
    let path = meta_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: MlpMeta = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    if meta.schema != 1 || meta.activation != ACTIVATION {
        return Err(Error::Schema(format!(
            "unsupported MLP meta (schema {}, activation {})",
            meta.schema, meta.activation
        )));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let load = |file: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let t = read_tensor(dir.join(file))?;
        if t.dims() != dims {
            return Err(Error::Shape(format!("{file}: expected dims {dims:?}, got {:?}", t.dims())));
        }
        Ok(t.to_f64_vec())
    };
    Ok(MlpAlign {
        d_in: meta.d_in,
        hidden: meta.hidden,
        d_out: meta.d_out,
        w1: load(&meta.w1, &[meta.hidden, meta.d_in])?,
        b1: load(&meta.b1, &[meta.hidden])?,
        w2: load(&meta.w2, &[meta.d_out, meta.hidden])?,
        b2: load(&meta.b2, &[meta.d_out])?,
        init_seed: meta.init_seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Same layout as the student maps; exactly zero where nothing touches a cell.
    pub grad_features: Vec<FeatureMap>,
    pub grad_params: Option<MlpAlign>,
}

impl LossResult {
    fn zeros_for(features: &[FeatureMap]) -> Vec<FeatureMap> {
        features
            .iter()
            .map(|f| FeatureMap::zeros(f.rows, f.cols, f.dim))
            .collect()
    }
}

/// Adds `scale · ∂S/∂a` to `ga` and `scale · ∂S/∂b` to `gb`; returns `S`.
fn cosine_grad_into(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::DegenerateVector(format!("norms {na:e}, {nb:e}")));
    }
    let s = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    for k in 0..a.len() {
        ga[k] += scale * (b[k] * inv - s * a[k] / (na * na));
        gb[k] += scale * (a[k] * inv - s * b[k] / (nb * nb));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrWeights {
    pub positive: f64,
    pub negative: f64,
}

impl Default for CorrWeights {
    fn default() -> Self {
        CorrWeights {
            positive: 1.0,
            negative: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrBreakdown {
    /// Mean `1 - S` over positives.
    pub positive: f64,
    /// Mean `S` over negatives; zero when negatives are absent.
    pub negative: f64,
}

/// `w+ · mean(1 - S)` over positives plus `w- · mean(S)` over negatives.
///
/// `neg = None` is only accepted when `allow_missing_negatives` is set, in
/// which case the negative term is zero.
pub fn corr_loss(
    pos: &PairSet,
    neg: Option<&PairSet>,
    features: &[FeatureMap],
    weights: CorrWeights,
    allow_missing_negatives: bool,
) -> Result<(LossResult, CorrBreakdown)> {
    if pos.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let neg = neg.filter(|n| !n.is_empty());
    if neg.is_none() && !allow_missing_negatives {
        return Err(Error::EmptyPairs);
    }
    let mut grads = LossResult::zeros_for(features);

    let mut accumulate = |set: &PairSet, scale: f64| -> Result<f64> {
        let shards: Vec<(f64, Vec<f64>)> = set
            .pairs
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut sum = 0.0;
                let mut local = Vec::new();
                for p in chunk {
                    let a = features[p.a.frame].cell(p.a.cell);
                    let b = features[p.b.frame].cell(p.b.cell);
                    let start = local.len();
                    local.resize(start + a.len() + b.len(), 0.0);
                    let (ga, gb) = local[start..].split_at_mut(a.len());
                    sum += cosine_grad_into(a, b, scale, ga, gb)?;
                }
                Ok((sum, local))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for (chunk, (sum, local)) in set.pairs.chunks(SHARD).zip(shards) {
            total += sum;
            let mut off = 0;
            for p in chunk {
                let da = features[p.a.frame].dim;
                let db = features[p.b.frame].dim;
                axpy(1.0, &local[off..off + da], grads[p.a.frame].cell_mut(p.a.cell));
                axpy(1.0, &local[off + da..off + da + db], grads[p.b.frame].cell_mut(p.b.cell));
                off += da + db;
            }
        }
        Ok(total)
    };

    let n_pos = pos.len() as f64;
    let pos_sum = accumulate(pos, -weights.positive / n_pos)?;
    let positive = 1.0 - pos_sum / n_pos;

    let negative = match neg {
        Some(n) => accumulate(n, weights.negative / n.len() as f64)? / n.len() as f64,
        None => 0.0,
    };

    let value = weights.positive * positive + weights.negative * negative;
    Ok((
        LossResult {
            value,
            grad_features: grads,
            grad_params: None,
        },
        CorrBreakdown { positive, negative },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignNorm {
    /// Divide by the number of valid cells.
    #[default]
    ValidCells,
    /// Divide by `N · H' · W'`, counting invalid cells too.
    AllCells,
}

/// Negative mean cosine between `MLP(student)` and the pooled teacher over valid cells.
///
/// `teacher` must already be pooled to the student grid. `valid[i][p]` selects
/// the cells that participate.
pub fn align_loss(
    student: &[FeatureMap],
    teacher: &[FeatureMap],
    m: &MlpAlign,
    valid: &[Vec<bool>],
    norm_mode: AlignNorm,
    param_grads: bool,
) -> Result<LossResult> {
    if student.len() != teacher.len() || student.len() != valid.len() {
        return Err(Error::Shape(format!(
            "frame counts differ: {} student, {} teacher, {} masks",
            student.len(),
            teacher.len(),
            valid.len()
        )));
    }
    for (i, ((s, t), v)) in student.iter().zip(teacher).zip(valid).enumerate() {
        if s.rows != t.rows || s.cols != t.cols || v.len() != s.cells() {
            return Err(Error::Shape(format!("frame {i}: student, teacher and mask grids disagree")));
        }
        if s.dim != m.d_in || t.dim != m.d_out {
            return Err(Error::Shape(format!(
                "frame {i}: dims {}→{} do not match MLP {}→{}",
                s.dim, t.dim, m.d_in, m.d_out
            )));
        }
    }
    let n_valid: usize = valid.iter().map(|v| v.iter().filter(|&&x| x).count()).sum();
    if n_valid == 0 {
        return Err(Error::EmptyMask);
    }
    let denom = match norm_mode {
        AlignNorm::ValidCells => n_valid,
        AlignNorm::AllCells => student.iter().map(FeatureMap::cells).sum(),
    } as f64;

    let cells: Vec<(usize, usize)> = valid
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.iter().enumerate().filter(|(_, &ok)| ok).map(move |(p, _)| (i, p)))
        .collect();
    let shards: Vec<AlignShard> = cells
        .par_chunks(SHARD)
        .map(|chunk| align_shard(chunk, student, teacher, m, -1.0 / denom, param_grads))
        .collect::<Result<_>>()?;

    let mut grads = LossResult::zeros_for(student);
    let mut gp = param_grads.then(|| m.zeros_like());
    let mut sum = 0.0;
    for (chunk, shard) in cells.chunks(SHARD).zip(shards) {
        sum += shard.sum;
        for (&(i, p), g) in chunk.iter().zip(shard.grad_features.chunks_exact(m.d_in)) {
            grads[i].cell_mut(p).copy_from_slice(g);
        }
        if let (Some(total), Some(part)) = (gp.as_mut(), shard.grad_params) {
            for (t, q) in total.params_mut().into_iter().zip(part.params()) {
                axpy(1.0, q, t);
            }
        }
    }

    Ok(LossResult {
        value: -sum / denom,
        grad_features: grads,
        grad_params: gp,
    })
}

struct AlignShard {
    sum: f64,
    /// One `d_in` block per cell of the shard, in order.
    grad_features: Vec<f64>,
    grad_params: Option<MlpAlign>,
}

fn align_shard(
    cells: &[(usize, usize)],
    student: &[FeatureMap],
    teacher: &[FeatureMap],
    m: &MlpAlign,
    scale: f64,
    param_grads: bool,
) -> Result<AlignShard> {
    let (h, dt) = (m.hidden, m.d_out);
    let mut z = vec![0.0; h];
    let mut act = vec![0.0; h];
    let mut y = vec![0.0; dt];
    let mut gy = vec![0.0; dt];
    let mut gt = vec![0.0; dt];
    let mut dz = vec![0.0; h];
    let mut sum = 0.0;
    let mut grad_features = vec![0.0; cells.len() * m.d_in];
    let mut gp = param_grads.then(|| m.zeros_like());

    for (&(i, p), gf) in cells.iter().zip(grad_features.chunks_exact_mut(m.d_in)) {
        let f = student[i].cell(p);
        let t = teacher[i].cell(p);
        m.hidden_pre(f, &mut z);
        for (a, &zj) in act.iter_mut().zip(&z) {
            *a = relu(zj);
        }
        m.output(&act, &mut y);

        gy.iter_mut().for_each(|g| *g = 0.0);
        let s = cosine_grad_into(&y, t, scale, &mut gy, &mut gt).map_err(|e| match e {
            Error::DegenerateVector(msg) => Error::DegenerateVector(format!("frame {i} cell {p}: {msg}")),
            e => e,
        })?;
        sum += s;

        // back through W2 and the rectifier (zero subgradient at 0)
        dz.iter_mut().for_each(|d| *d = 0.0);
        for (r, &g) in gy.iter().enumerate() {
            axpy(g, &m.w2[r * h..(r + 1) * h], &mut dz);
        }
        for (d, &zj) in dz.iter_mut().zip(&z) {
            if zj <= 0.0 {
                *d = 0.0;
            }
        }
        for (j, &d) in dz.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &m.w1[j * m.d_in..(j + 1) * m.d_in], gf);
            }
        }
        if let Some(g) = gp.as_mut() {
            for (r, &gyr) in gy.iter().enumerate() {
                axpy(gyr, &act, &mut g.w2[r * h..(r + 1) * h]);
                g.b2[r] += gyr;
            }
            for (j, &d) in dz.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, f, &mut g.w1[j * m.d_in..(j + 1) * m.d_in]);
                    g.b1[j] += d;
                }
            }
        }
    }
    Ok(AlignShard {
        sum,
        grad_features,
        grad_params: gp,
    })
}

/// Central-difference check: max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` returns the value and analytic gradient at a point.
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match the point");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        probe[k] = x[k] + eps;
        let (plus, _) = f(&probe);
        probe[k] = x[k] - eps;
        let (minus, _) = f(&probe);
        probe[k] = x[k];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
