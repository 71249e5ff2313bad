//! Synthetic posed scenes and a descent loop over free student features.

use std::f64::consts::PI;

use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{feature_coordinate_maps, Intrinsics, Pose, Vec3};
use crate::losses::{
    align_loss, avg_pool_2d, corr_loss, default_hidden, AlignNorm, CorrWeights, MlpAlign,
};
use crate::metrics::{correspondence_score, scene_feature_maps, FeatureSource};
use crate::tensor_io::{FrameRecord, Scene, Tensor, DEFAULT_FRAME_BUDGET};
use crate::voxel::{
    build_voxel_grid, derive_seed, enumerate_positive_pairs, sample_negative_pairs, voxel_index,
    PairMode, PairSet, VoxelGrid, VoxelKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_views: usize,
    pub feat_rows: usize,
    pub feat_cols: usize,
    pub dim: usize,
    pub teacher_dim: usize,
    /// Depth pixels per feature cell along each axis.
    pub pixel_patch: usize,
    /// Teacher cells per feature cell along each axis.
    pub teacher_patch: usize,
    pub n_points: usize,
    /// Points each view tries to observe; must fit in the feature grid.
    pub points_per_view: usize,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub voxel_size: f64,
    /// Std-dev of additive Gaussian depth noise, meters.
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_views: 4,
            feat_rows: 16,
            feat_cols: 16,
            dim: 64,
            teacher_dim: 32,
            pixel_patch: 4,
            teacher_patch: 2,
            n_points: 300,
            points_per_view: 200,
            bbox_min: [0.0; 3],
            bbox_max: [1.0; 3],
            voxel_size: 0.1,
            depth_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        SynthSpec {
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        let counts = [
            ("n_views", self.n_views),
            ("feat_rows", self.feat_rows),
            ("feat_cols", self.feat_cols),
            ("dim", self.dim),
            ("teacher_dim", self.teacher_dim),
            ("pixel_patch", self.pixel_patch),
            ("teacher_patch", self.teacher_patch),
            ("n_points", self.n_points),
            ("points_per_view", self.points_per_view),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be at least 1")));
        }
        if (0..3).any(|a| !(self.bbox_max[a] > self.bbox_min[a])) {
            return Err(Error::Spec("bbox is degenerate".into()));
        }
        if !(self.voxel_size > 0.0) || !(self.depth_noise >= 0.0) {
            return Err(Error::Spec("voxel_size must be positive and depth_noise non-negative".into()));
        }
        let cells = self.feat_rows * self.feat_cols;
        if self.points_per_view > cells {
            return Err(Error::Spec(format!(
                "{} observed points per view exceed {cells} feature cells",
                self.points_per_view
            )));
        }
        if self.points_per_view > self.n_points {
            return Err(Error::Spec(format!(
                "{} observed points per view exceed {} scene points",
                self.points_per_view, self.n_points
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub points: Vec<Vec3>,
    /// Per frame, per feature cell: index of the observed scene point.
    pub observed: Vec<Vec<Option<usize>>>,
    /// Per frame, per depth pixel: world position the pixel was rendered from.
    pub pixel_points: Vec<Vec<Option<Vec3>>>,
    /// Per frame, per feature cell: voxel the cell falls into.
    pub voxels: Vec<Vec<Option<VoxelKey>>>,
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Camera-to-world pose at `eye` looking at `target`, OpenCV axes (x right, y down, z forward).
fn look_at(eye: Vec3, target: Vec3) -> Pose {
    let z = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
    let x = normalize(cross(z, [0.0, 0.0, 1.0]));
    let y = cross(z, x);
    let r = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
    Pose::from_rotation_translation(r, eye)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Renders `n_views` pinhole views of random points; teacher features are a
/// fixed random projection of each cell's voxel center, so they agree exactly
/// across views within a voxel, while student features are random unit vectors.
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SyntheticScene> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = spec.bbox_min;
    let hi = spec.bbox_max;
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let half_diag = 0.5 * (extent[0].powi(2) + extent[1].powi(2) + extent[2].powi(2)).sqrt();

    let points: Vec<Vec3> = (0..spec.n_points)
        .map(|_| std::array::from_fn(|a| rng.gen_range(lo[a]..hi[a])))
        .collect();

    let (rows, cols) = (spec.feat_rows, spec.feat_cols);
    let (h, w) = (rows * spec.pixel_patch, cols * spec.pixel_patch);
    let radius = 2.5 * half_diag;
    let half_fov = (half_diag / radius).asin() * 1.15;
    let f = 0.5 * (h.min(w) as f64) / half_fov.tan();
    let k = Intrinsics::pinhole(f, f, w as f64 / 2.0, h as f64 / 2.0);
    let noise = rand_distr::Normal::new(0.0, spec.depth_noise.max(1e-300)).expect("valid std-dev");

    let mut frames = Vec::with_capacity(spec.n_views);
    let mut observed = Vec::with_capacity(spec.n_views);
    let mut pixel_points = Vec::with_capacity(spec.n_views);
    for v in 0..spec.n_views {
        let az = 2.0 * PI * (v as f64 + rng.gen_range(-0.2..0.2)) / spec.n_views as f64;
        let el: f64 = rng.gen_range(0.25..0.8);
        let eye = [
            center[0] + radius * el.cos() * az.cos(),
            center[1] + radius * el.cos() * az.sin(),
            center[2] + radius * el.sin(),
        ];
        let jitter = 0.05 * half_diag;
        let target = std::array::from_fn(|a| center[a] + rng.gen_range(-jitter..jitter));
        let pose = look_at(eye, target);
        let world_to_cam = pose.rigid_inverse();

        let mut depth = vec![0.0f32; h * w];
        let mut cell_point = vec![None; rows * cols];
        let mut pix = vec![None; h * w];
        let mut order: Vec<usize> = (0..spec.n_points).collect();
        order.shuffle(&mut rng);
        for &pi in order.iter().take(spec.points_per_view) {
            let pc = world_to_cam.transform_point(points[pi]);
            if pc[2] <= 1e-6 {
                continue;
            }
            let img = k.apply(pc);
            let (uf, vf) = (img[0] / img[2], img[1] / img[2]);
            let (u, vv) = (uf.round(), vf.round());
            if u < 0.0 || vv < 0.0 || u >= w as f64 || vv >= h as f64 {
                continue;
            }
            let (u, vv) = (u as usize, vv as usize);
            let cell = (vv / spec.pixel_patch) * cols + u / spec.pixel_patch;
            if cell_point[cell].is_some() {
                continue;
            }
            let mut z = pc[2];
            if spec.depth_noise > 0.0 {
                z = (z + noise.sample(&mut rng)).max(1e-3);
            }
            let z32 = z as f32;
            depth[vv * w + u] = z32;
            cell_point[cell] = Some(pi);
            let ray = k.back_project(u as f64, vv as f64);
            let zc = z32 as f64;
            pix[vv * w + u] = Some(pose.transform_point([zc * ray[0], zc * ray[1], zc * ray[2]]));
        }

        let mut feats = Vec::with_capacity(rows * cols * spec.dim);
        for _ in 0..rows * cols {
            feats.extend(random_unit(&mut rng, spec.dim).into_iter().map(|x| x as f32));
        }
        frames.push(FrameRecord {
            id: format!("view{v:02}"),
            depth: Tensor::from_f32(vec![h, w], depth)?,
            intrinsics: k.to_row_major(),
            extrinsics: pose.to_row_major(),
            features: Tensor::from_f32(vec![rows, cols, spec.dim], feats)?,
            teacher_features: None,
        });
        observed.push(cell_point);
        pixel_points.push(pix);
    }

    let mut scene = Scene {
        id: format!("synth-{}", spec.seed),
        frames,
        voxel_size: spec.voxel_size,
        frame_budget: DEFAULT_FRAME_BUDGET.max(spec.n_views),
    };

    // Teacher targets come from the same geometry path the scorer uses.
    let maps = feature_coordinate_maps(&scene)?;
    let grid = build_voxel_grid(&maps, spec.voxel_size)?;
    let origin = grid.origin();
    let proj: Vec<f64> = (0..spec.teacher_dim * 4).map(|_| rng.sample(StandardNormal)).collect();
    let teacher_of = |key: VoxelKey| -> Vec<f32> {
        let idx = [key.ix, key.iy, key.iz];
        let mut u = [0.5; 4];
        for a in 0..3 {
            let c = origin[a] + (idx[a] as f64 + 0.5) * spec.voxel_size;
            u[a] = (c - lo[a]) / extent[a] - 0.5;
        }
        (0..spec.teacher_dim)
            .map(|r| (0..4).map(|c| proj[r * 4 + c] * u[c]).sum::<f64>() as f32)
            .collect()
    };

    let tp = spec.teacher_patch;
    let (trows, tcols) = (rows * tp, cols * tp);
    let mut voxels = Vec::with_capacity(spec.n_views);
    for (fr, cm) in scene.frames.iter_mut().zip(&maps) {
        let mut teacher = vec![0.0f32; trows * tcols * spec.teacher_dim];
        let mut keys = vec![None; rows * cols];
        for cell in 0..rows * cols {
            let value: Vec<f32> = match cm.get(cell) {
                Some(p) => {
                    let key = voxel_index(p, spec.voxel_size, origin);
                    keys[cell] = Some(key);
                    teacher_of(key)
                }
                None => random_unit(&mut rng, spec.teacher_dim).into_iter().map(|x| x as f32).collect(),
            };
            let (r, c) = (cell / cols, cell % cols);
            for tr in r * tp..(r + 1) * tp {
                for tc in c * tp..(c + 1) * tp {
                    let at = (tr * tcols + tc) * spec.teacher_dim;
                    teacher[at..at + spec.teacher_dim].copy_from_slice(&value);
                }
            }
        }
        fr.teacher_features = Some(Tensor::from_f32(vec![trows, tcols, spec.teacher_dim], teacher)?);
        voxels.push(keys);
    }

    Ok(SyntheticScene {
        scene,
        points,
        observed,
        pixel_points,
        voxels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Align,
    Corr,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Descent,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub eval_stride: usize,
    pub seed: u64,
    pub corr_weights: CorrWeights,
    pub align_norm: AlignNorm,
    /// Negative partners drawn per anchor cell, resampled every step.
    pub negatives_per_anchor: usize,
    /// MLP hidden width; `None` means twice the student dim.
    pub hidden: Option<usize>,
    /// Learning-rate multiplier for the MLP parameters (0 freezes them).
    pub mlp_lr_scale: f64,
    /// Decoupled decay on student features: each step scales them by `1 - lr * weight_decay`.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Align,
            steps: 500,
            lr: 100.0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
            eval_stride: 10,
            seed: 42,
            corr_weights: CorrWeights::default(),
            align_norm: AlignNorm::ValidCells,
            negatives_per_anchor: 8,
            hidden: None,
            mlp_lr_scale: 0.01,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn for_loss(loss: LossKind) -> Self {
        TrainConfig {
            loss,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.eval_stride == 0 {
            return Err(Error::Config("eval_stride must be at least 1".into()));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("momentum beta must be in [0, 1), got {beta}")));
            }
        }
        if !(self.mlp_lr_scale >= 0.0) {
            return Err(Error::Config("mlp_lr_scale must be non-negative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return Err(Error::Config(format!(
                "weight_decay must satisfy 0 <= lr * weight_decay < 1, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scene_id: String,
    pub evals: Vec<EvalPoint>,
    pub initial_score: f64,
    pub final_score: f64,
    pub positive_pairs: usize,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,score\n");
        for e in &self.evals {
            out.push_str(&format!("{},{},{}\n", e.step, e.loss, e.score));
        }
        out
    }
}

/// Report plus the optimized variables.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub features: Vec<FeatureMap>,
    pub mlp: Option<MlpAlign>,
}

struct Problem<'a> {
    cfg: &'a TrainConfig,
    grid: VoxelGrid,
    positives: PairSet,
    teacher: Vec<FeatureMap>,
    valid: Vec<Vec<bool>>,
}

impl Problem<'_> {
    fn negatives(&self, step: usize) -> Result<PairSet> {
        let seed = derive_seed(self.cfg.seed, &[step as u64]);
        sample_negative_pairs(&self.grid, self.cfg.negatives_per_anchor, seed)
    }

    /// Loss value and gradients at the current point.
    fn evaluate(
        &self,
        step: usize,
        features: &[FeatureMap],
        mlp: Option<&MlpAlign>,
    ) -> Result<(f64, Vec<FeatureMap>, Option<MlpAlign>)> {
        let want_mlp_grads = self.cfg.mlp_lr_scale > 0.0;
        let align = |features: &[FeatureMap]| {
            align_loss(
                features,
                &self.teacher,
                mlp.expect("align needs an MLP"),
                &self.valid,
                self.cfg.align_norm,
                want_mlp_grads,
            )
        };
        let corr = |features: &[FeatureMap]| -> Result<_> {
            let neg = if self.cfg.negatives_per_anchor > 0 && self.cfg.corr_weights.negative != 0.0 {
                Some(self.negatives(step)?)
            } else {
                None
            };
            corr_loss(&self.positives, neg.as_ref(), features, self.cfg.corr_weights, true).map(|r| r.0)
        };
        match self.cfg.loss {
            LossKind::Align => {
                let r = align(features)?;
                Ok((r.value, r.grad_features, r.grad_params))
            }
            LossKind::Corr => {
                let r = corr(features)?;
                Ok((r.value, r.grad_features, None))
            }
            LossKind::Both => {
                let a = align(features)?;
                let c = corr(features)?;
                let mut g = a.grad_features;
                for (ga, gc) in g.iter_mut().zip(&c.grad_features) {
                    ga.data.iter_mut().zip(&gc.data).for_each(|(x, y)| *x += y);
                }
                Ok((a.value + c.value, g, a.grad_params))
            }
        }
    }

    fn score(&self, features: &[FeatureMap]) -> Result<f64> {
        Ok(correspondence_score("", self.grid.voxel_size(), &self.positives, features)?.score)
    }
}

fn momentum_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, beta: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = beta * *v + g;
        *p -= lr * *v;
    }
}

/// Runs descent on the configured loss and returns the optimized variables.
pub fn train(scene: &Scene, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.check()?;
    let maps = feature_coordinate_maps(scene)?;
    let grid = build_voxel_grid(&maps, scene.voxel_size)?;
    let positives = enumerate_positive_pairs(&grid, PairMode::Exhaustive);
    if positives.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let mut features = scene_feature_maps(scene, FeatureSource::Student)?;

    let needs_teacher = cfg.loss != LossKind::Corr;
    let teacher = if needs_teacher {
        scene
            .frames
            .iter()
            .zip(&features)
            .map(|(fr, s)| {
                let t = fr.teacher_features.as_ref().ok_or_else(|| {
                    Error::Config(format!("frame {} has no teacher features", fr.id))
                })?;
                avg_pool_2d(&FeatureMap::from_tensor(t)?, (s.rows, s.cols))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut mlp = needs_teacher.then(|| {
        let d = features[0].dim;
        let h = cfg.hidden.unwrap_or_else(|| default_hidden(d));
        MlpAlign::random(d, h, teacher[0].dim, derive_seed(cfg.seed, &[0x4d4c50]))
    });

    let problem = Problem {
        cfg,
        grid,
        positives,
        teacher,
        valid: maps.iter().map(|m| m.valid.clone()).collect(),
    };

    let beta = match cfg.optimizer {
        Optimizer::Descent => 0.0,
        Optimizer::Momentum { beta } => beta,
    };
    let mut vel_f: Vec<Vec<f64>> = features.iter().map(|f| vec![0.0; f.data.len()]).collect();
    let mut vel_m = mlp.as_ref().map(|m| m.zeros_like());

    let initial_score = problem.score(&features)?;
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        let (loss, grads, gparams) = problem.evaluate(step, &features, mlp.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if step % cfg.eval_stride == 0 {
            let score = if step == 0 { initial_score } else { problem.score(&features)? };
            evals.push(EvalPoint { step, loss, score });
        }
        if cfg.lr == 0.0 {
            continue;
        }
        let shrink = 1.0 - cfg.lr * cfg.weight_decay;
        for ((f, v), g) in features.iter_mut().zip(&mut vel_f).zip(&grads) {
            momentum_step(&mut f.data, v, &g.data, cfg.lr, beta);
            if shrink != 1.0 {
                f.data.iter_mut().for_each(|x| *x *= shrink);
            }
        }
        if let (Some(m), Some(v), Some(g)) = (mlp.as_mut(), vel_m.as_mut(), gparams.as_ref()) {
            let lr = cfg.lr * cfg.mlp_lr_scale;
            for ((p, vp), gp) in m.params_mut().into_iter().zip(v.params_mut()).zip(g.params()) {
                momentum_step(p, vp, gp, lr, beta);
            }
        }
        let finite = features.iter().all(|f| f.data.iter().all(|x| x.is_finite()))
            && mlp.as_ref().map_or(true, MlpAlign::is_finite);
        if !finite {
            return Err(Error::Divergence { step, loss });
        }
    }
    let (loss, _, _) = problem.evaluate(cfg.steps, &features, mlp.as_ref())?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: cfg.steps, loss });
    }
    let final_score = problem.score(&features)?;
    evals.push(EvalPoint {
        step: cfg.steps,
        loss,
        score: final_score,
    });

    Ok(TrainOutcome {
        report: TrainReport {
            scene_id: scene.id.clone(),
            evals,
            initial_score,
            final_score,
            positive_pairs: problem.positives.len(),
            config: cfg.clone(),
        },
        features,
        mlp,
    })
}

pub fn run_training(scene: &Scene, cfg: &TrainConfig) -> Result<TrainReport> {
    train(scene, cfg).map(|o| o.report)
}
