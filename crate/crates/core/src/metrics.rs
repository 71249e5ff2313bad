//! Cosine similarity, the per-scene correspondence score, and quartile analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::feature_coordinate_maps;
use crate::losses::avg_pool_2d;
use crate::tensor_io::Scene;
use crate::voxel::{build_voxel_grid, enumerate_positive_pairs, PairKind, PairMode, PairSet};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Four interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (|a| |b|)` clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vector dims differ: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na >= NORM_EPS && nb >= NORM_EPS && na.is_finite() && nb.is_finite()) {
        return Err(Error::DegenerateVector(format!("norms {na:e}, {nb:e}")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scene_id: String,
    /// Mean cross-view cosine similarity over all correspondence pairs.
    pub score: f64,
    pub pair_count: usize,
    pub mode: PairMode,
    pub voxel_size: f64,
}

/// Per-pair cosine similarities, in pair order.
pub fn pair_similarities(pairs: &PairSet, features: &[FeatureMap]) -> Result<Vec<f64>> {
    pairs
        .pairs
        .iter()
        .map(|p| {
            let fa = features
                .get(p.a.frame)
                .ok_or_else(|| Error::Shape(format!("pair references missing frame {}", p.a.frame)))?;
            let fb = features
                .get(p.b.frame)
                .ok_or_else(|| Error::Shape(format!("pair references missing frame {}", p.b.frame)))?;
            if p.a.cell >= fa.cells() || p.b.cell >= fb.cells() {
                return Err(Error::Shape("pair references a cell outside its feature map".into()));
            }
            cosine_similarity(fa.cell(p.a.cell), fb.cell(p.b.cell)).map_err(|e| match e {
                Error::DegenerateVector(m) => {
                    Error::DegenerateVector(format!("pair {:?}-{:?}: {m}", p.a, p.b))
                }
                e => e,
            })
        })
        .collect()
}

/// Mean similarity over a positive pair set, summed sequentially in pair order.
pub fn correspondence_score(
    scene_id: &str,
    voxel_size: f64,
    pairs: &PairSet,
    features: &[FeatureMap],
) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let sims = pair_similarities(pairs, features)?;
    let score = sims.iter().sum::<f64>() / sims.len() as f64;
    Ok(ScoreReport {
        scene_id: scene_id.to_owned(),
        score,
        pair_count: sims.len(),
        mode: pairs.mode,
        voxel_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Student,
    /// Teacher maps average-pooled to the student grid.
    Teacher,
}

pub fn scene_feature_maps(scene: &Scene, source: FeatureSource) -> Result<Vec<FeatureMap>> {
    scene
        .frames
        .iter()
        .map(|fr| {
            let student = FeatureMap::from_tensor(&fr.features)?;
            match source {
                FeatureSource::Student => Ok(student),
                FeatureSource::Teacher => {
                    let t = fr.teacher_features.as_ref().ok_or_else(|| {
                        Error::Config(format!("frame {} has no teacher features", fr.id))
                    })?;
                    avg_pool_2d(&FeatureMap::from_tensor(t)?, (student.rows, student.cols))
                }
            }
        })
        .collect()
}

/// Full pipeline: unproject, voxelize, mine positives, score.
pub fn score_scene(
    scene: &Scene,
    source: FeatureSource,
    voxel_size: f64,
    mode: PairMode,
) -> Result<ScoreReport> {
    let maps = feature_coordinate_maps(scene)?;
    let grid = build_voxel_grid(&maps, voxel_size)?;
    let pairs = enumerate_positive_pairs(&grid, mode);
    debug_assert_eq!(pairs.kind, PairKind::Positive);
    let features = scene_feature_maps(scene, source)?;
    correspondence_score(&scene.id, voxel_size, &pairs, &features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub score: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartile {
    pub label: String,
    pub ids: Vec<String>,
    pub mean_score: f64,
    pub mean_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    /// Q1 (lowest scores) through Q4.
    pub quartiles: Vec<Quartile>,
}

impl QuartileReport {
    pub fn metric_means(&self) -> Vec<f64> {
        self.quartiles.iter().map(|q| q.mean_metric).collect()
    }
}

/// Sizes of the four bins; the first `n mod 4` bins take one extra sample.
pub fn quartile_sizes(n: usize) -> [usize; 4] {
    let (base, extra) = (n / 4, n % 4);
    std::array::from_fn(|i| base + usize::from(i < extra))
}

/// Sorts by `(score, id)` and splits into four contiguous bins.
pub fn quartile_report(samples: &[Sample]) -> Result<QuartileReport> {
    if samples.len() < 4 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite() || !s.metric.is_finite()) {
        return Err(Error::Config(format!("sample {} has a non-finite value", s.id)));
    }
    let mut sorted: Vec<&Sample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.id.cmp(&b.id)));

    let mut quartiles = Vec::with_capacity(4);
    let mut start = 0;
    for (q, size) in quartile_sizes(samples.len()).into_iter().enumerate() {
        let bin = &sorted[start..start + size];
        start += size;
        let n = bin.len() as f64;
        quartiles.push(Quartile {
            label: format!("Q{}", q + 1),
            ids: bin.iter().map(|s| s.id.clone()).collect(),
            mean_score: bin.iter().map(|s| s.score).sum::<f64>() / n,
            mean_metric: bin.iter().map(|s| s.metric).sum::<f64>() / n,
        });
    }
    Ok(QuartileReport { quartiles })
}

/// Reads `id,score,metric` rows (with header).
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{other:?}")),
    })?;
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "score", "metric"] {
        return Err(Error::Schema(format!(
            "expected header id,score,metric, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Schema(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{CellRef, Pair, VoxelKey};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 4.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    fn two_voxel_features() -> (PairSet, Vec<FeatureMap>) {
        let fm = |data: Vec<f64>| FeatureMap {
            rows: 1,
            cols: 2,
            dim: 2,
            data,
        };
        let features = vec![fm(vec![1.0, 0.0, 1.0, 0.0]), fm(vec![0.0, 1.0, 1.0, 0.0])];
        let va = VoxelKey { ix: 0, iy: 0, iz: 0 };
        let vb = VoxelKey { ix: 5, iy: 0, iz: 5 };
        let c = |frame, cell| CellRef { frame, cell };
        let pairs = PairSet {
            kind: PairKind::Positive,
            mode: PairMode::Exhaustive,
            pairs: vec![
                Pair { a: c(0, 0), b: c(1, 0), voxel_a: va, voxel_b: va },
                Pair { a: c(0, 1), b: c(1, 1), voxel_a: vb, voxel_b: vb },
            ],
        };
        (pairs, features)
    }

    #[test]
    fn two_voxel_mean_is_half() {
        let (pairs, features) = two_voxel_features();
        let r = correspondence_score("s", 0.1, &pairs, &features).unwrap();
        assert_eq!(r.score, 0.5);
        assert_eq!(r.pair_count, 2);
    }

    #[test]
    fn identical_features_score_one() {
        let (pairs, mut features) = two_voxel_features();
        features[1] = features[0].clone();
        let r = correspondence_score("s", 0.1, &pairs, &features).unwrap();
        assert!((r.score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_pairs_error() {
        let (mut pairs, features) = two_voxel_features();
        pairs.pairs.clear();
        assert!(matches!(
            correspondence_score("s", 0.1, &pairs, &features),
            Err(Error::EmptyPairs)
        ));
    }

    fn samples(scores: &[f64], metrics: &[f64]) -> Vec<Sample> {
        scores
            .iter()
            .zip(metrics)
            .enumerate()
            .map(|(i, (&score, &metric))| Sample {
                id: format!("s{i:02}"),
                score,
                metric,
            })
            .collect()
    }

    #[test]
    fn eight_sample_quartiles() {
        let s = samples(
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0],
        );
        let r = quartile_report(&s).unwrap();
        assert_eq!(r.metric_means(), vec![15.0, 35.0, 55.0, 75.0]);
        assert_eq!(r.quartiles[0].label, "Q1");
    }

    #[test]
    fn ties_break_by_id() {
        let mut s = samples(&[0.5; 8], &[0.0; 8]);
        s.reverse();
        let r = quartile_report(&s).unwrap();
        let sizes: Vec<_> = r.quartiles.iter().map(|q| q.ids.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 2]);
        assert_eq!(r.quartiles[0].ids, vec!["s00", "s01"]);
        assert_eq!(r.quartiles[3].ids, vec!["s06", "s07"]);
    }

    #[test]
    fn uneven_split() {
        assert_eq!(quartile_sizes(10), [3, 3, 2, 2]);
        assert_eq!(quartile_sizes(7), [2, 2, 2, 1]);
        let s = samples(&[0.0; 10], &[0.0; 10]);
        let sizes: Vec<_> = quartile_report(&s).unwrap().quartiles.iter().map(|q| q.ids.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert!(matches!(quartile_report(&s[..3]), Err(Error::TooFewSamples(3))));
    }
}
