//! Voxel hashing of feature cells and positive/negative pair mining.
//!
//! Cells are keyed by `floor((p - origin) / voxel_size)` with the origin at the
//! componentwise minimum of all valid coordinates, so the pair structure does
//! not depend on where the scene sits in world space.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, CoordinateMap, Vec3};

/// Largest cross-voxel pair count enumerated exhaustively by default.
pub const EXHAUSTIVE_NEGATIVE_LIMIT: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.ix, self.iy, self.iz)
    }
}

pub fn voxel_index(p: Vec3, voxel_size: f64, origin: Vec3) -> VoxelKey {
    let q = |a: usize| ((p[a] - origin[a]) / voxel_size).floor() as i64;
    VoxelKey {
        ix: q(0),
        iy: q(1),
        iz: q(2),
    }
}

/// A feature cell: frame index and row-major cell index at feature resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellRef {
    pub frame: usize,
    pub cell: usize,
}

/// Nonempty voxels in key order, each holding its cells in (frame, cell) order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f64,
    origin: Vec3,
    keys: Vec<VoxelKey>,
    offsets: Vec<usize>,
    entries: Vec<CellRef>,
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    /// Number of nonempty voxels.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelKey, &[CellRef])> + '_ {
        (0..self.keys.len()).map(move |v| (self.keys[v], self.voxel(v)))
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&[CellRef]> {
        self.keys.binary_search(key).ok().map(|v| self.voxel(v))
    }

    fn voxel(&self, v: usize) -> &[CellRef] {
        &self.entries[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Voxel position of every entry in the flat entry list.
    fn voxel_of_entries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.entries.len());
        for v in 0..self.keys.len() {
            out.extend(std::iter::repeat(v).take(self.offsets[v + 1] - self.offsets[v]));
        }
        out
    }
}

/// Assigns every valid cell of every frame to its voxel.
pub fn build_voxel_grid(maps: &[CoordinateMap], voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
    }
    let origin = Aabb::from_maps(maps).ok_or(Error::EmptyScene)?.min;

    let per_frame: Vec<Vec<(VoxelKey, CellRef)>> = maps
        .par_iter()
        .enumerate()
        .map(|(frame, cm)| {
            (0..cm.cells())
                .filter_map(|cell| {
                    cm.get(cell)
                        .map(|p| (voxel_index(p, voxel_size, origin), CellRef { frame, cell }))
                })
                .collect()
        })
        .collect();

    let mut cells: BTreeMap<VoxelKey, Vec<CellRef>> = BTreeMap::new();
    for (key, r) in per_frame.into_iter().flatten() {
        cells.entry(key).or_default().push(r);
    }

    let mut keys = Vec::with_capacity(cells.len());
    let mut offsets = vec![0];
    let mut entries = Vec::new();
    for (k, list) in cells {
        keys.push(k);
        entries.extend(list);
        offsets.push(entries.len());
    }
    Ok(VoxelGrid {
        voxel_size,
        origin,
        keys,
        offsets,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Positive,
    Negative,
}

impl PairKind {
    pub fn tag(self) -> &'static str {
        match self {
            PairKind::Positive => "pos",
            PairKind::Negative => "neg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PairMode {
    Exhaustive,
    /// For positives `budget` caps pairs per voxel; for negatives it is the
    /// number of partners drawn per anchor.
    Sampled { seed: u64, budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: CellRef,
    pub b: CellRef,
    pub voxel_a: VoxelKey,
    pub voxel_b: VoxelKey,
}

impl Pair {
    /// Orders the endpoints so that `a < b`.
    fn canonical(a: CellRef, va: VoxelKey, b: CellRef, vb: VoxelKey) -> Pair {
        if a <= b {
            Pair { a, b, voxel_a: va, voxel_b: vb }
        } else {
            Pair { a: b, b: a, voxel_a: vb, voxel_b: va }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub kind: PairKind,
    pub mode: PairMode,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Audit CSV: `kind,frame_a,cell_a,frame_b,cell_b,voxel_a,voxel_b`, voxels as `ix:iy:iz`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
        w.write_record(["kind", "frame_a", "cell_a", "frame_b", "cell_b", "voxel_a", "voxel_b"])
            .map_err(io)?;
        for p in &self.pairs {
            w.write_record([
                self.kind.tag().to_owned(),
                p.a.frame.to_string(),
                p.a.cell.to_string(),
                p.b.frame.to_string(),
                p.b.cell.to_string(),
                p.voxel_a.to_string(),
                p.voxel_b.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a global seed and a tuple of identifiers.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(splitmix64(seed), |acc, &w| splitmix64(acc ^ w))
}

fn key_words(k: VoxelKey) -> [u64; 3] {
    [k.ix as u64, k.iy as u64, k.iz as u64]
}

fn cross_view_pairs(key: VoxelKey, entries: &[CellRef]) -> Vec<Pair> {
    let mut out = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            if entries[i].frame != entries[j].frame {
                out.push(Pair {
                    a: entries[i],
                    b: entries[j],
                    voxel_a: key,
                    voxel_b: key,
                });
            }
        }
    }
    out
}

/// Same-voxel pairs from different frames.
pub fn enumerate_positive_pairs(g: &VoxelGrid, mode: PairMode) -> PairSet {
    let per_voxel: Vec<Vec<Pair>> = (0..g.len())
        .into_par_iter()
        .map(|v| {
            let key = g.keys[v];
            let all = cross_view_pairs(key, g.voxel(v));
            match mode {
                PairMode::Exhaustive => all,
                PairMode::Sampled { seed, budget } => {
                    if all.len() <= budget {
                        return all;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &key_words(key)));
                    let mut picked = index::sample(&mut rng, all.len(), budget).into_vec();
                    picked.sort_unstable();
                    picked.into_iter().map(|i| all[i]).collect()
                }
            }
        })
        .collect();
    PairSet {
        kind: PairKind::Positive,
        mode,
        pairs: per_voxel.into_iter().flatten().collect(),
    }
}

/// For every anchor cell, draws `count_per_anchor` distinct partners uniformly
/// from cells in other voxels. Unordered duplicates are dropped, keeping the
/// first occurrence in anchor order.
pub fn sample_negative_pairs(g: &VoxelGrid, count_per_anchor: usize, seed: u64) -> Result<PairSet> {
    if g.len() < 2 {
        return Err(Error::NoNegatives);
    }
    let owner = g.voxel_of_entries();
    let n = g.entries.len();

    let per_anchor: Vec<Vec<Pair>> = (0..n)
        .into_par_iter()
        .map(|anchor| {
            let v = owner[anchor];
            let (start, end) = (g.offsets[v], g.offsets[v + 1]);
            let outside = n - (end - start);
            let take = count_per_anchor.min(outside);
            let key = g.keys[v];
            let [kx, ky, kz] = key_words(key);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[kx, ky, kz, (anchor - start) as u64]));
            let mut picks = index::sample(&mut rng, outside, take).into_vec();
            picks.sort_unstable();
            picks
                .into_iter()
                .map(|r| {
                    let other = if r < start { r } else { r + (end - start) };
                    Pair::canonical(g.entries[anchor], key, g.entries[other], g.keys[owner[other]])
                })
                .collect()
        })
        .collect();

    let mut seen = HashSet::new();
    let pairs = per_anchor
        .into_iter()
        .flatten()
        .filter(|p| seen.insert((p.a, p.b)))
        .collect();
    Ok(PairSet {
        kind: PairKind::Negative,
        mode: PairMode::Sampled {
            seed,
            budget: count_per_anchor,
        },
        pairs,
    })
}

/// Number of unordered pairs whose endpoints lie in different voxels.
pub fn cross_voxel_pair_count(g: &VoxelGrid) -> u64 {
    let n = g.entries.len() as u64;
    let same: u64 = (0..g.len())
        .map(|v| {
            let m = (g.offsets[v + 1] - g.offsets[v]) as u64;
            m * m.saturating_sub(1) / 2
        })
        .sum();
    n * n.saturating_sub(1) / 2 - same
}

/// Every cross-voxel pair, refusing grids with more than `limit` of them.
pub fn enumerate_negative_pairs(g: &VoxelGrid, limit: u64) -> Result<PairSet> {
    if g.len() < 2 {
        return Err(Error::NoNegatives);
    }
    let count = cross_voxel_pair_count(g);
    if count > limit {
        return Err(Error::TooManyPairs { count, limit });
    }
    let owner = g.voxel_of_entries();
    let mut pairs = Vec::with_capacity(count as usize);
    for i in 0..g.entries.len() {
        for j in i + 1..g.entries.len() {
            if owner[i] != owner[j] {
                pairs.push(Pair::canonical(
                    g.entries[i],
                    g.keys[owner[i]],
                    g.entries[j],
                    g.keys[owner[j]],
                ));
            }
        }
    }
    Ok(PairSet {
        kind: PairKind::Negative,
        mode: PairMode::Exhaustive,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(ix: i64, iy: i64, iz: i64) -> VoxelKey {
        VoxelKey { ix, iy, iz }
    }

    /// One-row coordinate map per frame, all cells valid.
    fn maps(frames: &[&[Vec3]]) -> Vec<CoordinateMap> {
        frames
            .iter()
            .map(|pts| CoordinateMap {
                rows: 1,
                cols: pts.len(),
                coords: pts.to_vec(),
                valid: vec![true; pts.len()],
            })
            .collect()
    }

    #[test]
    fn index_examples() {
        assert_eq!(voxel_index([0.05, 0.05, 0.05], 0.1, [0.0; 3]), key(0, 0, 0));
        assert_eq!(voxel_index([0.15, -0.05, 0.25], 0.1, [0.0; 3]), key(1, -1, 2));
        assert_eq!(voxel_index([0.1, 0.0, 0.0], 0.1, [0.0; 3]), key(1, 0, 0));
    }

    #[test]
    fn grid_examples() {
        let g = build_voxel_grid(&maps(&[&[[0.01; 3]], &[[0.02; 3]]]), 0.1).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.entry_count(), 2);

        let g = build_voxel_grid(&maps(&[&[[0.01; 3]], &[[0.11; 3]]]), 0.1).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|(_, e)| e.len() == 1));

        let empty = vec![CoordinateMap::invalid(2, 2)];
        assert!(matches!(build_voxel_grid(&empty, 0.1), Err(Error::EmptyScene)));
    }

    #[test]
    fn same_view_pairs_excluded() {
        // view 1 contributes two cells, view 2 one, all in one voxel
        let g = build_voxel_grid(&maps(&[&[[0.0; 3], [0.01; 3]], &[[0.02; 3]]]), 0.1).unwrap();
        let p = enumerate_positive_pairs(&g, PairMode::Exhaustive);
        let got: Vec<_> = p.pairs.iter().map(|p| (p.a, p.b)).collect();
        let c = |frame, cell| CellRef { frame, cell };
        assert_eq!(got, vec![(c(0, 0), c(1, 0)), (c(0, 1), c(1, 0))]);

        let single = build_voxel_grid(&maps(&[&[[0.0; 3]]]), 0.1).unwrap();
        assert!(enumerate_positive_pairs(&single, PairMode::Exhaustive).is_empty());
    }

    #[test]
    fn three_views_two_cells_each() {
        let f: &[Vec3] = &[[0.0; 3], [0.01; 3]];
        let g = build_voxel_grid(&maps(&[f, f, f]), 0.1).unwrap();
        let p = enumerate_positive_pairs(&g, PairMode::Exhaustive);
        // brute force: all C(6,2) pairs with differing frames
        let all: Vec<_> = g.iter().next().unwrap().1.to_vec();
        let mut brute = 0;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i].frame != all[j].frame {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 12);
        assert_eq!(p.len(), 12);
    }

    #[test]
    fn sampled_positive_caps_each_voxel() {
        let f: &[Vec3] = &[[0.0; 3], [0.01; 3], [0.5; 3], [0.51; 3]];
        let g = build_voxel_grid(&maps(&[f, f, f]), 0.1).unwrap();
        let full = enumerate_positive_pairs(&g, PairMode::Exhaustive);
        let s = enumerate_positive_pairs(&g, PairMode::Sampled { seed: 3, budget: 5 });
        assert_eq!(s.len(), 10);
        for p in &s.pairs {
            assert!(full.pairs.contains(p));
        }
        assert_eq!(s, enumerate_positive_pairs(&g, PairMode::Sampled { seed: 3, budget: 5 }));
    }

    #[test]
    fn negative_examples() {
        let g = build_voxel_grid(&maps(&[&[[0.0; 3]], &[[0.5; 3]]]), 0.1).unwrap();
        assert_eq!(enumerate_negative_pairs(&g, EXHAUSTIVE_NEGATIVE_LIMIT).unwrap().len(), 1);

        let g = build_voxel_grid(&maps(&[&[[0.0; 3], [0.5; 3], [0.9; 3]]]), 0.1).unwrap();
        let n = enumerate_negative_pairs(&g, EXHAUSTIVE_NEGATIVE_LIMIT).unwrap();
        assert_eq!(n.len(), 3);
        assert!(n.pairs.iter().all(|p| p.voxel_a != p.voxel_b && p.a < p.b));

        let s = sample_negative_pairs(&g, 5, 1).unwrap();
        assert_eq!(s.len(), 3);

        let one = build_voxel_grid(&maps(&[&[[0.0; 3], [0.01; 3]]]), 0.1).unwrap();
        assert!(matches!(sample_negative_pairs(&one, 2, 0), Err(Error::NoNegatives)));
        assert!(matches!(enumerate_negative_pairs(&one, 10), Err(Error::NoNegatives)));
    }

    #[test]
    fn exhaustive_negative_limit() {
        let pts: Vec<Vec3> = (0..200).map(|i| [i as f64 * 0.2, 0.0, 0.0]).collect();
        let g = build_voxel_grid(&maps(&[&pts]), 0.1).unwrap();
        assert_eq!(cross_voxel_pair_count(&g), 200 * 199 / 2);
        assert!(matches!(
            enumerate_negative_pairs(&g, EXHAUSTIVE_NEGATIVE_LIMIT),
            Err(Error::TooManyPairs { count: 19900, .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let g = build_voxel_grid(&maps(&[&[[0.0; 3]], &[[0.01, 0.0, 0.25]]]), 0.1).unwrap();
        let p = enumerate_positive_pairs(&g, PairMode::Exhaustive);
        assert!(p.is_empty());
        let n = enumerate_negative_pairs(&g, 10).unwrap();
        let mut buf = Vec::new();
        n.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "kind,frame_a,cell_a,frame_b,cell_b,voxel_a,voxel_b\nneg,0,0,1,0,0:0:0,0:0:2\n"
        );
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(1, &[0, 0, 0]), derive_seed(1, &[0, 0, 1]));
        assert_ne!(derive_seed(1, &[5]), derive_seed(2, &[5]));
        assert_eq!(derive_seed(9, &[1, 2]), derive_seed(9, &[1, 2]));
    }
}
