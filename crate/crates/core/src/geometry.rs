//! Point-set kernels: sampling, neighborhoods, warping and flow metrics.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::tape::Segments;

pub type Point = [f64; 3];

/// Positions with per-point feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub positions: Vec<Point>,
    /// Row-major `n × feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl PointSet {
    pub fn new(positions: Vec<Point>, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty { op: "point set" });
        }
        if features.len() != positions.len() * feature_dim {
            return Err(Error::ShapeMismatch {
                op: "point set features",
                left: vec![positions.len(), feature_dim],
                right: vec![features.len()],
            });
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point positions".into()));
        }
        Ok(Self {
            positions,
            features,
            feature_dim,
        })
    }

    /// A feature-less point set.
    pub fn from_positions(positions: Vec<Point>) -> Result<Self> {
        Self::new(positions, Vec::new(), 0)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Per-point displacement vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(pub Vec<Point>);

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        Self(vec![[0.0; 3]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Per-point visibility probabilities; 1 means unoccluded.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask(pub Vec<f64>);

impl OcclusionMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// `target - query`.
    pub offset: Point,
    pub dist2: f64,
}

/// Neighbor lists for a batch of query points, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    offsets: Vec<usize>,
    entries: Vec<Neighbor>,
}

impl NeighborLists {
    fn from_lists(lists: impl IntoIterator<Item = Vec<Neighbor>>) -> Self {
        let mut offsets = vec![0];
        let mut entries = Vec::new();
        for l in lists {
            entries.extend(l);
            offsets.push(entries.len());
        }
        Self { offsets, entries }
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }

    pub fn of(&self, q: usize) -> &[Neighbor] {
        &self.entries[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn segments(&self) -> Segments {
        Segments::from_offsets(self.offsets.clone()).expect("valid offsets")
    }

    /// Query index owning each entry.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for q in 0..self.num_queries() {
            out.extend(core::iter::repeat_n(q, self.of(q).len()));
        }
        out
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.index).collect()
    }

    /// Flattened `total × 3` offsets.
    pub fn offset_rows(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|n| n.offset).collect()
    }

    /// Reorders every list by `perm(q, len)`; used to check order invariance.
    pub fn permuted(&self, mut perm: impl FnMut(usize, usize) -> Vec<usize>) -> Self {
        Self::from_lists((0..self.num_queries()).map(|q| {
            let l = self.of(q);
            perm(q, l.len()).into_iter().map(|k| l[k]).collect()
        }))
    }
}

#[inline]
pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    libm::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
}

fn by_dist_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist2
        .total_cmp(&b.dist2)
        .then_with(|| a.index.cmp(&b.index))
}

fn neighbor(query: &Point, targets: &[Point], j: usize) -> Neighbor {
    let offset = sub(&targets[j], query);
    Neighbor {
        index: j,
        offset,
        dist2: offset[0] * offset[0] + offset[1] * offset[1] + offset[2] * offset[2],
    }
}

/// Greedy farthest-point sampling of `k` indices beginning at `start`.
/// Ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(invalid!(
            "farthest_point_sample: need 1 <= k <= n, got k={k}, n={n}"
        ));
    }
    if start >= n {
        return Err(Error::IndexOutOfRange {
            op: "farthest_point_sample",
            index: start,
            len: n,
        });
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k);
    let mut current = start;
    loop {
        out.push(current);
        selected[current] = true;
        if out.len() == k {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(out)
}

/// Uniform hash grid over a point set, keyed by linearized cell index.
struct Grid {
    cell: f64,
    min: Point,
    dims: [u64; 3],
    sorted: Vec<(u64, usize)>,
}

impl Grid {
    const MAX_CELLS_PER_AXIS: f64 = 1_048_576.0;

    fn new(points: &[Point], r: f64) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        let cell = r.max(extent / Self::MAX_CELLS_PER_AXIS);
        let mut dims = [1u64; 3];
        for a in 0..3 {
            dims[a] = libm::floor((max[a] - min[a]) / cell) as u64 + 1;
        }
        let mut g = Self {
            cell,
            min,
            dims,
            sorted: Vec::with_capacity(points.len()),
        };
        for (i, p) in points.iter().enumerate() {
            let c = g.cell_of(p);
            g.sorted.push((g.key(c), i));
        }
        g.sorted.sort_unstable();
        g
    }

    fn cell_of(&self, p: &Point) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = libm::floor((p[a] - self.min[a]) / self.cell) as i64;
        }
        c
    }

    fn key(&self, c: [i64; 3]) -> u64 {
        (c[0] as u64 * self.dims[1] + c[1] as u64) * self.dims[2] + c[2] as u64
    }

    /// Calls `f` with every point index in the 27 cells around `p`.
    fn for_each_near(&self, p: &Point, mut f: impl FnMut(usize)) {
        let c = self.cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if (0..3).any(|a| n[a] < 0 || n[a] >= self.dims[a] as i64) {
                        continue;
                    }
                    let key = self.key(n);
                    let lo = self.sorted.partition_point(|e| e.0 < key);
                    for e in &self.sorted[lo..] {
                        if e.0 != key {
                            break;
                        }
                        f(e.1);
                    }
                }
            }
        }
    }
}

/// Targets strictly within `r` of each query (squared-distance test
/// `d² < r²`), keeping the `cap` nearest ordered by (distance, index).
pub fn radius_neighbors(
    query: &[Point],
    target: &[Point],
    r: f64,
    cap: usize,
) -> Result<NeighborLists> {
    if !(r > 0.0) || cap == 0 {
        return Err(invalid!(
            "radius_neighbors: need r > 0 and cap >= 1, got r={r}, cap={cap}"
        ));
    }
    let r2 = r * r;
    if target.is_empty() {
        return Ok(NeighborLists::from_lists(query.iter().map(|_| Vec::new())));
    }
    let grid = Grid::new(target, r);
    let lists = query.iter().map(|q| {
        let mut found = Vec::new();
        grid.for_each_near(q, |j| {
            let nb = neighbor(q, target, j);
            if nb.dist2 < r2 {
                found.push(nb);
            }
        });
        found.sort_unstable_by(by_dist_then_index);
        found.truncate(cap);
        found
    });
    Ok(NeighborLists::from_lists(lists))
}

/// The `k` nearest targets of each query, ordered by (distance, index).
pub fn knn(query: &[Point], target: &[Point], k: usize) -> Result<NeighborLists> {
    if k > target.len() {
        return Err(invalid!("knn: k={k} exceeds target size {}", target.len()));
    }
    let lists = query.iter().map(|q| {
        let mut all: Vec<Neighbor> = (0..target.len()).map(|j| neighbor(q, target, j)).collect();
        if k > 0 && k < all.len() {
            all.select_nth_unstable_by(k - 1, by_dist_then_index);
        }
        all.truncate(k);
        all.sort_unstable_by(by_dist_then_index);
        all
    });
    Ok(NeighborLists::from_lists(lists))
}

/// Displaces positions by `flow`; features are carried unchanged.
pub fn warp(points: &PointSet, flow: &FlowField) -> Result<PointSet> {
    if points.len() != flow.len() {
        return Err(Error::ShapeMismatch {
            op: "warp",
            left: vec![points.len()],
            right: vec![flow.len()],
        });
    }
    let positions = points
        .positions
        .iter()
        .zip(&flow.0)
        .map(|(p, f)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]])
        .collect();
    Ok(PointSet {
        positions,
        features: points.features.clone(),
        feature_dim: points.feature_dim,
    })
}

/// Inverse-distance weights over the `k` nearest coarse points. A fine point
/// that coincides with a coarse point takes that point's value exactly.
pub fn interpolation_weights(
    fine: &[Point],
    coarse: &[Point],
    k: usize,
) -> Result<(NeighborLists, Vec<f64>)> {
    let k = k.min(coarse.len());
    let nb = knn(fine, coarse, k)?;
    let mut weights = Vec::with_capacity(nb.total());
    for q in 0..nb.num_queries() {
        let l = nb.of(q);
        if l.first().is_some_and(|n| n.dist2 == 0.0) {
            weights.push(1.0);
            weights.extend(core::iter::repeat_n(0.0, l.len() - 1));
            continue;
        }
        let inv: Vec<f64> = l.iter().map(|n| 1.0 / libm::sqrt(n.dist2)).collect();
        let total: f64 = inv.iter().sum();
        weights.extend(inv.iter().map(|w| w / total));
    }
    Ok((nb, weights))
}

pub const STRICT_ABS: f64 = 0.05;
pub const STRICT_REL: f64 = 0.05;
pub const RELAX_ABS: f64 = 0.1;
pub const RELAX_REL: f64 = 0.1;
pub const OUTLIER_ABS: f64 = 0.3;
pub const OUTLIER_REL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowMetrics {
    pub epe: f64,
    pub acc_strict: f64,
    pub acc_relax: f64,
    pub outliers: f64,
}

/// Per-point classification used by [`flow_metrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointError {
    pub error: f64,
    /// `None` when the ground-truth vector is zero.
    pub relative: Option<f64>,
}

impl PointError {
    pub fn new(pred: &Point, gt: &Point) -> Self {
        let error = norm(&sub(pred, gt));
        let g = norm(gt);
        Self {
            error,
            relative: (g > 0.0).then(|| error / g),
        }
    }

    pub fn strict(&self) -> bool {
        self.error < STRICT_ABS || self.relative.is_some_and(|r| r < STRICT_REL)
    }

    pub fn relax(&self) -> bool {
        self.error < RELAX_ABS || self.relative.is_some_and(|r| r < RELAX_REL)
    }

    pub fn outlier(&self) -> bool {
        self.error > OUTLIER_ABS || self.relative.is_some_and(|r| r > OUTLIER_REL)
    }
}

pub fn flow_metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "flow_metrics",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty { op: "flow_metrics" });
    }
    let n = pred.len() as f64;
    let mut m = FlowMetrics::default();
    for (p, g) in pred.0.iter().zip(&gt.0) {
        let e = PointError::new(p, g);
        m.epe += e.error;
        m.acc_strict += e.strict() as u8 as f64;
        m.acc_relax += e.relax() as u8 as f64;
        m.outliers += e.outlier() as u8 as f64;
    }
    m.epe /= n;
    m.acc_strict /= n;
    m.acc_relax /= n;
    m.outliers /= n;
    Ok(m)
}

/// Mean end-point error only.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    flow_metrics(pred, gt).map(|m| m.epe)
}

/// Fraction of points where `pred >= threshold` agrees with `gt == 1`.
pub fn occlusion_accuracy(pred: &OcclusionMask, gt: &OcclusionMask, threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "occlusion_accuracy",
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty {
            op: "occlusion_accuracy",
        });
    }
    if let Some(bad) = gt.0.iter().find(|&&g| g != 0.0 && g != 1.0) {
        return Err(invalid!("occlusion ground truth must be 0 or 1, got {bad}"));
    }
    let hits = pred
        .0
        .iter()
        .zip(&gt.0)
        .filter(|(p, g)| (**p >= threshold) == (**g == 1.0))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_small_example() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [10.0, 10.0, 10.0],
        ];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&pts, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pts, 5, 0).is_err());
        assert!(farthest_point_sample(&pts, 0, 0).is_err());
    }

    #[test]
    fn fps_duplicates_never_repeat() {
        let pts = [[1.0, 1.0, 1.0]; 5];
        let mut s = farthest_point_sample(&pts, 5, 2).unwrap();
        assert_eq!(s[0], 2);
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn radius_self_and_empty() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let nb = radius_neighbors(&pts, &pts, 0.5, 8).unwrap();
        for q in 0..2 {
            assert_eq!(nb.of(q).len(), 1);
            assert_eq!(nb.of(q)[0].index, q);
            assert_eq!(nb.of(q)[0].dist2, 0.0);
        }
        let nb = radius_neighbors(&pts[..1], &pts[1..], 0.5, 8).unwrap();
        assert!(nb.of(0).is_empty());
        // strict boundary
        let nb = radius_neighbors(&pts[..1], &pts[1..], 1.0, 8).unwrap();
        assert!(nb.of(0).is_empty());
        assert!(radius_neighbors(&pts, &pts, 0.0, 1).is_err());
    }

    #[test]
    fn knn_examples() {
        let pts = [[0.0, 0.0, 0.0], [0.5, 0.2, 0.1], [3.0, 3.0, 3.0]];
        let nb = knn(&pts, &pts, 1).unwrap();
        for q in 0..3 {
            assert_eq!(nb.of(q)[0].index, q);
        }
        let targets = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let nb = knn(&[[0.0; 3]], &targets, 2).unwrap();
        assert_eq!(nb.target_indices(), vec![0, 1]);
        assert!(knn(&[[0.0; 3]], &targets, 4).is_err());
    }

    #[test]
    fn warp_examples() {
        let p = PointSet::new(vec![[1.0, 1.0, 1.0]], vec![7.0], 1).unwrap();
        let w = warp(&p, &FlowField(vec![[0.5, 0.0, -1.0]])).unwrap();
        assert_eq!(w.positions, vec![[1.5, 1.0, 0.0]]);
        assert_eq!(w.features, vec![7.0]);
        let z = warp(&p, &FlowField::zeros(1)).unwrap();
        assert_eq!(z, p);
        assert!(warp(&p, &FlowField::zeros(2)).is_err());
    }

    #[test]
    fn metrics_examples() {
        let gt = FlowField(vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(
            flow_metrics(&gt, &gt).unwrap(),
            FlowMetrics {
                epe: 0.0,
                acc_strict: 1.0,
                acc_relax: 1.0,
                outliers: 0.0
            }
        );
        let one = FlowField(vec![[1.0, 0.0, 0.0]]);
        let m = flow_metrics(&FlowField(vec![[1.04, 0.0, 0.0]]), &one).unwrap();
        assert_eq!(m.acc_strict, 1.0);
        let m = flow_metrics(&FlowField(vec![[1.35, 0.0, 0.0]]), &one).unwrap();
        assert_eq!(m.outliers, 1.0);
        assert_eq!(m.acc_relax, 0.0);
        assert!(flow_metrics(&one, &gt).is_err());
    }

    #[test]
    fn zero_ground_truth_uses_absolute_thresholds() {
        let gt = FlowField(vec![[0.0; 3]]);
        let m = flow_metrics(&FlowField(vec![[0.04, 0.0, 0.0]]), &gt).unwrap();
        assert_eq!((m.acc_strict, m.outliers), (1.0, 0.0));
        let m = flow_metrics(&FlowField(vec![[0.2, 0.0, 0.0]]), &gt).unwrap();
        assert_eq!((m.acc_relax, m.outliers), (0.0, 0.0));
    }

    #[test]
    fn occlusion_accuracy_examples() {
        let gt = OcclusionMask(vec![1.0, 0.0, 1.0]);
        assert_eq!(occlusion_accuracy(&gt, &gt, 0.5).unwrap(), 1.0);
        let half = OcclusionMask(vec![0.5; 3]);
        let ones = OcclusionMask(vec![1.0; 3]);
        assert_eq!(occlusion_accuracy(&half, &ones, 0.5).unwrap(), 1.0);
        assert!(occlusion_accuracy(&half, &OcclusionMask(vec![0.3; 3]), 0.5).is_err());
        assert!(occlusion_accuracy(&half, &OcclusionMask(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn interpolation_exact_on_coincident_point() {
        let coarse = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let (nb, w) = interpolation_weights(&[[1.0, 0.0, 0.0]], &coarse, 3).unwrap();
        assert_eq!(nb.of(0)[0].index, 1);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
        let (_, w) = interpolation_weights(&[[0.3, 0.3, 0.0]], &coarse, 3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
