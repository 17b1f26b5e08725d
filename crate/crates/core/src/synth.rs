//! Synthetic occluded scenes with exact ground truth.
//!
//! Objects (Gaussian blobs and box surfaces) each move rigidly. An occluder
//! deletes part of the second frame; first-frame points whose destination
//! has no surviving second-frame point within the match radius are labeled
//! occluded. All values are rounded to `f32` precision so that the on-disk
//! format reproduces a scene exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::geometry::{dist2, norm, radius_neighbors, FlowField, OcclusionMask, Point, PointSet};
use crate::pyramid::PyramidGeometry;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OccluderKind {
    HalfSpace,
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Occluder {
    pub kind: OccluderKind,
    /// Target fraction of second-frame points removed, in `[0, 0.5]`.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneConfig {
    pub points: usize,
    pub objects: usize,
    /// Radians.
    pub max_rotation: f64,
    pub max_translation: f64,
    pub occluder: Option<Occluder>,
    pub noise_sigma: f64,
    /// Emit a 3-channel per-object color feature.
    pub features: bool,
    /// Randomly permute the second frame.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            points: 256,
            objects: 3,
            max_rotation: 10f64.to_radians(),
            max_translation: 0.4,
            occluder: Some(Occluder {
                kind: OccluderKind::HalfSpace,
                coverage: 0.2,
            }),
            noise_sigma: 0.002,
            features: true,
            shuffle: true,
            seed: 0,
        }
    }
}

/// Largest distance from an object's pivot to any of its points.
pub const MAX_OBJECT_RADIUS: f64 = 1.2;
const BLOB_SIGMA: (f64, f64) = (0.2, 0.4);
const BOX_HALF: (f64, f64) = (0.2, 0.5);
const CENTER_SPREAD: [f64; 3] = [1.5, 1.5, 0.3];
const COLOR_JITTER: f64 = 0.02;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 64 {
            return Err(invalid!(
                "scene needs at least 64 points, got {}",
                self.points
            ));
        }
        if self.objects == 0 || self.objects > self.points {
            return Err(invalid!(
                "object count must be in 1..=points, got {}",
                self.objects
            ));
        }
        if let Some(o) = self.occluder {
            if !(0.0..=0.5).contains(&o.coverage) {
                return Err(invalid!(
                    "occluder coverage must be in [0, 0.5], got {}",
                    o.coverage
                ));
            }
        }
        if !(self.noise_sigma >= 0.0)
            || !(self.max_rotation >= 0.0)
            || !(self.max_translation >= 0.0)
        {
            return Err(invalid!(
                "noise, rotation and translation bounds must be non-negative"
            ));
        }
        Ok(())
    }

    /// Match radius separating visible from occluded destinations.
    pub fn match_radius(&self) -> f64 {
        2.0 * self.noise_sigma + 1e-6
    }

    /// Upper bound on any ground-truth flow magnitude under this config.
    pub fn flow_bound(&self) -> f64 {
        2.0 * libm::sin(self.max_rotation / 2.0) * MAX_OBJECT_RADIUS + self.max_translation + 1e-5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFramePair {
    pub p: PointSet,
    pub q: PointSet,
    pub gt_flow: FlowField,
    pub gt_occlusion: OcclusionMask,
}

/// Per-point provenance of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub object_of_point: Vec<usize>,
    pub pivots: Vec<Point>,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn round_point(p: Point) -> Point {
    [round32(p[0]), round32(p[1]), round32(p[2])]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(&v);
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rodrigues rotation matrix about a unit axis.
fn rotation(axis: Point, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply(m: &[[f64; 3]; 3], v: Point) -> Point {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn sample_blob(rng: &mut ChaCha8Rng, sigma: f64) -> Point {
    loop {
        let v: Point = [
            sigma * Distribution::<f64>::sample(&StandardNormal, rng),
            sigma * Distribution::<f64>::sample(&StandardNormal, rng),
            sigma * Distribution::<f64>::sample(&StandardNormal, rng),
        ];
        if norm(&v) <= 3.0 * sigma {
            return v;
        }
    }
}

fn sample_box_surface(rng: &mut ChaCha8Rng, half: Point) -> Point {
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < *area {
            axis = a;
            break;
        }
        pick -= area;
    }
    let mut v = [0.0; 3];
    for a in 0..3 {
        v[a] = if a == axis {
            if rng.random_bool(0.5) {
                half[a]
            } else {
                -half[a]
            }
        } else {
            rng.random_range(-half[a]..=half[a])
        };
    }
    v
}

fn truncated_noise(rng: &mut ChaCha8Rng, sigma: f64) -> Point {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    loop {
        let v: Point = [
            sigma * Distribution::<f64>::sample(&StandardNormal, rng),
            sigma * Distribution::<f64>::sample(&StandardNormal, rng),
            sigma * Distribution::<f64>::sample(&StandardNormal, rng),
        ];
        if norm(&v) < 2.0 * sigma {
            return v;
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<LabeledFramePair> {
    generate_scene_detailed(cfg).map(|(pair, _)| pair)
}

pub fn generate_scene_detailed(cfg: &SceneConfig) -> Result<(LabeledFramePair, SceneLayout)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.points;

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n * 3);
    let mut object_of_point = Vec::with_capacity(n);
    let mut pivots = Vec::with_capacity(cfg.objects);
    let mut motions = Vec::with_capacity(cfg.objects);
    for k in 0..cfg.objects {
        let count = n / cfg.objects + usize::from(k < n % cfg.objects);
        let pivot = round_point([
            rng.random_range(-CENTER_SPREAD[0]..=CENTER_SPREAD[0]),
            rng.random_range(-CENTER_SPREAD[1]..=CENTER_SPREAD[1]),
            rng.random_range(-CENTER_SPREAD[2]..=CENTER_SPREAD[2]),
        ]);
        let color = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let blob = k % 2 == 1;
        let sigma = rng.random_range(BLOB_SIGMA.0..=BLOB_SIGMA.1);
        let half = [
            rng.random_range(BOX_HALF.0..=BOX_HALF.1),
            rng.random_range(BOX_HALF.0..=BOX_HALF.1),
            rng.random_range(BOX_HALF.0..=BOX_HALF.1),
        ];
        let axis = unit_vector(&mut rng);
        let angle = rng.random_range(-cfg.max_rotation..=cfg.max_rotation);
        let dir = unit_vector(&mut rng);
        let mag = rng.random_range(0.0..=cfg.max_translation);
        motions.push((
            rotation(axis, angle),
            [dir[0] * mag, dir[1] * mag, dir[2] * mag],
        ));
        for _ in 0..count {
            let local = if blob {
                sample_blob(&mut rng, sigma)
            } else {
                sample_box_surface(&mut rng, half)
            };
            positions.push(round_point([
                pivot[0] + local[0],
                pivot[1] + local[1],
                pivot[2] + local[2],
            ]));
            for c in color {
                colors.push(round32(
                    (c + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0),
                ));
            }
            object_of_point.push(k);
        }
        pivots.push(pivot);
    }

    let moved: Vec<Point> = positions
        .iter()
        .zip(&object_of_point)
        .map(|(x, &k)| {
            let (rot, t) = &motions[k];
            let pv = pivots[k];
            let r = apply(rot, [x[0] - pv[0], x[1] - pv[1], x[2] - pv[2]]);
            [
                pv[0] + r[0] + t[0],
                pv[1] + r[1] + t[1],
                pv[2] + r[2] + t[2],
            ]
        })
        .collect();
    let gt_flow: Vec<Point> = moved
        .iter()
        .zip(&positions)
        .map(|(m, x)| round_point([m[0] - x[0], m[1] - x[1], m[2] - x[2]]))
        .collect();

    let mut removed = vec![false; n];
    if let Some(occ) = cfg.occluder {
        let k = libm::round(occ.coverage * n as f64) as usize;
        if k > 0 {
            let mut score: Vec<(f64, usize)> = match occ.kind {
                OccluderKind::HalfSpace => {
                    let d = unit_vector(&mut rng);
                    moved
                        .iter()
                        .enumerate()
                        .map(|(i, m)| (-(d[0] * m[0] + d[1] * m[1] + d[2] * m[2]), i))
                        .collect()
                }
                OccluderKind::Sphere => {
                    let c = moved[rng.random_range(0..n)];
                    moved
                        .iter()
                        .enumerate()
                        .map(|(i, m)| (dist2(m, &c), i))
                        .collect()
                }
            };
            score.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in &score[..k] {
                removed[i] = true;
            }
        }
    }

    let mut q_pos = Vec::with_capacity(n);
    let mut q_feat = Vec::with_capacity(n * 3);
    for i in 0..n {
        if removed[i] {
            continue;
        }
        let e = truncated_noise(&mut rng, cfg.noise_sigma);
        let m = moved[i];
        q_pos.push(round_point([m[0] + e[0], m[1] + e[1], m[2] + e[2]]));
        q_feat.extend_from_slice(&colors[i * 3..i * 3 + 3]);
    }
    if q_pos.len() < 4 {
        return Err(invalid!(
            "occluder removed all but {} second-frame points",
            q_pos.len()
        ));
    }
    if cfg.shuffle {
        let mut order: Vec<usize> = (0..q_pos.len()).collect();
        order.shuffle(&mut rng);
        let pos = order.iter().map(|&j| q_pos[j]).collect();
        let feat = order
            .iter()
            .flat_map(|&j| q_feat[j * 3..j * 3 + 3].to_vec())
            .collect();
        q_pos = pos;
        q_feat = feat;
    }

    let gt_flow = FlowField(gt_flow);
    let gt_occlusion = label_occlusion(&positions, &gt_flow, &q_pos, cfg.match_radius())?;
    let dim = if cfg.features { 3 } else { 0 };
    let (pf, qf) = if cfg.features {
        (colors, q_feat)
    } else {
        (Vec::new(), Vec::new())
    };
    let pair = LabeledFramePair {
        p: PointSet::new(positions, pf, dim)?,
        q: PointSet::new(q_pos, qf, dim)?,
        gt_flow,
        gt_occlusion,
    };
    Ok((
        pair,
        SceneLayout {
            object_of_point,
            pivots,
        },
    ))
}

/// 1 where some second-frame point lies strictly within `delta` of `x + f`.
pub fn label_occlusion(
    p: &[Point],
    flow: &FlowField,
    q: &[Point],
    delta: f64,
) -> Result<OcclusionMask> {
    let dest: Vec<Point> = p
        .iter()
        .zip(&flow.0)
        .map(|(x, f)| [x[0] + f[0], x[1] + f[1], x[2] + f[2]])
        .collect();
    let nb = radius_neighbors(&dest, q, delta, 1)?;
    Ok(OcclusionMask(
        (0..p.len())
            .map(|i| (!nb.of(i).is_empty()) as u8 as f64)
            .collect(),
    ))
}

/// A first-frame point whose label disagrees with the geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inconsistency {
    pub point: usize,
    pub labeled_visible: bool,
}

/// Brute-force re-check of the visibility labels.
pub fn check_consistency(pair: &LabeledFramePair, delta: f64) -> Vec<Inconsistency> {
    let d2 = delta * delta;
    let mut bad = Vec::new();
    for (i, x) in pair.p.positions.iter().enumerate() {
        let f = pair.gt_flow.0[i];
        let dest = [x[0] + f[0], x[1] + f[1], x[2] + f[2]];
        let visible = pair.q.positions.iter().any(|y| dist2(&dest, y) < d2);
        let labeled = pair.gt_occlusion.0[i] == 1.0;
        if visible != labeled {
            bad.push(Inconsistency {
                point: i,
                labeled_visible: labeled,
            });
        }
    }
    bad
}

impl LabeledFramePair {
    pub fn occluded_fraction(&self) -> f64 {
        self.gt_occlusion.0.iter().filter(|&&o| o == 0.0).count() as f64
            / self.gt_occlusion.len() as f64
    }
}

/// Ground truth at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTruth {
    pub flow: FlowField,
    pub occlusion: OcclusionMask,
}

/// Ground truth at every level by index inheritance from level 0.
pub fn downsample_gt(
    pair: &LabeledFramePair,
    pyramid: &PyramidGeometry,
) -> Result<Vec<LevelTruth>> {
    let n = pair.gt_flow.len();
    if pair.gt_occlusion.len() != n {
        return Err(Error::ShapeMismatch {
            op: "downsample_gt",
            left: vec![n],
            right: vec![pair.gt_occlusion.len()],
        });
    }
    pyramid
        .levels
        .iter()
        .map(|level| {
            if let Some(&bad) = level.root_indices.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange {
                    op: "downsample_gt",
                    index: bad,
                    len: n,
                });
            }
            Ok(LevelTruth {
                flow: FlowField(
                    level
                        .root_indices
                        .iter()
                        .map(|&i| pair.gt_flow.0[i])
                        .collect(),
                ),
                occlusion: OcclusionMask(
                    level
                        .root_indices
                        .iter()
                        .map(|&i| pair.gt_occlusion.0[i])
                        .collect(),
                ),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(seed: u64) -> SceneConfig {
        SceneConfig {
            max_rotation: 0.0,
            max_translation: 0.0,
            occluder: None,
            noise_sigma: 0.0,
            shuffle: false,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn still_scene_is_identity() {
        let pair = generate_scene(&still(3)).unwrap();
        assert_eq!(pair.p, pair.q);
        assert!(pair.gt_flow.0.iter().all(|f| *f == [0.0; 3]));
        assert!(pair.gt_occlusion.0.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn pure_translation() {
        // zero rotation with one object: every point gets the same vector
        let cfg = SceneConfig {
            objects: 1,
            max_rotation: 0.0,
            occluder: None,
            noise_sigma: 0.0,
            seed: 8,
            ..SceneConfig::default()
        };
        let pair = generate_scene(&cfg).unwrap();
        let t = pair.gt_flow.0[0];
        assert!(norm(&t) > 0.0);
        for f in &pair.gt_flow.0 {
            for a in 0..3 {
                assert!((f[a] - t[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_scene(&SceneConfig {
            points: 10,
            ..SceneConfig::default()
        })
        .is_err());
        assert!(generate_scene(&SceneConfig {
            occluder: Some(Occluder {
                kind: OccluderKind::Sphere,
                coverage: 0.7
            }),
            ..SceneConfig::default()
        })
        .is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig {
            seed: 77,
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
    }

    #[test]
    fn sphere_occluder_labels_consistent() {
        let cfg = SceneConfig {
            occluder: Some(Occluder {
                kind: OccluderKind::Sphere,
                coverage: 0.3,
            }),
            seed: 4,
            ..SceneConfig::default()
        };
        let pair = generate_scene(&cfg).unwrap();
        assert!(check_consistency(&pair, cfg.match_radius()).is_empty());
        assert!((pair.occluded_fraction() - 0.3).abs() <= 0.1);
    }
}
