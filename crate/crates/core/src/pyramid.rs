//! Hierarchical point feature abstraction: FPS at ratio 1/4 per level with a
//! grouping + shared MLP + max-pool (setconv) encoder at every level.

use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{farthest_point_sample, knn, NeighborLists, Point, PointSet};
use crate::nn::{mlp_forward, Mlp, ParamStore};
use crate::tape::{Segments, Tape, Var};

/// Tape-ready form of a [`NeighborLists`]: edge `e` joins center
/// `owners[e]` to source row `targets[e]`.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub segments: Segments,
    pub targets: Rc<[usize]>,
    pub owners: Rc<[usize]>,
    /// `edges × 3`, source minus center.
    pub offsets: Vec<f64>,
}

impl Grouping {
    pub fn new(nb: &NeighborLists) -> Self {
        Self {
            segments: nb.segments(),
            targets: nb.target_indices().into(),
            owners: nb.owners().into(),
            offsets: nb.offset_rows(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn num_centers(&self) -> usize {
        self.segments.count()
    }
}

/// Per center: shared MLP over `(offset ‖ source feature ‖ center feature)`
/// for each neighbor, then componentwise max. Empty groups give zeros.
pub fn setconv(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp,
    group: &Grouping,
    source_features: Var,
    center_features: Var,
) -> Result<Var> {
    let need = 3 + tape.cols(source_features) + tape.cols(center_features);
    if need != mlp.in_dim {
        return Err(Error::ShapeMismatch {
            op: "setconv",
            left: alloc::vec![mlp.in_dim],
            right: alloc::vec![need],
        });
    }
    if tape.rows(center_features) != group.num_centers() {
        return Err(Error::ShapeMismatch {
            op: "setconv centers",
            left: alloc::vec![group.num_centers()],
            right: alloc::vec![tape.rows(center_features)],
        });
    }
    let offsets = tape.constant(group.num_edges(), 3, group.offsets.clone())?;
    let src = tape.gather(source_features, group.targets.clone())?;
    let ctr = tape.gather(center_features, group.owners.clone())?;
    let edges = tape.concat(&[offsets, src, ctr])?;
    let h = mlp_forward(tape, store, mlp, edges)?;
    tape.seg_max(h, &group.segments)
}

/// Parameter-independent structure of one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelGeometry {
    pub positions: Vec<Point>,
    /// Index of each point in the previous level (identity at level 0).
    pub parent_indices: Vec<usize>,
    /// Index of each point in level 0.
    pub root_indices: Vec<usize>,
    /// Neighborhood of each point among the previous level's points
    /// (level 0 groups within itself).
    pub grouping: Grouping,
}

/// Sampling and grouping for every level of one frame. Depends only on
/// positions, so it can be computed once per frame and reused.
#[derive(Debug, Clone)]
pub struct PyramidGeometry {
    pub levels: Vec<LevelGeometry>,
}

pub const SAMPLING_RATIO: usize = 4;

pub fn level_sizes(n: usize, levels: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(levels);
    let mut m = n;
    for l in 0..levels {
        if l > 0 {
            m = m.div_ceil(SAMPLING_RATIO);
        }
        sizes.push(m);
    }
    sizes
}

pub fn min_points(levels: usize) -> usize {
    SAMPLING_RATIO.pow(levels.saturating_sub(1) as u32)
}

impl PyramidGeometry {
    pub fn build(positions: &[Point], levels: usize, group_k: usize) -> Result<Self> {
        if levels == 0 {
            return Err(invalid!("pyramid needs at least one level"));
        }
        let need = min_points(levels);
        if positions.len() < need {
            return Err(Error::FrameTooSmall {
                got: positions.len(),
                need,
                levels,
            });
        }
        if group_k == 0 {
            return Err(invalid!("setconv neighbor count must be >= 1"));
        }
        let sizes = level_sizes(positions.len(), levels);
        let mut out: Vec<LevelGeometry> = Vec::with_capacity(levels);
        let n0 = positions.len();
        let nb0 = knn(positions, positions, group_k.min(n0))?;
        out.push(LevelGeometry {
            positions: positions.to_vec(),
            parent_indices: (0..n0).collect(),
            root_indices: (0..n0).collect(),
            grouping: Grouping::new(&nb0),
        });
        for &size in &sizes[1..] {
            let prev = out.last().unwrap();
            let parent_indices = farthest_point_sample(&prev.positions, size, 0)?;
            let pos: Vec<Point> = parent_indices.iter().map(|&i| prev.positions[i]).collect();
            let root_indices = parent_indices
                .iter()
                .map(|&i| prev.root_indices[i])
                .collect();
            let nb = knn(&pos, &prev.positions, group_k.min(prev.positions.len()))?;
            out.push(LevelGeometry {
                positions: pos,
                parent_indices,
                root_indices,
                grouping: Grouping::new(&nb),
            });
        }
        Ok(Self { levels: out })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.positions.len()).collect()
    }

    /// Maps an index at `level` to the index of the same point at `target`
    /// (`target <= level`).
    pub fn index_at(&self, level: usize, i: usize, target: usize) -> usize {
        let mut idx = i;
        for l in (target + 1..=level).rev() {
            idx = self.levels[l].parent_indices[idx];
        }
        idx
    }
}

/// Setconv encoders shared between both frames.
#[derive(Debug, Clone)]
pub struct PyramidParams {
    pub encoders: Vec<Mlp>,
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl PyramidParams {
    /// `hidden` widths are inserted before each level's output width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        widths: &[usize],
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut encoders = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for (l, &w) in widths.iter().enumerate() {
            let mut layers: Vec<usize> = hidden.to_vec();
            layers.push(w);
            let name = alloc::format!("pyramid.{l}");
            encoders.push(Mlp::new(store, &name, 3 + 2 * prev, &layers, rng));
            prev = w;
        }
        Self {
            encoders,
            input_dim,
            widths: widths.to_vec(),
        }
    }
}

/// Feature matrices of one frame at every level (level 0 finest).
#[derive(Debug, Clone)]
pub struct Pyramid<'g> {
    pub geometry: &'g PyramidGeometry,
    pub features: Vec<Var>,
}

impl<'g> Pyramid<'g> {
    pub fn positions(&self, level: usize) -> &'g [Point] {
        &self.geometry.levels[level].positions
    }
}

/// Per-point input features: the frame's own features, or the height
/// coordinate when the frame carries none.
pub fn input_features(frame: &PointSet) -> (Vec<f64>, usize) {
    if frame.feature_dim > 0 {
        (frame.features.clone(), frame.feature_dim)
    } else {
        (frame.positions.iter().map(|p| p[2]).collect(), 1)
    }
}

/// Runs the per-level encoders over precomputed geometry.
pub fn encode<'g>(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PyramidParams,
    geometry: &'g PyramidGeometry,
    raw_features: Var,
) -> Result<Pyramid<'g>> {
    if params.encoders.len() < geometry.num_levels() {
        return Err(invalid!(
            "pyramid has {} levels but only {} encoders",
            geometry.num_levels(),
            params.encoders.len()
        ));
    }
    let mut features = Vec::with_capacity(geometry.num_levels());
    let mut prev = raw_features;
    for (l, level) in geometry.levels.iter().enumerate() {
        let centers = if l == 0 {
            prev
        } else {
            tape.gather(prev, level.parent_indices.clone())?
        };
        let f = setconv(
            tape,
            store,
            &params.encoders[l],
            &level.grouping,
            prev,
            centers,
        )?;
        features.push(f);
        prev = f;
    }
    Ok(Pyramid { geometry, features })
}

/// Builds geometry and features for one frame; returns the geometry and the
/// per-level feature matrices.
pub fn build_pyramid(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PyramidParams,
    frame: &PointSet,
    levels: usize,
    group_k: usize,
) -> Result<(PyramidGeometry, Vec<Var>)> {
    let geo = PyramidGeometry::build(&frame.positions, levels, group_k)?;
    let (raw, dim) = input_features(frame);
    if dim != params.input_dim {
        return Err(Error::ShapeMismatch {
            op: "pyramid input",
            left: alloc::vec![params.input_dim],
            right: alloc::vec![dim],
        });
    }
    let raw = tape.constant(frame.len(), dim, raw)?;
    let features = encode(tape, store, params, &geo, raw)?.features;
    Ok((geo, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn level_size_arithmetic() {
        assert_eq!(level_sizes(8192, 4), alloc::vec![8192, 2048, 512, 128]);
        assert_eq!(level_sizes(256, 4), alloc::vec![256, 64, 16, 4]);
        assert_eq!(level_sizes(205, 3), alloc::vec![205, 52, 13]);
    }

    #[test]
    fn geometry_subset_chain() {
        let pts = random_points(300, 9);
        let g = PyramidGeometry::build(&pts, 4, 16).unwrap();
        assert_eq!(g.sizes(), alloc::vec![300, 75, 19, 5]);
        for l in 1..4 {
            let prev = &g.levels[l - 1].positions;
            let mut seen = alloc::collections::BTreeSet::new();
            for (k, &p) in g.levels[l].parent_indices.iter().enumerate() {
                assert!(seen.insert(p), "parent index repeated");
                assert_eq!(prev[p], g.levels[l].positions[k]);
                assert_eq!(pts[g.levels[l].root_indices[k]], g.levels[l].positions[k]);
            }
        }
    }

    #[test]
    fn too_small_frame_rejected() {
        let pts = random_points(63, 1);
        assert_eq!(
            PyramidGeometry::build(&pts, 4, 16).unwrap_err(),
            Error::FrameTooSmall {
                got: 63,
                need: 64,
                levels: 4
            }
        );
    }

    fn linear_mlp(store: &mut ParamStore, in_dim: usize, out: usize, w: Vec<f64>) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(store, "sc", in_dim, &[out], &mut rng);
        store
            .set(
                mlp.layers[0].weight,
                Tensor::new(&[out, in_dim], w).unwrap(),
            )
            .unwrap();
        mlp
    }

    #[test]
    fn setconv_identity_on_block() {
        // one center, one neighbor at zero offset; MLP selects the source block
        let nb = knn(&[[0.0; 3]], &[[0.0; 3]], 1).unwrap();
        let group = Grouping::new(&nb);
        let mut store = ParamStore::new();
        // input = (offset 3, source 2, center 2) -> output source block
        let mut w = alloc::vec![0.0; 2 * 7];
        w[3] = 1.0;
        w[7 + 4] = 1.0;
        let mlp = linear_mlp(&mut store, 7, 2, w);
        let mut tape = Tape::new();
        let src = tape.constant(1, 2, alloc::vec![0.25, -3.0]).unwrap();
        let ctr = tape.constant(1, 2, alloc::vec![9.0, 9.0]).unwrap();
        let out = setconv(&mut tape, &store, &mlp, &group, src, ctr).unwrap();
        assert_eq!(tape.value(out), &[0.25, -3.0]);
    }

    #[test]
    fn setconv_empty_and_two_neighbor_max() {
        let centers = [[0.0; 3], [100.0, 0.0, 0.0]];
        let sources = [[0.1, 0.0, 0.0], [-0.2, 0.3, 0.0]];
        let nb = crate::geometry::radius_neighbors(&centers, &sources, 1.0, 8).unwrap();
        let group = Grouping::new(&nb);
        let mut store = ParamStore::new();
        let w: Vec<f64> = (0..2 * 5).map(|k| (k as f64 - 4.0) * 0.3).collect();
        let mlp = linear_mlp(&mut store, 5, 2, w.clone());
        let mut tape = Tape::new();
        let src = tape.constant(2, 1, alloc::vec![2.0, -1.0]).unwrap();
        let ctr = tape.constant(2, 1, alloc::vec![0.5, 0.5]).unwrap();
        let out = setconv(&mut tape, &store, &mlp, &group, src, ctr).unwrap();
        let v = tape.value(out);
        // hand evaluation of both edges of center 0
        let edge = |s: &Point, f: f64| [s[0], s[1], s[2], f, 0.5];
        let eval = |e: [f64; 5], o: usize| (0..5).map(|k| w[o * 5 + k] * e[k]).sum::<f64>();
        let e0 = edge(&sources[0], 2.0);
        let e1 = edge(&sources[1], -1.0);
        for o in 0..2 {
            assert!((v[o] - eval(e0, o).max(eval(e1, o))).abs() < 1e-14);
        }
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }
}
