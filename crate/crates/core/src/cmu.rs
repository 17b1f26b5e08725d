//! Correlation matrix upsampling.
//!
//! Coarse flow is first spread to the fine level by inverse-distance
//! weighting (the bootstrap, also used alone as the trilinear baseline). The
//! fine points are warped by that bootstrap, edges to the coarse level of
//! both frames are encoded by chained setconv layers, and three scalar MLP
//! branches score every (fine point, coarse neighbor) pair from position,
//! code and feature differences. A per-row softmax turns the scores into
//! convex weights over the coarse neighbors' flows.

use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{interpolation_weights, knn, NeighborLists, Point};
use crate::nn::{mlp_forward, Mlp, ParamStore};
use crate::pyramid::Grouping;
use crate::tape::{Tape, Var};

/// Number of coarse points used by the bootstrap interpolation.
pub const BOOTSTRAP_NEIGHBORS: usize = 3;

/// Number of chained setconv layers in the edge encoder.
pub const ENCODER_LAYERS: usize = 3;

#[derive(Debug, Clone)]
pub struct CmuParams {
    pub encoder: Vec<Mlp>,
    /// Maps coarse features into the fine feature space for the w-branch.
    pub projection: Mlp,
    pub score_position: Mlp,
    pub score_code: Mlp,
    pub score_feature: Mlp,
    pub code_width: usize,
}

impl CmuParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fine_width: usize,
        coarse_width: usize,
        code_width: usize,
        score_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut encoder = Vec::with_capacity(ENCODER_LAYERS);
        let mut center = fine_width;
        for k in 0..ENCODER_LAYERS {
            let name = alloc::format!("{prefix}.encoder.{k}");
            encoder.push(Mlp::new(
                store,
                &name,
                3 + center + coarse_width,
                &[code_width],
                rng,
            ));
            center = code_width;
        }
        let mut head = score_hidden.to_vec();
        head.push(1);
        let projection = Mlp::new(
            store,
            &alloc::format!("{prefix}.projection"),
            coarse_width,
            &[fine_width],
            rng,
        );
        let score_position = Mlp::new(store, &alloc::format!("{prefix}.score_u"), 6, &head, rng);
        let score_code = Mlp::new(
            store,
            &alloc::format!("{prefix}.score_v"),
            2 * code_width,
            &head,
            rng,
        );
        let score_feature = Mlp::new(
            store,
            &alloc::format!("{prefix}.score_w"),
            fine_width,
            &head,
            rng,
        );
        Self {
            encoder,
            projection,
            score_position,
            score_code,
            score_feature,
            code_width,
        }
    }

    pub fn score_heads(&self) -> [&Mlp; 3] {
        [&self.score_position, &self.score_code, &self.score_feature]
    }
}

/// Parameter-independent graph structure between a fine level and the next
/// coarser level of the same frame.
#[derive(Debug, Clone)]
pub struct UpsampleGeometry {
    /// The `N` nearest coarse points of each fine point.
    pub correlation: NeighborLists,
    /// Encoder graph: the `K` nearest coarse points of each fine point.
    pub encoder: Grouping,
    pub bootstrap: NeighborLists,
    pub bootstrap_weights: Vec<f64>,
}

impl UpsampleGeometry {
    pub fn new(
        fine: &[Point],
        coarse: &[Point],
        neighbors: usize,
        encoder_neighbors: usize,
    ) -> Result<Self> {
        let correlation = build_edges(fine, coarse, neighbors)?;
        let encoder = Grouping::new(&knn(fine, coarse, encoder_neighbors)?);
        let (bootstrap, bootstrap_weights) =
            interpolation_weights(fine, coarse, BOOTSTRAP_NEIGHBORS)?;
        Ok(Self {
            correlation,
            encoder,
            bootstrap,
            bootstrap_weights,
        })
    }
}

/// Intra-frame edges: the `n` nearest coarse points of every fine point.
pub fn build_edges(fine: &[Point], coarse: &[Point], n: usize) -> Result<NeighborLists> {
    knn(fine, coarse, n)
}

/// Cross-frame edges: the `n` nearest second-frame coarse points around
/// each warped fine point.
pub fn build_warped_edges(
    warped_fine: &[Point],
    coarse_q: &[Point],
    n: usize,
) -> Result<NeighborLists> {
    knn(warped_fine, coarse_q, n)
}

/// Edge features `(coarse − fine offset ‖ fine feature ‖ coarse feature)`
/// for inspection; the encoder builds the same rows on the tape.
pub fn edge_features(
    nb: &NeighborLists,
    fine_features: &[f64],
    fine_dim: usize,
    coarse_features: &[f64],
    coarse_dim: usize,
) -> Vec<Vec<f64>> {
    let owners = nb.owners();
    nb.entries()
        .iter()
        .zip(owners)
        .map(|(e, i)| {
            let mut row = e.offset.to_vec();
            row.extend_from_slice(&fine_features[i * fine_dim..(i + 1) * fine_dim]);
            row.extend_from_slice(
                &coarse_features[e.index * coarse_dim..(e.index + 1) * coarse_dim],
            );
            row
        })
        .collect()
}

/// Inverse-distance interpolation of coarse flow at the fine points.
pub fn bootstrap_flow(tape: &mut Tape, geo: &UpsampleGeometry, coarse_flow: Var) -> Result<Var> {
    let gathered = tape.gather(coarse_flow, geo.bootstrap.target_indices())?;
    let w = tape.constant(
        geo.bootstrap_weights.len(),
        1,
        geo.bootstrap_weights.clone(),
    )?;
    tape.seg_weighted_sum(w, gathered, &geo.bootstrap.segments())
}

/// Chained setconv encoder. `offsets` is `edges × 3` (coarse minus fine).
pub fn encode_edges(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CmuParams,
    group: &Grouping,
    offsets: Var,
    fine_features: Var,
    coarse_features: Var,
) -> Result<Var> {
    let coarse = tape.gather(coarse_features, group.targets.clone())?;
    let mut h = fine_features;
    for mlp in &params.encoder {
        let center = tape.gather(h, group.owners.clone())?;
        let input = tape.concat(&[offsets, center, coarse])?;
        let z = mlp_forward(tape, store, mlp, input)?;
        h = tape.seg_max(z, &group.segments)?;
    }
    Ok(h)
}

/// Inputs of one upsampling step from level `l + 1` to level `l`.
pub struct UpsampleInputs<'a> {
    pub fine_positions: &'a [Point],
    pub fine_features: Var,
    pub coarse_positions: &'a [Point],
    pub coarse_features: Var,
    /// Index of each coarse point within the fine level.
    pub coarse_in_fine: &'a [usize],
    pub coarse_flow: Var,
    pub q_coarse_positions: &'a [Point],
    pub q_coarse_features: Var,
}

pub struct UpsampleOutput {
    pub bootstrap: Var,
    pub upsampled: Var,
    /// `I·N × 1` softmax weights, row-major by fine point.
    pub weights: Option<Var>,
    pub scores: Option<Var>,
    pub warped_edges: Option<NeighborLists>,
}

/// Raw similarity scores for every (fine point, coarse neighbor) pair.
#[allow(clippy::too_many_arguments)]
pub fn correlation_scores(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CmuParams,
    edges: &NeighborLists,
    inputs: &UpsampleInputs<'_>,
    warped: Var,
    codes: Var,
    warped_codes: Var,
) -> Result<Var> {
    let owners: Rc<[usize]> = edges.owners().into();
    let targets: Rc<[usize]> = edges.target_indices().into();
    let n_fine = inputs.fine_positions.len();
    let n_coarse = inputs.coarse_positions.len();
    if tape.rows(warped) != n_fine
        || tape.rows(codes) != n_fine
        || tape.rows(warped_codes) != n_fine
    {
        return Err(Error::Invalid(
            "correlation_scores: warped quantities missing or misaligned".into(),
        ));
    }
    let coarse_fine_idx: Rc<[usize]> = targets.iter().map(|&n| inputs.coarse_in_fine[n]).collect();

    let fine_pos = tape.constant(
        n_fine,
        3,
        inputs.fine_positions.iter().flatten().copied().collect(),
    )?;
    let coarse_pos = tape.constant(
        n_coarse,
        3,
        inputs.coarse_positions.iter().flatten().copied().collect(),
    )?;
    let coarse_warped = tape.add(coarse_pos, inputs.coarse_flow)?;

    let xi = tape.gather(fine_pos, owners.clone())?;
    let xwi = tape.gather(warped, owners.clone())?;
    let xn = tape.gather(coarse_pos, targets.clone())?;
    let xwn = tape.gather(coarse_warped, targets.clone())?;
    let a = tape.concat(&[xi, xwi])?;
    let b = tape.concat(&[xn, xwn])?;
    let u = tape.sub(a, b)?;

    let gi = tape.gather(codes, owners.clone())?;
    let gwi = tape.gather(warped_codes, owners.clone())?;
    let gn = tape.gather(codes, coarse_fine_idx.clone())?;
    let gwn = tape.gather(warped_codes, coarse_fine_idx)?;
    let a = tape.concat(&[gi, gwi])?;
    let b = tape.concat(&[gn, gwn])?;
    let v = tape.sub(a, b)?;

    let projected = mlp_forward(tape, store, &params.projection, inputs.coarse_features)?;
    let pi = tape.gather(inputs.fine_features, owners)?;
    let pn = tape.gather(projected, targets)?;
    let w = tape.sub(pi, pn)?;

    let su = mlp_forward(tape, store, &params.score_position, u)?;
    let sv = mlp_forward(tape, store, &params.score_code, v)?;
    let sw = mlp_forward(tape, store, &params.score_feature, w)?;
    let s = tape.add(su, sv)?;
    tape.add(s, sw)
}

/// `f_u,i = Σ_n a_{i,n} f_n` over the correlation neighbors.
pub fn upsample_flow(
    tape: &mut Tape,
    weights: Var,
    edges: &NeighborLists,
    coarse_flow: Var,
) -> Result<Var> {
    let n_coarse = tape.rows(coarse_flow);
    if let Some(bad) = edges.entries().iter().find(|e| e.index >= n_coarse) {
        return Err(Error::IndexOutOfRange {
            op: "upsample_flow",
            index: bad.index,
            len: n_coarse,
        });
    }
    let flows = tape.gather(coarse_flow, edges.target_indices())?;
    tape.seg_weighted_sum(weights, flows, &edges.segments())
}

/// Full correlation-matrix upsampling step. With `params = None` the
/// bootstrap interpolation is returned unchanged (trilinear baseline).
pub fn upsample(
    tape: &mut Tape,
    store: &ParamStore,
    params: Option<&CmuParams>,
    geo: &UpsampleGeometry,
    inputs: &UpsampleInputs<'_>,
    warped_neighbors: usize,
    fixed_warped: Option<&NeighborLists>,
) -> Result<UpsampleOutput> {
    let bootstrap = bootstrap_flow(tape, geo, inputs.coarse_flow)?;
    let Some(params) = params else {
        return Ok(UpsampleOutput {
            bootstrap,
            upsampled: bootstrap,
            weights: None,
            scores: None,
            warped_edges: None,
        });
    };
    let n_fine = inputs.fine_positions.len();
    let fine_pos = tape.constant(
        n_fine,
        3,
        inputs.fine_positions.iter().flatten().copied().collect(),
    )?;
    let warped = tape.add(fine_pos, bootstrap)?;

    let enc_offsets = tape.constant(geo.encoder.num_edges(), 3, geo.encoder.offsets.clone())?;
    let codes = encode_edges(
        tape,
        store,
        params,
        &geo.encoder,
        enc_offsets,
        inputs.fine_features,
        inputs.coarse_features,
    )?;

    let warped_pts: Vec<Point> = tape
        .value(warped)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let wedges = match fixed_warped {
        Some(e) if e.num_queries() == n_fine => e.clone(),
        Some(_) => {
            return Err(Error::Invalid(
                "upsample: fixed warped edges do not match fine level".into(),
            ))
        }
        None => build_warped_edges(&warped_pts, inputs.q_coarse_positions, warped_neighbors)?,
    };
    let wgroup = Grouping::new(&wedges);
    let q_pos = tape.constant(
        inputs.q_coarse_positions.len(),
        3,
        inputs
            .q_coarse_positions
            .iter()
            .flatten()
            .copied()
            .collect(),
    )?;
    let yn = tape.gather(q_pos, wgroup.targets.clone())?;
    let xw = tape.gather(warped, wgroup.owners.clone())?;
    let w_offsets = tape.sub(yn, xw)?;
    let warped_codes = encode_edges(
        tape,
        store,
        params,
        &wgroup,
        w_offsets,
        inputs.fine_features,
        inputs.q_coarse_features,
    )?;

    let scores = correlation_scores(
        tape,
        store,
        params,
        &geo.correlation,
        inputs,
        warped,
        codes,
        warped_codes,
    )?;
    let weights = tape.seg_softmax(scores, &geo.correlation.segments())?;
    let upsampled = upsample_flow(tape, weights, &geo.correlation, inputs.coarse_flow)?;
    Ok(UpsampleOutput {
        bootstrap,
        upsampled,
        weights: Some(weights),
        scores: Some(scores),
        warped_edges: Some(wedges),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
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
    fn self_edges_have_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = pts(20, &mut rng);
        let e = build_edges(&p, &p, 1).unwrap();
        for i in 0..20 {
            assert_eq!(e.of(i)[0].index, i);
            assert_eq!(e.of(i)[0].offset, [0.0; 3]);
        }
        assert!(build_edges(&p, &p[..3], 4).is_err());
    }

    #[test]
    fn edge_features_match_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fine = pts(10, &mut rng);
        let coarse = pts(4, &mut rng);
        let ff: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let cf: Vec<f64> = (0..12).map(|k| -(k as f64)).collect();
        let e = build_edges(&fine, &coarse, 2).unwrap();
        let rows = edge_features(&e, &ff, 2, &cf, 3);
        for (k, (nb, owner)) in e.entries().iter().zip(e.owners()).enumerate() {
            let off = crate::geometry::sub(&coarse[nb.index], &fine[owner]);
            assert_eq!(&rows[k][..3], &off);
            assert_eq!(&rows[k][3..5], &ff[owner * 2..owner * 2 + 2]);
            assert_eq!(&rows[k][5..], &cf[nb.index * 3..nb.index * 3 + 3]);
        }
    }

    #[test]
    fn warped_edges_find_exact_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = pts(12, &mut rng);
        let q: Vec<Point> = p.iter().map(|x| [x[0] + 0.3, x[1] - 0.1, x[2]]).collect();
        let warped: Vec<Point> = p.iter().map(|x| [x[0] + 0.3, x[1] - 0.1, x[2]]).collect();
        let e = build_warped_edges(&warped, &q, 1).unwrap();
        for i in 0..12 {
            assert_eq!(e.of(i)[0].index, i);
        }
        let zero = build_warped_edges(&p, &p, 3).unwrap();
        assert_eq!(zero, build_edges(&p, &p, 3).unwrap());
        assert!(dist2(&p[0], &q[0]) > 0.0);
    }

    #[test]
    fn upsample_arithmetic() {
        let fine = [[0.0; 3]];
        let coarse = [[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]];
        let e = build_edges(&fine, &coarse, 2).unwrap();
        let mut tape = Tape::new();
        let w = tape.constant(2, 1, alloc::vec![0.25, 0.75]).unwrap();
        let f = tape
            .constant(2, 3, alloc::vec![0.0, 0.0, 0.0, 4.0, 0.0, 0.0])
            .unwrap();
        let out = upsample_flow(&mut tape, w, &e, f).unwrap();
        assert_eq!(tape.value(out), &[3.0, 0.0, 0.0]);

        let c = tape
            .constant(2, 3, alloc::vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
            .unwrap();
        let out = upsample_flow(&mut tape, w, &e, c).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0]);

        let small = tape.constant(1, 3, alloc::vec![0.0; 3]).unwrap();
        assert!(matches!(
            upsample_flow(&mut tape, w, &e, small),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
