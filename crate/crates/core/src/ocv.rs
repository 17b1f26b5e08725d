//! Occlusion-aware cost volume and flow refinement.
//!
//! For each first-frame point, costs are computed against the second-frame
//! points within a radius of its warped position. The max-pooled cost drives
//! a sigmoid occlusion estimate; costs are then pooled with softmax weights
//! over the cross-frame pairs, and pooled a second time over intra-frame
//! neighbors with weights that see both endpoints' occlusion. A residual MLP
//! refines the incoming flow from the result.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{radius_neighbors, NeighborLists, Point};
use crate::nn::{mlp_forward, Mlp, ParamStore};
use crate::pyramid::Grouping;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct OcvParams {
    pub cost: Mlp,
    pub occlusion_head: Mlp,
    pub weight_cross: Mlp,
    pub value_cross: Mlp,
    pub weight_intra: Mlp,
    pub value_intra: Mlp,
    pub refiner: Mlp,
    pub cost_width: usize,
}

pub struct OcvShape<'a> {
    pub feature_width: usize,
    pub cost_width: usize,
    pub cost_hidden: &'a [usize],
    pub weight_hidden: &'a [usize],
    pub refine_hidden: &'a [usize],
}

impl OcvParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        shape: &OcvShape<'_>,
        rng: &mut R,
    ) -> Self {
        let c = shape.cost_width;
        let w = shape.feature_width;
        let with_out = |hidden: &[usize], out: usize| {
            let mut v = hidden.to_vec();
            v.push(out);
            v
        };
        let name = |s: &str| alloc::format!("{prefix}.{s}");
        Self {
            cost: Mlp::new(
                store,
                &name("cost"),
                3 + 2 * w,
                &with_out(shape.cost_hidden, c),
                rng,
            ),
            occlusion_head: Mlp::new(store, &name("occlusion"), c, &[1], rng),
            weight_cross: Mlp::new(
                store,
                &name("weight1"),
                3,
                &with_out(shape.weight_hidden, 1),
                rng,
            ),
            value_cross: Mlp::new(store, &name("value1"), c, &[c], rng),
            weight_intra: Mlp::new(
                store,
                &name("weight2"),
                5,
                &with_out(shape.weight_hidden, 1),
                rng,
            ),
            value_intra: Mlp::new(store, &name("value2"), c, &[c], rng),
            refiner: Mlp::new(
                store,
                &name("refine"),
                c + w + 3 + 1,
                &with_out(shape.refine_hidden, 3),
                rng,
            ),
            cost_width: c,
        }
    }

    pub fn weight_heads(&self) -> [&Mlp; 2] {
        [&self.weight_cross, &self.weight_intra]
    }
}

/// Per-pair cost features between first-frame points and second-frame
/// points within the radius.
pub struct PairCost {
    pub pairs: NeighborLists,
    pub grouping: Grouping,
    /// `pairs × 3`, first-frame position minus second-frame position.
    pub offsets: Var,
    /// `pairs × cost_width`.
    pub costs: Var,
}

impl PairCost {
    pub fn nonempty(&self) -> Vec<bool> {
        (0..self.pairs.num_queries())
            .map(|i| !self.pairs.of(i).is_empty())
            .collect()
    }
}

fn rows_to_points(data: &[f64]) -> Vec<Point> {
    data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn points_const(tape: &mut Tape, pts: &[Point]) -> Result<Var> {
    tape.constant(pts.len(), 3, pts.iter().flatten().copied().collect())
}

/// `positions` is `n × 3` on the tape (typically warped by the current flow);
/// neighborhoods are searched around its values.
#[allow(clippy::too_many_arguments)]
pub fn pair_costs(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OcvParams,
    positions: Var,
    features: Var,
    q_positions: &[Point],
    q_features: Var,
    radius: f64,
    cap: usize,
) -> Result<PairCost> {
    let query = rows_to_points(tape.value(positions));
    let pairs = radius_neighbors(&query, q_positions, radius, cap)?;
    pair_costs_over(
        tape,
        store,
        params,
        positions,
        features,
        q_positions,
        q_features,
        pairs,
    )
}

/// Pair costs over a given pair structure; offsets are recomputed from the
/// current `positions`.
#[allow(clippy::too_many_arguments)]
pub fn pair_costs_over(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OcvParams,
    positions: Var,
    features: Var,
    q_positions: &[Point],
    q_features: Var,
    pairs: NeighborLists,
) -> Result<PairCost> {
    if pairs.num_queries() != tape.rows(positions) {
        return Err(Error::ShapeMismatch {
            op: "pair_costs",
            left: alloc::vec![tape.rows(positions)],
            right: alloc::vec![pairs.num_queries()],
        });
    }
    let grouping = Grouping::new(&pairs);
    let q = points_const(tape, q_positions)?;
    let x = tape.gather(positions, grouping.owners.clone())?;
    let y = tape.gather(q, grouping.targets.clone())?;
    let offsets = tape.sub(x, y)?;
    let pi = tape.gather(features, grouping.owners.clone())?;
    let qj = tape.gather(q_features, grouping.targets.clone())?;
    let input = tape.concat(&[offsets, pi, qj])?;
    let costs = mlp_forward(tape, store, &params.cost, input)?;
    Ok(PairCost {
        pairs,
        grouping,
        offsets,
        costs,
    })
}

/// Sigmoid of a learned scalar read-out of the max-pooled pair costs. Points
/// with no second-frame point in range are fully occluded (0).
pub fn estimate_occlusion(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OcvParams,
    pc: &PairCost,
) -> Result<Var> {
    let pooled = tape.seg_max(pc.costs, &pc.grouping.segments)?;
    let logit = mlp_forward(tape, store, &params.occlusion_head, pooled)?;
    let prob = tape.sigmoid(logit);
    let mask: Vec<f64> = pc.nonempty().into_iter().map(|b| b as u8 as f64).collect();
    let mask = tape.constant(mask.len(), 1, mask)?;
    tape.mul(prob, mask)
}

pub struct CostVolume {
    pub cross: Var,
    pub volume: Var,
    pub cross_weights: Var,
    pub intra_weights: Var,
}

/// Two-stage softmax-weighted pooling. `intra` groups each first-frame point
/// with its same-frame neighbors; `occlusion_aware = false` zeroes the
/// occlusion inputs of the second-stage weights.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_cost_volume(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OcvParams,
    pc: &PairCost,
    occlusion: Var,
    intra: &Grouping,
    occlusion_aware: bool,
    zero_occluded: bool,
) -> Result<CostVolume> {
    let n = pc.pairs.num_queries();
    if intra.num_centers() != n || tape.rows(occlusion) != n {
        return Err(Error::ShapeMismatch {
            op: "aggregate_cost_volume",
            left: alloc::vec![n],
            right: alloc::vec![intra.num_centers(), tape.rows(occlusion)],
        });
    }
    let rel = tape.scale(pc.offsets, -1.0);
    let logits = mlp_forward(tape, store, &params.weight_cross, rel)?;
    let cross_weights = tape.seg_softmax(logits, &pc.grouping.segments)?;
    let values = mlp_forward(tape, store, &params.value_cross, pc.costs)?;
    let cross = tape.seg_weighted_sum(cross_weights, values, &pc.grouping.segments)?;

    let offsets = tape.constant(intra.num_edges(), 3, intra.offsets.clone())?;
    let (o_j, o_i) = if occlusion_aware {
        (
            tape.gather(occlusion, intra.targets.clone())?,
            tape.gather(occlusion, intra.owners.clone())?,
        )
    } else {
        let z = tape.zeros(intra.num_edges(), 1);
        (z, z)
    };
    let input = tape.concat(&[offsets, o_j, o_i])?;
    let logits = mlp_forward(tape, store, &params.weight_intra, input)?;
    let intra_weights = tape.seg_softmax(logits, &intra.segments)?;
    let neighbor_cv = tape.gather(cross, intra.targets.clone())?;
    let values = mlp_forward(tape, store, &params.value_intra, neighbor_cv)?;
    let mut volume = tape.seg_weighted_sum(intra_weights, values, &intra.segments)?;
    if zero_occluded {
        let keep: Vec<f64> = tape
            .value(occlusion)
            .iter()
            .map(|&o| (o >= 0.5) as u8 as f64)
            .collect();
        let keep = tape.constant(n, 1, keep)?;
        volume = tape.mul_col(volume, keep)?;
    }
    Ok(CostVolume {
        cross,
        volume,
        cross_weights,
        intra_weights,
    })
}

/// `f = f_u + MLP(CV ‖ p ‖ f_u ‖ O)`.
pub fn refine_flow(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OcvParams,
    volume: Var,
    features: Var,
    upsampled: Var,
    occlusion: Var,
    occlusion_aware: bool,
) -> Result<Var> {
    let occ = if occlusion_aware {
        occlusion
    } else {
        tape.zeros(tape.rows(occlusion), 1)
    };
    let input = tape.concat(&[volume, features, upsampled, occ])?;
    let delta = mlp_forward(tape, store, &params.refiner, input)?;
    tape.add(upsampled, delta)
}

pub struct OcvOutput {
    pub pair_cost: PairCost,
    pub occlusion: Var,
    pub volume: CostVolume,
    pub flow: Var,
}

pub struct OcvInputs<'a> {
    pub positions: &'a [Point],
    pub features: Var,
    pub q_positions: &'a [Point],
    pub q_features: Var,
    pub intra: &'a Grouping,
    pub radius: f64,
    pub cap: usize,
    /// Reuses a previously found pair structure instead of searching.
    pub fixed_pairs: Option<&'a NeighborLists>,
}

/// Warp, cost, occlusion, two-stage aggregation and refinement at one level.
pub fn ocv_refine(
    tape: &mut Tape,
    store: &ParamStore,
    params: &OcvParams,
    inputs: &OcvInputs<'_>,
    flow: Var,
    occlusion_aware: bool,
    zero_occluded: bool,
) -> Result<OcvOutput> {
    let p = points_const(tape, inputs.positions)?;
    let warped = tape.add(p, flow)?;
    let pc = match inputs.fixed_pairs {
        Some(pairs) => pair_costs_over(
            tape,
            store,
            params,
            warped,
            inputs.features,
            inputs.q_positions,
            inputs.q_features,
            pairs.clone(),
        )?,
        None => pair_costs(
            tape,
            store,
            params,
            warped,
            inputs.features,
            inputs.q_positions,
            inputs.q_features,
            inputs.radius,
            inputs.cap,
        )?,
    };
    let occlusion = estimate_occlusion(tape, store, params, &pc)?;
    let volume = aggregate_cost_volume(
        tape,
        store,
        params,
        &pc,
        occlusion,
        inputs.intra,
        occlusion_aware,
        zero_occluded,
    )?;
    let refined = refine_flow(
        tape,
        store,
        params,
        volume.volume,
        inputs.features,
        flow,
        occlusion,
        occlusion_aware,
    )?;
    Ok(OcvOutput {
        pair_cost: pc,
        occlusion,
        volume,
        flow: refined,
    })
}
