//! The coarse-to-fine network: shared pyramids for both frames, an
//! all-to-all initialization at the bottom level, then per level an
//! upsample step followed by occlusion-aware cost-volume refinement.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cmu::{upsample, CmuParams, UpsampleGeometry, UpsampleInputs};
use crate::error::{invalid, Error, Result};
use crate::geometry::{radius_neighbors, FlowField, NeighborLists, OcclusionMask, Point, PointSet};
use crate::nn::{mlp_forward, Mlp, ParamStore};
use crate::ocv::{ocv_refine, OcvInputs, OcvParams, OcvShape};
use crate::pyramid::{encode, input_features, Grouping, PyramidGeometry, PyramidParams};
use crate::synth::LevelTruth;
use crate::tape::{Segments, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Upsampler {
    Cmu,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CostVolumeMode {
    /// Second aggregation stage and refiner see the occlusion estimate.
    Ocv,
    /// Occlusion inputs zeroed; weights see positions only.
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub levels: usize,
    /// Feature width per level, finest first. Must cover `levels`.
    pub widths: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    /// Neighbors per setconv group.
    pub group_k: usize,
    /// Correlation neighbors N of the upsampler.
    pub correlation_neighbors: usize,
    /// Neighbors of the upsampler's edge encoder graph.
    pub encoder_neighbors: usize,
    pub code_width: usize,
    pub score_hidden: Vec<usize>,
    pub cost_width: usize,
    pub cost_hidden: Vec<usize>,
    pub weight_hidden: Vec<usize>,
    pub refine_hidden: Vec<usize>,
    pub init_hidden: Vec<usize>,
    /// Cross-frame search radius at level 0; doubles per level.
    pub radius_base: f64,
    pub pair_cap: usize,
    pub intra_cap: usize,
    pub refine_passes: usize,
    /// Largest bottom level accepted by the all-to-all initialization.
    pub max_bottom: usize,
    pub upsampler: Upsampler,
    pub cost_volume: CostVolumeMode,
    /// Hard-zero the cost volume of points estimated occluded.
    pub zero_occluded: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            widths: vec![32, 64, 128, 256],
            encoder_hidden: vec![],
            group_k: 16,
            correlation_neighbors: 32,
            encoder_neighbors: 16,
            code_width: 32,
            score_hidden: vec![64, 32],
            cost_width: 64,
            cost_hidden: vec![64],
            weight_hidden: vec![16],
            refine_hidden: vec![64],
            init_hidden: vec![32],
            radius_base: 0.25,
            pair_cap: 32,
            intra_cap: 16,
            refine_passes: 1,
            max_bottom: 256,
            upsampler: Upsampler::Cmu,
            cost_volume: CostVolumeMode::Ocv,
            zero_occluded: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths for single-core experiments.
    pub fn compact() -> Self {
        Self {
            widths: vec![16, 24, 32, 48],
            group_k: 8,
            correlation_neighbors: 16,
            encoder_neighbors: 8,
            code_width: 8,
            score_hidden: vec![16],
            cost_width: 16,
            cost_hidden: vec![16],
            weight_hidden: vec![8],
            refine_hidden: vec![32],
            init_hidden: vec![16],
            pair_cap: 16,
            intra_cap: 8,
            ..Self::default()
        }
    }

    pub fn full_scale() -> Self {
        Self {
            levels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.levels) {
            return Err(invalid!("level count must be 2..=4, got {}", self.levels));
        }
        if self.widths.len() < self.levels {
            return Err(invalid!(
                "{} widths given for {} levels",
                self.widths.len(),
                self.levels
            ));
        }
        if self
            .widths
            .iter()
            .chain([&self.code_width, &self.cost_width])
            .any(|&w| w == 0)
        {
            return Err(invalid!("widths must be positive"));
        }
        if self.group_k == 0 || self.correlation_neighbors == 0 || self.encoder_neighbors == 0 {
            return Err(invalid!("neighbor counts must be positive"));
        }
        if self.pair_cap == 0 || self.intra_cap == 0 || self.refine_passes == 0 {
            return Err(invalid!("pair caps and refinement passes must be positive"));
        }
        if !(self.radius_base > 0.0 && self.radius_base.is_finite()) {
            return Err(invalid!(
                "radius base must be positive, got {}",
                self.radius_base
            ));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.widths[level]
    }

    pub fn radius(&self, level: usize) -> f64 {
        self.radius_base * (1u64 << level) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub pyramid: PyramidParams,
    /// Indexed by fine level; entry `l` upsamples from `l + 1`.
    pub cmu: Vec<CmuParams>,
    pub ocv: Vec<OcvParams>,
    pub init_pairs: Mlp,
    pub init_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    /// Every parameter is created regardless of the ablation switches so that
    /// initial values match across configurations with the same seed.
    pub fn new(config: ModelConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(invalid!("input feature width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let l = config.levels;
        let widths = &config.widths[..l];
        let pyramid = PyramidParams::new(
            &mut store,
            input_dim,
            widths,
            &config.encoder_hidden,
            &mut rng,
        );
        let cmu = (0..l - 1)
            .map(|k| {
                CmuParams::new(
                    &mut store,
                    &alloc::format!("cmu.{k}"),
                    widths[k],
                    widths[k + 1],
                    config.code_width,
                    &config.score_hidden,
                    &mut rng,
                )
            })
            .collect();
        let ocv = (0..l)
            .map(|k| {
                OcvParams::new(
                    &mut store,
                    &alloc::format!("ocv.{k}"),
                    &OcvShape {
                        feature_width: widths[k],
                        cost_width: config.cost_width,
                        cost_hidden: &config.cost_hidden,
                        weight_hidden: &config.weight_hidden,
                        refine_hidden: &config.refine_hidden,
                    },
                    &mut rng,
                )
            })
            .collect();
        let wb = widths[l - 1];
        let mut pair_layers = config.init_hidden.clone();
        pair_layers.push(1);
        let init_pairs = Mlp::new(&mut store, "init.pairs", 3 + 2 * wb, &pair_layers, &mut rng);
        let mut head_layers = config.init_hidden.clone();
        head_layers.push(3);
        let init_head = Mlp::new(&mut store, "init.head", 3 + wb, &head_layers, &mut rng);
        Ok(Self {
            config,
            input_dim,
            store,
            params: ModelParams {
                pyramid,
                cmu,
                ocv,
                init_pairs,
                init_head,
            },
        })
    }
}

/// Parameter-independent structure of one frame pair, computed once.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub p: PyramidGeometry,
    pub q: PyramidGeometry,
    pub upsample: Vec<UpsampleGeometry>,
    /// Same-frame radius groups of P per level.
    pub intra: Vec<Grouping>,
    pub p_input: Vec<f64>,
    pub q_input: Vec<f64>,
    pub input_dim: usize,
}

impl SceneGeometry {
    pub fn build(config: &ModelConfig, p: &PointSet, q: &PointSet) -> Result<Self> {
        config.validate()?;
        let levels = config.levels;
        let pg = PyramidGeometry::build(&p.positions, levels, config.group_k)?;
        let qg = PyramidGeometry::build(&q.positions, levels, config.group_k)?;
        let mut ups = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            let fine = &pg.levels[l].positions;
            let coarse = &pg.levels[l + 1].positions;
            ups.push(UpsampleGeometry::new(
                fine,
                coarse,
                config.correlation_neighbors.min(coarse.len()),
                config.encoder_neighbors.min(coarse.len()),
            )?);
        }
        let intra = (0..levels)
            .map(|l| {
                let pts = &pg.levels[l].positions;
                radius_neighbors(pts, pts, config.radius(l), config.intra_cap)
                    .map(|nb| Grouping::new(&nb))
            })
            .collect::<Result<Vec<_>>>()?;
        let (p_input, pd) = input_features(p);
        let (q_input, qd) = input_features(q);
        if pd != qd {
            return Err(Error::ShapeMismatch {
                op: "scene features",
                left: vec![pd],
                right: vec![qd],
            });
        }
        Ok(Self {
            p: pg,
            q: qg,
            upsample: ups,
            intra,
            p_input,
            q_input,
            input_dim: pd,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.p.num_levels()
    }
}

/// Neighborhoods found from parameter-dependent positions during a forward
/// pass, in the order they were searched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynamicStructure {
    pub warped_edges: Vec<NeighborLists>,
    pub pairs: Vec<NeighborLists>,
}

#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub level: usize,
    pub flow: Var,
    pub occlusion: Var,
    /// Flow entering the refinement stage (upsampled, or initialized at the
    /// bottom level).
    pub upsampled: Var,
    pub bootstrap: Option<Var>,
    pub correlation_weights: Option<Var>,
    /// First- and second-stage cost-volume weights of the last refinement
    /// pass.
    pub cross_weights: Var,
    pub intra_weights: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Coarsest first.
    pub levels: Vec<LevelOutput>,
    pub structure: DynamicStructure,
}

impl ForwardOutput {
    pub fn finest(&self) -> &LevelOutput {
        self.levels.last().expect("at least one level")
    }
}

fn points_var(tape: &mut Tape, pts: &[Point]) -> Result<Var> {
    tape.constant(pts.len(), 3, pts.iter().flatten().copied().collect())
}

/// `Σ_j a_ij y_j − x_i` for `a` given as `|x|·|y|` row-major weights.
pub fn soft_correspondence(tape: &mut Tape, weights: Var, x: &[Point], y: &[Point]) -> Result<Var> {
    let (i, j) = (x.len(), y.len());
    if tape.rows(weights) != i * j || tape.cols(weights) != 1 {
        return Err(Error::ShapeMismatch {
            op: "soft_correspondence",
            left: vec![tape.rows(weights), tape.cols(weights)],
            right: vec![i * j, 1],
        });
    }
    let yv = points_var(tape, y)?;
    let xv = points_var(tape, x)?;
    let targets: Rc<[usize]> = (0..i).flat_map(|_| 0..j).collect();
    let yg = tape.gather(yv, targets)?;
    let mean = tape.seg_weighted_sum(weights, yg, &Segments::uniform(i, j))?;
    tape.sub(mean, xv)
}

/// Dense matching between the bottom levels. Returns (soft-matched flow,
/// flow after the residual head).
#[allow(clippy::too_many_arguments)]
pub fn all_to_all_init(
    tape: &mut Tape,
    store: &ParamStore,
    pair_mlp: &Mlp,
    head_mlp: &Mlp,
    max_bottom: usize,
    x: &[Point],
    p_features: Var,
    y: &[Point],
    q_features: Var,
) -> Result<(Var, Var)> {
    let (i, j) = (x.len(), y.len());
    if i > max_bottom || j > max_bottom {
        return Err(invalid!(
            "bottom level has {}×{} points, all-to-all limit is {}",
            i,
            j,
            max_bottom
        ));
    }
    let owners: Rc<[usize]> = (0..i).flat_map(|a| core::iter::repeat_n(a, j)).collect();
    let targets: Rc<[usize]> = (0..i).flat_map(|_| 0..j).collect();
    let offsets: Vec<f64> = (0..i)
        .flat_map(|a| {
            (0..j).flat_map(move |b| [x[a][0] - y[b][0], x[a][1] - y[b][1], x[a][2] - y[b][2]])
        })
        .collect();
    let offsets = tape.constant(i * j, 3, offsets)?;
    let pf = tape.gather(p_features, owners)?;
    let qf = tape.gather(q_features, targets)?;
    let input = tape.concat(&[offsets, pf, qf])?;
    let logits = mlp_forward(tape, store, pair_mlp, input)?;
    let weights = tape.seg_softmax(logits, &Segments::uniform(i, j))?;
    let raw = soft_correspondence(tape, weights, x, y)?;
    let head_in = tape.concat(&[raw, p_features])?;
    let delta = mlp_forward(tape, store, head_mlp, head_in)?;
    let flow = tape.add(raw, delta)?;
    Ok((raw, flow))
}

struct Replay<'a> {
    source: Option<&'a DynamicStructure>,
    warped: usize,
    pairs: usize,
}

impl<'a> Replay<'a> {
    fn next_warped(&mut self) -> Result<Option<&'a NeighborLists>> {
        let Some(s) = self.source else {
            return Ok(None);
        };
        let e = s
            .warped_edges
            .get(self.warped)
            .ok_or_else(|| invalid!("replayed structure has too few warped edge sets"))?;
        self.warped += 1;
        Ok(Some(e))
    }

    fn next_pairs(&mut self) -> Result<Option<&'a NeighborLists>> {
        let Some(s) = self.source else {
            return Ok(None);
        };
        let e = s
            .pairs
            .get(self.pairs)
            .ok_or_else(|| invalid!("replayed structure has too few pair sets"))?;
        self.pairs += 1;
        Ok(Some(e))
    }
}

/// Runs the network on one scene. With `replay`, neighborhoods searched
/// around predicted positions are taken from a previous pass instead of
/// being recomputed, which makes the output a smooth function of the
/// parameters for finite-difference checks.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    geo: &SceneGeometry,
    replay: Option<&DynamicStructure>,
) -> Result<ForwardOutput> {
    forward_with(tape, model, &model.store, geo, replay)
}

/// [`forward`] reading parameter values from `store` instead of the model's
/// own store. `store` must have the model's layout.
pub fn forward_with(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    geo: &SceneGeometry,
    replay: Option<&DynamicStructure>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if store.len() != model.store.len() {
        return Err(invalid!(
            "parameter store has {} tensors, model needs {}",
            store.len(),
            model.store.len()
        ));
    }
    let params = &model.params;
    let levels = cfg.levels;
    if geo.num_levels() != levels {
        return Err(invalid!(
            "scene built for {} levels, model has {}",
            geo.num_levels(),
            levels
        ));
    }
    if geo.input_dim != model.input_dim {
        return Err(Error::ShapeMismatch {
            op: "model input",
            left: vec![model.input_dim],
            right: vec![geo.input_dim],
        });
    }
    let p_raw = tape.constant(
        geo.p.levels[0].positions.len(),
        geo.input_dim,
        geo.p_input.clone(),
    )?;
    let q_raw = tape.constant(
        geo.q.levels[0].positions.len(),
        geo.input_dim,
        geo.q_input.clone(),
    )?;
    let pf = encode(tape, store, &params.pyramid, &geo.p, p_raw)?.features;
    let qf = encode(tape, store, &params.pyramid, &geo.q, q_raw)?.features;

    let aware = cfg.cost_volume == CostVolumeMode::Ocv;
    let mut replay = Replay {
        source: replay,
        warped: 0,
        pairs: 0,
    };
    let mut structure = DynamicStructure::default();
    let mut outputs = Vec::with_capacity(levels);

    let refine = |tape: &mut Tape,
                  replay: &mut Replay<'_>,
                  structure: &mut DynamicStructure,
                  level: usize,
                  mut flow: Var|
     -> Result<(Var, Var, Var, Var)> {
        let mut last = None;
        for _ in 0..cfg.refine_passes {
            let inputs = OcvInputs {
                positions: &geo.p.levels[level].positions,
                features: pf[level],
                q_positions: &geo.q.levels[level].positions,
                q_features: qf[level],
                intra: &geo.intra[level],
                radius: cfg.radius(level),
                cap: cfg.pair_cap,
                fixed_pairs: replay.next_pairs()?,
            };
            let out = ocv_refine(
                tape,
                store,
                &params.ocv[level],
                &inputs,
                flow,
                aware,
                cfg.zero_occluded,
            )?;
            structure.pairs.push(out.pair_cost.pairs);
            flow = out.flow;
            last = Some((
                out.occlusion,
                out.volume.cross_weights,
                out.volume.intra_weights,
            ));
        }
        let (occlusion, cw, iw) = last.expect("at least one pass");
        Ok((flow, occlusion, cw, iw))
    };

    let b = levels - 1;
    let (_, init) = all_to_all_init(
        tape,
        store,
        &params.init_pairs,
        &params.init_head,
        cfg.max_bottom,
        &geo.p.levels[b].positions,
        pf[b],
        &geo.q.levels[b].positions,
        qf[b],
    )?;
    let (mut flow, occlusion, cross_weights, intra_weights) =
        refine(tape, &mut replay, &mut structure, b, init)?;
    outputs.push(LevelOutput {
        level: b,
        flow,
        occlusion,
        upsampled: init,
        bootstrap: None,
        correlation_weights: None,
        cross_weights,
        intra_weights,
    });

    for l in (0..b).rev() {
        let q_coarse = &geo.q.levels[l + 1].positions;
        let inputs = UpsampleInputs {
            fine_positions: &geo.p.levels[l].positions,
            fine_features: pf[l],
            coarse_positions: &geo.p.levels[l + 1].positions,
            coarse_features: pf[l + 1],
            coarse_in_fine: &geo.p.levels[l + 1].parent_indices,
            coarse_flow: flow,
            q_coarse_positions: q_coarse,
            q_coarse_features: qf[l + 1],
        };
        let cmu = match cfg.upsampler {
            Upsampler::Cmu => Some(&params.cmu[l]),
            Upsampler::Trilinear => None,
        };
        let fixed = if cmu.is_some() {
            replay.next_warped()?
        } else {
            None
        };
        let up = upsample(
            tape,
            store,
            cmu,
            &geo.upsample[l],
            &inputs,
            cfg.encoder_neighbors.min(q_coarse.len()),
            fixed,
        )?;
        if let Some(e) = up.warped_edges {
            structure.warped_edges.push(e);
        }
        let (f, occlusion, cross_weights, intra_weights) =
            refine(tape, &mut replay, &mut structure, l, up.upsampled)?;
        flow = f;
        outputs.push(LevelOutput {
            level: l,
            flow,
            occlusion,
            upsampled: up.upsampled,
            bootstrap: Some(up.bootstrap),
            correlation_weights: up.weights,
            cross_weights,
            intra_weights,
        });
    }
    Ok(ForwardOutput {
        levels: outputs,
        structure,
    })
}

/// Plain values of one level's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub level: usize,
    pub flow: FlowField,
    pub occlusion: OcclusionMask,
    pub upsampled: FlowField,
}

impl LevelPrediction {
    pub fn read(tape: &Tape, out: &LevelOutput) -> Self {
        Self {
            level: out.level,
            flow: FlowField::from_flat(tape.value(out.flow)),
            occlusion: OcclusionMask(tape.value(out.occlusion).to_vec()),
            upsampled: FlowField::from_flat(tape.value(out.upsampled)),
        }
    }
}

/// Forward pass returning per-level values, finest level first.
pub fn predict(model: &Model, geo: &SceneGeometry) -> Result<Vec<LevelPrediction>> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, geo, None)?;
    let mut preds: Vec<LevelPrediction> = out
        .levels
        .iter()
        .map(|o| LevelPrediction::read(&tape, o))
        .collect();
    preds.reverse();
    Ok(preds)
}

#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub total: Var,
    /// `Σ_l β_l · mean_i ‖f − f_gt‖`.
    pub flow_term: f64,
    /// `Σ_l β_l · mean_i |O − O_gt|`.
    pub occlusion_term: f64,
}

/// Weighted multi-level flow and occlusion loss. `truth` and `beta` are
/// indexed by level number (0 finest).
pub fn loss(
    tape: &mut Tape,
    outputs: &[LevelOutput],
    truth: &[LevelTruth],
    alpha: f64,
    beta: &[f64],
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha must be in [0, 1], got {alpha}"));
    }
    if truth.len() != outputs.len() || beta.len() != outputs.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: vec![outputs.len()],
            right: vec![truth.len(), beta.len()],
        });
    }
    let mut flow_parts = Vec::with_capacity(outputs.len());
    let mut occ_parts = Vec::with_capacity(outputs.len());
    for out in outputs {
        let gt = truth.get(out.level).ok_or(Error::IndexOutOfRange {
            op: "loss",
            index: out.level,
            len: truth.len(),
        })?;
        let n = gt.flow.len();
        let gt_flow = tape.constant(n, 3, gt.flow.to_flat())?;
        let gt_occ = tape.constant(n, 1, gt.occlusion.0.clone())?;
        let d = tape.sub(out.flow, gt_flow)?;
        let norms = tape.row_norm(d);
        let fl = tape.mean(norms)?;
        let d = tape.sub(out.occlusion, gt_occ)?;
        let a = tape.abs(d);
        let ol = tape.mean(a)?;
        let b = beta[out.level];
        flow_parts.push(tape.scale(fl, b));
        occ_parts.push(tape.scale(ol, b));
    }
    let flow_sum = tape.concat(&flow_parts)?;
    let flow_sum = tape.sum(flow_sum);
    let occ_sum = tape.concat(&occ_parts)?;
    let occ_sum = tape.sum(occ_sum);
    let flow_term = tape.item(flow_sum);
    let occlusion_term = tape.item(occ_sum);
    let a = tape.scale(flow_sum, alpha);
    let o = tape.scale(occ_sum, 1.0 - alpha);
    let total = tape.add(a, o)?;
    Ok(LossValue {
        total,
        flow_term,
        occlusion_term,
    })
}
