//! Central finite-difference checks of the tape gradients.
//!
//! Every check builds a small random problem whose inputs live in a
//! [`ParamStore`], reduces the output to a scalar through a fixed random
//! projection, and compares the analytic gradient of each sampled scalar
//! with `(L(θ + h) − L(θ − h)) / 2h`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmu::{
    correlation_scores, encode_edges, upsample, CmuParams, UpsampleGeometry, UpsampleInputs,
};
use crate::error::Result;
use crate::geometry::{knn, radius_neighbors, Point};
use crate::model::{
    all_to_all_init, forward, forward_with, loss, Model, ModelConfig, SceneGeometry,
};
use crate::nn::{mlp_forward, Mlp, ParamId, ParamStore};
use crate::ocv::{
    aggregate_cost_volume, estimate_occlusion, ocv_refine, pair_costs_over, OcvInputs, OcvParams,
    OcvShape,
};
use crate::pyramid::{encode, setconv, Grouping, PyramidGeometry, PyramidParams};
use crate::synth::{downsample_gt, generate_scene, SceneConfig};
use crate::tape::{Segments, Tape, Var};
use crate::tensor::Tensor;

/// Tolerance for single operations and modules.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full network loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Names of all checks, in execution order.
pub const CHECKS: &[&str] = &[
    "linear",
    "leaky_relu",
    "sigmoid",
    "add_sub_mul",
    "scale_mul_col",
    "concat_gather",
    "seg_max",
    "seg_softmax",
    "seg_weighted_sum",
    "row_norm_abs_mean",
    "mlp",
    "setconv",
    "pyramid",
    "cmu.encode_edges",
    "cmu.correlation_scores",
    "cmu.upsample",
    "ocv.pair_costs",
    "ocv.occlusion",
    "ocv.aggregate",
    "ocv.refine",
    "all_to_all_init",
    "end_to_end",
];

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Scalars sampled per check when the problem has more.
    pub samples: usize,
    pub end_to_end_samples: usize,
    pub seed: u64,
    /// Name of a check whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
    /// Run only checks whose name contains this string.
    pub filter: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 160,
            end_to_end_samples: 160,
            seed: 0,
            corrupt: None,
            filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub checked: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// Parameter and flat index of the worst scalar.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

struct Ctx<'a> {
    opts: &'a GradcheckOptions,
    rng: ChaCha8Rng,
}

impl Ctx<'_> {
    fn matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(lo..hi))
            .collect();
        Tensor::new(&[rows, cols], data).expect("shape")
    }

    /// Entries with magnitude in `[0.1, 1)` and random sign, away from kinks.
    fn away_from_zero(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let m = self.rng.random_range(0.1..1.0);
                if self.rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(&[rows, cols], data).expect("shape")
    }

    fn points(&mut self, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| {
                [
                    self.rng.random_range(-1.0..1.0),
                    self.rng.random_range(-1.0..1.0),
                    self.rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn projection(&mut self, rows: usize, cols: usize) -> Vec<f64> {
        let s = 1.0 / libm::sqrt((rows * cols) as f64);
        (0..rows * cols)
            .map(|_| self.rng.random_range(-s..s))
            .collect()
    }
}

/// `Σ out ⊙ r` for a fixed random `r`.
fn project(tape: &mut Tape, out: Var, r: &[f64]) -> Result<Var> {
    let (rows, cols) = tape.dims(out);
    let r = tape.constant(rows, cols, r.to_vec())?;
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn run_check<F>(
    name: &'static str,
    store: &mut ParamStore,
    tolerance: f64,
    samples: usize,
    ctx: &mut Ctx<'_>,
    mut f: F,
) -> Result<CheckResult>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    // Zero-initialized biases put pre-activations of zero inputs exactly on
    // the rectifier kink; move them to a generic point.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            for v in store.value_mut(id).data_mut() {
                *v = ctx.rng.random_range(-0.1..0.1);
            }
        }
    }
    let mut tape = Tape::new();
    let l = f(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let mut analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| vec![0.0; store.value(id).len()])
        .collect();
    for (id, g) in grads.params() {
        if let Some(g) = g {
            analytic[id.index()].copy_from_slice(g);
        }
    }
    if ctx.opts.corrupt.as_deref() == Some(name) {
        for g in analytic.iter_mut().flatten() {
            *g = *g * 1.5 + 1e-2;
        }
    }

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |k| (id, k)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut ctx.rng, coords.len(), samples).into_vec();
        v.sort_unstable();
        v
    };

    let h = ctx.opts.step;
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(&mut tape, store)?;
        Ok(tape.item(l))
    };
    let mut worst = (0.0f64, String::new());
    for &c in &chosen {
        let (id, k) = coords[c];
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + h;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig - h;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[id.index()][k], numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{}[{}]", store.name(id), k));
        }
    }
    Ok(CheckResult {
        name,
        checked: chosen.len(),
        max_relative_error: worst.0,
        tolerance,
        worst: worst.1,
    })
}

fn ocv_params(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> OcvParams {
    OcvParams::new(
        store,
        "ocv",
        &OcvShape {
            feature_width: width,
            cost_width: 6,
            cost_hidden: &[8],
            weight_hidden: &[4],
            refine_hidden: &[8],
        },
        rng,
    )
}

struct CmuProblem {
    store: ParamStore,
    params: CmuParams,
    fine: Vec<Point>,
    coarse: Vec<Point>,
    q_coarse: Vec<Point>,
    coarse_in_fine: Vec<usize>,
    geo: UpsampleGeometry,
    ids: [ParamId; 4],
}

impl CmuProblem {
    fn new(ctx: &mut Ctx<'_>) -> Result<Self> {
        let (wf, wc) = (4, 5);
        let fine = ctx.points(12);
        let coarse_in_fine: Vec<usize> = (0..12).step_by(3).collect();
        let coarse: Vec<Point> = coarse_in_fine.iter().map(|&i| fine[i]).collect();
        let q_coarse = ctx.points(5);
        let mut store = ParamStore::new();
        let params = CmuParams::new(&mut store, "cmu", wf, wc, 4, &[6], &mut ctx.rng);
        let ids = [
            store.add("fine_features", ctx.matrix(12, wf, -1.0, 1.0)),
            store.add("coarse_features", ctx.matrix(4, wc, -1.0, 1.0)),
            store.add("coarse_flow", ctx.matrix(4, 3, -0.3, 0.3)),
            store.add("q_features", ctx.matrix(5, wc, -1.0, 1.0)),
        ];
        let geo = UpsampleGeometry::new(&fine, &coarse, 3, 3)?;
        Ok(Self {
            store,
            params,
            fine,
            coarse,
            q_coarse,
            coarse_in_fine,
            geo,
            ids,
        })
    }

    fn inputs<'a>(&'a self, tape: &mut Tape, store: &ParamStore) -> UpsampleInputs<'a> {
        UpsampleInputs {
            fine_positions: &self.fine,
            fine_features: tape.param(store, self.ids[0]),
            coarse_positions: &self.coarse,
            coarse_features: tape.param(store, self.ids[1]),
            coarse_in_fine: &self.coarse_in_fine,
            coarse_flow: tape.param(store, self.ids[2]),
            q_coarse_positions: &self.q_coarse,
            q_coarse_features: tape.param(store, self.ids[3]),
        }
    }
}

/// Runs the suite, skipping checks excluded by the filter.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut ctx = Ctx {
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    let mut results = Vec::new();
    for &name in CHECKS {
        if let Some(f) = &opts.filter {
            if !name.contains(f.as_str()) {
                continue;
            }
        }
        results.push(run_named(name, &mut ctx)?);
    }
    Ok(results)
}

fn run_named(name: &'static str, ctx: &mut Ctx<'_>) -> Result<CheckResult> {
    let tol = OP_TOLERANCE;
    let samples = ctx.opts.samples;
    let mut store = ParamStore::new();
    match name {
        "linear" => {
            let x = store.add("x", ctx.matrix(5, 4, -1.0, 1.0));
            let w = store.add("w", ctx.matrix(3, 4, -1.0, 1.0));
            let b = store.add("b", ctx.matrix(1, 3, -1.0, 1.0));
            let r = ctx.projection(5, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (x, w, b) = (t.param(s, x), t.param(s, w), t.param(s, b));
                let y = t.linear(x, w, Some(b))?;
                project(t, y, &r)
            })
        }
        "leaky_relu" => {
            let x = store.add("x", ctx.away_from_zero(6, 3));
            let r = ctx.projection(6, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let x = t.param(s, x);
                let y = t.leaky_relu(x, 0.1);
                project(t, y, &r)
            })
        }
        "sigmoid" => {
            let x = store.add("x", ctx.matrix(6, 3, -4.0, 4.0));
            let r = ctx.projection(6, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let x = t.param(s, x);
                let y = t.sigmoid(x);
                project(t, y, &r)
            })
        }
        "add_sub_mul" => {
            let a = store.add("a", ctx.matrix(4, 3, -1.0, 1.0));
            let b = store.add("b", ctx.matrix(4, 3, -1.0, 1.0));
            let c = store.add("c", ctx.matrix(4, 3, -1.0, 1.0));
            let r = ctx.projection(4, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (a, b, c) = (t.param(s, a), t.param(s, b), t.param(s, c));
                let u = t.add(a, b)?;
                let v = t.sub(a, c)?;
                let y = t.mul(u, v)?;
                project(t, y, &r)
            })
        }
        "scale_mul_col" => {
            let x = store.add("x", ctx.matrix(5, 3, -1.0, 1.0));
            let c = store.add("col", ctx.matrix(5, 1, -1.0, 1.0));
            let r = ctx.projection(5, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (x, c) = (t.param(s, x), t.param(s, c));
                let y = t.scale(x, -2.5);
                let y = t.mul_col(y, c)?;
                project(t, y, &r)
            })
        }
        "concat_gather" => {
            let a = store.add("a", ctx.matrix(4, 2, -1.0, 1.0));
            let b = store.add("b", ctx.matrix(4, 3, -1.0, 1.0));
            let r = ctx.projection(6, 5);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let y = t.concat(&[a, b])?;
                let y = t.gather(y, vec![3, 0, 0, 2, 3, 3])?;
                project(t, y, &r)
            })
        }
        "seg_max" => {
            let x = store.add("x", ctx.matrix(9, 3, -1.0, 1.0));
            let seg = Segments::from_offsets(vec![0, 2, 2, 6, 9])?;
            let r = ctx.projection(4, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let x = t.param(s, x);
                let y = t.seg_max(x, &seg)?;
                project(t, y, &r)
            })
        }
        "seg_softmax" => {
            let x = store.add("x", ctx.matrix(9, 1, -2.0, 2.0));
            let seg = Segments::from_offsets(vec![0, 1, 4, 9])?;
            let r = ctx.projection(9, 1);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let x = t.param(s, x);
                let y = t.seg_softmax(x, &seg)?;
                project(t, y, &r)
            })
        }
        "seg_weighted_sum" => {
            let w = store.add("w", ctx.matrix(7, 1, -1.0, 1.0));
            let v = store.add("v", ctx.matrix(7, 3, -1.0, 1.0));
            let seg = Segments::from_offsets(vec![0, 3, 3, 7])?;
            let r = ctx.projection(3, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (w, v) = (t.param(s, w), t.param(s, v));
                let y = t.seg_weighted_sum(w, v, &seg)?;
                project(t, y, &r)
            })
        }
        "row_norm_abs_mean" => {
            let x = store.add("x", ctx.away_from_zero(5, 3));
            let r = ctx.projection(5, 1);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let x = t.param(s, x);
                let n = t.row_norm(x);
                let n = project(t, n, &r)?;
                let a = t.abs(x);
                let m = t.mean(a)?;
                t.add(n, m)
            })
        }
        "mlp" => {
            let mlp = Mlp::new(&mut store, "mlp", 4, &[6, 5, 2], &mut ctx.rng);
            let x = store.add("x", ctx.matrix(7, 4, -1.0, 1.0));
            let r = ctx.projection(7, 2);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let x = t.param(s, x);
                let y = mlp_forward(t, s, &mlp, x)?;
                project(t, y, &r)
            })
        }
        "setconv" => {
            let src = ctx.points(10);
            let centers = ctx.points(4);
            let group = Grouping::new(&knn(&centers, &src, 3)?);
            let mlp = Mlp::new(&mut store, "setconv", 3 + 2 + 2, &[6, 4], &mut ctx.rng);
            let sf = store.add("source", ctx.matrix(10, 2, -1.0, 1.0));
            let cf = store.add("center", ctx.matrix(4, 2, -1.0, 1.0));
            let r = ctx.projection(4, 4);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (sf, cf) = (t.param(s, sf), t.param(s, cf));
                let y = setconv(t, s, &mlp, &group, sf, cf)?;
                project(t, y, &r)
            })
        }
        "pyramid" => {
            let pts = ctx.points(32);
            let geo = PyramidGeometry::build(&pts, 2, 4)?;
            let params = PyramidParams::new(&mut store, 2, &[4, 5], &[], &mut ctx.rng);
            let raw = store.add("input", ctx.matrix(32, 2, -1.0, 1.0));
            let r0 = ctx.projection(32, 4);
            let r1 = ctx.projection(8, 5);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let raw = t.param(s, raw);
                let f = encode(t, s, &params, &geo, raw)?.features;
                let a = project(t, f[0], &r0)?;
                let b = project(t, f[1], &r1)?;
                t.add(a, b)
            })
        }
        "cmu.encode_edges" => {
            let mut p = CmuProblem::new(ctx)?;
            let offsets = p.store.add(
                "offsets",
                ctx.matrix(p.geo.encoder.num_edges(), 3, -1.0, 1.0),
            );
            let r = ctx.projection(12, 4);
            let mut store = core::mem::take(&mut p.store);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let inputs = p.inputs(t, s);
                let off = t.param(s, offsets);
                let y = encode_edges(
                    t,
                    s,
                    &p.params,
                    &p.geo.encoder,
                    off,
                    inputs.fine_features,
                    inputs.coarse_features,
                )?;
                project(t, y, &r)
            })
        }
        "cmu.correlation_scores" => {
            let mut p = CmuProblem::new(ctx)?;
            let warped = p.store.add("warped", ctx.matrix(12, 3, -1.0, 1.0));
            let codes = p.store.add("codes", ctx.matrix(12, 4, -1.0, 1.0));
            let wcodes = p.store.add("warped_codes", ctx.matrix(12, 4, -1.0, 1.0));
            let r = ctx.projection(p.geo.correlation.total(), 1);
            let mut store = core::mem::take(&mut p.store);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let inputs = p.inputs(t, s);
                let (w, c, wc) = (t.param(s, warped), t.param(s, codes), t.param(s, wcodes));
                let y = correlation_scores(t, s, &p.params, &p.geo.correlation, &inputs, w, c, wc)?;
                project(t, y, &r)
            })
        }
        "cmu.upsample" => {
            let mut p = CmuProblem::new(ctx)?;
            let mut tape = Tape::new();
            let inputs = p.inputs(&mut tape, &p.store);
            let base = upsample(
                &mut tape,
                &p.store,
                Some(&p.params),
                &p.geo,
                &inputs,
                3,
                None,
            )?;
            let edges = base.warped_edges.expect("cmu edges");
            let r = ctx.projection(12, 3);
            let mut store = core::mem::take(&mut p.store);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let inputs = p.inputs(t, s);
                let y = upsample(t, s, Some(&p.params), &p.geo, &inputs, 3, Some(&edges))?;
                project(t, y.upsampled, &r)
            })
        }
        "ocv.pair_costs" | "ocv.occlusion" | "ocv.aggregate" | "ocv.refine" => {
            let w = 3;
            let pts = ctx.points(10);
            let q = ctx.points(12);
            let params = ocv_params(&mut store, w, &mut ctx.rng);
            let flow = store.add("flow", ctx.matrix(10, 3, -0.2, 0.2));
            let pf = store.add("p_features", ctx.matrix(10, w, -1.0, 1.0));
            let qf = store.add("q_features", ctx.matrix(12, w, -1.0, 1.0));
            let occ = store.add("occlusion", ctx.matrix(10, 1, 0.1, 0.9));
            let intra = Grouping::new(&radius_neighbors(&pts, &pts, 1.0, 4)?);
            let fv = store.value(flow).data().to_vec();
            let warped: Vec<Point> = pts
                .iter()
                .enumerate()
                .map(|(i, x)| [x[0] + fv[3 * i], x[1] + fv[3 * i + 1], x[2] + fv[3 * i + 2]])
                .collect();
            let pairs = radius_neighbors(&warped, &q, 0.9, 5)?;
            let r_cost = ctx.projection(pairs.total(), 6);
            let r_point = ctx.projection(10, 6);
            let r_occ = ctx.projection(10, 1);
            let r_flow = ctx.projection(10, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let p_const = t.constant(10, 3, pts.iter().flatten().copied().collect())?;
                let fl = t.param(s, flow);
                let pos = t.add(p_const, fl)?;
                let (pfv, qfv) = (t.param(s, pf), t.param(s, qf));
                match name {
                    "ocv.pair_costs" => {
                        let pc = pair_costs_over(t, s, &params, pos, pfv, &q, qfv, pairs.clone())?;
                        project(t, pc.costs, &r_cost)
                    }
                    "ocv.occlusion" => {
                        let pc = pair_costs_over(t, s, &params, pos, pfv, &q, qfv, pairs.clone())?;
                        let o = estimate_occlusion(t, s, &params, &pc)?;
                        project(t, o, &r_occ)
                    }
                    "ocv.aggregate" => {
                        let pc = pair_costs_over(t, s, &params, pos, pfv, &q, qfv, pairs.clone())?;
                        let o = t.param(s, occ);
                        let cv = aggregate_cost_volume(t, s, &params, &pc, o, &intra, true, false)?;
                        project(t, cv.volume, &r_point)
                    }
                    _ => {
                        let inputs = OcvInputs {
                            positions: &pts,
                            features: pfv,
                            q_positions: &q,
                            q_features: qfv,
                            intra: &intra,
                            radius: 0.9,
                            cap: 5,
                            fixed_pairs: Some(&pairs),
                        };
                        let out = ocv_refine(t, s, &params, &inputs, fl, true, false)?;
                        let a = project(t, out.flow, &r_flow)?;
                        let b = project(t, out.occlusion, &r_occ)?;
                        t.add(a, b)
                    }
                }
            })
        }
        "all_to_all_init" => {
            let w = 3;
            let pairs = Mlp::new(&mut store, "init.pairs", 3 + 2 * w, &[6, 1], &mut ctx.rng);
            let head = Mlp::new(&mut store, "init.head", 3 + w, &[6, 3], &mut ctx.rng);
            let x = ctx.points(5);
            let y = ctx.points(6);
            let pf = store.add("p", ctx.matrix(5, w, -1.0, 1.0));
            let qf = store.add("q", ctx.matrix(6, w, -1.0, 1.0));
            let r = ctx.projection(5, 3);
            run_check(name, &mut store, tol, samples, ctx, |t, s| {
                let (pfv, qfv) = (t.param(s, pf), t.param(s, qf));
                let (_, flow) = all_to_all_init(t, s, &pairs, &head, 256, &x, pfv, &y, qfv)?;
                project(t, flow, &r)
            })
        }
        "end_to_end" => {
            let cfg = ModelConfig {
                levels: 2,
                widths: vec![8, 12],
                group_k: 6,
                correlation_neighbors: 4,
                encoder_neighbors: 4,
                code_width: 4,
                score_hidden: vec![6],
                cost_width: 6,
                cost_hidden: vec![6],
                weight_hidden: vec![4],
                refine_hidden: vec![8],
                init_hidden: vec![6],
                radius_base: 0.5,
                pair_cap: 8,
                intra_cap: 6,
                ..ModelConfig::compact()
            };
            let pair = generate_scene(&SceneConfig {
                points: 64,
                seed: ctx.opts.seed,
                ..SceneConfig::default()
            })?;
            let keep = |n: usize| n.min(32);
            let p = crate::geometry::PointSet::new(
                pair.p.positions[..keep(pair.p.len())].to_vec(),
                pair.p.features[..3 * keep(pair.p.len())].to_vec(),
                3,
            )?;
            let q = crate::geometry::PointSet::new(
                pair.q.positions[..keep(pair.q.len())].to_vec(),
                pair.q.features[..3 * keep(pair.q.len())].to_vec(),
                3,
            )?;
            let small = crate::synth::LabeledFramePair {
                p: p.clone(),
                q: q.clone(),
                gt_flow: crate::geometry::FlowField(pair.gt_flow.0[..32].to_vec()),
                gt_occlusion: crate::geometry::OcclusionMask(pair.gt_occlusion.0[..32].to_vec()),
            };
            let geo = SceneGeometry::build(&cfg, &p, &q)?;
            let truth = downsample_gt(&small, &geo.p)?;
            let model = Model::new(cfg, 3)?;
            let mut tape = Tape::new();
            let structure = forward(&mut tape, &model, &geo, None)?.structure;
            let beta = [0.02, 0.04];
            let mut store = model.store.clone();
            let n = ctx.opts.end_to_end_samples;
            run_check(name, &mut store, END_TO_END_TOLERANCE, n, ctx, |t, s| {
                let out = forward_with(t, &model, s, &geo, Some(&structure))?;
                Ok(loss(t, &out.levels, &truth, 0.8, &beta)?.total)
            })
        }
        other => Err(crate::error::Error::Invalid(format!(
            "unknown gradient check {other}"
        ))),
    }
}
