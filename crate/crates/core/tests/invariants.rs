use ofl_core::model::{forward, loss, ForwardOutput, Model, ModelConfig, SceneGeometry};
use ofl_core::synth::{downsample_gt, generate_scene, LevelTruth, SceneConfig};
use ofl_core::tape::{Segments, Tape};
use ofl_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROW_TOLERANCE: f64 = 1e-9;

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        levels: 3,
        correlation_neighbors: 8,
        seed,
        ..ModelConfig::compact()
    }
}

fn scene(points: usize, seed: u64) -> ofl_core::synth::LabeledFramePair {
    generate_scene(&SceneConfig {
        points,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

/// Replaces every parameter with uniform noise of half-width `scale`.
fn randomize(model: &mut Model, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let shape = model.store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        model
            .store
            .set(id, Tensor::new(&shape, v).unwrap())
            .unwrap();
    }
}

/// Largest deviation of a non-empty segment's sum from 1; also asserts
/// non-negativity.
fn row_sum_error(w: &[f64], seg: &Segments) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..seg.count() {
        let r = seg.range(s);
        if r.is_empty() {
            continue;
        }
        assert!(w[r.clone()].iter().all(|&x| x >= 0.0));
        let sum: f64 = w[r].iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

fn rows(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn check_pass(model: &Model, geo: &SceneGeometry, out: &ForwardOutput, tape: &Tape) {
    for (k, lo) in out.levels.iter().enumerate() {
        let l = lo.level;
        let pairs = &out.structure.pairs[k];
        let e = row_sum_error(tape.value(lo.cross_weights), &pairs.segments());
        assert!(e <= ROW_TOLERANCE, "cross weights at level {l}: {e}");
        let e = row_sum_error(tape.value(lo.intra_weights), &geo.intra[l].segments);
        assert!(e <= ROW_TOLERANCE, "intra weights at level {l}: {e}");
        if k == 0 {
            continue;
        }
        let corr = &geo.upsample[l].correlation;
        let w = tape.value(lo.correlation_weights.expect("cmu model"));
        let e = row_sum_error(w, &corr.segments());
        assert!(e <= ROW_TOLERANCE, "correlation weights at level {l}: {e}");

        let coarse = rows(tape.value(out.levels[k - 1].flow));
        let up = rows(tape.value(lo.upsampled));
        for (i, u) in up.iter().enumerate() {
            for c in 0..3 {
                let vals = corr.of(i).iter().map(|n| coarse[n.index][c]);
                let lo_b = vals.clone().fold(f64::INFINITY, f64::min);
                let hi_b = vals.fold(f64::NEG_INFINITY, f64::max);
                let slack = 4.0 * f64::EPSILON * lo_b.abs().max(hi_b.abs());
                assert!(
                    u[c] >= lo_b - slack && u[c] <= hi_b + slack,
                    "level {l} point {i} component {c}: {} outside [{lo_b}, {hi_b}]",
                    u[c]
                );
            }
        }
    }
    assert_eq!(out.levels.len(), model.config.levels);
}

#[test]
fn weights_are_row_stochastic_over_random_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for pass in 0..1000u64 {
        let points = [64, 96, 128][pass as usize % 3];
        let cfg = small_config(pass);
        let pair = scene(points, 10_000 + pass);
        let geo = SceneGeometry::build(&cfg, &pair.p, &pair.q).unwrap();
        let mut model = Model::new(cfg, geo.input_dim).unwrap();
        if pass % 2 == 1 {
            let scale = rng.random_range(0.1..3.0);
            randomize(&mut model, scale, &mut rng);
        }
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model, &geo, None).unwrap();
        check_pass(&model, &geo, &out, &tape);
    }
}

#[test]
fn zeroed_score_heads_average_uniformly() {
    for seed in 0..10u64 {
        let cfg = small_config(seed);
        let pair = scene(128, 500 + seed);
        let geo = SceneGeometry::build(&cfg, &pair.p, &pair.q).unwrap();
        let mut model = Model::new(cfg, geo.input_dim).unwrap();
        for c in model.params.cmu.clone() {
            for head in c.score_heads() {
                head.zero(&mut model.store);
            }
        }
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model, &geo, None).unwrap();
        for k in 1..out.levels.len() {
            let l = out.levels[k].level;
            let corr = &geo.upsample[l].correlation;
            let coarse = rows(tape.value(out.levels[k - 1].flow));
            let up = rows(tape.value(out.levels[k].upsampled));
            for (i, u) in up.iter().enumerate() {
                let nb = corr.of(i);
                let w = 1.0 / nb.len() as f64;
                let mut want = [0.0f64; 3];
                for n in nb {
                    for c in 0..3 {
                        want[c] += w * coarse[n.index][c];
                    }
                }
                assert_eq!(*u, want, "level {l} point {i}");
            }
        }
    }
}

#[test]
fn zeroed_refiner_leaves_flow_unchanged() {
    for seed in 0..10u64 {
        let cfg = small_config(seed);
        let pair = scene(96, 700 + seed);
        let geo = SceneGeometry::build(&cfg, &pair.p, &pair.q).unwrap();
        let mut model = Model::new(cfg, geo.input_dim).unwrap();
        for o in model.params.ocv.clone() {
            o.refiner.zero(&mut model.store);
        }
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model, &geo, None).unwrap();
        for lo in &out.levels {
            assert_eq!(
                tape.value(lo.flow),
                tape.value(lo.upsampled),
                "level {}",
                lo.level
            );
        }
    }
}

fn truth(pair: &ofl_core::synth::LabeledFramePair, geo: &SceneGeometry) -> Vec<LevelTruth> {
    downsample_gt(pair, &geo.p).unwrap()
}

#[test]
fn alpha_one_drops_occlusion_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..20u64 {
        let cfg = small_config(seed);
        let pair = scene(64, 900 + seed);
        let geo = SceneGeometry::build(&cfg, &pair.p, &pair.q).unwrap();
        let mut model = Model::new(cfg, geo.input_dim).unwrap();
        randomize(&mut model, 0.5, &mut rng);
        let gt = truth(&pair, &geo);
        let beta = [0.02, 0.04, 0.08];
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model, &geo, None).unwrap();
        let l = loss(&mut tape, &out.levels, &gt, 1.0, &beta).unwrap();
        assert!(l.occlusion_term > 0.0);
        assert!((tape.item(l.total) - l.flow_term).abs() <= 1e-12);

        // the total no longer depends on the occlusion labels
        let flipped: Vec<LevelTruth> = gt
            .iter()
            .map(|t| LevelTruth {
                flow: t.flow.clone(),
                occlusion: ofl_core::geometry::OcclusionMask(
                    t.occlusion.0.iter().map(|o| 1.0 - o).collect(),
                ),
            })
            .collect();
        let l2 = loss(&mut tape, &out.levels, &flipped, 1.0, &beta).unwrap();
        assert_eq!(tape.item(l2.total), tape.item(l.total));
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        lens in prop::collection::vec(0usize..12, 1..20),
        scale in prop_oneof![Just(1.0), Just(50.0), Just(700.0)],
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets = vec![0];
        for l in &lens {
            offsets.push(offsets.last().unwrap() + l);
        }
        let total = *offsets.last().unwrap();
        let seg = Segments::from_offsets(offsets).unwrap();
        let x: Vec<f64> = (0..total).map(|_| rng.random_range(-scale..scale)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(total, 1, x).unwrap();
        let y = tape.seg_softmax(xv, &seg).unwrap();
        prop_assert!(row_sum_error(tape.value(y), &seg) <= ROW_TOLERANCE);
    }
}
