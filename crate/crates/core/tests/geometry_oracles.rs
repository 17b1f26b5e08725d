use ofl_core::geometry::{
    farthest_point_sample, flow_metrics, knn, radius_neighbors, FlowField, Point, OUTLIER_ABS,
    OUTLIER_REL, RELAX_ABS, RELAX_REL, STRICT_ABS, STRICT_REL,
};
use proptest::prelude::*;

fn d2(a: &Point, b: &Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Every target, sorted by (squared distance, index).
fn brute_sorted(q: &Point, target: &[Point]) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = target
        .iter()
        .enumerate()
        .map(|(j, t)| (d2(q, t), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

fn brute_fps(points: &[Point], k: usize, start: usize) -> Vec<usize> {
    let mut out = vec![start];
    while out.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..points.len() {
            if out.contains(&i) {
                continue;
            }
            let m = out
                .iter()
                .map(|&s| d2(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if m > best.0 {
                best = (m, i);
            }
        }
        out.push(best.1);
    }
    out
}

/// Points on a coarse lattice with small jitter, so exact ties and
/// near-boundary distances both occur.
fn cloud(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(
        (
            -8i32..8,
            -8i32..8,
            -4i32..4,
            prop::bool::ANY,
            -1e-3..1e-3f64,
        )
            .prop_map(|(x, y, z, snap, j)| {
                let e = if snap { 0.0 } else { j };
                [x as f64 * 0.125 + e, y as f64 * 0.125, z as f64 * 0.125 - e]
            }),
        1..max,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn radius_matches_brute_force(q in cloud(40), t in cloud(120), r in 0.05..1.5f64, cap in 1usize..20) {
        let got = radius_neighbors(&q, &t, r, cap).unwrap();
        for (i, qp) in q.iter().enumerate() {
            let want: Vec<usize> = brute_sorted(qp, &t)
                .into_iter()
                .filter(|(d, _)| *d < r * r)
                .take(cap)
                .map(|(_, j)| j)
                .collect();
            let have: Vec<usize> = got.of(i).iter().map(|n| n.index).collect();
            prop_assert_eq!(have, want);
            for n in got.of(i) {
                let t = t[n.index];
                prop_assert_eq!(n.offset, [t[0] - qp[0], t[1] - qp[1], t[2] - qp[2]]);
            }
        }
    }

    #[test]
    fn knn_matches_brute_force(q in cloud(40), t in cloud(120), k in 1usize..24) {
        let k = k.min(t.len());
        let got = knn(&q, &t, k).unwrap();
        for (i, qp) in q.iter().enumerate() {
            let want: Vec<usize> = brute_sorted(qp, &t).into_iter().take(k).map(|(_, j)| j).collect();
            let have: Vec<usize> = got.of(i).iter().map(|n| n.index).collect();
            prop_assert_eq!(have, want);
        }
    }

    #[test]
    fn fps_matches_brute_force(p in cloud(100), k in 1usize..40, s in 0usize..100) {
        let k = k.min(p.len());
        let start = s % p.len();
        prop_assert_eq!(farthest_point_sample(&p, k, start).unwrap(), brute_fps(&p, k, start));
    }
}

fn flow_field() -> impl Strategy<Value = (Vec<Point>, Vec<Point>)> {
    (1usize..60).prop_flat_map(|n| {
        let v = || {
            prop::collection::vec(
                prop::array::uniform3(prop_oneof![Just(0.0), -0.6..0.6f64]),
                n,
            )
        };
        (v(), v())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn flow_metrics_match_direct_count((pred, gt) in flow_field()) {
        let m = flow_metrics(&FlowField(pred.clone()), &FlowField(gt.clone())).unwrap();
        let n = pred.len() as f64;
        let (mut epe, mut s, mut r, mut o) = (0.0, 0usize, 0usize, 0usize);
        for (p, g) in pred.iter().zip(&gt) {
            let e = d2(p, g).sqrt();
            let gn = d2(&[0.0; 3], g).sqrt();
            epe += e;
            if e < STRICT_ABS || (gn > 0.0 && e / gn < STRICT_REL) {
                s += 1;
            }
            if e < RELAX_ABS || (gn > 0.0 && e / gn < RELAX_REL) {
                r += 1;
            }
            if e > OUTLIER_ABS || (gn > 0.0 && e / gn > OUTLIER_REL) {
                o += 1;
            }
        }
        prop_assert_eq!(m.epe, epe / n);
        prop_assert_eq!(m.acc_strict, s as f64 / n);
        prop_assert_eq!(m.acc_relax, r as f64 / n);
        prop_assert_eq!(m.outliers, o as f64 / n);
    }
}
