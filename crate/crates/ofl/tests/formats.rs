use std::path::Path;

use ofl::checkpoint;
use ofl::pairfile;
use ofl::render::{render, BLUE, RED};
use ofl::table::{self, Csv};
use ofl::OflError;
use ofl_core::geometry::{FlowField, OcclusionMask, PointSet};
use ofl_core::model::{Model, ModelConfig};
use ofl_core::synth::{generate_scene, LabeledFramePair, SceneConfig};
use ofl_core::tensor::Tensor;
use proptest::prelude::*;

fn here() -> &'static Path {
    Path::new("mem")
}

fn le_f32(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

#[test]
fn hand_built_pair_file_parses() {
    // two P points with one feature, one Q point
    let mut b = b"OFP1".to_vec();
    for n in [2u32, 1, 1] {
        b.extend(n.to_le_bytes());
    }
    le_f32(&mut b, &[0.0, 1.0, 2.0, -1.5, 0.25, 3.0]);
    le_f32(&mut b, &[0.5, -0.5]);
    le_f32(&mut b, &[0.125, 1.0, 2.0]);
    le_f32(&mut b, &[0.75]);
    le_f32(&mut b, &[0.125, 0.0, 0.0, 0.0, 0.0, 0.0]);
    le_f32(&mut b, &[1.0, 0.0]);
    assert_eq!(b.len(), 16 + 4 * (6 + 2 + 3 + 1 + 6 + 2));

    let pair = pairfile::decode(&b, here()).unwrap();
    assert_eq!(pair.p.positions, vec![[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0]]);
    assert_eq!(pair.p.features, vec![0.5, -0.5]);
    assert_eq!(pair.p.feature_dim, 1);
    assert_eq!(pair.q.positions, vec![[0.125, 1.0, 2.0]]);
    assert_eq!(pair.q.features, vec![0.75]);
    assert_eq!(pair.gt_flow.0, vec![[0.125, 0.0, 0.0], [0.0; 3]]);
    assert_eq!(pair.gt_occlusion.0, vec![1.0, 0.0]);
    assert_eq!(pairfile::encode(&pair).unwrap(), b);
}

#[test]
fn malformed_pair_files_are_rejected_with_offsets() {
    let pair = generate_scene(&SceneConfig {
        points: 64,
        ..SceneConfig::default()
    })
    .unwrap();
    let good = pairfile::encode(&pair).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    let e = pairfile::decode(&bad, here()).unwrap_err();
    assert!(matches!(e, OflError::Format { offset: 0, .. }), "{e}");

    let cut = &good[..good.len() - 7];
    assert!(matches!(
        pairfile::decode(cut, here()),
        Err(OflError::Format { .. })
    ));
    assert!(matches!(
        pairfile::decode(&good[..10], here()),
        Err(OflError::Format { .. })
    ));

    let mut wrong_count = good.clone();
    wrong_count[4..8].copy_from_slice(&65u32.to_le_bytes());
    assert!(matches!(
        pairfile::decode(&wrong_count, here()),
        Err(OflError::Format { .. })
    ));

    let mut bad_label = good.clone();
    let at = good.len() - 4;
    bad_label[at..].copy_from_slice(&0.5f32.to_le_bytes());
    match pairfile::decode(&bad_label, here()) {
        Err(OflError::Format { offset, .. }) => assert_eq!(offset, at as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn generated_pairs_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<_> = (0..3)
        .map(|s| {
            generate_scene(&SceneConfig {
                points: 80,
                features: s != 1,
                seed: s,
                ..SceneConfig::default()
            })
            .unwrap()
        })
        .collect();
    let names = pairfile::write_dataset(dir.path(), &pairs).unwrap();
    assert_eq!(names.len(), 3);
    let back = pairfile::read_dataset(dir.path()).unwrap();
    assert_eq!(back, pairs);
    for (a, b) in back.iter().zip(&pairs) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.gt_flow.to_flat()), bits(&b.gt_flow.to_flat()));
    }
}

#[test]
fn unrepresentable_values_refuse_to_serialize() {
    let p = PointSet::from_positions(vec![[0.1, 0.0, 0.0]]).unwrap();
    let pair = LabeledFramePair {
        q: p.clone(),
        p,
        gt_flow: FlowField(vec![[0.0; 3]]),
        gt_occlusion: OcclusionMask(vec![1.0]),
    };
    assert!(matches!(pairfile::encode(&pair), Err(OflError::Usage(_))));
}

fn arbitrary_tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
            .prop_map(move |v| Tensor::new(&shape, v).unwrap())
    })
}

proptest! {
    #[test]
    fn checkpoint_records_round_trip_bit_exactly(
        records in prop::collection::vec(("[a-z.0-9]{0,12}", arbitrary_tensor()), 0..6)
    ) {
        let bytes = checkpoint::encode(&records);
        let back = checkpoint::decode(&bytes, here()).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for ((an, at), (bn, bt)) in back.iter().zip(&records) {
            prop_assert_eq!(an, bn);
            prop_assert_eq!(at.shape(), bt.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(at), bits(bt));
        }
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }
}

#[test]
fn model_checkpoint_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ofl");
    let model = Model::new(ModelConfig::compact(), 3).unwrap();
    checkpoint::write(&path, &checkpoint::model_records(&model)).unwrap();
    let mut other = Model::new(
        ModelConfig {
            seed: 99,
            ..ModelConfig::compact()
        },
        3,
    )
    .unwrap();
    checkpoint::load_model(&mut other, &checkpoint::read(&path).unwrap(), &path).unwrap();
    for id in model.store.ids() {
        assert_eq!(model.store.value(id), other.store.value(id));
    }
    let mut small = Model::new(ModelConfig::default(), 3).unwrap();
    assert!(checkpoint::load_model(&mut small, &checkpoint::read(&path).unwrap(), &path).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(
        checkpoint::decode(&bytes, &path),
        Err(OflError::Format { .. })
    ));
}

#[test]
fn csv_round_trips() {
    let mut csv = Csv::new(table::metrics_header(3));
    csv.push(vec![
        "0.1".into(),
        "1.0".into(),
        "1.0".into(),
        "0.0".into(),
        "0.5".into(),
        "0.1".into(),
        "0.2".into(),
        "0.3".into(),
    ]);
    let back = Csv::parse(&csv.render());
    assert_eq!(back, csv);
    assert_eq!(back.value(0, "epe_l2"), Some(0.3));
    assert_eq!(
        table::metrics_header(3),
        ["epe", "as", "ar", "out", "occ_acc", "epe_l0", "epe_l1", "epe_l2"]
    );
}

fn translated_pair() -> LabeledFramePair {
    let pos: Vec<_> = (0..50)
        .map(|i| [i as f64 * 0.04, (i % 7) as f64 * 0.1, 0.0])
        .collect();
    let t = [0.3, 0.1, 0.0];
    let q: Vec<_> = pos
        .iter()
        .map(|p| [p[0] + t[0], p[1] + t[1], p[2]])
        .collect();
    LabeledFramePair {
        p: PointSet::from_positions(pos).unwrap(),
        q: PointSet::from_positions(q).unwrap(),
        gt_flow: FlowField(vec![t; 50]),
        gt_occlusion: OcclusionMask(vec![1.0; 50]),
    }
}

#[test]
fn render_colors_follow_accuracy() {
    let pair = translated_pair();
    let (img, stats) = render(&pair, &pair.gt_flow, 200, 120).unwrap();
    assert_eq!((img.width, img.height), (200, 120));
    assert_eq!(stats.inaccurate, 0);
    assert_eq!(img.count(BLUE), 0);
    assert!(img.count(RED) > 0);

    let (img, stats) = render(&pair, &FlowField::zeros(50), 64, 64).unwrap();
    assert_eq!(stats.inaccurate, 50);
    assert_eq!(img.count(RED), 0);
    assert!(img.count(BLUE) > 0);

    let ppm = img.to_ppm();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(ppm.len(), b"P6\n64 64\n255\n".len() + 64 * 64 * 3);

    assert!(matches!(
        render(&pair, &FlowField::zeros(3), 64, 64),
        Err(OflError::Usage(_))
    ));
}
