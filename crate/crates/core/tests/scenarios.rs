//! End-to-end flows that cross module boundaries.

use lnnet::datasets::{self, TableRow};
use lnnet::ssr::{self, ClassPair};
use lnnet::synthesis::{self, LayerKind};
use lnnet::{Error, LabeledDataset, LnNet, Matrix, Tolerances};

fn tol() -> Tolerances {
    Tolerances::default()
}

#[test]
fn table_xor_sample_is_broken_by_one_ln_layer() {
    let data = TableRow::BernoulliXor.sample(256, 0).unwrap();
    let pair = ClassPair::from_dataset(&data).unwrap();
    let report = ssr::lssr(&pair).unwrap();
    assert!((report.lssr - 0.9929).abs() < 0.02, "lssr {}", report.lssr);

    let broken = ssr::break_lssr(&pair, 60).unwrap();
    assert!(broken.ssr_after < broken.lssr);
    let net = broken.net();
    assert_eq!(net.norm_layer_count(), 1);
    let mapped = pair.map(|x| net.forward(x)).unwrap();
    assert!((ssr::ssr(&mapped).unwrap() - broken.ssr_after).abs() < 1e-9);
}

#[test]
fn symmetric_classes_cannot_be_broken_at_first_order() {
    let x1 = Matrix::from_rows(&[[-1.0, 1.0, -1.0, 1.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
    let x2 = Matrix::from_rows(&[[-2.0, 2.0, -2.0, 2.0], [1.0, 1.0, -1.0, -1.0]]).unwrap();
    let pair = ClassPair::new(x1, x2).unwrap();
    assert!(matches!(ssr::break_lssr(&pair, 40), Err(Error::NoDescent { .. }) | Err(Error::SingularScatter { .. })));
}

#[test]
fn synthesized_net_survives_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = datasets::gen_random_labels(24, 3, 2, 11).unwrap();
    let csv = dir.path().join("data.csv");
    datasets::save_csv(&data, &csv).unwrap();
    let loaded = datasets::load_csv(&csv).unwrap();
    assert_eq!(loaded.points(), data.points());

    let result = synthesis::synthesize_binary(&loaded, 4, &tol()).unwrap();
    let json = dir.path().join("net.json");
    std::fs::write(&json, result.net.to_json()).unwrap();
    let net = LnNet::from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for x in data.points().columns() {
        assert_eq!(net.forward(&x).unwrap(), result.net.forward(&x).unwrap());
    }
}

#[test]
fn csv_errors_carry_line_numbers() {
    let bad = "x1,x2,label\n0,0,0\n1,2,3,1\n";
    match datasets::read_csv(bad.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(datasets::read_csv("".as_bytes()), Err(Error::Parse { .. })));
}

#[test]
fn six_points_three_classes() {
    let points = Matrix::from_rows(&[[0.0, 1.0, 2.0, 0.5, 1.5, 2.5], [0.0, 1.0, 0.0, 2.0, 2.0, 1.0]]).unwrap();
    let data = LabeledDataset::new(points, vec![0, 1, 2, 2, 0, 1]).unwrap();
    let r = synthesis::synthesize_multiclass(&data, 1, &tol()).unwrap();
    for (k, x) in data.points().columns().enumerate() {
        assert_eq!(r.classify(&x).unwrap().label, data.labels()[k]);
    }
    assert!(r.trace.audit().is_clean());
    assert!(r.trace.layers.iter().any(|l| l.kind == LayerKind::Pba));
}

#[test]
fn binary_data_through_the_multiclass_path() {
    let data = datasets::gen_random_labels(16, 2, 2, 3).unwrap();
    let a = synthesis::synthesize_binary(&data, 3, &tol()).unwrap();
    let b = synthesis::synthesize_multiclass(&data, 3, &tol()).unwrap();
    for x in data.points().columns() {
        assert_eq!(a.classify(&x).unwrap().label, b.classify(&x).unwrap().label);
    }
}

#[test]
fn two_points_need_no_normalization() {
    let data = LabeledDataset::new(Matrix::from_rows(&[[0.0, 3.0], [1.0, -1.0]]).unwrap(), vec![0, 1]).unwrap();
    let r = synthesis::synthesize_binary(&data, 0, &tol()).unwrap();
    assert_eq!(r.depth, 0);
    assert!(r.net.as_single_affine().is_some());
}

#[test]
fn far_inputs_still_get_a_label() {
    let r = synthesis::synthesize_binary(&datasets::gen_xor(), 0, &tol()).unwrap();
    let c = r.classify(&[40.0, -75.0]).unwrap();
    assert!(c.label < 2);
    assert!(c.distance.is_finite());
}

#[test]
fn duplicates_share_their_twin_label() {
    let points = Matrix::from_rows(&[[0.0, 1.0, 2.0, 1.0], [0.0, 0.5, 0.0, 0.5]]).unwrap();
    let data = LabeledDataset::new(points, vec![0, 1, 0, 1]).unwrap();
    let r = synthesis::synthesize_binary(&data, 2, &tol()).unwrap();
    assert_eq!(r.classify(&[1.0, 0.5]).unwrap().label, 1);
    assert!(LabeledDataset::new(Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), vec![0, 1]).is_err());
}

#[test]
fn small_sets_are_shattered_within_the_depth_bound() {
    let three = Matrix::from_rows(&[[0.0, 1.0, 0.3], [0.0, 0.2, 1.0]]).unwrap();
    let r = synthesis::shatter_check(&three, 1, 0, &tol()).unwrap();
    assert!(r.shattered, "{:?}", r.failures);
    assert_eq!(r.labelings, 6);

    let two = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
    let r = synthesis::shatter_check(&two, 0, 0, &tol()).unwrap();
    assert!(r.shattered);
}

#[test]
fn every_table_row_is_reproducible() {
    for row in TableRow::ALL {
        let a = row.sample(64, 9).unwrap();
        let b = row.sample(64, 9).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(a.labels(), b.labels());
        let c = row.sample(64, 10).unwrap();
        assert_ne!(a.points(), c.points());
    }
}
