//! Stage-by-stage use of the library through its public API, with every
//! artifact passing through disk.

use qdetect_core::dataset::{build_dataset, load_dataset, save_dataset, Dataset, ImageConfig, QubitState};
use qdetect_core::eval::{mmf, tally, ResultRecord};
use qdetect_core::fixedpoint::FixedFormat;
use qdetect_core::polymlp::{compile_truth_tables, train_with_progress, LutNetwork, PolyMlpConfig, PolyMlpModel};
use qdetect_core::threshold::{calibrate_model, default_rois, ThresholdModel};
use qdetect_core::vit::{quantize_vit, train_vit_with_progress, FixedVitModel, VitConfig, VitModel};

fn score(ds: &Dataset, predict: impl Fn(&qdetect_core::dataset::IonImage) -> QubitState) -> f64 {
    let preds: Vec<_> = ds.test.iter().map(predict).collect();
    let labels: Vec<_> = ds.test.iter().map(|i| i.label).collect();
    mmf(&tally(&preds, &labels, ds.n_ions()).unwrap()).unwrap().error
}

#[test]
fn threshold_round_trips_and_beats_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ImageConfig::one_qubit();
    let path = tmp.path().join("d.qimg");
    save_dataset(&build_dataset(&cfg, 2_000, 0.5, 11).unwrap(), &path).unwrap();
    let ds = load_dataset(&path).unwrap();

    let model = calibrate_model(&ds.train, &default_rois(&cfg)).unwrap();
    model.save(tmp.path().join("t.toml")).unwrap();
    let back = ThresholdModel::load(tmp.path().join("t.toml")).unwrap();
    assert_eq!(back, model);

    let err = score(&ds, |i| back.classify(i).unwrap());
    assert!(err < 0.5, "error {err}");

    let preds: Vec<_> = ds.test.iter().map(|i| back.classify(i).unwrap()).collect();
    let labels: Vec<_> = ds.test.iter().map(|i| i.label).collect();
    let rec = ResultRecord::new("1-qubit", "threshold", tally(&preds, &labels, 1).unwrap()).unwrap();
    rec.save(tmp.path().join("r.toml")).unwrap();
    assert_eq!(ResultRecord::load(tmp.path().join("r.toml")).unwrap(), rec);
}

#[test]
fn loaded_lut_network_matches_loaded_mlp() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = build_dataset(&ImageConfig::one_qubit(), 400, 0.75, 3).unwrap();
    let cfg = PolyMlpConfig {
        hidden_widths: vec![8, 4],
        epochs: 2,
        batch_size: 64,
        ..PolyMlpConfig::default()
    };
    train_with_progress(&cfg, &ds.train, |_, _| {}).unwrap().save(tmp.path().join("m.qmlp")).unwrap();
    let mlp = PolyMlpModel::load(tmp.path().join("m.qmlp")).unwrap();
    compile_truth_tables(&mlp).unwrap().save(tmp.path().join("n.qlut")).unwrap();
    let lut = LutNetwork::load(tmp.path().join("n.qlut")).unwrap();
    for img in &ds.test {
        assert_eq!(lut.classify(img).unwrap(), mlp.predict(img).unwrap());
    }
}

#[test]
fn wide_fixed_point_tracks_the_float_transformer() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = build_dataset(&ImageConfig::one_qubit(), 300, 0.8, 5).unwrap();
    let cfg = VitConfig {
        epochs: 2,
        ..VitConfig::one_qubit()
    };
    train_vit_with_progress(&cfg, &ds.train, |_, _| {}).unwrap().save(tmp.path().join("f.qvit")).unwrap();
    let float = VitModel::load(tmp.path().join("f.qvit")).unwrap();
    let format: FixedFormat = "40.24".parse().unwrap();
    quantize_vit(&float, format).unwrap().save(tmp.path().join("q.qvit")).unwrap();
    let fixed = FixedVitModel::load(tmp.path().join("q.qvit")).unwrap();
    let agree = ds
        .test
        .iter()
        .filter(|i| fixed.predict(i).unwrap() == float.predict(i).unwrap())
        .count();
    assert!(agree * 100 >= ds.test.len() * 98, "{agree}/{}", ds.test.len());
}
