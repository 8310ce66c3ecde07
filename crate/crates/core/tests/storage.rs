mod common;

use std::fs;

use mahavar::error::Error;
use mahavar::feature_store::npy::{self, Dtype, NpyArray, NpyData};
use mahavar::feature_store::{load_bundle, save_bundles, FeatureBundle, Manifest, SplitEntry, MANIFEST_FILE};
use mahavar::gaussian_stats::{fit, ClassStatistics, NormalizationMode, DEFAULT_REGULARIZER};
use mahavar::scorers::{class_distances, Metric};
use nalgebra::DMatrix;

fn grid(rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| ((i * 131 + j * 17) % 97) as f64 / 9.0 - 5.0)
}

#[test]
fn large_f32_split_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let f32_exact = grid(100, 512).map(|v| v as f32 as f64);
    let b = FeatureBundle::new("test_id", f32_exact, None, None, 10)
        .unwrap()
        .with_dtype(Dtype::F32)
        .unwrap();
    save_bundles(&[&b], dir.path()).unwrap();
    let back = load_bundle(&dir.path().join(MANIFEST_FILE), "test_id").unwrap();
    assert_eq!(back.source_dtype, Dtype::F32);
    assert_eq!(back.features, b.features);
}

#[test]
fn small_split_with_labels_and_logits() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let train = FeatureBundle::new("train", grid(50, 8), Some(labels), Some(grid(50, 4)), 4)
        .unwrap()
        .with_train_split(true)
        .unwrap();
    let ood = FeatureBundle::new("ood", grid(7, 8), None, None, 4).unwrap();
    let manifest = save_bundles(&[&train, &ood], dir.path()).unwrap();
    assert_eq!(manifest.splits.len(), 2);
    let path = dir.path().join(MANIFEST_FILE);
    let loaded = Manifest::verify(&path).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(load_bundle(&path, "train").unwrap(), train);
    assert_eq!(load_bundle(&path, "ood").unwrap(), ood);
}

fn write_manifest(dir: &std::path::Path, classes: usize, dim: usize, entry: SplitEntry) -> std::path::PathBuf {
    let mut m = Manifest {
        schema_version: 1,
        num_classes: classes,
        feature_dim: dim,
        splits: Default::default(),
    };
    m.splits.insert("s".into(), entry);
    let path = dir.join(MANIFEST_FILE);
    m.write(&path).unwrap();
    path
}

fn entry(features: &str, labels: Option<&str>, train: bool) -> SplitEntry {
    SplitEntry {
        features_path: features.into(),
        labels_path: labels.map(String::from),
        logits_path: None,
        train,
    }
}

#[test]
fn externally_written_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let feats = NpyArray {
        shape: vec![3, 2],
        data: NpyData::F32(vec![1.0, 2.0, f32::NAN, 4.0, 5.0, 6.0]),
    };
    npy::write(&dir.path().join("f.npy"), &feats).unwrap();
    let path = write_manifest(dir.path(), 2, 2, entry("f.npy", None, false));
    match load_bundle(&path, "s") {
        Err(Error::NonFinite { row, col, .. }) => assert_eq!((row, col), (1, 0)),
        other => panic!("{other:?}"),
    }

    let feats = NpyArray {
        shape: vec![3, 2],
        data: NpyData::F32(vec![1.0; 6]),
    };
    npy::write(&dir.path().join("f.npy"), &feats).unwrap();
    let labels = NpyArray {
        shape: vec![3],
        data: NpyData::I32(vec![0, 2, 1]),
    };
    npy::write(&dir.path().join("y.npy"), &labels).unwrap();
    let path = write_manifest(dir.path(), 2, 2, entry("f.npy", Some("y.npy"), false));
    match load_bundle(&path, "s") {
        Err(Error::LabelOutOfRange { row, label, .. }) => assert_eq!((row, label), (1, 2)),
        other => panic!("{other:?}"),
    }

    let path = write_manifest(dir.path(), 2, 3, entry("f.npy", None, false));
    assert!(matches!(load_bundle(&path, "s"), Err(Error::Shape { .. })));
    assert!(matches!(load_bundle(&path, "missing"), Err(Error::UnknownSplit { .. })));

    let labels = NpyArray {
        shape: vec![3],
        data: NpyData::I32(vec![0, 0, 0]),
    };
    npy::write(&dir.path().join("y.npy"), &labels).unwrap();
    let path = write_manifest(dir.path(), 2, 2, entry("f.npy", Some("y.npy"), true));
    assert!(matches!(load_bundle(&path, "s"), Err(Error::MissingClass { class: 1, .. })));
    let path = write_manifest(dir.path(), 2, 2, entry("f.npy", Some("y.npy"), false));
    assert!(load_bundle(&path, "s").is_ok());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), 2, 2, entry("absent.npy", None, false));
    let err = load_bundle(&path, "s").unwrap_err();
    assert!(err.is_io(), "{err:?}");
    assert!(err.to_string().contains("absent.npy"));
}

#[test]
fn fitted_statistics_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let train = common::random_labeled(400, 5, 16, 42);
    let probe = common::random_labeled(50, 5, 16, 43);
    for mode in [NormalizationMode::None, NormalizationMode::L2, NormalizationMode::CenteredL2] {
        let stats = fit(&train, mode, DEFAULT_REGULARIZER).unwrap();
        let sub = dir.path().join(mode.as_str());
        stats.save(&sub).unwrap();
        let back = ClassStatistics::load(&sub).unwrap();
        assert_eq!(back, stats);
        assert_eq!(back.id(), stats.id());
        let a = class_distances(&probe, &stats, Metric::Mahalanobis).unwrap();
        let b = class_distances(&probe, &back, Metric::Mahalanobis).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn corrupted_header_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.npy");
    let mut bytes = npy::encode(&NpyArray {
        shape: vec![2, 2],
        data: NpyData::F64(vec![0.0; 4]),
    });
    bytes.truncate(100);
    fs::write(&p, &bytes).unwrap();
    match npy::read(&p) {
        // The length field at byte 8 claims more header than the file holds.
        Err(Error::Format { offset, reason, .. }) => {
            assert_eq!(offset, 8);
            assert!(reason.contains("header length"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn row_selection_keeps_labels_and_logits_aligned() {
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let b = FeatureBundle::new("all", grid(10, 4), Some(labels), Some(grid(10, 3)), 3)
        .unwrap()
        .with_train_split(true)
        .unwrap();
    let s = b.select_rows("odd", &[1, 3, 5]).unwrap();
    assert_eq!(s.name, "odd");
    assert!(!s.train_split);
    assert_eq!(s.labels.as_deref(), Some(&[1, 0, 2][..]));
    for (k, &r) in [1usize, 3, 5].iter().enumerate() {
        assert_eq!(s.features.row(k), b.features.row(r));
        assert_eq!(s.logits.as_ref().unwrap().row(k), b.logits.as_ref().unwrap().row(r));
    }
    assert!(b.select_rows("bad", &[10]).is_err());
}

fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/extractor")
}

#[test]
fn numpy_written_extractor_output_loads() {
    let manifest = fixture_dir().join(MANIFEST_FILE);
    let bundles = Manifest::verify(&manifest).unwrap();
    assert_eq!(bundles.len(), 2);
    let id = load_bundle(&manifest, "cifar10_test").unwrap();
    assert_eq!(id.features.shape(), (10, 512));
    assert_eq!(id.source_dtype, Dtype::F32);
    assert_eq!(id.labels.as_deref(), Some(&(0..10).collect::<Vec<_>>()[..]));
    assert_eq!(id.features[(3, 100)], 0.777572751045227);
    assert_eq!(id.logits.as_ref().unwrap()[(9, 9)], 0.5871966481208801);
    assert!((id.features.sum() - 2044.764799358847).abs() < 1e-9);
    let ood = load_bundle(&manifest, "svhn").unwrap();
    assert!(ood.labels.is_none());
    assert_eq!(ood.logits.as_ref().unwrap().shape(), (4, 10));
}

#[test]
fn resaving_extractor_output_reproduces_numpy_bytes() {
    let manifest = fixture_dir().join(MANIFEST_FILE);
    let dir = tempfile::tempdir().unwrap();
    let id = load_bundle(&manifest, "cifar10_test").unwrap();
    save_bundles(&[&id], dir.path()).unwrap();
    for file in ["cifar10_test.features.npy", "cifar10_test.labels.npy"] {
        assert_eq!(
            fs::read(dir.path().join(file)).unwrap(),
            fs::read(fixture_dir().join(file)).unwrap(),
            "{file}"
        );
    }
}
