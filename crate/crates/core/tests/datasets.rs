use std::path::PathBuf;

use factrfm::datasets::{load_csv_tabular, load_idx_images, write_idx_images, write_idx_labels, CsvOptions, LabelColumn, Normalization, TargetKind};
use factrfm::Error;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn bundled_tables_load_with_one_hot_labels() {
    let iris = load_csv_tabular(data("iris.csv"), &CsvOptions::default()).unwrap();
    assert_eq!(iris.x.shape(), (150, 4));
    assert_eq!(iris.y.shape(), (150, 3));
    for row in iris.y.row_iter() {
        assert_eq!(row.sum(), 1.0);
    }
    assert_eq!(iris.y.row_sum().as_slice(), &[50.0, 50.0, 50.0]);
    let wine = load_csv_tabular(data("wine.csv"), &CsvOptions::default()).unwrap();
    assert_eq!(wine.x.shape(), (178, 13));
    assert_eq!(wine.y.shape(), (178, 3));
}

#[test]
fn zscore_standardizes_every_column() {
    let options = CsvOptions { normalization: Normalization::Zscore, ..CsvOptions::default() };
    let wine = load_csv_tabular(data("wine.csv"), &options).unwrap();
    let n = wine.x.nrows() as f64;
    for col in wine.x.column_iter() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9, "variance {var}");
    }
}

#[test]
fn label_column_and_regression_targets() {
    let options = CsvOptions {
        label_column: LabelColumn::Name("sepal_length".into()),
        target: TargetKind::Regression,
        ..CsvOptions::default()
    };
    let iris = load_csv_tabular(data("iris.csv"), &options).unwrap();
    assert_eq!(iris.x.shape(), (150, 4));
    assert_eq!(iris.y.shape(), (150, 1));
    assert_eq!(iris.y[(0, 0)], 5.1);
}

#[test]
fn malformed_tables_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "a,b,label\n1,2,0\n3,1\n").unwrap();
    assert!(matches!(load_csv_tabular(&ragged, &CsvOptions::default()), Err(Error::ParseError(_))));
    let text = dir.path().join("text.csv");
    std::fs::write(&text, "a,b,label\n1,x,0\n").unwrap();
    assert!(matches!(load_csv_tabular(&text, &CsvOptions::default()), Err(Error::ParseError(_))));
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<Vec<u8>> = (0..5u8).map(|i| (0..6).map(|p| i * 40 + p).collect()).collect();
    let labels = [3u8, 1, 4, 1, 5];
    write_idx_images(dir.path().join("img"), &images, 2, 3).unwrap();
    write_idx_labels(dir.path().join("lbl"), &labels).unwrap();
    let ds = load_idx_images(dir.path().join("img"), dir.path().join("lbl"), Some(4)).unwrap();
    assert_eq!(ds.x.nrows(), 4);
    assert_eq!(ds.x.ncols(), 6);
    assert_eq!(ds.x[(1, 2)], f64::from(42u8) / 255.0);
    assert_eq!(ds.y.row(2).iter().position(|&v| v == 1.0), Some(4));
}
