use std::fs;

use hybridfit::data::{load_csv, write_dataset_csv};
use hybridfit::HarnessError;
use tempfile::TempDir;

fn write(dir: &TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn data_reason(e: HarnessError) -> String {
    match e {
        HarnessError::Data { reason, .. } => reason,
        other => panic!("expected a data error, got {other}"),
    }
}

#[test]
fn three_rows_hand_parsed() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "a.csv", "a,b,label\n1,2,p\n3,4,q\n5,6,p\n");
    let got = load_csv(&p, "label").unwrap();
    assert_eq!(got.dataset.x.dims(), (3, 2));
    assert_eq!(got.dataset.x.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(got.dataset.y, vec![0, 1, 0]);
    assert_eq!(got.labels.classes, vec!["p", "q"]);
    assert_eq!(got.feature_names, vec!["a", "b"]);
}

#[test]
fn label_column_may_sit_anywhere() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "a.csv", "cls,a,b\nz,1,2\ny,3,4\n");
    let got = load_csv(&p, "cls").unwrap();
    assert_eq!(got.dataset.x.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(got.dataset.y, vec![0, 1]);
}

#[test]
fn header_only_is_zero_rows() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "a.csv", "a,b,label\n");
    assert!(data_reason(load_csv(&p, "label").unwrap_err()).contains("no data rows"));
}

#[test]
fn bad_cell_cites_row_and_column() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "a.csv", "a,b,label\n1,abc,p\n");
    let reason = data_reason(load_csv(&p, "label").unwrap_err());
    assert!(reason.contains("row 2") && reason.contains("column `b`"), "{reason}");
}

#[test]
fn missing_file_and_missing_label() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    assert!(data_reason(load_csv(&missing, "label").unwrap_err()).contains("not found"));
    let p = write(&dir, "a.csv", "a,b\n1,2\n");
    assert!(data_reason(load_csv(&p, "label").unwrap_err()).contains("label column"));
}

#[test]
fn mapping_is_stable_across_loads() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "a.csv", "x,label\n1,cat\n2,dog\n3,cat\n4,emu\n");
    let a = load_csv(&p, "label").unwrap();
    let b = load_csv(&p, "label").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dataset.y, vec![0, 1, 0, 2]);
}

#[test]
fn written_datasets_load_back_exactly() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "a.csv", "a,b,label\n0.1,-2.5e-7,1\n3,1e300,0\n");
    let first = load_csv(&p, "label").unwrap();
    let out = dir.path().join("b.csv");
    write_dataset_csv(&out, &first.dataset).unwrap();
    let back = load_csv(&out, "label").unwrap();
    assert_eq!(back.dataset.x, first.dataset.x);
    // labels are re-densified in first-appearance order
    assert_eq!(back.labels.classes, vec!["0", "1"]);
}
