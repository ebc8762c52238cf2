use std::io::Cursor;

use pangaea::plot::{emit_plotdata, read_plotdata, write_plotdata};
use pangaea::records::{read_records, step_records, Record, RecordWriter};
use pangaea::tabular::{CsvColumn, Table};
use pangaea::tensorfile::TensorFile;
use pangaea::IoError;
use pangaea_core::pretrain::StepRecord;
use pangaea_core::ModalityKind;
use proptest::prelude::*;

#[test]
fn tensorfile_layout_is_bit_exact() {
    let t = TensorFile::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.5]).unwrap();
    let bytes = t.to_bytes();
    assert_eq!(&bytes[..4], b"PGT1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
    assert_eq!(bytes.len(), 24 + 6 * 4);
    assert_eq!(f32::from_le_bytes(bytes[44..48].try_into().unwrap()), -0.5);
    assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), t);
}

#[test]
fn tensorfile_rejects_damage() {
    let bytes = TensorFile::new(vec![4], vec![1.0; 4]).unwrap().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(TensorFile::from_bytes(&bad), Err(IoError::BadMagic { .. })));
    assert!(matches!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]), Err(IoError::Truncated { .. })));
    assert!(matches!(TensorFile::from_bytes(&bytes[..6]), Err(IoError::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(TensorFile::from_bytes(&long), Err(IoError::Format { .. })));
    assert!(TensorFile::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn tensorfile_rank_zero_holds_one_value() {
    let t = TensorFile::new(vec![], vec![7.0]).unwrap();
    assert_eq!(t.to_bytes().len(), 12);
    assert_eq!(TensorFile::from_bytes(&t.to_bytes()).unwrap(), t);
}

proptest! {
    #[test]
    fn tensorfile_round_trip(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) % 10_007) as f32 / 7.0 - 300.0).collect();
        let t = TensorFile::new(dims, data).unwrap();
        prop_assert_eq!(TensorFile::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn f64_values_survive_at_f32_precision(values in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
        let t = TensorFile::from_f64(vec![values.len()], &values).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap().to_f64();
        for (a, b) in values.iter().zip(&back) {
            prop_assert_eq!(*b, f64::from(*a as f32));
        }
    }
}

#[test]
fn tensorfile_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgt");
    let t = TensorFile::from_f64(vec![3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    t.write(&path).unwrap();
    let back = TensorFile::read(&path).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.rows().len(), 3);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "no temporary file left behind");
}

#[test]
fn csv_hand_written_table() {
    let text = "a,b\n1,2.5\n3,-4\n5,6e1\n";
    let t = Table::parse(Cursor::new(text), None).unwrap();
    assert_eq!(t.header, ["a", "b"]);
    assert_eq!(t.rows, vec![vec![Some(1.0), Some(2.5)], vec![Some(3.0), Some(-4.0)], vec![Some(5.0), Some(60.0)]]);
}

#[test]
fn csv_empty_cell_is_missing_not_zero() {
    let t = Table::parse(Cursor::new("a,b\n1,\nNA,2\n"), None).unwrap();
    assert_eq!(t.rows, vec![vec![Some(1.0), None], vec![None, Some(2.0)]]);
    assert_eq!(t.imputed().unwrap(), vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
}

#[test]
fn csv_categorical_codes_follow_sorted_labels() {
    let schema = [CsvColumn::Categorical, CsvColumn::Discrete];
    let t = Table::parse(Cursor::new("color,n\nred,1\nblue,2\n\"green, dark\",3\nred,\n"), Some(&schema)).unwrap();
    assert_eq!(t.categories[0], ["blue", "green, dark", "red"]);
    assert_eq!(t.rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [Some(2.0), Some(0.0), Some(1.0), Some(2.0)]);
    assert_eq!(t.rows[3][1], None);
}

#[test]
fn csv_ragged_row_reports_its_line() {
    let err = Table::parse(Cursor::new("a,b\n1,2\n3\n4,5\n"), None).unwrap_err();
    match err {
        IoError::Csv { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected error {other:?}"),
    }
    let err = Table::parse(Cursor::new("a,b\n1,x\n"), None).unwrap_err();
    assert!(matches!(err, IoError::Csv { line: 2, .. }));
}

#[test]
fn csv_write_then_read_is_identity() {
    let schema = [CsvColumn::Continuous, CsvColumn::Categorical, CsvColumn::Discrete];
    let text = "x,label,k\n0.125,b,1\n,a,2\n-3.5,\"c,d\",\n1e-7,a,4\n";
    let t = Table::parse(Cursor::new(text), Some(&schema)).unwrap();
    let mut buf = Vec::new();
    t.write_to(&mut buf).unwrap();
    let back = Table::parse(Cursor::new(buf), Some(&schema)).unwrap();
    assert_eq!(back, t);
}

proptest! {
    #[test]
    fn numeric_csv_round_trip(rows in proptest::collection::vec(proptest::collection::vec(proptest::option::of(-1e9f64..1e9), 3), 1..20)) {
        let mut t = Table::from_rows(&vec![vec![0.0; 3]; rows.len()]);
        t.rows = rows;
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        prop_assert_eq!(Table::parse(Cursor::new(buf), None).unwrap(), t);
    }
}

#[test]
fn step_records_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log/steps.jsonl");
    let rec = StepRecord { step: 3, lr: 1e-4, losses: vec![(ModalityKind::Table, 0.5), (ModalityKind::TimeSeries, 1.5)] };
    let mut w = RecordWriter::create(&path).unwrap();
    w.write_all(&step_records(&rec)).unwrap();
    w.write(&Record::at_epoch(2, "eval/acc", f64::NAN)).unwrap();
    w.finish().unwrap();
    let back = read_records(&path).unwrap();
    let names: Vec<&str> = back.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["lr", "loss/table", "loss/timeseries", "loss/mean", "eval/acc"]);
    assert_eq!(back[3].value, Some(1.0));
    assert_eq!(back[3].step, Some(3));
    assert_eq!(back[4].value, None);
    let first = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(first, r#"{"step":3,"name":"lr","value":0.0001}"#);
}

#[test]
fn plotdata_six_point_curve() {
    let pts: Vec<(f64, f64)> = (0..6).map(|x| (x as f64, 1.0 - 0.82f64.powi(x) + 0.14)).collect();
    let mut buf = Vec::new();
    emit_plotdata(&mut buf, "modalities", "score", &pts).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("modalities,score\n0,0.14"));
    let mut again = Vec::new();
    emit_plotdata(&mut again, "modalities", "score", &pts).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn plotdata_trace_is_monotone_in_x() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let trace: Vec<(f64, f64)> = [(2.0, 0.3), (0.0, 1.0), (1.0, 0.5)].to_vec();
    write_plotdata(&path, "step", "loss", &trace).unwrap();
    let back = read_plotdata(&path).unwrap();
    assert_eq!(back, [(0.0, 1.0), (1.0, 0.5), (2.0, 0.3)]);
}

#[test]
fn plotdata_rejects_empty_input() {
    let err = emit_plotdata(Vec::new(), "x", "y", &[]).unwrap_err();
    assert_eq!(err.kind(), "contract");
}
