use std::path::Path;

use trinet_core::harness::datasets::DirectorySource;
use trinet_core::harness::{open_source, DataSource, DatasetConfig};
use trinet_core::Error;

fn write_classes(root: &Path, split: &str, classes: usize, rows: usize, dim: usize) {
    std::fs::create_dir_all(root.join(split)).unwrap();
    for c in 0..classes {
        let text: String = (0..rows)
            .map(|r| {
                let v: Vec<String> = (0..dim)
                    .map(|d| format!("{}", c as f64 + 0.1 * r as f64 + 0.01 * d as f64))
                    .collect();
                v.join(",") + "\n"
            })
            .collect();
        std::fs::write(root.join(split).join(format!("class_{c}.csv")), text).unwrap();
    }
}

fn cfg(root: &Path, per_task: usize) -> DatasetConfig {
    DatasetConfig {
        id: root.to_str().unwrap().into(),
        classes_per_task: per_task,
        ..DatasetConfig::default()
    }
}

#[test]
fn tasks_are_read_per_class_file() {
    let dir = tempfile::tempdir().unwrap();
    write_classes(dir.path(), "train", 4, 6, 3);
    write_classes(dir.path(), "test", 4, 2, 3);
    let src = open_source(&cfg(dir.path(), 2), 0).unwrap();
    assert_eq!(src.num_tasks(), 2);
    assert_eq!(src.data_dim(), 3);
    let t1 = src.train(1).unwrap();
    assert_eq!(t1.classes, vec![2, 3]);
    assert_eq!(t1.len(), 12);
    assert_eq!(src.test(1).unwrap().len(), 4);
    // Each row keeps its label: class c rows start at c.
    for i in 0..t1.len() {
        assert_eq!(t1.x.row_slice(i)[0].floor() as usize, t1.y[i]);
    }
}

#[test]
fn bad_value_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write_classes(dir.path(), "train", 2, 3, 2);
    write_classes(dir.path(), "test", 2, 3, 2);
    std::fs::write(dir.path().join("train/class_1.csv"), "1,2\n3,oops\n").unwrap();
    let src = DirectorySource::open(dir.path(), &cfg(dir.path(), 2), 0).unwrap();
    match src.train(0) {
        Err(Error::Parse { path, message }) => {
            assert!(path.ends_with("class_1.csv"));
            assert!(message.contains("line 2"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn width_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_classes(dir.path(), "train", 2, 3, 2);
    write_classes(dir.path(), "test", 2, 3, 2);
    std::fs::write(dir.path().join("train/class_1.csv"), "1,2,3\n").unwrap();
    let src = DirectorySource::open(dir.path(), &cfg(dir.path(), 2), 0).unwrap();
    assert!(src.train(0).is_err());
}

#[test]
fn empty_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        DirectorySource::open(dir.path(), &cfg(dir.path(), 2), 0),
        Err(Error::EmptyDataset(_))
    ));
}

#[test]
fn unknown_id_is_rejected() {
    let c = DatasetConfig {
        id: "no-such-dataset".into(),
        ..DatasetConfig::default()
    };
    assert!(matches!(
        open_source(&c, 0),
        Err(Error::UnknownDataset { .. })
    ));
}
