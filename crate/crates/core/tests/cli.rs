use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "train_samples=64
fit_samples=24
test_samples=8
epochs=2
batch_size=16
parts=3
widths=8,8,16
strides=2,2,2
";

fn regroup(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regroup"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn tiny(dir: &Path, extra: &str) {
    fs::write(dir.join("run.txt"), format!("{TINY}{extra}")).unwrap();
}

#[test]
fn gen_twice_gives_identical_datasets() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path(), "");
    for out in ["a", "b"] {
        let o = regroup(dir.path(), &["gen", "--config", "run.txt", "--out", out, "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for split in ["train", "fit", "test"] {
        let read = |out: &str| fs::read(dir.path().join(out).join(split).join("manifest.csv")).unwrap();
        assert_eq!(read("a"), read("b"));
        let first = |out: &str| fs::read(dir.path().join(out).join(split).join("00000.ppm")).unwrap();
        assert_eq!(first("a"), first("b"));
    }
    let echo = fs::read_to_string(dir.path().join("a/config.txt")).unwrap();
    assert!(echo.contains("seed=5\n") && echo.contains("train_samples=64\n"));
}

#[test]
fn train_on_generated_data_then_eval_and_visualize() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path(), "");
    assert!(regroup(dir.path(), &["gen", "--config", "run.txt", "--out", "data"]).status.success());
    // Training from the saved dataset matches training on the regenerated one.
    tiny(dir.path(), "data=data\n");
    assert!(regroup(dir.path(), &["train", "--config", "run.txt", "--out", "disk"]).status.success());
    tiny(dir.path(), "");
    assert!(regroup(dir.path(), &["train", "--config", "run.txt", "--out", "mem"]).status.success());
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("disk/checkpoint.rgt"), read("mem/checkpoint.rgt"));
    let metrics = String::from_utf8(read("mem/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let o = regroup(dir.path(), &["eval", "--config", "run.txt", "--out", "mem"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(read("mem/eval.txt")).unwrap();
    for key in ["accuracy=", "landmark_error=", "pointing_error="] {
        assert!(report.contains(key), "{report}");
    }
    assert!(String::from_utf8(read("mem/eval.csv")).unwrap().starts_with("accuracy,landmark_error,pointing_error\n"));

    let o = regroup(
        dir.path(),
        &["visualize", "--config", "run.txt", "--out", "vis", "--checkpoint", "mem/checkpoint.rgt", "--samples", "2"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..2 {
        for what in ["image", "assignment", "attention", "attribution"] {
            let bytes = read(&format!("vis/sample{i}_{what}.ppm"));
            assert!(bytes.starts_with(b"P6"), "{what}");
        }
    }
}

#[test]
fn ablate_writes_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path(), "");
    let o = regroup(dir.path(), &["ablate", "--config", "run.txt", "--out", "abl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,accuracy,landmark_error");
    assert_eq!(lines.len(), 4);
    for (line, name) in lines[1..].iter().zip(["full", "no_regularization", "no_attention"]) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], name);
        assert!(cols[1].parse::<f64>().is_ok() && cols[2].parse::<f64>().is_ok());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    tiny(dir.path(), "colour=red\n");
    assert_eq!(regroup(dir.path(), &["train", "--config", "run.txt"]).status.code(), Some(2));
    tiny(dir.path(), "");
    assert_eq!(regroup(dir.path(), &["train", "--config", "missing.txt"]).status.code(), Some(3));
    assert_eq!(
        regroup(dir.path(), &["eval", "--config", "run.txt", "--checkpoint", "nowhere.rgt"]).status.code(),
        Some(3)
    );
    tiny(dir.path(), "learning_rate=1e300\n");
    let o = regroup(dir.path(), &["train", "--config", "run.txt"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
