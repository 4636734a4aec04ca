use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stsc")).args(args).output().expect("spawn stsc")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("stsc-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL: &[&str] = &["--set", "n=200", "--set", "epochs=3", "--set", "batch_size=16", "--set", "hidden=8"];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--quiet", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    stsc(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_every_artifact() {
    let out = scratch("artifacts");
    let o = train(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "manifest.txt",
        "metrics.csv",
        "val.csv",
        "test.csv",
        "checkpoints/best.bin",
        "checkpoints/best.manifest",
        "checkpoints/final.bin",
        "substructures/epoch_0002.txt",
        "relations/epoch_0000_student.csv",
        "relations/epoch_0002_teacher.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,lr,lambda,l_s,l_c,l_sc,l_tc,k,"));
}

#[test]
fn manifest_replay_is_byte_identical() {
    let a = scratch("replay-a");
    let b = scratch("replay-b");
    assert!(train(&a, &["--seed", "3"]).status.success());
    let manifest = a.join("manifest.txt");
    let o = stsc(&["train", "--quiet", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn eval_of_best_checkpoint_matches_logged_validation() {
    let out = scratch("eval");
    assert!(train(&out, &[]).status.success());
    let manifest = out.join("manifest.txt");
    let ckpt = out.join("checkpoints/best.bin");
    let o = stsc(&[
        "eval",
        "--config",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "val",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let best_epoch: usize = std::fs::read_to_string(out.join("checkpoints/best.manifest"))
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix("epoch = "))
        .unwrap()
        .parse()
        .unwrap();
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(best_epoch + 1).unwrap().split(',').collect();
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let got: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    // eval: n,acc,sen,spec,auc,f1; metrics: ...,val_acc,val_sen,val_spec,val_auc,val_f1,...
    assert_eq!(&got[1..6], &row[8..13]);
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let out = scratch("mismatch");
    assert!(train(&out, &[]).status.success());
    let ckpt = out.join("checkpoints/best");
    let o = stsc(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "dataset=blobs",
        "--set",
        "dim=5",
        "--set",
        "n=100",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("2 input features but the dataset has 5"), "{}", stderr(&o));
}

#[test]
fn gen_data_then_train_from_csv() {
    let dir = scratch("csv");
    let csv = dir.join("blobs.csv");
    let o = stsc(&[
        "gen-data",
        "--set",
        "dataset=blobs",
        "--set",
        "dim=3",
        "--set",
        "classes=3",
        "--set",
        "n=150",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("id,f_0,f_1,f_2,label\n"));
    assert_eq!(text.lines().count(), 151);
    let run = dir.join("run");
    let o = stsc(&[
        "train",
        "--quiet",
        "--set",
        "dataset=csv",
        "--set",
        &format!("dataset_path={}", csv.display()),
        "--set",
        "classes=3",
        "--set",
        "epochs=2",
        "--set",
        "labeled_ratio=0.3",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn heatmap_renders_and_names_missing_epochs() {
    let out = scratch("heatmap");
    assert!(train(&out, &[]).status.success());
    let o = stsc(&["heatmap", out.to_str().unwrap(), "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for tag in ["student", "teacher", "diff"] {
        let pgm = std::fs::read(out.join(format!("relations/epoch_0001_{tag}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n"));
    }
    let o = stsc(&["heatmap", out.to_str().unwrap(), "42"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epoch 42"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_four_terms_and_catches_a_bad_adjoint() {
    let o = stsc(&["gradcheck", "--instances", "10"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.ends_with("PASS")), "{text}");
    let o = stsc(&["gradcheck", "--instances", "10", "--corrupt-adjoint"]);
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL"));
}

#[test]
fn config_errors_are_reported() {
    let o = stsc(&["train", "--set", "bogus=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown config key `bogus`"), "{}", stderr(&o));
    let o = stsc(&["train", "--set", "epochs=many"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
    let o = stsc(&["train", "--config", "/nonexistent/stsc.conf"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/stsc.conf"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_eight_rows() {
    let out = scratch("ablate");
    let mut args = vec!["ablate", "--out", out.to_str().unwrap(), "--set", "seeds=2"];
    args.extend_from_slice(&["--set", "n=120", "--set", "epochs=2", "--set", "batch_size=16", "--set", "hidden=4"]);
    let o = stsc(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 9);
    assert!(table.lines().last().unwrap().starts_with("L_s+L_c+L_sc+L_tc,1,1,1,2,"));
    let runs = std::fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 17);
}
