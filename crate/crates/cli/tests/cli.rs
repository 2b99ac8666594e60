use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mk_core::io::{load_checkpoint, load_tensor, read_dataset};

fn mk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mk"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn verify_2d_rank_2_passes_with_small_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let out = mk(&[
        "verify",
        "--dim",
        "2",
        "--rank",
        "2",
        "--support",
        "3",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("residuals.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r[2].parse::<f64>().unwrap() <= 1e-10);
    }
    assert_eq!(csv_rows(&dir.path().join("elements.csv")).len(), 8);
}

#[test]
fn symmetry_break_fails_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mk(&["verify", "--inject-symmetry-break", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("check failed"));
}

#[test]
fn verify_3d_reports_48_elements() {
    let dir = tempfile::tempdir().unwrap();
    let out = mk(&[
        "verify",
        "--dim",
        "3",
        "--rank",
        "1",
        "--layers",
        "2",
        "--size",
        "6",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("elements.csv"));
    assert_eq!(rows.len(), 48);
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() <= 1e-10));
    // two layers plus the output per element
    assert_eq!(csv_rows(&dir.path().join("equivariance.csv")).len(), 48 * 3);
}

#[test]
fn verify_angles_writes_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = mk(&["verify", "--layers", "2", "--angles", "6", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("angles.csv"));
    assert_eq!(rows.len(), 6);
    // the last angle is a quarter turn, which the grid represents exactly
    assert!(rows[5][1].parse::<f64>().unwrap() < 1e-10);
}

#[test]
fn size_guard_exits_two() {
    let out = mk(&["verify", "--dim", "3", "--rank", "4", "--support", "5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("above the limit"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mk(&["verify", "--bogus"])), 1);
    assert_eq!(code(&mk(&["gen-data", "--task", "sort", "--n", "1", "--out", "x"])), 1);
    assert_eq!(code(&mk(&["--help"])), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_mk"))
        .args([
            "export-kernel",
            "--dim",
            "2",
            "--rank",
            "0",
            "--signature-index",
            "0",
            "--out",
            "/dev/null",
        ])
        .env("MK_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("MK_THREADS"));
}

#[test]
fn gen_data_is_byte_identical_and_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    for (task, n) in [("classify", "5"), ("register", "2"), ("detect", "3")] {
        let a = dir.path().join(format!("{task}_a"));
        let b = dir.path().join(format!("{task}_b"));
        for out in [&a, &b] {
            let o = mk(&["gen-data", "--task", task, "--seed", "7", "--n", n, "--out", p(out)]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        for f in ["images.mktn", "labels.csv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{task} {f}");
        }
        let (data, _) = read_dataset(&a, task).unwrap();
        assert_eq!(data.len(), n.parse::<usize>().unwrap());
    }
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let o = mk(&["gen-data", "--task", "detect", "--n", "0", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (data, grid) = read_dataset(dir.path(), "detect").unwrap();
    assert!(data.is_empty());
    assert_eq!(grid, vec![32, 32]);
}

#[test]
fn detect_data_passes_view_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let o = mk(&[
        "gen-data",
        "--task",
        "detect",
        "--seed",
        "3",
        "--n",
        "6",
        "--check",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mk(&[
        "gen-data",
        "--task",
        "register",
        "--n",
        "2",
        "--check",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const TINY_CLASSIFY: &str = "task = classify\nlayers = 2\nbase_scalars = 2\nbase_vectors = 1\n\
base_matrices = 1\nepochs = 1\ntrain_n = 10\ntest_n = 4\nbatch_size = 5\nprecision = f64\n";

#[test]
fn train_one_epoch_then_eval_twice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY_CLASSIFY).unwrap();
    let ck = dir.path().join("model.mkcp");
    let o = mk(&[
        "train",
        "--task",
        "classify",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&ck),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch,step,train_loss,accuracy,worst_case_accuracy"));
    assert_eq!(load_checkpoint(&ck).unwrap().step, 2);

    let mut outputs = Vec::new();
    for run in ["e1", "e2"] {
        let out = dir.path().join(run);
        let o = mk(&[
            "eval",
            "--task",
            "classify",
            "--config",
            p(&cfg),
            "--checkpoint",
            p(&ck),
            "--views",
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("worst_case_accuracy = "));
        outputs.push(fs::read(out.join("eval.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    // the checkpoint was trained on the equivariant model
    let o = mk(&[
        "eval",
        "--task",
        "classify",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&ck),
        "--baseline",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checkpoint does not match config"));
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, format!("{TINY_CLASSIFY}baseline = true\n")).unwrap();
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let ck = dir.path().join(run).join("model.mkcp");
        fs::create_dir_all(ck.parent().unwrap()).unwrap();
        let o = mk(&[
            "train",
            "--task",
            "classify",
            "--config",
            p(&cfg),
            "--checkpoint",
            p(&ck),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        logs.push(fs::read(dir.path().join(run).join("metrics.csv")).unwrap());
        logs.push(fs::read(&ck).unwrap());
    }
    assert_eq!(logs[0], logs[2]);
    assert_eq!(logs[1], logs[3]);
}

#[test]
fn train_on_generated_data_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY_CLASSIFY).unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&mk(&["gen-data", "--task", "classify", "--n", "6", "--out", p(&data)])),
        0
    );
    let ck = dir.path().join("model.mkcp");
    let args = [
        "train",
        "--task",
        "classify",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&ck),
    ];
    let o = mk(&[&args[..], &["--train-data", p(&data), "--test-data", p(&data)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let wrong = dir.path().join("wrong");
    let o = mk(&[
        "gen-data",
        "--task",
        "classify",
        "--n",
        "2",
        "--size",
        "20",
        "--out",
        p(&wrong),
    ]);
    assert_eq!(code(&o), 0);
    let o = mk(&[&args[..], &["--train-data", p(&wrong)]].concat());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("grid"));
}

#[test]
fn detect_eval_writes_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(
        &cfg,
        "task = detect\nlayers = 4\nbase_scalars = 2\nbase_vectors = 1\nbase_matrices = 1\n\
         size = 16\nepochs = 1\ntrain_n = 4\ntest_n = 2\nbatch_size = 2\nthreshold = 0.01\n",
    )
    .unwrap();
    let ck = dir.path().join("model.mkcp");
    let o = mk(&["train", "--task", "detect", "--config", p(&cfg), "--checkpoint", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mk(&[
        "eval",
        "--task",
        "detect",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&ck),
        "--overlays",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 0..2 {
        let ppm = fs::read(dir.path().join(format!("overlay_{i:03}.ppm"))).unwrap();
        let header = b"P6\n64 64\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 64 * 64 * 3);
    }
}

#[test]
fn exported_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.mktn");

    let o = mk(&[
        "export-kernel",
        "--dim",
        "2",
        "--rank",
        "0",
        "--signature-index",
        "0",
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = load_tensor(&path).unwrap();
    assert_eq!(t.dims, vec![3, 3]);
    let v = t.to_real::<f64>();
    assert!(v.iter().all(|&x| (x - 1.0).abs() < 1e-12), "{v:?}");

    let o = mk(&[
        "export-kernel",
        "--dim",
        "3",
        "--rank",
        "1",
        "--signature-index",
        "0",
        "--profile",
        "random",
        "--seed",
        "4",
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let field = load_tensor(&path).unwrap().to_field().unwrap();
    let npix = 27;
    let mut nonzero = false;
    for c in 0..3 {
        for pix in 0..npix {
            let a = field.data()[c * npix + pix];
            let b = field.data()[c * npix + (npix - 1 - pix)];
            assert!((a + b).abs() < 1e-12, "not odd under inversion");
            nonzero |= a.abs() > 1e-6;
        }
    }
    assert!(nonzero);

    let o = mk(&[
        "export-kernel",
        "--dim",
        "2",
        "--rank",
        "2",
        "--signature-index",
        "2",
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("signature index 2 out of range for rank 2"));
}
