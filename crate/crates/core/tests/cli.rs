use std::path::Path;
use std::process::{Command, Output};

use grcsam::numerics::{DType, Tensor};
use grcsam::pipeline::grct;

const MINI: [&str; 18] = [
    "--set", "coarse_h=8", "--set", "coarse_w=8", "--set", "fine_scale=2", "--set", "out_h=32", "--set", "out_w=32",
    "--set", "C=16", "--set", "heads=4", "--set", "coarse_heads=2", "--set", "window=3",
];

fn grcsam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grcsam"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_and_gradcheck_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["selftest", "gradcheck"] {
        let out = grcsam(&[cmd], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
        assert!(stdout(&out).contains(" 0 failed"));
    }
}

#[test]
fn flops_table_contains_sparse_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = grcsam(
        &["flops", "--set", "C=256", "--set", "h=64", "--set", "w=64", "--set", "M=6", "--set", "rho=0.5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("1,073,889,280"));
    assert!(text.contains("9,663,676,416"));
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert!(csv.starts_with("mechanism,h,w,C,M,rho,analytic,counted,ratio\n"));
}

#[test]
fn flops_sweep_adds_rows_and_counts_small_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = grcsam(
        &["flops", "--swin-convention", "--sweep", "0.25,0.75", "--set", "h=12", "--set", "w=12", "--set", "C=8", "--set", "M=4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[6], cols[7], "{row}");
    }
}

#[test]
fn usage_errors_exit_two_with_usage_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &["pipeline", "--no-such-flag"], &["pipeline", "--dtype", "f16"], &["flops", "--set", "C"]] {
        let out = grcsam(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let out = grcsam(&["bogus"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.grct");
    let m = missing.to_str().unwrap();
    let out = grcsam(&["fine", "--features", m, "--mask", m], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mini_pipeline_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = vec!["pipeline", "--seed", "7"];
    args.extend(MINI);
    assert_eq!(grcsam(&args, &a).status.code(), Some(0));
    assert_eq!(grcsam(&args, &b).status.code(), Some(0));
    for f in ["coarse_mask.grct", "coarse_mask.pgm", "fine_mask.grct", "fine_mask.pgm", "coarse_features.grct", "report.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let fine = grct::read(&a.join("fine_mask.grct")).unwrap();
    assert_eq!(fine.shape(), &[1, 1, 32, 32]);
    assert_eq!(fine.dtype(), DType::F32);
    let pgm = std::fs::read(a.join("fine_mask.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 32 * 32);
}

#[test]
fn config_file_and_fine_on_saved_coarse_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mini.cfg");
    std::fs::write(
        &cfg,
        "# desk-scale run\ncoarse_h = 8\ncoarse_w = 8\nfine_scale = 2\nout_h = 32\nout_w = 32\nchannels = 16\nheads = 4\ncoarse_heads = 2\nwindow = 3\ndtype = f64\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();

    let coarse_dir = dir.path().join("coarse");
    let out = grcsam(&["coarse", "--config", cfg], &coarse_dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let feats = coarse_dir.join("coarse_features.grct");
    let mask = coarse_dir.join("coarse_mask.grct");
    assert_eq!(grct::read(&mask).unwrap().shape(), &[1, 1, 8, 8]);

    let fine_saved = dir.path().join("fine_saved");
    let out = grcsam(
        &["fine", "--config", cfg, "--features", feats.to_str().unwrap(), "--mask", mask.to_str().unwrap()],
        &fine_saved,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fine_fresh = dir.path().join("fine_fresh");
    assert_eq!(grcsam(&["fine", "--config", cfg], &fine_fresh).status.code(), Some(0));
    let a = grct::read(&fine_saved.join("fine_mask.grct")).unwrap();
    let b = grct::read(&fine_fresh.join("fine_mask.grct")).unwrap();
    assert_eq!(a.shape(), &[1, 1, 32, 32]);
    assert_eq!(a, b);

    let pipe_dir = dir.path().join("pipe");
    assert_eq!(grcsam(&["pipeline", "--config", cfg], &pipe_dir).status.code(), Some(0));
    assert_eq!(grct::read(&pipe_dir.join("fine_mask.grct")).unwrap(), a);
}

#[test]
fn losses_on_grct_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let write = |name: &str, t: Tensor| {
        let path = p.join(name);
        grct::write(&path, &t.with_dtype(DType::F64)).unwrap();
        path.to_str().unwrap().to_owned()
    };
    let pred = write("pred.grct", Tensor::new(&[1, 1, 1, 1], vec![0.3]).unwrap());
    let target = write("target.grct", Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let logits = write("logits.grct", Tensor::new(&[1, 2, 1, 2], vec![2.0, -1.0, 0.5, 1.5]).unwrap());
    let labels = write("labels.grct", Tensor::new(&[1, 1, 2], vec![0.0, 255.0]).unwrap());
    let out = grcsam(&["losses", "--pred", &pred, "--target", &target, "--logits", &logits, "--labels", &labels], p);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("focal     0.147486669"), "{text}");
    assert!(text.contains("total"));

    let bad = write("bad.grct", Tensor::new(&[1, 1, 2], vec![0.5, 1.0]).unwrap());
    let out = grcsam(&["losses", "--logits", &logits, "--labels", &bad], p);
    assert_eq!(out.status.code(), Some(2));
}
