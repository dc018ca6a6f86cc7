use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use apnorm::data::synthetic_blobs;
use apnorm::layers::{analytic_stats, load_model};
use apnorm::optim::evaluate;

fn apnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apnorm")).args(args).output().expect("spawning the binary")
}

fn ok(args: &[&str]) -> String {
    let out = apnorm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    apnorm(args).status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BLOBS: &str = "blobs:2048,4,8,6";

fn train_blobs(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--preset", "mlp", "--data", BLOBS, "--batch-size", "32", "--out", path(out)];
    args.extend_from_slice(extra);
    ok(&args)
}

fn csv_rows(file: &Path) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(file).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect()).collect();
    (header, rows)
}

#[test]
fn ap2_training_on_blobs_fits_the_training_set() {
    let dir = tempfile::tempdir().unwrap();
    train_blobs(dir.path(), &["--norm", "ap2", "--init", "ap2"]);
    let net = load_model(&dir.path().join("model")).unwrap();
    let data = synthetic_blobs(2048, 4, 8, 6.0, 0).unwrap();
    let (_, accuracy) = evaluate(&net, &data, 256, false).unwrap();
    assert!(accuracy >= 0.95, "{accuracy}");
    let (header, rows) = csv_rows(&dir.path().join("training.csv"));
    assert_eq!(header, "epoch,batch,loss,running_loss,lr");
    assert_eq!(rows.len(), 5 * 64);
}

#[test]
fn identical_flags_give_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let flags = ["--norm", "bn", "--init", "bn", "--seed", "3", "--noise", "0.1"];
    train_blobs(a.path(), &flags);
    train_blobs(b.path(), &flags);
    for f in ["training.csv", "model/manifest.txt", "model/p0_weight.f32", "model/p1_running_var.f32"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bn_runs_record_eval_loss_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    train_blobs(dir.path(), &["--norm", "bn", "--init", "bn", "--epochs", "2", "--validation", "blobs:256,4,8,6,5"]);
    let (header, rows) = csv_rows(&dir.path().join("training.csv"));
    assert_eq!(header, "epoch,batch,loss,running_loss,lr,bn_eval_loss");
    let eval: Vec<_> = rows.iter().filter(|r| r[5].is_finite()).collect();
    assert_eq!(eval.len(), 2);
    let (header, rows) = csv_rows(&dir.path().join("validation.csv"));
    assert_eq!(header, "epoch,val_loss,val_accuracy");
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[2] > 0.5 && r[2] <= 1.0));
}

#[test]
fn lr_search_stays_within_ten_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        ok(&["train", "--preset", "mlp", "--data", "blobs:512,2,2,1", "--batch-size", "64", "--lr-search", "--out", path(dir.path())]);
    assert!(out.contains("lr search"));
    let (header, rows) = csv_rows(&dir.path().join("lr_search.csv"));
    assert_eq!(header, "log10_lr,loss");
    assert!(!rows.is_empty() && rows.len() <= 11, "{}", rows.len());
    assert!(rows.iter().all(|r| (-6.0..=-2.0).contains(&r[0])));
    assert_eq!(code(&["train", "--data", BLOBS, "--lr", "0.1", "--lr-search", "--out", path(dir.path())]), 2);
}

#[test]
fn convert_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_blobs(&d.join("run"), &["--epochs", "1"]);
    let model = d.join("run/model");
    ok(&["convert", path(&model), "--to", "normalized", "--mode", "ap2", "--out", path(&d.join("ap2"))]);
    ok(&["convert", path(&d.join("ap2")), "--to", "unnormalized", "--out", path(&d.join("back"))]);
    let data = synthetic_blobs(64, 4, 8, 6.0, 1).unwrap();
    let original = load_model(&model).unwrap().forward(&data.images, false).unwrap();
    for name in ["ap2", "back"] {
        let net = load_model(&d.join(name)).unwrap();
        let dev = net.forward(&data.images, false).unwrap().max_abs_diff(&original).unwrap();
        assert!(dev < 1e-5, "{name}: {dev}");
    }
}

#[test]
fn bn_conversion_demands_a_batch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_blobs(&d.join("run"), &["--epochs", "1"]);
    let model = d.join("run/model");
    let bn = d.join("bn");
    let out = path(&bn);
    assert_eq!(code(&["convert", path(&model), "--to", "normalized", "--mode", "bn", "--out", out]), 2);
    let report = ok(&["convert", path(&model), "--to", "normalized", "--mode", "bn", "--batch", BLOBS, "--out", out]);
    let dev: f64 = report.split(": ").nth(1).unwrap().lines().next().unwrap().parse().unwrap();
    assert!(dev < 1e-5, "{dev}");
}

#[test]
fn projecting_conversion_reports_unit_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_blobs(&d.join("run"), &["--epochs", "1"]);
    let proj = d.join("proj");
    let report =
        ok(&["convert", path(&d.join("run/model")), "--to", "normalized", "--mode", "ap2", "--init", "projecting", "--out", path(&proj)]);
    let weight_lines: Vec<_> = report.lines().filter(|l| l.starts_with("weight layer")).collect();
    assert_eq!(weight_lines.len(), 3);
    assert!(weight_lines.iter().all(|l| l.ends_with("after max |mean| 0.0000e0, var in [1.0000e0, 1.0000e0]")), "{report}");

    let csv = d.join("stats.csv");
    ok(&["stats", path(&proj), "--csv", path(&csv)]);
    let net = load_model(&proj).unwrap();
    let stats = analytic_stats(&net).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,kind,unit,mean,var"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (u, m, v): (usize, f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap());
        let pair = match f[0] {
            "input" => &stats.input,
            i => &stats.layers[i.parse::<usize>().unwrap()],
        };
        assert_eq!((m, v), (pair.mean[u], pair.var[u]), "{line}");
        if f[1] == "norm" {
            assert_eq!((m, v), (0.0, 1.0));
        }
    }
}

fn plot(args: &[&str]) -> Vec<Vec<f64>> {
    let mut full = vec!["moments-plot"];
    full.extend_from_slice(args);
    let text = ok(&full);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mu,mu_prime,sigma_prime"));
    lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn relu_plot_matches_known_values() {
    let rows = plot(&["--sigma", "1", "--range=-6..6", "--points", "13"]);
    assert_eq!(rows.len(), 13);
    let at3 = rows.iter().find(|r| r[0] == 3.0).unwrap();
    assert!((at3[1] - 3.00038).abs() < 1e-3);
    let last = rows.last().unwrap();
    assert!((last[2] - 1.0).abs() < 1e-6);
    let one = plot(&["--range=-6..6", "--points", "25"]);
    let two = plot(&["--sigma", "2", "--range=-12..12", "--points", "25"]);
    for (a, b) in one.iter().zip(&two) {
        assert!((a[1] - b[1] / 2.0).abs() < 1e-6 && (a[2] - b[2] / 2.0).abs() < 1e-6, "{a:?} {b:?}");
    }
}

#[test]
fn plot_writes_files_and_rejects_bad_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sub/plot.csv");
    ok(&["moments-plot", "--nonlinearity", "sigmoid", "--out", path(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 122);
    ok(&["moments-plot", "--nonlinearity", "lrelu", "--slope", "0.2", "--out", path(&out)]);
    assert_eq!(code(&["moments-plot", "--range", "3..1"]), 2);
    assert_eq!(code(&["moments-plot", "--range", "abc"]), 2);
    assert_eq!(code(&["moments-plot", "--sigma", "0"]), 2);
}

#[test]
fn verify_moments_passes() {
    let out = ok(&["verify", "--suite", "moments", "--samples", "200000"]);
    assert!(out.contains("suite moments") && out.contains("PASS"));
    assert!(out.contains("margin"));
    assert_eq!(code(&["verify", "--suite", "everything"]), 2);
}

#[test]
fn config_file_fills_unset_flags_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(&cfg, "# training\nepochs = 1\nbatch_size = 64\nnorm = ap2\ninit = ap2\nhflip = false\n").unwrap();
    let run = d.join("a");
    let out = path(&run);
    ok(&["train", "--config", path(&cfg), "--preset", "mlp", "--data", BLOBS, "--out", out]);
    assert_eq!(csv_rows(&d.join("a/training.csv")).1.len(), 32);
    ok(&["train", "--config", path(&cfg), "--epochs", "2", "--preset", "mlp", "--data", BLOBS, "--out", out]);
    assert_eq!(csv_rows(&d.join("a/training.csv")).1.len(), 64);

    fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(&["train", "--config", path(&cfg), "--data", BLOBS, "--out", out]), 2);
    fs::write(&cfg, "hflip = maybe\n").unwrap();
    assert_eq!(code(&["train", "--config", path(&cfg), "--data", BLOBS, "--out", out]), 2);
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(code(&["train", "--bogus"]), 2);
    assert_eq!(code(&["train", "--data", "mnist:/definitely/missing", "--out", out]), 3);
    assert_eq!(code(&["stats", "/definitely/missing"]), 3);
    assert_eq!(code(&["train", "--preset", "mnist_mlp", "--data", BLOBS, "--out", out]), 2);
    let diverge = ["train", "--preset", "mlp", "--activation", "relu", "--hidden", "64,64", "--data", "blobs:512,4,8,6"];
    assert_eq!(code(&[&diverge[..], &["--batch-size", "32", "--lr", "1e30", "--out", out]].concat()), 4);
}
