use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spikesplat::formats::read_tensor;
use spikesplat::spike::{simulate_spikes, write_spk, IntensitySequence, SpikeSimConfig};

const SMALL: &str = r#"{
  "scene": {"views": 2, "width": 16, "height": 16, "focal": 20.0, "gaussians": 16},
  "train": {"gaussians": 8, "network": {"width": 4, "blocks": 1}, "preview_every": 1}
}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikesplat"))
        .args(args)
        .env("USPG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "expected one line, got {s:?}");
    s.trim_end().to_string()
}

fn simulate(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data");
    let o = cli(&["simulate", "--config", path(&cfg), "--out", path(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn simulate_then_train_one_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path());
    for f in ["scene.json", "view_000.spk", "view_001.spk", "gt/view_000.tsr", "blur/view_001.tsr"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    let o = cli(&[
        "train", "--dataset", path(&data), "--mode", "gs-only", "--iters", "1", "--seed", "0",
        "--config", path(&cfg), "--out", path(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(run.join("config.json").exists());
    assert!(run.join("checkpoints/step_000001.ckpt").exists());
    assert!(run.join("previews/step_000001_gs.pgm").exists());
}

#[test]
fn eval_and_pose_eval_read_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    let run = tmp.path().join("run");
    let o = cli(&[
        "train", "--dataset", path(&data), "--mode", "joint", "--pose-level", "10", "--iters", "2",
        "--config", path(&cfg), "--out", path(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = tmp.path().join("report.csv");
    let o = cli(&["eval", "--run", path(&run), "--dataset", path(&data), "--out", path(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("mean,")));
    assert!(tmp.path().join("report.txt").exists());
    let o = cli(&["pose-eval", "--run", path(&run), "--dataset", path(&data), "--level", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("level 10%"));
    let ckpt = run.join("checkpoints/step_000002.ckpt");
    let img = tmp.path().join("net.tsr");
    let o = cli(&[
        "reconstruct", "--spike", path(&data.join("view_000.spk")), "--method", "net",
        "--checkpoint", path(&ckpt), "--out", path(&img),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_tensor(&img).unwrap().shape(), &[16, 16]);
}

#[test]
fn tfp_on_a_constant_stream_recovers_the_intensity() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = IntensitySequence::constant(100, 4, 5, 0.3).unwrap();
    let stream = simulate_spikes(&seq, &SpikeSimConfig::new(1.0)).unwrap();
    let spk = tmp.path().join("c.spk");
    write_spk(&spk, &stream).unwrap();
    let out = tmp.path().join("tfp.tsr");
    let o = cli(&["reconstruct", "--spike", path(&spk), "--method", "tfp", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_tensor(&out).unwrap();
    assert_eq!(t.shape(), &[4, 5]);
    assert!(t.data().iter().all(|v| (v - 0.3).abs() <= 1.0 / 41.0 + 1e-6));
    let pgm = tmp.path().join("tfi.pgm");
    let o = cli(&["reconstruct", "--spike", path(&spk), "--method", "tfi", "--out", path(&pgm)]);
    assert!(o.status.success());
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn failures_are_one_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(&["simulate", "--bogus", "--out", "x"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[usage]:"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"scene": {"gaussian": 3}}"#).unwrap();
    let o = cli(&["simulate", "--config", path(&bad), "--out", path(&tmp.path().join("d"))]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[config]:"));

    let o = cli(&["eval", "--run", "/nonexistent/run", "--dataset", "/nonexistent/data", "--out", "r.csv"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[missing-file]:"));

    let o = cli(&["reconstruct", "--spike", "/nonexistent.spk", "--method", "tfp", "--out", "x.tsr"]);
    assert!(stderr_line(&o).starts_with("error[missing-file]:"));
}

#[test]
fn net_reconstruction_requires_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = IntensitySequence::constant(137, 4, 4, 0.5).unwrap();
    let spk = tmp.path().join("c.spk");
    write_spk(&spk, &simulate_spikes(&seq, &SpikeSimConfig::new(0.5)).unwrap()).unwrap();
    let o = cli(&["reconstruct", "--spike", path(&spk), "--method", "net", "--out", "x.tsr"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[usage]:"));
}
