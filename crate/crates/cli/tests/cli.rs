use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const TINY: &[&str] = &["--fc_size", "8", "--gru_size", "8", "--head_sizes", "[8,4]", "--batch_size", "8"];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tracklab"));
    c.env_remove("TRACKLAB_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn train_tiny(out: &Path, episodes: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--workers", "1", "--episodes", episodes, "--mode", "vector"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not a structured error: {text}"))
}

#[test]
fn train_smoke_emits_records_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "5", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    for name in ["actor.bin", "checkpoint.bin", "config.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    // the echoed config is the effective one and round-trips
    let echoed = fs::read_to_string(dir.path().join("config.json")).unwrap();
    let cfg = tracklab::config::RunConfig::from_json(&echoed).unwrap();
    assert_eq!(cfg.train.num_episodes, 5);
    assert_eq!(cfg.net.fc_size, 8);
    assert_eq!(cfg.to_json() + "\n", echoed);
    let again = dir.path().join("again");
    let o = run(&["train", "--config", dir.path().join("config.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(again.join("config.json")).unwrap(), echoed);
}

#[test]
fn seeded_single_worker_training_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(train_tiny(a.path(), "6", &["--seed", "7"]).status.success());
    assert!(train_tiny(b.path(), "6", &["--seed", "7"]).status.success());
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "train.jsonl"), read(b.path(), "train.jsonl"));
    assert_eq!(read(a.path(), "actor.bin"), read(b.path(), "actor.bin"));
}

#[test]
fn resume_continues_the_episode_counter() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), "3", &[]).status.success());
    let ckpt = dir.path().join("checkpoint.bin");
    let o = train_tiny(dir.path(), "5", &["--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let episodes: Vec<u64> = fs::read_to_string(dir.path().join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["episode"].as_u64().unwrap())
        .collect();
    assert_eq!(episodes, vec![0, 1, 2, 3, 4]);
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "30", &["--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "divergence");
}

#[test]
fn usage_and_config_exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "stray"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--scenario", "static"]).status.code(), Some(1));
    let o = run(&["train", "--no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
    assert_eq!(run(&["train", "--gamma", "2"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"version": 9}"#).unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_writes_csv_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["eval", "--policy", "htg", "--scenario", "circular:3:3:0.01", "--out", out, "--runs", "4", "--steps", "100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scenario,policy,runs,steps,p_rho,p_theta,p_c,p_v");
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&cols[..4], &["circular:3:3:0.01", "htg", "4", "100"]);
    for c in &cols[4..] {
        assert!((0.0..=1.0).contains(&c.parse::<f64>().unwrap()));
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);
    let log = fs::read_to_string(dir.path().join("eval-htg-circular_3_3_0.01.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 400);
}

fn p_c(csv: &str) -> f64 {
    csv.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse().unwrap()
}

#[test]
fn random_policy_scores_low() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["eval", "--policy", "random", "--scenario", "circular:8:8:0.01", "--out", out]);
    assert!(o.status.success());
    let random = p_c(&String::from_utf8_lossy(&o.stdout));
    let o = run(&["eval", "--policy", "htg", "--scenario", "circular:3:3:0.01", "--out", out]);
    let htg = p_c(&String::from_utf8_lossy(&o.stdout));
    assert!(random < 0.3 && htg - random > 0.4, "random {random}, htg {htg}");
}

#[test]
fn eval_learned_weights_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), "2", &[]).status.success());
    let weights = dir.path().join("actor.bin");
    let o = run(&["eval", "--policy", weights.to_str().unwrap(), "--scenario", "static", "--runs", "2", "--steps", "20", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("static,learned,2,20,"));
    let o = run(&["eval", "--policy", "/definitely/missing.bin", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "weights");
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = bin()
        .args(["eval", "--policy", "stationary", "--scenario", "static", "--runs", "1", "--steps", "5"])
        .env("TRACKLAB_OUT", &target)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(target.join("eval.csv").exists());
}

#[test]
fn plot_learning_curve_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), "4", &[]).status.success());
    let d = dir.path().to_str().unwrap();
    assert!(run(&["eval", "--policy", "htg", "--scenario", "circular:5:5:0.01", "--runs", "2", "--steps", "40", "--out", d]).status.success());
    let o = run(&["plot", &format!("{d}/train.jsonl"), &format!("{d}/eval-htg-circular_5_5_0.01.jsonl"), "--max-runs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = fs::read_to_string(dir.path().join("train.svg")).unwrap();
    assert!(curve.starts_with("<svg"));
    // one x axis: every series runs left to right
    for id in ["actor", "htg"] {
        let start = curve.find(&format!("id=\"{id}\"")).unwrap();
        let pts = &curve[start..];
        let pts = &pts[pts.find("points=\"").unwrap() + 8..];
        let xs: Vec<f64> = pts[..pts.find('"').unwrap()].split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }
    for run_id in 0..2 {
        let svg = fs::read_to_string(dir.path().join(format!("eval-htg-circular_5_5_0.01-run{run_id}.svg"))).unwrap();
        assert!(svg.contains("id=\"tracker\"") && svg.contains("id=\"target\""));
    }
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = run(&["plot", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "plot");
}

#[test]
fn inspect_summary_checksum_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), "1", &[]).status.success());
    let weights = dir.path().join("actor.bin");
    let o = run(&["inspect", weights.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    let (cfg, params) = tracklab::nets::load_actor(&weights).unwrap();
    assert_eq!(cfg.fc_size, 8);
    assert!(text.contains(&format!("parameters: {}", params.parameter_count())), "{text}");
    assert!(text.contains("gru.w_ih"));
    // save -> inspect -> load -> save keeps the checksum
    let copy = dir.path().join("copy.bin");
    tracklab::nets::save_actor(&copy, &params, &cfg, serde_json::json!({"episodes_done": 1, "seed": 0})).unwrap();
    let o2 = run(&["inspect", copy.to_str().unwrap()]);
    let sum = |t: &str| t.lines().find(|l| l.starts_with("sha256:")).unwrap().to_string();
    assert_eq!(sum(&text), sum(&String::from_utf8_lossy(&o2.stdout)));

    let bytes = fs::read(&weights).unwrap();
    let cut = dir.path().join("cut.bin");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let o = run(&["inspect", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "weights");
    assert!(err["message"].as_str().unwrap().contains("corrupt"));
}

#[test]
fn frame_dump_is_binary_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ppm");
    let o = run(&["inspect", "--frame", path.to_str().unwrap(), "--width", "32", "--height", "24"]);
    assert!(o.status.success());
    let bytes = fs::read(&path).unwrap();
    let header = b"P6\n32 24\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 32 * 24 * 3);
}

#[test]
fn interrupt_checkpoints_then_exits() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap(), "--workers", "1", "--episodes", "100000"];
    args.extend_from_slice(TINY);
    let child = bin().args(&args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let log = dir.path().join("train.jsonl");
    let start = Instant::now();
    while fs::read_to_string(&log).map(|t| t.lines().count()).unwrap_or(0) < 2 {
        assert!(start.elapsed() < Duration::from_secs(60), "training never started");
        std::thread::sleep(Duration::from_millis(50));
    }
    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("interrupted"));
    let ck = tracklab::ddpg::load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    let logged = fs::read_to_string(&log).unwrap().lines().count() as u64;
    assert_eq!(ck.episodes_done, logged);
    assert!(logged < 100000);
}
