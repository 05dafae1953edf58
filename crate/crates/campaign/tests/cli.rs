use std::process::Command;

use serde_json::json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groupwise"))
}

#[test]
fn decode_prints_one_line_per_individual() {
    let dir = tempfile::tempdir().unwrap();
    let tests = dir.path().join("tests.txt");
    std::fs::write(&tests, "# pooled tests\n0,1,2 1\n3,4 0\n2 1\n").unwrap();
    let out = bin()
        .args(["decode", "--tests"])
        .arg(&tests)
        .args(["--q", "0.1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(usize, f64)> = text
        .lines()
        .map(|l| {
            let (i, p) = l.split_once('\t').unwrap();
            (i.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[2].1 > rows[0].1 && rows[0].1 > rows[3].1);
}

#[test]
fn simulate_writes_metrics_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    let config = json!({
        "n": 12, "q": 0.1, "k": 3, "cycles": 2, "n_max": 4,
        "policies": ["dorfman", "random"],
        "smc": {"num_particles": 200}
    });
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--runs", "3", "--seed", "4", "--parallelism", "2", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("policy,cycle,threshold,mean_sensitivity,mean_specificity,n_runs,n_sens_defined\n"));
    // 2 policies x 2 cycles x 2 default thresholds.
    assert_eq!(csv.lines().count(), 1 + 8);
    let jsonl = std::fs::read_to_string(out_dir.join("trajectories.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 6);
}

#[test]
fn campaign_create_then_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("campaign.json");
    std::fs::write(&cfg, json!({"n": 4, "q": 0.1, "k": 4, "policy": "individual"}).to_string()).unwrap();
    let data = dir.path().join("data");
    let out = bin()
        .args(["campaign", "create", "--id", "lab1", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "lab1");

    let mut child = bin()
        .args(["campaign", "step", "--id", "lab1", "--data"])
        .arg(&data)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"0 1 0 0\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("exhausted after 4 tests"), "{text}");
    assert!(data.join("lab1.events.jsonl").exists());
}
