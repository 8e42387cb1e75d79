use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const LOGISTIC: &str = r#"
[model]
kind = "logistic"
discount = 0.05
price = 0.5
seed_cost = 2.5

[model.coefficients]
b1 = 3.0
b2 = 2.0
sigma = 2.0

[bounds]
seed = SEED
harvest = HARVEST

[grid]
upper = 4.0
h = H
"#;

fn logistic(seed: &str, harvest: &str, h: &str) -> String {
    LOGISTIC
        .replace("SEED", seed)
        .replace("HARVEST", harvest)
        .replace("H", h)
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn harvest(args: &[&str]) -> Run {
    let Output {
        status,
        stdout,
        stderr,
    } = Command::new(env!("CARGO_BIN_EXE_harvest"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: status.code().expect("exit code"),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_with(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Run {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    harvest(&args)
}

fn thresholds(stdout: &str) -> (String, String) {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("L1="))
        .unwrap_or_else(|| panic!("no threshold line in {stdout}"));
    let mut parts = line.split_whitespace();
    let l1 = parts.next().unwrap().trim_start_matches("L1=").to_string();
    let l2 = parts.next().unwrap().trim_start_matches("L2=").to_string();
    (l1, l2)
}

fn near(s: &str, expected: f64, tol: f64) -> bool {
    s.parse::<f64>().map(|v| (v - expected).abs() <= tol + 1e-9).unwrap_or(false)
}

#[test]
fn check_passes_for_logistic_example() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.toml", &logistic("0.5", "\"inf\"", "0.01"));
    let r = run_with("check", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("all checks passed"));
    assert!(r.stdout.contains("growth condition"));
}

#[test]
fn check_rejects_price_above_cost() {
    let dir = TempDir::new().unwrap();
    let text = logistic("0.5", "\"inf\"", "0.01")
        .replace("price = 0.5", "price = 3.0")
        .replace("seed_cost = 2.5", "seed_cost = 2.5");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let r = run_with("check", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("price must be below seeding cost"), "{}", r.stderr);
}

#[test]
fn check_rejects_mixed_finiteness() {
    let dir = TempDir::new().unwrap();
    let text = r#"
[model]
kind = "competition"
discount = 0.05
price = [1.0, 1.5]
seed_cost = [4.0, 3.0]
[model.coefficients]
b1 = 3.0
b2 = 2.0
a11 = 2.0
a12 = 1.5
a21 = 2.0
a22 = 2.0
sigma1 = 3.0
sigma2 = 4.0
[bounds]
seed = ["inf", 0.5]
harvest = 3.0
[grid]
upper = 4.0
h = 0.05
"#;
    let cfg = write_config(dir.path(), "mixed.toml", text);
    let r = run_with("check", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("mix finite and unbounded"), "{}", r.stderr);
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let text = logistic("0.5", "\"inf\"", "0.01").replace("h = 0.01", "h = 0.01\nstep = 0.01");
    let cfg = write_config(dir.path(), "typo.toml", &text);
    let r = run_with("solve", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("step"), "{}", r.stderr);
}

#[test]
fn missing_config_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let r = run_with("check", &dir.path().join("absent.toml"), dir.path(), &[]);
    assert_eq!(r.code, 2);
}

#[test]
fn solve_regime_a_prints_thresholds_and_writes_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.toml", &logistic("0.5", "\"inf\"", "0.01"));
    let out = dir.path().join("out");
    let r = run_with("solve", &cfg, &out, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (l1, l2) = thresholds(&r.stdout);
    assert!(near(&l1, 0.04, 0.02), "L1={l1}");
    assert!(near(&l2, 1.25, 0.05), "L2={l2}");
    for f in ["solution.csv", "thresholds.csv", "manifest_solve.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest_solve.toml")).unwrap();
    for key in ["iterations", "bellman_residual", "wall_time_seconds", "tolerance", "[simulate]"] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }
}

#[test]
fn solve_regime_b_prints_thresholds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "b.toml", &logistic("0.5", "3.0", "0.01"));
    let r = run_with("solve", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (l1, l2) = thresholds(&r.stdout);
    assert!(near(&l1, 0.03, 0.02), "L1={l1}");
    assert!(near(&l2, 0.54, 0.05), "L2={l2}");
}

#[test]
fn solve_without_controls_is_all_idle() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "zero.toml", &logistic("0.0", "0.0", "0.05"));
    let out = dir.path().join("out");
    let r = run_with("solve", &cfg, &out, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("L1=none L2=none"), "{}", r.stdout);
    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let value: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(value, 0.0, "{row}");
    }
}

#[test]
fn manifest_reproduces_the_run_exactly() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "b.toml", &logistic("0.5", "3.0", "0.02"));
    let first = dir.path().join("first");
    assert_eq!(run_with("solve", &cfg, &first, &["--quiet"]).code, 0);
    let second = dir.path().join("second");
    let r = run_with("solve", &first.join("manifest_solve.toml"), &second, &["--quiet"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.is_empty());
    assert_eq!(
        fs::read(first.join("solution.csv")).unwrap(),
        fs::read(second.join("solution.csv")).unwrap()
    );
}

#[test]
fn seed_flag_is_recorded() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "b.toml", &logistic("0.5", "3.0", "0.05"));
    let out = dir.path().join("out");
    assert_eq!(run_with("solve", &cfg, &out, &["--seed", "424242", "--quiet"]).code, 0);
    let manifest = fs::read_to_string(out.join("manifest_solve.toml")).unwrap();
    assert!(manifest.contains("seed = 424242"), "{manifest}");
}

#[test]
fn single_point_sweep_matches_solve() {
    let dir = TempDir::new().unwrap();
    let solve_cfg = write_config(dir.path(), "s.toml", &logistic("0.5", "3.0", "0.02"));
    let sweep_text = format!(
        "{}\n[sweep]\nparameter = \"mu\"\nvalues = [3.0]\nprobes = [[1.0]]\n",
        logistic("0.5", "3.0", "0.02")
    );
    let sweep_cfg = write_config(dir.path(), "w.toml", &sweep_text);
    let a = run_with("solve", &solve_cfg, &dir.path().join("a"), &[]);
    let b = run_with("sweep", &sweep_cfg, &dir.path().join("b"), &[]);
    assert_eq!(a.code, 0);
    assert_eq!(b.code, 0, "{}", b.stderr);
    let line = b.stdout.lines().next().unwrap();
    let (l1, l2) = thresholds(&a.stdout);
    assert_eq!(line, format!("mu=3: L1={l1} L2={l2}"));

    let csv = fs::read_to_string(dir.path().join("b/sweep.csv")).unwrap();
    let row = csv.lines().filter(|l| !l.starts_with('#')).nth(1).unwrap();
    let probe: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    let solution = fs::read_to_string(dir.path().join("a/solution.csv")).unwrap();
    let v1: f64 = solution
        .lines()
        .find(|l| l.starts_with("1,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(probe, v1);
}

#[test]
fn sweep_requires_its_section() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "s.toml", &logistic("0.5", "3.0", "0.05"));
    let r = run_with("sweep", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("sweep"), "{}", r.stderr);
}

const SIMULATE: &str = r#"
[simulate]
dt = 0.001
horizon = 100.0
paths = 400
seed = 3
samples = [[0.5], [1.0], [2.0], [3.0]]
"#;

fn solved(dir: &Path) -> (PathBuf, PathBuf) {
    let text = format!("{}{SIMULATE}", logistic("0.5", "\"inf\"", "0.02"));
    let cfg = write_config(dir, "v.toml", &text);
    let out = dir.join("out");
    let r = run_with("solve", &cfg, &out, &["--quiet"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    (cfg, out)
}

#[test]
fn verify_accepts_the_solved_policy() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = solved(dir.path());
    let r = run_with("verify", &cfg, &out, &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert_eq!(r.stdout.lines().filter(|l| l.starts_with("pass")).count(), 4);
    assert!(out.join("verify.csv").exists());
    assert!(out.join("manifest_verify.toml").exists());
}

#[test]
fn verify_rejects_an_inflated_value_function() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = solved(dir.path());
    let path = out.join("solution.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut corrupted = String::new();
    let mut header_seen = false;
    for line in text.lines() {
        if line.starts_with('#') || !header_seen {
            header_seen |= !line.starts_with('#');
            corrupted.push_str(line);
        } else {
            let mut cells: Vec<String> = line.split(',').map(str::to_string).collect();
            let v: f64 = cells[1].parse().unwrap();
            cells[1] = format!("{}", 2.0 * v);
            corrupted.push_str(&cells.join(","));
        }
        corrupted.push('\n');
    }
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, corrupted).unwrap();
    let r = run_with("verify", &cfg, &out, &["--solution", bad.to_str().unwrap()]);
    assert_eq!(r.code, 1, "{}", r.stdout);
    assert!(r.stdout.contains("FAIL"));
}

#[test]
fn verify_rejects_off_grid_samples() {
    let dir = TempDir::new().unwrap();
    let (_, out) = solved(dir.path());
    let text = format!(
        "{}{}",
        logistic("0.5", "\"inf\"", "0.02"),
        SIMULATE.replace("[0.5]", "[0.505]")
    );
    let cfg = write_config(dir.path(), "off.toml", &text);
    let r = run_with("verify", &cfg, &out, &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("GridMismatch"), "{}", r.stderr);
}

#[test]
fn verify_rejects_a_solution_from_another_lattice() {
    let dir = TempDir::new().unwrap();
    let (_, out) = solved(dir.path());
    let text = format!("{}{SIMULATE}", logistic("0.5", "\"inf\"", "0.01"));
    let cfg = write_config(dir.path(), "fine.toml", &text);
    let r = run_with("verify", &cfg, &out, &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("GridMismatch"), "{}", r.stderr);
}
