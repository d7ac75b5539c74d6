use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparseproj"));
    c.env_remove("SPARSEPROJ_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_vector(dir: &Path, values: &[f64]) -> String {
    let path = dir.join("w.csv");
    let body: String = values.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_vector(path: &Path) -> Vec<f64> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.trim().parse().unwrap()).collect()
}

#[test]
fn project_sparse_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[0.5, 0.4, 0.3, -0.2]);
    let output = dir.path().join("out.csv");
    let out = run(&["project", "--input", &input, "--set", "simplex", "--k", "2", "--lambda", "1", "--output", output.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let beta = read_vector(&output);
    let expected = [0.55, 0.45, 0.0, 0.0];
    for (a, b) in beta.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{beta:?}");
    }
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out.csv.json")).unwrap()).unwrap();
    assert_eq!(sidecar["support"], serde_json::json!([0, 1]));
    for key in ["tau", "distance_sq", "objective"] {
        assert!(sidecar[key].is_number(), "missing {key}");
    }
}

#[test]
fn convex_only_ignores_k() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[0.5, 0.4, 0.3, -0.2]);
    let output = dir.path().join("out.csv");
    let out = run(&[
        "project", "--input", &input, "--set", "simplex", "--k", "1", "--lambda", "1", "--convex-only", "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let beta = read_vector(&output);
    // threshold 0.2/3 over the three leading entries
    let tau = 0.2 / 3.0;
    for (a, b) in beta.iter().zip([0.5 - tau, 0.4 - tau, 0.3 - tau, 0.0]) {
        assert!((a - b).abs() < 1e-12, "{beta:?}");
    }
}

#[test]
fn negative_level_on_hyperplane() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[1.0, -2.0, 0.5]);
    let output = dir.path().join("out.csv");
    let out = run(&["project", "--input", &input, "--set", "hyperplane", "--k", "1", "--lambda", "-1", "--output", output.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_vector(&output), vec![0.0, -1.0, 0.0]);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[0.5, 0.4]);
    let output = dir.path().join("out.csv");
    let o = output.to_str().unwrap();
    assert_eq!(code(&run(&["project", "--input", &input, "--set", "simplex", "--k", "1", "--output", o])), 2);
    let infeasible = run(&["project", "--input", &input, "--set", "simplex", "--k", "1", "--lambda", "0", "--output", o]);
    assert_eq!(code(&infeasible), 2);
    assert!(!String::from_utf8_lossy(&infeasible.stderr).is_empty());
    assert_eq!(code(&run(&["project", "--input", &input, "--set", "simplex", "--k", "5", "--lambda", "1", "--output", o])), 2);
    assert_eq!(code(&run(&["project", "--input", "/nonexistent/w.csv", "--set", "simplex", "--k", "1", "--lambda", "1", "--output", o])), 2);
    assert_eq!(code(&run(&["quantum", "--qubits", "9", "--trials", "1"])), 2);
    assert!(!output.exists());
}

#[test]
fn bad_input_value_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.csv");
    fs::write(&input, "1.0\nabc\n").unwrap();
    let out = run(&["project", "--input", input.to_str().unwrap(), "--set", "simplex", "--k", "1", "--lambda", "1", "--output", dir.path().join("o.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_agrees_with_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[1.2, -0.7, 3.1, 0.0, 2.2, -1.5]);
    let report = dir.path().join("oracle.json");
    let out = run(&["oracle", "--input", &input, "--set", "hyperplane", "--k", "3", "--lambda", "0.5", "--output", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["agrees"], serde_json::json!(true));
    assert_eq!(v["enumerated"], serde_json::json!("20"));
    let over = run(&["oracle", "--input", &input, "--set", "hyperplane", "--k", "3", "--lambda", "0.5", "--budget", "5"]);
    assert_eq!(code(&over), 2);
}

#[test]
fn selftest_quick_mode_passes() {
    let out = run(&["selftest", "--trials", "10"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 3, "{text}");
}

#[test]
fn selftest_reports_injected_fault() {
    let out = run(&["selftest", "--trials", "200", "--inject-fault"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("counterexample"));
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[0.5, 0.4, 0.3, -0.2]);
    let output = dir.path().join("out.csv");
    let config = dir.path().join("run.conf");
    fs::write(&config, format!("# defaults\ninput = {input}\nset = simplex\nk = 1\nlambda = 1\n")).unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "project", "--k", "2", "--output", output.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_vector(&output).iter().filter(|v| **v != 0.0).count(), 2);
}

#[test]
fn experiment_output_is_deterministic_without_timing() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let path = dir.path().join(name);
        let out = bin()
            .args([
                "--seed", "11", "portfolio", "--p", "60", "--k", "5", "--m-fractions", "0.5,0.8", "--trials", "3", "--no-timing",
                "--output", path.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert_eq!(text.lines().count(), 2 * 3 * 2);
    assert!(!text.contains("wall_ms"));
}

#[test]
fn pivot_table_written() {
    let dir = tempfile::tempdir().unwrap();
    let pivot = dir.path().join("pivot.csv");
    let out = run(&[
        "bench", "--dims", "1000,2000", "--k", "10", "--repeats", "3", "--output", dir.path().join("b.jsonl").to_str().unwrap(),
        "--pivot", pivot.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(&pivot).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().next().unwrap().contains("gshp"));
}

#[test]
fn atomic_writes_leave_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_vector(dir.path(), &[3.0, 1.0, 2.0]);
    let output = dir.path().join("out.csv");
    fs::write(&output, "stale\n").unwrap();
    let out = run(&["project", "--input", &input, "--set", "hyperplane", "--k", "2", "--lambda", "0", "--output", output.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let mut names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["out.csv", "out.csv.json", "w.csv"]);
    assert_eq!(read_vector(&output), vec![1.0, -1.0, 0.0]);
}
