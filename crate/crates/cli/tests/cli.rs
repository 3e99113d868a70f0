use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantgam")).args(args).output().expect("spawn quantgam")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<String> {
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"));
    rows.iter().map(|r| r[j].clone()).collect()
}

fn floats(v: &[String]) -> Vec<f64> {
    v.iter().map(|s| s.parse().unwrap()).collect()
}

/// Training data with a smooth in `x` and a two-level factor `g`.
fn write_training(path: &Path, n: usize) {
    let mut s = String::from("x,g,y\n");
    for i in 0..n {
        let x = 2.0 * i as f64 / (n - 1) as f64;
        let g = if i % 2 == 0 { "a" } else { "b" };
        let shift = if g == "a" { 0.0 } else { 0.5 };
        let noise = 0.3 * (((i * 7919) % 211) as f64 / 211.0 - 0.5);
        s.push_str(&format!("{x},{g},{}\n", (3.0 * x).sin() + shift + noise));
    }
    fs::write(path, s).unwrap();
}

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    model: PathBuf,
    fit: Output,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("train.csv");
        let model = dir.path().join("model.json");
        write_training(&data, 300);
        let fit = run(&[
            "fit", "--formula", "y ~ s(x) + g", "--data", p(&data), "--qu", "0.1,0.5,0.9",
            "--factors", "g", "--out", p(&model),
        ]);
        Fixture { _dir: dir, data, model, fit }
    })
}

#[test]
fn fit_with_three_levels_stores_three_models() {
    let f = fixture();
    assert_eq!(code(&f.fit), 0, "{}", stderr(&f.fit));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f.model).unwrap()).unwrap();
    let taus: Vec<f64> = json["models"].as_array().unwrap().iter().map(|m| m["tau"].as_f64().unwrap()).collect();
    assert_eq!(taus, vec![0.1, 0.5, 0.9]);
}

#[test]
fn predict_at_level_zero_collapses_interval() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("pred.csv");
    let o = run(&["predict", "--model", p(&f.model), "--data", p(&f.data), "--level", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_csv(&out);
    assert_eq!(h, ["row_id", "tau", "fit", "se", "lo", "hi", "clamped_flag"]);
    assert_eq!(rows.len(), 900);
    let (fit, lo, hi) = (column(&h, &rows, "fit"), column(&h, &rows, "lo"), column(&h, &rows, "hi"));
    assert_eq!(fit, lo);
    assert_eq!(fit, hi);
}

#[test]
fn predict_interval_widens_with_level() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(code(&run(&["predict", "--model", p(&f.model), "--data", p(&f.data), "--level", "0.5", "--out", p(&a)])), 0);
    assert_eq!(code(&run(&["predict", "--model", p(&f.model), "--data", p(&f.data), "--level", "0.99", "--out", p(&b)])), 0);
    let (ha, ra) = read_csv(&a);
    let (hb, rb) = read_csv(&b);
    let wa: Vec<f64> = floats(&column(&ha, &ra, "hi")).iter().zip(floats(&column(&ha, &ra, "lo"))).map(|(h, l)| h - l).collect();
    let wb: Vec<f64> = floats(&column(&hb, &rb, "hi")).iter().zip(floats(&column(&hb, &rb, "lo"))).map(|(h, l)| h - l).collect();
    assert!(wa.iter().zip(&wb).all(|(a, b)| a > &0.0 && b > a));
}

#[test]
fn predict_rejects_level_outside_unit_interval() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = run(&["predict", "--model", p(&f.model), "--data", p(&f.data), "--level", "1", "--out", p(&dir.path().join("p.csv"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unseen_factor_level_reports_row_and_column() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("new.csv");
    fs::write(&data, "x,g,y\n0.5,a,0\n1.0,c,0\n").unwrap();
    let o = run(&["predict", "--model", p(&f.model), "--data", p(&data), "--out", p(&dir.path().join("p.csv"))]);
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(msg.contains("row 2"), "{msg}");
    assert!(msg.contains('g'), "{msg}");
}

#[test]
fn malformed_formula_exits_two() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = run(&["fit", "--formula", "y ~ s(x", "--data", p(&f.data), "--qu", "0.5", "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("formula"));
}

#[test]
fn unsorted_levels_exit_two() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = run(&["fit", "--formula", "y ~ s(x)", "--data", p(&f.data), "--qu", "0.5,0.1", "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_data_file_exits_three() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "fit", "--formula", "y ~ s(x)", "--data", p(&dir.path().join("absent.csv")), "--qu", "0.5",
        "--out", p(&dir.path().join("m.json")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn simulate_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    let paths: Vec<PathBuf> = ["a", "b", "c"].iter().map(|s| dir.path().join(format!("{s}.csv"))).collect();
    for (path, seed) in paths.iter().zip(["7", "7", "8"]) {
        let o = run(&["simulate", "--preset", "heteroNormal", "--n", "50", "--seed", seed, "--out", p(path)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let bytes: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
    let (h, rows) = read_csv(&paths[0]);
    assert_eq!(h, ["x", "y"]);
    assert_eq!(rows.len(), 50);
}

#[test]
fn simulate_rejects_empty_and_unknown_presets() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.csv");
    assert_ne!(code(&run(&["simulate", "--preset", "sine", "--n", "0", "--out", p(&out)])), 0);
    assert_eq!(code(&run(&["simulate", "--preset", "nope", "--n", "10", "--out", p(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn check_writes_report_and_plot_data() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("check.json");
    let o = run(&["check", "--model", p(&f.model), "--data", p(&f.data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("tau = 0.5"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["matches_training_data"], true);
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f.model).unwrap()).unwrap();

    let (h, rows) = read_csv(&dir.path().join("check.plot.csv"));
    let series = column(&h, &rows, "series");
    let taus = floats(&column(&h, &rows, "tau"));
    let ys = column(&h, &rows, "y");
    for (k, m) in model["models"].as_array().unwrap().iter().enumerate() {
        let tau = m["tau"].as_f64().unwrap();
        let pick = |name: &str| (0..rows.len()).filter(|&i| series[i] == name && taus[i] == tau).collect::<Vec<_>>();
        let trace = m["calibration"]["evaluations"].as_array().unwrap().len();
        assert_eq!(pick("calibration").len(), trace);
        assert_eq!(pick("binned_proportion").len(), 10);
        let hist: f64 = pick("bias_histogram").iter().map(|&i| ys[i].parse::<f64>().unwrap()).sum();
        assert_eq!(hist, 300.0);
        assert_eq!(report["reports"][k]["tau"].as_f64().unwrap(), tau);
        assert_eq!(report["reports"][k]["report"]["n"].as_u64().unwrap(), 300);
    }
}

#[test]
fn check_warns_on_different_data() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("other.csv");
    write_training(&data, 120);
    let out = dir.path().join("check.json");
    let o = run(&["check", "--model", p(&f.model), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["matches_training_data"], false);
}

#[test]
fn effects_grid_and_centering() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("eff.csv");
    let o = run(&["effects", "--model", p(&f.model), "--term", "x", "--n", "57", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 3 * 57);
    let taus = floats(&column(&h, &rows, "tau"));
    let effect = floats(&column(&h, &rows, "effect"));
    let x = floats(&column(&h, &rows, "x"));
    assert_eq!(x[0], 0.0);
    assert_eq!(x[56], 2.0);
    for tau in [0.1, 0.5, 0.9] {
        let e: Vec<f64> = (0..rows.len()).filter(|&i| taus[i] == tau).map(|i| effect[i]).collect();
        assert_eq!(e.len(), 57);
        let range = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - e.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        assert!(range > 1.0, "effect range {range}");
        assert!(mean.abs() < 0.1 * range, "mean {mean}, range {range}");
    }
}

#[test]
fn effects_on_parametric_term_fails() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = run(&["effects", "--model", p(&f.model), "--term", "g", "--out", p(&dir.path().join("e.csv"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("not a smooth term"), "{}", stderr(&o));
}

#[test]
fn score_reports_one_row_per_level() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("score.csv");
    let o = run(&["score", "--model", p(&f.model), "--data", p(&f.data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_csv(&out);
    assert_eq!(h, ["tau", "n", "pinball"]);
    assert_eq!(rows.len(), 3);
    let loss = floats(&column(&h, &rows, "pinball"));
    assert!(loss.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn score_without_response_exits_three() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("noy.csv");
    fs::write(&data, "x,g\n0.5,a\n1.0,b\n").unwrap();
    let o = run(&["score", "--model", p(&f.model), "--data", p(&data), "--out", p(&dir.path().join("s.csv"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn corrupt_model_file_exits_three() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("bad.json");
    fs::write(&model, "{\"schema_version\": 1").unwrap();
    let o = run(&["predict", "--model", p(&model), "--data", p(&f.data), "--out", p(&dir.path().join("p.csv"))]);
    assert_eq!(code(&o), 3);
}
