use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use diffmerge::eval::{DatasetKind, ToyDataset};
use diffmerge::likelihood::std_normal_logpdf;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffmerge"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn diffmerge")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_DATA: &str = "[dataset.toy]\nn_train = 2000\nn_test = 100\n";

fn train_pair(dir: &Path) {
    let cfg = format!("{SMALL_DATA}[train]\nsteps = 200\nhidden = [16, 16]\n");
    write(dir, "train.toml", &cfg);
    let a = run(dir, &["--config", "train.toml", "--out", "lik", "train"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(dir, &["--config", "train.toml", "--out", "qual", "train", "--weighting", "simple-high-noise"]);
    assert!(b.status.success(), "{}", stderr(&b));
}

fn sweep_config(dir: &Path) {
    let cfg = format!(
        "{SMALL_DATA}
[model]
quality = \"qual/checkpoint.dmck\"
likelihood = \"lik/checkpoint.dmck\"

[sweep]
n_samples = 100
n_test = 40
vlb_mc_t = 2
[sweep.stochastic]
method = \"ancestral\"
fixed_steps = 16
"
    );
    write(dir, "sweep.toml", &cfg);
}

#[test]
fn verify_passes_and_fault_injection_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["verify"]);
    assert!(ok.status.success(), "{}{}", stdout(&ok), stderr(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.starts_with("PASS")).count(), 7);

    let bad = run(dir.path(), &["verify", "--inject-fault", "flip-gamma-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL schedule monotonicity"), "{}", stdout(&bad));
}

#[test]
fn verify_writes_report_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--out", "v"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("v/verify.json")).unwrap()).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 7);
    assert!(dir.path().join("v/resolved_config.toml").exists());
    assert!(!dir.path().join("v/.lock").exists());
}

#[test]
fn unit_gaussian_quick_train_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    // bit_depth is rejected for continuous kinds.
    let cfg = "[dataset.toy]\nkind = \"unit-gaussian\"\nbit_depth = 2\n";
    write(dir.path(), "bad.toml", cfg);
    assert_eq!(run(dir.path(), &["--config", "bad.toml", "train"]).status.code(), Some(2));

    let cfg = "[dataset.toy]\nkind = \"unit-gaussian\"\n[train]\nsteps = 3000\nhidden = [64, 64]\n";
    write(dir.path(), "c.toml", cfg);
    let start = Instant::now();
    let a = run(dir.path(), &["--config", "c.toml", "--out", "a", "--seed", "3", "train"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(start.elapsed().as_secs() < 120);
    let b = run(dir.path(), &["--config", "c.toml", "--out", "b", "--seed", "3", "--threads", "1", "train"]);
    assert!(b.status.success(), "{}", stderr(&b));
    for f in ["checkpoint.dmck", "train_log.csv", "train_summary.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between same-seed runs");
    }
    let resolved = std::fs::read_to_string(dir.path().join("a/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"), "{resolved}");
}

#[test]
fn missing_dataset_path_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[dataset]\npath = \"nowhere.json\"\n");
    let o = run(dir.path(), &["--config", "c.toml", "train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.json"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[train]\nstepz = 5\n");
    let o = run(dir.path(), &["--config", "c.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn empty_sample_dump() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[model.analytic]\ndim = 2\n");
    let o = run(dir.path(), &["--config", "c.toml", "--out", "s", "sample", "--n", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = dir.path().join("s");
    assert_eq!(std::fs::metadata(s.join("samples.bin")).unwrap().len(), 0);
    assert_eq!(std::fs::read_to_string(s.join("samples.csv")).unwrap().trim(), "z0,z1");
    let line = std::fs::read_to_string(s.join("sample_summary.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["n"], 0);
    assert!(v["nfe_mean"].is_number() && v["nfe_max"].is_number() && v["seed"].is_number());
}

#[test]
fn sample_dump_binary_matches_csv() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[model.analytic]\ndim = 2\n");
    let o = run(dir.path(), &["--config", "c.toml", "--out", "s", "sample", "--n", "7", "--method", "euler-maruyama"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("s/samples.bin")).unwrap();
    let bin: Vec<f64> = bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut rdr = csv::Reader::from_path(dir.path().join("s/samples.csv")).unwrap();
    let csv: Vec<f64> = rdr.records().flat_map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect::<Vec<f64>>()).collect();
    assert_eq!(bin.len(), 14);
    assert_eq!(bin, csv);
    let v: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(dir.path().join("s/sample_summary.jsonl")).unwrap().trim(),
    )
    .unwrap();
    assert_eq!(v["method"], "euler-maruyama");
    assert_eq!(v["nfe_max"], 256);
}

#[test]
fn merged_sampling_rejects_eta_outside_bounds() {
    let dir = tempfile::tempdir().unwrap();
    train_pair(dir.path());
    sweep_config(dir.path());
    let o = run(dir.path(), &["--config", "sweep.toml", "--out", "s", "sample", "--n", "3", "--eta", "0.95"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("eta_min") && e.contains("eta_max"), "{e}");
    let ok = run(dir.path(), &["--config", "sweep.toml", "--out", "s", "sample", "--n", "3", "--eta", "0.5"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn analytic_oracle_nll_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[dataset.toy]\nkind = \"unit-gaussian\"\nn_test = 25\n[model.analytic]\ndim = 2\n");
    let o = run(dir.path(), &["--config", "c.toml", "--out", "n", "nll", "--divergence", "exact"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ds = ToyDataset { kind: DatasetKind::UnitGaussian, n_test: 25, ..ToyDataset::default() };
    let splits = ds.generate().unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("n/nll_ode-elbo.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 25);
    for (i, r) in rows.iter().enumerate() {
        let nats: f64 = r[1].parse().unwrap();
        let want = -std_normal_logpdf(&splits.test[2 * i..2 * i + 2]);
        assert!((nats - want).abs() / 2.0 < 1e-3, "datum {i}: {nats} vs {want}");
    }
}

const MIXTURE_MODEL: &str = "[dataset.toy]
kind = \"gmm\"
n_test = 10

[model.analytic]
dim = 2
mixture = { weights = [0.5, 0.5], means = [[-0.6, 0.4], [0.6, -0.2]], variances = [0.05, 0.1] }
";

fn nll_column(path: &Path) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect()
}

#[test]
fn nll_emits_both_bounds_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", MIXTURE_MODEL);
    let o = run(dir.path(), &["--config", "c.toml", "--out", "b", "nll", "--bound", "both"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = dir.path().join("b");
    assert_eq!(nll_column(&b.join("nll_ode-elbo.csv")).len(), 10);
    assert_eq!(nll_column(&b.join("nll_vlb.csv")).len(), 10);
    let summary = std::fs::read_to_string(b.join("nll.jsonl")).unwrap();
    let bounds: Vec<String> = summary
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["bound"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(bounds, ["ode-elbo", "vlb"]);

    let v = run(dir.path(), &["--config", "c.toml", "--out", "v", "nll", "--bound", "vlb"]);
    assert!(v.status.success());
    assert!(!dir.path().join("v/nll_ode-elbo.csv").exists());
}

#[test]
fn divergence_switch_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", MIXTURE_MODEL);
    let e = run(dir.path(), &["--config", "c.toml", "--out", "e", "nll", "--divergence", "exact"]);
    let h = run(dir.path(), &["--config", "c.toml", "--out", "h", "nll", "--divergence", "hutchinson", "--probes", "1"]);
    assert!(e.status.success() && h.status.success());
    let exact = nll_column(&dir.path().join("e/nll_ode-elbo.csv"));
    let hutch = nll_column(&dir.path().join("h/nll_ode-elbo.csv"));
    assert!(exact.iter().zip(&hutch).any(|(a, b)| a != b));
    let re = std::fs::read_to_string(dir.path().join("e/resolved_config.toml")).unwrap();
    let rh = std::fs::read_to_string(dir.path().join("h/resolved_config.toml")).unwrap();
    assert!(re.contains("mode = \"exact\""), "{re}");
    assert!(rh.contains("mode = \"hutchinson\""), "{rh}");
}

#[test]
fn sweep_default_grid_resume_and_plot_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_pair(d);
    sweep_config(d);
    let first = run(d, &["--config", "sweep.toml", "--out", "sw", "sweep"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let sw = d.join("sw");
    assert!(!std::fs::read_to_string(sw.join("report.jsonl")).unwrap().contains("\"error\":\""));
    let report = std::fs::read_to_string(sw.join("report.csv")).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 12, "{header:?}");
    assert_eq!(header[1], "quality");
    assert_eq!(header[12], "likelihood");

    for f in ["plot_nll.csv", "plot_quality.csv"] {
        let mut rdr = csv::Reader::from_path(sw.join(f)).unwrap();
        let headers = rdr.headers().unwrap().clone();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 10, "{f}");
        for r in &rows {
            assert_eq!(r.len(), headers.len());
            for (h, v) in headers.iter().zip(r.iter()) {
                assert!(h == "unit" || v.parse::<f64>().is_ok(), "{f}: {h} = {v}");
            }
        }
    }

    // Drop the last four columns and a partial line, as an interrupted run would leave.
    let jsonl = std::fs::read_to_string(sw.join("report.jsonl")).unwrap();
    let kept: Vec<&str> = jsonl.lines().take(8).collect();
    std::fs::write(sw.join("report.jsonl"), kept.join("\n") + "\n{\"label\": \"eta=0.").unwrap();
    let again = run(d, &["--config", "sweep.toml", "--out", "sw", "sweep"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stderr(&again).contains("8 columns already complete"), "{}", stderr(&again));
    assert_eq!(std::fs::read_to_string(sw.join("report.csv")).unwrap(), report);
    assert_eq!(std::fs::read_to_string(sw.join("report.jsonl")).unwrap(), jsonl);

    let other = run(d, &["--config", "sweep.toml", "--out", "sw", "--seed", "9", "sweep"]);
    assert_eq!(other.status.code(), Some(2), "{}", stderr(&other));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("o")).unwrap();
    std::fs::write(dir.path().join("o/.lock"), "1").unwrap();
    write(dir.path(), "c.toml", "[model.analytic]\ndim = 2\n");
    let o = run(dir.path(), &["--config", "c.toml", "--out", "o", "sample", "--n", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}
