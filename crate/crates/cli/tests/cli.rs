use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikemix::io::{read_cooccurrence_csv, read_trace_file, ClusteringFile, Dataset};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spikemix"));
    c.env_remove("SPIKEMIX_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    assert_eq!(line.trim_end().lines().count(), 1, "stderr: {line}");
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("json error line");
    v["error"]["kind"].as_str().unwrap().to_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    /// Small dataset: `n_per_type` series per type, 40 post-onset bins.
    fn dataset(&self, n_per_type: usize) -> PathBuf {
        let cfg = self.write(
            "sim.json",
            &format!(r#"{{"n_per_type": {n_per_type}, "pre_bins": 20, "post_bins": 40, "early_bins": 10}}"#),
        );
        let out = self.path("data.json");
        let o = run(&["simulate", "--config", p(&cfg), "--out", p(&out), "--seed", "3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn small_config(&self, iterations: usize) -> PathBuf {
        self.write(
            "run.json",
            &format!(r#"{{"iterations": {iterations}, "burn_in": 0, "particles": 8, "csmc_rounds": 1, "m": 2}}"#),
        )
    }
}

#[test]
fn simulate_default_dataset_shape() {
    let f = Fixture::new();
    let out = f.path("d.json");
    assert!(run(&["simulate", "--out", p(&out)]).status.success());
    let ds = Dataset::read(&out).unwrap();
    assert_eq!(ds.series.len(), 25);
    assert!(ds.series.iter().all(|s| s.counts.len() == 400));
    let truth = ds.truth.unwrap();
    for k in 1..=5 {
        assert_eq!(truth.iter().filter(|&&t| t == k).count(), 5);
    }
}

#[test]
fn simulate_one_per_type_and_bad_rates() {
    let f = Fixture::new();
    let cfg = f.write("one.json", r#"{"n_per_type": 1}"#);
    let out = f.path("d.json");
    assert!(run(&["simulate", "--config", p(&cfg), "--out", p(&out)]).status.success());
    assert_eq!(Dataset::read(&out).unwrap().series.len(), 5);

    let bad = f.write("bad.json", r#"{"rate_lo": 20, "rate_hi": 15}"#);
    let o = run(&["simulate", "--config", p(&bad), "--out", p(&f.path("x.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "config");
}

#[test]
fn simulate_unwritable_path_fails() {
    let f = Fixture::new();
    let out = f.path("missing_dir/d.json");
    let o = run(&["simulate", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infer_writes_one_record_per_iteration_deterministically() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let cfg = f.small_config(2);
    let a = f.path("a.ndjson");
    let b = f.path("b.ndjson");
    for (out, workers) in [(&a, "1"), (&b, "2")] {
        let o = run(&["infer", "--data", p(&data), "--config", p(&cfg), "--out", p(out), "--seed", "5", "--workers", workers]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let samples = read_trace_file(&a).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn infer_single_series_has_one_cluster() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let mut ds = Dataset::read(&data).unwrap();
    ds.series.truncate(1);
    ds.truth = None;
    let one = f.path("one.json");
    ds.write(&one).unwrap();
    let out = f.path("t.ndjson");
    let o = run(&["infer", "--data", p(&one), "--config", p(&f.small_config(4)), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["K"], 1);
    }
}

#[test]
fn infer_config_errors() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let out = f.path("t.ndjson");
    let unknown = f.write("u.json", r#"{"iterations": 2, "bogus": true}"#);
    let o = run(&["infer", "--data", p(&data), "--config", p(&unknown), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "config");

    let domain = f.write("d.json", r#"{"iterations": 2, "domain": "trial"}"#);
    let o = run(&["infer", "--data", p(&data), "--config", p(&domain), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let broken = f.write("broken.json", "{\n  \"schema_version\": 1,\n  \"series\": [\n");
    let o = run(&["infer", "--data", p(&broken), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    let o = run(&["infer", "--data", p(&data), "--out", p(&out), "--workers", "0"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["infer", "--nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "usage");
}

#[test]
fn workers_env_var_is_accepted() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let out = f.path("t.ndjson");
    let o = bin()
        .args(["infer", "--data", p(&data), "--config", p(&f.small_config(1)), "--out", p(&out)])
        .env("SPIKEMIX_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = bin().args(["infer", "--data", p(&data), "--out", p(&out)]).env("SPIKEMIX_WORKERS", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn select_outputs_round_trip() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let trace = f.path("t.ndjson");
    assert!(run(&["infer", "--data", p(&data), "--config", p(&f.small_config(6)), "--out", p(&trace)]).status.success());
    let out = f.path("sel.json");
    let o = run(&["select", "--trace", p(&trace), "--burnin", "2", "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let sel = ClusteringFile::read(&out).unwrap();
    let ds = Dataset::read(&data).unwrap();
    assert_eq!(sel.series_ids, ds.ids());
    assert_eq!(sel.n_clusters, sel.selection.params.len());
    assert!(sel.selection.source_iter > 2);

    let (ids, m) = read_cooccurrence_csv(std::fs::File::open(f.path("sel.csv")).unwrap()).unwrap();
    assert_eq!(ids, ds.ids());
    m.validate().unwrap();
    for i in 0..m.n() {
        assert_eq!(m.get(i, i), 1.0);
    }
}

#[test]
fn select_single_record_is_echoed() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let trace = f.path("t.ndjson");
    assert!(run(&["infer", "--data", p(&data), "--config", p(&f.small_config(1)), "--out", p(&trace)]).status.success());
    let out = f.path("sel.json");
    let csv = f.path("m.csv");
    let o = run(&["select", "--trace", p(&trace), "--burnin", "0", "--out", p(&out), "--cooccurrence", p(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sample = &read_trace_file(&trace).unwrap()[0];
    let sel = ClusteringFile::read(&out).unwrap();
    assert_eq!(sel.selection.assignments, sample.state.assignments);
    assert_eq!(sel.selection.params, sample.state.params);
    assert_eq!(sel.series_ids, (0..5).map(|i| i.to_string()).collect::<Vec<_>>());
    assert!(csv.exists());

    let o = run(&["select", "--trace", p(&trace), "--burnin", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_variance_shape_and_fixed_stream() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let out = f.path("v.csv");
    let args = |extra: &[&str]| {
        let mut a = vec![
            "bench-variance", "--data", p(&data), "--grid-mu", "1", "--grid-logpsi", "-4", "--reps", "2",
            "--bpf-particles", "32", "--csmc-particles", "16", "--out", p(&out),
        ];
        a.extend_from_slice(extra);
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    assert!(bin().args(args(&[])).output().unwrap().status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);

    assert!(bin().args(args(&["--fixed-stream"])).output().unwrap().status.success());
    let mut r = csv::Reader::from_path(&out).unwrap();
    let vi = r.headers().unwrap().iter().position(|h| h == "variance").unwrap();
    for rec in r.records() {
        assert_eq!(rec.unwrap()[vi].parse::<f64>().unwrap(), 0.0);
    }

    assert!(bin().args(args(&["--method", "csmc"])).output().unwrap().status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);

    let o = bin().args(args(&["--reps", "1"])).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_loglik_prints_value() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let o = run(&["oracle-loglik", "--data", p(&data), "--series", "2", "--mu", "0", "--log-psi", "-6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!(v.is_finite() && v < 0.0);

    let o = run(&["oracle-loglik", "--data", p(&data), "--series", "9", "--mu", "0", "--log-psi", "-6"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grid_point_floor_is_a_config_error() {
    let f = Fixture::new();
    let data = f.dataset(1);
    let o = run(&["oracle-loglik", "--data", p(&data), "--mu", "0", "--log-psi", "-6", "--grid-points", "50"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_kind(&o), "config");
}
