//! End-to-end runs: determinism, and summaries that recompute from the artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use csample::experiments::config::{load_config, BenchConfig, DeblurConfig, EmFitConfig, OnedConfig};
use csample::experiments::{
    builtin_phantom, read_samples_csv, run_deblur_experiment, run_em_fit, run_oned_benchmark, run_speedup_benchmark,
    total_variation, weighted_histogram, RunContext,
};
use csample::image::ImageGrid;
use csample::scheduler::{predict_cost, CostModelInput};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_oned() -> OnedConfig {
    let mut cfg: OnedConfig = load_config(configs().join("oned.json"), "oned").unwrap();
    cfg.prior_size = 400;
    cfg.n_ens = 300;
    cfg.candidates = [3, 6];
    cfg
}

fn ctx(dir: &Path, procs: usize) -> RunContext {
    RunContext { procs: Some(procs), ..RunContext::new(dir) }
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every artifact keyed by name; wall-clock fields are dropped from the summary.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = if name == "summary.json" {
            let mut v = read_json(path.clone());
            v.as_object_mut().unwrap().remove("timings");
            serde_json::to_vec(&v).unwrap()
        } else {
            std::fs::read(&path).unwrap()
        };
        out.insert(name, bytes);
    }
    out
}

#[test]
fn oned_runs_are_byte_identical_across_repeats_and_workers() {
    let cfg = small_oned();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, procs) in dirs.iter().zip([1, 1, 3]) {
        run_oned_benchmark(&cfg, &ctx(d.path(), procs)).unwrap();
    }
    let a = artifacts(dirs[0].path());
    assert!(a.contains_key("samples_mc_hmc.csv"));
    assert_eq!(a, artifacts(dirs[1].path()));
    assert_eq!(a, artifacts(dirs[2].path()));
}

#[test]
fn oned_summary_recomputes_from_artifacts() {
    let cfg = small_oned();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_oned_benchmark(&cfg, &ctx(dir.path(), 1)).unwrap();
    assert!(summary.errors.is_empty());

    let mut hist = csv::Reader::from_path(dir.path().join("histogram.csv")).unwrap();
    let reference: Vec<f64> = hist.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    for name in ["serial_gaussian", "serial_hmc", "mc_gaussian", "mc_hmc"] {
        let ens = read_samples_csv(dir.path().join(format!("samples_{name}.csv"))).unwrap();
        let tv = total_variation(&weighted_histogram(&ens, &cfg.histogram).unwrap(), &reference);
        let reported = summary.metrics[&format!("tv_{name}")];
        assert!((tv - reported).abs() < 1e-12, "{name}: {tv} vs {reported}");
    }

    let mut rows = csv::Reader::from_path(dir.path().join("acceptance.csv")).unwrap();
    let mut seen = 0;
    for r in rows.records() {
        let r = r.unwrap();
        if r[1] == *"all" || r[1] == *"serial" {
            let made: f64 = r[3].parse().unwrap();
            let acc: f64 = r[4].parse().unwrap();
            let reported = summary.acceptance[&r[0]].aggregate;
            assert!((acc / made - reported).abs() < 1e-12, "{}", &r[0]);
            seen += 1;
        }
    }
    assert_eq!(seen, 4);

    let on_disk = read_json(dir.path().join("summary.json"));
    for name in &summary.manifest {
        assert!(dir.path().join(name).exists(), "{name} listed but missing");
    }
    assert_eq!(on_disk["n_c_selected"].as_u64(), summary.n_c_selected.map(|n| n as u64));
}

#[test]
fn deblur_hmc_accepts_far_more_than_random_walk() {
    let mut cfg: DeblurConfig = load_config(configs().join("deblur.json"), "deblur").unwrap();
    cfg.tikhonov.n_alpha = 5;
    let dir = tempfile::tempdir().unwrap();
    let c = RunContext { config_dir: configs(), ..RunContext::new(dir.path()) };
    let s = run_deblur_experiment(&cfg, &c).unwrap();
    let gap = s.acceptance["hmc"].aggregate - s.acceptance["gaussian"].aggregate;
    assert!(gap >= 0.25, "acceptance gap {gap}");
    for f in ["true.pgm", "noisy.pgm", "hmc_mean.pgm", "tikhonov.pgm", "lcurve.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn bench_rows_match_cost_model() {
    let mut cfg: BenchConfig = load_config(configs().join("bench.json"), "bench").unwrap();
    cfg.oned = small_oned();
    cfg.p_values = vec![1, 2];
    cfg.repetitions = 1;
    let dir = tempfile::tempdir().unwrap();
    run_speedup_benchmark(&cfg, &RunContext::new(dir.path())).unwrap();

    let model = read_json(dir.path().join("cost_model.json"));
    let input: CostModelInput = serde_json::from_value(model["input"].clone()).unwrap();
    let mut rows = csv::Reader::from_path(dir.path().join("speedup.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        rows.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[0][2], rows[0][3]), (1.0, 1.0, 1.0));
    for row in &rows {
        let pred = predict_cost(&CostModelInput { p: row[0] as usize, ..input.clone() }).unwrap();
        assert_eq!(row[4], pred.speedup);
        assert_eq!(row[5], pred.efficiency);
    }
}

#[test]
fn em_fit_history_is_monotone() {
    let mut cfg: EmFitConfig = load_config(configs().join("em-fit.json"), "em-fit").unwrap();
    cfg.generate = 500;
    cfg.candidates = [2, 5];
    let dir = tempfile::tempdir().unwrap();
    let s = run_em_fit(&cfg, &RunContext::new(dir.path())).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("em_history.csv")).unwrap();
    let ll: Vec<f64> = r.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert!(!ll.is_empty());
    for w in ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    assert!((ll.last().unwrap() - s.metrics["log_likelihood"]).abs() < 1e-9 * ll.last().unwrap().abs());
}

#[test]
fn shipped_phantom_matches_builtin() {
    let img = ImageGrid::read_pgm(configs().join("phantom32.pgm")).unwrap();
    let built = builtin_phantom();
    assert_eq!((img.rows(), img.cols()), (built.rows(), built.cols()));
    for (a, b) in img.pixels().iter().zip(built.pixels()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn shipped_configs_parse() {
    load_config::<OnedConfig>(configs().join("oned.json"), "oned").unwrap();
    load_config::<DeblurConfig>(configs().join("deblur.json"), "deblur").unwrap();
    load_config::<DeblurConfig>(configs().join("tikhonov.json"), "tikhonov").unwrap();
    load_config::<BenchConfig>(configs().join("bench.json"), "bench").unwrap();
    load_config::<EmFitConfig>(configs().join("em-fit.json"), "em-fit").unwrap();
    assert!(load_config::<OnedConfig>(configs().join("deblur.json"), "oned").is_err());
}
