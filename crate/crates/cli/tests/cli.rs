use std::path::Path;
use std::process::{Command, Output};

use dwm_core::binary::LinkKind;
use dwm_core::data::{self, ColumnMap, ColumnSubset};
use dwm_core::inference::MeanMode;
use dwm_core::pipeline::{self, MeanModel, PipelineSpec, ProbModel};
use dwm_core::weights::Variant;
use serde_json::Value;

fn dwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwm")).args(args).output().expect("binary runs")
}

// Small deterministic fixture; values come from a fixed linear congruential sequence.
fn write_fixture(path: &Path) {
    let mut state: u64 = 12345;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut s = String::from("y,w,x1,x2\n");
    for _ in 0..300 {
        let x1 = next() * 2.0 - 1.0;
        let x2 = next() * 2.0;
        let w = u8::from(next() < 1.0 / (1.0 + (-(0.2 + 0.9 * x1 - 0.3 * x2)).exp()));
        let obs = next() < 1.0 / (1.0 + (-(0.8 - 0.6 * x1 + 0.3 * f64::from(w))).exp());
        let y = 1.0 + x1 + 0.5 * x2 + 2.0 * f64::from(w) + (next() - 0.5);
        if obs {
            s.push_str(&format!("{y},{w},{x1},{x2}\n"));
        } else {
            s.push_str(&format!("NA,{w},{x1},{x2}\n"));
        }
    }
    std::fs::write(path, s).unwrap();
}

fn estimate_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "estimate", "--data", data, "--outcome", "y", "--treatment", "w", "--covariates", "x1,x2", "--se",
        "misspecified-mean", "--out", out,
    ]
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn estimate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let out = dir.path().join("o.json");
    write_fixture(&data);
    let res = dwm(&estimate_args(data.to_str().unwrap(), out.to_str().unwrap()));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let json: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["command"], "estimate");

    let map = ColumnMap {
        outcome: "y".into(),
        treatment: "w".into(),
        observed: None,
        covariates: vec!["x1".into(), "x2".into()],
        levels: None,
    };
    let ds = data::load_csv(&data, &map, "NA").unwrap();
    let spec = PipelineSpec {
        propensity: ProbModel::new(LinkKind::Logit, ColumnSubset::All),
        missingness: ProbModel::new(LinkKind::Logit, ColumnSubset::All),
        variants: Variant::ALL.to_vec(),
        mean: Some(MeanModel::LeastSquares),
        pooled: false,
        mean_mode: Some(MeanMode::MisspecifiedMean),
        quantiles: None,
        rif: Default::default(),
        trim: None,
        ci_level: 0.95,
    };
    let lib = pipeline::run_pipeline(&ds, &spec, None).unwrap();
    let variants = json["results"]["estimates"]["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 3);
    for (v, l) in variants.iter().zip(&lib.variants) {
        let ate = l.ate.as_ref().unwrap();
        let point = v["ate"]["point"][0].as_f64().unwrap();
        let se = v["ate"]["se"][0].as_f64().unwrap();
        assert!((point - ate.value()).abs() < 1e-12, "{point} vs {}", ate.value());
        assert!((se - ate.se.as_ref().unwrap()[0]).abs() < 1e-12);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_fixture(&data);
    let out = dir.path().join("o.json");
    let mut args = estimate_args(data.to_str().unwrap(), out.to_str().unwrap());
    args[10] = "bootstrap";
    args.extend(["--bootstrap-reps", "30", "--seed", "4", "--taus", "0.5"]);
    assert!(dwm(&args).status.success());
    let first = std::fs::read(&out).unwrap();
    let mut threaded = vec!["--threads", "2"];
    threaded.extend(&args);
    assert!(dwm(&threaded).status.success());
    let second = std::fs::read(&out).unwrap();
    let strip = |b: &[u8]| {
        let mut v: Value = serde_json::from_slice(b).unwrap();
        v["config"]["threads"] = Value::Null;
        v
    };
    assert_eq!(strip(&first)["results"], strip(&second)["results"]);
    assert!(dwm(&args).status.success());
    assert_eq!(first, std::fs::read(&out).unwrap());
}

#[test]
fn malformed_csv_exits_with_schema_code_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "y,w,x1,x2\n1.0,1,0.3,0.1\n2.0,7,abc,0.2\n").unwrap();
    let out = dir.path().join("o.json");
    let res = dwm(&estimate_args(data.to_str().unwrap(), out.to_str().unwrap()));
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(error_json(&res)["error"]["exit_code"], 3);
    assert!(!out.exists());
}

#[test]
fn unknown_scenario_lists_registry() {
    let dir = tempfile::tempdir().unwrap();
    let sims = dir.path().join("s.csv");
    let summary = dir.path().join("m.json");
    let res = dwm(&[
        "simulate", "--scenario", "ate-case9", "--sims", sims.to_str().unwrap(), "--summary",
        summary.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let msg = error_json(&res)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("ate-case1") && msg.contains("qte-case3"), "{msg}");
    assert!(!sims.exists() && !summary.exists());
}

#[test]
fn small_simulation_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sims = dir.path().join("s.csv");
    let summary = dir.path().join("m.json");
    let curves = dir.path().join("c.csv");
    let res = dwm(&[
        "simulate", "--scenario", "qte-case1", "--n", "300", "--reps", "3", "--population", "20000", "--seed", "1",
        "--taus", "0.5", "--curve-tau", "0.5", "--sims", sims.to_str().unwrap(), "--summary",
        summary.to_str().unwrap(), "--curves", curves.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let header = std::fs::read_to_string(&sims).unwrap();
    assert!(header.starts_with("rep,variant,estimand,tau,value"));
    let c = std::fs::read_to_string(&curves).unwrap();
    assert!(c.starts_with("x1,truth,unweighted,ps_weighted,d_weighted"));
    assert_eq!(c.lines().count(), 26);
    let json: Value = serde_json::from_slice(&std::fs::read(&summary).unwrap()).unwrap();
    assert_eq!(json["command"], "simulate");
}

#[test]
fn diagnose_rejects_mismatched_series() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, r#"{"key":{"scenario":"ate-case1","n":100,"reps":3,"seed":1},"label":"d_weighted","values":[1.0,2.0,3.0]}"#).unwrap();
    std::fs::write(&b, r#"{"key":{"scenario":"ate-case1","n":200,"reps":3,"seed":1},"label":"unweighted","values":[1.0,2.0,3.0]}"#).unwrap();
    let res = dwm(&["diagnose", "--series", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}
