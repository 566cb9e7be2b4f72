use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TWO_FREQ: &str = r#"{"kernel":{"dims":[[{"freq":1,"weight":0.5},{"freq":2,"weight":0.5}]]},"grid_size":16,"k":32,"k_list":[16,32],"replicates":2,"seed":3}"#;
const COSINE: &str =
    r#"{"kernel":{"dims":[[{"freq":1,"weight":1.0}]]},"grid_size":16,"k":3,"k_list":[3],"replicates":1}"#;

fn gereach(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gereach"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn reach_with_override_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = gereach(dir.path(), TWO_FREQ, &["reach", "--override", "k=64"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/reach.csv")).unwrap();
    assert!(csv.starts_with("x_index,cot2_local,argmax_y,term1,term2,term3,error_term"));
    assert_eq!(csv.lines().count(), 17);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/reach_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["k"], 64);
    assert_eq!(summary["provenance"]["schema_version"], 1);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = gereach(a.path(), TWO_FREQ, &["converge", "--threads", "1"])
        .status
        .code();
    let y = gereach(b.path(), TWO_FREQ, &["converge", "--threads", "3"])
        .status
        .code();
    assert!(x == y && matches!(x, Some(0 | 1)));
    for f in [
        "converge_records.csv",
        "converge_summary.json",
        "converge_median_err_global.dat",
    ] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn malformed_config_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = gereach(
        dir.path(),
        r#"{"kernel":{"dims":[[{"freq":1,"weight":"half"}]]}}"#,
        &["reach"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("kernel.dims[0][0].weight"));

    let out = gereach(dir.path(), TWO_FREQ, &["reach", "--override", "grid_size=\"many\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("grid_size"));
}

#[test]
fn usage_errors_exit_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_gereach"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
    let dir = tempfile::tempdir().unwrap();
    let out = gereach(dir.path(), TWO_FREQ, &["reach", "--override", "novalue"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn impossible_tolerance_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = gereach(
        dir.path(),
        TWO_FREQ,
        &["converge", "--override", "tolerances.converge_final_rel=0"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("out/converge_summary.json").exists());
}

#[test]
fn coincident_embedding_exits_3() {
    // A single frequency-2 term gives f(x) = f(x + pi), so antipodal grid
    // points share one image on the sphere.
    let dir = tempfile::tempdir().unwrap();
    let out = gereach(
        dir.path(),
        r#"{"kernel":{"dims":[[{"freq":2,"weight":1.0}]]},"grid_size":8,"k":4}"#,
        &["reach"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "numerical");
}

#[test]
fn sample_theory_budget_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gereach(dir.path(), TWO_FREQ, &["sample"]).status.code(), Some(0));
    let bytes = fs::read(dir.path().join("out/batch.grfb")).unwrap();
    let batch = gereach::sampler::read_batch(bytes.as_slice()).unwrap();
    assert_eq!((batch.k(), batch.len(), batch.seed()), (32, 16, 3));

    assert_eq!(gereach(dir.path(), TWO_FREQ, &["theory"]).status.code(), Some(0));
    let t: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/theory_summary.json")).unwrap()).unwrap();
    assert!((t["sigma_c2"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    assert_eq!(gereach(dir.path(), TWO_FREQ, &["budget"]).status.code(), Some(0));
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/budget.json")).unwrap()).unwrap();
    assert_eq!(b["budget"]["n_required"], 383);

    assert_eq!(
        gereach(dir.path(), TWO_FREQ, &["validate-kernel"]).status.code(),
        Some(0)
    );
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/kernel_validation.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["nondegenerate"], true);
}

#[test]
fn oracle_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = gereach(
        dir.path(),
        COSINE,
        &[
            "oracle",
            "--seed",
            "11",
            "--override",
            "oracle.r_step=0.01",
            "--override",
            "oracle.n_directions=64",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/oracle_summary.json")).unwrap()).unwrap();
    assert_eq!(s["provenance"]["seed"], 11);
    let out = gereach(dir.path(), COSINE, &["oracle", "--override", "k_list=[32]"]);
    assert_eq!(out.status.code(), Some(2));
}
