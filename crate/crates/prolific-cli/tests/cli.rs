//! End-to-end checks of the command-line surface: exit codes, resumable
//! experiments, thread-count determinism, and the analyze report schema.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prolific"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// A deliberately tiny experiment so the test suite stays fast.
fn tiny_size_config(out: &Path) -> String {
    format!
    (
        "experiment = size\nn = 10\nreps = 3\nalphas = 0.05\nalpha1s = 0.1\n\
         methods = prolific\nnsim = 120\nseed = 99\nout = {}\n",
        out.display()
    )
}

#[test]
fn size_with_nonzero_delta_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "experiment = size\ndelta = 0.5\n");
    let status = bin()
        .args(["size", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "experiment = size\nbogus_key = 1\n");
    let status = bin().args(["size", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn size_experiment_resumes_and_reproduces_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let cfg = dir.path().join("size.cfg");
    write(&cfg, &tiny_size_config(&out));

    let status = bin().args(["size", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let table = std::fs::read_to_string(out.join("size.csv")).unwrap();
    assert!(table.starts_with("method,n,alpha,alpha1,empirical_size,mc_se,reps"));

    // Drop one replicate and the table; the rerun recomputes only the
    // missing piece (surviving files untouched) and reproduces the table
    // byte for byte.
    let reps_dir = out.join("replicates");
    let mut files: Vec<_> = std::fs::read_dir(&reps_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 3);
    std::fs::remove_file(&files[1]).unwrap();
    std::fs::remove_file(out.join("size.csv")).unwrap();
    let kept_mtimes: Vec<_> = [&files[0], &files[2]]
        .iter()
        .map(|p| std::fs::metadata(p).unwrap().modified().unwrap())
        .collect();
    let status = bin().args(["size", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let table2 = std::fs::read_to_string(out.join("size.csv")).unwrap();
    assert_eq!(table, table2);
    for (path, before) in [&files[0], &files[2]].iter().zip(kept_mtimes.iter()) {
        let after = std::fs::metadata(path).unwrap().modified().unwrap();
        assert_eq!(&after, before, "{path:?} was rewritten instead of skipped");
    }
}

#[test]
fn results_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("t1");
    let out2 = dir.path().join("t2");
    for (out, threads) in [(&out1, "1"), (&out2, "2")] {
        let cfg = dir.path().join(format!("size_{threads}.cfg"));
        write(&cfg, &tiny_size_config(out));
        let status = bin()
            .args(["size", "--threads", threads, "--config"])
            .arg(&cfg)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let t1 = std::fs::read_to_string(out1.join("size.csv")).unwrap();
    let t2 = std::fs::read_to_string(out2.join("size.csv")).unwrap();
    assert_eq!(t1, t2);
}

#[test]
fn reused_output_dir_with_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let cfg = dir.path().join("size.cfg");
    write(&cfg, &tiny_size_config(&out));
    assert_eq!(
        bin().args(["size", "--config"]).arg(&cfg).status().unwrap().code(),
        Some(0)
    );
    // Same directory, different seed.
    write(
        &cfg,
        &tiny_size_config(&out).replace("seed = 99", "seed = 100"),
    );
    assert_eq!(
        bin().args(["size", "--config"]).arg(&cfg).status().unwrap().code(),
        Some(2)
    );
}

#[test]
fn analyze_report_validates_against_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let status = bin()
        .args(["simulate", "--n", "8", "--seed", "4", "--delta", "0.4", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let out = dir.path().join("analysis");
    let cfg = dir.path().join("an.cfg");
    write(
        &cfg,
        "experiment = analyze\nnsim = 150\npve = 0.9\nalphas = 0.05\nalpha1s = 0.1\n",
    );
    let status = bin()
        .arg("analyze")
        .arg(&data)
        .args(["--seed", "11", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let schema_text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/analyze_report.schema.json"),
    )
    .unwrap();
    let schema: serde_json::Value = serde_json::from_str(&schema_text).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let result = compiled.validate(&report);
    if let Err(errors) = result {
        let msgs: Vec<String> = errors.map(|e| format!("{e}")).collect();
        panic!("report does not validate: {msgs:?}");
    }
    for file in [
        "mean_surface.csv",
        "treatment_surface.csv",
        "carryover_surface.csv",
        "eigenfunctions.csv",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
}

#[test]
fn simulate_round_trips_through_analyze_input() {
    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("wide.csv");
    let long = dir.path().join("long.csv");
    for (path, format) in [(&wide, "wide"), (&long, "long")] {
        let status = bin()
            .args(["simulate", "--n", "6", "--seed", "21", "--format", format, "--out"])
            .arg(path)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let w = std::fs::metadata(&wide).unwrap().len();
    let l = std::fs::metadata(&long).unwrap().len();
    assert!(w > 0 && l > w, "long format should be larger: {w} vs {l}");
}
