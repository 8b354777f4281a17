use std::path::{Path, PathBuf};

use evsynth::cli::{run, EXIT_ESTIMATION, EXIT_INPUT, EXIT_OK};
use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("evsynth").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn help_text_is_stable() {
    assert_eq!(cli(&["--help"]), (EXIT_OK, golden("help.txt"), String::new()));
    for cmd in ["weights", "meta", "filter"] {
        let (code, out, _) = cli(&[cmd, "--help"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out, golden(&format!("{cmd}-help.txt")), "{cmd} --help drifted");
    }
}

#[test]
fn weights_and_meta_reproduce_the_olaparib_numbers() {
    let (code, out, _) = cli(&["weights", "--penalties", "0,2.8,1.8,2.8", "--pmax", "attainable:3.3", "--format", "plain"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, "0.5207 0.1323 0.2147 0.1323\n");

    let (code, out, _) = cli(&["meta", "--tables", &fx("olaparib/tables.csv"), "--weights", &fx("olaparib/weights.json"), "--format", "plain"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, "theta 1.97 ci 1.76 2.20\n");
    let (_, out, _) = cli(&["meta", "--tables", &fx("olaparib/tables.csv"), "--format", "plain"]);
    assert_eq!(out, "theta 2.18 ci 2.00 2.38\n");

    let (code, out, _) = cli(&[
        "penalize",
        "--rules",
        &fx("olaparib/rules.json"),
        "--criteria",
        &fx("olaparib/criteria.json"),
        "--target",
        "NCT02184195",
        "--ids",
        "NCT02184195,NCT01844986,NCT00753545,NCT01874353",
        "--format",
        "plain",
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.trim(), "0 2.8 1.8 2.8");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let bad_plan = dir.path().join("bad.json");
    std::fs::write(&bad_plan, r#"{"filter_name": "Bad Name", "logical_operator": "default", "conditions": []}"#).unwrap();
    let (code, _, err) = cli(&["plan-validate", bad_plan.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("/filter_name"), "{err}");
    assert!(err.contains("/conditions"), "{err}");

    let (code, _, _) = cli(&["meta", "--tables", "/nonexistent/tables.csv"]);
    assert_eq!(code, EXIT_INPUT);
    let (code, _, _) = cli(&["weights", "--penalties", "0,x"]);
    assert_eq!(code, EXIT_INPUT);
    let (code, _, _) = cli(&["no-such-command"]);
    assert_eq!(code, EXIT_INPUT);

    let zeros = dir.path().join("zeros.csv");
    std::fs::write(&zeros, "study_id,events_trt,total_trt,events_ctl,total_ctl\na,0,10,0,10\n").unwrap();
    let (code, _, err) = cli(&["meta", "--tables", zeros.to_str().unwrap()]);
    assert_eq!(code, EXIT_ESTIMATION, "{err}");
    let (code, _, _) = cli(&["meta", "--tables", zeros.to_str().unwrap(), "--continuity-correction"]);
    assert_eq!(code, EXIT_OK);

    let (code, _, _) = cli(&[
        "filter",
        "--corpus",
        &fx("olaparib/corpus.json"),
        "--plans",
        &fx("olaparib/plans.json"),
        "--parser",
        "remote:/nonexistent/remote.toml",
    ]);
    assert_eq!(code, EXIT_ESTIMATION);
}

#[test]
fn filter_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run_once = |stamp: &str, audit: &Path| {
        cli(&[
            "filter",
            "--corpus",
            &fx("gastric/corpus.json"),
            "--plans",
            &fx("gastric/plans.json"),
            "--parser",
            &format!("replay:{}", fx("gastric/extraction-replay.json")),
            "--drug-library",
            &fx("gastric/drug-library.json"),
            "--timestamp",
            stamp,
            "--audit",
            audit.to_str().unwrap(),
        ])
    };
    let (c1, a, _) = run_once("2026-01-01T00:00:00.000Z", &dir.path().join("a.jsonl"));
    let (c2, b, _) = run_once("2026-02-02T12:00:00.000Z", &dir.path().join("b.jsonl"));
    assert_eq!((c1, c2), (EXIT_OK, EXIT_OK));
    assert_eq!(a, b);
    let report: Value = serde_json::from_str(&a).unwrap();
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("gastric/expected.json")).unwrap()).unwrap();
    assert_eq!(report["selected"], expected["selected"]);
    let audit_a = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    let audit_b = std::fs::read_to_string(dir.path().join("b.jsonl")).unwrap();
    assert_ne!(audit_a, audit_b, "timestamps differ");
    assert_eq!(audit_a.replace("2026-01-01T00:00:00.000Z", ""), audit_b.replace("2026-02-02T12:00:00.000Z", ""));
}

#[test]
fn simulate_is_seeded() {
    let (code, a, _) = cli(&["simulate", "--replicates", "50", "--format", "plain"]);
    assert_eq!(code, EXIT_OK);
    let (_, b, _) = cli(&["simulate", "--replicates", "50", "--format", "plain"]);
    assert_eq!(a, b);
    let (_, c, _) = cli(&["simulate", "--replicates", "50", "--seed", "1", "--format", "plain"]);
    assert_ne!(a, c);
}
