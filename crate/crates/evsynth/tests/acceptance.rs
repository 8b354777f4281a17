//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criterion 10 re-runs 1-9 and compares artifacts.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use evsynth::core::eligibility::{attainable_total, evaluate_penalties, structure_criteria};
use evsynth::core::eval::{EvalPolicy, UnknownAction};
use evsynth::core::extract::{ExtractionRequest, Parser, ParserError};
use evsynth::core::meta::{display_weights, pool_classical_mh, pool_ew_mh, PoolOptions};
use evsynth::core::plan::validate_plan;
use evsynth::core::trial::PrefilterPolicy;
use evsynth::core::weights::compute_weights;
use evsynth::core::{ContingencyTable, MembershipLibrary, StudyWeight, TrialRecord, WeightParams};
use evsynth::formats;
use evsynth::montecarlo::{simulate, SimulationConfig};
use evsynth::parsers::{ReplayFixture, ReplayParser, ReplayStructurer, StructureFixture};
use evsynth::pipeline::{audit_digest, run_pipeline, selected_from_audit, AuditLog, Clock, FixedClock, PipelineInput, SystemClock};
use evsynth::registry::ingest_registry_dump;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const PENALTIES: [f64; 4] = [0.0, 2.8, 1.8, 2.8];
const ORDER: [&str; 4] = ["NCT02184195", "NCT01844986", "NCT00753545", "NCT01874353"];
const TARGET: &str = "NCT02184195";

struct Outcome {
    pass: bool,
    detail: String,
    artifact: Value,
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn r2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn r1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn tables() -> Vec<ContingencyTable> {
    formats::read_tables(&fixtures().join("olaparib/tables.csv")).expect("olaparib tables")
}

fn ew_weights() -> Vec<StudyWeight> {
    let ps: Vec<(String, f64)> = ORDER.iter().zip(PENALTIES).map(|(id, p)| (id.to_string(), p)).collect();
    let v = compute_weights(&ps, &WeightParams::default(), 3.3).expect("weights");
    StudyWeight::from_vector(&v)
}

/// Median wall time of `n` calls.
fn median_time<T>(n: usize, mut f: impl FnMut() -> T) -> Duration {
    let mut times: Vec<Duration> = (0..n)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed()
        })
        .collect();
    times.sort();
    times[n / 2]
}

fn c1() -> Outcome {
    let ps: Vec<(String, f64)> = ORDER.iter().zip(PENALTIES).map(|(id, p)| (id.to_string(), p)).collect();
    let v = compute_weights(&ps, &WeightParams::default(), 3.3).unwrap();
    let w = v.weights();
    let rounded: Vec<f64> = w.iter().map(|x| r2(*x)).collect();
    let close = w.iter().zip([0.5207, 0.1323, 0.2147, 0.1323]).all(|(a, b)| (a - b).abs() < 1e-3);
    let t = median_time(101, || compute_weights(&ps, &WeightParams::default(), 3.3));
    Outcome {
        pass: rounded == [0.52, 0.13, 0.21, 0.13] && close && t < Duration::from_millis(1),
        detail: format!("weights {:.4} {:.4} {:.4} {:.4}, {:?}", w[0], w[1], w[2], w[3], t),
        artifact: serde_json::to_value(&v).unwrap(),
    }
}

fn c2() -> Outcome {
    let (t, w) = (tables(), ew_weights());
    let e = pool_ew_mh(&t, &w, &PoolOptions::default()).unwrap();
    let time = median_time(101, || pool_ew_mh(&t, &w, &PoolOptions::default()));
    let got = (r2(e.theta_hat), r2(e.ci_low), r2(e.ci_high));
    Outcome {
        pass: got == (1.97, 1.76, 2.20) && time < Duration::from_millis(1),
        detail: format!("theta {:.2} ({:.2}, {:.2}), {:?}", e.theta_hat, e.ci_low, e.ci_high, time),
        artifact: serde_json::to_value(&e).unwrap(),
    }
}

fn c3() -> Outcome {
    let e = pool_classical_mh(&tables(), &PoolOptions::default()).unwrap();
    let got = (r2(e.theta_hat), r2(e.ci_low), r2(e.ci_high));
    Outcome {
        pass: got == (2.18, 2.00, 2.38),
        detail: format!("theta {:.2} ({:.2}, {:.2})", e.theta_hat, e.ci_low, e.ci_high),
        artifact: serde_json::to_value(&e).unwrap(),
    }
}

fn c4() -> Outcome {
    let t = tables();
    let mh: Vec<f64> = display_weights(&t, &StudyWeight::uniform(&t)).unwrap().into_iter().map(r1).collect();
    let ew: Vec<f64> = display_weights(&t, &ew_weights()).unwrap().into_iter().map(r1).collect();
    Outcome {
        pass: mh == [13.6, 31.7, 23.2, 31.5] && ew == [34.6, 20.5, 24.4, 20.4],
        detail: format!("MH {mh:?} EW {ew:?}"),
        artifact: json!({"classical": mh, "weighted": ew}),
    }
}

fn c5() -> Outcome {
    let e = pool_classical_mh(&tables(), &PoolOptions::default()).unwrap();
    let expected = [(1.32, 0.63, 2.74), (2.74, 1.76, 4.26), (2.25, 1.37, 3.69), (1.95, 1.25, 3.04)];
    let got: Vec<(f64, f64, f64)> = e
        .studies
        .iter()
        .map(|s| (r2(s.rr.rr.unwrap_or(f64::NAN)), r2(s.rr.ci_low.unwrap_or(f64::NAN)), r2(s.rr.ci_high.unwrap_or(f64::NAN))))
        .collect();
    Outcome {
        pass: got == expected,
        detail: got.iter().map(|(r, l, h)| format!("{r:.2} ({l:.2}, {h:.2})")).collect::<Vec<_>>().join("; "),
        artifact: serde_json::to_value(&e.studies).unwrap(),
    }
}

fn c6() -> Outcome {
    let dir = fixtures().join("olaparib");
    let raw = std::fs::read(dir.join("registry.json")).unwrap();
    let (corpus, _) = ingest_registry_dump(&raw, "olaparib", "").unwrap();
    let rules = formats::read_rules(&dir.join("rules.json")).unwrap();
    let structurer = ReplayStructurer::new(StructureFixture::load(&dir.join("structure-replay.json")).unwrap());
    let mut criteria = BTreeMap::new();
    let mut flagged = 0;
    for id in ORDER {
        let trial = corpus.get(id).expect("olaparib trial in registry fixture");
        let report = structure_criteria(id, &trial.eligibility_text, &structurer);
        flagged += report.flags.len();
        criteria.insert(id, report.criteria);
    }
    let target = criteria[TARGET].clone();
    let scores: Vec<_> = ORDER
        .iter()
        .map(|id| evaluate_penalties(id, &rules, &criteria[id], Some(&target)).unwrap())
        .collect();
    let totals: Vec<f64> = scores.iter().map(|s| s.total).collect();
    Outcome {
        pass: totals == PENALTIES && flagged == 0 && attainable_total(&rules) == 3.3,
        detail: format!("totals {totals:?}, attainable {}", attainable_total(&rules)),
        artifact: serde_json::to_value(&scores).unwrap(),
    }
}

fn random_tables(rng: &mut ChaCha8Rng, k: usize) -> Vec<ContingencyTable> {
    (0..k)
        .map(|i| {
            let n1 = rng.random_range(2..200u64);
            let n0 = rng.random_range(2..200u64);
            let a = rng.random_range(1..n1);
            let c = rng.random_range(1..n0);
            ContingencyTable { study_id: format!("s{i}"), a, b: n1 - a, c, d: n0 - c }
        })
        .collect()
}

fn textbook_mh(tables: &[ContingencyTable]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for t in tables {
        let (a, b, c, d) = (t.a as f64, t.b as f64, t.c as f64, t.d as f64);
        let n = a + b + c + d;
        num += a * (c + d) / n;
        den += c * (a + b) / n;
    }
    num / den
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

struct Scripted(HashMap<&'static str, &'static str>);

impl Parser for Scripted {
    fn id(&self) -> &str {
        "scripted"
    }
    fn parse(&self, r: &ExtractionRequest) -> Result<String, ParserError> {
        match self.0.get(r.instruction.as_str()) {
            Some(v) => Ok(v.to_string()),
            None => Err(ParserError::Unavailable("no answer".into())),
        }
    }
}

fn c7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let o = PoolOptions::default();
    let mut failures: Vec<String> = Vec::new();

    for _ in 0..200 {
        let k = rng.random_range(1..9);
        let t = random_tables(&mut rng, k);
        let w: Vec<StudyWeight> = t.iter().map(|x| StudyWeight { study_id: x.study_id.clone(), weight: rng.random_range(0.01..1.0) }).collect();
        let base = pool_ew_mh(&t, &w, &o).unwrap();
        let base_disp = display_weights(&t, &w).unwrap();
        for lambda in [1e-6, 1.0, 1e6] {
            let s: Vec<StudyWeight> = w.iter().map(|x| StudyWeight { study_id: x.study_id.clone(), weight: x.weight * lambda }).collect();
            let e = pool_ew_mh(&t, &s, &o).unwrap();
            let d = display_weights(&t, &s).unwrap();
            let ok = close(e.theta_hat, base.theta_hat)
                && close(e.variance, base.variance)
                && close(e.ci_low, base.ci_low)
                && close(e.ci_high, base.ci_high)
                && d.iter().zip(&base_disp).all(|(x, y)| close(*x, *y));
            if !ok {
                failures.push(format!("scale invariance at lambda {lambda}"));
                break;
            }
        }
        let equal: Vec<(String, f64)> = t.iter().map(|x| (x.study_id.clone(), 1.4)).collect();
        let uw = StudyWeight::from_vector(&compute_weights(&equal, &WeightParams::default(), 3.3).unwrap());
        let a = pool_ew_mh(&t, &uw, &o).unwrap();
        let b = pool_classical_mh(&t, &o).unwrap();
        if !(close(a.theta_hat, b.theta_hat) && close(a.variance, b.variance)) {
            failures.push("uniform reduction".into());
        }
    }

    for _ in 0..1000 {
        let k = rng.random_range(1..50);
        let ps: Vec<(String, f64)> = (0..k).map(|i| (format!("s{i}"), rng.random_range(0.0..3.3))).collect();
        let params = WeightParams { gamma: rng.random_range(0.05..3.0), floor: rng.random_range(1.0..99.0), ..Default::default() };
        let v = compute_weights(&ps, &params, 3.3).unwrap();
        if (v.weights().iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            failures.push("normalisation".into());
        }
        for x in &v.studies {
            for y in &v.studies {
                if x.p < y.p && x.w <= y.w {
                    failures.push("monotonicity".into());
                }
            }
        }
    }

    let plan = validate_plan(&json!({
        "filter_name": "guarded",
        "logical_operator": "sequential",
        "conditions": [
            {"fields_to_attend": ["Title"], "llm_instruction": "guard", "comparison": "equal_to", "target_value": "Yes"},
            {"fields_to_attend": ["Title"], "llm_instruction": "final", "comparison": "equal_to", "target_value": "Yes"}
        ]
    }))
    .unwrap();
    let trial = TrialRecord { nct_id: "NCT1".into(), title: "t".into(), ..Default::default() };
    let policy = EvalPolicy::default();
    let lists = MembershipLibrary::new();
    // None stands for an unavailable answer.
    let states: [Option<&'static str>; 3] = [Some("Yes"), Some("No"), None];
    for g in states {
        for f in states {
            let mut answers = HashMap::new();
            if let Some(v) = g {
                answers.insert("guard", v);
            }
            if let Some(v) = f {
                answers.insert("final", v);
            }
            let v = evsynth::core::evaluate_plan(&plan, &trial, &Scripted(answers), &lists, &policy).unwrap();
            let guard_keep = match g {
                Some("Yes") => None,
                Some(_) => Some(true),
                None => Some(policy.unknown.sequential_guard == UnknownAction::Keep),
            };
            let expected = guard_keep.unwrap_or(match f {
                Some(v) => v == "Yes",
                None => policy.unknown.sequential_final == UnknownAction::Keep,
            });
            if v.keep != expected {
                failures.push(format!("sequential guard={g:?} final={f:?}"));
            }
        }
    }

    for _ in 0..1000 {
        let k = rng.random_range(1..6);
        let t = random_tables(&mut rng, k);
        let e = pool_classical_mh(&t, &o).unwrap();
        if !close(e.theta_hat, textbook_mh(&t)) {
            failures.push("textbook MH oracle".into());
        }
    }

    failures.dedup();
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() { "scale, reduction, normalisation, monotonicity, truth table, MH oracle".into() } else { failures.join(", ") },
        artifact: json!({"failures": failures}),
    }
}

fn c8() -> Outcome {
    let t = Instant::now();
    let report = simulate(&SimulationConfig::default()).unwrap();
    let elapsed = t.elapsed();
    let mae: Vec<String> = report.sizes.iter().map(|s| format!("n={} {:.4}", s.arm_size, s.mean_absolute_error)).collect();
    Outcome {
        pass: report.mae_strictly_decreasing()
            && report.sizes.iter().map(|s| s.arm_size).eq([100, 1000, 10000])
            && report.config.replicates == 500
            && elapsed < Duration::from_secs(30),
        detail: format!("{}, {elapsed:?}", mae.join(", ")),
        artifact: serde_json::to_value(&report).unwrap(),
    }
}

fn c9(clock: Arc<dyn Clock>) -> Outcome {
    let dir = fixtures().join("gastric");
    let raw = std::fs::read(dir.join("registry.json")).unwrap();
    let (corpus, _) = ingest_registry_dump(&raw, "gastric-synthetic", "").unwrap();
    let plans = formats::read_plan_set(&dir.join("plans.json")).unwrap();
    let library = formats::read_drug_library(&dir.join("drug-library.json")).unwrap();
    let (lists, missing) = MembershipLibrary::resolve(&library, &plans.membership_lists);
    let parser = ReplayParser::new(ReplayFixture::load(&dir.join("extraction-replay.json")).unwrap());
    let expected: Value = formats::read_json(&dir.join("expected.json")).unwrap();
    let mut audit = AuditLog::new("acceptance", clock);
    let out = run_pipeline(
        &PipelineInput {
            corpus: &corpus,
            plans: &plans,
            parser: &parser,
            lists: &lists,
            policy: &EvalPolicy::default(),
            prefilter: &PrefilterPolicy::default(),
        },
        &mut audit,
    )
    .unwrap();
    let selected: Vec<String> = out.selected.trials.iter().map(|t| t.nct_id.clone()).collect();
    let stages: Vec<Value> = out
        .flow
        .stages
        .iter()
        .map(|s| json!({"label": s.label, "remaining": s.remaining, "excluded": s.excluded}))
        .collect();
    let replayed = selected_from_audit(audit.events()).unwrap();
    let fallbacks = out.verdicts.iter().filter(|v| !v.flags.is_empty()).count();
    let pass = missing.is_empty()
        && json!(out.flow.initial_count) == expected["initial_count"]
        && Value::Array(stages.clone()) == expected["stages"]
        && json!(selected) == expected["selected"]
        && replayed == selected
        && out.flow.is_consistent()
        && fallbacks == 0;
    Outcome {
        pass,
        detail: format!(
            "{} -> {} selected over {} stages, audit replay {}",
            out.flow.initial_count,
            selected.len(),
            stages.len(),
            if replayed == selected { "matches" } else { "differs" }
        ),
        artifact: json!({"flow": out.flow, "selected": selected, "audit_digest": audit_digest(audit.events())}),
    }
}

fn run_all(clock: Arc<dyn Clock>) -> Vec<Outcome> {
    vec![c1(), c2(), c3(), c4(), c5(), c6(), c7(), c8(), c9(clock)]
}

fn main() {
    let first = run_all(Arc::new(FixedClock("2026-01-01T00:00:00.000Z".into())));
    let second = run_all(Arc::new(SystemClock));
    let mut all_pass = true;
    for (i, o) in first.iter().enumerate() {
        all_pass &= o.pass;
        println!("criterion {:>2}: {} {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let differing: Vec<usize> = first
        .iter()
        .zip(&second)
        .enumerate()
        .filter(|(_, (a, b))| serde_json::to_vec(&a.artifact).unwrap() != serde_json::to_vec(&b.artifact).unwrap())
        .map(|(i, _)| i + 1)
        .collect();
    let deterministic = differing.is_empty() && second.iter().all(|o| o.pass);
    all_pass &= deterministic;
    println!(
        "criterion 10: {} {}",
        if deterministic { "PASS" } else { "FAIL" },
        if differing.is_empty() { "artifacts of criteria 1-9 byte-identical across two runs".to_string() } else { format!("artifacts differ for {differing:?}") }
    );
    if !all_pass {
        std::process::exit(1);
    }
}
