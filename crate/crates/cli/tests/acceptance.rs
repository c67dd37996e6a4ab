//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Runs as a plain binary (`harness = false`) so the lines are never
//! swallowed by output capture: `cargo test -p focal-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use focal_cli::dataset::DatasetRecord;
use focal_cli::output::ExplanationRecord;
use focal_cli::run::{self, Session};
use focal_cli::synth::{self, SynthSpec};
use focal_core::eval::{
    aopc_summary, alignment_report, narrowing_study, EvalItem, EvalOptions, NarrowingConfig,
};
use focal_core::focus::{Budgets, ExplainConfig, Method, StopReason};
use focal_core::models::{k_max, Budget, ModelClient, ModelSpec, QueryCache, Role, SyntheticModel};
use focal_core::perturb::{sample_constrained, FocusMask, Mask};
use focal_core::rng::SeedRng;
use focal_core::segment::{Answer, DocMeta, Document};
use focal_core::surrogate::{fit, FitSample};
use serde_json::json;

const SEEDS: [u64; 3] = [1, 2, 3];
const TRIGGERS: [&str; 3] = ["governing", "illinois", "law"];

struct Line {
    n: usize,
    pass: bool,
    detail: String,
}

fn line(n: usize, pass: bool, detail: String) -> Line {
    println!("[{n}] {} {detail}", if pass { "PASS" } else { "FAIL" });
    Line { n, pass, detail }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.2}s (limit {}s)", e.as_secs_f64(), limit.as_secs()))
}

// 1. Planted linear models recovered exactly from full enumeration.
fn surrogate_exactness() -> Line {
    let t = Instant::now();
    let mut rng = SeedRng::new(2024);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..100 {
        let m = 1 + rng.below(10) as usize;
        let w: Vec<f64> = (0..m).map(|_| rng.unit() * 2.0 - 1.0).collect();
        let b = rng.unit() - 0.5;
        let masks: Vec<Mask> = (0..1usize << m)
            .map(|c| Mask {
                bits: (0..m).map(|j| c >> j & 1 == 1).collect(),
            })
            .collect();
        let ys: Vec<f64> = masks
            .iter()
            .map(|z| b + (0..m).filter(|&j| z.bits[j]).map(|j| w[j]).sum::<f64>())
            .collect();
        let samples: Vec<FitSample> = masks
            .iter()
            .zip(&ys)
            .map(|(mask, &prediction)| FitSample {
                mask,
                prediction,
                weight: 1.0,
            })
            .collect();
        match fit(&samples, &FocusMask::all_active(m), 0.0) {
            Ok(f) => {
                let err = f
                    .coefficients
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| (a - b).abs())
                    .fold((f.intercept - b).abs(), f64::max);
                worst = worst.max(err);
            }
            Err(_) => failures += 1,
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    line(
        1,
        failures == 0 && worst <= 1e-9 && fast,
        format!("surrogate exactness: 100 models, max |error| {worst:.2e} (tol 1e-9), {failures} fit errors, {time}"),
    )
}

// 2. Constrained sampler keeps frozen bits and flips fair coins elsewhere.
fn generator_law() -> Line {
    let t = Instant::now();
    let mut rng = SeedRng::new(7);
    let mut active = Vec::new();
    while active.len() < 20 {
        let i = rng.below(200) as usize;
        if !active.contains(&i) {
            active.push(i);
        }
    }
    let focus = FocusMask::from_active(200, active.iter().copied());
    // Sample 0 is the all-ones anchor; the 10,000 draws after it are checked.
    let masks = sample_constrained(&focus, 10_001, 99).expect("non-degenerate focus");
    let draws = &masks[1..];
    let frozen_ok = draws
        .iter()
        .all(|m| (0..200).filter(|i| !focus.bits[*i]).all(|i| m.bits[i]));
    let rates: Vec<f64> = active
        .iter()
        .map(|&i| draws.iter().filter(|m| m.bits[i]).count() as f64 / draws.len() as f64)
        .collect();
    let lo = rates.iter().copied().fold(1.0, f64::min);
    let hi = rates.iter().copied().fold(0.0, f64::max);
    let (fast, time) = within(t, Duration::from_secs(5));
    line(
        2,
        frozen_ok && lo >= 0.48 && hi <= 0.52 && fast,
        format!("generator law: frozen bits always kept: {frozen_ok}, active keep-rate in [{lo:.4}, {hi:.4}] (need [0.48, 0.52]), {time}"),
    )
}

struct SuiteRun {
    seed: u64,
    records: Vec<DatasetRecord>,
    docs: Vec<Document>,
    focus: Vec<ExplanationRecord>,
    lime: Vec<ExplanationRecord>,
    session: Session,
    failed: usize,
}

fn load_all(dir: &Path, records: &[DatasetRecord]) -> Vec<ExplanationRecord> {
    records
        .iter()
        .filter_map(|r| ExplanationRecord::load(&dir.join(format!("{}.json", r.id))).ok())
        .collect()
}

fn suite_spec(seed: u64) -> SynthSpec {
    serde_json::from_value(json!({
        "docs": 20,
        "words_per_doc": 2000,
        "seed": seed,
        "target_queries": 200,
        "model": {"kind": "keyword_and", "keywords": TRIGGERS, "p_on": 0.95, "p_off": 0.05}
    }))
    .unwrap()
}

fn run_suite(seed: u64, root: &Path) -> SuiteRun {
    let suite = synth::generate(&suite_spec(seed)).expect("valid spec");
    let session = Session::new(suite.config).expect("synthetic clients");
    let fdir = root.join(format!("focus-{seed}"));
    let ldir = root.join(format!("lime-{seed}"));
    let f = run::explain(&session, &suite.records, Method::Focus, &fdir).expect("io");
    let l = run::explain(&session, &suite.records, Method::Lime, &ldir).expect("io");
    SuiteRun {
        seed,
        docs: suite.records.iter().map(|r| r.to_document()).collect(),
        focus: load_all(&fdir, &suite.records),
        lime: load_all(&ldir, &suite.records),
        records: suite.records,
        session,
        failed: f.failed.len() + l.failed.len(),
    }
}

fn aopc_at(run: &SuiteRun, xs: &[ExplanationRecord], k: usize) -> Option<f64> {
    let attrs: Vec<_> = xs.iter().map(|x| x.attribution()).collect();
    let items: Vec<EvalItem> = run
        .docs
        .iter()
        .zip(&attrs)
        .map(|(doc, attribution)| EvalItem { doc, attribution })
        .collect();
    let opts = EvalOptions {
        k_max_eval: k,
        ..EvalOptions::default()
    };
    aopc_summary(&run.session.target, &items, &Budget::unlimited(), &opts)
        .ok()
        .and_then(|c| c.at(k))
}

// 3. Focused attribution survives a small budget on long documents; plain LIME does not.
fn dilution(runs: &[SuiteRun], started: Instant) -> Line {
    let mut f = Vec::new();
    let mut l = Vec::new();
    let mut complete = true;
    for r in runs {
        complete &= r.failed == 0 && r.focus.len() == 20 && r.lime.len() == 20;
        f.extend(aopc_at(r, &r.focus, 5));
        l.extend(aopc_at(r, &r.lime, 5));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, ml) = (mean(&f), mean(&l));
    let (fast, time) = within(started, Duration::from_secs(300));
    let per_seed = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    line(
        3,
        complete && f.len() == runs.len() && l.len() == runs.len() && mf >= 0.80 && ml <= 0.30 && fast,
        format!(
            "dilution: mean AOPC_5 focus {mf:.3} (need >= 0.80; per seed {}), lime {ml:.3} (need <= 0.30; per seed {}), seeds {:?}, {time}",
            per_seed(&f),
            per_seed(&l),
            runs.iter().map(|r| r.seed).collect::<Vec<_>>()
        ),
    )
}

// 4. Target ledger is untouched while scouting and never exceeds the budget.
fn budget_isolation(runs: &[SuiteRun]) -> Line {
    let mut scout_tokens = 0u64;
    let mut over = 0;
    let mut checked = 0;
    for r in runs {
        for x in r.focus.iter().chain(&r.lime) {
            let b = &x.diagnostics.budget;
            scout_tokens += b.target_tokens_scout;
            let cap_ok = b.target_limit > 0
                && b.target_tokens_total <= b.target_limit
                && b.target.consumed == b.target_tokens_total
                && b.target.per_model.keys().all(|m| m == "synthetic-target");
            over += usize::from(!cap_ok);
            checked += 1;
        }
    }
    let mut rng = SeedRng::new(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let limit = 1 + rng.below(10_000_000);
        let cost = 1 + rng.below(20_000);
        let expected = (limit / cost) as usize;
        if k_max(&Budget::new(limit), cost, usize::MAX) != expected {
            mismatches += 1;
        }
    }
    line(
        4,
        scout_tokens == 0 && over == 0 && mismatches == 0 && checked == 120,
        format!(
            "budget isolation: phase-one target tokens {scout_tokens} (need 0), {over} of {checked} runs over budget or misattributed, k_max mismatches {mismatches} of 1000"
        ),
    )
}

/// Hand evaluation of the three-keyword target on the kept words.
fn keyword_and_by_hand(doc: &Document, deleted: &[usize]) -> f64 {
    let mut seen = [false; 3];
    for (i, u) in doc.units.iter().enumerate() {
        if deleted.contains(&i) {
            continue;
        }
        let w = u.surface.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        for (t, s) in TRIGGERS.iter().zip(seen.iter_mut()) {
            *s |= w == *t;
        }
    }
    if seen.iter().all(|&s| s) {
        0.95
    } else {
        0.05
    }
}

// 5. Harness AOPC equals direct evaluation, bit for bit.
fn aopc_oracle(run: &SuiteRun) -> Line {
    let attrs: Vec<_> = run.focus.iter().map(|x| x.attribution()).collect();
    let items: Vec<EvalItem> = run
        .docs
        .iter()
        .zip(&attrs)
        .map(|(doc, attribution)| EvalItem { doc, attribution })
        .collect();
    let opts = EvalOptions::default();
    let curve = match aopc_summary(&run.session.target, &items, &Budget::unlimited(), &opts) {
        Ok(c) => c,
        Err(e) => return line(5, false, format!("aopc oracle: harness failed: {e}")),
    };
    let mut mismatches = 0;
    let mut direct_per_k = vec![0.0; 100];
    for (doc, x) in run.docs.iter().zip(&run.focus) {
        let mut order: Vec<usize> = (0..x.scores.len()).collect();
        order.sort_by(|&a, &b| x.scores[b].total_cmp(&x.scores[a]).then(a.cmp(&b)));
        let base = keyword_and_by_hand(doc, &[]);
        let ex = curve.examples.iter().find(|e| e.id == doc.id).expect("example present");
        for k in 1..=100 {
            let drop = base - keyword_and_by_hand(doc, &order[..k]);
            direct_per_k[k - 1] += drop;
            if ex.drops[k - 1].to_bits() != drop.to_bits() {
                mismatches += 1;
            }
        }
    }
    let n = run.docs.len() as f64;
    for (k, v) in direct_per_k.iter().enumerate() {
        if curve.per_k[k].to_bits() != (v / n).to_bits() {
            mismatches += 1;
        }
    }
    line(
        5,
        mismatches == 0 && curve.per_k.len() == 100,
        format!("aopc oracle: {} documents x k = 1..100, {mismatches} bit mismatches", run.docs.len()),
    )
}

// 6. Top-ranked words coincide with the planted evidence.
fn evidence_alignment(runs: &[SuiteRun]) -> Line {
    let mut at1 = Vec::new();
    let mut at2 = Vec::new();
    let mut non_monotone = 0;
    let mut skipped = 0;
    for r in runs {
        let attrs: Vec<_> = r.focus.iter().map(|x| x.attribution()).collect();
        let items: Vec<EvalItem> = r
            .docs
            .iter()
            .zip(&attrs)
            .map(|(doc, attribution)| EvalItem { doc, attribution })
            .collect();
        let rep = alignment_report(&items, &[1.0, 1.5, 2.0]);
        skipped += rep.skipped.len();
        for e in &rep.examples {
            at1.push(e.points[0].recall);
            at2.push(e.points[2].recall);
            if e.points.windows(2).any(|w| w[1].recall < w[0].recall) {
                non_monotone += 1;
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r1, r2) = (mean(&at1), mean(&at2));
    line(
        6,
        r1 >= 0.8 && r2 >= 0.95 && non_monotone == 0 && skipped == 0 && at1.len() == 60,
        format!(
            "evidence alignment: recall@1.0 {r1:.3} (need >= 0.8), recall@2.0 {r2:.3} (need >= 0.95), {non_monotone} non-monotone of {} examples",
            at1.len()
        ),
    )
}

// 7. Scouting traces are well formed.
fn scouting_structure(runs: &[SuiteRun], extra: &[ExplanationRecord]) -> Line {
    let mut bad = Vec::new();
    let mut stops: BTreeMap<String, usize> = BTreeMap::new();
    let mut count = 0;
    for x in runs.iter().flat_map(|r| &r.focus).chain(extra) {
        let Some(t) = &x.diagnostics.scout else {
            bad.push(format!("{}: no trace", x.id));
            continue;
        };
        count += 1;
        *stops.entry(format!("{:?}", t.stop)).or_default() += 1;
        let cov = t.coverage_path();
        if cov.windows(2).any(|w| w[1] > w[0]) {
            bad.push(format!("{}: coverage grew {cov:?}", x.id));
        }
        if t.iterations.len() > 3 {
            bad.push(format!("{}: {} iterations", x.id, t.iterations.len()));
        }
        if t.stop == StopReason::Density && t.k_target < t.density_floor * t.n_active {
            bad.push(format!("{}: density stop with K {} < {} x {}", x.id, t.k_target, t.density_floor, t.n_active));
        }
    }
    line(
        7,
        bad.is_empty() && count > 0,
        format!("scouting structure: {count} traces, stops {stops:?}, {} violations {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()),
    )
}

// 8. Same config, same seed, same bytes.
fn determinism(run: &SuiteRun, root: &Path) -> Line {
    let cfg = run.session.config.clone();
    let again = Session::new(cfg).expect("synthetic clients");
    let dir = root.join("focus-again");
    if run::explain(&again, &run.records, Method::Focus, &dir).is_err() {
        return line(8, false, "determinism: second run failed".into());
    }
    let first = root.join(format!("focus-{}", run.seed));
    let differing: Vec<&str> = run
        .records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| {
            let name = format!("{id}.json");
            std::fs::read(first.join(&name)).ok() != std::fs::read(dir.join(&name)).ok()
        })
        .collect();
    line(
        8,
        differing.is_empty(),
        format!("determinism: {} of {} explanation files byte-identical across runs", run.records.len() - differing.len(), run.records.len()),
    )
}

// 9. Narrowing on a one-dominant-weight model keeps that weight.
fn narrowing() -> Line {
    let weights: BTreeMap<String, f64> = [
        ("verdict", 4.0),
        ("clause", 0.6),
        ("notice", -0.4),
        ("term", 0.3),
        ("party", 0.2),
        ("venue", -0.1),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let model = SyntheticModel::WeightedLinear { weights, bias: -2.0 };
    let cache = std::sync::Arc::new(QueryCache::in_memory());
    let target = ModelClient::new(ModelSpec::synthetic(Role::Target, "wl-target", model.clone()), cache.clone()).unwrap();
    let proxy = ModelClient::new(ModelSpec::synthetic(Role::Proxy, "wl-proxy", model), cache).unwrap();
    let text = "the party gave notice that the clause on venue sets the term of the verdict";
    let doc = Document::new(
        "wl",
        text,
        DocMeta {
            question: "Is the verdict binding?".into(),
            answer: Answer::Yes,
            evidence: vec![],
        },
    );
    let dominant = doc.units.iter().position(|u| u.surface == "verdict").unwrap();
    let n = doc.len();
    let cfg = ExplainConfig::default();
    let ncfg = NarrowingConfig {
        steps: n - 1,
        k_per_step: 500,
        seed: 5,
        k_max_eval: 100,
    };
    let (t, p, e) = (Budget::unlimited(), Budget::unlimited(), Budget::unlimited());
    let trace = match narrowing_study(&doc, &target, &proxy, &cfg, &ncfg, Budgets { target: &t, proxy: &p, eval: &e }) {
        Ok(t) => t,
        Err(e) => return line(9, false, format!("narrowing: study failed: {e}")),
    };
    let never_frozen = trace.steps.iter().all(|s| s.focus_mask[dominant] == 1);
    let nested = trace.steps.windows(2).all(|w| {
        let flipped: Vec<usize> = (0..n).filter(|&i| w[0].focus_mask[i] != w[1].focus_mask[i]).collect();
        flipped.len() == 1 && w[0].focus_mask[flipped[0]] == 1 && w[1].frozen == Some(flipped[0])
    });
    let best = trace.steps[trace.optimal_index].mean_aopc;
    let step0 = trace.steps[0].mean_aopc;
    line(
        9,
        never_frozen && nested && best >= step0 && trace.steps.len() == n,
        format!(
            "narrowing: {} steps, dominant unit kept: {never_frozen}, strictly nested: {nested}, optimal AOPC {best:.4} at step {} vs step-0 {step0:.4}",
            trace.steps.len(),
            trace.optimal_index
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut lines = vec![surrogate_exactness(), generator_law()];

    let started = Instant::now();
    let runs: Vec<SuiteRun> = SEEDS.iter().map(|&s| run_suite(s, root.path())).collect();
    lines.push(dilution(&runs, started));
    lines.push(budget_isolation(&runs));
    lines.push(aopc_oracle(&runs[0]));
    lines.push(evidence_alignment(&runs));

    // Target-scouted runs contribute traces too.
    let no_proxy_dir = root.path().join("no-proxy");
    let _ = run::explain(&runs[0].session, &runs[0].records[..5], Method::FocusNoProxy, &no_proxy_dir);
    let extra = load_all(&no_proxy_dir, &runs[0].records[..5]);
    lines.push(scouting_structure(&runs, &extra));
    lines.push(determinism(&runs[0], root.path()));
    lines.push(narrowing());

    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        lines.len() - failed.len(),
        lines.len()
    );
    for l in &failed {
        eprintln!("criterion {} failed: {}", l.n, l.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
