//! Command implementations shared by the binary and the tests.
//!
//! Every record gets its own target, proxy and evaluation budgets and its own
//! seed (`mix_str(config.seed, id)`), so results do not depend on record
//! order or on `record_parallelism`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use focal_core::eval::{
    aopc_summary, alignment_report, narrowing_study, AlignmentReport, AopcCurve, EvalError,
    EvalItem, EvalOptions, NarrowingTrace,
};
use focal_core::focus::{Budgets, Explainer, FocusError, Method};
use focal_core::models::{Budget, ModelClient, ModelError, Query, QueryCache};
use focal_core::perturb::{apply_mask_with, Mask};
use focal_core::rng::mix_str;
use focal_core::segment::Document;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::DatasetRecord;
use crate::output::{write_atomic, write_json, ExplanationRecord};
use crate::report;
use crate::{EXIT_BUDGET, EXIT_MODEL, EXIT_RECORD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Budget,
    Model,
    Record,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Budget => EXIT_BUDGET,
            FailureKind::Model => EXIT_MODEL,
            FailureKind::Record => EXIT_RECORD,
        }
    }

    fn of_focus(e: &FocusError) -> Self {
        match e {
            _ if e.is_budget() => FailureKind::Budget,
            FocusError::Model(_) => FailureKind::Model,
            _ => FailureKind::Record,
        }
    }

    fn of_eval(e: &EvalError) -> Self {
        match e {
            _ if e.is_budget() => FailureKind::Budget,
            EvalError::Model(m) if m.is_budget() => FailureKind::Budget,
            EvalError::Model(_) => FailureKind::Model,
            EvalError::Focus(f) => FailureKind::of_focus(f),
            _ => FailureKind::Record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub records: usize,
    pub succeeded: usize,
    pub failed: Vec<Failure>,
}

impl RunSummary {
    fn new(command: &str, records: usize, failed: Vec<Failure>) -> Self {
        RunSummary {
            command: command.into(),
            records,
            succeeded: records - failed.len(),
            failed,
        }
    }

    /// 0 on full success, otherwise the code of the first failed record.
    pub fn exit_code(&self) -> i32 {
        self.failed.first().map_or(0, |f| f.kind.exit_code())
    }
}

pub struct Session {
    pub config: RunConfig,
    pub target: ModelClient,
    pub proxy: ModelClient,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self, ModelError> {
        let cache = Arc::new(match &config.cache_path {
            Some(p) => QueryCache::open(p)?,
            None => QueryCache::in_memory(),
        });
        let target = ModelClient::new(config.target.clone(), cache.clone())?;
        let proxy = ModelClient::new(config.proxy.clone(), cache)?;
        Ok(Session {
            config,
            target,
            proxy,
        })
    }

    /// Per-record target, proxy and evaluation budgets.
    pub fn budgets(&self, doc: &Document) -> [Budget; 3] {
        let b = &self.config.budget;
        let target = match b.target_queries {
            Some(q) => {
                let full = apply_mask_with(&Mask::ones(doc.len()), doc, &self.config.mask_mode)
                    .unwrap_or_default();
                let c = self.target.cost(&Query {
                    document: &full,
                    question: &doc.meta.question,
                    label: doc.meta.answer,
                });
                Budget::new(q * c.max(1))
            }
            None => Budget::new(b.target_tokens),
        };
        [target, Budget::new(b.proxy_tokens), Budget::new(b.eval_tokens)]
    }

    pub fn record_seed(&self, id: &str) -> u64 {
        mix_str(self.config.seed, id)
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k_max_eval: self.config.eval.k_max_eval,
            mask_mode: self.config.mask_mode.clone(),
            parallelism: self.config.parallelism,
        }
    }
}

/// Runs `f` over `items` with up to `workers` threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every item ran"))
        .collect()
}

pub fn explain_one(
    session: &Session,
    rec: &DatasetRecord,
    method: Method,
) -> Result<ExplanationRecord, FocusError> {
    let doc = rec.to_document();
    let [target, proxy, eval] = session.budgets(&doc);
    let cfg = session.config.explain_config();
    let seed = session.record_seed(&rec.id);
    let e = Explainer::new(&session.target, &session.proxy, &cfg).explain(
        &doc,
        method,
        seed,
        Budgets {
            target: &target,
            proxy: &proxy,
            eval: &eval,
        },
    )?;
    Ok(ExplanationRecord::new(&doc, &e, seed))
}

pub fn explain(
    session: &Session,
    records: &[DatasetRecord],
    method: Method,
    out: &Path,
) -> std::io::Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let results = par_map(records, session.config.record_parallelism, |rec| {
        let r = explain_one(session, rec, method);
        if let Ok(x) = &r {
            write_json(&out.join(format!("{}.json", rec.id)), x)?;
            write_atomic(&out.join(format!("{}.html", rec.id)), report::render(x).as_bytes())?;
            info!("{}: explained ({} active units)", rec.id, x.diagnostics.fit.n_active);
        }
        Ok::<_, std::io::Error>(r)
    });
    let mut failed = Vec::new();
    for (rec, r) in records.iter().zip(results) {
        if let Err(e) = r? {
            warn!("{}: {e}", rec.id);
            failed.push(Failure {
                id: rec.id.clone(),
                kind: FailureKind::of_focus(&e),
                message: e.to_string(),
            });
        }
    }
    let summary = RunSummary::new(&format!("explain --method {}", method.as_str()), records.len(), failed);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Aopc,
    Recall,
}

/// Loads `<dir>/<id>.json` for every record; failures are reported per id.
fn load_explanations(
    records: &[DatasetRecord],
    dir: &Path,
) -> (Vec<(Document, ExplanationRecord)>, Vec<Failure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for rec in records {
        let doc = rec.to_document();
        let path = dir.join(format!("{}.json", rec.id));
        match ExplanationRecord::load(&path) {
            Ok(x) if x.matches(&doc) => ok.push((doc, x)),
            Ok(_) => failed.push(Failure {
                id: rec.id.clone(),
                kind: FailureKind::Record,
                message: format!("{} does not match the dataset document", path.display()),
            }),
            Err(message) => failed.push(Failure {
                id: rec.id.clone(),
                kind: FailureKind::Record,
                message: format!("missing attribution: {message}"),
            }),
        }
    }
    for f in &failed {
        warn!("{}: {}", f.id, f.message);
    }
    (ok, failed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopcOutput {
    pub curve: Option<AopcCurve>,
    pub excluded: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallOutput {
    pub report: AlignmentReport,
    pub excluded: Vec<Failure>,
}

pub fn evaluate(
    session: &Session,
    records: &[DatasetRecord],
    explanations: &Path,
    metric: Metric,
    out: &Path,
) -> std::io::Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let (loaded, mut failed) = load_explanations(records, explanations);
    match metric {
        Metric::Aopc => {
            let opts = session.eval_options();
            let results = par_map(&loaded, session.config.record_parallelism, |(doc, x)| {
                let [_, _, budget] = session.budgets(doc);
                let attr = x.attribution();
                aopc_summary(
                    &session.target,
                    &[EvalItem {
                        doc,
                        attribution: &attr,
                    }],
                    &budget,
                    &opts,
                )
            });
            let mut examples = Vec::new();
            for ((doc, _), r) in loaded.iter().zip(results) {
                match r {
                    Ok(mut c) => examples.append(&mut c.examples),
                    Err(e) => {
                        warn!("{}: {e}", doc.id);
                        failed.push(Failure {
                            id: doc.id.clone(),
                            kind: FailureKind::of_eval(&e),
                            message: e.to_string(),
                        });
                    }
                }
            }
            let curve = (!examples.is_empty())
                .then(|| AopcCurve::from_examples(opts.k_max_eval, examples));
            if let Some(c) = &curve {
                write_aopc_csv(out, c)?;
            }
            write_json(
                &out.join("aopc.json"),
                &AopcOutput {
                    curve,
                    excluded: failed.clone(),
                },
            )?;
        }
        Metric::Recall => {
            let attrs: Vec<_> = loaded.iter().map(|(_, x)| x.attribution()).collect();
            let items: Vec<EvalItem> = loaded
                .iter()
                .zip(&attrs)
                .map(|((doc, _), attribution)| EvalItem { doc, attribution })
                .collect();
            let report = alignment_report(&items, &session.config.eval.ratios);
            for s in &report.skipped {
                warn!("{}: skipped ({})", s.id, s.reason);
            }
            write_recall_csv(out, &report)?;
            write_json(
                &out.join("recall.json"),
                &RecallOutput {
                    report,
                    excluded: failed.clone(),
                },
            )?;
        }
    }
    let name = match metric {
        Metric::Aopc => "evaluate --metric aopc",
        Metric::Recall => "evaluate --metric recall",
    };
    let summary = RunSummary::new(name, records.len(), failed);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn csv_bytes(rows: Vec<Vec<String>>) -> std::io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_aopc_csv(out: &Path, c: &AopcCurve) -> std::io::Result<()> {
    let mut rows = vec![vec!["id", "n_units", "base", "aopc", "aopc_10", "aopc_50", "aopc_100"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
    for e in &c.examples {
        let at = |k: usize| e.drops.get(k - 1).copied();
        rows.push(vec![
            e.id.clone(),
            e.n_units.to_string(),
            e.base.to_string(),
            e.mean.to_string(),
            opt(at(10)),
            opt(at(50)),
            opt(at(100)),
        ]);
    }
    rows.push(vec![
        "mean".into(),
        String::new(),
        String::new(),
        c.aopc.to_string(),
        opt(c.aopc_10),
        opt(c.aopc_50),
        opt(c.aopc_100),
    ]);
    write_atomic(&out.join("aopc.csv"), &csv_bytes(rows)?)?;

    let mut rows = vec![vec!["k".to_string(), "aopc_k".to_string()]];
    for (i, v) in c.per_k.iter().enumerate() {
        rows.push(vec![(i + 1).to_string(), v.to_string()]);
    }
    write_atomic(&out.join("aopc_curve.csv"), &csv_bytes(rows)?)
}

fn write_recall_csv(out: &Path, r: &AlignmentReport) -> std::io::Result<()> {
    let mut header = vec!["id".to_string(), "evidence_words".to_string()];
    header.extend(r.ratios.iter().map(|x| format!("recall@{x}")));
    let mut rows = vec![header];
    for e in &r.examples {
        let mut row = vec![e.id.clone(), e.evidence_words.to_string()];
        row.extend(e.points.iter().map(|p| p.recall.to_string()));
        rows.push(row);
    }
    let mut mean = vec!["mean".to_string(), String::new()];
    mean.extend(r.mean_recall.iter().map(|m| m.to_string()));
    rows.push(mean);
    write_atomic(&out.join("recall.csv"), &csv_bytes(rows)?)
}

pub fn narrow(
    session: &Session,
    records: &[DatasetRecord],
    out: &Path,
) -> std::io::Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let cfg = session.config.explain_config();
    let results = par_map(records, session.config.record_parallelism, |rec| {
        let doc = rec.to_document();
        let [target, proxy, eval] = session.budgets(&doc);
        // The per-explanation target limit covers one refit; a study does steps + 1.
        let refits = session.config.narrow.steps as u64 + 1;
        let target = Budget::new(target.limit().saturating_mul(refits));
        let ncfg = session.config.narrowing_config(session.record_seed(&rec.id));
        let r = narrowing_study(
            &doc,
            &session.target,
            &session.proxy,
            &cfg,
            &ncfg,
            Budgets {
                target: &target,
                proxy: &proxy,
                eval: &eval,
            },
        );
        if let Ok(t) = &r {
            write_json(&out.join(format!("{}.narrow.json", rec.id)), t)?;
            write_atomic(&out.join(format!("{}.narrow.csv", rec.id)), &narrow_csv(t)?)?;
            if let Some(why) = &t.stopped_early {
                warn!("{}: stopped early: {why}", rec.id);
            }
        }
        Ok::<_, std::io::Error>(r)
    });
    let mut failed = Vec::new();
    for (rec, r) in records.iter().zip(results) {
        if let Err(e) = r? {
            warn!("{}: {e}", rec.id);
            failed.push(Failure {
                id: rec.id.clone(),
                kind: FailureKind::of_eval(&e),
                message: e.to_string(),
            });
        }
    }
    let summary = RunSummary::new("narrow", records.len(), failed);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn narrow_csv(t: &NarrowingTrace) -> std::io::Result<Vec<u8>> {
    let mut rows = vec![["step", "n_active", "mean_aopc", "optimal", "frozen", "focus_mask"]
        .map(String::from)
        .to_vec()];
    for (i, s) in t.steps.iter().enumerate() {
        rows.push(vec![
            s.step.to_string(),
            s.n_active.to_string(),
            s.mean_aopc.to_string(),
            (i == t.optimal_index).to_string(),
            s.frozen.map(|j| j.to_string()).unwrap_or_default(),
            s.focus_mask.iter().map(|b| b.to_string()).collect(),
        ]);
    }
    csv_bytes(rows)
}

/// Explanation files in `dir`, sorted by name.
pub fn explanation_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && name != "summary.json" && !name.ends_with(".narrow.json")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Renders an HTML page next to (or into `out` for) every explanation JSON.
pub fn report(dir: &Path, out: &Path) -> std::io::Result<RunSummary> {
    std::fs::create_dir_all(out)?;
    let files = explanation_files(dir)?;
    let mut failed = Vec::new();
    for path in &files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unnamed");
        let html = match ExplanationRecord::load(path) {
            Ok(x) => report::render(&x),
            Err(message) => {
                warn!("{message}");
                failed.push(Failure {
                    id: stem.to_string(),
                    kind: FailureKind::Record,
                    message: message.clone(),
                });
                report::render_error(&format!("{stem}.json"), &message)
            }
        };
        write_atomic(&out.join(format!("{stem}.html")), html.as_bytes())?;
    }
    Ok(RunSummary::new("report", files.len(), failed))
}
