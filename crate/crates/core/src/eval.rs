//! Deletion-based faithfulness (AOPC), evidence recall, and the greedy
//! neighborhood-narrowing study.
//!
//! AOPC drops are signed: a deletion that raises the target probability
//! contributes a negative term. When `k` exceeds a document's unit count the
//! whole document is deleted and that value still enters the mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::focus::{scrutinize, Budgets, ExplainConfig, FocusError};
use crate::models::{Budget, ModelClient, ModelError, Query};
use crate::perturb::{apply_mask_with, FocusMask, Mask, MaskMode, PerturbError};
use crate::rng::mix;
use crate::segment::Document;
use crate::surrogate::{top_k_features, Attribution};

pub const DEFAULT_K_MAX_EVAL: usize = 100;

/// Default recall ratios.
pub const RATIOS_DEFAULT: [f64; 3] = [1.0, 1.5, 2.0];
/// Alternative preset starting below the evidence length.
pub const RATIOS_ALT: [f64; 3] = [0.5, 1.5, 2.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{id}: no evidence units")]
    NoEvidence { id: String },
    #[error("{id}: attribution has {got} scores for {expected} units")]
    LengthMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("budget exhausted after {count} examples (partial mean {partial_mean})")]
    BudgetExhausted {
        partial_mean: f64,
        count: usize,
        #[source]
        source: ModelError,
    },
    #[error("model error: {0}")]
    Model(ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Focus(#[from] FocusError),
    #[error("narrowing needs at least one step")]
    NoSteps,
}

impl EvalError {
    pub fn is_budget(&self) -> bool {
        match self {
            EvalError::BudgetExhausted { .. } => true,
            EvalError::Focus(f) => f.is_budget(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub doc: &'a Document,
    pub attribution: &'a Attribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k_max_eval: usize,
    pub mask_mode: MaskMode,
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k_max_eval: DEFAULT_K_MAX_EVAL,
            mask_mode: MaskMode::Delete,
            parallelism: 4,
        }
    }
}

fn check_len(doc: &Document, attr: &Attribution) -> Result<(), EvalError> {
    if attr.len() != doc.len() {
        return Err(EvalError::LengthMismatch {
            id: doc.id.clone(),
            expected: doc.len(),
            got: attr.len(),
        });
    }
    Ok(())
}

/// The document with its `k` highest-scoring units removed. `k = 0` gives the
/// normalized original.
pub fn delete_top_k(
    doc: &Document,
    attr: &Attribution,
    k: usize,
    mode: &MaskMode,
) -> Result<String, EvalError> {
    check_len(doc, attr)?;
    let mut mask = Mask::ones(doc.len());
    if k > 0 {
        for i in top_k_features(attr, k) {
            mask.bits[i] = false;
        }
    }
    Ok(apply_mask_with(&mask, doc, mode)?)
}

/// Base probability and `p(x) - p(x^(k))` for each requested `k`.
fn example_drops(
    client: &ModelClient,
    item: &EvalItem<'_>,
    ks: &[usize],
    budget: &Budget,
    opts: &EvalOptions,
) -> Result<(f64, Vec<f64>), EvalError> {
    let doc = item.doc;
    let n = doc.len();
    let mut texts = vec![delete_top_k(doc, item.attribution, 0, &opts.mask_mode)?];
    for &k in ks {
        texts.push(delete_top_k(doc, item.attribution, k.min(n), &opts.mask_mode)?);
    }
    let queries: Vec<Query> = texts
        .iter()
        .map(|t| Query {
            document: t,
            question: &doc.meta.question,
            label: doc.meta.answer,
        })
        .collect();
    let preds = client
        .batch_query(&queries, budget, opts.parallelism)
        .map_err(|e| EvalError::Model(e.error))?;
    let base = preds[0].probability;
    Ok((base, preds[1..].iter().map(|p| base - p.probability).collect()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn budget_failure(e: EvalError, done: &[f64]) -> EvalError {
    match e {
        EvalError::Model(source) if source.is_budget() => EvalError::BudgetExhausted {
            partial_mean: if done.is_empty() { 0.0 } else { mean(done) },
            count: done.len(),
            source,
        },
        other => other,
    }
}

/// Mean probability drop after deleting the top `k` units of each example.
pub fn aopc_k(
    client: &ModelClient,
    items: &[EvalItem<'_>],
    k: usize,
    budget: &Budget,
    opts: &EvalOptions,
) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut drops = Vec::with_capacity(items.len());
    for item in items {
        match example_drops(client, item, &[k], budget, opts) {
            Ok((_, d)) => drops.push(d[0]),
            Err(e) => return Err(budget_failure(e, &drops)),
        }
    }
    Ok(mean(&drops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleCurve {
    pub id: String,
    pub n_units: usize,
    pub base: f64,
    /// `drops[k - 1] = p(x) - p(x^(k))`.
    pub drops: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopcCurve {
    pub k_max_eval: usize,
    /// `per_k[k - 1]` is the dataset mean of the drop at `k`.
    pub per_k: Vec<f64>,
    pub aopc: f64,
    pub aopc_10: Option<f64>,
    pub aopc_50: Option<f64>,
    pub aopc_100: Option<f64>,
    pub examples: Vec<ExampleCurve>,
}

impl AopcCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.per_k.get(i)).copied()
    }

    /// Aggregate per-example curves (all of length `k_max_eval`).
    pub fn from_examples(k_max_eval: usize, examples: Vec<ExampleCurve>) -> Self {
        let per_k: Vec<f64> = (0..k_max_eval)
            .map(|i| examples.iter().map(|e| e.drops[i]).sum::<f64>() / examples.len() as f64)
            .collect();
        let at = |k: usize| per_k.get(k - 1).copied();
        AopcCurve {
            k_max_eval,
            aopc: mean(&per_k),
            aopc_10: at(10),
            aopc_50: at(50),
            aopc_100: at(100),
            per_k,
            examples,
        }
    }
}

/// AOPC_k for `k = 1..=k_max_eval` plus their mean.
pub fn aopc_summary(
    client: &ModelClient,
    items: &[EvalItem<'_>],
    budget: &Budget,
    opts: &EvalOptions,
) -> Result<AopcCurve, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let ks: Vec<usize> = (1..=opts.k_max_eval.max(1)).collect();
    let mut examples = Vec::with_capacity(items.len());
    for item in items {
        match example_drops(client, item, &ks, budget, opts) {
            Ok((base, drops)) => examples.push(ExampleCurve {
                id: item.doc.id.clone(),
                n_units: item.doc.len(),
                base,
                mean: mean(&drops),
                drops,
            }),
            Err(e) => {
                let done: Vec<f64> = examples.iter().map(|e| e.mean).collect();
                return Err(budget_failure(e, &done));
            }
        }
    }
    Ok(AopcCurve::from_examples(ks.len(), examples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub ratio: f64,
    pub k: usize,
    pub retrieved: usize,
    pub recall: f64,
}

/// Fraction of evidence units among the top `ceil(ratio * e)` attributed
/// units, where `e` is the evidence word count.
pub fn recall_at_ratio(
    doc: &Document,
    attr: &Attribution,
    ratio: f64,
) -> Result<RecallPoint, EvalError> {
    check_len(doc, attr)?;
    let evidence = doc.evidence_units();
    let e = evidence.len();
    if e == 0 {
        return Err(EvalError::NoEvidence { id: doc.id.clone() });
    }
    // The epsilon keeps ratio * e from rounding up past an exact integer.
    let k = ((ratio * e as f64 - 1e-9).ceil().max(0.0) as usize).min(doc.len());
    let top = if k == 0 { Vec::new() } else { top_k_features(attr, k) };
    let retrieved = top.iter().filter(|i| evidence.binary_search(i).is_ok()).count();
    Ok(RecallPoint {
        ratio,
        k,
        retrieved,
        recall: retrieved as f64 / e as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecall {
    pub id: String,
    pub evidence_words: usize,
    pub points: Vec<RecallPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub ratios: Vec<f64>,
    pub examples: Vec<ExampleRecall>,
    /// Mean recall per ratio over the examples that were not skipped.
    pub mean_recall: Vec<f64>,
    pub skipped: Vec<Skipped>,
}

pub fn alignment_report(items: &[EvalItem<'_>], ratios: &[f64]) -> AlignmentReport {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        let points: Result<Vec<_>, _> = ratios
            .iter()
            .map(|&r| recall_at_ratio(item.doc, item.attribution, r))
            .collect();
        match points {
            Ok(points) => examples.push(ExampleRecall {
                id: item.doc.id.clone(),
                evidence_words: item.doc.evidence_units().len(),
                points,
            }),
            Err(e) => skipped.push(Skipped {
                id: item.doc.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mean_recall = (0..ratios.len())
        .map(|j| {
            if examples.is_empty() {
                0.0
            } else {
                examples.iter().map(|e| e.points[j].recall).sum::<f64>() / examples.len() as f64
            }
        })
        .collect();
    AlignmentReport {
        ratios: ratios.to_vec(),
        examples,
        mean_recall,
        skipped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrowingConfig {
    pub steps: usize,
    /// Samples per fit, for both the proxy and the target.
    pub k_per_step: usize,
    pub seed: u64,
    #[serde(default = "default_k_max_eval")]
    pub k_max_eval: usize,
}

fn default_k_max_eval() -> usize {
    DEFAULT_K_MAX_EVAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrowingStep {
    pub step: usize,
    pub n_active: usize,
    pub focus_mask: Vec<u8>,
    /// Unit frozen to reach this step (none at step 0).
    pub frozen: Option<usize>,
    pub attribution: Attribution,
    /// Target drops for `k = 1..=min(k_max_eval, n_active)`.
    pub curve: Vec<f64>,
    pub mean_aopc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrowingTrace {
    pub id: String,
    pub steps: Vec<NarrowingStep>,
    pub optimal_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early: Option<String>,
}

/// Active unit with the smallest `|score|`; ties go to the later position.
pub fn least_important(attr: &Attribution, focus: &FocusMask) -> Option<usize> {
    focus
        .active_indices()
        .into_iter()
        .min_by(|&a, &b| {
            attr.scores[a]
                .abs()
                .total_cmp(&attr.scores[b].abs())
                .then(b.cmp(&a))
        })
}

/// Greedily freeze the unit the proxy deems least important, one per step,
/// recording the target explanation and its AOPC along the way.
pub fn narrowing_study(
    doc: &Document,
    target: &ModelClient,
    proxy: &ModelClient,
    cfg: &ExplainConfig,
    ncfg: &NarrowingConfig,
    budgets: Budgets<'_>,
) -> Result<NarrowingTrace, EvalError> {
    if ncfg.steps == 0 {
        return Err(EvalError::NoSteps);
    }
    let opts = EvalOptions {
        k_max_eval: ncfg.k_max_eval,
        mask_mode: cfg.mask_mode.clone(),
        parallelism: cfg.parallelism,
    };
    let record = |step: usize, focus: &FocusMask, frozen: Option<usize>| {
        let s = scrutinize(
            doc,
            focus,
            target,
            ncfg.k_per_step,
            mix(ncfg.seed, 2 * step as u64),
            budgets.target,
            cfg,
        )?;
        let n_active = focus.n_active();
        let ks: Vec<usize> = (1..=ncfg.k_max_eval.min(n_active).max(1)).collect();
        let item = EvalItem {
            doc,
            attribution: &s.attribution,
        };
        let (_, curve) = example_drops(target, &item, &ks, budgets.eval, &opts)?;
        Ok::<_, EvalError>(NarrowingStep {
            step,
            n_active,
            focus_mask: focus.to_u8(),
            frozen,
            mean_aopc: mean(&curve),
            attribution: s.attribution,
            curve,
        })
    };

    let mut focus = FocusMask::all_active(doc.len());
    let mut steps = vec![record(0, &focus, None)?];
    let mut stopped_early = None;
    for step in 1..=ncfg.steps {
        if focus.n_active() <= 1 {
            stopped_early = Some(format!("one active unit left before step {step}"));
            break;
        }
        let advance = || {
            let guide = scrutinize(
                doc,
                &focus,
                proxy,
                ncfg.k_per_step,
                mix(ncfg.seed, 2 * step as u64 - 1),
                budgets.proxy,
                cfg,
            )?;
            let j = least_important(&guide.attribution, &focus).expect("focus has active units");
            let mut next = focus.clone();
            next.bits[j] = false;
            let rec = record(step, &next, Some(j))?;
            Ok::<_, EvalError>((next, rec))
        };
        match advance() {
            Ok((next, rec)) => {
                focus = next;
                steps.push(rec);
            }
            Err(e) if e.is_budget() || matches!(&e, EvalError::Model(m) if m.is_budget()) => {
                stopped_early = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let optimal_index = steps
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if s.mean_aopc > steps[best].mean_aopc { i } else { best });
    Ok(NarrowingTrace {
        id: doc.id.clone(),
        steps,
        optimal_index,
        stopped_early,
    })
}
