//! Two-phase explanation: proxy-guided scouting, then target scrutiny.
//!
//! Phase I starts from the whole document and repeatedly splits the surviving
//! candidates one level finer (paragraphs, then sentences, ...), scores the
//! pieces with a surrogate fitted on proxy-model queries, and keeps the
//! top `k_t`. It stops once the surviving words are few enough for the target
//! sample budget (`words * density_floor <= K`), after `max_iter` rounds, or
//! at the deepest configured level. The survivors become the focus mask.
//!
//! Phase II perturbs only the focus-mask words, queries the target model and
//! fits the final surrogate. Phase I never touches the target budget.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::models::{k_max, Budget, BudgetSnapshot, ModelClient, ModelError, Query};
use crate::perturb::{
    apply_mask_with, sample_constrained, sample_unconstrained, FocusMask, Mask, MaskMode,
    PerturbError,
};
use crate::rng::mix;
use crate::segment::{decompose, Document, Level, Segment, SegmentError};
use crate::surrogate::{
    fit, fit_forward, kernel_weight, to_attribution, top_k_features, Attribution, FitSample,
    KernelConfig, SurrogateError, SurrogateFit, DEFAULT_LAMBDA,
};

#[derive(Debug, Error)]
pub enum FocusError {
    #[error("document has no word units")]
    EmptyDocument,
    #[error("{phase}: {source}")]
    BudgetExhausted {
        phase: &'static str,
        #[source]
        source: ModelError,
    },
    #[error("model error: {0}")]
    Model(ModelError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("need at least {needed} samples, have {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

impl FocusError {
    pub fn is_budget(&self) -> bool {
        matches!(self, FocusError::BudgetExhausted { .. })
    }

    fn from_model(phase: &'static str, e: ModelError) -> Self {
        if e.is_budget() {
            FocusError::BudgetExhausted { phase, source: e }
        } else {
            FocusError::Model(e)
        }
    }
}

/// Units kept per level during scouting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KSchedule {
    #[serde(default = "d_k_paragraph")]
    pub paragraph: usize,
    #[serde(default = "d_k_sentence")]
    pub sentence: usize,
    #[serde(default = "d_k_word")]
    pub word: usize,
}

fn d_k_paragraph() -> usize {
    3
}
fn d_k_sentence() -> usize {
    5
}
fn d_k_word() -> usize {
    20
}

impl Default for KSchedule {
    fn default() -> Self {
        KSchedule {
            paragraph: d_k_paragraph(),
            sentence: d_k_sentence(),
            word: d_k_word(),
        }
    }
}

impl KSchedule {
    pub fn for_level(&self, level: Level) -> usize {
        match level {
            Level::Document => 1,
            Level::Paragraph => self.paragraph,
            Level::Sentence => self.sentence,
            Level::Word => self.word,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoutConfig {
    #[serde(default)]
    pub k_schedule: KSchedule,
    #[serde(default = "d_per_unit")]
    pub proxy_samples_per_unit: usize,
    #[serde(default = "d_cap")]
    pub proxy_samples_cap: usize,
    /// Minimum target samples per active word.
    #[serde(default = "d_density")]
    pub density_floor: usize,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_deepest")]
    pub deepest_level: Level,
}

fn d_per_unit() -> usize {
    10
}
fn d_cap() -> usize {
    500
}
fn d_density() -> usize {
    5
}
fn d_max_iter() -> usize {
    3
}
fn d_deepest() -> Level {
    Level::Sentence
}

impl Default for ScoutConfig {
    fn default() -> Self {
        ScoutConfig {
            k_schedule: KSchedule::default(),
            proxy_samples_per_unit: d_per_unit(),
            proxy_samples_cap: d_cap(),
            density_floor: d_density(),
            max_iter: d_max_iter(),
            deepest_level: d_deepest(),
        }
    }
}

impl ScoutConfig {
    pub fn validate(&self) -> Result<(), String> {
        let k = &self.k_schedule;
        let counts = [
            ("k_schedule.paragraph", k.paragraph),
            ("k_schedule.sentence", k.sentence),
            ("k_schedule.word", k.word),
            ("proxy_samples_per_unit", self.proxy_samples_per_unit),
            ("proxy_samples_cap", self.proxy_samples_cap),
            ("density_floor", self.density_floor),
            ("max_iter", self.max_iter),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(format!("scout.{name} must be >= 1"));
            }
        }
        if self.deepest_level == Level::Document {
            return Err("scout.deepest_level must be paragraph, sentence or word".into());
        }
        Ok(())
    }

    /// Proxy samples for a valuation over `m` units.
    pub fn proxy_samples(&self, m: usize) -> usize {
        (self.proxy_samples_per_unit * m).min(self.proxy_samples_cap).max(2)
    }
}

/// Everything besides the models and budgets that shapes an explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    pub scout: ScoutConfig,
    pub kernel: KernelConfig,
    pub lambda: f64,
    /// Sample count used when a budget is unlimited.
    pub max_samples: usize,
    pub parallelism: usize,
    pub mask_mode: MaskMode,
    /// Cap on nonzero coefficients (greedy forward selection); `None` = plain ridge.
    pub max_features: Option<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            scout: ScoutConfig::default(),
            kernel: KernelConfig::default(),
            lambda: DEFAULT_LAMBDA,
            max_samples: 1000,
            parallelism: 4,
            mask_mode: MaskMode::Delete,
            max_features: None,
        }
    }
}

/// Budgets charged by one explanation (and its evaluation).
#[derive(Debug, Clone, Copy)]
pub struct Budgets<'a> {
    pub target: &'a Budget,
    pub proxy: &'a Budget,
    pub eval: &'a Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Proxy scouting, then target scrutiny in the focus region.
    Focus,
    /// Target scrutiny over the whole document.
    Lime,
    /// Proxy scrutiny over the whole document.
    ProxyOnly,
    /// Scouting performed by the target model itself.
    FocusNoProxy,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Focus => "focus",
            Method::Lime => "lime",
            Method::ProxyOnly => "proxy-only",
            Method::FocusNoProxy => "focus-no-proxy",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "focus" => Ok(Method::Focus),
            "lime" => Ok(Method::Lime),
            "proxy-only" => Ok(Method::ProxyOnly),
            "focus-no-proxy" => Ok(Method::FocusNoProxy),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Half-open unit range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpan {
    pub start: usize,
    pub end: usize,
}

impl From<&Segment> for UnitSpan {
    fn from(s: &Segment) -> Self {
        UnitSpan {
            start: s.start,
            end: s.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoutIteration {
    pub t: usize,
    pub level: Level,
    pub units: Vec<UnitSpan>,
    /// Proxy scores per unit; absent when every unit survived without scoring.
    pub scores: Option<Vec<f64>>,
    pub kept: Vec<UnitSpan>,
    /// Word units covered by `kept`.
    pub coverage: usize,
    pub proxy_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Density,
    MaxIter,
    DeepestLevel,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoutTrace {
    pub initial_coverage: usize,
    pub iterations: Vec<ScoutIteration>,
    pub stop: StopReason,
    pub k_target: usize,
    pub density_floor: usize,
    pub n_active: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl ScoutTrace {
    /// Coverage after each round, starting with the whole document.
    pub fn coverage_path(&self) -> Vec<usize> {
        std::iter::once(self.initial_coverage)
            .chain(self.iterations.iter().map(|i| i.coverage))
            .collect()
    }
}

/// Snapshot of the scouting loop consulted by [`termination_check`].
#[derive(Debug, Clone)]
pub struct ScoutState {
    pub t: usize,
    pub level: Level,
    pub candidates: Vec<Segment>,
}

impl ScoutState {
    pub fn coverage(&self) -> usize {
        self.candidates.iter().map(Segment::width).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Stop(StopReason),
    Continue,
}

pub fn termination_check(state: &ScoutState, k_target: usize, cfg: &ScoutConfig) -> Decision {
    if state.coverage() * cfg.density_floor <= k_target {
        Decision::Stop(StopReason::Density)
    } else if state.t >= cfg.max_iter {
        Decision::Stop(StopReason::MaxIter)
    } else if state.level >= cfg.deepest_level {
        Decision::Stop(StopReason::DeepestLevel)
    } else {
        Decision::Continue
    }
}

/// The `k` best-scoring units (ties to the earlier unit), in document order.
pub fn top_k_filter(units: &[Segment], scores: &[f64], k: usize) -> Vec<Segment> {
    let mut keep = top_k_features(&Attribution::from_scores(scores.to_vec()), k.max(1));
    keep.sort_unstable();
    keep.into_iter().map(|i| units[i].clone()).collect()
}

fn word_mask_for_units(n: usize, units: &[Segment], unit_mask: &Mask) -> Mask {
    let mut m = Mask::ones(n);
    for (u, &keep) in units.iter().zip(&unit_mask.bits) {
        if !keep {
            m.bits[u.start..u.end].iter_mut().for_each(|b| *b = false);
        }
    }
    m
}

fn query_texts(
    doc: &Document,
    client: &ModelClient,
    texts: &[String],
    budget: &Budget,
    parallelism: usize,
) -> Result<Vec<f64>, crate::models::BatchError> {
    let queries: Vec<Query> = texts
        .iter()
        .map(|t| Query {
            document: t,
            question: &doc.meta.question,
            label: doc.meta.answer,
        })
        .collect();
    client
        .batch_query(&queries, budget, parallelism)
        .map(|v| v.into_iter().map(|p| p.probability).collect())
}

fn fit_samples(
    masks: &[Mask],
    predictions: &[f64],
    weights: &[f64],
    focus: &FocusMask,
    cfg: &ExplainConfig,
) -> Result<SurrogateFit, SurrogateError> {
    let samples: Vec<FitSample> = masks
        .iter()
        .zip(predictions)
        .zip(weights)
        .map(|((mask, &prediction), &weight)| FitSample {
            mask,
            prediction,
            weight,
        })
        .collect();
    match cfg.max_features {
        Some(cap) => fit_forward(&samples, focus, cfg.lambda, cap),
        None => fit(&samples, focus, cfg.lambda),
    }
}

/// Score each unit as one binary feature using the proxy model.
pub fn proxy_valuation(
    doc: &Document,
    units: &[Segment],
    proxy: &ModelClient,
    samples: usize,
    seed: u64,
    budget: &Budget,
    cfg: &ExplainConfig,
) -> Result<Vec<f64>, FocusError> {
    if units.is_empty() {
        return Ok(Vec::new());
    }
    let unit_masks = sample_unconstrained(units.len(), samples, seed);
    value_units(doc, units, &unit_masks, proxy, budget, cfg)
}

/// [`proxy_valuation`] over caller-supplied unit masks.
pub fn value_units(
    doc: &Document,
    units: &[Segment],
    unit_masks: &[Mask],
    client: &ModelClient,
    budget: &Budget,
    cfg: &ExplainConfig,
) -> Result<Vec<f64>, FocusError> {
    let texts = unit_masks
        .iter()
        .map(|um| apply_mask_with(&word_mask_for_units(doc.len(), units, um), doc, &cfg.mask_mode))
        .collect::<Result<Vec<_>, _>>()?;
    let preds = query_texts(doc, client, &texts, budget, cfg.parallelism)
        .map_err(|e| FocusError::from_model("proxy valuation", e.error))?;
    let all = FocusMask::all_active(units.len());
    let weights = unit_masks
        .iter()
        .map(|um| kernel_weight(um, &all, &cfg.kernel))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fit_samples(unit_masks, &preds, &weights, &all, cfg)?.coefficients)
}

#[derive(Debug, Clone)]
pub struct ScoutOutcome {
    pub focus: FocusMask,
    pub trace: ScoutTrace,
}

/// Phase I. Never returns an empty focus mask.
pub fn scout(
    doc: &Document,
    proxy: &ModelClient,
    k_target: usize,
    cfg: &ExplainConfig,
    seed: u64,
    budget: &Budget,
) -> Result<ScoutOutcome, FocusError> {
    if doc.is_empty() {
        return Err(FocusError::EmptyDocument);
    }
    let sc = &cfg.scout;
    let mut state = ScoutState {
        t: 0,
        level: Level::Document,
        candidates: vec![Segment::root(doc)],
    };
    let mut iterations = Vec::new();
    let mut warning = None;

    let stop = loop {
        if state.t == 0 && state.coverage() * sc.density_floor <= k_target {
            break StopReason::Density;
        }
        let Some(next_level) = state.level.child() else {
            break StopReason::DeepestLevel;
        };
        let t = state.t + 1;
        let mut units = Vec::new();
        for c in &state.candidates {
            units.extend(decompose(doc, c, next_level)?);
        }
        let k_t = sc.k_schedule.for_level(next_level);
        let (scores, kept, samples) = if units.len() > k_t {
            let samples = sc.proxy_samples(units.len());
            match proxy_valuation(doc, &units, proxy, samples, mix(seed, t as u64), budget, cfg) {
                Ok(scores) => {
                    let kept = top_k_filter(&units, &scores, k_t);
                    (Some(scores), kept, samples)
                }
                Err(e) if e.is_budget() => {
                    warning = Some(format!(
                        "proxy budget exhausted during iteration {t}; using the candidates of iteration {}",
                        t - 1
                    ));
                    break StopReason::BudgetExhausted;
                }
                Err(e) => return Err(e),
            }
        } else {
            (None, units.clone(), 0)
        };
        state = ScoutState {
            t,
            level: next_level,
            candidates: kept,
        };
        iterations.push(ScoutIteration {
            t,
            level: next_level,
            units: units.iter().map(UnitSpan::from).collect(),
            scores,
            kept: state.candidates.iter().map(UnitSpan::from).collect(),
            coverage: state.coverage(),
            proxy_samples: samples,
        });
        if let Decision::Stop(reason) = termination_check(&state, k_target, sc) {
            break reason;
        }
    };

    let focus = FocusMask::from_active(
        doc.len(),
        state.candidates.iter().flat_map(|s| s.start..s.end),
    );
    let trace = ScoutTrace {
        initial_coverage: doc.len(),
        iterations,
        stop,
        k_target,
        density_floor: sc.density_floor,
        n_active: focus.n_active(),
        warning,
    };
    Ok(ScoutOutcome { focus, trace })
}

#[derive(Debug, Clone)]
pub struct Scrutiny {
    pub attribution: Attribution,
    pub fit: SurrogateFit,
    pub anchor_probability: f64,
    pub samples_requested: usize,
    /// Set when the budget ran out and the fit used a prefix of the samples.
    pub truncated: bool,
}

/// Phase II: constrained perturbation inside `focus`, then the surrogate fit.
pub fn scrutinize(
    doc: &Document,
    focus: &FocusMask,
    client: &ModelClient,
    k: usize,
    seed: u64,
    budget: &Budget,
    cfg: &ExplainConfig,
) -> Result<Scrutiny, FocusError> {
    if focus.n_active() == 0 {
        return Err(PerturbError::DegenerateFocus.into());
    }
    if k < 2 {
        return Err(FocusError::InsufficientSamples { needed: 2, got: k });
    }
    let masks = sample_constrained(focus, k, seed)?;
    scrutinize_masks(doc, focus, client, &masks, budget, cfg)
}

/// [`scrutinize`] over caller-supplied masks (which must respect `focus`).
pub fn scrutinize_masks(
    doc: &Document,
    focus: &FocusMask,
    client: &ModelClient,
    masks: &[Mask],
    budget: &Budget,
    cfg: &ExplainConfig,
) -> Result<Scrutiny, FocusError> {
    let n_active = focus.n_active();
    if n_active == 0 {
        return Err(PerturbError::DegenerateFocus.into());
    }
    let texts = masks
        .iter()
        .map(|m| apply_mask_with(m, doc, &cfg.mask_mode))
        .collect::<Result<Vec<_>, _>>()?;
    let (preds, truncated) = match query_texts(doc, client, &texts, budget, cfg.parallelism) {
        Ok(p) => (p, false),
        Err(e) if e.error.is_budget() => {
            let needed = (n_active + 1).max(2);
            if e.completed.len() < needed {
                return Err(FocusError::BudgetExhausted {
                    phase: "target scrutiny",
                    source: e.error,
                });
            }
            (e.completed.into_iter().map(|p| p.probability).collect(), true)
        }
        Err(e) => return Err(FocusError::Model(e.error)),
    };
    let masks = &masks[..preds.len()];
    let weights = masks
        .iter()
        .map(|m| kernel_weight(m, focus, &cfg.kernel))
        .collect::<Result<Vec<_>, _>>()?;
    let fit = fit_samples(masks, &preds, &weights, focus, cfg)?;
    let attribution = to_attribution(&fit, focus)?;
    Ok(Scrutiny {
        attribution,
        fit,
        anchor_probability: preds[0],
        samples_requested: texts.len(),
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub samples: usize,
    pub samples_requested: usize,
    pub truncated: bool,
    pub n_active: usize,
    /// Samples per active unit.
    pub density: f64,
    pub intercept: f64,
    pub lambda: f64,
    pub lambda_bumped: bool,
    pub weighted_r2: f64,
    pub anchor_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub prompt_cost: u64,
    pub k_target: usize,
    pub k_used: usize,
    pub target_limit: u64,
    /// Target tokens charged while scouting.
    pub target_tokens_scout: u64,
    pub target_tokens_scrutinize: u64,
    pub target_tokens_total: u64,
    pub proxy_limit: u64,
    pub proxy_tokens: u64,
    pub target: BudgetSnapshot,
    pub proxy: BudgetSnapshot,
}

fn serialize_bits<S: Serializer>(m: &FocusMask, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(m.bits.iter().map(|&b| b as u8))
}

#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    pub method: Method,
    pub attribution: Attribution,
    #[serde(serialize_with = "serialize_bits")]
    pub focus_mask: FocusMask,
    pub scout: Option<ScoutTrace>,
    pub fit: FitDiagnostics,
    pub budget: BudgetReport,
}

pub struct Explainer<'a> {
    pub target: &'a ModelClient,
    pub proxy: &'a ModelClient,
    pub cfg: &'a ExplainConfig,
}

impl<'a> Explainer<'a> {
    pub fn new(target: &'a ModelClient, proxy: &'a ModelClient, cfg: &'a ExplainConfig) -> Self {
        Explainer { target, proxy, cfg }
    }

    pub fn explain(
        &self,
        doc: &Document,
        method: Method,
        seed: u64,
        budgets: Budgets<'_>,
    ) -> Result<Explanation, FocusError> {
        if doc.is_empty() {
            return Err(FocusError::EmptyDocument);
        }
        let full = apply_mask_with(&Mask::ones(doc.len()), doc, &self.cfg.mask_mode)?;
        let anchor = Query {
            document: &full,
            question: &doc.meta.question,
            label: doc.meta.answer,
        };
        let (client, budget) = match method {
            Method::ProxyOnly => (self.proxy, budgets.proxy),
            _ => (self.target, budgets.target),
        };
        let prompt_cost = client.cost(&anchor);
        let k_target = k_max(budget, prompt_cost, self.cfg.max_samples);
        if k_target == 0 {
            return Err(FocusError::BudgetExhausted {
                phase: "setup",
                source: ModelError::BudgetExhausted {
                    limit: budget.limit(),
                    consumed: budget.consumed(),
                    requested: prompt_cost,
                },
            });
        }

        let target_before = budgets.target.consumed();
        let scout_seed = mix(seed, 1);
        let (focus, trace) = match method {
            Method::Focus => {
                let o = scout(doc, self.proxy, k_target, self.cfg, scout_seed, budgets.proxy)?;
                (o.focus, Some(o.trace))
            }
            Method::FocusNoProxy => {
                let o = scout(doc, self.target, k_target, self.cfg, scout_seed, budgets.target)?;
                (o.focus, Some(o.trace))
            }
            Method::Lime | Method::ProxyOnly => (FocusMask::all_active(doc.len()), None),
        };
        let target_after_scout = budgets.target.consumed();

        let k = match method {
            Method::FocusNoProxy => k_target.min(k_max(budget, prompt_cost, self.cfg.max_samples)),
            _ => k_target,
        };
        let s = scrutinize(doc, &focus, client, k, mix(seed, 2), budget, self.cfg)?;
        let target_end = budgets.target.consumed();

        let n_active = focus.n_active();
        let fit = FitDiagnostics {
            samples: s.fit.samples,
            samples_requested: s.samples_requested,
            truncated: s.truncated,
            n_active,
            density: s.fit.samples as f64 / n_active as f64,
            intercept: s.fit.intercept,
            lambda: s.fit.lambda,
            lambda_bumped: s.fit.lambda_bumped,
            weighted_r2: s.fit.weighted_r2,
            anchor_probability: s.anchor_probability,
        };
        let target = budgets.target.snapshot();
        let proxy = budgets.proxy.snapshot();
        let budget = BudgetReport {
            prompt_cost,
            k_target,
            k_used: s.fit.samples,
            target_limit: budgets.target.limit(),
            target_tokens_scout: target_after_scout - target_before,
            target_tokens_scrutinize: target_end - target_after_scout,
            target_tokens_total: target_end - target_before,
            proxy_limit: budgets.proxy.limit(),
            proxy_tokens: proxy.consumed,
            target,
            proxy,
        };
        Ok(Explanation {
            method,
            attribution: s.attribution,
            focus_mask: focus,
            scout: trace,
            fit,
            budget,
        })
    }
}
