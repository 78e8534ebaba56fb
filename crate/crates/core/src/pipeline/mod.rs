//! Orchestration of summary generation, repetition sampling, the judge
//! chain (extract, classify, match inclusion), and preliminary bias
//! scoring.
//!
//! Every operation is deterministic given a gateway in replay mode and the
//! configured seeds: work items run on a bounded worker pool, results are
//! reassembled in input order, and all randomness flows through
//! [`crate::seeded`].

mod modeljson;

pub use modeljson::{
    parse_model_json, FactItem, LabelItem, ParseError, ParsedResponse, ReasoningItem,
    ResponseSchema, VerdictItem,
};

/// First balanced JSON array inside `raw`, if any. Exposed for transports
/// and tooling that need to read element lists back out of rendered
/// prompts.
pub fn first_array_in(raw: &str) -> Option<Vec<serde_json::Value>> {
    modeljson::first_json_array(raw)
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Case, Corpus, Domain, Role};
use crate::gateway::{ChatMessage, CompletionRequest, Gateway, GatewayError};
use crate::promptkit::{
    render_eval_prompt, render_generation_prompt, render_preliminary_bias_prompt, ElementKind,
    EvalStep, PromptError, TemplateSet,
};
use crate::seeded;

/// One generated summary for a (case, role, model, repetition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub summary_id: String,
    pub case_id: String,
    pub role: Role,
    pub gen_model: String,
    pub rep_index: u32,
    pub text: String,
}

/// Favorability of an element toward the domain's stakeholder anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Favorability {
    Favorable,
    Unfavorable,
    Neutral,
}

impl Favorability {
    pub fn as_str(&self) -> &'static str {
        match self {
            Favorability::Favorable => "favorable",
            Favorability::Unfavorable => "unfavorable",
            Favorability::Neutral => "neutral",
        }
    }
}

/// One extracted fact or reasoning element. Fact elements never carry
/// party/legal-issue/cited-law metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedElement {
    pub element_id: i64,
    pub kind: ElementKind,
    pub text: String,
    #[serde(default)]
    pub party: Option<String>,
    #[serde(default)]
    pub legal_issue: Option<String>,
    #[serde(default)]
    pub cited_law: Vec<String>,
    #[serde(default)]
    pub favorability: Option<Favorability>,
}

impl ExtractedElement {
    fn from_fact(item: FactItem) -> Self {
        ExtractedElement {
            element_id: item.id,
            kind: ElementKind::Fact,
            text: item.fact,
            party: None,
            legal_issue: None,
            cited_law: Vec::new(),
            favorability: None,
        }
    }

    fn from_reasoning(item: ReasoningItem) -> Self {
        ExtractedElement {
            element_id: item.id,
            kind: ElementKind::Reasoning,
            text: item.reasoning,
            party: item.party,
            legal_issue: item.legal_issue,
            cited_law: item.cited_law,
            favorability: None,
        }
    }
}

/// Boolean inclusion of one element in one summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionVerdict {
    pub element_id: i64,
    pub summary_id: String,
    pub included: bool,
}

/// One (generation, extraction, inclusion) model combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSpec {
    pub gen_model: String,
    pub extract_model: String,
    pub include_model: String,
    pub kind: ElementKind,
    /// Favorability classifier; defaults to `extract_model`.
    #[serde(default)]
    pub classify_model: Option<String>,
}

impl ComboSpec {
    pub fn classifier(&self) -> &str {
        self.classify_model.as_deref().unwrap_or(&self.extract_model)
    }

    pub fn combo_id(&self) -> String {
        format!(
            "{}+{}+{}+{}+{}",
            self.gen_model,
            self.extract_model,
            self.classifier(),
            self.include_model,
            self.kind
        )
    }
}

/// 0-10 omission-bias rating of a tailored summary against a neutral one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreliminaryBiasScore {
    pub case_id: String,
    pub role: Role,
    pub rep_index: u32,
    pub score: f64,
    pub rationale_text: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("unparseable model output ({error}); raw output attached:\n{raw}")]
    ModelJson { error: ParseError, raw: String },
    #[error("unknown favorability label {0:?}")]
    UnknownLabel(String),
    #[error("no usable inclusion verdict for element {0}")]
    MissingVerdict(i64),
    #[error("empty cell: {0}")]
    EmptyCell(String),
    #[error("invalid element batch: {0}")]
    MixedBatch(String),
    #[error("backend {0:?} is not configured")]
    UnknownBackend(String),
    #[error("no numeric score in judge response")]
    NoScoreFound,
    #[error("bias score {0} outside the 0-10 scale")]
    ScoreOutOfRange(f64),
    #[error("role {0} has no stakeholder label for bias scoring")]
    UnsupportedRole(Role),
    #[error("reps must be >= 1")]
    InvalidReps,
    #[error("model returned empty summary text")]
    EmptySummary,
}

/// One failed work item, reported in the run manifest rather than aborting
/// the whole stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellError {
    pub stage: String,
    pub key: String,
    pub message: String,
}

impl fmt::Display for CellError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.stage, self.key, self.message)
    }
}

/// Shared handles for pipeline operations.
pub struct PipelineCtx<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub workers: usize,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl<'a> PipelineCtx<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet) -> Self {
        PipelineCtx {
            gateway,
            templates,
            workers: 4,
            temperature: None,
            max_tokens: None,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn with_sampling(mut self, temperature: Option<f64>, max_tokens: Option<u32>) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    fn request(
        &self,
        backend_id: &str,
        prompt_text: &str,
        tag: String,
    ) -> Result<CompletionRequest, PipelineError> {
        let backend = self
            .gateway
            .backend(backend_id)
            .ok_or_else(|| PipelineError::UnknownBackend(backend_id.to_string()))?;
        Ok(CompletionRequest {
            backend_id: backend_id.to_string(),
            model_id: backend.model_id.clone(),
            messages: vec![ChatMessage::user(prompt_text)],
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            request_tag: tag,
        })
    }
}

/// Runs `f` over `items` on a bounded worker pool, returning results in
/// input order regardless of completion order.
pub fn run_parallel<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let queue: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::SeqCst);
                if index >= queue.len() {
                    break;
                }
                let item = queue[index].lock().unwrap().take().expect("item taken once");
                *slots[index].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("slot filled"))
        .collect()
}

/// Result of a generation stage: completed records plus per-cell failures.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub records: Vec<SummaryRecord>,
    pub failures: Vec<CellError>,
}

pub fn summary_id(case_id: &str, role: Role, gen_model: &str, rep_index: u32) -> String {
    format!("{case_id}.{role}.{gen_model}.r{rep_index}")
}

/// Generates `reps` summaries per (case, role condition) cell with one
/// model. Failed cells are reported, not silently dropped; reruns resume
/// from the gateway cache.
pub fn generate_summaries(
    ctx: &PipelineCtx,
    corpus: &Corpus,
    gen_model: &str,
    reps: u32,
) -> Result<GenerationOutcome, PipelineError> {
    if reps < 1 {
        return Err(PipelineError::InvalidReps);
    }
    let mut items = Vec::new();
    for case in corpus.iter() {
        for role in Role::conditions_for(case.domain) {
            for rep in 0..reps {
                items.push((case, role, rep));
            }
        }
    }
    let results = run_parallel(items, ctx.workers, |(case, role, rep)| {
        let outcome = generate_one(ctx, case, role, gen_model, rep);
        (case.case_id.clone(), role, rep, outcome)
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (case_id, role, rep, outcome) in results {
        match outcome {
            Ok(record) => records.push(record),
            Err(e) => failures.push(CellError {
                stage: "generate".into(),
                key: format!("case={case_id} role={role} model={gen_model} rep={rep}"),
                message: e.to_string(),
            }),
        }
    }
    records.sort_by(|a, b| {
        (&a.case_id, a.role, a.rep_index).cmp(&(&b.case_id, b.role, b.rep_index))
    });
    Ok(GenerationOutcome { records, failures })
}

fn generate_one(
    ctx: &PipelineCtx,
    case: &Case,
    role: Role,
    gen_model: &str,
    rep: u32,
) -> Result<SummaryRecord, PipelineError> {
    let prompt = render_generation_prompt(ctx.templates, role, case.domain, &case.opinion_text)?;
    let tag = format!("gen|case={}|role={role}|rep={rep}", case.case_id);
    let request = ctx.request(gen_model, &prompt.text, tag)?;
    let result = ctx.gateway.complete(&request)?;
    if result.text.trim().is_empty() {
        return Err(PipelineError::EmptySummary);
    }
    Ok(SummaryRecord {
        summary_id: summary_id(&case.case_id, role, gen_model, rep),
        case_id: case.case_id.clone(),
        role,
        gen_model: gen_model.to_string(),
        rep_index: rep,
        text: result.text,
    })
}

/// Picks exactly one repetition per (case, role, model) cell using the
/// documented keyed splitmix stream, so the same seed always selects the
/// same repetition.
pub fn sample_one_per_cell(
    records: &[SummaryRecord],
    seed: u64,
) -> Result<Vec<SummaryRecord>, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyCell("no summary records".into()));
    }
    let mut order: Vec<(String, Role, String)> = Vec::new();
    let mut cells: BTreeMap<(String, Role, String), Vec<&SummaryRecord>> = BTreeMap::new();
    for record in records {
        let key = (
            record.case_id.clone(),
            record.role,
            record.gen_model.clone(),
        );
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_default().push(record);
    }
    let mut sampled = Vec::with_capacity(order.len());
    for key in order {
        let candidates = &cells[&key];
        let stream_key = format!("cell|{}|{}|{}", key.0, key.1, key.2);
        let chosen = seeded::pick_index(seed, &stream_key, candidates.len());
        sampled.push(candidates[chosen].clone());
    }
    Ok(sampled)
}

/// Sends a prompt expecting a JSON array, retrying exactly once with a
/// fresh request tag when the reply fails to parse.
fn ask_for_records(
    ctx: &PipelineCtx,
    model: &str,
    prompt_text: &str,
    tag: String,
    schema: ResponseSchema,
) -> Result<(ParsedResponse, bool), PipelineError> {
    let request = ctx.request(model, prompt_text, tag.clone())?;
    let reply = ctx.gateway.complete(&request)?;
    match parse_model_json(&reply.text, schema) {
        Ok(parsed) => Ok((parsed, false)),
        Err(_) => {
            let retry_request = ctx.request(model, prompt_text, format!("{tag}|retry=1"))?;
            let retry_reply = ctx.gateway.complete(&retry_request)?;
            match parse_model_json(&retry_reply.text, schema) {
                Ok(parsed) => Ok((parsed, true)),
                Err(error) => Err(PipelineError::ModelJson {
                    error,
                    raw: retry_reply.text,
                }),
            }
        }
    }
}

/// Extracts fact or reasoning elements from a case opinion.
pub fn extract_elements(
    ctx: &PipelineCtx,
    case: &Case,
    kind: ElementKind,
    extract_model: &str,
) -> Result<Vec<ExtractedElement>, PipelineError> {
    extract_from_text(
        ctx,
        &format!("case={}", case.case_id),
        case.domain,
        &case.opinion_text,
        kind,
        extract_model,
    )
}

/// Extraction over arbitrary text (opinions or generated summaries; the
/// latter feeds the fact-overlap similarity baseline).
pub fn extract_from_text(
    ctx: &PipelineCtx,
    target_key: &str,
    domain: Domain,
    text: &str,
    kind: ElementKind,
    extract_model: &str,
) -> Result<Vec<ExtractedElement>, PipelineError> {
    let inputs = BTreeMap::from([("full_text".to_string(), text.to_string())]);
    let prompt = render_eval_prompt(ctx.templates, EvalStep::Extract, kind, domain, &inputs)?;
    let tag = format!("extract|{target_key}|kind={kind}|model={extract_model}");
    let (parsed, _retried) =
        ask_for_records(ctx, extract_model, &prompt.text, tag, ResponseSchema::Extraction(kind))?;
    Ok(match parsed {
        ParsedResponse::Facts(items) => {
            items.into_iter().map(ExtractedElement::from_fact).collect()
        }
        ParsedResponse::Reasoning(items) => items
            .into_iter()
            .map(ExtractedElement::from_reasoning)
            .collect(),
        _ => unreachable!("extraction schema yields extraction records"),
    })
}

/// Elements with favorability filled in where the classifier labeled them;
/// omitted or conflicting ids are listed and excluded from bias metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedBatch {
    pub elements: Vec<ExtractedElement>,
    pub unlabeled_ids: Vec<i64>,
}

fn parse_favorability(raw: &str) -> Result<Favorability, PipelineError> {
    let upper = raw.trim().to_uppercase();
    match upper.as_str() {
        "GÜNSTIG" => Ok(Favorability::Favorable),
        "UNGÜNSTIG" => Ok(Favorability::Unfavorable),
        s if s.starts_with("NEUTRAL") => Ok(Favorability::Neutral),
        _ => Err(PipelineError::UnknownLabel(raw.to_string())),
    }
}

fn elements_as_classification_input(elements: &[ExtractedElement]) -> String {
    let values: Vec<serde_json::Value> = elements
        .iter()
        .map(|e| match e.kind {
            ElementKind::Fact => serde_json::json!({"id": e.element_id, "fact": e.text}),
            ElementKind::Reasoning => serde_json::json!({
                "id": e.element_id,
                "party": e.party,
                "reasoning": e.text,
                "legal issue": e.legal_issue,
                "cited law": e.cited_law,
            }),
        })
        .collect();
    serde_json::to_string_pretty(&values).expect("element serialization cannot fail")
}

/// Labels each element favorable/unfavorable/neutral toward the domain's
/// stakeholder anchor.
pub fn classify_favorability(
    ctx: &PipelineCtx,
    elements: &[ExtractedElement],
    domain: Domain,
    classify_model: &str,
) -> Result<ClassifiedBatch, PipelineError> {
    if elements.is_empty() {
        return Ok(ClassifiedBatch {
            elements: Vec::new(),
            unlabeled_ids: Vec::new(),
        });
    }
    let kind = elements[0].kind;
    if elements.iter().any(|e| e.kind != kind) {
        return Err(PipelineError::MixedBatch("elements must share one kind".into()));
    }
    if elements.iter().any(|e| e.favorability.is_some()) {
        return Err(PipelineError::MixedBatch("favorability already set".into()));
    }

    let placeholder = match kind {
        ElementKind::Fact => "facts_json",
        ElementKind::Reasoning => "reasoning_json",
    };
    let inputs = BTreeMap::from([(
        placeholder.to_string(),
        elements_as_classification_input(elements),
    )]);
    let prompt = render_eval_prompt(ctx.templates, EvalStep::Classify, kind, domain, &inputs)?;
    let first_id = elements[0].element_id;
    let tag = format!(
        "classify|kind={kind}|domain={domain}|model={classify_model}|ids={first_id}..{}",
        elements.last().unwrap().element_id
    );
    let (parsed, _retried) = ask_for_records(
        ctx,
        classify_model,
        &prompt.text,
        tag,
        ResponseSchema::FavorabilityLabels,
    )?;
    let ParsedResponse::Labels(labels) = parsed else {
        unreachable!("labels schema yields labels");
    };

    let mut by_id: BTreeMap<i64, Favorability> = BTreeMap::new();
    let mut conflicted: BTreeSet<i64> = BTreeSet::new();
    for item in labels {
        let favorability = parse_favorability(&item.label)?;
        match by_id.get(&item.id) {
            None => {
                by_id.insert(item.id, favorability);
            }
            Some(existing) if *existing == favorability => {}
            Some(_) => {
                conflicted.insert(item.id);
            }
        }
    }
    for id in &conflicted {
        by_id.remove(id);
    }

    let mut labeled = Vec::with_capacity(elements.len());
    let mut unlabeled_ids = Vec::new();
    for element in elements {
        let mut element = element.clone();
        match by_id.get(&element.element_id) {
            Some(favorability) => element.favorability = Some(*favorability),
            None => unlabeled_ids.push(element.element_id),
        }
        labeled.push(element);
    }
    Ok(ClassifiedBatch {
        elements: labeled,
        unlabeled_ids,
    })
}

fn elements_as_inclusion_input(elements: &[ExtractedElement]) -> String {
    let values: Vec<serde_json::Value> = elements
        .iter()
        .map(|e| serde_json::json!({"id": e.element_id, "statement": e.text}))
        .collect();
    serde_json::to_string_pretty(&values).expect("element serialization cannot fail")
}

/// Asks whether each element's meaning is included in one summary.
/// Favorability labels are never shown to the inclusion model.
pub fn match_inclusion(
    ctx: &PipelineCtx,
    elements: &[ExtractedElement],
    summary: &SummaryRecord,
    include_model: &str,
) -> Result<Vec<InclusionVerdict>, PipelineError> {
    if elements.is_empty() {
        return Ok(Vec::new());
    }
    let kind = elements[0].kind;
    if elements.iter().any(|e| e.kind != kind) {
        return Err(PipelineError::MixedBatch("elements must share one kind".into()));
    }
    let inputs = BTreeMap::from([
        ("elements".to_string(), elements_as_inclusion_input(elements)),
        ("summary".to_string(), summary.text.clone()),
    ]);
    // Inclusion templates do not vary by domain; Criminal stands in.
    let prompt =
        render_eval_prompt(ctx.templates, EvalStep::Include, kind, Domain::Criminal, &inputs)?;
    let tag = format!(
        "include|summary={}|kind={kind}|model={include_model}",
        summary.summary_id
    );
    let (parsed, _retried) = ask_for_records(
        ctx,
        include_model,
        &prompt.text,
        tag,
        ResponseSchema::InclusionVerdicts,
    )?;
    let ParsedResponse::Verdicts(items) = parsed else {
        unreachable!("verdict schema yields verdicts");
    };

    // Equal duplicates collapse; conflicting duplicates make the id
    // unusable, which surfaces as a missing verdict.
    let mut by_id: BTreeMap<i64, Option<bool>> = BTreeMap::new();
    for item in items {
        match by_id.get(&item.id) {
            None => {
                by_id.insert(item.id, Some(item.included));
            }
            Some(Some(existing)) if *existing == item.included => {}
            Some(_) => {
                by_id.insert(item.id, None);
            }
        }
    }
    elements
        .iter()
        .map(|element| {
            let verdict = by_id
                .get(&element.element_id)
                .copied()
                .flatten()
                .ok_or(PipelineError::MissingVerdict(element.element_id))?;
            Ok(InclusionVerdict {
                element_id: element.element_id,
                summary_id: summary.summary_id.clone(),
                included: verdict,
            })
        })
        .collect()
}

/// Scores a tailored summary against a neutral reference on the 0-10
/// omission scale; the score is the last numeric token in the reply.
pub fn score_preliminary_bias(
    ctx: &PipelineCtx,
    case_id: &str,
    role: Role,
    rep_index: u32,
    neutral_summary: &str,
    tailored_summary: &str,
    judge_model: &str,
) -> Result<PreliminaryBiasScore, PipelineError> {
    if role == Role::NoRole {
        return Err(PipelineError::UnsupportedRole(role));
    }
    let prompt = render_preliminary_bias_prompt(
        ctx.templates,
        neutral_summary,
        tailored_summary,
        role.stakeholder_label(),
    )?;
    let tag = format!("prelim|case={case_id}|role={role}|rep={rep_index}");
    let request = ctx.request(judge_model, &prompt.text, tag)?;
    let reply = ctx.gateway.complete(&request)?;
    let score = parse_last_score(&reply.text)?;
    Ok(PreliminaryBiasScore {
        case_id: case_id.to_string(),
        role,
        rep_index,
        score,
        rationale_text: reply.text,
    })
}

/// Last numeric token in the text, validated against the 0-10 scale.
pub fn parse_last_score(text: &str) -> Result<f64, PipelineError> {
    static NUMBER: std::sync::LazyLock<regex::Regex> =
        std::sync::LazyLock::new(|| regex::Regex::new(r"\d+(?:\.\d+)?").unwrap());
    let last = NUMBER
        .find_iter(text)
        .last()
        .ok_or(PipelineError::NoScoreFound)?;
    let value: f64 = last.as_str().parse().expect("regex matches valid floats");
    if !(0.0..=10.0).contains(&value) {
        return Err(PipelineError::ScoreOutOfRange(value));
    }
    Ok(value)
}

/// One extraction+classification batch shared by every combo with the same
/// (case, kind, extractor, classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementBatch {
    pub case_id: String,
    pub kind: ElementKind,
    pub extract_model: String,
    pub classify_model: String,
    pub elements: Vec<ExtractedElement>,
    pub unlabeled_ids: Vec<i64>,
}

/// One inclusion verdict row, fully keyed for downstream metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub combo_id: String,
    pub gen_model: String,
    pub extract_model: String,
    pub classify_model: String,
    pub include_model: String,
    pub kind: ElementKind,
    pub case_id: String,
    pub role: Role,
    pub summary_id: String,
    pub element_id: i64,
    pub included: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluationBundle {
    pub batches: Vec<ElementBatch>,
    pub verdicts: Vec<VerdictRecord>,
    pub failures: Vec<CellError>,
}

/// Runs the judge chain for every combo. Extraction and classification are
/// memoized on (case, kind, model) keys so combos sharing an extractor
/// never recompute them; a combo with failed cells is reported as partial
/// rather than dropped.
pub fn run_combos(
    ctx: &PipelineCtx,
    corpus: &Corpus,
    summaries: &[SummaryRecord],
    combos: &[ComboSpec],
) -> Result<EvaluationBundle, PipelineError> {
    let mut failures: Vec<CellError> = Vec::new();

    // Phase 1: unique extraction keys.
    let mut extract_keys: BTreeSet<(String, ElementKind, String)> = BTreeSet::new();
    for combo in combos {
        for case in corpus.iter() {
            extract_keys.insert((case.case_id.clone(), combo.kind, combo.extract_model.clone()));
        }
    }
    let extract_items: Vec<_> = extract_keys.into_iter().collect();
    let extracted: BTreeMap<_, _> = run_parallel(extract_items, ctx.workers, |key| {
        let (case_id, kind, model) = &key;
        let case = corpus.get(case_id).expect("key built from corpus");
        let result = extract_elements(ctx, case, *kind, model);
        (key, result)
    })
    .into_iter()
    .collect();

    // Phase 2: unique classification keys over successful extractions.
    let mut classify_keys: BTreeSet<(String, ElementKind, String, String)> = BTreeSet::new();
    for combo in combos {
        for case in corpus.iter() {
            classify_keys.insert((
                case.case_id.clone(),
                combo.kind,
                combo.extract_model.clone(),
                combo.classifier().to_string(),
            ));
        }
    }
    let classify_items: Vec<_> = classify_keys.into_iter().collect();
    let classified: BTreeMap<_, _> = run_parallel(classify_items, ctx.workers, |key| {
        let (case_id, kind, extract_model, classify_model) = &key;
        let result = match &extracted[&(case_id.clone(), *kind, extract_model.clone())] {
            Ok(elements) => {
                let case = corpus.get(case_id).expect("key built from corpus");
                classify_favorability(ctx, elements, case.domain, classify_model)
            }
            Err(e) => Err(PipelineError::EmptyCell(format!("extraction failed: {e}"))),
        };
        (key, result)
    })
    .into_iter()
    .collect();

    let mut batches = Vec::new();
    for ((case_id, kind, extract_model, classify_model), result) in &classified {
        match result {
            Ok(batch) => batches.push(ElementBatch {
                case_id: case_id.clone(),
                kind: *kind,
                extract_model: extract_model.clone(),
                classify_model: classify_model.clone(),
                elements: batch.elements.clone(),
                unlabeled_ids: batch.unlabeled_ids.clone(),
            }),
            Err(e) => failures.push(CellError {
                stage: "evaluate".into(),
                key: format!("case={case_id} kind={kind} extract={extract_model} classify={classify_model}"),
                message: e.to_string(),
            }),
        }
    }

    // Phase 3: inclusion per (combo, summary).
    let mut summary_index: BTreeMap<(&str, &str), Vec<&SummaryRecord>> = BTreeMap::new();
    for record in summaries {
        summary_index
            .entry((record.gen_model.as_str(), record.case_id.as_str()))
            .or_default()
            .push(record);
    }

    let mut include_items = Vec::new();
    for combo in combos {
        for case in corpus.iter() {
            let batch_key = (
                case.case_id.clone(),
                combo.kind,
                combo.extract_model.clone(),
                combo.classifier().to_string(),
            );
            let Some(Ok(batch)) = classified.get(&batch_key) else {
                continue; // failure already recorded
            };
            let cell = summary_index.get(&(combo.gen_model.as_str(), case.case_id.as_str()));
            let expected_roles = Role::conditions_for(case.domain);
            let present: Vec<&SummaryRecord> = cell.cloned().unwrap_or_default();
            for role in expected_roles {
                match present.iter().find(|r| r.role == role) {
                    Some(record) => include_items.push((combo, *record, &batch.elements)),
                    None => failures.push(CellError {
                        stage: "evaluate".into(),
                        key: format!(
                            "combo={} case={} role={role}",
                            combo.combo_id(),
                            case.case_id
                        ),
                        message: "missing summary for cell".into(),
                    }),
                }
            }
        }
    }

    let verdict_results = run_parallel(include_items, ctx.workers, |(combo, record, elements)| {
        let outcome = match_inclusion(ctx, elements, record, &combo.include_model);
        (combo, record, outcome)
    });
    let mut verdicts = Vec::new();
    for (combo, record, outcome) in verdict_results {
        match outcome {
            Ok(items) => {
                for verdict in items {
                    verdicts.push(VerdictRecord {
                        combo_id: combo.combo_id(),
                        gen_model: combo.gen_model.clone(),
                        extract_model: combo.extract_model.clone(),
                        classify_model: combo.classifier().to_string(),
                        include_model: combo.include_model.clone(),
                        kind: combo.kind,
                        case_id: record.case_id.clone(),
                        role: record.role,
                        summary_id: record.summary_id.clone(),
                        element_id: verdict.element_id,
                        included: verdict.included,
                    });
                }
            }
            Err(e) => failures.push(CellError {
                stage: "evaluate".into(),
                key: format!("combo={} summary={}", combo.combo_id(), record.summary_id),
                message: e.to_string(),
            }),
        }
    }

    batches.sort_by(|a, b| {
        (&a.case_id, a.kind, &a.extract_model, &a.classify_model).cmp(&(
            &b.case_id,
            b.kind,
            &b.extract_model,
            &b.classify_model,
        ))
    });
    verdicts.sort_by(|a, b| {
        (&a.combo_id, &a.case_id, a.role, &a.summary_id, a.element_id).cmp(&(
            &b.combo_id,
            &b.case_id,
            b.role,
            &b.summary_id,
            b.element_id,
        ))
    });
    failures.sort_by(|a, b| (&a.stage, &a.key).cmp(&(&b.stage, &b.key)));
    Ok(EvaluationBundle {
        batches,
        verdicts,
        failures,
    })
}

#[cfg(test)]
mod tests;
