//! Stage drivers. Stages are externally sequential and internally
//! parallel; each one checks its predecessors' artifacts by manifest
//! digest, writes its own artifacts deterministically, and updates the
//! manifest (the only place timestamps live).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use rolesum::anno::{agreement_report, export_sheets, import_sheets, AnnotationRecord};
use rolesum::corpus::{corpus_word_stats, load_corpus, Corpus, DocType, Role};
use rolesum::gateway::{BackendConfig, Gateway, GatewayMode, Transport};
use rolesum::lexical::{
    similarity_table, EmbeddingProvider, HashEmbeddingProvider, HttpEmbeddingProvider,
    Normalization, SimilarityGroupRow, SimilarityInput,
};
use rolesum::metrics::{aggregate, favorability_bias, inclusion_rate, GroupKey, ValueRow};
use rolesum::offline::OfflineBackend;
use rolesum::pipeline::{
    extract_from_text, generate_summaries, run_combos, run_parallel, sample_one_per_cell,
    score_preliminary_bias, CellError, ElementBatch, ExtractedElement, InclusionVerdict,
    PipelineCtx, PreliminaryBiasScore, SummaryRecord, VerdictRecord,
};
use rolesum::promptkit::{ElementKind, TemplateSet};
use rolesum::report as render;
use rolesum::stats::{fit_lmm_random_intercept, friedman_test, FriedmanResult, LmmData, LmmFit};

use crate::config::{LoadedConfig, RunConfig};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Ingest,
    Generate,
    Sample,
    Evaluate,
    PrelimBias,
    Metrics,
    Similarity,
    Stats,
    AnnoExport,
    AnnoImport,
    AnnoAgreement,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::PrelimBias => "prelim-bias",
            Stage::Metrics => "metrics",
            Stage::Similarity => "similarity",
            Stage::Stats => "stats",
            Stage::AnnoExport => "anno-export",
            Stage::AnnoImport => "anno-import",
            Stage::AnnoAgreement => "anno-agreement",
            Stage::Report => "report",
        }
    }

    /// Full-run order. Annotation import/agreement run only when a
    /// completed-sheet directory is configured.
    pub fn full_run() -> &'static [Stage] {
        &[
            Stage::Ingest,
            Stage::Generate,
            Stage::Sample,
            Stage::Evaluate,
            Stage::PrelimBias,
            Stage::Metrics,
            Stage::Similarity,
            Stage::AnnoExport,
            Stage::AnnoImport,
            Stage::AnnoAgreement,
            Stage::Stats,
            Stage::Report,
        ]
    }
}

pub struct RunContext {
    pub config: RunConfig,
    pub config_toml: String,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub mode: GatewayMode,
    /// Overrides `seeds.sampling` when set from the command line.
    pub sampling_seed: u64,
    /// Fixed `recorded_at` for cache entries; used when regenerating
    /// committed fixtures so reruns are byte-stable.
    pub recorded_at_override: Option<String>,
}

impl RunContext {
    pub fn new(
        loaded: LoadedConfig,
        run_id: &str,
        mode_override: Option<GatewayMode>,
        seed_override: Option<u64>,
    ) -> Self {
        let mode = mode_override.unwrap_or(loaded.config.mode);
        let sampling_seed = seed_override.unwrap_or(loaded.config.seeds.sampling);
        let run_dir = loaded.config.output_dir.join(run_id);
        RunContext {
            config: loaded.config,
            config_toml: loaded.raw_toml,
            run_id: run_id.to_string(),
            run_dir,
            mode,
            sampling_seed,
            recorded_at_override: None,
        }
    }

    pub fn gateway(&self) -> Gateway {
        let offline: Arc<OfflineBackend> = Arc::new(OfflineBackend::new());
        let mut builder = Gateway::builder(self.mode, &self.config.cache_dir)
            .max_in_flight(self.config.workers.max(1));
        if let Some(ts) = &self.recorded_at_override {
            builder = builder.timestamp_override(ts.clone());
        }
        for entry in &self.config.backends {
            let backend = BackendConfig {
                backend_id: entry.backend_id.clone(),
                base_url: entry.base_url.clone(),
                model_id: entry.model_id.clone(),
                headers: entry.headers.clone(),
            };
            if entry.base_url.starts_with("offline:") {
                builder = builder
                    .backend_with_transport(backend, Arc::clone(&offline) as Arc<dyn Transport>);
            } else {
                builder = builder.backend(backend);
            }
        }
        builder.build()
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        match &self.config.prompt_overrides {
            Some(dir) => TemplateSet::with_overrides(dir)
                .map_err(|e| anyhow!("prompt overrides: {e}")),
            None => Ok(TemplateSet::bundled()),
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        load_corpus(self.run_dir.join("corpus.jsonl")).map_err(|e| anyhow!("{e}"))
    }

    fn manifest(&self) -> Result<RunManifest> {
        RunManifest::load(&self.run_dir)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    raw.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| serde_json::from_str(line).with_context(|| format!("bad line in {}", path.display())))
        .collect()
}

pub fn run_stage(ctx: &RunContext, stage: Stage) -> Result<()> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Generate => generate(ctx),
        Stage::Sample => sample(ctx),
        Stage::Evaluate => evaluate(ctx),
        Stage::PrelimBias => prelim_bias(ctx),
        Stage::Metrics => metrics(ctx),
        Stage::Similarity => similarity(ctx),
        Stage::Stats => stats(ctx),
        Stage::AnnoExport => anno_export(ctx),
        Stage::AnnoImport => anno_import(ctx, None),
        Stage::AnnoAgreement => anno_agreement(ctx),
        Stage::Report => report(ctx),
    }
}

/// Runs the full stage sequence; annotation import/agreement are skipped
/// (with a note) when no completed-sheet directory is configured.
pub fn run_all(ctx: &RunContext, only: Option<Stage>) -> Result<()> {
    if let Some(stage) = only {
        return run_stage(ctx, stage);
    }
    for &stage in Stage::full_run() {
        let skip_anno = ctx.config.annotation.filled_dir.is_none()
            && matches!(stage, Stage::AnnoImport | Stage::AnnoAgreement);
        if skip_anno {
            eprintln!("skipping {} (no annotation.filled_dir configured)", stage.name());
            continue;
        }
        run_stage(ctx, stage)?;
    }
    Ok(())
}

fn ingest(ctx: &RunContext) -> Result<()> {
    std::fs::create_dir_all(&ctx.run_dir)?;
    let corpus = load_corpus(&ctx.config.corpus).map_err(|e| anyhow!("{e}"))?;
    let mut buffer = Vec::new();
    corpus.to_jsonl(&mut buffer)?;
    std::fs::write(ctx.run_dir.join("corpus.jsonl"), buffer)?;

    let mut manifest = RunManifest::new(
        &ctx.run_id,
        &ctx.config_toml,
        ctx.sampling_seed,
        ctx.config.seeds.annotation,
        ctx.config.backends.iter().map(|b| b.model_id.clone()).collect(),
    );
    manifest.record_artifact(&ctx.run_dir, "corpus.jsonl")?;
    manifest.mark_stage("ingest", vec![format!("{} cases", corpus.len())]);
    manifest.save(&ctx.run_dir)
}

fn generate(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "corpus.jsonl", "generate")?;
    let corpus = ctx.corpus()?;
    let gateway = ctx.gateway();
    let templates = ctx.templates()?;
    let pipeline = PipelineCtx::new(&gateway, &templates)
        .with_workers(ctx.config.workers)
        .with_sampling(ctx.config.temperature, ctx.config.max_tokens);

    let mut records: Vec<SummaryRecord> = Vec::new();
    let mut failures: Vec<CellError> = Vec::new();
    for model in &ctx.config.gen_models {
        let outcome = generate_summaries(&pipeline, &corpus, model, ctx.config.reps)
            .map_err(|e| anyhow!("{e}"))?;
        records.extend(outcome.records);
        failures.extend(outcome.failures);
    }
    records.sort_by(|a, b| {
        (&a.gen_model, &a.case_id, a.role, a.rep_index).cmp(&(
            &b.gen_model,
            &b.case_id,
            b.role,
            b.rep_index,
        ))
    });
    write_jsonl(&ctx.run_dir.join("summaries.jsonl"), &records)?;
    manifest.record_artifact(&ctx.run_dir, "summaries.jsonl")?;
    let notes = vec![format!("{} summaries, {} failed cells", records.len(), failures.len())];
    manifest.extend_errors(failures);
    manifest.mark_stage("generate", notes);
    manifest.save(&ctx.run_dir)
}

fn sample(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "summaries.jsonl", "sample")?;
    let records: Vec<SummaryRecord> = read_jsonl(&ctx.run_dir.join("summaries.jsonl"))?;
    let sampled = sample_one_per_cell(&records, ctx.sampling_seed).map_err(|e| anyhow!("{e}"))?;
    write_jsonl(&ctx.run_dir.join("sampled.jsonl"), &sampled)?;
    manifest.record_artifact(&ctx.run_dir, "sampled.jsonl")?;
    manifest.mark_stage(
        "sample",
        vec![format!("{} cells, seed {}", sampled.len(), ctx.sampling_seed)],
    );
    manifest.save(&ctx.run_dir)
}

fn evaluate(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "sampled.jsonl", "evaluate")?;
    let corpus = ctx.corpus()?;
    let sampled: Vec<SummaryRecord> = read_jsonl(&ctx.run_dir.join("sampled.jsonl"))?;
    let gateway = ctx.gateway();
    let templates = ctx.templates()?;
    let pipeline = PipelineCtx::new(&gateway, &templates)
        .with_workers(ctx.config.workers)
        .with_sampling(ctx.config.temperature, ctx.config.max_tokens);

    let bundle = run_combos(&pipeline, &corpus, &sampled, &ctx.config.combos)
        .map_err(|e| anyhow!("{e}"))?;
    write_jsonl(&ctx.run_dir.join("elements.jsonl"), &bundle.batches)?;
    write_jsonl(&ctx.run_dir.join("verdicts.jsonl"), &bundle.verdicts)?;
    manifest.record_artifact(&ctx.run_dir, "elements.jsonl")?;
    manifest.record_artifact(&ctx.run_dir, "verdicts.jsonl")?;
    let unlabeled: usize = bundle.batches.iter().map(|b| b.unlabeled_ids.len()).sum();
    let notes = vec![format!(
        "{} element batches, {} verdicts, {} unlabeled elements, {} failed cells",
        bundle.batches.len(),
        bundle.verdicts.len(),
        unlabeled,
        bundle.failures.len()
    )];
    manifest.extend_errors(bundle.failures);
    manifest.mark_stage("evaluate", notes);
    manifest.save(&ctx.run_dir)
}

fn prelim_bias(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "summaries.jsonl", "prelim-bias")?;
    let corpus = ctx.corpus()?;
    let records: Vec<SummaryRecord> = read_jsonl(&ctx.run_dir.join("summaries.jsonl"))?;
    let gateway = ctx.gateway();
    let templates = ctx.templates()?;
    let pipeline = PipelineCtx::new(&gateway, &templates)
        .with_workers(ctx.config.workers)
        .with_sampling(ctx.config.temperature, ctx.config.max_tokens);

    let scored_model = ctx
        .config
        .prelim
        .gen_model
        .clone()
        .unwrap_or_else(|| ctx.config.gen_models[0].clone());
    let judge = ctx.config.prelim.judge_model.clone();

    let mut skipped_no_reference = 0usize;
    let mut items: Vec<&SummaryRecord> = Vec::new();
    for record in &records {
        if record.gen_model != scored_model || record.role == Role::NoRole {
            continue;
        }
        match corpus.get(&record.case_id).and_then(|c| c.reference_summary.as_ref()) {
            Some(_) => items.push(record),
            None => skipped_no_reference += 1,
        }
    }

    let results = run_parallel(items, ctx.config.workers, |record| {
        let reference = corpus
            .get(&record.case_id)
            .and_then(|c| c.reference_summary.as_ref())
            .expect("filtered above");
        let outcome = score_preliminary_bias(
            &pipeline,
            &record.case_id,
            record.role,
            record.rep_index,
            reference,
            &record.text,
            &judge,
        );
        (record, outcome)
    });

    let mut scores: Vec<PreliminaryBiasScore> = Vec::new();
    let mut failures: Vec<CellError> = Vec::new();
    for (record, outcome) in results {
        match outcome {
            Ok(score) => scores.push(score),
            Err(e) => failures.push(CellError {
                stage: "prelim-bias".into(),
                key: format!("summary={}", record.summary_id),
                message: e.to_string(),
            }),
        }
    }
    scores.sort_by(|a, b| (&a.case_id, a.role, a.rep_index).cmp(&(&b.case_id, b.role, b.rep_index)));
    write_jsonl(&ctx.run_dir.join("prelim_bias.jsonl"), &scores)?;
    manifest.record_artifact(&ctx.run_dir, "prelim_bias.jsonl")?;
    let notes = vec![format!(
        "{} scores on model {scored_model} judged by {}, {} cases without reference skipped, {} failures",
        scores.len(),
        ctx.config.prelim.judge_model,
        skipped_no_reference,
        failures.len()
    )];
    manifest.extend_errors(failures);
    manifest.mark_stage("prelim-bias", notes);
    manifest.save(&ctx.run_dir)
}

/// One metrics.csv row per (combo, summary).
struct MetricsRow {
    domain: String,
    stakeholder_role: String,
    combo_id: String,
    kind: ElementKind,
    case_id: String,
    n_total: usize,
    n_included: usize,
    rate: f64,
    fav_rate: Option<f64>,
    unfav_rate: Option<f64>,
    bias: Option<f64>,
}

fn metrics_rows(
    corpus: &Corpus,
    batches: &[ElementBatch],
    verdicts: &[VerdictRecord],
) -> Result<Vec<MetricsRow>> {
    let labels_by_batch: BTreeMap<(&str, ElementKind, &str, &str), BTreeMap<i64, _>> = batches
        .iter()
        .map(|batch| {
            let labels: BTreeMap<i64, _> = batch
                .elements
                .iter()
                .filter_map(|e| e.favorability.map(|f| (e.element_id, f)))
                .collect();
            (
                (
                    batch.case_id.as_str(),
                    batch.kind,
                    batch.extract_model.as_str(),
                    batch.classify_model.as_str(),
                ),
                labels,
            )
        })
        .collect();

    let mut grouped: BTreeMap<(&str, &str), Vec<&VerdictRecord>> = BTreeMap::new();
    for verdict in verdicts {
        grouped
            .entry((verdict.combo_id.as_str(), verdict.summary_id.as_str()))
            .or_default()
            .push(verdict);
    }

    let mut rows = Vec::new();
    for ((combo_id, summary_id), group) in grouped {
        let head = group[0];
        let case = corpus
            .get(&head.case_id)
            .ok_or_else(|| anyhow!("verdict references unknown case {}", head.case_id))?;
        let plain: Vec<InclusionVerdict> = group
            .iter()
            .map(|v| InclusionVerdict {
                element_id: v.element_id,
                summary_id: summary_id.to_string(),
                included: v.included,
            })
            .collect();
        let key = GroupKey {
            case_id: head.case_id.clone(),
            role: head.role.to_string(),
            combo_id: combo_id.to_string(),
        };
        let stats = inclusion_rate(key.clone(), &plain).map_err(|e| anyhow!("{e}"))?;
        let labels = labels_by_batch
            .get(&(
                head.case_id.as_str(),
                head.kind,
                head.extract_model.as_str(),
                head.classify_model.as_str(),
            ))
            .cloned()
            .unwrap_or_default();
        let bias = favorability_bias(key, &plain, &labels);
        rows.push(MetricsRow {
            domain: case.domain.to_string(),
            stakeholder_role: head.role.to_string(),
            combo_id: combo_id.to_string(),
            kind: head.kind,
            case_id: head.case_id.clone(),
            n_total: stats.n_total,
            n_included: stats.n_included,
            rate: stats.rate,
            fav_rate: bias.fav_rate,
            unfav_rate: bias.unfav_rate,
            bias: bias.bias,
        });
    }
    rows.sort_by(|a, b| {
        (&a.domain, &a.stakeholder_role, &a.combo_id, &a.case_id).cmp(&(
            &b.domain,
            &b.stakeholder_role,
            &b.combo_id,
            &b.case_id,
        ))
    });
    Ok(rows)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "elements.jsonl", "metrics")?;
    manifest.require_artifact(&ctx.run_dir, "verdicts.jsonl", "metrics")?;
    let corpus = ctx.corpus()?;
    let batches: Vec<ElementBatch> = read_jsonl(&ctx.run_dir.join("elements.jsonl"))?;
    let verdicts: Vec<VerdictRecord> = read_jsonl(&ctx.run_dir.join("verdicts.jsonl"))?;
    let rows = metrics_rows(&corpus, &batches, &verdicts)?;

    let mut csv = String::from(
        "domain,stakeholder_role,combo_id,kind,case_id,n_total,n_included,rate,fav_rate,unfav_rate,bias\n",
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row.domain,
            row.stakeholder_role,
            row.combo_id,
            row.kind,
            row.case_id,
            row.n_total,
            row.n_included,
            row.rate,
            opt_f64(row.fav_rate),
            opt_f64(row.unfav_rate),
            opt_f64(row.bias),
        ));
    }
    std::fs::write(ctx.run_dir.join("metrics.csv"), csv)?;
    manifest.record_artifact(&ctx.run_dir, "metrics.csv")?;
    let undefined = rows.iter().filter(|r| r.bias.is_none()).count();
    manifest.mark_stage(
        "metrics",
        vec![format!("{} rows, {} with undefined bias", rows.len(), undefined)],
    );
    manifest.save(&ctx.run_dir)
}

fn embedding_provider(ctx: &RunContext) -> Result<Box<dyn EmbeddingProvider>> {
    let cfg = &ctx.config.similarity.embedding;
    Ok(match cfg.provider_id.as_str() {
        "hash" => Box::new(HashEmbeddingProvider::new(cfg.dimension)),
        "http" => {
            let base_url = cfg.base_url.as_ref().expect("validated");
            let model_id = cfg.model_id.clone().unwrap_or_default();
            let api_key = std::env::var("EMBEDDING_API_KEY").ok();
            Box::new(HttpEmbeddingProvider::new(base_url, &model_id, cfg.dimension, api_key))
        }
        other => bail!("unknown embedding provider {other:?}"),
    })
}

fn similarity(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "sampled.jsonl", "similarity")?;
    let corpus = ctx.corpus()?;
    let sampled: Vec<SummaryRecord> = read_jsonl(&ctx.run_dir.join("sampled.jsonl"))?;
    let gateway = ctx.gateway();
    let templates = ctx.templates()?;
    let pipeline = PipelineCtx::new(&gateway, &templates)
        .with_workers(ctx.config.workers)
        .with_sampling(ctx.config.temperature, ctx.config.max_tokens);
    let extract_model = ctx.config.similarity.extract_model.clone();

    let mut inputs: Vec<SimilarityInput> = sampled
        .iter()
        .map(|record| SimilarityInput {
            summary_id: record.summary_id.clone(),
            case_id: record.case_id.clone(),
            model_label: record.gen_model.clone(),
            role_label: record.role.to_string(),
            text: record.text.clone(),
        })
        .collect();
    for case in corpus.iter() {
        if let Some(reference) = &case.reference_summary {
            inputs.push(SimilarityInput {
                summary_id: format!("{}.reference", case.case_id),
                case_id: case.case_id.clone(),
                model_label: "reference".into(),
                role_label: "reference".into(),
                text: reference.clone(),
            });
        }
    }

    // Fact lists for the overlap precision/recall columns: facts from each
    // summary text and from each opinion, extracted with one model.
    let mut failures: Vec<CellError> = Vec::new();
    let fact_texts = |elements: Vec<ExtractedElement>| -> Vec<String> {
        elements.into_iter().map(|e| e.text).collect()
    };
    let summary_results = run_parallel(
        inputs.clone(),
        ctx.config.workers,
        |input| {
            let case = corpus.get(&input.case_id).expect("input built from corpus");
            let outcome = extract_from_text(
                &pipeline,
                &format!("summary={}", input.summary_id),
                case.domain,
                &input.text,
                ElementKind::Fact,
                &extract_model,
            );
            (input.summary_id, outcome)
        },
    );
    let mut summary_facts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (summary_id, outcome) in summary_results {
        match outcome {
            Ok(elements) => {
                summary_facts.insert(summary_id, fact_texts(elements));
            }
            Err(e) => failures.push(CellError {
                stage: "similarity".into(),
                key: format!("summary={summary_id}"),
                message: e.to_string(),
            }),
        }
    }
    let mut opinion_facts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let opinion_results = run_parallel(
        corpus.cases().to_vec(),
        ctx.config.workers,
        |case| {
            let outcome = extract_from_text(
                &pipeline,
                &format!("case={}", case.case_id),
                case.domain,
                &case.opinion_text,
                ElementKind::Fact,
                &extract_model,
            );
            (case.case_id, outcome)
        },
    );
    for (case_id, outcome) in opinion_results {
        match outcome {
            Ok(elements) => {
                opinion_facts.insert(case_id, fact_texts(elements));
            }
            Err(e) => failures.push(CellError {
                stage: "similarity".into(),
                key: format!("case={case_id}"),
                message: e.to_string(),
            }),
        }
    }

    let provider = embedding_provider(ctx)?;
    let table = similarity_table(
        &inputs,
        &corpus,
        provider.as_ref(),
        &summary_facts,
        &opinion_facts,
        &rolesum::lexical::SimilarityConfig {
            normalization: Normalization {
                lowercase: ctx.config.similarity.lowercase,
                strip_punctuation: ctx.config.similarity.strip_punctuation,
            },
            match_threshold: ctx.config.similarity.match_threshold,
        },
    );

    std::fs::write(
        ctx.run_dir.join("similarity.csv"),
        render::render_similarity_rows_csv(&table.rows),
    )?;
    std::fs::write(
        ctx.run_dir.join("similarity_groups.json"),
        serde_json::to_vec_pretty(&table.groups)?,
    )?;
    manifest.record_artifact(&ctx.run_dir, "similarity.csv")?;
    manifest.record_artifact(&ctx.run_dir, "similarity_groups.json")?;
    let mut notes = vec![format!("{} rows, {} groups", table.rows.len(), table.groups.len())];
    notes.extend(table.errors.iter().map(|e| format!("row issue: {e}")));
    manifest.extend_errors(failures);
    manifest.mark_stage("similarity", notes);
    manifest.save(&ctx.run_dir)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct FriedmanEntry {
    pub role: String,
    pub n_blocks: usize,
    pub n_treatments: usize,
    pub result: FriedmanResult,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct StatsReport {
    pub lmm: Option<LmmFit>,
    pub friedman: Vec<FriedmanEntry>,
    pub icc: Option<serde_json::Value>,
    pub kappa: Option<serde_json::Value>,
    pub notes: Vec<String>,
}

fn stats(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "prelim_bias.jsonl", "stats")?;
    let scores: Vec<PreliminaryBiasScore> = read_jsonl(&ctx.run_dir.join("prelim_bias.jsonl"))?;
    let mut notes = Vec::new();

    // Across-role model: role fixed effect, case random intercept, all
    // repetitions as observations (the Friedman check below verifies that
    // repetitions behave consistently within a role).
    let lmm = {
        let data = LmmData {
            response: scores.iter().map(|s| s.score).collect(),
            fixed_factor: scores.iter().map(|s| s.role.to_string()).collect(),
            group_id: scores.iter().map(|s| s.case_id.clone()).collect(),
        };
        match fit_lmm_random_intercept(&data, &ctx.config.stats.lmm_reference_level) {
            Ok(fit) => Some(fit),
            Err(e) => {
                notes.push(format!("lmm unavailable: {e}"));
                None
            }
        }
    };

    // Within-role consistency: per role, blocks are cases and treatments
    // are repetitions.
    let mut friedman_entries = Vec::new();
    let roles: BTreeSet<Role> = scores.iter().map(|s| s.role).collect();
    for role in roles {
        let role_scores: Vec<&PreliminaryBiasScore> =
            scores.iter().filter(|s| s.role == role).collect();
        let reps: BTreeSet<u32> = role_scores.iter().map(|s| s.rep_index).collect();
        let cases: BTreeSet<&str> = role_scores.iter().map(|s| s.case_id.as_str()).collect();
        if reps.len() < 2 {
            notes.push(format!("friedman skipped for {role}: single repetition"));
            continue;
        }
        let mut matrix = Vec::new();
        for case in &cases {
            let row: Vec<f64> = reps
                .iter()
                .filter_map(|rep| {
                    role_scores
                        .iter()
                        .find(|s| s.case_id == *case && s.rep_index == *rep)
                        .map(|s| s.score)
                })
                .collect();
            if row.len() == reps.len() {
                matrix.push(row);
            }
        }
        match friedman_test(&matrix) {
            Ok(result) => friedman_entries.push(FriedmanEntry {
                role: role.to_string(),
                n_blocks: matrix.len(),
                n_treatments: reps.len(),
                result,
            }),
            Err(e) => notes.push(format!("friedman unavailable for {role}: {e}")),
        }
    }

    // Agreement statistics come from the annotation stages when present.
    let agreement_path = ctx.run_dir.join("agreement.json");
    let (icc, kappa) = if agreement_path.exists() {
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&agreement_path)?)?;
        let overall = value.get("overall").cloned();
        (
            overall.as_ref().map(|o| {
                serde_json::json!({
                    "fact": o.get("fact_icc"),
                    "reasoning": o.get("reasoning_icc"),
                })
            }),
            overall.as_ref().map(|o| {
                serde_json::json!({
                    "three_category": o.get("favorability_kappa_3cat"),
                    "two_category": o.get("favorability_kappa_2cat"),
                })
            }),
        )
    } else {
        notes.push("no annotation agreement available; icc and kappa are null".into());
        (None, None)
    };

    let report = StatsReport {
        lmm,
        friedman: friedman_entries,
        icc,
        kappa,
        notes,
    };
    std::fs::write(
        ctx.run_dir.join("stats_report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;

    let mut markdown = String::new();
    if let Some(fit) = &report.lmm {
        markdown.push_str("## Bias scores by stakeholder (mixed-effects model)\n\n");
        markdown.push_str(&render::render_lmm_table(fit));
        markdown.push('\n');
    }
    if !report.friedman.is_empty() {
        markdown.push_str("## Within-stakeholder consistency (Friedman test over repetitions)\n\n");
        markdown.push_str("| Stakeholder | Q | df | p-value | blocks |\n| --- | --- | --- | --- | --- |\n");
        for entry in &report.friedman {
            markdown.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                entry.role,
                render::fmt3(entry.result.statistic),
                entry.result.df,
                render::fmt_p(entry.result.p_value),
                entry.n_blocks,
            ));
        }
        markdown.push('\n');
    }
    std::fs::write(ctx.run_dir.join("stats_report.md"), markdown)?;
    manifest.record_artifact(&ctx.run_dir, "stats_report.json")?;
    manifest.record_artifact(&ctx.run_dir, "stats_report.md")?;
    manifest.mark_stage("stats", vec![]);
    manifest.save(&ctx.run_dir)
}

fn anno_export(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "sampled.jsonl", "anno-export")?;
    let corpus = ctx.corpus()?;
    let sampled: Vec<SummaryRecord> = read_jsonl(&ctx.run_dir.join("sampled.jsonl"))?;
    let sheets_dir = ctx.run_dir.join("anno").join("sheets");
    let cases: Vec<&rolesum::corpus::Case> = corpus.iter().collect();
    let export = export_sheets(
        &cases,
        &sampled,
        &ctx.config.annotation.annotators,
        &sheets_dir,
        ctx.config.seeds.annotation,
    )
    .map_err(|e| anyhow!("{e}"))?;

    // Paths are stored relative to the run directory so the artifact is
    // byte-identical across machines and reruns.
    #[derive(Serialize)]
    struct SheetEntry<'a> {
        path: String,
        annotator_id: &'a str,
        case_id: &'a str,
        summary_order: &'a [String],
    }
    let relative_manifest = serde_json::json!({
        "seed": export.seed,
        "files": export
            .files
            .iter()
            .map(|file| SheetEntry {
                path: file
                    .path
                    .strip_prefix(&ctx.run_dir)
                    .expect("sheet under run dir")
                    .to_string_lossy()
                    .into_owned(),
                annotator_id: &file.annotator_id,
                case_id: &file.case_id,
                summary_order: &file.summary_order,
            })
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        ctx.run_dir.join("anno").join("export_manifest.json"),
        serde_json::to_vec_pretty(&relative_manifest)?,
    )?;
    manifest.record_artifact(&ctx.run_dir, "anno/export_manifest.json")?;
    for file in &export.files {
        let relative = file
            .path
            .strip_prefix(&ctx.run_dir)
            .expect("sheet under run dir")
            .to_string_lossy()
            .into_owned();
        manifest.record_artifact(&ctx.run_dir, &relative)?;
    }
    manifest.mark_stage("anno-export", vec![format!("{} sheets", export.files.len())]);
    manifest.save(&ctx.run_dir)
}

pub fn anno_import(ctx: &RunContext, sheets_dir: Option<&Path>) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    let dir = sheets_dir
        .map(Path::to_path_buf)
        .or_else(|| ctx.config.annotation.filled_dir.clone())
        .ok_or_else(|| anyhow!("no sheet directory: pass --sheets or set annotation.filled_dir"))?;

    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(&dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().is_file())
        .map(|entry| entry.into_path())
        .filter(|path| path.extension().and_then(|e| e.to_str()) == Some("csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .csv sheets found under {}", dir.display());
    }
    let records = import_sheets(&paths).map_err(|e| anyhow!("{e}"))?;
    write_jsonl(&ctx.run_dir.join("annotations.jsonl"), &records)?;
    manifest.record_artifact(&ctx.run_dir, "annotations.jsonl")?;
    manifest.mark_stage(
        "anno-import",
        vec![format!("{} records from {} sheets", records.len(), paths.len())],
    );
    manifest.save(&ctx.run_dir)
}

fn anno_agreement(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "annotations.jsonl", "anno-agreement")?;
    let corpus = ctx.corpus()?;
    let records: Vec<AnnotationRecord> = read_jsonl(&ctx.run_dir.join("annotations.jsonl"))?;
    let domains: BTreeMap<String, _> = corpus
        .iter()
        .map(|case| (case.case_id.clone(), case.domain))
        .collect();
    let report = agreement_report(&records, &domains, ctx.config.stats.icc_alpha)
        .map_err(|e| anyhow!("{e}"))?;
    std::fs::write(
        ctx.run_dir.join("agreement.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    manifest.record_artifact(&ctx.run_dir, "agreement.json")?;
    manifest.mark_stage(
        "anno-agreement",
        vec![format!(
            "{} subjects, {} dropped incomplete",
            report.overall.n_subjects, report.dropped_incomplete
        )],
    );
    manifest.save(&ctx.run_dir)
}

fn report(ctx: &RunContext) -> Result<()> {
    let mut manifest = ctx.manifest()?;
    manifest.require_artifact(&ctx.run_dir, "sampled.jsonl", "report")?;
    manifest.require_artifact(&ctx.run_dir, "metrics.csv", "report")?;
    manifest.require_artifact(&ctx.run_dir, "similarity_groups.json", "report")?;
    manifest.require_artifact(&ctx.run_dir, "stats_report.json", "report")?;
    let corpus = ctx.corpus()?;
    let report_dir = ctx.run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let mut written: Vec<String> = Vec::new();

    // Word counts.
    let sampled: Vec<SummaryRecord> = read_jsonl(&ctx.run_dir.join("sampled.jsonl"))?;
    let corpus_rows = corpus_word_stats(&corpus, &[]);
    let mut per_model: BTreeMap<String, Vec<_>> = BTreeMap::new();
    let models: BTreeSet<String> = sampled.iter().map(|s| s.gen_model.clone()).collect();
    for model in models {
        let records: Vec<SummaryRecord> = sampled
            .iter()
            .filter(|s| s.gen_model == model)
            .cloned()
            .collect();
        let rows = corpus_word_stats(&corpus, &records)
            .into_iter()
            .filter(|r| r.doc_type == DocType::GeneratedSummary)
            .collect();
        per_model.insert(model, rows);
    }
    std::fs::write(
        report_dir.join("word_counts.md"),
        render::render_word_count_table(&corpus_rows, &per_model),
    )?;
    written.push("report/word_counts.md".into());

    // Mixed-model table.
    let stats_report: StatsReport =
        serde_json::from_slice(&std::fs::read(ctx.run_dir.join("stats_report.json"))?)?;
    if let Some(fit) = &stats_report.lmm {
        std::fs::write(report_dir.join("bias_model.md"), render::render_lmm_table(fit))?;
        written.push("report/bias_model.md".into());
    }

    // Favorability bias cells and inclusion figure from metrics.csv.
    let metrics_raw = std::fs::read_to_string(ctx.run_dir.join("metrics.csv"))?;
    let mut bias_rows: Vec<ValueRow> = Vec::new();
    let mut rate_rows: Vec<ValueRow> = Vec::new();
    let mut reader = csv::Reader::from_reader(metrics_raw.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    for record in reader.records() {
        let record = record?;
        let get = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .and_then(|i| record.get(i))
                .unwrap_or_default()
                .to_string()
        };
        let combo_id = get("combo_id");
        let classifier = combo_id.split('+').nth(2).unwrap_or_default().to_string();
        let labels = BTreeMap::from([
            ("domain".to_string(), get("domain")),
            ("stakeholder_role".to_string(), get("stakeholder_role")),
            ("combo_id".to_string(), combo_id),
            ("classifier".to_string(), classifier),
            ("kind".to_string(), get("kind")),
        ]);
        bias_rows.push(ValueRow {
            labels: labels.clone(),
            value: get("bias").parse().ok(),
        });
        rate_rows.push(ValueRow {
            labels,
            value: get("rate").parse().ok(),
        });
    }
    let bias_cells = aggregate(&bias_rows, &ctx.config.metrics.bias_group_by);
    std::fs::write(
        report_dir.join("favorability_bias.md"),
        render::render_bias_table(&bias_cells),
    )?;
    written.push("report/favorability_bias.md".into());
    let rate_cells = aggregate(
        &rate_rows,
        &["combo_id", "kind", "domain", "stakeholder_role"].map(str::to_string),
    );
    std::fs::write(
        report_dir.join("fig_inclusion_rates.csv"),
        render::render_inclusion_figure_csv(&rate_cells),
    )?;
    written.push("report/fig_inclusion_rates.csv".into());

    // Similarity tables.
    let groups: Vec<SimilarityGroupRow> =
        serde_json::from_slice(&std::fs::read(ctx.run_dir.join("similarity_groups.json"))?)?;
    std::fs::write(
        report_dir.join("similarity_by_role.md"),
        render::render_similarity_by_role(&groups),
    )?;
    std::fs::write(
        report_dir.join("similarity_full.csv"),
        render::render_similarity_csv(&groups),
    )?;
    written.push("report/similarity_by_role.md".into());
    written.push("report/similarity_full.csv".into());

    // Human-evaluation figures, when annotations exist.
    let annotations_path = ctx.run_dir.join("annotations.jsonl");
    if annotations_path.exists() {
        let records: Vec<AnnotationRecord> = read_jsonl(&annotations_path)?;
        let mut likert_rows = Vec::new();
        for record in &records {
            for (dimension, value) in [
                ("fact", record.fact_inclusion),
                ("reasoning", record.reasoning_inclusion),
            ] {
                likert_rows.push(ValueRow {
                    labels: BTreeMap::from([
                        ("gen_model".to_string(), record.gen_model.clone()),
                        ("role".to_string(), record.role.clone()),
                        ("dimension".to_string(), dimension.to_string()),
                    ]),
                    value: Some(f64::from(value)),
                });
            }
        }
        let likert_cells = aggregate(
            &likert_rows,
            &["gen_model", "role", "dimension"].map(str::to_string),
        );
        std::fs::write(
            report_dir.join("fig_human_inclusion.csv"),
            render::render_human_inclusion_figure_csv(&likert_cells),
        )?;
        written.push("report/fig_human_inclusion.csv".into());

        let mut shares: BTreeMap<(String, String), (usize, usize, usize)> = BTreeMap::new();
        for record in &records {
            let entry = shares
                .entry((record.gen_model.clone(), record.role.clone()))
                .or_default();
            match record.favorability {
                rolesum::anno::FavorabilityJudgment::Yes => entry.0 += 1,
                rolesum::anno::FavorabilityJudgment::No => entry.1 += 1,
                rolesum::anno::FavorabilityJudgment::Unsure => entry.2 += 1,
            }
        }
        let share_rows: Vec<render::FavorabilityShareRow> = shares
            .into_iter()
            .map(|((gen_model, role), (yes, no, unsure))| {
                let n = yes + no + unsure;
                render::FavorabilityShareRow {
                    gen_model,
                    role,
                    n,
                    share_yes: yes as f64 / n as f64,
                    share_no: no as f64 / n as f64,
                    share_unsure: unsure as f64 / n as f64,
                }
            })
            .collect();
        std::fs::write(
            report_dir.join("fig_human_favorability.csv"),
            render::render_human_favorability_figure_csv(&share_rows),
        )?;
        written.push("report/fig_human_favorability.csv".into());
    }

    for relative in &written {
        manifest.record_artifact(&ctx.run_dir, relative)?;
    }
    manifest.mark_stage("report", vec![format!("{} files", written.len())]);
    manifest.save(&ctx.run_dir)
}
