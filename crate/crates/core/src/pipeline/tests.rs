use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::*;
use crate::corpus::OutcomeLabel;
use crate::gateway::{BackendConfig, GatewayMode, RetryPolicy, Transport, TransportReply};
use crate::offline::OfflineBackend;

/// Transport double replying with a fixed sequence of completion texts.
struct ScriptedText {
    replies: Mutex<Vec<String>>,
}

impl ScriptedText {
    fn new(replies: &[&str]) -> Arc<Self> {
        Arc::new(ScriptedText {
            replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
        })
    }
}

impl Transport for ScriptedText {
    fn send_chat(
        &self,
        _backend: &BackendConfig,
        _api_key: Option<&str>,
        _request: &CompletionRequest,
    ) -> Result<TransportReply, crate::gateway::TransportError> {
        let mut replies = self.replies.lock().unwrap();
        let text = if replies.is_empty() {
            String::from("[]")
        } else {
            replies.remove(0)
        };
        Ok(TransportReply {
            status: 200,
            body: serde_json::json!({
                "choices": [{"message": {"content": text}, "finish_reason": "stop"}]
            })
            .to_string(),
            retry_after: None,
        })
    }
}

fn backend_config(id: &str) -> BackendConfig {
    BackendConfig {
        backend_id: id.into(),
        base_url: format!("offline:{id}"),
        model_id: format!("{id}-model"),
        headers: BTreeMap::new(),
    }
}

fn live_gateway(dir: &std::path::Path, ids: &[&str], transport: Arc<dyn Transport>) -> Gateway {
    let mut builder = Gateway::builder(GatewayMode::Live, dir).retry(RetryPolicy {
        base_delay: Duration::from_millis(1),
        factor: 2.0,
        max_attempts: 2,
    });
    for id in ids {
        builder = builder.backend_with_transport(backend_config(id), Arc::clone(&transport));
    }
    builder.build()
}

fn criminal_case(id: &str, opinion: &str) -> Case {
    Case {
        case_id: id.into(),
        domain: Domain::Criminal,
        language: "de".into(),
        opinion_text: opinion.into(),
        reference_summary: Some("Kurze neutrale Zusammenfassung des Falles.".into()),
        outcome_label: Some(OutcomeLabel::ProsecutionPrevailed),
        source_uri: None,
    }
}

const FIVE_SENTENCES: &str = "Der Beschuldigte betrat am Abend das Grundstück. \
Die Polizei nahm den Beschuldigten vor Ort fest. \
Das Bezirksgericht verurteilte den Beschuldigten zu einer Geldstrafe. \
Der Beschuldigte erhob Beschwerde gegen das Urteil. \
Das Obergericht wies die Beschwerde vollumfänglich ab.";

fn two_case_corpus() -> Corpus {
    Corpus::new(vec![
        criminal_case("c1", FIVE_SENTENCES),
        criminal_case("c2", "Der Vertrag wurde im Frühling unterzeichnet. \
            Die Partei kündigte den Vertrag nach wenigen Wochen. \
            Das Gericht prüfte die Kündigungsfrist genau. \
            Die Klage wurde in erster Instanz abgewiesen. \
            Die zweite Instanz bestätigte den Entscheid."),
    ])
    .unwrap()
}

fn offline_gateway(dir: &std::path::Path, mode: GatewayMode, ids: &[&str]) -> (Gateway, Arc<OfflineBackend>) {
    let offline = Arc::new(OfflineBackend::new());
    let mut builder = Gateway::builder(mode, dir);
    for id in ids {
        builder = builder
            .backend_with_transport(backend_config(id), Arc::clone(&offline) as Arc<dyn Transport>);
    }
    (builder.build(), offline)
}

#[test]
fn generation_covers_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = two_case_corpus();
    let (gateway, _) = offline_gateway(dir.path(), GatewayMode::Record, &["gen-a"]);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);

    let outcome = generate_summaries(&ctx, &corpus, "gen-a", 1).unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.records.len(), 8);
    let roles: std::collections::BTreeSet<Role> =
        outcome.records.iter().map(|r| r.role).collect();
    assert_eq!(roles.len(), 4);
    assert!(roles.contains(&Role::DefenseAttorney));

    let reps = generate_summaries(&ctx, &corpus, "gen-a", 3).unwrap();
    assert_eq!(reps.records.len(), 24);
    let rep_values: std::collections::BTreeSet<u32> =
        reps.records.iter().map(|r| r.rep_index).collect();
    assert_eq!(rep_values, [0, 1, 2].into_iter().collect());
}

#[test]
fn generation_is_replay_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = two_case_corpus();
    let templates = TemplateSet::bundled();

    let (recorder, _) = offline_gateway(dir.path(), GatewayMode::Record, &["gen-a"]);
    let ctx = PipelineCtx::new(&recorder, &templates);
    let recorded = generate_summaries(&ctx, &corpus, "gen-a", 2).unwrap();

    let (replayer, offline) = offline_gateway(dir.path(), GatewayMode::Replay, &["gen-a"]);
    let ctx = PipelineCtx::new(&replayer, &templates);
    let replayed = generate_summaries(&ctx, &corpus, "gen-a", 2).unwrap();
    assert_eq!(recorded.records, replayed.records);
    assert_eq!(offline.calls(), 0, "replay must not touch the transport");
}

#[test]
fn empty_model_output_is_a_cell_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::new(vec![criminal_case("c1", "Ein Satz.")]).unwrap();
    // Every reply empty: all four cells fail, nothing is stored.
    let transport = ScriptedText::new(&["", "", "", ""]);
    let gateway = live_gateway(dir.path(), &["gen-a"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates).with_workers(1);
    let outcome = generate_summaries(&ctx, &corpus, "gen-a", 1).unwrap();
    assert!(outcome.records.is_empty());
    assert_eq!(outcome.failures.len(), 4);
}

fn synthetic_records(cases: usize, reps: u32) -> Vec<SummaryRecord> {
    let mut records = Vec::new();
    for c in 0..cases {
        for role in Role::conditions_for(Domain::Criminal) {
            for rep in 0..reps {
                let case_id = format!("c{c}");
                records.push(SummaryRecord {
                    summary_id: summary_id(&case_id, role, "m", rep),
                    case_id,
                    role,
                    gen_model: "m".into(),
                    rep_index: rep,
                    text: format!("text {rep}"),
                });
            }
        }
    }
    records
}

#[test]
fn sampling_with_one_rep_is_identity() {
    let records = synthetic_records(3, 1);
    for seed in [0u64, 7, 99] {
        let sampled = sample_one_per_cell(&records, seed).unwrap();
        assert_eq!(sampled, records);
    }
}

#[test]
fn sampling_is_seed_stable_and_member_of_cell() {
    let records = synthetic_records(5, 3);
    let a = sample_one_per_cell(&records, 42).unwrap();
    let b = sample_one_per_cell(&records, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5 * 4);
    for pick in &a {
        assert!(records.contains(pick), "sampled record must come from its cell");
    }
}

#[test]
fn distinct_seeds_disagree_somewhere() {
    // Over 200 cases x 4 roles x 3 reps, two different seeds picking the
    // same repetition everywhere is (1/3)^800; check 100 seed pairs.
    let records = synthetic_records(200, 3);
    for pair in 0..100u64 {
        let a = sample_one_per_cell(&records, pair).unwrap();
        let b = sample_one_per_cell(&records, pair + 10_000).unwrap();
        assert_ne!(a, b, "seeds {pair} and {} agreed on every cell", pair + 10_000);
    }
}

#[test]
fn extraction_parses_offline_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = two_case_corpus();
    let (gateway, _) = offline_gateway(dir.path(), GatewayMode::Record, &["extract-a"]);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);

    let facts =
        extract_elements(&ctx, corpus.get("c1").unwrap(), ElementKind::Fact, "extract-a").unwrap();
    assert_eq!(facts.len(), 5);
    assert_eq!(
        facts.iter().map(|f| f.element_id).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5]
    );
    assert!(facts.iter().all(|f| f.kind == ElementKind::Fact));
    assert!(facts.iter().all(|f| f.party.is_none() && f.favorability.is_none()));

    let reasoning = extract_elements(
        &ctx,
        corpus.get("c1").unwrap(),
        ElementKind::Reasoning,
        "extract-a",
    )
    .unwrap();
    assert!(!reasoning.is_empty());
    assert_eq!(reasoning[0].party.as_deref(), Some("Richter"));
    assert!(reasoning[0].legal_issue.is_some());
}

#[test]
fn extraction_accepts_empty_array() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::new(vec![criminal_case("c1", "Ein Satz.")]).unwrap();
    let transport = ScriptedText::new(&["[]"]);
    let gateway = live_gateway(dir.path(), &["extract-a"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let facts =
        extract_elements(&ctx, corpus.get("c1").unwrap(), ElementKind::Fact, "extract-a").unwrap();
    assert!(facts.is_empty());
}

#[test]
fn extraction_retries_once_then_errors_with_raw() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::new(vec![criminal_case("c1", "Ein Satz.")]).unwrap();
    let transport = ScriptedText::new(&["kein json", "immer noch kein json"]);
    let gateway = live_gateway(dir.path(), &["extract-a"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let err = extract_elements(&ctx, corpus.get("c1").unwrap(), ElementKind::Fact, "extract-a")
        .unwrap_err();
    match err {
        PipelineError::ModelJson { raw, .. } => assert_eq!(raw, "immer noch kein json"),
        other => panic!("expected ModelJson, got {other:?}"),
    }
}

fn unlabeled_elements(n: i64) -> Vec<ExtractedElement> {
    (1..=n)
        .map(|id| ExtractedElement {
            element_id: id,
            kind: ElementKind::Fact,
            text: format!("Tatsache {id}"),
            party: None,
            legal_issue: None,
            cited_law: Vec::new(),
            favorability: None,
        })
        .collect()
}

#[test]
fn classification_maps_german_labels() {
    let dir = tempfile::tempdir().unwrap();
    let reply = r#"[
        {"id":1,"classification":"GÜNSTIG"},
        {"id":2,"classification":"NEUTRAL/PROZEDURAL"},
        {"id":3,"classification":"UNGÜNSTIG"},
        {"id":4,"classification":"NEUTRAL"}
    ]"#;
    let transport = ScriptedText::new(&[reply]);
    let gateway = live_gateway(dir.path(), &["cls"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);

    let batch =
        classify_favorability(&ctx, &unlabeled_elements(4), Domain::Criminal, "cls").unwrap();
    assert!(batch.unlabeled_ids.is_empty());
    let favorability: Vec<_> = batch.elements.iter().map(|e| e.favorability.unwrap()).collect();
    assert_eq!(
        favorability,
        vec![
            Favorability::Favorable,
            Favorability::Neutral,
            Favorability::Unfavorable,
            Favorability::Neutral
        ]
    );
    // Conservation: multiset of ids preserved.
    assert_eq!(
        batch.elements.iter().map(|e| e.element_id).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );
}

#[test]
fn unknown_label_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let transport = ScriptedText::new(&[r#"[{"id":1,"classification":"MAYBE"}]"#]);
    let gateway = live_gateway(dir.path(), &["cls"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let err =
        classify_favorability(&ctx, &unlabeled_elements(1), Domain::Criminal, "cls").unwrap_err();
    assert!(matches!(err, PipelineError::UnknownLabel(label) if label == "MAYBE"));
}

#[test]
fn omitted_elements_are_reported_not_imputed() {
    let dir = tempfile::tempdir().unwrap();
    let transport = ScriptedText::new(&[r#"[{"id":1,"classification":"GÜNSTIG"}]"#]);
    let gateway = live_gateway(dir.path(), &["cls"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let batch =
        classify_favorability(&ctx, &unlabeled_elements(3), Domain::Criminal, "cls").unwrap();
    assert_eq!(batch.unlabeled_ids, vec![2, 3]);
    assert_eq!(batch.elements.len(), 3);
    let labeled = batch.elements.iter().filter(|e| e.favorability.is_some()).count();
    assert_eq!(labeled + batch.unlabeled_ids.len(), 3);
}

fn summary(text: &str) -> SummaryRecord {
    SummaryRecord {
        summary_id: "s1".into(),
        case_id: "c1".into(),
        role: Role::Judge,
        gen_model: "m".into(),
        rep_index: 0,
        text: text.into(),
    }
}

#[test]
fn inclusion_verdicts_follow_the_reply() {
    let dir = tempfile::tempdir().unwrap();
    let reply = r#"[
        {"id":1,"included":true},
        {"id":2,"included":false},
        {"id":3,"included":true}
    ]"#;
    let transport = ScriptedText::new(&[reply]);
    let gateway = live_gateway(dir.path(), &["inc"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let verdicts =
        match_inclusion(&ctx, &unlabeled_elements(3), &summary("Text."), "inc").unwrap();
    assert_eq!(
        verdicts.iter().map(|v| v.included).collect::<Vec<_>>(),
        vec![true, false, true]
    );
    assert!(verdicts.iter().all(|v| v.summary_id == "s1"));
}

#[test]
fn missing_verdict_names_the_element() {
    let dir = tempfile::tempdir().unwrap();
    // id 2 omitted in both the reply and the retry.
    let reply = r#"[{"id":1,"included":true},{"id":3,"included":false}]"#;
    let transport = ScriptedText::new(&[reply]);
    let gateway = live_gateway(dir.path(), &["inc"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let err = match_inclusion(&ctx, &unlabeled_elements(3), &summary("Text."), "inc").unwrap_err();
    assert!(matches!(err, PipelineError::MissingVerdict(2)));
}

#[test]
fn duplicate_verdicts_dedupe_or_invalidate() {
    let dir = tempfile::tempdir().unwrap();
    let equal = r#"[{"id":1,"included":true},{"id":1,"included":true}]"#;
    let transport = ScriptedText::new(&[equal]);
    let gateway = live_gateway(dir.path(), &["inc"], transport);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let verdicts = match_inclusion(&ctx, &unlabeled_elements(1), &summary("T."), "inc").unwrap();
    assert_eq!(verdicts.len(), 1);
    assert!(verdicts[0].included);

    let conflicting = r#"[{"id":1,"included":true},{"id":1,"included":false}]"#;
    let transport = ScriptedText::new(&[conflicting]);
    let gateway = live_gateway(dir.path(), &["inc"], transport);
    let ctx = PipelineCtx::new(&gateway, &templates);
    let err = match_inclusion(&ctx, &unlabeled_elements(1), &summary("T."), "inc").unwrap_err();
    assert!(matches!(err, PipelineError::MissingVerdict(1)));
}

#[test]
fn last_number_rule_parses_scores() {
    assert_eq!(
        parse_last_score("…\n- omitted X\nBias score: 7").unwrap(),
        7.0
    );
    assert_eq!(parse_last_score("2 points missing, score 3.5").unwrap(), 3.5);
    assert!(matches!(
        parse_last_score("score is 11").unwrap_err(),
        PipelineError::ScoreOutOfRange(v) if v == 11.0
    ));
    assert!(matches!(
        parse_last_score("no digits here").unwrap_err(),
        PipelineError::NoScoreFound
    ));
}

#[test]
fn preliminary_bias_scores_via_judge_model() {
    let dir = tempfile::tempdir().unwrap();
    let (gateway, _) = offline_gateway(dir.path(), GatewayMode::Record, &["judge-x"]);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);
    let score = score_preliminary_bias(
        &ctx,
        "c1",
        Role::DefenseAttorney,
        0,
        "Neutrale Zusammenfassung.",
        "Parteiische Zusammenfassung.",
        "judge-x",
    )
    .unwrap();
    assert!((0.0..=10.0).contains(&score.score));
    assert!(!score.rationale_text.is_empty());

    let err = score_preliminary_bias(&ctx, "c1", Role::NoRole, 0, "n", "t", "judge-x").unwrap_err();
    assert!(matches!(err, PipelineError::UnsupportedRole(Role::NoRole)));
}

/// The ten-row combination matrix over two generators, two extractors and
/// two inclusion models, mirroring a full cross-check setup.
fn ten_combos() -> Vec<ComboSpec> {
    let combo = |gen: &str, extract: &str, kind, include: &str| ComboSpec {
        gen_model: gen.into(),
        extract_model: extract.into(),
        include_model: include.into(),
        kind,
        classify_model: None,
    };
    vec![
        combo("gen-a", "extract-a", ElementKind::Fact, "include-a"),
        combo("gen-a", "extract-b", ElementKind::Fact, "include-a"),
        combo("gen-a", "extract-a", ElementKind::Reasoning, "include-a"),
        combo("gen-a", "extract-b", ElementKind::Reasoning, "include-a"),
        combo("gen-b", "extract-b", ElementKind::Reasoning, "include-a"),
        combo("gen-b", "extract-a", ElementKind::Fact, "include-a"),
        combo("gen-b", "extract-b", ElementKind::Fact, "include-a"),
        combo("gen-b", "extract-a", ElementKind::Reasoning, "include-a"),
        combo("gen-a", "extract-a", ElementKind::Fact, "include-b"),
        combo("gen-a", "extract-a", ElementKind::Reasoning, "include-b"),
    ]
}

#[test]
fn combos_share_extraction_across_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = two_case_corpus();
    let ids = ["gen-a", "gen-b", "extract-a", "extract-b", "include-a", "include-b"];
    let (gateway, offline) = offline_gateway(dir.path(), GatewayMode::Live, &ids);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates).with_workers(3);

    let mut summaries = Vec::new();
    for model in ["gen-a", "gen-b"] {
        summaries.extend(generate_summaries(&ctx, &corpus, model, 1).unwrap().records);
    }
    let generation_calls = offline.calls();
    assert_eq!(generation_calls, 16); // 2 models x 2 cases x 4 roles

    let bundle = run_combos(&ctx, &corpus, &summaries, &ten_combos()).unwrap();
    assert!(bundle.failures.is_empty(), "failures: {:?}", bundle.failures);

    // 10 distinct result sets.
    let combo_ids: std::collections::BTreeSet<_> =
        bundle.verdicts.iter().map(|v| v.combo_id.clone()).collect();
    assert_eq!(combo_ids.len(), 10);

    // Extraction and classification are deduplicated on (case, kind,
    // model): 2 cases x 2 kinds x 2 extractors each, then 8 inclusion
    // calls per combo (2 cases x 4 roles).
    let expected = 8 + 8 + 10 * 8;
    assert_eq!(offline.calls() - generation_calls, expected);
}

#[test]
fn single_combo_verdict_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::new(vec![criminal_case("c1", FIVE_SENTENCES)]).unwrap();
    let ids = ["gen-a", "extract-a", "include-a"];
    let (gateway, _) = offline_gateway(dir.path(), GatewayMode::Record, &ids);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);

    let summaries = generate_summaries(&ctx, &corpus, "gen-a", 1).unwrap().records;
    assert_eq!(summaries.len(), 4);
    let combos = vec![ComboSpec {
        gen_model: "gen-a".into(),
        extract_model: "extract-a".into(),
        include_model: "include-a".into(),
        kind: ElementKind::Fact,
        classify_model: None,
    }];
    let bundle = run_combos(&ctx, &corpus, &summaries, &combos).unwrap();
    assert!(bundle.failures.is_empty());
    assert_eq!(bundle.batches.len(), 1);
    assert_eq!(bundle.batches[0].elements.len(), 5);
    // 5 facts x 4 summaries.
    assert_eq!(bundle.verdicts.len(), 20);

    // Verdict totality per summary.
    for record in &summaries {
        let n = bundle.verdicts.iter().filter(|v| v.summary_id == record.summary_id).count();
        assert_eq!(n, 5);
    }
}

#[test]
fn replay_rerun_yields_identical_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = two_case_corpus();
    let ids = ["gen-a", "gen-b", "extract-a", "extract-b", "include-a", "include-b"];
    let templates = TemplateSet::bundled();

    let (recorder, _) = offline_gateway(dir.path(), GatewayMode::Record, &ids);
    let ctx = PipelineCtx::new(&recorder, &templates);
    let mut summaries = Vec::new();
    for model in ["gen-a", "gen-b"] {
        summaries.extend(generate_summaries(&ctx, &corpus, model, 1).unwrap().records);
    }
    let recorded = run_combos(&ctx, &corpus, &summaries, &ten_combos()).unwrap();

    let (replayer, offline) = offline_gateway(dir.path(), GatewayMode::Replay, &ids);
    let ctx = PipelineCtx::new(&replayer, &templates).with_workers(8);
    let replayed = run_combos(&ctx, &corpus, &summaries, &ten_combos()).unwrap();
    assert_eq!(offline.calls(), 0);

    let a = serde_json::to_string(&recorded.batches).unwrap();
    let b = serde_json::to_string(&replayed.batches).unwrap();
    assert_eq!(a, b);
    let a = serde_json::to_string(&recorded.verdicts).unwrap();
    let b = serde_json::to_string(&replayed.verdicts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_summary_cell_marks_combo_partial() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::new(vec![criminal_case("c1", FIVE_SENTENCES)]).unwrap();
    let ids = ["gen-a", "extract-a", "include-a"];
    let (gateway, _) = offline_gateway(dir.path(), GatewayMode::Record, &ids);
    let templates = TemplateSet::bundled();
    let ctx = PipelineCtx::new(&gateway, &templates);

    let mut summaries = generate_summaries(&ctx, &corpus, "gen-a", 1).unwrap().records;
    summaries.retain(|r| r.role != Role::DefenseAttorney);
    let combos = vec![ComboSpec {
        gen_model: "gen-a".into(),
        extract_model: "extract-a".into(),
        include_model: "include-a".into(),
        kind: ElementKind::Fact,
        classify_model: None,
    }];
    let bundle = run_combos(&ctx, &corpus, &summaries, &combos).unwrap();
    assert_eq!(bundle.verdicts.len(), 15); // 3 remaining summaries x 5 facts
    assert_eq!(bundle.failures.len(), 1);
    assert!(bundle.failures[0].key.contains("defense_attorney"));
}
