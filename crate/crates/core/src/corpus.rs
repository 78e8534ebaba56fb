//! Data model for cases, legal roles, and stakeholder anchors, plus JSONL
//! corpus loading and validation.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::SummaryRecord;

/// Area of law a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Criminal,
    Private,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Criminal => "criminal",
            Domain::Private => "private",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stakeholder perspective a summary is generated under.
///
/// `Prosecutor` and `DefenseAttorney` exist only in criminal law,
/// `PlaintiffAttorney` and `RespondentAttorney` only in private law;
/// `NoRole` and `Judge` are valid in both domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    NoRole,
    Judge,
    Prosecutor,
    DefenseAttorney,
    PlaintiffAttorney,
    RespondentAttorney,
}

impl Role {
    pub fn is_valid_for(&self, domain: Domain) -> bool {
        match self {
            Role::NoRole | Role::Judge => true,
            Role::Prosecutor | Role::DefenseAttorney => domain == Domain::Criminal,
            Role::PlaintiffAttorney | Role::RespondentAttorney => domain == Domain::Private,
        }
    }

    /// The four role conditions a case of the given domain is summarized under.
    pub fn conditions_for(domain: Domain) -> [Role; 4] {
        match domain {
            Domain::Criminal => [
                Role::NoRole,
                Role::Judge,
                Role::Prosecutor,
                Role::DefenseAttorney,
            ],
            Domain::Private => [
                Role::NoRole,
                Role::Judge,
                Role::PlaintiffAttorney,
                Role::RespondentAttorney,
            ],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::NoRole => "no_role",
            Role::Judge => "judge",
            Role::Prosecutor => "prosecutor",
            Role::DefenseAttorney => "defense_attorney",
            Role::PlaintiffAttorney => "plaintiff_attorney",
            Role::RespondentAttorney => "respondent_attorney",
        }
    }

    /// English stakeholder label used in judge prompts and reports.
    pub fn stakeholder_label(&self) -> &'static str {
        match self {
            Role::NoRole => "no role",
            Role::Judge => "judge",
            Role::Prosecutor => "prosecutor",
            Role::DefenseAttorney => "defense attorney",
            Role::PlaintiffAttorney => "plaintiff attorney",
            Role::RespondentAttorney => "respondent attorney",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The fixed perspective favorability labels are anchored to: the defense
/// attorney in criminal cases and the plaintiff attorney in private cases.
///
/// Constructible only through [`StakeholderAnchor::for_domain`], so no other
/// domain/role pairing can exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StakeholderAnchor {
    domain: Domain,
    anchor_role: Role,
}

impl StakeholderAnchor {
    pub fn for_domain(domain: Domain) -> Self {
        let anchor_role = match domain {
            Domain::Criminal => Role::DefenseAttorney,
            Domain::Private => Role::PlaintiffAttorney,
        };
        StakeholderAnchor {
            domain,
            anchor_role,
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn anchor_role(&self) -> Role {
        self.anchor_role
    }
}

/// Which side prevailed, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    ProsecutionPrevailed,
    DefensePrevailed,
    PlaintiffPrevailed,
    RespondentPrevailed,
}

impl OutcomeLabel {
    pub fn is_valid_for(&self, domain: Domain) -> bool {
        match self {
            OutcomeLabel::ProsecutionPrevailed | OutcomeLabel::DefensePrevailed => {
                domain == Domain::Criminal
            }
            OutcomeLabel::PlaintiffPrevailed | OutcomeLabel::RespondentPrevailed => {
                domain == Domain::Private
            }
        }
    }
}

fn default_language() -> String {
    "de".to_string()
}

/// One source document: a court opinion with optional reference summary and
/// outcome metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub domain: Domain,
    #[serde(default = "default_language")]
    pub language: String,
    pub opinion_text: String,
    #[serde(default)]
    pub reference_summary: Option<String>,
    #[serde(default)]
    pub outcome_label: Option<OutcomeLabel>,
    #[serde(default)]
    pub source_uri: Option<String>,
}

/// An ordered collection of cases; iteration order is on-disk order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    cases: Vec<Case>,
}

impl Corpus {
    /// Builds a corpus from already-validated cases, enforcing id uniqueness
    /// and per-case invariants.
    pub fn new(cases: Vec<Case>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for case in &cases {
            if !seen.insert(case.case_id.clone()) {
                return Err(CorpusError::DuplicateCaseId(case.case_id.clone()));
            }
            check_case(case)?;
        }
        Ok(Corpus { cases })
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Case> {
        self.cases.iter()
    }

    /// Serializes the corpus back to JSONL, one case per line, fields in
    /// canonical (struct) order. `load_corpus` of the output reproduces the
    /// corpus exactly.
    pub fn to_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for case in &self.cases {
            let line = serde_json::to_string(case).expect("case serialization cannot fail");
            writer.write_all(line.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: malformed case record: {1}")]
    MalformedLine(usize, String),
    #[error("duplicate case_id {0:?}")]
    DuplicateCaseId(String),
    #[error("case {case_id:?}: outcome label {outcome:?} is not valid in domain {domain}")]
    DomainRoleMismatch {
        case_id: String,
        domain: Domain,
        outcome: OutcomeLabel,
    },
    #[error("case {case_id:?} is invalid: {reasons}")]
    InvalidCase { case_id: String, reasons: String },
}

/// A single violated invariant, as data rather than an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every per-case invariant; an empty result means the case is valid.
pub fn validate_case(case: &Case) -> Vec<Violation> {
    let mut violations = Vec::new();
    if case.case_id.trim().is_empty() {
        violations.push(Violation {
            field: "case_id",
            rule: "must be non-empty".to_string(),
        });
    }
    if word_count(&case.opinion_text) < 1 {
        violations.push(Violation {
            field: "opinion_text",
            rule: "must contain at least one word".to_string(),
        });
    }
    if let Some(outcome) = case.outcome_label {
        if !outcome.is_valid_for(case.domain) {
            violations.push(Violation {
                field: "outcome_label",
                rule: format!("{outcome:?} is inconsistent with domain {}", case.domain),
            });
        }
    }
    violations
}

fn check_case(case: &Case) -> Result<(), CorpusError> {
    if let Some(outcome) = case.outcome_label {
        if !outcome.is_valid_for(case.domain) {
            return Err(CorpusError::DomainRoleMismatch {
                case_id: case.case_id.clone(),
                domain: case.domain,
                outcome,
            });
        }
    }
    let violations = validate_case(case);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::InvalidCase {
            case_id: case.case_id.clone(),
            reasons: violations
                .iter()
                .map(Violation::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        })
    }
}

/// Loads a JSONL corpus file, one case object per line. Blank lines are
/// skipped; line order is preserved.
pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<Corpus, CorpusError> {
    let file = File::open(path)?;
    load_corpus_reader(BufReader::new(file))
}

pub fn load_corpus_reader<R: Read>(reader: BufReader<R>) -> Result<Corpus, CorpusError> {
    let mut cases = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: Case = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedLine(line_no, e.to_string()))?;
        if !seen.insert(case.case_id.clone()) {
            return Err(CorpusError::DuplicateCaseId(case.case_id));
        }
        check_case(&case)?;
        cases.push(case);
    }
    Ok(Corpus { cases })
}

/// Number of non-empty tokens after splitting on Unicode whitespace.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Document type for word-count statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DocType {
    FullOpinion,
    ReferenceSummary,
    GeneratedSummary,
}

impl DocType {
    pub fn as_str(&self) -> &'static str {
        match self {
            DocType::FullOpinion => "full_opinion",
            DocType::ReferenceSummary => "reference_summary",
            DocType::GeneratedSummary => "generated_summary",
        }
    }
}

/// One mean word-count cell: (document type, role or N/A, domain).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordStatRow {
    pub doc_type: DocType,
    pub role: Option<Role>,
    pub domain: Domain,
    pub mean_words: f64,
    pub n_docs: usize,
}

impl WordStatRow {
    /// Mean rounded to the nearest integer for display; `mean_words` keeps
    /// full precision.
    pub fn rounded_mean(&self) -> i64 {
        self.mean_words.round() as i64
    }
}

/// Mean word counts per (document type, role, domain) group. Empty groups
/// are omitted; output order is deterministic.
pub fn corpus_word_stats(corpus: &Corpus, summaries: &[SummaryRecord]) -> Vec<WordStatRow> {
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    struct Key(DocType, Option<Role>, Domain);

    let mut sums: BTreeMap<Key, (usize, usize)> = BTreeMap::new();
    let mut add = |key: Key, words: usize| {
        let entry = sums.entry(key).or_insert((0, 0));
        entry.0 += words;
        entry.1 += 1;
    };

    for case in corpus.iter() {
        add(
            Key(DocType::FullOpinion, None, case.domain),
            word_count(&case.opinion_text),
        );
        if let Some(reference) = &case.reference_summary {
            add(
                Key(DocType::ReferenceSummary, None, case.domain),
                word_count(reference),
            );
        }
    }
    for record in summaries {
        let Some(case) = corpus.get(&record.case_id) else {
            continue;
        };
        add(
            Key(DocType::GeneratedSummary, Some(record.role), case.domain),
            word_count(&record.text),
        );
    }

    sums.into_iter()
        .map(|(Key(doc_type, role, domain), (total, n))| WordStatRow {
            doc_type,
            role,
            domain,
            mean_words: total as f64 / n as f64,
            n_docs: n,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn criminal_case(id: &str) -> Case {
        Case {
            case_id: id.to_string(),
            domain: Domain::Criminal,
            language: "de".to_string(),
            opinion_text: "Das Gericht weist die Beschwerde ab.".to_string(),
            reference_summary: None,
            outcome_label: Some(OutcomeLabel::ProsecutionPrevailed),
            source_uri: None,
        }
    }

    #[test]
    fn role_validity_follows_domain() {
        assert!(Role::Prosecutor.is_valid_for(Domain::Criminal));
        assert!(!Role::Prosecutor.is_valid_for(Domain::Private));
        assert!(Role::PlaintiffAttorney.is_valid_for(Domain::Private));
        assert!(!Role::PlaintiffAttorney.is_valid_for(Domain::Criminal));
        assert!(Role::NoRole.is_valid_for(Domain::Criminal));
        assert!(Role::Judge.is_valid_for(Domain::Private));
    }

    #[test]
    fn anchor_is_fixed_per_domain() {
        assert_eq!(
            StakeholderAnchor::for_domain(Domain::Criminal).anchor_role(),
            Role::DefenseAttorney
        );
        assert_eq!(
            StakeholderAnchor::for_domain(Domain::Private).anchor_role(),
            Role::PlaintiffAttorney
        );
    }

    #[test]
    fn load_preserves_order_and_round_trips() {
        let jsonl = concat!(
            r#"{"case_id":"c1","domain":"criminal","language":"de","opinion_text":"Ein Wort.","reference_summary":null,"outcome_label":null,"source_uri":null}"#,
            "\n",
            r#"{"case_id":"c2","domain":"private","language":"de","opinion_text":"Zwei kurze Worte.","reference_summary":"Kurz.","outcome_label":"plaintiff_prevailed","source_uri":"urn:x"}"#,
            "\n",
        );
        let corpus = load_corpus_reader(BufReader::new(jsonl.as_bytes())).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.cases()[0].case_id, "c1");
        assert_eq!(corpus.cases()[1].case_id, "c2");

        let mut out = Vec::new();
        corpus.to_jsonl(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), jsonl);
    }

    #[test]
    fn duplicate_case_id_is_rejected() {
        let mut lines = String::new();
        for _ in 0..2 {
            lines.push_str(r#"{"case_id":"c1","domain":"criminal","opinion_text":"Text."}"#);
            lines.push('\n');
        }
        let err = load_corpus_reader(BufReader::new(lines.as_bytes())).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateCaseId(id) if id == "c1"));
    }

    #[test]
    fn inconsistent_outcome_is_rejected_at_load() {
        let line = r#"{"case_id":"c1","domain":"criminal","opinion_text":"Text.","outcome_label":"plaintiff_prevailed"}"#;
        let err = load_corpus_reader(BufReader::new(line.as_bytes())).unwrap_err();
        assert!(matches!(err, CorpusError::DomainRoleMismatch { .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"case_id\":\"c1\",\"domain\":\"criminal\",\"opinion_text\":\"ok\"}\nnot json\n";
        let err = load_corpus_reader(BufReader::new(text.as_bytes())).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedLine(2, _)));
    }

    #[test]
    fn validate_reports_empty_opinion() {
        let mut case = criminal_case("c1");
        case.opinion_text = "   ".to_string();
        let violations = validate_case(&case);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "opinion_text");
    }

    #[test]
    fn validate_reports_outcome_domain_mismatch() {
        let mut case = criminal_case("c1");
        case.domain = Domain::Private;
        case.outcome_label = Some(OutcomeLabel::DefensePrevailed);
        let violations = validate_case(&case);
        assert!(violations.iter().any(|v| v.field == "outcome_label"));
    }

    #[test]
    fn well_formed_case_has_no_violations() {
        assert!(validate_case(&criminal_case("c1")).is_empty());
    }

    #[test]
    fn word_count_splits_on_unicode_whitespace() {
        assert_eq!(word_count("ein zwei drei"), 3);
        assert_eq!(word_count("  ein\tzwei\nドイツ  "), 3);
        assert_eq!(word_count(""), 0);
    }

    #[test]
    fn word_stats_mean_over_group() {
        let mut c1 = criminal_case("c1");
        c1.opinion_text = (0..10).map(|_| "w").collect::<Vec<_>>().join(" ");
        let mut c2 = criminal_case("c2");
        c2.opinion_text = (0..20).map(|_| "w").collect::<Vec<_>>().join(" ");
        let corpus = Corpus::new(vec![c1, c2]).unwrap();
        let rows = corpus_word_stats(&corpus, &[]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].doc_type, DocType::FullOpinion);
        assert_eq!(rows[0].mean_words, 15.0);
        assert_eq!(rows[0].rounded_mean(), 15);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_case(index: usize) -> impl Strategy<Value = Case> {
            (
                any::<bool>(),
                ".*",
                proptest::option::of(".*"),
                proptest::option::of(0usize..2),
                proptest::option::of("[a-z:/.]{1,20}"),
            )
                .prop_map(move |(criminal, text, reference, outcome, uri)| {
                    let domain = if criminal { Domain::Criminal } else { Domain::Private };
                    let outcome_label = outcome.map(|pick| match (domain, pick) {
                        (Domain::Criminal, 0) => OutcomeLabel::ProsecutionPrevailed,
                        (Domain::Criminal, _) => OutcomeLabel::DefensePrevailed,
                        (Domain::Private, 0) => OutcomeLabel::PlaintiffPrevailed,
                        (Domain::Private, _) => OutcomeLabel::RespondentPrevailed,
                    });
                    Case {
                        case_id: format!("case-{index}"),
                        domain,
                        language: "de".into(),
                        // Guarantee the one-word minimum, then arbitrary
                        // unicode tail.
                        opinion_text: format!("wort {text}"),
                        reference_summary: reference,
                        outcome_label,
                        source_uri: uri,
                    }
                })
        }

        fn arb_corpus() -> impl Strategy<Value = Vec<Case>> {
            (1usize..6).prop_flat_map(|n| {
                (0..n).map(arb_case).collect::<Vec<_>>()
            })
        }

        proptest! {
            #[test]
            fn jsonl_round_trip_is_identity(cases in arb_corpus()) {
                let corpus = Corpus::new(cases).unwrap();
                let mut buffer = Vec::new();
                corpus.to_jsonl(&mut buffer).unwrap();
                let reloaded = load_corpus_reader(BufReader::new(buffer.as_slice())).unwrap();
                prop_assert_eq!(&reloaded, &corpus);
                for case in reloaded.iter() {
                    prop_assert!(validate_case(case).is_empty());
                }
            }

            #[test]
            fn word_stats_equal_brute_force(cases in arb_corpus()) {
                let corpus = Corpus::new(cases).unwrap();
                let rows = corpus_word_stats(&corpus, &[]);
                for row in rows {
                    let members: Vec<usize> = corpus
                        .iter()
                        .filter(|c| c.domain == row.domain)
                        .filter_map(|c| match row.doc_type {
                            DocType::FullOpinion => Some(word_count(&c.opinion_text)),
                            DocType::ReferenceSummary => {
                                c.reference_summary.as_ref().map(|r| word_count(r))
                            }
                            DocType::GeneratedSummary => None,
                        })
                        .collect();
                    prop_assert_eq!(members.len(), row.n_docs);
                    let brute = members.iter().sum::<usize>() as f64 / members.len() as f64;
                    prop_assert_eq!(brute, row.mean_words);
                }
            }
        }
    }
}
