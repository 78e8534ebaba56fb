//! Human-annotation sheet export/import and agreement reporting.
//!
//! Sheets are per-(annotator, case) CSV files: two 7-point Likert ratings
//! (fact and reasoning inclusion) and a yes/no/unsure favorability
//! judgment per summary. Presentation order is randomized by a seeded
//! stream per (annotator, case) and recorded in the export manifest.
//! Import validates row by row and fails with precise diagnostics;
//! agreement delegates to the stats module (ICC(3,k) per Likert
//! dimension, Fleiss' kappa for favorability in both a 3-category and a
//! 2-category variant).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Case, Domain, Role, StakeholderAnchor};
use crate::pipeline::SummaryRecord;
use crate::seeded;
use crate::stats::{fleiss_kappa, icc3k, IccResult, KappaResult, StatsError};

pub const SHEET_COLUMNS: [&str; 10] = [
    "annotator_id",
    "case_id",
    "summary_id",
    "role",
    "gen_model",
    "summary_text",
    "fact_inclusion",
    "reasoning_inclusion",
    "favorability",
    "comments",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FavorabilityJudgment {
    Yes,
    No,
    Unsure,
}

impl FavorabilityJudgment {
    pub fn as_str(&self) -> &'static str {
        match self {
            FavorabilityJudgment::Yes => "yes",
            FavorabilityJudgment::No => "no",
            FavorabilityJudgment::Unsure => "unsure",
        }
    }

    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_lowercase().as_str() {
            "yes" => Some(FavorabilityJudgment::Yes),
            "no" => Some(FavorabilityJudgment::No),
            "unsure" => Some(FavorabilityJudgment::Unsure),
            _ => None,
        }
    }
}

/// One completed rating row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub case_id: String,
    pub summary_id: String,
    pub role: String,
    pub gen_model: String,
    pub fact_inclusion: u8,
    pub reasoning_inclusion: u8,
    pub favorability: FavorabilityJudgment,
    pub comments: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SheetFile {
    pub path: PathBuf,
    pub annotator_id: String,
    pub case_id: String,
    /// Summary ids in presentation order.
    pub summary_order: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportManifest {
    pub seed: u64,
    pub files: Vec<SheetFile>,
}

/// One row-precise import problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaDiag {
    pub file: String,
    /// 1-based data row (header and metadata lines excluded).
    pub row: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for SchemaDiag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} row {} field {}: {}",
            self.file, self.row, self.field, self.message
        )
    }
}

#[derive(Debug, Error)]
pub enum AnnoError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("case {case_id} is missing the summary for role {role} and model {gen_model}")]
    MissingSummary {
        case_id: String,
        role: String,
        gen_model: String,
    },
    #[error("{} import problem(s); first: {}", .0.len(), .0[0])]
    Import(Vec<SchemaDiag>),
    #[error("agreement needs at least 2 raters")]
    InsufficientRaters,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn io_err(path: &Path, e: impl fmt::Display) -> AnnoError {
    AnnoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn anchor_description(domain: Domain) -> &'static str {
    match StakeholderAnchor::for_domain(domain).anchor_role() {
        Role::DefenseAttorney => {
            "Verteidiger, dessen Mandant sich in einer ähnlichen Situation wie der Beschuldigte befindet"
        }
        _ => {
            "Rechtsanwalt, dessen Mandant sich in einer ähnlichen Situation wie der Beschwerdeführer befindet"
        }
    }
}

pub fn sheet_file_name(annotator_id: &str, case_id: &str) -> String {
    format!("anno_{annotator_id}_{case_id}.csv")
}

struct SheetRow {
    summary_id: String,
    role: String,
    gen_model: String,
    text: String,
}

/// Writes one CSV per (annotator, case). Every case must have a summary
/// for each of its four role conditions and every generation model in
/// `summaries`; the reference summary, when present, becomes one more row.
pub fn export_sheets(
    cases: &[&Case],
    summaries: &[SummaryRecord],
    annotators: &[String],
    out_dir: &Path,
    seed: u64,
) -> Result<ExportManifest, AnnoError> {
    let models: BTreeSet<&str> = summaries.iter().map(|s| s.gen_model.as_str()).collect();
    let mut files = Vec::new();
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    for case in cases {
        let mut base_rows: Vec<SheetRow> = Vec::new();
        if let Some(reference) = &case.reference_summary {
            base_rows.push(SheetRow {
                summary_id: format!("{}.reference", case.case_id),
                role: "reference".into(),
                gen_model: "reference".into(),
                text: reference.clone(),
            });
        }
        for model in &models {
            for role in Role::conditions_for(case.domain) {
                let record = summaries
                    .iter()
                    .find(|s| {
                        s.case_id == case.case_id && s.role == role && s.gen_model == *model
                    })
                    .ok_or_else(|| AnnoError::MissingSummary {
                        case_id: case.case_id.clone(),
                        role: role.to_string(),
                        gen_model: model.to_string(),
                    })?;
                base_rows.push(SheetRow {
                    summary_id: record.summary_id.clone(),
                    role: role.to_string(),
                    gen_model: model.to_string(),
                    text: record.text.clone(),
                });
            }
        }

        for annotator in annotators {
            let mut order: Vec<usize> = (0..base_rows.len()).collect();
            seeded::shuffle(
                seed,
                &format!("sheet|{annotator}|{}", case.case_id),
                &mut order,
            );
            let path = out_dir.join(sheet_file_name(annotator, &case.case_id));
            let mut buffer = Vec::new();
            writeln!(buffer, "# annotation sheet").unwrap();
            writeln!(buffer, "# annotator: {annotator}").unwrap();
            writeln!(buffer, "# case: {}", case.case_id).unwrap();
            writeln!(buffer, "# domain: {}", case.domain).unwrap();
            writeln!(buffer, "# stakeholder anchor: {}", anchor_description(case.domain)).unwrap();
            writeln!(
                buffer,
                "# instructions: rate fact_inclusion and reasoning_inclusion on a 1-7 scale; \
                 judge favorability toward the stakeholder anchor above as yes, no, or unsure; \
                 do not edit summary_text"
            )
            .unwrap();
            {
                let mut writer = csv::Writer::from_writer(&mut buffer);
                writer.write_record(SHEET_COLUMNS).unwrap();
                for &index in &order {
                    let row = &base_rows[index];
                    writer
                        .write_record([
                            annotator.as_str(),
                            case.case_id.as_str(),
                            row.summary_id.as_str(),
                            row.role.as_str(),
                            row.gen_model.as_str(),
                            row.text.as_str(),
                            "",
                            "",
                            "",
                            "",
                        ])
                        .unwrap();
                }
                writer.flush().unwrap();
            }
            std::fs::write(&path, &buffer).map_err(|e| io_err(&path, e))?;
            files.push(SheetFile {
                path,
                annotator_id: annotator.clone(),
                case_id: case.case_id.clone(),
                summary_order: order.iter().map(|&i| base_rows[i].summary_id.clone()).collect(),
            });
        }
    }
    Ok(ExportManifest { seed, files })
}

fn parse_likert(
    raw: &str,
    file: &str,
    row: usize,
    field: &str,
    diagnostics: &mut Vec<SchemaDiag>,
) -> Option<u8> {
    match raw.trim().parse::<i64>() {
        Ok(v) if (1..=7).contains(&v) => Some(v as u8),
        _ => {
            diagnostics.push(SchemaDiag {
                file: file.to_string(),
                row,
                field: field.to_string(),
                message: format!("expected an integer in 1..7, got {raw:?}"),
            });
            None
        }
    }
}

/// Imports completed sheets. All files are validated before anything is
/// returned; any problem fails the whole import with per-row diagnostics.
pub fn import_sheets(paths: &[PathBuf]) -> Result<Vec<AnnotationRecord>, AnnoError> {
    let mut records = Vec::new();
    let mut diagnostics: Vec<SchemaDiag> = Vec::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();

    for path in paths {
        let file_label = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let raw = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let data: String = raw
            .lines()
            .filter(|line| !line.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut reader = csv::Reader::from_reader(data.as_bytes());
        let headers: Vec<String> =
            reader.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
        if headers != SHEET_COLUMNS {
            diagnostics.push(SchemaDiag {
                file: file_label.clone(),
                row: 0,
                field: "header".into(),
                message: format!("expected columns {SHEET_COLUMNS:?}, got {headers:?}"),
            });
            continue;
        }
        for (index, parsed) in reader.records().enumerate() {
            let row = index + 1;
            let record = match parsed {
                Ok(r) => r,
                Err(e) => {
                    diagnostics.push(SchemaDiag {
                        file: file_label.clone(),
                        row,
                        field: "row".into(),
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let field = |i: usize| record.get(i).unwrap_or("").to_string();
            let annotator_id = field(0);
            let case_id = field(1);
            let summary_id = field(2);
            for (i, name) in [(0, "annotator_id"), (1, "case_id"), (2, "summary_id")] {
                if field(i).trim().is_empty() {
                    diagnostics.push(SchemaDiag {
                        file: file_label.clone(),
                        row,
                        field: name.into(),
                        message: "must be non-empty".into(),
                    });
                }
            }
            let fact =
                parse_likert(&field(6), &file_label, row, "fact_inclusion", &mut diagnostics);
            let reasoning = parse_likert(
                &field(7),
                &file_label,
                row,
                "reasoning_inclusion",
                &mut diagnostics,
            );
            let favorability = FavorabilityJudgment::parse(&field(8));
            if favorability.is_none() {
                diagnostics.push(SchemaDiag {
                    file: file_label.clone(),
                    row,
                    field: "favorability".into(),
                    message: format!("expected yes/no/unsure, got {:?}", field(8)),
                });
            }
            if !seen.insert((annotator_id.clone(), summary_id.clone())) {
                diagnostics.push(SchemaDiag {
                    file: file_label.clone(),
                    row,
                    field: "summary_id".into(),
                    message: format!(
                        "duplicate rating by annotator {annotator_id:?} for summary {summary_id:?}"
                    ),
                });
            }
            if let (Some(fact_inclusion), Some(reasoning_inclusion), Some(favorability)) =
                (fact, reasoning, favorability)
            {
                let comments = field(9);
                records.push(AnnotationRecord {
                    annotator_id,
                    case_id,
                    summary_id,
                    role: field(3),
                    gen_model: field(4),
                    fact_inclusion,
                    reasoning_inclusion,
                    favorability,
                    comments: (!comments.trim().is_empty()).then_some(comments),
                });
            }
        }
    }
    if diagnostics.is_empty() {
        Ok(records)
    } else {
        Err(AnnoError::Import(diagnostics))
    }
}

/// Agreement numbers for one subset of subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n_subjects: usize,
    pub n_raters: usize,
    pub fact_icc: Option<IccResult>,
    pub reasoning_icc: Option<IccResult>,
    /// Kappa over yes/no/unsure.
    pub favorability_kappa_3cat: Option<KappaResult>,
    /// Kappa over yes/no, computed on items where no rater chose unsure.
    pub favorability_kappa_2cat: Option<KappaResult>,
    pub kappa_2cat_items_dropped: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementReport {
    pub overall: AgreementStats,
    pub by_domain: BTreeMap<String, AgreementStats>,
    /// Subjects dropped because not every annotator rated them.
    pub dropped_incomplete: usize,
}

struct Subject<'a> {
    case_id: &'a str,
    ratings: Vec<&'a AnnotationRecord>, // one per rater, rater order
}

fn stats_for(subjects: &[&Subject], icc_alpha: f64, n_raters: usize) -> AgreementStats {
    let mut notes = Vec::new();
    let fact: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| s.ratings.iter().map(|r| f64::from(r.fact_inclusion)).collect())
        .collect();
    let reasoning: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| s.ratings.iter().map(|r| f64::from(r.reasoning_inclusion)).collect())
        .collect();

    let mut icc = |matrix: &[Vec<f64>], label: &str| match icc3k(matrix, icc_alpha) {
        Ok(result) => Some(result),
        Err(e) => {
            notes.push(format!("{label} ICC unavailable: {e}"));
            None
        }
    };
    let fact_icc = icc(&fact, "fact");
    let reasoning_icc = icc(&reasoning, "reasoning");

    let counts3: Vec<Vec<usize>> = subjects
        .iter()
        .map(|s| {
            let mut row = vec![0usize; 3];
            for r in &s.ratings {
                row[match r.favorability {
                    FavorabilityJudgment::Yes => 0,
                    FavorabilityJudgment::No => 1,
                    FavorabilityJudgment::Unsure => 2,
                }] += 1;
            }
            row
        })
        .collect();
    let favorability_kappa_3cat = match fleiss_kappa(&counts3, n_raters) {
        Ok(result) => Some(result),
        Err(e) => {
            notes.push(format!("3-category kappa unavailable: {e}"));
            None
        }
    };

    let counts2: Vec<Vec<usize>> = counts3
        .iter()
        .filter(|row| row[2] == 0)
        .map(|row| vec![row[0], row[1]])
        .collect();
    let kappa_2cat_items_dropped = counts3.len() - counts2.len();
    let favorability_kappa_2cat = if counts2.is_empty() {
        notes.push("2-category kappa unavailable: every item has an unsure rating".into());
        None
    } else {
        match fleiss_kappa(&counts2, n_raters) {
            Ok(result) => Some(result),
            Err(e) => {
                notes.push(format!("2-category kappa unavailable: {e}"));
                None
            }
        }
    };

    AgreementStats {
        n_subjects: subjects.len(),
        n_raters,
        fact_icc,
        reasoning_icc,
        favorability_kappa_3cat,
        favorability_kappa_2cat,
        kappa_2cat_items_dropped,
        notes,
    }
}

/// Builds agreement statistics overall and per domain. Subjects are
/// (case, summary) pairs rated by every annotator; incomplete ones are
/// dropped and counted.
pub fn agreement_report(
    records: &[AnnotationRecord],
    domains: &BTreeMap<String, Domain>,
    icc_alpha: f64,
) -> Result<AgreementReport, AnnoError> {
    let raters: BTreeSet<&str> = records.iter().map(|r| r.annotator_id.as_str()).collect();
    if raters.len() < 2 {
        return Err(AnnoError::InsufficientRaters);
    }
    let raters: Vec<&str> = raters.into_iter().collect();

    let mut by_subject: BTreeMap<(&str, &str), BTreeMap<&str, &AnnotationRecord>> =
        BTreeMap::new();
    for record in records {
        by_subject
            .entry((record.case_id.as_str(), record.summary_id.as_str()))
            .or_default()
            .insert(record.annotator_id.as_str(), record);
    }

    let mut subjects: Vec<Subject> = Vec::new();
    let mut dropped_incomplete = 0usize;
    for ((case_id, _), ratings) in &by_subject {
        if ratings.len() == raters.len() {
            subjects.push(Subject {
                case_id,
                ratings: raters.iter().map(|r| ratings[r]).collect(),
            });
        } else {
            dropped_incomplete += 1;
        }
    }

    let all: Vec<&Subject> = subjects.iter().collect();
    let overall = stats_for(&all, icc_alpha, raters.len());

    let mut by_domain = BTreeMap::new();
    let domains_present: BTreeSet<Domain> = subjects
        .iter()
        .filter_map(|s| domains.get(s.case_id).copied())
        .collect();
    for domain in domains_present {
        let subset: Vec<&Subject> = subjects
            .iter()
            .filter(|s| domains.get(s.case_id) == Some(&domain))
            .collect();
        by_domain.insert(domain.to_string(), stats_for(&subset, icc_alpha, raters.len()));
    }

    Ok(AgreementReport {
        overall,
        by_domain,
        dropped_incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::OutcomeLabel;
    use crate::pipeline::summary_id;

    fn case(id: &str, domain: Domain) -> Case {
        Case {
            case_id: id.into(),
            domain,
            language: "de".into(),
            opinion_text: "Das Gericht entschied den Fall.".into(),
            reference_summary: Some("Neutrale Referenzzusammenfassung.".into()),
            outcome_label: match domain {
                Domain::Criminal => Some(OutcomeLabel::ProsecutionPrevailed),
                Domain::Private => Some(OutcomeLabel::RespondentPrevailed),
            },
            source_uri: None,
        }
    }

    fn summaries_for(case: &Case, models: &[&str]) -> Vec<SummaryRecord> {
        let mut records = Vec::new();
        for model in models {
            for role in Role::conditions_for(case.domain) {
                records.push(SummaryRecord {
                    summary_id: summary_id(&case.case_id, role, model, 0),
                    case_id: case.case_id.clone(),
                    role,
                    gen_model: model.to_string(),
                    rep_index: 0,
                    text: format!("Zusammenfassung {role} von {model}."),
                });
            }
        }
        records
    }

    fn fill_sheet(path: &Path, fact: &str, reasoning: &str, favorability: &str) {
        let raw = std::fs::read_to_string(path).unwrap();
        let mut out = Vec::new();
        for line in raw.lines() {
            if line.starts_with('#') || line.starts_with("annotator_id") {
                out.push(line.to_string());
            } else if !line.trim().is_empty() {
                // Exported data rows end with the four empty rating and
                // comment cells.
                let filled = line
                    .strip_suffix(",,,")
                    .map(|prefix| format!("{prefix}{fact},{reasoning},{favorability},"))
                    .unwrap_or_else(|| line.to_string());
                out.push(filled);
            }
        }
        std::fs::write(path, out.join("\n") + "\n").unwrap();
    }

    #[test]
    fn export_writes_one_file_per_annotator_case() {
        let dir = tempfile::tempdir().unwrap();
        let criminal = case("c1", Domain::Criminal);
        let summaries = summaries_for(&criminal, &["m1", "m2"]);
        let annotators: Vec<String> = vec!["a1".into(), "a2".into(), "a3".into()];
        let manifest =
            export_sheets(&[&criminal], &summaries, &annotators, dir.path(), 7).unwrap();
        assert_eq!(manifest.files.len(), 3);
        for file in &manifest.files {
            // reference + 4 roles x 2 models
            assert_eq!(file.summary_order.len(), 9);
            assert!(file.path.exists());
        }
        // Same seed, same order.
        let again = export_sheets(&[&criminal], &summaries, &annotators, dir.path(), 7).unwrap();
        assert_eq!(
            manifest.files[0].summary_order,
            again.files[0].summary_order
        );
        // Orders differ between annotators with overwhelming probability.
        assert_ne!(
            manifest.files[0].summary_order,
            manifest.files[1].summary_order
        );
    }

    #[test]
    fn missing_summary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let criminal = case("c1", Domain::Criminal);
        let mut summaries = summaries_for(&criminal, &["m1"]);
        summaries.retain(|s| s.role != Role::DefenseAttorney);
        let err = export_sheets(&[&criminal], &summaries, &["a1".into()], dir.path(), 7)
            .unwrap_err();
        assert!(matches!(err, AnnoError::MissingSummary { role, .. } if role == "defense_attorney"));
    }

    #[test]
    fn filled_sheet_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let criminal = case("c1", Domain::Criminal);
        let summaries = summaries_for(&criminal, &["m1"]);
        let manifest =
            export_sheets(&[&criminal], &summaries, &["a1".into()], dir.path(), 7).unwrap();
        let path = manifest.files[0].path.clone();
        fill_sheet(&path, "5", "4", "yes");

        let records = import_sheets(&[path]).unwrap();
        assert_eq!(records.len(), 5); // reference + 4 roles
        let keys: BTreeSet<String> = records.iter().map(|r| r.summary_id.clone()).collect();
        let exported: BTreeSet<String> =
            manifest.files[0].summary_order.iter().cloned().collect();
        assert_eq!(keys, exported);
        assert!(records.iter().all(|r| r.fact_inclusion == 5));
    }

    #[test]
    fn out_of_range_likert_is_row_precise() {
        let dir = tempfile::tempdir().unwrap();
        let criminal = case("c1", Domain::Criminal);
        let summaries = summaries_for(&criminal, &["m1"]);
        let manifest =
            export_sheets(&[&criminal], &summaries, &["a1".into()], dir.path(), 7).unwrap();
        let path = manifest.files[0].path.clone();
        fill_sheet(&path, "8", "4", "yes");

        let err = import_sheets(&[path]).unwrap_err();
        let AnnoError::Import(diagnostics) = err else {
            panic!("expected import error");
        };
        assert_eq!(diagnostics.len(), 5);
        assert!(diagnostics.iter().all(|d| d.field == "fact_inclusion"));
        assert_eq!(diagnostics[0].row, 1);
    }

    #[test]
    fn unknown_favorability_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let criminal = case("c1", Domain::Criminal);
        let summaries = summaries_for(&criminal, &["m1"]);
        let manifest =
            export_sheets(&[&criminal], &summaries, &["a1".into()], dir.path(), 7).unwrap();
        let path = manifest.files[0].path.clone();
        fill_sheet(&path, "5", "4", "maybe");
        let err = import_sheets(&[path]).unwrap_err();
        let AnnoError::Import(diagnostics) = err else {
            panic!("expected import error");
        };
        assert!(diagnostics.iter().all(|d| d.field == "favorability"));
    }

    fn record(
        annotator: &str,
        case_id: &str,
        summary: &str,
        fact: u8,
        reasoning: u8,
        favorability: FavorabilityJudgment,
    ) -> AnnotationRecord {
        AnnotationRecord {
            annotator_id: annotator.into(),
            case_id: case_id.into(),
            summary_id: summary.into(),
            role: "judge".into(),
            gen_model: "m1".into(),
            fact_inclusion: fact,
            reasoning_inclusion: reasoning,
            favorability,
            comments: None,
        }
    }

    #[test]
    fn identical_annotators_reach_full_agreement() {
        let mut records = Vec::new();
        for annotator in ["a1", "a2", "a3"] {
            for (i, summary) in ["s1", "s2", "s3", "s4"].iter().enumerate() {
                let favorability = if i % 2 == 0 {
                    FavorabilityJudgment::Yes
                } else {
                    FavorabilityJudgment::No
                };
                records.push(record(annotator, "c1", summary, (i + 1) as u8, (i + 2) as u8, favorability));
            }
        }
        let domains = BTreeMap::from([("c1".to_string(), Domain::Criminal)]);
        let report = agreement_report(&records, &domains, 0.05).unwrap();
        assert_eq!(report.overall.n_subjects, 4);
        assert_eq!(report.overall.fact_icc.as_ref().unwrap().icc, 1.0);
        assert!((report.overall.favorability_kappa_3cat.as_ref().unwrap().kappa - 1.0).abs() < 1e-12);
        assert!(report.by_domain.contains_key("criminal"));
    }

    #[test]
    fn single_annotator_is_insufficient() {
        let records = vec![record("a1", "c1", "s1", 4, 4, FavorabilityJudgment::Yes)];
        assert!(matches!(
            agreement_report(&records, &BTreeMap::new(), 0.05).unwrap_err(),
            AnnoError::InsufficientRaters
        ));
    }

    #[test]
    fn agreement_is_invariant_under_relabeling_and_reordering() {
        let mut records = Vec::new();
        for (r, annotator) in ["a1", "a2", "a3"].iter().enumerate() {
            for (i, summary) in ["s1", "s2", "s3", "s4", "s5"].iter().enumerate() {
                let favorability = match (i + r) % 3 {
                    0 => FavorabilityJudgment::Yes,
                    1 => FavorabilityJudgment::No,
                    _ => FavorabilityJudgment::Unsure,
                };
                records.push(record(
                    annotator,
                    "c1",
                    summary,
                    ((i + r) % 7 + 1) as u8,
                    ((i * 2 + r) % 7 + 1) as u8,
                    favorability,
                ));
            }
        }
        let domains = BTreeMap::from([("c1".to_string(), Domain::Private)]);
        let baseline = agreement_report(&records, &domains, 0.05).unwrap();

        let mut renamed: Vec<AnnotationRecord> = records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.annotator_id = match r.annotator_id.as_str() {
                    "a1" => "zz-third".into(),
                    "a2" => "mm-second".into(),
                    _ => "aa-first".into(),
                };
                r
            })
            .collect();
        renamed.reverse();
        let relabeled = agreement_report(&renamed, &domains, 0.05).unwrap();

        let icc = |s: &AgreementStats| s.fact_icc.as_ref().unwrap().icc;
        let kappa = |s: &AgreementStats| s.favorability_kappa_3cat.as_ref().unwrap().kappa;
        assert!((icc(&baseline.overall) - icc(&relabeled.overall)).abs() < 1e-12);
        assert!((kappa(&baseline.overall) - kappa(&relabeled.overall)).abs() < 1e-12);
    }

    #[test]
    fn incomplete_subjects_are_dropped_and_counted() {
        let mut records = Vec::new();
        for annotator in ["a1", "a2"] {
            for summary in ["s1", "s2", "s3"] {
                records.push(record(annotator, "c1", summary, 3, 4, FavorabilityJudgment::Yes));
            }
        }
        // s4 rated by a single annotator only; unsure ratings on s2 drop it
        // from the 2-category kappa.
        records.push(record("a1", "c1", "s4", 2, 2, FavorabilityJudgment::No));
        records.iter_mut().for_each(|r| {
            if r.summary_id == "s2" && r.annotator_id == "a1" {
                r.favorability = FavorabilityJudgment::Unsure;
            }
        });
        let domains = BTreeMap::from([("c1".to_string(), Domain::Criminal)]);
        let report = agreement_report(&records, &domains, 0.05).unwrap();
        assert_eq!(report.dropped_incomplete, 1);
        assert_eq!(report.overall.n_subjects, 3);
        assert_eq!(report.overall.kappa_2cat_items_dropped, 1);
    }
}
