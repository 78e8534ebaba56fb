//! Markdown/CSV rendering of the result tables and plot-ready figure
//! series. All output is deterministic: fixed column orders, sorted rows,
//! fixed-precision number formatting.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{DocType, Domain, Role, WordStatRow};
use crate::lexical::{SimilarityGroupRow, SimilarityRow};
use crate::metrics::AggregateCell;
use crate::stats::LmmFit;

pub fn fmt3(value: f64) -> String {
    format!("{value:.3}")
}

/// p-value formatting in the usual reporting style.
pub fn fmt_p(p: f64) -> String {
    if p.is_nan() {
        "n/a".into()
    } else if p < 0.001 {
        "<0.001".into()
    } else {
        fmt3(p)
    }
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!(
        "|{}\n",
        header.iter().map(|_| " --- |").collect::<String>()
    ));
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// Canonical role presentation order for report rows.
pub const ROLE_ORDER: [Role; 6] = [
    Role::NoRole,
    Role::Judge,
    Role::Prosecutor,
    Role::DefenseAttorney,
    Role::PlaintiffAttorney,
    Role::RespondentAttorney,
];

/// Word-count table: one block for opinions and reference summaries, one
/// block per generation model split by role, with criminal and private
/// columns.
pub fn render_word_count_table(
    corpus_rows: &[WordStatRow],
    per_model: &BTreeMap<String, Vec<WordStatRow>>,
) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let cell = |rows: &[WordStatRow], doc_type: DocType, role: Option<Role>, domain: Domain| {
        rows.iter()
            .find(|r| r.doc_type == doc_type && r.role == role && r.domain == domain)
            .map(|r| r.rounded_mean().to_string())
            .unwrap_or_else(|| "--".into())
    };

    for (label, doc_type) in [
        ("Full opinion", DocType::FullOpinion),
        ("Reference summary", DocType::ReferenceSummary),
    ] {
        rows.push(vec![
            label.to_string(),
            "N/A".to_string(),
            cell(corpus_rows, doc_type, None, Domain::Criminal),
            cell(corpus_rows, doc_type, None, Domain::Private),
        ]);
    }
    for (model, model_rows) in per_model {
        for role in ROLE_ORDER {
            let criminal = cell(model_rows, DocType::GeneratedSummary, Some(role), Domain::Criminal);
            let private = cell(model_rows, DocType::GeneratedSummary, Some(role), Domain::Private);
            if criminal == "--" && private == "--" {
                continue;
            }
            rows.push(vec![
                format!("{model} summary"),
                role.to_string(),
                criminal,
                private,
            ]);
        }
    }
    markdown_table(
        &["Type".into(), "Stakeholder".into(), "Criminal".into(), "Private".into()],
        &rows,
    )
}

/// Mixed-model table: intercept, one row per non-reference stakeholder,
/// then the two variance components.
pub fn render_lmm_table(fit: &LmmFit) -> String {
    let mut rows = vec![vec![
        format!("Intercept ({})", fit.reference_level),
        fmt3(fit.intercept.estimate),
        fmt3(fit.intercept.std_error),
        fmt_p(fit.intercept.p_value),
    ]];
    for (level, coefficient) in &fit.coefficients {
        rows.push(vec![
            level.clone(),
            fmt3(coefficient.estimate),
            fmt3(coefficient.std_error),
            fmt_p(coefficient.p_value),
        ]);
    }
    rows.push(vec!["Case variance".into(), fmt3(fit.var_group), String::new(), String::new()]);
    rows.push(vec![
        "Residual variance".into(),
        fmt3(fit.var_resid),
        String::new(),
        String::new(),
    ]);
    markdown_table(
        &["Stakeholder".into(), "Coefficient".into(), "Std. Error".into(), "p-value".into()],
        &rows,
    )
}

/// Favorability-bias table: rows are (domain, stakeholder), columns one
/// `classifier (kind)` pair each, cells mean ± std.
///
/// Cells must carry the labels `domain`, `stakeholder_role`, `classifier`,
/// and `kind`.
pub fn render_bias_table(cells: &[AggregateCell]) -> String {
    let label = |cell: &AggregateCell, name: &str| {
        cell.labels.get(name).cloned().unwrap_or_default()
    };
    type Pair = (String, String);
    let mut columns: BTreeSet<Pair> = BTreeSet::new();
    let mut row_keys: BTreeSet<Pair> = BTreeSet::new();
    let mut values: BTreeMap<(Pair, Pair), String> = BTreeMap::new();
    for cell in cells {
        let column = (label(cell, "classifier"), label(cell, "kind"));
        let row = (label(cell, "domain"), label(cell, "stakeholder_role"));
        columns.insert(column.clone());
        row_keys.insert(row.clone());
        values.insert(
            (row, column),
            format!("{} ± {}", fmt3(cell.mean), fmt3(cell.std)),
        );
    }

    let role_rank = |role: &str| {
        ROLE_ORDER
            .iter()
            .position(|r| r.as_str() == role)
            .unwrap_or(ROLE_ORDER.len())
    };
    let mut ordered_rows: Vec<(String, String)> = row_keys.into_iter().collect();
    ordered_rows.sort_by_key(|(domain, role)| (domain.clone(), role_rank(role), role.clone()));

    let mut header = vec!["Domain".to_string(), "Stakeholder".to_string()];
    for (classifier, kind) in &columns {
        header.push(format!("{classifier} ({kind})"));
    }
    let rows: Vec<Vec<String>> = ordered_rows
        .into_iter()
        .map(|row_key| {
            let mut row = vec![row_key.0.clone(), row_key.1.clone()];
            for column in &columns {
                row.push(
                    values
                        .get(&(row_key.clone(), column.clone()))
                        .cloned()
                        .unwrap_or_else(|| "--".into()),
                );
            }
            row
        })
        .collect();
    markdown_table(&header, &rows)
}

/// Grouped similarity means by model and role (condensed table).
pub fn render_similarity_by_role(groups: &[SimilarityGroupRow]) -> String {
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            vec![
                g.model_label.clone(),
                g.role_label.clone(),
                fmt3(g.rouge1_f1),
                fmt3(g.rouge2_f1),
                fmt3(g.embed_cos),
            ]
        })
        .collect();
    markdown_table(
        &["Model".into(), "Role".into(), "ROUGE-1".into(), "ROUGE-2".into(), "embed_cos".into()],
        &rows,
    )
}

pub const SIMILARITY_CSV_HEADER: &str =
    "summary,stakeholder,precision,recall,rouge1,rouge2,rougeL,tfidf,embed_cos";

/// Full similarity table as CSV: group means per (model, role).
pub fn render_similarity_csv(groups: &[SimilarityGroupRow]) -> String {
    let mut out = String::from(SIMILARITY_CSV_HEADER);
    out.push('\n');
    for g in groups {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            g.model_label,
            g.role_label,
            fmt3(g.fact_precision),
            fmt3(g.fact_recall),
            fmt3(g.rouge1_f1),
            fmt3(g.rouge2_f1),
            fmt3(g.rouge_l_f1),
            fmt3(g.tfidf_cos),
            fmt3(g.embed_cos),
        ));
    }
    out
}

/// Per-summary similarity rows with the same column set.
pub fn render_similarity_rows_csv(rows: &[SimilarityRow]) -> String {
    let mut out = String::from(SIMILARITY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.summary_id,
            r.role_label,
            fmt3(r.fact_precision),
            fmt3(r.fact_recall),
            fmt3(r.rouge1.f1),
            fmt3(r.rouge2.f1),
            fmt3(r.rouge_l.f1),
            fmt3(r.tfidf_cos),
            fmt3(r.embed_cos),
        ));
    }
    out
}

/// Plot series: mean inclusion rate per (combo, kind, domain, role).
pub fn render_inclusion_figure_csv(cells: &[AggregateCell]) -> String {
    let mut out = String::from("combo_id,kind,domain,role,mean_rate,n\n");
    for cell in cells {
        let get = |name: &str| cell.labels.get(name).cloned().unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            get("combo_id"),
            get("kind"),
            get("domain"),
            get("stakeholder_role"),
            fmt3(cell.mean),
            cell.n
        ));
    }
    out
}

/// Plot series: mean human Likert ratings per (model, role, dimension).
pub fn render_human_inclusion_figure_csv(cells: &[AggregateCell]) -> String {
    let mut out = String::from("gen_model,role,dimension,mean_rating,n\n");
    for cell in cells {
        let get = |name: &str| cell.labels.get(name).cloned().unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            get("gen_model"),
            get("role"),
            get("dimension"),
            fmt3(cell.mean),
            cell.n
        ));
    }
    out
}

/// Plot series: favorability judgment shares per (model, role).
#[derive(Debug, Clone)]
pub struct FavorabilityShareRow {
    pub gen_model: String,
    pub role: String,
    pub n: usize,
    pub share_yes: f64,
    pub share_no: f64,
    pub share_unsure: f64,
}

pub fn render_human_favorability_figure_csv(rows: &[FavorabilityShareRow]) -> String {
    let mut out = String::from("gen_model,role,n,share_yes,share_no,share_unsure\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.gen_model,
            row.role,
            row.n,
            fmt3(row.share_yes),
            fmt3(row.share_no),
            fmt3(row.share_unsure),
        ));
    }
    out
}
