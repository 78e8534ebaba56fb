//! Prompt templates for summary generation, the three judge steps
//! (extraction, favorability classification, inclusion matching), and the
//! preliminary bias rating.
//!
//! The bundled bodies are the German originals (the bias prompt is
//! English); callers may override any of them from a directory of
//! `<template_id>.txt` files to run translated or modified variants.
//! Placeholders use `{name}` syntax and substitution is a single pass over
//! pre-parsed segments, so values containing braces are inserted verbatim.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Domain, Role, StakeholderAnchor};

/// The judge-pipeline step a prompt belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalStep {
    Extract,
    Classify,
    Include,
}

/// Whether an element is a verifiable fact or a piece of legal reasoning.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Fact,
    Reasoning,
}

impl ElementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementKind::Fact => "fact",
            ElementKind::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("role {role} is not valid in domain {domain}")]
    InvalidRoleForDomain { role: Role, domain: Domain },
    #[error("missing placeholder {0:?}")]
    MissingPlaceholder(String),
    #[error("unknown placeholder {0:?}")]
    UnknownPlaceholder(String),
    #[error("input {0:?} must be non-empty")]
    EmptyInput(&'static str),
    #[error("no template with id {0:?}")]
    UnknownTemplate(String),
    #[error("template file {0:?} is not valid UTF-8 or unreadable: {1}")]
    BadOverride(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A template body plus the set of `{name}` placeholders it contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub language: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(template_id: &str, language: &str, body: &str) -> Self {
        let segments = parse_segments(body);
        let required_placeholders = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(name) => Some(name.clone()),
                Segment::Literal(_) => None,
            })
            .collect();
        PromptTemplate {
            template_id: template_id.to_string(),
            language: language.to_string(),
            body: body.to_string(),
            required_placeholders,
            segments,
        }
    }

    /// Substitutes every placeholder. `substitutions` must cover exactly the
    /// required set; extra names are rejected.
    pub fn render(
        &self,
        substitutions: &BTreeMap<String, String>,
    ) -> Result<RenderedPrompt, PromptError> {
        for name in substitutions.keys() {
            if !self.required_placeholders.contains(name) {
                return Err(PromptError::UnknownPlaceholder(name.clone()));
            }
        }
        let mut text = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(s) => text.push_str(s),
                Segment::Placeholder(name) => {
                    let value = substitutions
                        .get(name)
                        .ok_or_else(|| PromptError::MissingPlaceholder(name.clone()))?;
                    text.push_str(value);
                }
            }
        }
        Ok(RenderedPrompt {
            template_id: self.template_id.clone(),
            text,
            substitutions: substitutions.clone(),
        })
    }
}

/// A placeholder is `{` followed by `[a-z_][a-z0-9_]*` followed by `}`; any
/// other brace (JSON examples in the bodies) is literal text.
fn parse_segments(body: &str) -> Vec<Segment> {
    let bytes = body.as_bytes();
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = match_placeholder(bytes, i) {
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(body[i + 1..end].to_string()));
                i = end + 1;
                continue;
            }
        }
        let ch_len = utf8_len(bytes[i]);
        literal.push_str(&body[i..i + ch_len]);
        i += ch_len;
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

fn match_placeholder(bytes: &[u8], open: usize) -> Option<usize> {
    let mut j = open + 1;
    if j >= bytes.len() || !(bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
        return None;
    }
    while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_')
    {
        j += 1;
    }
    (j < bytes.len() && bytes[j] == b'}').then_some(j)
}

fn utf8_len(first_byte: u8) -> usize {
    match first_byte {
        b if b < 0x80 => 1,
        b if b < 0xe0 => 2,
        b if b < 0xf0 => 3,
        _ => 4,
    }
}

/// A fully substituted prompt, ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub text: String,
    pub substitutions: BTreeMap<String, String>,
}

const BUNDLED: &[(&str, &str, &str)] = &[
    ("gen.no_role", "de", include_str!("promptkit/templates/gen.no_role.txt")),
    ("gen.judge", "de", include_str!("promptkit/templates/gen.judge.txt")),
    ("gen.prosecutor", "de", include_str!("promptkit/templates/gen.prosecutor.txt")),
    (
        "gen.defense_attorney",
        "de",
        include_str!("promptkit/templates/gen.defense_attorney.txt"),
    ),
    (
        "gen.plaintiff_attorney",
        "de",
        include_str!("promptkit/templates/gen.plaintiff_attorney.txt"),
    ),
    (
        "gen.respondent_attorney",
        "de",
        include_str!("promptkit/templates/gen.respondent_attorney.txt"),
    ),
    ("eval.extract.fact", "de", include_str!("promptkit/templates/eval.extract.fact.txt")),
    (
        "eval.extract.reasoning",
        "de",
        include_str!("promptkit/templates/eval.extract.reasoning.txt"),
    ),
    (
        "eval.classify.fact.criminal",
        "de",
        include_str!("promptkit/templates/eval.classify.fact.criminal.txt"),
    ),
    (
        "eval.classify.fact.private",
        "de",
        include_str!("promptkit/templates/eval.classify.fact.private.txt"),
    ),
    (
        "eval.classify.reasoning.criminal",
        "de",
        include_str!("promptkit/templates/eval.classify.reasoning.criminal.txt"),
    ),
    (
        "eval.classify.reasoning.private",
        "de",
        include_str!("promptkit/templates/eval.classify.reasoning.private.txt"),
    ),
    ("eval.include.fact", "de", include_str!("promptkit/templates/eval.include.fact.txt")),
    (
        "eval.include.reasoning",
        "de",
        include_str!("promptkit/templates/eval.include.reasoning.txt"),
    ),
    ("prelim_bias", "en", include_str!("promptkit/templates/prelim_bias.txt")),
];

/// All templates for one run, bundled defaults plus any overrides.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        let templates = BUNDLED
            .iter()
            .map(|(id, lang, body)| (id.to_string(), PromptTemplate::new(id, lang, body)))
            .collect();
        TemplateSet { templates }
    }

    /// Bundled templates with any `<template_id>.txt` files in `dir`
    /// replacing the matching defaults. Files that do not match a known
    /// template id are rejected.
    pub fn with_overrides<P: AsRef<Path>>(dir: P) -> Result<Self, PromptError> {
        let mut set = Self::bundled();
        let entries = std::fs::read_dir(dir.as_ref())
            .map_err(|e| PromptError::BadOverride(dir.as_ref().display().to_string(), e.to_string()))?;
        for entry in entries {
            let entry =
                entry.map_err(|e| PromptError::BadOverride(String::new(), e.to_string()))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if !set.templates.contains_key(stem) {
                return Err(PromptError::UnknownTemplate(stem.to_string()));
            }
            let body = std::fs::read_to_string(&path)
                .map_err(|e| PromptError::BadOverride(path.display().to_string(), e.to_string()))?;
            let language = set.templates[stem].language.clone();
            set.templates
                .insert(stem.to_string(), PromptTemplate::new(stem, &language, &body));
        }
        Ok(set)
    }

    pub fn get(&self, template_id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(template_id)
            .ok_or_else(|| PromptError::UnknownTemplate(template_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

fn generation_template_id(role: Role) -> &'static str {
    match role {
        Role::NoRole => "gen.no_role",
        Role::Judge => "gen.judge",
        Role::Prosecutor => "gen.prosecutor",
        Role::DefenseAttorney => "gen.defense_attorney",
        Role::PlaintiffAttorney => "gen.plaintiff_attorney",
        Role::RespondentAttorney => "gen.respondent_attorney",
    }
}

/// Builds a generation prompt: the role/domain instruction block, a blank
/// line, then the opinion text.
pub fn render_generation_prompt(
    templates: &TemplateSet,
    role: Role,
    domain: Domain,
    opinion_text: &str,
) -> Result<RenderedPrompt, PromptError> {
    if !role.is_valid_for(domain) {
        return Err(PromptError::InvalidRoleForDomain { role, domain });
    }
    let template = templates.get(generation_template_id(role))?;
    let text = format!("{}\n\n{}", template.body, opinion_text);
    let mut substitutions = BTreeMap::new();
    substitutions.insert("opinion_text".to_string(), opinion_text.to_string());
    Ok(RenderedPrompt {
        template_id: template.template_id.clone(),
        text,
        substitutions,
    })
}

fn eval_template_id(step: EvalStep, kind: ElementKind, domain: Domain) -> String {
    match step {
        EvalStep::Extract => format!("eval.extract.{kind}"),
        EvalStep::Include => format!("eval.include.{kind}"),
        // Classification embeds the stakeholder anchor, so the body is
        // selected by domain.
        EvalStep::Classify => {
            let anchor = StakeholderAnchor::for_domain(domain);
            format!("eval.classify.{kind}.{}", anchor.domain())
        }
    }
}

/// Renders a judge-step prompt. `inputs` must supply exactly the template's
/// placeholders: `full_text` for Extract, `facts_json`/`reasoning_json` for
/// Classify, `elements` and `summary` for Include.
pub fn render_eval_prompt(
    templates: &TemplateSet,
    step: EvalStep,
    kind: ElementKind,
    domain: Domain,
    inputs: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    templates.get(&eval_template_id(step, kind, domain))?.render(inputs)
}

/// Renders the 0-10 omission-bias prompt comparing a tailored summary
/// against a neutral one.
pub fn render_preliminary_bias_prompt(
    templates: &TemplateSet,
    neutral_summary: &str,
    tailored_summary: &str,
    stakeholder_label: &str,
) -> Result<RenderedPrompt, PromptError> {
    if neutral_summary.is_empty() {
        return Err(PromptError::EmptyInput("neutral_summary"));
    }
    if tailored_summary.is_empty() {
        return Err(PromptError::EmptyInput("tailored_summary"));
    }
    if stakeholder_label.is_empty() {
        return Err(PromptError::EmptyInput("stakeholder_label"));
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("stakeholder".to_string(), stakeholder_label.to_string());
    inputs.insert("neutral_summary".to_string(), neutral_summary.to_string());
    inputs.insert("tailored_summary".to_string(), tailored_summary.to_string());
    templates.get("prelim_bias")?.render(&inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_placeholders_match_bodies() {
        // Static self-test: the derived placeholder set must equal the
        // tokens actually present, and the known inventory must hold.
        let set = TemplateSet::bundled();
        let expect: BTreeMap<&str, Vec<&str>> = BTreeMap::from([
            ("gen.no_role", vec![]),
            ("gen.judge", vec![]),
            ("gen.prosecutor", vec![]),
            ("gen.defense_attorney", vec![]),
            ("gen.plaintiff_attorney", vec![]),
            ("gen.respondent_attorney", vec![]),
            ("eval.extract.fact", vec!["full_text"]),
            ("eval.extract.reasoning", vec!["full_text"]),
            ("eval.classify.fact.criminal", vec!["facts_json"]),
            ("eval.classify.fact.private", vec!["facts_json"]),
            ("eval.classify.reasoning.criminal", vec!["reasoning_json"]),
            ("eval.classify.reasoning.private", vec!["reasoning_json"]),
            ("eval.include.fact", vec!["elements", "summary"]),
            ("eval.include.reasoning", vec!["elements", "summary"]),
            ("prelim_bias", vec!["neutral_summary", "stakeholder", "tailored_summary"]),
        ]);
        assert_eq!(set.ids().count(), expect.len());
        for (id, names) in expect {
            let template = set.get(id).unwrap();
            let got: Vec<&str> =
                template.required_placeholders.iter().map(String::as_str).collect();
            assert_eq!(got, names, "placeholders of {id}");
        }
    }

    #[test]
    fn generation_prompt_appends_opinion() {
        let set = TemplateSet::bundled();
        let prompt =
            render_generation_prompt(&set, Role::NoRole, Domain::Criminal, "TEXT").unwrap();
        assert!(prompt
            .text
            .starts_with("Bitte fassen Sie das folgende Urteil zusammen."));
        assert!(prompt.text.ends_with("TEXT"));
        assert!(prompt.text.contains("zusammen.\n\nTEXT"));
    }

    #[test]
    fn generation_prompt_is_deterministic() {
        let set = TemplateSet::bundled();
        let a = render_generation_prompt(&set, Role::Judge, Domain::Private, "X").unwrap();
        let b = render_generation_prompt(&set, Role::Judge, Domain::Private, "X").unwrap();
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn invalid_role_domain_pair_is_rejected() {
        let set = TemplateSet::bundled();
        let err =
            render_generation_prompt(&set, Role::Prosecutor, Domain::Private, "X").unwrap_err();
        assert_eq!(
            err,
            PromptError::InvalidRoleForDomain {
                role: Role::Prosecutor,
                domain: Domain::Private
            }
        );
    }

    #[test]
    fn attorney_variants_differ_by_party_noun() {
        let set = TemplateSet::bundled();
        let plaintiff =
            render_generation_prompt(&set, Role::PlaintiffAttorney, Domain::Private, "X").unwrap();
        let respondent =
            render_generation_prompt(&set, Role::RespondentAttorney, Domain::Private, "X")
                .unwrap();
        assert!(plaintiff.text.contains("Beschwerdeführer"));
        assert!(respondent.text.contains("Beschwerdegegner"));
        assert!(!plaintiff.text.contains("Beschwerdegegner"));
    }

    #[test]
    fn extract_prompt_substitutes_full_text() {
        let set = TemplateSet::bundled();
        let inputs = BTreeMap::from([("full_text".to_string(), "X".to_string())]);
        let prompt =
            render_eval_prompt(&set, EvalStep::Extract, ElementKind::Fact, Domain::Criminal, &inputs)
                .unwrap();
        assert!(prompt.text.contains("GERICHTSENTSCHEIDUNG:\nX"));
        assert!(prompt.text.starts_with("AUFGABE: Extrahieren Sie alle rechtlich relevanten"));
    }

    #[test]
    fn classify_prompt_requires_inputs() {
        let set = TemplateSet::bundled();
        let err = render_eval_prompt(
            &set,
            EvalStep::Classify,
            ElementKind::Fact,
            Domain::Criminal,
            &BTreeMap::new(),
        )
        .unwrap_err();
        assert_eq!(err, PromptError::MissingPlaceholder("facts_json".to_string()));
    }

    #[test]
    fn classify_prompt_carries_exactly_one_anchor() {
        let set = TemplateSet::bundled();
        for (domain, anchor, other) in [
            (Domain::Criminal, "Verteidiger, dessen Mandant sich", "Rechtsanwalt, dessen Mandant sich"),
            (Domain::Private, "Rechtsanwalt, dessen Mandant sich", "Verteidiger, dessen Mandant sich"),
        ] {
            for kind in [ElementKind::Fact, ElementKind::Reasoning] {
                let key = match kind {
                    ElementKind::Fact => "facts_json",
                    ElementKind::Reasoning => "reasoning_json",
                };
                let inputs = BTreeMap::from([(key.to_string(), "[]".to_string())]);
                let prompt =
                    render_eval_prompt(&set, EvalStep::Classify, kind, domain, &inputs).unwrap();
                assert_eq!(prompt.text.matches(anchor).count(), 1);
                assert_eq!(prompt.text.matches(other).count(), 0);
            }
        }
    }

    #[test]
    fn include_prompt_places_summary_once() {
        let set = TemplateSet::bundled();
        let inputs = BTreeMap::from([
            ("elements".to_string(), "[]".to_string()),
            ("summary".to_string(), "EINMALIG".to_string()),
        ]);
        let prompt = render_eval_prompt(
            &set,
            EvalStep::Include,
            ElementKind::Reasoning,
            Domain::Private,
            &inputs,
        )
        .unwrap();
        assert_eq!(prompt.text.matches("EINMALIG").count(), 1);
        assert!(prompt.text.contains("ZUSAMMENFASSUNG:\nEINMALIG"));
    }

    #[test]
    fn unknown_input_name_is_rejected() {
        let set = TemplateSet::bundled();
        let inputs = BTreeMap::from([
            ("full_text".to_string(), "X".to_string()),
            ("bogus".to_string(), "Y".to_string()),
        ]);
        let err =
            render_eval_prompt(&set, EvalStep::Extract, ElementKind::Fact, Domain::Criminal, &inputs)
                .unwrap_err();
        assert_eq!(err, PromptError::UnknownPlaceholder("bogus".to_string()));
    }

    #[test]
    fn bias_prompt_mentions_each_input_once() {
        let set = TemplateSet::bundled();
        let prompt =
            render_preliminary_bias_prompt(&set, "NEUTRALTEXT", "TAILOREDTEXT", "defense attorney")
                .unwrap();
        assert_eq!(prompt.text.matches("NEUTRALTEXT").count(), 1);
        assert_eq!(prompt.text.matches("TAILOREDTEXT").count(), 1);
        assert_eq!(prompt.text.matches("defense attorney").count(), 1);
        assert!(prompt.text.contains("assign a bias score from 0"));

        let again =
            render_preliminary_bias_prompt(&set, "NEUTRALTEXT", "TAILOREDTEXT", "defense attorney")
                .unwrap();
        assert_eq!(prompt.text, again.text);
    }

    #[test]
    fn bias_prompt_rejects_empty_inputs() {
        let set = TemplateSet::bundled();
        let err = render_preliminary_bias_prompt(&set, "", "T", "x").unwrap_err();
        assert_eq!(err, PromptError::EmptyInput("neutral_summary"));
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let template = PromptTemplate::new("t", "en", "Value: {value}");
        let subs = BTreeMap::from([("value".to_string(), "{other}".to_string())]);
        let rendered = template.render(&subs).unwrap();
        assert_eq!(rendered.text, "Value: {other}");
    }

    #[test]
    fn overrides_replace_bundled_bodies() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("gen.no_role.txt"), "Override body.").unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.get("gen.no_role").unwrap().body, "Override body.");
        // Untouched templates keep the bundled body.
        assert!(set.get("gen.judge").unwrap().body.contains("Du bist Richter"));

        std::fs::write(dir.path().join("nonsense.txt"), "x").unwrap();
        assert!(matches!(
            TemplateSet::with_overrides(dir.path()),
            Err(PromptError::UnknownTemplate(_))
        ));
    }
}
