//! Reference-free lexical and semantic baselines between summaries and
//! source opinions: ROUGE-1/2/L, smoothed tf-idf cosine, embedding cosine
//! via a pluggable provider, and string-level fact-overlap precision and
//! recall.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum LexicalError {
    #[error("fact list for the {0} side is empty")]
    EmptyFactList(&'static str),
    #[error("embedding provider error: {0}")]
    ProviderError(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// How raw text is turned into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

/// Tokens plus the normalization that produced them; never contains empty
/// strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub normalization: Normalization,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Unicode-whitespace split with optional lowercasing and per-token
/// stripping of leading/trailing non-alphanumeric characters.
pub fn tokenize(text: &str, normalization: Normalization) -> TokenSequence {
    let tokens = text
        .split_whitespace()
        .filter_map(|raw| {
            let token = if normalization.strip_punctuation {
                raw.trim_matches(|c: char| !c.is_alphanumeric())
            } else {
                raw
            };
            if token.is_empty() {
                return None;
            }
            Some(if normalization.lowercase {
                token.to_lowercase()
            } else {
                token.to_string()
            })
        })
        .collect();
    TokenSequence {
        tokens,
        normalization,
    }
}

/// Precision, recall, and balanced F1 (0 when P+R is 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap: P = overlap/|candidate n-grams|,
/// R = overlap/|reference n-grams|.
pub fn rouge_n(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> Prf {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let cand = ngram_counts(&candidate.tokens, n);
    let reference_counts = ngram_counts(&reference.tokens, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = reference_counts.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return Prf::ZERO;
    }
    let overlap: usize = cand
        .iter()
        .map(|(gram, count)| count.min(reference_counts.get(gram).unwrap_or(&0)))
        .sum();
    Prf::new(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            current[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(current[j])
            };
        }
        std::mem::swap(&mut prev, &mut current);
    }
    let length = prev[b.len()];
    debug_assert!(length <= a.len().min(b.len()));
    length
}

/// Longest-common-subsequence variant: P = L/|candidate|, R = L/|reference|.
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::ZERO;
    }
    let length = lcs_length(&candidate.tokens, &reference.tokens) as f64;
    Prf::new(
        length / candidate.len() as f64,
        length / reference.len() as f64,
    )
}

/// Document frequencies from a background corpus (one document per case
/// opinion), fitted once and reused for every pair.
#[derive(Debug, Clone)]
pub struct TfidfBackground {
    doc_count: usize,
    doc_frequency: HashMap<String, usize>,
}

impl TfidfBackground {
    pub fn from_corpus(corpus: &Corpus, normalization: Normalization) -> Self {
        let mut doc_frequency: HashMap<String, usize> = HashMap::new();
        for case in corpus.iter() {
            let unique: HashSet<String> =
                tokenize(&case.opinion_text, normalization).tokens.into_iter().collect();
            for token in unique {
                *doc_frequency.entry(token).or_insert(0) += 1;
            }
        }
        TfidfBackground {
            doc_count: corpus.len(),
            doc_frequency,
        }
    }

    pub fn from_token_docs(docs: &[Vec<String>]) -> Self {
        let mut doc_frequency: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let unique: HashSet<&String> = doc.iter().collect();
            for token in unique {
                *doc_frequency.entry(token.clone()).or_insert(0) += 1;
            }
        }
        TfidfBackground {
            doc_count: docs.len(),
            doc_frequency,
        }
    }

    /// Smoothed idf: ln((1+N)/(1+df)) + 1.
    fn idf(&self, token: &str) -> f64 {
        let df = self.doc_frequency.get(token).copied().unwrap_or(0);
        ((1.0 + self.doc_count as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    // BTreeMap keeps the summation order fixed, so repeated runs produce
    // bit-identical cosines.
    fn vector<'a>(&self, tokens: &'a [String]) -> BTreeMap<&'a str, f64> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for token in tokens {
            *counts.entry(token.as_str()).or_insert(0) += 1;
        }
        let mut vector: BTreeMap<&str, f64> = counts
            .into_iter()
            .map(|(token, count)| (token, count as f64 * self.idf(token)))
            .collect();
        let norm = vector.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for weight in vector.values_mut() {
                *weight /= norm;
            }
        }
        vector
    }
}

/// Cosine of smoothed, L2-normalized tf-idf vectors in [0, 1].
pub fn tfidf_cosine(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    background: &TfidfBackground,
) -> f64 {
    let a = background.vector(&candidate.tokens);
    let b = background.vector(&reference.tokens);
    a.iter()
        .map(|(token, weight)| weight * b.get(token).copied().unwrap_or(0.0))
        .sum()
}

/// Maps text to a fixed-dimension real vector. Instances must be
/// deterministic: the same text always embeds to the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, LexicalError>;
}

/// Deterministic token-hashing embedder for tests and offline demo runs:
/// tokens are hashed into `dimension` buckets and the count vector is
/// L2-normalized. Shared vocabulary yields high cosine, disjoint text low.
pub struct HashEmbeddingProvider {
    dimension: usize,
    normalization: Normalization,
}

impl HashEmbeddingProvider {
    pub fn new(dimension: usize) -> Self {
        HashEmbeddingProvider {
            dimension: dimension.max(1),
            normalization: Normalization::default(),
        }
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LexicalError> {
        let mut vector = vec![0.0f64; self.dimension];
        for token in tokenize(text, self.normalization).tokens {
            let bucket = (crate::seeded::fnv1a64(token.as_bytes()) % self.dimension as u64) as usize;
            vector[bucket] += 1.0;
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut vector {
                *v /= norm;
            }
        }
        Ok(vector)
    }
}

/// Remote embedding endpoint speaking `{"model", "input"}` →
/// `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbeddingProvider {
    pub base_url: String,
    pub model_id: String,
    pub dimension: usize,
    pub api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: &str, model_id: &str, dimension: usize, api_key: Option<String>) -> Self {
        HttpEmbeddingProvider {
            base_url: base_url.to_string(),
            model_id: model_id.to_string(),
            dimension,
            api_key,
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(std::time::Duration::from_secs(60)))
                .build()
                .into(),
        }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LexicalError> {
        let body = serde_json::json!({"model": self.model_id, "input": text});
        let mut builder = self.agent.post(&self.base_url);
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = builder
            .send_json(&body)
            .map_err(|e| LexicalError::ProviderError(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| LexicalError::ProviderError(e.to_string()))?;
        let vector: Vec<f64> = value
            .pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .map(|arr| arr.iter().filter_map(|x| x.as_f64()).collect())
            .ok_or_else(|| LexicalError::ProviderError("no embedding in response".into()))?;
        if vector.len() != self.dimension {
            return Err(LexicalError::DimensionMismatch(vector.len(), self.dimension));
        }
        Ok(vector)
    }
}

/// Mean-pools per-token vectors into one embedding; providers that return
/// token-level vectors apply this before handing the result to
/// [`embedding_cosine`].
pub fn mean_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>, LexicalError> {
    let Some(first) = vectors.first() else {
        return Err(LexicalError::ProviderError("no token vectors to pool".into()));
    };
    let mut pooled = vec![0.0; first.len()];
    for vector in vectors {
        if vector.len() != first.len() {
            return Err(LexicalError::DimensionMismatch(vector.len(), first.len()));
        }
        for (accumulator, value) in pooled.iter_mut().zip(vector) {
            *accumulator += value;
        }
    }
    let n = vectors.len() as f64;
    for value in &mut pooled {
        *value /= n;
    }
    Ok(pooled)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, LexicalError> {
    if a.len() != b.len() {
        return Err(LexicalError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (norm_a * norm_b))
}

/// Cosine of provider embeddings, in [-1, 1].
pub fn embedding_cosine(
    a: &str,
    b: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, LexicalError> {
    cosine(&provider.embed(a)?, &provider.embed(b)?)
}

fn token_set(text: &str) -> HashSet<String> {
    tokenize(text, Normalization::default()).tokens.into_iter().collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

/// String-level fact overlap: a summary fact and an opinion fact match
/// when their normalized token Jaccard reaches `match_threshold`; matching
/// is greedy one-to-one in descending Jaccard order. Precision is over
/// summary facts, recall over opinion facts.
pub fn fact_overlap_pr(
    summary_facts: &[String],
    opinion_facts: &[String],
    match_threshold: f64,
) -> Result<(f64, f64), LexicalError> {
    if summary_facts.is_empty() {
        return Err(LexicalError::EmptyFactList("summary"));
    }
    if opinion_facts.is_empty() {
        return Err(LexicalError::EmptyFactList("opinion"));
    }
    let summary_sets: Vec<HashSet<String>> = summary_facts.iter().map(|f| token_set(f)).collect();
    let opinion_sets: Vec<HashSet<String>> = opinion_facts.iter().map(|f| token_set(f)).collect();

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, s) in summary_sets.iter().enumerate() {
        for (j, o) in opinion_sets.iter().enumerate() {
            let score = jaccard(s, o);
            if score >= match_threshold {
                candidates.push((score, i, j));
            }
        }
    }
    // Descending score; (i, j) ascending as the deterministic tie-break.
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut summary_matched = vec![false; summary_sets.len()];
    let mut opinion_matched = vec![false; opinion_sets.len()];
    let mut matches = 0usize;
    for (_, i, j) in candidates {
        if !summary_matched[i] && !opinion_matched[j] {
            summary_matched[i] = true;
            opinion_matched[j] = true;
            matches += 1;
        }
    }
    Ok((
        matches as f64 / summary_facts.len() as f64,
        matches as f64 / opinion_facts.len() as f64,
    ))
}

/// One summary to score against its source opinion.
#[derive(Debug, Clone)]
pub struct SimilarityInput {
    pub summary_id: String,
    pub case_id: String,
    /// Generation model id, or "reference" for expert-written summaries.
    pub model_label: String,
    pub role_label: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub summary_id: String,
    pub case_id: String,
    pub model_label: String,
    pub role_label: String,
    pub fact_precision: f64,
    pub fact_recall: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub tfidf_cos: f64,
    pub embed_cos: f64,
}

/// Mean metrics per (model, role) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityGroupRow {
    pub model_label: String,
    pub role_label: String,
    pub n: usize,
    pub fact_precision: f64,
    pub fact_recall: f64,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_f1: f64,
    pub tfidf_cos: f64,
    pub embed_cos: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityTable {
    pub rows: Vec<SimilarityRow>,
    pub groups: Vec<SimilarityGroupRow>,
    /// Per-row problems (missing fact lists, provider failures); the row
    /// is still emitted with zeroed affected fields.
    pub errors: Vec<String>,
}

pub struct SimilarityConfig {
    pub normalization: Normalization,
    pub match_threshold: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            normalization: Normalization::default(),
            match_threshold: 0.5,
        }
    }
}

/// Scores every summary against its case opinion and aggregates per
/// (model, role). `summary_facts`/`opinion_facts` hold extracted fact
/// texts keyed by summary id and case id respectively.
pub fn similarity_table(
    inputs: &[SimilarityInput],
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    summary_facts: &BTreeMap<String, Vec<String>>,
    opinion_facts: &BTreeMap<String, Vec<String>>,
    config: &SimilarityConfig,
) -> SimilarityTable {
    let background = TfidfBackground::from_corpus(corpus, config.normalization);
    let mut rows = Vec::new();
    let mut errors = Vec::new();

    for input in inputs {
        let Some(case) = corpus.get(&input.case_id) else {
            errors.push(format!("{}: case {} not in corpus", input.summary_id, input.case_id));
            continue;
        };
        let candidate = tokenize(&input.text, config.normalization);
        let reference = tokenize(&case.opinion_text, config.normalization);

        let (fact_precision, fact_recall) = match (
            summary_facts.get(&input.summary_id),
            opinion_facts.get(&input.case_id),
        ) {
            (Some(sf), Some(of)) => match fact_overlap_pr(sf, of, config.match_threshold) {
                Ok(pr) => pr,
                Err(e) => {
                    errors.push(format!("{}: {e}", input.summary_id));
                    (0.0, 0.0)
                }
            },
            _ => {
                errors.push(format!("{}: missing extracted fact lists", input.summary_id));
                (0.0, 0.0)
            }
        };

        let embed_cos = match embedding_cosine(&input.text, &case.opinion_text, provider) {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("{}: {e}", input.summary_id));
                0.0
            }
        };

        rows.push(SimilarityRow {
            summary_id: input.summary_id.clone(),
            case_id: input.case_id.clone(),
            model_label: input.model_label.clone(),
            role_label: input.role_label.clone(),
            fact_precision,
            fact_recall,
            rouge1: rouge_n(&candidate, &reference, 1),
            rouge2: rouge_n(&candidate, &reference, 2),
            rouge_l: rouge_l(&candidate, &reference),
            tfidf_cos: tfidf_cosine(&candidate, &reference, &background),
            embed_cos,
        });
    }

    rows.sort_by(|a, b| {
        (&a.model_label, &a.role_label, &a.case_id, &a.summary_id).cmp(&(
            &b.model_label,
            &b.role_label,
            &b.case_id,
            &b.summary_id,
        ))
    });

    let mut grouped: BTreeMap<(String, String), Vec<&SimilarityRow>> = BTreeMap::new();
    for row in &rows {
        grouped
            .entry((row.model_label.clone(), row.role_label.clone()))
            .or_default()
            .push(row);
    }
    let groups = grouped
        .into_iter()
        .map(|((model_label, role_label), members)| {
            let n = members.len() as f64;
            let mean = |f: &dyn Fn(&SimilarityRow) -> f64| {
                members.iter().map(|r| f(r)).sum::<f64>() / n
            };
            SimilarityGroupRow {
                model_label,
                role_label,
                n: members.len(),
                fact_precision: mean(&|r| r.fact_precision),
                fact_recall: mean(&|r| r.fact_recall),
                rouge1_f1: mean(&|r| r.rouge1.f1),
                rouge2_f1: mean(&|r| r.rouge2.f1),
                rouge_l_f1: mean(&|r| r.rouge_l.f1),
                tfidf_cos: mean(&|r| r.tfidf_cos),
                embed_cos: mean(&|r| r.embed_cos),
            }
        })
        .collect();

    SimilarityTable {
        rows,
        groups,
        errors,
    }
}
