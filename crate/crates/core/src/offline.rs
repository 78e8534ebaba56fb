//! Offline chat backend with deterministic, content-derived replies.
//!
//! Useful for tests, recorded fixture generation, and network-free demo
//! runs: it recognizes each prompt family the pipeline emits (generation,
//! extraction, classification, inclusion, bias rating) and synthesizes a
//! plausible reply purely from the prompt text and request tag. The same
//! request always produces the same bytes. Extraction replies rotate
//! through plain/fenced/prose-wrapped JSON so the robust parser is
//! exercised in realistic flows.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::gateway::{BackendConfig, CompletionRequest, Transport, TransportError, TransportReply};
use crate::seeded::fnv1a64;

#[derive(Default)]
pub struct OfflineBackend {
    calls: AtomicUsize,
}

impl OfflineBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of chat calls served; lets tests assert deduplication.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for OfflineBackend {
    fn send_chat(
        &self,
        _backend: &BackendConfig,
        _api_key: Option<&str>,
        request: &CompletionRequest,
    ) -> Result<TransportReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let text = respond(prompt, &request.request_tag);
        let body = serde_json::json!({
            "choices": [{"message": {"content": text}, "finish_reason": "stop"}]
        });
        Ok(TransportReply {
            status: 200,
            body: body.to_string(),
            retry_after: None,
        })
    }
}

fn respond(prompt: &str, tag: &str) -> String {
    let h = fnv1a64(prompt.as_bytes()) ^ fnv1a64(tag.as_bytes());
    if prompt.contains("Extrahieren Sie alle rechtlich relevanten Tatsachenbehauptungen") {
        extract_facts(prompt, h)
    } else if prompt.contains("Extrahieren Sie die gesamte rechtliche Begründung") {
        extract_reasoning(prompt, h)
    } else if prompt.contains("Klassifizieren Sie die folgenden") {
        classify(prompt, h)
    } else if prompt.contains("Prüfen Sie, ob die folgenden") {
        include(prompt)
    } else if prompt.starts_with("Below are two summaries") {
        prelim_bias(h)
    } else {
        generate_summary(prompt, h)
    }
}

fn sentences(text: &str) -> Vec<String> {
    text.split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn section_after<'a>(prompt: &'a str, marker: &str) -> &'a str {
    prompt
        .rfind(marker)
        .map(|at| &prompt[at + marker.len()..])
        .unwrap_or(prompt)
}

/// The generation prompt is instruction block + blank line + opinion; the
/// block always ends in one of these markers.
fn opinion_of(prompt: &str) -> &str {
    ["enthält.\n\n", "Gesetz.\n\n", "zusammen.\n\n"]
        .iter()
        .filter_map(|marker| prompt.rfind(marker).map(|at| at + marker.len()))
        .max()
        .map(|start| &prompt[start..])
        .unwrap_or(prompt)
}

fn perspective(prompt: &str) -> &'static str {
    if prompt.contains("Du bist Richter") {
        "des Richters"
    } else if prompt.contains("Du bist Staatsanwalt") {
        "des Staatsanwalts"
    } else if prompt.contains("Du bist Strafverteidiger") {
        "des Strafverteidigers"
    } else if prompt.contains("wie der Beschwerdeführer in diesem Urteil") {
        "des Anwalts des Beschwerdeführers"
    } else if prompt.contains("wie der Beschwerdegegner in diesem Urteil") {
        "des Anwalts des Beschwerdegegners"
    } else {
        "ohne Rollenvorgabe"
    }
}

fn generate_summary(prompt: &str, h: u64) -> String {
    let opinion = opinion_of(prompt);
    let all = sentences(opinion);
    let mut kept: Vec<String> = all
        .iter()
        .enumerate()
        .filter(|(i, _)| !(h.wrapping_add(*i as u64)).is_multiple_of(4))
        .map(|(_, s)| s.clone())
        .collect();
    if kept.is_empty() && !all.is_empty() {
        kept.push(all[0].clone());
    }
    format!(
        "Zusammenfassung aus Sicht {}: {}.",
        perspective(prompt),
        kept.join(". ")
    )
}

fn wrap_array(json: String, h: u64) -> String {
    match h % 3 {
        0 => json,
        1 => format!("```json\n{json}\n```"),
        _ => format!("Hier ist das angeforderte JSON-Array:\n{json}\nEnde der Ausgabe."),
    }
}

fn extract_facts(prompt: &str, h: u64) -> String {
    let text = section_after(prompt, "GERICHTSENTSCHEIDUNG:\n");
    let facts: Vec<serde_json::Value> = sentences(text)
        .into_iter()
        .take(5)
        .enumerate()
        .map(|(i, s)| serde_json::json!({"id": i + 1, "fact": s}))
        .collect();
    wrap_array(serde_json::to_string_pretty(&facts).unwrap(), h)
}

fn extract_reasoning(prompt: &str, h: u64) -> String {
    let text = section_after(prompt, "GERICHTSENTSCHEIDUNG:\n");
    let all = sentences(text);
    let parties = ["Richter", "Beschwerdeführer", "Beschwerdegegner"];
    // Reasoning lives toward the end of an opinion; take the tail half.
    let tail: Vec<String> = all.iter().skip(all.len() / 2).cloned().collect();
    let items: Vec<serde_json::Value> = tail
        .into_iter()
        .take(3)
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({
                "id": i + 1,
                "party": parties[i % parties.len()],
                "reasoning": s,
                "legal issue": format!("Rechtsfrage {}", i + 1),
                "cited law": [format!("Art. {} OR", 10 + i)],
            })
        })
        .collect();
    wrap_array(serde_json::to_string_pretty(&items).unwrap(), h)
}

fn classify(prompt: &str, h: u64) -> String {
    let marker = if prompt.contains("TATSÄCHLICHE AUSSAGEN:") {
        "TATSÄCHLICHE AUSSAGEN:"
    } else {
        "RECHTSARGUMENTE:"
    };
    let items = crate::pipeline::first_array_in(section_after(prompt, marker)).unwrap_or_default();
    let labels = ["GÜNSTIG", "UNGÜNSTIG", "NEUTRAL/PROZEDURAL"];
    let out: Vec<serde_json::Value> = items
        .iter()
        .filter_map(|item| {
            let id = item.get("id")?.as_i64()?;
            // Consecutive ids spread over all three labels, offset by the
            // request hash so different classifier models disagree.
            let pick = (id as u64).wrapping_add(h) % 3;
            Some(serde_json::json!({"id": id, "classification": labels[pick as usize]}))
        })
        .collect();
    serde_json::to_string_pretty(&out).unwrap()
}

fn include(prompt: &str) -> String {
    let marker = if prompt.contains("TATSÄCHLICHE BEHAUPTUNGEN:") {
        "TATSÄCHLICHE BEHAUPTUNGEN:"
    } else {
        "RECHTLICHE BEGRÜNDUNGEN:"
    };
    let body = section_after(prompt, marker);
    let summary = normalize_ws(section_after(body, "ZUSAMMENFASSUNG:"));
    let items = crate::pipeline::first_array_in(body).unwrap_or_default();
    let out: Vec<serde_json::Value> = items
        .iter()
        .filter_map(|item| {
            let id = item.get("id")?.as_i64()?;
            let statement = item.get("statement").and_then(|v| v.as_str())?;
            let included = summary.contains(&normalize_ws(statement));
            Some(serde_json::json!({"id": id, "statement": statement, "included": included}))
        })
        .collect();
    serde_json::to_string_pretty(&out).unwrap()
}

fn prelim_bias(h: u64) -> String {
    let score = h % 11;
    format!(
        "– Fehlender rechtlicher Punkt eins.\n– Fehlender rechtlicher Punkt zwei.\nBias score: {score}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn request(prompt: &str, tag: &str) -> CompletionRequest {
        CompletionRequest {
            backend_id: "offline".into(),
            model_id: "offline".into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: None,
            max_tokens: None,
            request_tag: tag.into(),
        }
    }

    fn config() -> BackendConfig {
        BackendConfig {
            backend_id: "offline".into(),
            base_url: "offline:demo".into(),
            model_id: "offline".into(),
            headers: Default::default(),
        }
    }

    #[test]
    fn replies_are_deterministic() {
        let backend = OfflineBackend::new();
        let req = request("Bitte fassen Sie das folgende Urteil zusammen.\n\nSatz eins. Satz zwei. Satz drei.", "t");
        let a = backend.send_chat(&config(), None, &req).unwrap();
        let b = backend.send_chat(&config(), None, &req).unwrap();
        assert_eq!(a.body, b.body);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn different_tags_change_generation() {
        let backend = OfflineBackend::new();
        let prompt = "Bitte fassen Sie das folgende Urteil zusammen.\n\nSatz eins. Satz zwei. Satz drei. Satz vier. Satz fünf.";
        let a = backend.send_chat(&config(), None, &request(prompt, "rep=0")).unwrap();
        let b = backend.send_chat(&config(), None, &request(prompt, "rep=1")).unwrap();
        assert_ne!(a.body, b.body);
    }

    #[test]
    fn bias_reply_ends_with_score() {
        let backend = OfflineBackend::new();
        let req = request("Below are two summaries of the same federal court decision. ...", "t");
        let reply = backend.send_chat(&config(), None, &req).unwrap();
        assert!(reply.body.contains("Bias score:"));
    }
}
