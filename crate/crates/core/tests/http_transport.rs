//! Exercises the HTTP transport against a real local socket: status
//! handling, retry-after hints, credential headers, and the chat-body
//! parse, without any mocked transport layer.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rolesum::gateway::{
    BackendConfig, ChatMessage, CompletionRequest, Gateway, GatewayError, GatewayMode,
    HttpTransport, RetryPolicy, Transport,
};

struct CannedResponse {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

fn chat_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}

/// Serves one canned response per connection and records each request's
/// head + body for later assertions.
fn serve(responses: Vec<CannedResponse>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let address = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen_handle = Arc::clone(&seen);
    std::thread::spawn(move || {
        for response in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(value) = line.to_lowercase().strip_prefix("content-length:") {
                    content_length = value.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            seen_handle
                .lock()
                .unwrap()
                .push(format!("{head}{}", String::from_utf8_lossy(&body)));

            let mut stream = reader.into_inner();
            let mut payload = format!(
                "HTTP/1.1 {} x\r\ncontent-length: {}\r\nconnection: close\r\n",
                response.status,
                response.body.len()
            );
            for (name, value) in &response.headers {
                payload.push_str(&format!("{name}: {value}\r\n"));
            }
            payload.push_str("\r\n");
            payload.push_str(&response.body);
            stream.write_all(payload.as_bytes()).unwrap();
        }
    });
    (address, seen)
}

fn gateway_for(address: &str, cache: &std::path::Path) -> Gateway {
    Gateway::builder(GatewayMode::Live, cache)
        .backend(BackendConfig {
            backend_id: "httptest".into(),
            base_url: address.to_string(),
            model_id: "test-model".into(),
            headers: BTreeMap::from([("x-extra".to_string(), "ja".to_string())]),
        })
        .retry(RetryPolicy {
            base_delay: Duration::from_millis(5),
            factor: 2.0,
            max_attempts: 3,
        })
        .build()
}

fn request() -> CompletionRequest {
    CompletionRequest {
        backend_id: "httptest".into(),
        model_id: "test-model".into(),
        messages: vec![ChatMessage::user("Hallo Backend")],
        temperature: Some(0.25),
        max_tokens: Some(64),
        request_tag: "transport-test".into(),
    }
}

#[test]
fn live_call_round_trips_over_real_http() {
    let dir = tempfile::tempdir().unwrap();
    let (address, seen) = serve(vec![CannedResponse {
        status: 200,
        headers: vec![],
        body: chat_body("Antwort vom Server"),
    }]);
    std::env::set_var("HTTPTEST_API_KEY", "geheim-123");
    let gateway = gateway_for(&address, dir.path());
    let result = gateway.complete(&request()).unwrap();
    std::env::remove_var("HTTPTEST_API_KEY");

    assert_eq!(result.text, "Antwort vom Server");
    assert_eq!(result.finish_reason, "stop");
    assert!(!result.from_cache);

    let requests = seen.lock().unwrap();
    assert_eq!(requests.len(), 1);
    let head = &requests[0];
    assert!(head.contains("authorization: Bearer geheim-123") || head.contains("Authorization: Bearer geheim-123"),
        "credential header missing:\n{head}");
    assert!(head.to_lowercase().contains("x-extra: ja"), "extra header missing:\n{head}");
    // The JSON body carries the model and the rendered message.
    assert!(head.contains("\"model\": \"test-model\""), "body missing model:\n{head}");
    assert!(head.contains("Hallo Backend"));
    assert!(head.contains("\"temperature\": 0.25"));
}

#[test]
fn retryable_statuses_are_retried_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (address, seen) = serve(vec![
        CannedResponse {
            status: 429,
            headers: vec![("retry-after", "0".to_string())],
            body: "busy".into(),
        },
        CannedResponse {
            status: 503,
            headers: vec![],
            body: "flaky".into(),
        },
        CannedResponse {
            status: 200,
            headers: vec![],
            body: chat_body("geschafft"),
        },
    ]);
    let gateway = gateway_for(&address, dir.path());
    let result = gateway.complete(&request()).unwrap();
    assert_eq!(result.text, "geschafft");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_fail_without_retry() {
    let dir = tempfile::tempdir().unwrap();
    let (address, seen) = serve(vec![CannedResponse {
        status: 400,
        headers: vec![],
        body: "schlechte anfrage".into(),
    }]);
    let gateway = gateway_for(&address, dir.path());
    let error = gateway.complete(&request()).unwrap_err();
    match error {
        GatewayError::BackendError { status, body } => {
            assert_eq!(status, 400);
            assert!(body.contains("schlechte anfrage"));
        }
        other => panic!("expected BackendError, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn http_transport_is_directly_usable() {
    // Bypass the gateway: the transport alone must surface status and
    // retry-after.
    let (address, _) = serve(vec![CannedResponse {
        status: 429,
        headers: vec![("retry-after", "7".to_string())],
        body: "slow down".into(),
    }]);
    let transport = HttpTransport::new(Duration::from_secs(5));
    let backend = BackendConfig {
        backend_id: "httptest".into(),
        base_url: address,
        model_id: "test-model".into(),
        headers: BTreeMap::new(),
    };
    let reply = transport.send_chat(&backend, None, &request()).unwrap();
    assert_eq!(reply.status, 429);
    assert_eq!(reply.retry_after, Some(Duration::from_secs(7)));
    assert_eq!(reply.body, "slow down");
}
