use std::path::Path;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, ChatResponse, ContentPart, DecodingConfig, FinishReason,
    GatewayError, ModelEndpoint, TokenUsage,
};

/// OpenAI-compatible `/chat/completions` client. Images travel as base64 data URIs.
pub struct HttpBackend {
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Configuration(e.to_string()))?;
        Ok(Self { client })
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    }
}

fn encode_image(path: &Path) -> Result<String, GatewayError> {
    let bytes = std::fs::read(path).map_err(|e| {
        GatewayError::InvalidRequest(format!("reading image {}: {e}", path.display()))
    })?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

pub(crate) fn wire_messages(request: &ChatRequest) -> Result<Vec<Value>, GatewayError> {
    let mut out = Vec::with_capacity(request.messages.len());
    for m in &request.messages {
        let content = if m.has_image() {
            let mut parts = Vec::new();
            for p in &m.content {
                parts.push(match p {
                    ContentPart::Text { text } => json!({"type": "text", "text": text}),
                    ContentPart::Image { path } => {
                        json!({"type": "image_url", "image_url": {"url": encode_image(path)?}})
                    }
                });
            }
            Value::Array(parts)
        } else {
            Value::String(m.joined_text())
        };
        out.push(json!({"role": m.role, "content": content}));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn parse_reply(body: &str, latency_ms: u64) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::Protocol(format!("unparseable reply: {e}")))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Protocol("reply has no choices".into()))?;
    let usage = wire.usage.map(|u| TokenUsage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    if let Some(refusal) = choice.message.refusal.filter(|r| !r.is_empty()) {
        return Ok(ChatResponse {
            text: refusal,
            finish_reason: FinishReason::Refusal,
            latency_ms,
            usage,
        });
    }
    let text = choice.message.content.unwrap_or_default();
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("content_filter") => FinishReason::Refusal,
        _ if text.trim().is_empty() => FinishReason::Error,
        _ => FinishReason::Stop,
    };
    Ok(ChatResponse {
        text,
        finish_reason,
        latency_ms,
        usage,
    })
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        decoding: &DecodingConfig,
    ) -> Result<ChatResponse, GatewayError> {
        let url = format!(
            "{}/chat/completions",
            endpoint.base_url.as_str().trim_end_matches('/')
        );
        let body = json!({
            "model": endpoint.model_name,
            "messages": wire_messages(request)?,
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_new_tokens,
            "stream": false,
        });
        let mut builder = self.client.post(&url).json(&body);
        if !endpoint.credential_ref.is_empty() {
            let key = std::env::var(&endpoint.credential_ref).map_err(|_| {
                GatewayError::Configuration(format!(
                    "environment variable {} is not set",
                    endpoint.credential_ref
                ))
            })?;
            builder = builder.bearer_auth(key);
        }
        let started = Instant::now();
        let resp = builder
            .send()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::Server {
                status: status.as_u16(),
                body: text,
            });
        }
        if status.is_client_error() {
            return Err(GatewayError::Configuration(format!(
                "{} returned {}: {}",
                endpoint.id, status, text
            )));
        }
        if !status.is_success() {
            return Err(GatewayError::Protocol(format!("unexpected status {status}")));
        }
        parse_reply(&text, latency_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    #[test]
    fn reply_parsing() {
        let ok = r#"{"choices":[{"message":{"content":"OK"},"finish_reason":"stop"}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let r = parse_reply(ok, 5).unwrap();
        assert_eq!(r.text, "OK");
        assert_eq!(r.finish_reason, FinishReason::Stop);
        assert_eq!(r.usage.unwrap().completion_tokens, 1);

        let filtered = r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#;
        assert_eq!(
            parse_reply(filtered, 0).unwrap().finish_reason,
            FinishReason::Refusal
        );
        let refused = r#"{"choices":[{"message":{"content":null,"refusal":"I can't"},"finish_reason":"stop"}]}"#;
        assert_eq!(
            parse_reply(refused, 0).unwrap().finish_reason,
            FinishReason::Refusal
        );
        assert!(matches!(
            parse_reply(r#"{"choices":[]}"#, 0),
            Err(GatewayError::Protocol(_))
        ));
        assert!(matches!(
            parse_reply("<html>", 0),
            Err(GatewayError::Protocol(_))
        ));
    }

    #[test]
    fn text_only_messages_use_plain_strings() {
        let req = ChatRequest::single(ChatMessage::user("hello"));
        let wire = wire_messages(&req).unwrap();
        assert_eq!(wire[0], json!({"role": "user", "content": "hello"}));
    }

    #[test]
    fn images_become_data_uris() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("m.png");
        std::fs::write(&img, [1u8, 2, 3]).unwrap();
        let req = ChatRequest::single(ChatMessage::user_with_image(&img, "what?"));
        let wire = wire_messages(&req).unwrap();
        let parts = wire[0]["content"].as_array().unwrap();
        assert_eq!(
            parts[0]["image_url"]["url"],
            json!("data:image/png;base64,AQID")
        );
        assert_eq!(parts[1], json!({"type": "text", "text": "what?"}));
    }
}
