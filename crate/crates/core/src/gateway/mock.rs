use std::collections::HashMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    request_digest, ChatBackend, ChatRequest, ChatResponse, DecodingConfig, FinishReason,
    GatewayError, ModelEndpoint, TranscriptOutcome, TranscriptRecord,
};

/// Backend driven by a closure; handy in tests.
pub struct FnBackend<F> {
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ModelEndpoint, &ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

#[async_trait]
impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ModelEndpoint, &ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    async fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        _decoding: &DecodingConfig,
    ) -> Result<ChatResponse, GatewayError> {
        (self.f)(endpoint, request)
    }
}

/// One scripted reply. A rule matches when its endpoint (if given) equals the
/// target endpoint id and every `contains` substring occurs in the last user turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub reply: Option<String>,
    /// Reply with the last user turn verbatim.
    #[serde(default)]
    pub echo: bool,
    #[serde(default)]
    pub finish_reason: Option<FinishReason>,
    /// One of `transport`, `server`, `configuration`, `protocol`.
    #[serde(default)]
    pub error: Option<String>,
}

impl ScriptRule {
    pub fn reply(contains: &[&str], reply: &str) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            reply: Some(reply.to_string()),
            ..Self::default()
        }
    }

    pub fn for_endpoint(mut self, endpoint: &str) -> Self {
        self.endpoint = Some(endpoint.to_string());
        self
    }

    fn matches(&self, endpoint: &ModelEndpoint, text: &str) -> bool {
        self.endpoint.as_deref().is_none_or(|e| e == endpoint.id)
            && self.contains.iter().all(|c| text.contains(c.as_str()))
    }

    fn respond(&self, text: &str) -> Result<ChatResponse, GatewayError> {
        if let Some(kind) = &self.error {
            let msg = format!("scripted {kind} failure");
            return Err(match kind.as_str() {
                "transport" => GatewayError::Transport(msg),
                "server" => GatewayError::Server {
                    status: 500,
                    body: msg,
                },
                "protocol" => GatewayError::Protocol(msg),
                _ => GatewayError::Configuration(msg),
            });
        }
        let body = if self.echo {
            text.to_string()
        } else {
            self.reply.clone().unwrap_or_default()
        };
        Ok(ChatResponse {
            text: body,
            finish_reason: self.finish_reason.unwrap_or(FinishReason::Stop),
            latency_ms: 0,
            usage: None,
        })
    }
}

/// Deterministic offline backend: first matching rule wins, then the default reply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default_reply: Option<String>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, default_reply: Option<&str>) -> Self {
        Self {
            rules,
            default_reply: default_reply.map(String::from),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Configuration(format!("reading mock script {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| {
            GatewayError::Configuration(format!("parsing mock script {}: {e}", path.display()))
        })
    }

    pub fn reply_for(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        let text = request.last_user_text();
        if let Some(rule) = self.rules.iter().find(|r| r.matches(endpoint, &text)) {
            return rule.respond(&text);
        }
        match &self.default_reply {
            Some(reply) => Ok(ChatResponse::stop(reply.clone())),
            None => Err(GatewayError::Configuration(format!(
                "no scripted reply for endpoint {} and prompt starting {:?}",
                endpoint.id,
                text.chars().take(80).collect::<String>()
            ))),
        }
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        _decoding: &DecodingConfig,
    ) -> Result<ChatResponse, GatewayError> {
        self.reply_for(endpoint, request)
    }
}

/// Answers from a recorded transcript, keyed by request digest.
pub struct ReplayBackend {
    replies: HashMap<String, TranscriptOutcome>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let mut replies = HashMap::new();
        for r in records {
            replies.entry(r.request_digest).or_insert(r.outcome);
        }
        Self { replies }
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

#[async_trait]
impl ChatBackend for ReplayBackend {
    async fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        decoding: &DecodingConfig,
    ) -> Result<ChatResponse, GatewayError> {
        let digest = request_digest(endpoint, request, decoding);
        match self.replies.get(&digest) {
            Some(TranscriptOutcome::Response(r)) => Ok(r.clone()),
            Some(TranscriptOutcome::Error(e)) => Err(GatewayError::Protocol(format!(
                "recorded failure: {e}"
            ))),
            None => Err(GatewayError::Configuration(format!(
                "no recorded reply for request {digest}"
            ))),
        }
    }
}
