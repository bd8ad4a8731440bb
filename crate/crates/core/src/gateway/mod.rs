//! Chat-completion gateway.
//!
//! [`Gateway`] validates requests against endpoint modality and decoding
//! rules, bounds in-flight calls, retries transient failures, and writes one
//! transcript record per call. The wire format lives in a [`ChatBackend`];
//! [`HttpBackend`] speaks the OpenAI-compatible protocol, the mock backends
//! serve tests and offline runs.

mod http;
mod mock;
mod transcript;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::{Semaphore, SemaphorePermit};
use url::Url;

use crate::digest::digest_json;

pub use http::HttpBackend;
pub use mock::{FnBackend, ReplayBackend, ScriptRule, ScriptedBackend};
pub use transcript::{read_transcript, TranscriptOutcome, TranscriptRecord, TranscriptSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub id: String,
    pub base_url: Url,
    pub model_name: String,
    pub modality: Modality,
    /// Name of the environment variable holding the API key; empty for keyless servers.
    #[serde(default)]
    pub credential_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub sampling_enabled: bool,
    pub max_new_tokens: u32,
}

impl DecodingConfig {
    pub const VISION_DEFAULT_TOKENS: u32 = 256;
    pub const TEXT_DEFAULT_TOKENS: u32 = 1024;

    pub fn greedy(max_new_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            sampling_enabled: false,
            max_new_tokens,
        }
    }

    pub fn vision_default() -> Self {
        Self::greedy(Self::VISION_DEFAULT_TOKENS)
    }

    pub fn text_default() -> Self {
        Self::greedy(Self::TEXT_DEFAULT_TOKENS)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_new_tokens must be positive".into(),
            ));
        }
        if !self.sampling_enabled && self.temperature != 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} requires sampling to be enabled",
                self.temperature
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "invalid temperature {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(Role::User, text)
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text(Role::System, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::text(Role::Assistant, text)
    }

    /// A user turn carrying an image followed by a text prompt.
    pub fn user_with_image(path: impl Into<PathBuf>, text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: vec![
                ContentPart::Image { path: path.into() },
                ContentPart::Text { text: text.into() },
            ],
        }
    }

    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn has_image(&self) -> bool {
        self.content
            .iter()
            .any(|p| matches!(p, ContentPart::Image { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages }
    }

    pub fn single(message: ChatMessage) -> Self {
        Self {
            messages: vec![message],
        }
    }

    pub fn has_image(&self) -> bool {
        self.messages.iter().any(ChatMessage::has_image)
    }

    /// Text of the last user turn.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(ChatMessage::joined_text)
            .unwrap_or_default()
    }

    pub fn validate_for(&self, endpoint: &ModelEndpoint) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest(
                "request has no user message".into(),
            ));
        }
        if self.has_image() && endpoint.modality != Modality::Vision {
            return Err(GatewayError::InvalidRequest(format!(
                "image attached to text-only endpoint {}",
                endpoint.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Refusal,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl ChatResponse {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusalPolicy {
    pub marker_phrases: Vec<String>,
}

impl Default for RefusalPolicy {
    fn default() -> Self {
        Self {
            marker_phrases: [
                "i can't assist",
                "i cannot assist",
                "i can't help with",
                "i cannot help with",
                "i'm sorry, but",
                "i am sorry, but",
                "i'm unable to",
                "i am unable to",
                "i can't provide",
                "i cannot provide",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

impl RefusalPolicy {
    pub fn new(markers: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            marker_phrases: markers
                .into_iter()
                .map(|m| m.into().to_lowercase())
                .collect(),
        }
    }

    pub fn detect(&self, response: &ChatResponse) -> bool {
        detect_refusal(response, self)
    }
}

/// True when the endpoint flagged a refusal or a marker phrase appears in the
/// first 200 characters of the reply (case-insensitive, curly apostrophes folded).
pub fn detect_refusal(response: &ChatResponse, policy: &RefusalPolicy) -> bool {
    if response.finish_reason == FinishReason::Refusal {
        return true;
    }
    let head: String = response
        .text
        .chars()
        .take(200)
        .collect::<String>()
        .replace('\u{2019}', "'")
        .to_lowercase();
    policy
        .marker_phrases
        .iter()
        .any(|m| !m.is_empty() && head.contains(&m.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Server { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn send(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        decoding: &DecodingConfig,
    ) -> Result<ChatResponse, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Priority {
    #[default]
    Batch,
    /// Workbench calls; may use the slot batch work cannot take.
    Interactive,
}

#[derive(Debug, Clone, Default)]
pub struct CallOptions {
    pub priority: Priority,
    /// Free-form label copied into the transcript record.
    pub tag: Option<String>,
}

impl CallOptions {
    pub fn tagged(tag: impl Into<String>) -> Self {
        Self {
            priority: Priority::Batch,
            tag: Some(tag.into()),
        }
    }

    pub fn interactive(mut self) -> Self {
        self.priority = Priority::Interactive;
        self
    }
}

/// Digest identifying a call; replay transcripts are keyed by it.
pub fn request_digest(
    endpoint: &ModelEndpoint,
    request: &ChatRequest,
    decoding: &DecodingConfig,
) -> String {
    digest_json(&serde_json::json!({
        "endpoint": endpoint.id,
        "model": endpoint.model_name,
        "request": request,
        "decoding": decoding,
    }))
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    transcript: Arc<TranscriptSink>,
    retry: RetryPolicy,
    shared: Arc<Semaphore>,
    reserved: Arc<Semaphore>,
}

impl Gateway {
    /// `in_flight` bounds concurrent calls; with two or more, one slot is
    /// held back for [`Priority::Interactive`] calls.
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        transcript: Arc<TranscriptSink>,
        in_flight: usize,
    ) -> Self {
        let in_flight = in_flight.max(1);
        let (shared, reserved) = if in_flight >= 2 {
            (in_flight - 1, 1)
        } else {
            (1, 0)
        };
        Self {
            backend,
            transcript,
            retry: RetryPolicy::default(),
            shared: Arc::new(Semaphore::new(shared)),
            reserved: Arc::new(Semaphore::new(reserved)),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn transcript(&self) -> &Arc<TranscriptSink> {
        &self.transcript
    }

    async fn acquire(&self, priority: Priority) -> SemaphorePermit<'_> {
        match priority {
            Priority::Batch => self.shared.acquire().await.expect("semaphore never closed"),
            Priority::Interactive => tokio::select! {
                p = self.reserved.acquire() => p.expect("semaphore never closed"),
                p = self.shared.acquire() => p.expect("semaphore never closed"),
            },
        }
    }

    pub async fn complete(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        decoding: &DecodingConfig,
    ) -> Result<ChatResponse, GatewayError> {
        self.complete_with(endpoint, request, decoding, CallOptions::default())
            .await
    }

    pub async fn complete_with(
        &self,
        endpoint: &ModelEndpoint,
        request: &ChatRequest,
        decoding: &DecodingConfig,
        options: CallOptions,
    ) -> Result<ChatResponse, GatewayError> {
        request.validate_for(endpoint)?;
        decoding.validate()?;

        let _permit = self.acquire(options.priority).await;
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.backend.send(endpoint, request, decoding).await {
                Ok(resp) => break Ok(resp),
                Err(e) if e.is_retryable() && attempts < self.retry.max_attempts => {
                    let wait = self.retry.initial_backoff * 2u32.pow(attempts - 1);
                    tracing::warn!(endpoint = %endpoint.id, attempt = attempts, error = %e, "retrying");
                    tokio::time::sleep(wait).await;
                }
                Err(e) if e.is_retryable() => {
                    break Err(GatewayError::Exhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => break Err(e),
            }
        };
        let record = TranscriptRecord {
            seq: 0,
            endpoint_id: endpoint.id.clone(),
            model_name: endpoint.model_name.clone(),
            request_digest: request_digest(endpoint, request, decoding),
            tag: options.tag,
            request: request.clone(),
            decoding: *decoding,
            attempts,
            elapsed_ms: started.elapsed().as_millis() as u64,
            outcome: match &result {
                Ok(r) => TranscriptOutcome::Response(r.clone()),
                Err(e) => TranscriptOutcome::Error(e.to_string()),
            },
        };
        self.transcript.append(record);
        result
    }

    /// One-token health check. Not written to the transcript.
    pub async fn probe(&self, endpoint: &ModelEndpoint, text: &str) -> Result<(), GatewayError> {
        let request = ChatRequest::single(ChatMessage::user(text));
        let decoding = DecodingConfig::greedy(1);
        let _permit = self.acquire(Priority::Batch).await;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.backend.send(endpoint, &request, &decoding).await {
                Ok(_) => return Ok(()),
                Err(e) if e.is_retryable() && attempts < self.retry.max_attempts => {
                    tokio::time::sleep(self.retry.initial_backoff * 2u32.pow(attempts - 1)).await;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    pub(crate) fn endpoint(id: &str, modality: Modality) -> ModelEndpoint {
        ModelEndpoint {
            id: id.into(),
            base_url: Url::parse("http://localhost:1/v1").unwrap(),
            model_name: format!("{id}-model"),
            modality,
            credential_ref: String::new(),
        }
    }

    fn gateway(backend: impl ChatBackend + 'static) -> Gateway {
        Gateway::new(Arc::new(backend), Arc::new(TranscriptSink::memory()), 4).with_retry(
            RetryPolicy {
                max_attempts: 3,
                initial_backoff: Duration::ZERO,
            },
        )
    }

    #[test]
    fn decoding_rules() {
        assert!(DecodingConfig::greedy(1024).validate().is_ok());
        let hot = DecodingConfig {
            temperature: 0.7,
            sampling_enabled: false,
            max_new_tokens: 1024,
        };
        assert!(matches!(
            hot.validate(),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert!(DecodingConfig {
            sampling_enabled: true,
            ..hot
        }
        .validate()
        .is_ok());
        assert!(DecodingConfig::greedy(0).validate().is_err());
    }

    #[test]
    fn refusal_detection() {
        let p = RefusalPolicy::default();
        assert!(detect_refusal(
            &ChatResponse::stop("I'm sorry, but I can't assist with that."),
            &p
        ));
        assert!(detect_refusal(
            &ChatResponse::stop("I\u{2019}m sorry, but no."),
            &p
        ));
        assert!(!detect_refusal(
            &ChatResponse::stop("Yes, the image shows two people."),
            &p
        ));
        let flagged = ChatResponse {
            text: String::new(),
            finish_reason: FinishReason::Refusal,
            latency_ms: 0,
            usage: None,
        };
        assert!(detect_refusal(&flagged, &RefusalPolicy::new(Vec::<String>::new())));
        let late = format!("{} I'm sorry, but", "x".repeat(200));
        assert!(!detect_refusal(&ChatResponse::stop(late), &p));
    }

    #[tokio::test]
    async fn images_need_vision_endpoints() {
        let gw = gateway(FnBackend::new(|_, _| Ok(ChatResponse::stop("ok"))));
        let req = ChatRequest::single(ChatMessage::user_with_image("x.png", "hi"));
        let err = gw
            .complete(&endpoint("t", Modality::Text), &req, &DecodingConfig::text_default())
            .await
            .unwrap_err();
        assert!(matches!(err, GatewayError::InvalidRequest(_)));
        assert_eq!(gw.transcript().count(), 0);
        let no_user = ChatRequest::single(ChatMessage::system("x"));
        assert!(gw
            .complete(&endpoint("t", Modality::Text), &no_user, &DecodingConfig::text_default())
            .await
            .is_err());
    }

    #[tokio::test]
    async fn transient_failures_are_retried_then_exhausted() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let gw = gateway(FnBackend::new(move |_, _| {
            let n = c.fetch_add(1, Ordering::SeqCst);
            if n < 2 {
                Err(GatewayError::Server {
                    status: 503,
                    body: "busy".into(),
                })
            } else {
                Ok(ChatResponse::stop("OK"))
            }
        }));
        let ep = endpoint("t", Modality::Text);
        let req = ChatRequest::single(ChatMessage::user("Say OK"));
        let resp = gw
            .complete(&ep, &req, &DecodingConfig::text_default())
            .await
            .unwrap();
        assert_eq!(resp.text, "OK");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let recs = gw.transcript().records();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].attempts, 3);

        let gw = gateway(FnBackend::new(|_, _| {
            Err(GatewayError::Transport("refused".into()))
        }));
        let err = gw
            .complete(&ep, &req, &DecodingConfig::text_default())
            .await
            .unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }));
        assert_eq!(gw.transcript().count(), 1);
    }

    #[tokio::test]
    async fn configuration_errors_are_not_retried() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let gw = gateway(FnBackend::new(move |_, _| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(GatewayError::Configuration("401".into()))
        }));
        let ep = endpoint("t", Modality::Text);
        let req = ChatRequest::single(ChatMessage::user("x"));
        assert!(gw
            .complete(&ep, &req, &DecodingConfig::text_default())
            .await
            .is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn probe_skips_transcript() {
        let gw = gateway(FnBackend::new(|_, _| Ok(ChatResponse::stop("OK"))));
        gw.probe(&endpoint("t", Modality::Text), "Reply with OK.")
            .await
            .unwrap();
        assert_eq!(gw.transcript().count(), 0);
    }

    #[tokio::test]
    async fn interactive_calls_get_the_reserved_slot() {
        use tokio::sync::Notify;
        let release = Arc::new(Notify::new());
        let r = release.clone();
        struct Blocking(Arc<Notify>);
        #[async_trait]
        impl ChatBackend for Blocking {
            async fn send(
                &self,
                _: &ModelEndpoint,
                request: &ChatRequest,
                _: &DecodingConfig,
            ) -> Result<ChatResponse, GatewayError> {
                if request.last_user_text() == "batch" {
                    self.0.notified().await;
                }
                Ok(ChatResponse::stop("done"))
            }
        }
        let gw = Gateway::new(
            Arc::new(Blocking(r)),
            Arc::new(TranscriptSink::memory()),
            2,
        );
        let ep = endpoint("t", Modality::Text);
        let batch_req = ChatRequest::single(ChatMessage::user("batch"));
        let gw2 = gw.clone();
        let ep2 = ep.clone();
        let held = tokio::spawn(async move {
            gw2.complete(&ep2, &batch_req, &DecodingConfig::text_default())
                .await
        });
        tokio::time::sleep(Duration::from_millis(20)).await;
        let ui = ChatRequest::single(ChatMessage::user("ui"));
        let resp = tokio::time::timeout(
            Duration::from_secs(2),
            gw.complete_with(
                &ep,
                &ui,
                &DecodingConfig::text_default(),
                CallOptions::default().interactive(),
            ),
        )
        .await
        .expect("interactive call must not wait for batch work")
        .unwrap();
        assert_eq!(resp.text, "done");
        release.notify_one();
        held.await.unwrap().unwrap();
    }
}
