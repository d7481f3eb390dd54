//! Adapter for driving the researcher or refiner role through an external
//! chat-completion endpoint (HTTP + JSON, message-list request, single text
//! completion back).
//!
//! The API key is read from the `SEARCHRL_API_KEY` environment variable;
//! every other setting lives in [`EndpointConfig`].

use serde::{Deserialize, Serialize};
use serde_json::json;
use std::time::Duration;
use thiserror::Error;

/// Environment variable holding the bearer token, if the endpoint needs one.
pub const API_KEY_ENV: &str = "SEARCHRL_API_KEY";

/// System prompt teaching a remote researcher the action grammar.
pub const RESEARCHER_SYSTEM_PROMPT: &str = "You are a research agent answering a question by \
searching a document corpus. Each turn, reply with exactly one <think>...</think> section \
followed by exactly one <search>...</search> section (one query per line, at most five) or one \
<answer>...</answer> section containing only the final answer. Results arrive inside \
<information>...</information> sections. Use no other tags.";

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("http error: status {0}")]
    Http(u16),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("client construction failed: {0}")]
    Client(String),
}

/// Connection settings for one remote model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(with = "duration_millis")]
    pub timeout: Duration,
    pub max_retries: u32,
    /// Milliseconds before the first retry; doubles on each attempt.
    pub backoff_ms: u64,
    /// Researcher-visible context budget in whitespace tokens. Oldest
    /// observations are elided first when the rendered history exceeds it;
    /// the question itself is never dropped.
    pub context_window_tokens: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model_name: "local-model".to_string(),
            temperature: 0.8,
            max_output_tokens: 512,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff_ms: 200,
            context_window_tokens: 16_384,
        }
    }
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_millis() as u64).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".to_string(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".to_string(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".to_string(),
            content: content.into(),
        }
    }
}

/// Stateless blocking client with retry and exponential backoff.
pub struct ChatClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Client(e.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Sends the message list and returns the completion text. Makes up to
    /// `max_retries + 1` attempts.
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        });

        let mut last_error = GatewayError::RetriesExhausted {
            attempts: 0,
            last: "no attempt made".to_string(),
        };
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => last_error = e,
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts,
            last: last_error.to_string(),
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, GatewayError> {
        let mut request = self.http.post(&self.config.base_url).json(body);
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                request = request.bearer_auth(key);
            }
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Client(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(GatewayError::Http(status.as_u16()));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| GatewayError::Malformed(e.to_string()))?;
        extract_completion(&value)
    }
}

fn extract_completion(value: &serde_json::Value) -> Result<String, GatewayError> {
    value["choices"]
        .get(0)
        .and_then(|c| {
            c.pointer("/message/content")
                .or_else(|| c.get("text"))
                .and_then(|t| t.as_str())
        })
        .map(|s| s.to_string())
        .ok_or_else(|| GatewayError::Malformed("no choices[0].message.content".to_string()))
}

/// Renders a rollout context as a chat history: system rules, the question,
/// then alternating agent turns and observations. When the rendered history
/// exceeds the context window, the oldest observations are elided first.
pub fn render_researcher_messages(
    question: &str,
    turns: &[(String, String)],
    context_window_tokens: usize,
) -> Vec<ChatMessage> {
    let mut observations: Vec<String> = turns.iter().map(|(_, obs)| obs.clone()).collect();
    let budget = |obs: &[String]| -> usize {
        let mut total = crate::text::whitespace_tokens(RESEARCHER_SYSTEM_PROMPT)
            + crate::text::whitespace_tokens(question);
        for ((action, _), o) in turns.iter().zip(obs) {
            total += crate::text::whitespace_tokens(action) + crate::text::whitespace_tokens(o);
        }
        total
    };
    let mut drop_at = 0;
    while budget(&observations) > context_window_tokens && drop_at < observations.len() {
        observations[drop_at] = "[earlier information elided]".to_string();
        drop_at += 1;
    }

    let mut messages = vec![
        ChatMessage::system(RESEARCHER_SYSTEM_PROMPT),
        ChatMessage::user(format!("Question: {question}")),
    ];
    for ((action, _), obs) in turns.iter().zip(&observations) {
        messages.push(ChatMessage::assistant(action.clone()));
        messages.push(ChatMessage::user(obs.clone()));
    }
    messages
}

/// Researcher played by a remote chat model. Failures surface as
/// [`crate::rollout::AgentError`] so the engine can truncate the trajectory
/// with an annotation instead of crashing.
pub struct RemoteResearcher {
    client: ChatClient,
}

impl RemoteResearcher {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl crate::rollout::Researcher for RemoteResearcher {
    fn act(
        &self,
        ctx: &crate::rollout::AgentContext<'_>,
        _rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<crate::rollout::ActOutput, crate::rollout::AgentError> {
        let turns: Vec<(String, String)> = ctx
            .turns
            .iter()
            .map(|(a, o)| (a.to_string(), o.to_string()))
            .collect();
        let messages = render_researcher_messages(
            ctx.question,
            &turns,
            self.client.config().context_window_tokens,
        );
        let completion = self
            .client
            .complete(&messages)
            .map_err(|e| crate::rollout::AgentError::Remote(e.to_string()))?;
        Ok(crate::rollout::ActOutput::plain(
            crate::protocol::RawActionText::new(completion),
        ))
    }
}
