//! Generic chat-completions + embeddings HTTP backend.
//!
//! Request/response shapes follow the widely-implemented JSON convention:
//! POST {base}/chat/completions with {model, messages, max_tokens}, reading
//! choices[0].message.content; POST {base}/embeddings with {model, input},
//! reading data[*].embedding. Endpoint, models, and credentials come from the
//! environment; acceptance never depends on this backend.

use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{EmbedBackend, GenerationRequest, TextBackend};

/// Environment variables read by [`HttpBackend::from_env`].
pub const ENV_API_BASE: &str = "MOTIVEREC_API_BASE";
pub const ENV_API_KEY: &str = "MOTIVEREC_API_KEY";
pub const ENV_CHAT_MODEL: &str = "MOTIVEREC_CHAT_MODEL";
pub const ENV_EMBED_MODEL: &str = "MOTIVEREC_EMBED_MODEL";
pub const ENV_EMBED_DIM: &str = "MOTIVEREC_EMBED_DIM";

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    chat_model: String,
    embed_model: String,
    dim: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Extracts the first choice's message content; separated from transport for
/// testability.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let parsed: ChatResponse = serde_json::from_str(body)
        .map_err(|e| Error::Gateway(format!("malformed chat response: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Error::Gateway("chat response has no choices".to_string()))
}

/// Extracts the embedding vectors (f64 on the wire, f32 in the index).
pub fn parse_embed_response(body: &str) -> Result<Vec<Vec<f32>>> {
    let parsed: EmbedResponse = serde_json::from_str(body)
        .map_err(|e| Error::Gateway(format!("malformed embeddings response: {e}")))?;
    Ok(parsed
        .data
        .into_iter()
        .map(|d| d.embedding.into_iter().map(|x| x as f32).collect())
        .collect())
}

impl HttpBackend {
    /// `embedding_dim_default` is used when MOTIVEREC_EMBED_DIM is unset —
    /// normally the configured index dimension.
    pub fn from_env(embedding_dim_default: usize) -> Result<Self> {
        let base_url = std::env::var(ENV_API_BASE).map_err(|_| {
            Error::Gateway(format!("{ENV_API_BASE} must be set for the http backend"))
        })?;
        let dim = match std::env::var(ENV_EMBED_DIM) {
            Ok(s) => s
                .parse::<usize>()
                .map_err(|_| Error::Gateway(format!("{ENV_EMBED_DIM} must be an integer")))?,
            Err(_) => embedding_dim_default,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Gateway(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(ENV_API_KEY).ok(),
            chat_model: std::env::var(ENV_CHAT_MODEL)
                .unwrap_or_else(|_| "gpt-4o-mini".to_string()),
            embed_model: std::env::var(ENV_EMBED_MODEL)
                .unwrap_or_else(|_| "text-embedding-3-small".to_string()),
            dim,
        })
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String> {
        let mut req = self.client.post(format!("{}{}", self.base_url, path)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Gateway(format!("transport: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::Gateway(format!("reading response body: {e}")))?;
        if !status.is_success() {
            return Err(Error::Gateway(format!(
                "http {status}: {}",
                crate::text::truncate_tokens(&text, 40)
            )));
        }
        Ok(text)
    }
}

impl TextBackend for HttpBackend {
    fn generate_text(&self, req: &GenerationRequest) -> Result<String> {
        let body = serde_json::json!({
            "model": self.chat_model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
        });
        parse_chat_response(&self.post("/chat/completions", body)?)
    }

    fn id(&self) -> String {
        format!("http-text:{}:{}", self.base_url, self.chat_model)
    }
}

impl EmbedBackend for HttpBackend {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = serde_json::json!({
            "model": self.embed_model,
            "input": texts,
        });
        parse_embed_response(&self.post("/embeddings", body)?)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("http-embed:{}:{}:dim={}", self.base_url, self.embed_model, self.dim)
    }
}
