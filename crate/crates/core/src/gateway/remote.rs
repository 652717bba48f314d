//! Chat-completion style HTTP backend.
//!
//! Request body:
//!
//! ```json
//! {"model": "...", "temperature": 0, "max_tokens": 1024,
//!  "messages": [{"role": "user", "content": [
//!     {"type": "text", "text": "..."},
//!     {"type": "image", "data": "<base64>", "media_type": "image/png"}]}]}
//! ```
//!
//! The first assistant text of the reply is returned. OpenAI-style
//! (`choices[0].message.content`), Anthropic-style (`content[].text`) and
//! Ollama-style (`message.content`) replies are understood.

use base64::Engine;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{AttemptError, Backend, BackendConfig, GatewayError, Request};

#[derive(Debug)]
pub struct RemoteBackend {
    client: Client,
    endpoint: String,
    model: String,
    auth_env_var: Option<String>,
    temperature: f64,
    max_tokens: u32,
}

impl RemoteBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint_url
            .clone()
            .ok_or_else(|| GatewayError::Config("remote backends need endpoint_url".into()))?;
        let client = Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            model: config.model_name.clone(),
            auth_env_var: config.auth_env_var.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        })
    }

    pub fn request_body(&self, request: &Request<'_>) -> Value {
        let mut content = vec![json!({"type": "text", "text": request.prompt.text})];
        if let Some(image) = request.image {
            content.push(json!({
                "type": "image",
                "data": base64::engine::general_purpose::STANDARD.encode(&image.bytes),
                "media_type": image.media_type,
            }));
        }
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.model
    }

    fn attempt(&self, request: &Request<'_>) -> Result<String, AttemptError> {
        let token = match &self.auth_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                AttemptError::Fatal(GatewayError::AuthMissing(var.clone()))
            })?),
            None => None,
        };
        let mut builder = self.client.post(&self.endpoint).json(&self.request_body(request));
        if let Some(token) = token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(AttemptError::Transport(format!("HTTP {status}: {}", clip(&text))));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Http {
                status: status.as_u16(),
                body: clip(&text),
            }));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(GatewayError::BadResponse(e.to_string())))?;
        extract_assistant_text(&value)
            .ok_or_else(|| AttemptError::Fatal(GatewayError::BadResponse(clip(&text))))
    }
}

fn classify(e: reqwest::Error) -> AttemptError {
    if e.is_timeout() {
        AttemptError::Timeout
    } else {
        AttemptError::Transport(e.to_string())
    }
}

fn clip(text: &str) -> String {
    const MAX: usize = 300;
    if text.len() <= MAX {
        return text.to_string();
    }
    let mut end = MAX;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &text[..end])
}

fn text_of(content: &Value) -> Option<String> {
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => parts.iter().find_map(|p| {
            let is_text = p.get("type").and_then(Value::as_str).is_none_or(|t| t == "text");
            if is_text {
                p.get("text").and_then(Value::as_str).map(str::to_string)
            } else {
                None
            }
        }),
        _ => None,
    }
}

/// First assistant text in a chat-completion style reply.
pub fn extract_assistant_text(value: &Value) -> Option<String> {
    if let Some(choices) = value.get("choices").and_then(Value::as_array) {
        return choices
            .iter()
            .find_map(|c| c.get("message").and_then(|m| m.get("content")).and_then(text_of));
    }
    if let Some(content) = value.get("content") {
        return text_of(content);
    }
    if let Some(content) = value.get("message").and_then(|m| m.get("content")) {
        return text_of(content);
    }
    value
        .get("output_text")
        .and_then(Value::as_str)
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_shapes() {
        let openai = json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}]});
        assert_eq!(extract_assistant_text(&openai).as_deref(), Some("hi"));
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "yo"}]}}]});
        assert_eq!(extract_assistant_text(&parts).as_deref(), Some("yo"));
        let anthropic = json!({"content": [{"type": "thinking", "thinking": "..."}, {"type": "text", "text": "ok"}]});
        assert_eq!(extract_assistant_text(&anthropic).as_deref(), Some("ok"));
        let ollama = json!({"message": {"role": "assistant", "content": "x"}});
        assert_eq!(extract_assistant_text(&ollama).as_deref(), Some("x"));
        assert_eq!(extract_assistant_text(&json!({"error": "nope"})), None);
    }

    #[test]
    fn clip_respects_char_boundaries() {
        let s = "é".repeat(400);
        assert!(clip(&s).ends_with("..."));
    }
}
