use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{ChatMessage, ChatParams, RawCompletion, Transport, TransportError, Usage};

/// Environment variable holding the bearer token for the upstream endpoint.
pub const TOKEN_ENV: &str = "FUSION_LLM_TOKEN";

/// Chat-completions JSON over HTTP: POST `<base_url>/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    http: reqwest::Client,
    base_url: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl HttpTransport {
    /// Reads the bearer token from [`TOKEN_ENV`] when present.
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, TransportError> {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(base_url, timeout, token)
    }

    pub fn with_token(
        base_url: impl Into<String>,
        timeout: Duration,
        token: Option<String>,
    ) -> Result<Self, TransportError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        let base_url = base_url.into().trim_end_matches('/').to_string();
        Ok(Self { http, base_url, token })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }
}

fn map_reqwest(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else {
        TransportError::Connect(e.to_string())
    }
}

/// Extracts `choices[0].message.content` and usage from a response body.
pub(crate) fn parse_wire_response(body: &str) -> Result<RawCompletion, TransportError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let text = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportError::Malformed("response has no choices[0].message.content".into()))?;
    let usage = wire.usage.map(|u| Usage {
        prompt_units: u.prompt_tokens.unwrap_or(0),
        completion_units: u.completion_tokens.unwrap_or(0),
    });
    Ok(RawCompletion { text, usage })
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<RawCompletion, TransportError> {
        let mut body = json!({
            "model": params.model_id,
            "messages": messages,
            "temperature": params.temperature,
        });
        if let Some(max) = params.max_output_units {
            body["max_tokens"] = json!(max);
        }
        let mut request = self.http.post(self.endpoint("/chat/completions")).json(&body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().await.map_err(map_reqwest)?;
        let status = response.status();
        let text = response.text().await.map_err(map_reqwest)?;
        if !status.is_success() {
            return Err(TransportError::Status { code: status.as_u16(), body: text });
        }
        parse_wire_response(&text)
    }

    async fn health(&self) -> bool {
        let mut request = self.http.get(self.endpoint("/models")).timeout(Duration::from_secs(2));
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        matches!(request.send().await, Ok(r) if r.status().is_success())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_choice_content() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let raw = parse_wire_response(body).unwrap();
        assert_eq!(raw.text, "hi");
        assert_eq!(raw.usage, Some(Usage { prompt_units: 3, completion_units: 1 }));
    }

    #[test]
    fn rejects_missing_content() {
        assert!(matches!(parse_wire_response(r#"{"choices":[]}"#), Err(TransportError::Malformed(_))));
        assert!(matches!(parse_wire_response("not json"), Err(TransportError::Malformed(_))));
    }
}
