//! Live HTTP backend speaking the OpenAI-compatible chat-completions wire
//! shape. Base URL and model id are fully configurable so any compatible
//! server works. Configured from `KSG_API_BASE` / `KSG_API_KEY` by default.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendReply, CompletionRequest, CompletionResult, GatewayError, TokenUsage};

pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<&str>) -> Result<Self, GatewayError> {
        if base_url.trim().is_empty() {
            return Err(GatewayError::Config("API base URL must be non-empty".to_string()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Config(format!("HTTP client: {e}")))?;
        Ok(HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.map(str::to_string),
            client,
        })
    }

    /// Build from `KSG_API_BASE` and `KSG_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let base = std::env::var("KSG_API_BASE")
            .map_err(|_| GatewayError::Config("KSG_API_BASE is not set".to_string()))?;
        let key = std::env::var("KSG_API_KEY").ok();
        HttpBackend::new(&base, key.as_deref())
    }
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    response_format: Option<WireResponseFormat>,
}

#[derive(Debug, Serialize)]
struct WireResponseFormat {
    #[serde(rename = "type")]
    kind: &'static str,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Debug, Deserialize)]
struct WireResponseMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    total_tokens: u64,
}

pub(crate) fn wire_request_body(request: &CompletionRequest) -> serde_json::Value {
    let wire = WireRequest {
        model: &request.model_id,
        messages: vec![
            WireMessage { role: "system", content: &request.system_prompt },
            WireMessage { role: "user", content: &request.user_prompt },
        ],
        temperature: request.temperature,
        max_tokens: request.max_output_tokens,
        seed: request.seed,
        // Any schema hint requests JSON-object output; the prompt itself
        // carries the exact shape.
        response_format: request
            .response_schema_hint
            .as_ref()
            .map(|_| WireResponseFormat { kind: "json_object" }),
    };
    serde_json::to_value(wire).expect("wire request serialization cannot fail")
}

pub(crate) fn parse_wire_response(
    body: &str,
    request: &CompletionRequest,
    latency_ms: u64,
) -> Result<CompletionResult, GatewayError> {
    let parsed: WireResponse = serde_json::from_str(body).map_err(|e| GatewayError::Transport {
        message: format!("unparseable completion response: {e}"),
        status: None,
        attempts: 1,
    })?;
    let choice = parsed.choices.into_iter().next().ok_or_else(|| GatewayError::Transport {
        message: "completion response has no choices".to_string(),
        status: None,
        attempts: 1,
    })?;
    Ok(CompletionResult {
        raw_text: choice.message.content,
        model_id: request.model_id.clone(),
        latency_ms,
        attempt_count: 1,
        usage: parsed.usage.map(|u| TokenUsage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
            total_tokens: u.total_tokens,
        }),
    })
}

impl Backend for HttpBackend {
    fn execute(&self, request: &CompletionRequest, _fingerprint: &str) -> BackendReply {
        let url = format!("{}/chat/completions", self.base_url);
        let started = Instant::now();
        let mut builder = self.client.post(&url).json(&wire_request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.header("Authorization", format!("Bearer {key}"));
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => {
                let err = if e.is_timeout() {
                    GatewayError::Timeout { message: e.to_string(), attempts: 1 }
                } else {
                    GatewayError::Transport { message: e.to_string(), status: None, attempts: 1 }
                };
                return BackendReply::fresh(Err(err));
            }
        };
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => {
                return BackendReply::fresh(Err(GatewayError::Transport {
                    message: format!("failed to read response body: {e}"),
                    status: Some(status.as_u16()),
                    attempts: 1,
                }))
            }
        };
        if !status.is_success() {
            return BackendReply::fresh(Err(GatewayError::Transport {
                message: format!("HTTP {}: {}", status.as_u16(), body.chars().take(400).collect::<String>()),
                status: Some(status.as_u16()),
                attempts: 1,
            }));
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        BackendReply::fresh(parse_wire_response(&body, request, latency_ms))
    }

    fn is_live(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_request;
    use super::*;

    #[test]
    fn wire_request_has_chat_completions_shape() {
        let mut request = test_request("hello");
        request.response_schema_hint = Some("ksg.stage1.v1".to_string());
        let body = wire_request_body(&request);
        assert_eq!(body["model"], "stub-alpha");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hello");
        assert_eq!(body["response_format"]["type"], "json_object");
        assert_eq!(body["seed"], 0);
    }

    #[test]
    fn wire_response_parses_content_and_usage() {
        let body = r#"{
            "choices": [{"message": {"role": "assistant", "content": "answer"}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5, "total_tokens": 15}
        }"#;
        let result = parse_wire_response(body, &test_request("q"), 7).unwrap();
        assert_eq!(result.raw_text, "answer");
        assert_eq!(result.latency_ms, 7);
        assert_eq!(result.usage.unwrap().total_tokens, 15);
    }

    #[test]
    fn empty_choices_is_transport_error() {
        let body = r#"{"choices": []}"#;
        assert!(matches!(
            parse_wire_response(body, &test_request("q"), 0),
            Err(GatewayError::Transport { .. })
        ));
    }
}
