//! Chat transcripts and a blocking chat-completion client.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::{self, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// `POST {"model", "messages", "temperature"}`; the reply text is
/// `choices[0].message.content`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatEndpoint {
    pub url: String,
    pub model: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl Default for ChatEndpoint {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            api_key_env: "CHAT_API_KEY".into(),
            temperature: 1.0,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    endpoint: ChatEndpoint,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl ChatClient {
    pub fn new(endpoint: ChatEndpoint) -> Self {
        let agent = http::agent(&endpoint.retry);
        let api_key = std::env::var(&endpoint.api_key_env).ok().filter(|k| !k.is_empty());
        Self { endpoint, agent, api_key }
    }

    pub fn endpoint(&self) -> &ChatEndpoint {
        &self.endpoint
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        self.complete_with_temperature(messages, self.endpoint.temperature)
    }

    pub fn complete_with_temperature(&self, messages: &[ChatMessage], temperature: f64) -> Result<String> {
        let body = json!({
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": temperature,
        });
        let (reply, _) = http::post_json(
            &self.agent,
            &self.endpoint.url,
            self.api_key.as_deref(),
            &body,
            &self.endpoint.retry,
        )?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::BadResponse {
                endpoint: self.endpoint.url.clone(),
                message: "missing choices[0].message.content".into(),
            })
    }
}
