use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Exponential backoff for HTTP calls: `initial_backoff_ms * 2^n`, capped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 10_000,
            timeout_secs: 60,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

pub(crate) fn agent(policy: &RetryPolicy) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(policy.timeout_secs.max(1))))
        .http_status_as_error(false)
        .build()
        .into()
}

/// POSTs `body` and returns the decoded JSON reply with the number of attempts
/// it took. Transport errors, 429 and 5xx are retried; other statuses are not.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<(Value, u32)> {
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let (retryable, message) = match request.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if (200..300).contains(&status) {
                    return resp
                        .body_mut()
                        .read_json::<Value>()
                        .map(|v| (v, attempts))
                        .map_err(|e| Error::BadResponse {
                            endpoint: url.to_string(),
                            message: e.to_string(),
                        });
                }
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                (status == 429 || status >= 500, format!("HTTP {status}: {text}"))
            }
            Err(e) => (true, e.to_string()),
        };
        if !retryable || attempts > policy.max_retries {
            return Err(Error::Transport {
                endpoint: url.to_string(),
                attempts,
                message,
            });
        }
        log::warn!("{url}: attempt {attempts} failed ({message}), retrying");
        thread::sleep(policy.delay(attempts));
    }
}
