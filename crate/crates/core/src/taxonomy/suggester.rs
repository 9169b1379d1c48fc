use std::io::Write;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde_json::json;

use crate::error::BackendError;
use crate::util::normalize_name;

/// Request sent to the negative suggester, with `{COUNT}` and `{CATEGORY}`
/// slots.
pub const NEGATIVE_REQUEST_TEMPLATE: &str = "Provide a diverse list of exactly {COUNT} object categories that are semantically similar to {CATEGORY} and are very likely to appear in the same everyday environment. The items should be familiar categories that are either visually similar or from a closely related taxonomy. Only provide the list and nothing else.";

pub fn negative_request(count: usize, category: &str) -> String {
    NEGATIVE_REQUEST_TEMPLATE
        .replace("{COUNT}", &count.to_string())
        .replace("{CATEGORY}", category)
}

/// A service that answers a filled [`NEGATIVE_REQUEST_TEMPLATE`] with a
/// newline- or comma-separated list of category names.
pub trait NegativeSuggester: Send + Sync {
    fn suggest(&self, request: &str) -> Result<String, BackendError>;
}

/// Permissive list parser. Accepts one item per line (with optional bullets
/// or numbering) or a single comma-separated line.
pub fn parse_suggestions(reply: &str) -> Vec<String> {
    let lines: Vec<&str> = reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let items: Vec<&str> = if lines.len() == 1 {
        lines[0].split([',', ';']).collect()
    } else {
        lines
    };
    items
        .into_iter()
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .collect()
}

fn clean_item(raw: &str) -> String {
    let mut s = raw.trim();
    s = s.trim_start_matches(['-', '*', '•', '·']).trim_start();
    // "1." / "2)" numbering
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            s = r.trim_start();
        }
    }
    s = s.trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '*');
    s = s.trim_end_matches(['.', ',', ';']);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deterministic in-process suggester answering from a fixed table, keyed by
/// category name. Used for tests and offline runs.
#[derive(Debug, Clone, Default)]
pub struct StaticSuggester {
    table: Vec<(String, Vec<String>)>,
}

impl StaticSuggester {
    pub fn new<I, K, V, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            table: entries
                .into_iter()
                .map(|(k, v)| (k.into(), v.into_iter().map(Into::into).collect()))
                .collect(),
        }
    }
}

impl NegativeSuggester for StaticSuggester {
    fn suggest(&self, request: &str) -> Result<String, BackendError> {
        // The category is whichever table key the request mentions; longest
        // key wins so "Canada Goose" beats "Goose".
        let req = normalize_name(request);
        self.table
            .iter()
            .filter(|(k, _)| req.contains(&normalize_name(k)))
            .max_by_key(|(k, _)| k.len())
            .map(|(_, v)| v.join("\n"))
            .ok_or_else(|| BackendError::failed("static-suggester", "no entry for request"))
    }
}

/// Runs an external program per request: the request goes to stdin, the list
/// is read from stdout.
#[derive(Debug, Clone)]
pub struct CommandSuggester {
    pub program: String,
    pub args: Vec<String>,
}

impl NegativeSuggester for CommandSuggester {
    fn suggest(&self, request: &str) -> Result<String, BackendError> {
        let name = "command-suggester";
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::transport(name, format!("{}: {e}", self.program)))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(request.as_bytes())
            .map_err(|e| BackendError::transport(name, e))?;
        let out = child
            .wait_with_output()
            .map_err(|e| BackendError::transport(name, e))?;
        if !out.status.success() {
            return Err(BackendError::failed(
                name,
                format!(
                    "exited with {}: {}",
                    out.status,
                    String::from_utf8_lossy(&out.stderr).trim()
                ),
            ));
        }
        String::from_utf8(out.stdout).map_err(|e| BackendError::failed(name, e))
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
#[derive(Clone)]
pub struct HttpSuggester {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

// Hand-written so the key never reaches logs.
impl std::fmt::Debug for HttpSuggester {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpSuggester")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl HttpSuggester {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key,
            model: model.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl NegativeSuggester for HttpSuggester {
    fn suggest(&self, request: &str) -> Result<String, BackendError> {
        let name = "http-suggester";
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(true)
            .build()
            .new_agent();
        let mut req = agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request}],
        });
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                BackendError::transport(name, format!("HTTP {code}"))
            }
            ureq::Error::StatusCode(code) => BackendError::failed(name, format!("HTTP {code}")),
            other => BackendError::transport(name, other),
        })?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::failed(name, e))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::failed(name, "response has no message content"))
    }
}
