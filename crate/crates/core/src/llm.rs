//! Completion clients: a live HTTP endpoint and a deterministic mock that
//! replays a recorded transcript.
//!
//! The wire protocol is a plain completions POST: JSON body
//! `{model, prompt, max_tokens, temperature: 0}`, first completion text
//! consumed. The API key is read from an environment variable named in the
//! settings, never stored in config files.
//!
//! Transcript fixtures are JSON lines of `{"prompt_hash": ..., "completion":
//! ...}` keyed by the SHA-256 of the exact prompt, so replay order does not
//! matter and concurrent use is safe.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("api key environment variable `{var}` is not set")]
    MissingApiKey { var: String },
    #[error("http request failed: {0}")]
    Http(Box<ureq::Error>),
    #[error("malformed completion response: {reason}")]
    MalformedResponse { reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: bad transcript entry: {reason}")]
    BadTranscript {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("no transcript entry for prompt hash {hash}")]
    UnknownPrompt { hash: String },
}

impl From<ureq::Error> for LlmError {
    fn from(e: ureq::Error) -> Self {
        Self::Http(Box::new(e))
    }
}

/// Anything that can complete a prompt. Implementations must be safe to
/// share across threads.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// SHA-256 of the exact prompt string, hex-encoded. Keys transcript entries.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_hash: String,
    pub completion: String,
}

/// Replays a recorded transcript; unknown prompts are hard errors.
#[derive(Debug, Clone, Default)]
pub struct MockLlmClient {
    completions: HashMap<String, String>,
}

impl MockLlmClient {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LlmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut completions = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| LlmError::BadTranscript {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
            completions.insert(entry.prompt_hash, entry.completion);
        }
        Ok(Self { completions })
    }

    /// Build from (prompt, completion) pairs, hashing the prompts.
    pub fn from_pairs<I, P, C>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (P, C)>,
        P: AsRef<str>,
        C: Into<String>,
    {
        let completions = pairs
            .into_iter()
            .map(|(prompt, completion)| (prompt_hash(prompt.as_ref()), completion.into()))
            .collect();
        Self { completions }
    }

    pub fn write_transcript(&self, path: impl AsRef<Path>) -> Result<(), LlmError> {
        let path = path.as_ref();
        let mut entries: Vec<(&String, &String)> = self.completions.iter().collect();
        entries.sort();
        let mut out = String::new();
        for (hash, completion) in entries {
            let entry = TranscriptEntry {
                prompt_hash: hash.clone(),
                completion: completion.clone(),
            };
            out.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| LlmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }
}

impl LlmClient for MockLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let hash = prompt_hash(prompt);
        self.completions
            .get(&hash)
            .cloned()
            .ok_or(LlmError::UnknownPrompt { hash })
    }
}

/// Connection settings for the live client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSettings {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_tokens: u32,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/completions".to_string(),
            model: "gpt-3.5-turbo-instruct".to_string(),
            api_key_env: "ENTINT_API_KEY".to_string(),
            max_tokens: 64,
            timeout_secs: 30,
        }
    }
}

pub struct HttpLlmClient {
    settings: LlmSettings,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpLlmClient {
    pub fn new(settings: LlmSettings) -> Result<Self, LlmError> {
        let api_key =
            std::env::var(&settings.api_key_env).map_err(|_| LlmError::MissingApiKey {
                var: settings.api_key_env.clone(),
            })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            settings,
            api_key,
            agent,
        })
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.settings.model,
            "prompt": prompt,
            "max_tokens": self.settings.max_tokens,
            "temperature": 0,
        });
        let mut response = self
            .agent
            .post(&self.settings.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send_json(&body)?;
        let value: serde_json::Value = response.body_mut().read_json().map_err(|e| {
            LlmError::MalformedResponse {
                reason: e.to_string(),
            }
        })?;
        value["choices"][0]["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::MalformedResponse {
                reason: "missing choices[0].text".to_string(),
            })
    }
}
