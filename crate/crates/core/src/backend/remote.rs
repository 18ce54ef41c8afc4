use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, EncodeRequest, EncodeResponse, ErrorBody, GenerateRequest, GenerateResponse};
use super::{Backend, BackendError, BackendInfo, Generation};
use crate::types::{EmbeddingMatrix, GenerationRequest};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub max_in_flight: usize,
    pub timeout: Duration,
    /// Additional attempts after a retryable failure.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            timeout: Duration::from_secs(120),
            retries: 2,
            backoff: Duration::from_millis(200),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    slots: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            slots: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut slots = self.slots.lock().expect("gate poisoned");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("gate poisoned");
        }
        *slots -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().expect("gate poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// HTTP client for a backend speaking the wire protocol.
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
    gate: Gate,
    options: RemoteOptions,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>, options: RemoteOptions) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        let agent = ureq::AgentBuilder::new().timeout(options.timeout).build();
        Self {
            base_url,
            agent,
            gate: Gate::new(options.max_in_flight),
            options,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn once(&self, path: &str, body: Option<&str>) -> Result<String, BackendError> {
        let url = self.endpoint(path);
        let _permit = self.gate.acquire();
        let result = match body {
            None => self.agent.get(&url).call(),
            Some(b) => self
                .agent
                .post(&url)
                .set("Content-Type", "application/json")
                .send_string(b),
        };
        match result {
            Ok(resp) => resp.into_string().map_err(|e| BackendError::Transport {
                endpoint: url,
                detail: e.to_string(),
            }),
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(body) => Err(BackendError::Protocol {
                        code: body.error,
                        detail: body.detail,
                    }),
                    Err(_) => Err(BackendError::Transport {
                        endpoint: url,
                        detail: format!("HTTP {status}: {text}"),
                    }),
                }
            }
            Err(e) => Err(BackendError::Transport {
                endpoint: url,
                detail: e.to_string(),
            }),
        }
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&Req>,
    ) -> Result<Resp, BackendError> {
        let body = body.map(|b| serde_json::to_string(b).expect("request serializes"));
        let mut attempt = 0;
        loop {
            match self.once(path, body.as_deref()) {
                Ok(text) => {
                    return serde_json::from_str(&text).map_err(|e| BackendError::Malformed {
                        endpoint: self.endpoint(path),
                        detail: e.to_string(),
                    })
                }
                Err(e) if e.is_retryable() && attempt < self.options.retries => {
                    attempt += 1;
                    warn!("retrying {path} (attempt {attempt}): {e}");
                    std::thread::sleep(self.options.backoff * attempt);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl Backend for RemoteBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.call::<(), _>(wire::INFO_PATH, None)
    }

    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError> {
        let req = EncodeRequest {
            prompt: prompt.to_string(),
        };
        self.call::<_, EncodeResponse>(wire::ENCODE_PATH, Some(&req))?
            .into_matrix()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        let body = GenerateRequest::from(req);
        self.call::<_, GenerateResponse>(wire::GENERATE_PATH, Some(&body))?
            .into_generation(req.noise_seed, &self.endpoint(wire::GENERATE_PATH))
    }
}
