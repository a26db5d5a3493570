use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde_json::Value;

use super::{parse_completion, BackendError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    /// Retries after the first attempt for 429, 5xx and transport errors.
    pub max_retries: u32,
    pub concurrency: usize,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 4,
            concurrency: 4,
            backoff_base: Duration::from_secs(1),
            timeout: Duration::from_secs(300),
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
    gate: Semaphore,
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable.
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&cfg.api_key_env)
            .map_err(|_| BackendError::MissingApiKey(cfg.api_key_env.clone()))?;
        Ok(Self::with_key(cfg, key))
    }

    pub fn with_key(cfg: HttpConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .new_agent();
        let gate = Semaphore::new(cfg.concurrency);
        Self {
            cfg,
            api_key,
            agent,
            gate,
        }
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        )
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let jitter = rand::rng().random_range(0.8..=1.2);
        self.cfg
            .backoff_base
            .mul_f64(2f64.powi(attempt as i32) * jitter)
    }
}

enum Outcome {
    Done(Result<ChatResponse, BackendError>),
    Retry { status: Option<u16>, detail: String },
}

impl HttpBackend {
    fn attempt(&self, req: &ChatRequest, body: &[u8]) -> Outcome {
        let result = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(e) => {
                return Outcome::Retry {
                    status: None,
                    detail: e.to_string(),
                }
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Outcome::Retry {
                    status: None,
                    detail: e.to_string(),
                }
            }
        };
        match status {
            200..=299 => Outcome::Done(
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| BackendError::Decode(e.to_string()))
                    .and_then(|v| parse_completion(&req.request_id, &v)),
            ),
            429 | 500..=599 => Outcome::Retry {
                status: Some(status),
                detail: text,
            },
            _ => Outcome::Done(Err(BackendError::Http { status, body: text })),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let body = serde_json::to_vec(&req.to_wire_body())
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let _permit = self.gate.acquire();
        let mut attempt = 0;
        loop {
            match self.attempt(req, &body) {
                Outcome::Done(r) => return r,
                Outcome::Retry { status, detail } => {
                    if attempt >= self.cfg.max_retries {
                        return Err(match status {
                            Some(status) => BackendError::RetriesExhausted {
                                status,
                                attempts: attempt + 1,
                                body: detail,
                            },
                            None => BackendError::Network(detail),
                        });
                    }
                    thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.concurrency.max(1)
    }
}
