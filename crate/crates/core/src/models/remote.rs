//! Client for a suspect model behind an HTTP endpoint.
//!
//! Wire protocol: `POST endpoint` with `{"context": [ids], "n": 1}`; the
//! reply is `{"token": id, "logits": [..]}` where `logits` is optional. A
//! provider that never returns logits only supports closed-model detection.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("request rejected (HTTP {0})")]
    Status(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    /// Next-token distributions are returned.
    Open,
    /// Only sampled tokens are returned.
    Closed,
}

#[derive(Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub credentials: Option<String>,
    pub vocab_size: usize,
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, vocab_size: usize) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            credentials: None,
            vocab_size,
            max_attempts: 5,
            base_delay: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
            max_in_flight: 8,
        }
    }
}

impl fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("endpoint", &self.endpoint)
            .field("credentials", &self.credentials.as_ref().map(|_| "<redacted>"))
            .field("vocab_size", &self.vocab_size)
            .field("max_attempts", &self.max_attempts)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteStep {
    pub token: TokenId,
    pub logits: Option<Vec<f64>>,
}

impl RemoteStep {
    pub fn capability(&self) -> Capability {
        if self.logits.is_some() {
            Capability::Open
        } else {
            Capability::Closed
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    context: &'a [TokenId],
    n: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    token: i64,
    #[serde(default)]
    logits: Option<Vec<f64>>,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fail(RemoteError),
}

pub struct RemoteClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    slots: Semaphore,
}

/// A completion that stopped early, with the tokens received so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCompletion {
    pub tokens: Vec<TokenId>,
    pub error: RemoteError,
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteClient {
            slots: Semaphore {
                free: Mutex::new(cfg.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            cfg,
            agent,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn attempt(&self, context: &[TokenId]) -> Result<RemoteStep, Attempt> {
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(c) = &self.cfg.credentials {
            req = req.header("Authorization", &format!("Bearer {c}"));
        }
        let mut resp = req
            .send_json(WireRequest { context, n: 1 })
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(Attempt::Fail(RemoteError::Auth(status))),
            429 | 500..=599 => return Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => return Err(Attempt::Fail(RemoteError::Status(status))),
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        self.parse(&body).map_err(Attempt::Fail)
    }

    fn parse(&self, body: &str) -> Result<RemoteStep, RemoteError> {
        let wire: WireResponse =
            serde_json::from_str(body).map_err(|e| RemoteError::Malformed(e.to_string()))?;
        if wire.token < 0 || wire.token as usize >= self.cfg.vocab_size {
            return Err(RemoteError::Malformed(format!(
                "token {} outside the vocabulary of size {}",
                wire.token, self.cfg.vocab_size
            )));
        }
        if let Some(l) = &wire.logits {
            if l.len() != self.cfg.vocab_size {
                return Err(RemoteError::Malformed(format!(
                    "{} logits for a vocabulary of size {}",
                    l.len(),
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(RemoteStep {
            token: wire.token as TokenId,
            logits: wire.logits,
        })
    }

    /// One completion step. Transport failures, 429 and 5xx replies are
    /// retried with exponential backoff up to `max_attempts` in total.
    pub fn next_token(&self, context: &[TokenId]) -> Result<RemoteStep, RemoteError> {
        let _permit = self.slots.acquire();
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                let delay = self.cfg.base_delay.saturating_mul(1 << (i - 1).min(16));
                log::debug!("remote attempt {i} failed ({last}); retrying in {delay:?}");
                std::thread::sleep(delay);
            }
            match self.attempt(context) {
                Ok(step) => return Ok(step),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(RemoteError::Transport {
            attempts,
            message: last,
        })
    }

    /// Greedy readout from the returned logits, if any.
    pub fn predict(&self, context: &[TokenId]) -> Result<Option<TokenId>, RemoteError> {
        let step = self.next_token(context)?;
        Ok(step.logits.map(|l| super::argmax(&l)))
    }

    /// Evaluates `f(0..n)` on at most `max_in_flight` worker threads and
    /// returns the results in index order.
    pub fn run_bounded<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
        let workers = self.cfg.max_in_flight.max(1).min(n);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let r = f(i);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every index is processed"))
            .collect()
    }

    /// Runs `max_tokens` steps after each prompt, prompts in parallel.
    pub fn complete_many(
        &self,
        prompts: &[Vec<TokenId>],
        max_tokens: usize,
    ) -> Vec<Result<Vec<TokenId>, PartialCompletion>> {
        self.run_bounded(prompts.len(), |i| self.complete(&prompts[i], max_tokens))
    }

    pub fn complete(
        &self,
        prompt: &[TokenId],
        max_tokens: usize,
    ) -> Result<Vec<TokenId>, PartialCompletion> {
        let mut ctx = prompt.to_vec();
        for _ in 0..max_tokens {
            match self.next_token(&ctx) {
                Ok(step) => ctx.push(step.token),
                Err(error) => {
                    return Err(PartialCompletion {
                        tokens: ctx.split_off(prompt.len()),
                        error,
                    })
                }
            }
        }
        Ok(ctx.split_off(prompt.len()))
    }
}
