use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct UsageTotals {
    pub requests: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

/// Thread-safe log of successful requests and their token usage.
#[derive(Debug, Default)]
pub struct UsageLedger {
    records: Mutex<Vec<UsageRecord>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<UsageRecord>) -> Self {
        Self {
            records: Mutex::new(records),
        }
    }

    pub fn record(&self, rec: UsageRecord) {
        self.records.lock().expect("ledger lock").push(rec);
    }

    /// Snapshot sorted by request id so output does not depend on scheduling.
    pub fn records(&self) -> Vec<UsageRecord> {
        let mut out = self.records.lock().expect("ledger lock").clone();
        out.sort_by(|a, b| a.request_id.cmp(&b.request_id));
        out
    }

    pub fn totals(&self) -> UsageTotals {
        totals(&self.records.lock().expect("ledger lock"))
    }

    /// Mean prompt and output tokens per distinct pair id.
    pub fn averages_per_pair(&self) -> Option<(f64, f64)> {
        averages_per_pair(&self.records.lock().expect("ledger lock"))
    }
}

pub fn totals(records: &[UsageRecord]) -> UsageTotals {
    records.iter().fold(UsageTotals::default(), |mut t, r| {
        t.requests += 1;
        t.prompt_tokens += r.prompt_tokens;
        t.output_tokens += r.output_tokens;
        t
    })
}

pub fn averages_per_pair(records: &[UsageRecord]) -> Option<(f64, f64)> {
    let pairs: BTreeSet<&str> = records
        .iter()
        .filter_map(|r| r.pair_id.as_deref())
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let (p, o) = records
        .iter()
        .filter(|r| r.pair_id.is_some())
        .fold((0u64, 0u64), |(p, o), r| {
            (p + r.prompt_tokens, o + r.output_tokens)
        });
    let n = pairs.len() as f64;
    Some((p as f64 / n, o as f64 / n))
}

/// Records every successful response of the wrapped backend.
pub struct MeteredBackend<B> {
    inner: B,
    ledger: Arc<UsageLedger>,
}

impl<B: ChatBackend> MeteredBackend<B> {
    pub fn new(inner: B, ledger: Arc<UsageLedger>) -> Self {
        Self { inner, ledger }
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }
}

impl<B: ChatBackend> ChatBackend for MeteredBackend<B> {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.inner.send(req)?;
        self.ledger.record(UsageRecord {
            request_id: req.request_id.clone(),
            pair_id: req.meta.pair_id.clone(),
            stage: req.meta.stage,
            prompt_tokens: resp.prompt_tokens,
            output_tokens: resp.output_tokens,
        });
        Ok(resp)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}
