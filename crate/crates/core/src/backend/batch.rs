//! OpenAI Batch API request and result files (JSON lines).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{completion_body, parse_completion, ChatBackend, ChatRequest, ChatResponse};

pub const BATCH_URL: &str = "/v1/chat/completions";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate custom_id {id:?}")]
    DuplicateCustomId { line: usize, id: String },
    #[error("duplicate request id {0:?}")]
    DuplicateRequestId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequestLine {
    pub custom_id: String,
    pub method: String,
    pub url: String,
    pub body: Value,
}

impl BatchRequestLine {
    pub fn from_request(req: &ChatRequest) -> Self {
        Self {
            custom_id: req.request_id.clone(),
            method: "POST".into(),
            url: BATCH_URL.into(),
            body: req.to_wire_body(),
        }
    }
}

pub fn emit_batch<W: Write>(reqs: &[ChatRequest], mut out: W) -> Result<(), BatchError> {
    let mut seen = HashSet::new();
    for r in reqs {
        if !seen.insert(r.request_id.as_str()) {
            return Err(BatchError::DuplicateRequestId(r.request_id.clone()));
        }
    }
    for r in reqs {
        serde_json::to_writer(&mut out, &BatchRequestLine::from_request(r))
            .map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn nonblank_lines<R: BufRead>(
    input: R,
) -> impl Iterator<Item = Result<(usize, String), BatchError>> {
    input
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(BatchError::from))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

pub fn read_batch_requests<R: BufRead>(input: R) -> Result<Vec<ChatRequest>, BatchError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for item in nonblank_lines(input) {
        let (line, text) = item?;
        let parsed: BatchRequestLine =
            serde_json::from_str(&text).map_err(|e| BatchError::Malformed {
                line,
                message: e.to_string(),
            })?;
        if !seen.insert(parsed.custom_id.clone()) {
            return Err(BatchError::DuplicateCustomId {
                line,
                id: parsed.custom_id,
            });
        }
        let req = ChatRequest::from_wire_body(&parsed.custom_id, &parsed.body).map_err(|e| {
            BatchError::Malformed {
                line,
                message: e.to_string(),
            }
        })?;
        out.push(req);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchIngest {
    pub responses: BTreeMap<String, ChatResponse>,
    /// Ids whose result line carried an error, with its message.
    pub failed: BTreeMap<String, String>,
    /// Expected ids with no result line.
    pub missing: BTreeSet<String>,
    /// Result ids that were not expected.
    pub unexpected: BTreeSet<String>,
}

fn error_message(v: &Value) -> String {
    v.get("message")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| v.to_string())
}

/// Parses a batch output file. When `expected` is given, absent ids are
/// reported in `missing` and unknown ones in `unexpected`.
pub fn ingest_batch_results<R: BufRead>(
    input: R,
    expected: Option<&[String]>,
) -> Result<BatchIngest, BatchError> {
    let mut out = BatchIngest::default();
    let mut seen = HashSet::new();
    for item in nonblank_lines(input) {
        let (line, text) = item?;
        let malformed = |message: String| BatchError::Malformed { line, message };
        let v: Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        let id = v
            .get("custom_id")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing custom_id".into()))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(BatchError::DuplicateCustomId { line, id });
        }
        let error = v.get("error").filter(|e| !e.is_null());
        let response = v.get("response").filter(|r| !r.is_null());
        match (error, response) {
            (Some(e), _) => {
                out.failed.insert(id, error_message(e));
            }
            (None, Some(r)) => {
                let status = r
                    .get("status_code")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| malformed("response without status_code".into()))?;
                let body = r
                    .get("body")
                    .ok_or_else(|| malformed("response without body".into()))?;
                if !(200..300).contains(&status) {
                    let msg = body
                        .get("error")
                        .map(error_message)
                        .unwrap_or_else(|| body.to_string());
                    out.failed.insert(id, format!("HTTP {status}: {msg}"));
                    continue;
                }
                match parse_completion(&id, body) {
                    Ok(resp) => {
                        out.responses.insert(id, resp);
                    }
                    Err(e) => {
                        out.failed.insert(id, e.to_string());
                    }
                }
            }
            (None, None) => return Err(malformed("neither response nor error".into())),
        }
    }
    if let Some(expected) = expected {
        let expected: BTreeSet<&String> = expected.iter().collect();
        for id in &expected {
            if !seen.contains(*id) {
                out.missing.insert((*id).clone());
            }
        }
        for id in seen {
            if !expected.contains(&id) {
                out.unexpected.insert(id);
            }
        }
    }
    Ok(out)
}

/// Executes a request file against `backend`, writing a result file in the
/// provider's batch output format. Returns the number of failed requests.
pub fn run_batch<B: ChatBackend, R: BufRead, W: Write>(
    backend: &B,
    requests: R,
    mut out: W,
) -> Result<usize, BatchError> {
    let reqs = read_batch_requests(requests)?;
    let mut failures = 0;
    for (i, req) in reqs.iter().enumerate() {
        let line = match backend.send(req) {
            Ok(resp) => json!({
                "id": format!("batch_req_{i}"),
                "custom_id": req.request_id,
                "response": {"status_code": 200, "body": completion_body(&req.model, &resp)},
                "error": null
            }),
            Err(e) => {
                failures += 1;
                json!({
                    "id": format!("batch_req_{i}"),
                    "custom_id": req.request_id,
                    "response": null,
                    "error": {"code": e.reason(), "message": e.to_string()}
                })
            }
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(failures)
}
