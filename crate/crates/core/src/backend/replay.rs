use std::collections::HashMap;
use std::sync::Mutex;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Answers from stored responses; unknown requests are queued for a later
/// batch and reported as [`BackendError::Pending`].
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, ChatResponse>,
    failed: HashMap<String, String>,
    pending: Mutex<Vec<ChatRequest>>,
}

impl ReplayBackend {
    pub fn new(
        responses: impl IntoIterator<Item = ChatResponse>,
        failed: HashMap<String, String>,
    ) -> Self {
        Self {
            responses: responses
                .into_iter()
                .map(|r| (r.request_id.clone(), r))
                .collect(),
            failed,
            pending: Mutex::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Requests seen without a stored answer, sorted by request id.
    pub fn take_pending(&self) -> Vec<ChatRequest> {
        let mut out = std::mem::take(&mut *self.pending.lock().expect("pending lock"));
        out.sort_by(|a, b| a.request_id.cmp(&b.request_id));
        out
    }
}

impl ChatBackend for ReplayBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if let Some(r) = self.responses.get(&req.request_id) {
            return Ok(r.clone());
        }
        if let Some(msg) = self.failed.get(&req.request_id) {
            return Err(BackendError::BatchFailed {
                id: req.request_id.clone(),
                message: msg.clone(),
            });
        }
        self.pending.lock().expect("pending lock").push(req.clone());
        Err(BackendError::Pending(req.request_id.clone()))
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}
