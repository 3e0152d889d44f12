//! Replay backend: answers requests from previously recorded responses,
//! keyed by request fingerprint. A miss is an error, never a fallback to
//! the network.

use std::collections::BTreeMap;

use super::{Backend, BackendReply, CompletionRequest, GatewayError, RecordedOutcome, RunRecord};

pub struct ReplayBackend {
    records: BTreeMap<String, RunRecord>,
}

impl ReplayBackend {
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        let records = records.into_iter().map(|r| (r.request_fingerprint.clone(), r)).collect();
        ReplayBackend { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn execute(&self, _request: &CompletionRequest, fingerprint: &str) -> BackendReply {
        match self.records.get(fingerprint) {
            Some(record) => {
                let result = match &record.outcome {
                    RecordedOutcome::Success(result) => Ok(result.clone()),
                    RecordedOutcome::Failure { kind, message } => Err(GatewayError::RecordedFailure {
                        kind: kind.clone(),
                        message: message.clone(),
                    }),
                };
                BackendReply { result, original_record: Some(record.clone()) }
            }
            None => BackendReply::fresh(Err(GatewayError::ReplayMiss {
                fingerprint: fingerprint.to_string(),
            })),
        }
    }
}
