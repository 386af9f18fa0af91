//! Automated rubric coding of video moments through any chat-completion
//! endpoint.
//!
//! A [`CodingRequest`] carries the payloads the requested features need;
//! [`build_prompt`] turns it into a deterministic chat payload and
//! [`code_moment`] sends it, validates the strict JSON reply and asks for a
//! correction on invalid replies. Every exchange is kept for the audit log.

mod client;
mod prompt;

pub use client::{ChatBackend, EndpointConfig, HttpBackend, TransportError};
pub use prompt::{
    build_prompt, correction_message, instructions, parse_reply, ChatMessage, ChatPayload, CodingRequest, ContentPart,
    FrameImage, FrameRef, ImageUrl, PromptOptions, ResponseFormat,
};

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use vidpeak_core::ctml::{agreement, AgreementReport, Coder, CtmlError, CtmlRecord, Feature};

#[derive(Debug, Error)]
pub enum CoderError {
    #[error("payload missing for feature {0}")]
    IncompletePayload(String),
    #[error("coding ({video_id}, {t}) failed after {} replies: {last_problem}", transcript.len())]
    CodingFailed {
        video_id: String,
        t: i64,
        last_problem: String,
        /// Raw replies in order.
        transcript: Vec<String>,
    },
    #[error("({video_id}, {t}): {error}")]
    Transport { video_id: String, t: i64, error: TransportError },
    #[error("environment variable {0} with the endpoint token is not set")]
    MissingToken(String),
    #[error("endpoint config: {0}")]
    Config(String),
    #[error(transparent)]
    Ctml(#[from] CtmlError),
}

/// Digest of one exchange, written as one line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub video_id: String,
    pub t: i64,
    pub attempt: u32,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub request_sha256: String,
    pub response_sha256: String,
    pub response: String,
    pub accepted: bool,
    pub problem: Option<String>,
}

/// Machine coding of one moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineCoding {
    pub video_id: String,
    pub t: i64,
    pub values: BTreeMap<Feature, u8>,
    pub audit: Vec<AuditEntry>,
}

impl MachineCoding {
    /// The full-rubric record; fails when only a subset was coded.
    pub fn record(&self) -> Result<CtmlRecord, CoderError> {
        let pairs = self.values.iter().map(|(f, v)| (f.key().to_string(), i64::from(*v)));
        Ok(CtmlRecord::from_pairs(&self.video_id, self.t, Coder::Machine, pairs)?)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Codes one moment, retrying with an explanation of the problem after an
/// invalid reply, up to `retry_budget` follow-ups.
pub fn code_moment(
    backend: &dyn ChatBackend,
    request: &CodingRequest,
    options: &PromptOptions,
    retry_budget: u32,
) -> Result<MachineCoding, CoderError> {
    let features = request.requested();
    let mut payload = build_prompt(request, options)?;
    let mut audit = Vec::new();
    let mut transcript = Vec::new();
    let mut last_problem = String::new();
    for attempt in 0..=retry_budget {
        let body = serde_json::to_vec(&payload).expect("payload serializes");
        let reply = backend.complete(&payload).map_err(|error| CoderError::Transport {
            video_id: request.video_id.clone(),
            t: request.t,
            error,
        })?;
        let parsed = parse_reply(&reply, &features);
        audit.push(AuditEntry {
            video_id: request.video_id.clone(),
            t: request.t,
            attempt,
            model: payload.model.clone(),
            temperature: payload.temperature,
            seed: payload.seed,
            request_sha256: sha256_hex(&body),
            response_sha256: sha256_hex(reply.as_bytes()),
            response: reply.clone(),
            accepted: parsed.is_ok(),
            problem: parsed.as_ref().err().cloned(),
        });
        transcript.push(reply.clone());
        match parsed {
            Ok(values) => {
                return Ok(MachineCoding {
                    video_id: request.video_id.clone(),
                    t: request.t,
                    values,
                    audit,
                })
            }
            Err(problem) => {
                payload.messages.push(ChatMessage::text("assistant", reply));
                payload.messages.push(ChatMessage::text("user", correction_message(&problem)));
                last_problem = problem;
            }
        }
    }
    Err(CoderError::CodingFailed {
        video_id: request.video_id.clone(),
        t: request.t,
        last_problem,
        transcript,
    })
}

/// Codes every request with at most `max_concurrent` in flight. Results
/// come back in input order.
pub fn code_batch(
    backend: &dyn ChatBackend,
    requests: &[CodingRequest],
    options: &PromptOptions,
    retry_budget: u32,
    max_concurrent: usize,
) -> Vec<Result<MachineCoding, CoderError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<MachineCoding, CoderError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    let workers = max_concurrent.clamp(1, requests.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let r = code_moment(backend, req, options, retry_budget);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every request is coded"))
        .collect()
}

/// Appends the audit entries of codings as JSON lines.
pub fn write_audit<W: Write>(codings: &[&MachineCoding], mut out: W) -> io::Result<()> {
    for c in codings {
        for e in &c.audit {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Per-feature agreement of machine records with adjudicated ones.
pub fn agreement_vs_humans(machine: &[CtmlRecord], adjudicated: &[CtmlRecord]) -> Result<Vec<AgreementReport>, CoderError> {
    let m: Vec<CtmlRecord> = machine.iter().filter(|r| r.coder == Coder::Machine).cloned().collect();
    let a: Vec<CtmlRecord> = adjudicated.iter().filter(|r| r.coder == Coder::Adjudicated).cloned().collect();
    Ok(agreement(&m, &a)?)
}
