//! Blocking HTTP clients for the lineage store and the proof server, plus
//! agent-card discovery.

use std::io::Read;
use std::time::Duration;

use lineage_core::{
    AgentCard, ConsistencyPackage, EventDigest, LineageEvent, LogId, MultiproofPackage, ProofPackage, PublicKey,
    SignedTreeHead, TreeSize,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::service::cards::WELL_KNOWN;
use crate::service::ls::{LogInfo, SubmitResponse};
use crate::store::LogRecord;

/// Cap on any response body, cards included.
pub const MAX_RESPONSE: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("server refused ({status}): {body}")]
    Status { status: u16, body: String },
    #[error("response exceeds {0} bytes")]
    TooLarge(usize),
    #[error("unparsable response: {0}")]
    Parse(String),
}

impl ClientError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }

    /// The `error` code from a JSON error body, when there is one.
    pub fn code(&self) -> Option<String> {
        let body = match self {
            ClientError::Status { body, .. } | ClientError::NotFound(body) => body,
            _ => return None,
        };
        serde_json::from_str::<serde_json::Value>(body).ok()?.get("error")?.as_str().map(str::to_owned)
    }
}

#[derive(Clone)]
struct Http {
    base: String,
    agent: ureq::Agent,
}

impl Http {
    fn new(base: &str) -> Self {
        // No pooled connections: a stopped service must look stopped, not
        // leave requests queued on a kept-alive socket nobody reads.
        let agent = ureq::AgentBuilder::new()
            .max_idle_connections(0)
            .timeout_connect(Duration::from_secs(5))
            .timeout_read(Duration::from_secs(30))
            .build();
        Http { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        parse(self.agent.get(&format!("{}{path}", self.base)).call())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let body = serde_json::to_vec(body).expect("request serializes");
        parse(
            self.agent.post(&format!("{}{path}", self.base)).set("Content-Type", "application/json").send_bytes(&body),
        )
    }
}

fn read_capped(resp: ureq::Response) -> Result<Vec<u8>, ClientError> {
    let mut buf = Vec::new();
    resp.into_reader()
        .take(MAX_RESPONSE as u64 + 1)
        .read_to_end(&mut buf)
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    if buf.len() > MAX_RESPONSE {
        return Err(ClientError::TooLarge(MAX_RESPONSE));
    }
    Ok(buf)
}

fn parse<T: DeserializeOwned>(result: Result<ureq::Response, ureq::Error>) -> Result<T, ClientError> {
    match result {
        Ok(resp) => {
            let body = read_capped(resp)?;
            serde_json::from_slice(&body).map_err(|e| ClientError::Parse(e.to_string()))
        }
        Err(ureq::Error::Status(status, resp)) => {
            let body = read_capped(resp).map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default();
            if status == 404 {
                Err(ClientError::NotFound(body))
            } else {
                Err(ClientError::Status { status, body })
            }
        }
        Err(ureq::Error::Transport(t)) => Err(ClientError::Transport(t.to_string())),
    }
}

/// Fetches `{base}/.well-known/agent-card.json`. The card is only parsed;
/// callers still have to verify it.
pub fn fetch_card(base_url: &str) -> Result<AgentCard, ClientError> {
    Http::new(base_url).get(&format!("/{WELL_KNOWN}"))
}

#[derive(Clone)]
pub struct LsClient {
    http: Http,
}

impl LsClient {
    pub fn new(base_url: &str) -> Self {
        LsClient { http: Http::new(base_url) }
    }

    pub fn base_url(&self) -> &str {
        &self.http.base
    }

    pub fn submit(&self, event: &LineageEvent) -> Result<SubmitResponse, ClientError> {
        self.http.post("/log/entries", event)
    }

    pub fn latest_sth(&self) -> Result<SignedTreeHead, ClientError> {
        self.http.get("/log/sth")
    }

    pub fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, ClientError> {
        self.http.get(&format!("/log/sth/{size}"))
    }

    pub fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, ClientError> {
        self.http.get(&format!("/log/entries?start={start}&end={end}"))
    }

    pub fn info(&self) -> Result<LogInfo, ClientError> {
        self.http.get("/log/info")
    }

    pub fn card(&self, name: &str) -> Result<AgentCard, ClientError> {
        self.http.get(&format!("/agents/{name}/{WELL_KNOWN}"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiRequest {
    pub log_id: LogId,
    pub digests: Vec<EventDigest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyResponse {
    pub public_key: PublicKey,
}

#[derive(Clone)]
pub struct PsClient {
    http: Http,
}

impl PsClient {
    pub fn new(base_url: &str) -> Self {
        PsClient { http: Http::new(base_url) }
    }

    pub fn package(&self, digest: &EventDigest) -> Result<ProofPackage, ClientError> {
        self.http.get(&format!("/proof/package/{digest}"))
    }

    pub fn multi(&self, log_id: LogId, digests: Vec<EventDigest>) -> Result<MultiproofPackage, ClientError> {
        self.http.post("/proof/multi", &MultiRequest { log_id, digests })
    }

    pub fn consistency(
        &self,
        log_id: LogId,
        first: TreeSize,
        second: TreeSize,
    ) -> Result<ConsistencyPackage, ClientError> {
        self.http.get(&format!("/proof/consistency?log_id={log_id}&first={first}&second={second}"))
    }

    pub fn key(&self) -> Result<PublicKey, ClientError> {
        self.http.get::<KeyResponse>("/ps/key").map(|k| k.public_key)
    }
}
