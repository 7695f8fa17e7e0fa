//! HTTP surface of the lineage store.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/log/entries` | submit a signed event |
//! | GET | `/log/sth` | latest tree head |
//! | GET | `/log/sth/{size}` | tree head at a size |
//! | GET | `/log/entries?start=&end=` | records in `[start, end)` |
//! | GET | `/log/info` | log id, public key, size |
//! | GET | `/.well-known/agent-card.json`, `/agents/{name}/.well-known/agent-card.json` | registered cards |

use std::sync::Arc;

use lineage_core::{LineageEvent, LogId, PublicKey, SignedTreeHead, TreeSize};
use serde::{Deserialize, Serialize};
use tiny_http::Method;

use super::{cards, spawn, Call, Reply, ServiceHandle};
use crate::store::{LineageStore, StoreError, SubmitError};

/// Upper bound on records per entries request.
pub const MAX_ENTRIES: u64 = 4096;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub leaf_index: u64,
    pub sth: SignedTreeHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogInfo {
    pub log_id: LogId,
    pub public_key: PublicKey,
    pub tree_size: TreeSize,
}

pub fn serve(store: Arc<LineageStore>, listen: &str) -> std::io::Result<ServiceHandle> {
    spawn(listen, 8, Arc::new(move |call: &Call| handle(&store, call)))
}

pub fn handle(store: &LineageStore, call: &Call) -> Reply {
    if let Some(reply) = cards::route(call, |name| match name {
        None => store.cards().into_iter().next(),
        Some(n) => store.card_by_name(n),
    }) {
        return reply;
    }
    match (call.method, call.segments.as_slice()) {
        (Method::Post, ["log", "entries"]) => submit(store, call.body),
        (Method::Get, ["log", "sth"]) => Reply::ok(&store.latest_sth()),
        (Method::Get, ["log", "sth", size]) => match size.parse::<u64>() {
            Ok(size) => store.sth_at(size).map_or_else(store_error, |s| Reply::ok(&s)),
            Err(_) => Reply::error(400, "bad_request", "size must be an unsigned integer"),
        },
        (Method::Get, ["log", "entries"]) => {
            let (start, end) = match (call.query_u64("start"), call.query_u64("end")) {
                (Ok(s), Ok(e)) => (s, e),
                (Err(r), _) | (_, Err(r)) => return r,
            };
            if end.saturating_sub(start) > MAX_ENTRIES {
                return Reply::error(400, "range", format!("at most {MAX_ENTRIES} entries per request"));
            }
            store.get_entries(start, end).map_or_else(store_error, |r| Reply::ok(&r))
        }
        (Method::Get, ["log", "info"]) => {
            Reply::ok(&LogInfo { log_id: store.log_id(), public_key: store.public_key(), tree_size: store.size() })
        }
        _ => Reply::not_found(),
    }
}

fn submit(store: &LineageStore, body: &[u8]) -> Reply {
    let event: LineageEvent = match serde_json::from_slice(body) {
        Ok(e) => e,
        Err(e) => return Reply::error(400, "malformed", e.to_string()),
    };
    match store.submit_event(event) {
        Ok((leaf_index, sth)) => Reply::ok(&SubmitResponse { leaf_index, sth }),
        Err(SubmitError::Io(e)) => Reply::error(500, "storage", e.to_string()),
        Err(e) => Reply::error(422, e.code(), e.to_string()),
    }
}

fn store_error(e: StoreError) -> Reply {
    match e {
        StoreError::Range { .. } => Reply::error(400, "range", e.to_string()),
        _ => Reply::error(500, "storage", e.to_string()),
    }
}
