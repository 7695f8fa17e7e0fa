//! HTTP surface of the proof server.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/proof/package/{event_digest}` | audited proof package |
//! | POST | `/proof/multi` | `{log_id, digests[]}` → multiproof package |
//! | GET | `/proof/consistency?log_id=&first=&second=` | consistency package |
//! | GET | `/ps/key` | the server's public key |
//! | GET | `/ps/incidents` | audit incidents recorded so far |

use std::sync::Arc;

use lineage_core::{EventDigest, LogId};
use tiny_http::Method;

use super::{spawn, Call, Reply, ServiceHandle};
use crate::client::{KeyResponse, MultiRequest};
use crate::proof_server::{ProofServer, PsError};

pub fn serve(ps: Arc<ProofServer>, listen: &str) -> std::io::Result<ServiceHandle> {
    spawn(listen, 8, Arc::new(move |call: &Call| handle(&ps, call)))
}

pub fn handle(ps: &ProofServer, call: &Call) -> Reply {
    match (call.method, call.segments.as_slice()) {
        (Method::Get, ["proof", "package", digest]) => match digest.parse::<EventDigest>() {
            Ok(d) => ps.build_proof_package(&d).map_or_else(ps_error, |p| Reply::ok(&p)),
            Err(_) => Reply::error(400, "bad_request", "digest must be 64 lowercase hex characters"),
        },
        (Method::Post, ["proof", "multi"]) => match serde_json::from_slice::<MultiRequest>(call.body) {
            Ok(req) => ps.build_multiproof_package(&req.digests, &req.log_id).map_or_else(ps_error, |p| Reply::ok(&p)),
            Err(e) => Reply::error(400, "bad_request", e.to_string()),
        },
        (Method::Get, ["proof", "consistency"]) => {
            let log_id = match call.query.get("log_id").map(|s| s.parse::<LogId>()) {
                Some(Ok(id)) => id,
                _ => return Reply::error(400, "bad_request", "log_id must be 64 lowercase hex characters"),
            };
            let (first, second) = match (call.query_u64("first"), call.query_u64("second")) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(r), _) | (_, Err(r)) => return r,
            };
            ps.get_consistency(&log_id, first, second).map_or_else(ps_error, |p| Reply::ok(&p))
        }
        (Method::Get, ["ps", "key"]) => Reply::ok(&KeyResponse { public_key: ps.public_key() }),
        (Method::Get, ["ps", "incidents"]) => Reply::ok(&ps.incidents()),
        _ => Reply::not_found(),
    }
}

fn ps_error(e: PsError) -> Reply {
    let message = e.to_string();
    match e {
        PsError::NotFound { missing } => Reply::error_with(404, "not_found", message, missing),
        PsError::UnknownLog(_) => Reply::error(404, "unknown_log", message),
        PsError::AuditFailure(incident) => Reply::error_with(409, "audit_failure", message, incident),
        PsError::Upstream(_) => Reply::error(502, "upstream", message),
        PsError::Range(_) => Reply::error(400, "range", message),
    }
}
