//! Agent-card discovery endpoints.
//!
//! `GET /.well-known/agent-card.json` serves the default card and
//! `GET /agents/{name}/.well-known/agent-card.json` a named one.

use std::sync::Arc;

use lineage_core::AgentCard;
use tiny_http::Method;

use super::{spawn, Call, Reply, ServiceHandle};

pub const WELL_KNOWN: &str = ".well-known/agent-card.json";

/// Resolves card routes; `None` when the path is not a card path.
pub fn route(call: &Call, lookup: impl Fn(Option<&str>) -> Option<AgentCard>) -> Option<Reply> {
    let name = match call.segments.as_slice() {
        [".well-known", "agent-card.json"] => None,
        ["agents", name, ".well-known", "agent-card.json"] => Some(*name),
        _ => return None,
    };
    if *call.method != Method::Get {
        return Some(Reply::error(405, "method_not_allowed", "cards are read-only"));
    }
    Some(lookup(name).map_or_else(Reply::not_found, |c| Reply::ok(&c)))
}

/// Serves a fixed set of cards; the first is the default.
pub fn serve(cards: Vec<AgentCard>, listen: &str) -> std::io::Result<ServiceHandle> {
    let cards = Arc::new(cards);
    spawn(
        listen,
        2,
        Arc::new(move |call: &Call| {
            route(call, |name| match name {
                None => cards.first().cloned(),
                Some(n) => cards.iter().find(|c| c.name == n).cloned(),
            })
            .unwrap_or_else(Reply::not_found)
        }),
    )
}
