//! Canonical lineage events.
//!
//! An event is signed over its canonical encoding with `agent_sig` absent.
//! Its digest, and the Merkle leaf payload, is the canonical encoding with
//! `agent_sig` present.

use alloc::string::String;
use alloc::vec::Vec;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::hash::{sha256, EventDigest, Hash32, LeafHash};
use crate::identity::{derive_agent_id, Role};
use crate::keys::{PublicKey, SignatureString};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineageEvent {
    /// `aid://…` for agents, `hid://<role>` for human approvers.
    pub agent_id: String,
    pub action_id: String,
    /// Unix seconds.
    pub ts: u64,
    pub action_type: String,
    pub context_hash: Hash32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev: Option<EventDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cites: Option<Vec<EventDigest>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_sig: Option<SignatureString>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventError {
    #[error("mandatory field `{0}` is empty")]
    MissingField(&'static str),
    #[error("signer {signer} cannot sign for {claimed}")]
    IdentityBinding { signer: String, claimed: String },
    #[error("event bytes are not valid JSON for a lineage event: {0}")]
    Decode(String),
    #[error("event bytes are not in canonical form")]
    NotCanonical,
}

impl LineageEvent {
    fn check_mandatory(&self) -> Result<(), EventError> {
        if self.agent_id.is_empty() {
            return Err(EventError::MissingField("agent_id"));
        }
        if self.action_id.is_empty() {
            return Err(EventError::MissingField("action_id"));
        }
        if self.action_type.is_empty() {
            return Err(EventError::MissingField("action_type"));
        }
        Ok(())
    }

    fn encode_unchecked(&self) -> Vec<u8> {
        // Only strings, integers and hex digests: never a float.
        to_canonical_vec(self).expect("event fields always encode")
    }

    /// Bytes covered by `agent_sig`: the canonical encoding without it.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut unsigned = self.clone();
        unsigned.agent_sig = None;
        unsigned.encode_unchecked()
    }

    /// Leaf hash under which this event is committed to a log.
    pub fn leaf_hash(&self) -> LeafHash {
        LeafHash::of(&self.encode_unchecked())
    }

    pub fn cites(&self) -> &[EventDigest] {
        self.cites.as_deref().unwrap_or(&[])
    }
}

pub fn canonical_encode(event: &LineageEvent) -> Result<Vec<u8>, EventError> {
    event.check_mandatory()?;
    Ok(event.encode_unchecked())
}

/// Parses event bytes, requiring them to be exactly canonical.
pub fn decode_canonical(bytes: &[u8]) -> Result<LineageEvent, EventError> {
    let event: LineageEvent =
        serde_json::from_slice(bytes).map_err(|e| EventError::Decode(alloc::string::ToString::to_string(&e)))?;
    if canonical_encode(&event)? != bytes {
        return Err(EventError::NotCanonical);
    }
    Ok(event)
}

pub fn event_digest(event: &LineageEvent) -> EventDigest {
    EventDigest(sha256(&event.encode_unchecked()))
}

/// A private key together with the actor id it is entitled to sign for.
#[derive(Clone)]
pub struct Signer {
    actor_id: String,
    key: SigningKey,
}

impl core::fmt::Debug for Signer {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Signer").field("actor_id", &self.actor_id).finish_non_exhaustive()
    }
}

impl Signer {
    pub fn agent(key: SigningKey, domain: &str, issued_at: u64) -> Self {
        let id = derive_agent_id(&PublicKey::from(&key), domain, issued_at);
        Self { actor_id: alloc::string::ToString::to_string(&id), key }
    }

    pub fn human(role: Role, key: SigningKey) -> Self {
        Self { actor_id: role.actor_id(), key }
    }

    pub fn actor_id(&self) -> &str {
        &self.actor_id
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey::from(&self.key)
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.key
    }
}

/// Signs `event`, replacing any existing `agent_sig`.
pub fn sign_event(mut event: LineageEvent, signer: &Signer) -> Result<LineageEvent, EventError> {
    if event.agent_id != signer.actor_id {
        return Err(EventError::IdentityBinding { signer: signer.actor_id.clone(), claimed: event.agent_id });
    }
    event.check_mandatory()?;
    event.agent_sig = None;
    let sig = SignatureString::sign(&signer.key, &event.signing_bytes());
    event.agent_sig = Some(sig);
    Ok(event)
}

pub fn verify_event_sig(event: &LineageEvent, public_key: &PublicKey) -> bool {
    match &event.agent_sig {
        Some(sig) => public_key.verify_str(&event.signing_bytes(), sig.as_str()),
        None => false,
    }
}
