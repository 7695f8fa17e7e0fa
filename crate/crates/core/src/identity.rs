//! Agent identities, enhanced agent cards and the human approver registry.
//!
//! An agent id is `aid://` followed by the lowercase hex of
//! `SHA-256(public_key ∥ provider_domain ∥ timestamp)`, where `public_key` is
//! the raw 32-byte Ed25519 key, `provider_domain` is UTF-8 and `timestamp` is
//! the issuance time in unix seconds written as ASCII decimal. There are no
//! separators between the three parts.
//!
//! The card's `identity_proof` signs `agent_id ∥ canonical_json(skills)`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::hash::{parse_hex32, sha256_concat};
use crate::keys::{PublicKey, SignatureString};

pub const AGENT_ID_SCHEME: &str = "aid://";
pub const HUMAN_ID_SCHEME: &str = "hid://";

/// `aid://<hex sha256>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub [u8; 32]);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{AGENT_ID_SCHEME}{}", hex::encode(self.0))
    }
}

impl FromStr for AgentId {
    type Err = crate::hash::DigestParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.strip_prefix(AGENT_ID_SCHEME).ok_or(crate::hash::DigestParseError)?;
        if body.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(crate::hash::DigestParseError);
        }
        parse_hex32(body).map(Self)
    }
}

pub fn derive_agent_id(public_key: &PublicKey, domain: &str, timestamp: u64) -> AgentId {
    derive_agent_id_raw(public_key.as_bytes(), domain, timestamp)
}

/// Same derivation over raw key bytes, which need not be a valid point.
pub fn derive_agent_id_raw(public_key: &[u8; 32], domain: &str, timestamp: u64) -> AgentId {
    let ts = timestamp.to_string();
    AgentId(sha256_concat(&[public_key, domain.as_bytes(), ts.as_bytes()]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provider {
    pub name: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub id: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LineageSupport {
    pub merkle_proof_generation: bool,
    pub dpop_binding: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardIdentity {
    pub agent_id: String,
    pub public_key: String,
    pub identity_proof: String,
    /// Issuance time in unix seconds; the agent id commits to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued_at: Option<u64>,
    pub lineage_support: LineageSupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Capabilities {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub streaming: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub push_notifications: Option<bool>,
}

/// A2A agent card carrying the `identity` extension block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentCard {
    pub protocol_version: String,
    pub name: String,
    pub description: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred_transport: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Capabilities>,
    pub skills: Vec<Skill>,
    pub provider: Provider,
    pub identity: CardIdentity,
}

impl AgentCard {
    pub fn public_key(&self) -> Option<PublicKey> {
        self.identity.public_key.parse().ok()
    }
}

/// Descriptive card fields supplied by the operator at issuance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardTemplate {
    pub protocol_version: String,
    pub name: String,
    pub description: String,
    pub url: String,
    pub provider_name: String,
    pub preferred_transport: Option<String>,
    pub version: Option<String>,
    pub capabilities: Option<Capabilities>,
    pub skills: Vec<Skill>,
    pub lineage_support: LineageSupport,
}

fn proof_message(agent_id: &str, skills: &[Skill]) -> Vec<u8> {
    let mut msg = agent_id.as_bytes().to_vec();
    // Skills hold only strings, so canonical encoding cannot fail.
    msg.extend(to_canonical_vec(skills).expect("skills encode"));
    msg
}

/// Builds and signs a card for `key`, issued by `domain` at `timestamp`.
pub fn issue_card(key: &SigningKey, domain: &str, timestamp: u64, template: CardTemplate) -> AgentCard {
    let pk = PublicKey::from(key);
    let agent_id = derive_agent_id(&pk, domain, timestamp).to_string();
    let proof = SignatureString::sign(key, &proof_message(&agent_id, &template.skills));
    AgentCard {
        protocol_version: template.protocol_version,
        name: template.name,
        description: template.description,
        url: template.url,
        preferred_transport: template.preferred_transport,
        version: template.version,
        capabilities: template.capabilities,
        skills: template.skills,
        provider: Provider { name: template.provider_name, domain: domain.to_string() },
        identity: CardIdentity {
            agent_id,
            public_key: pk.to_string(),
            identity_proof: proof.0,
            issued_at: Some(timestamp),
            lineage_support: template.lineage_support,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardVerdict {
    Ok,
    BadId,
    BadProof,
    Malformed,
}

/// Recomputes the agent id and checks the identity proof.
///
/// The issuance time comes from `expected_timestamp` when given, otherwise
/// from the card's `issued_at`. If both are present they must agree.
pub fn verify_card(card: &AgentCard, expected_timestamp: Option<u64>) -> CardVerdict {
    let Some(pk) = card.public_key() else {
        return CardVerdict::Malformed;
    };
    if card.provider.domain.is_empty() {
        return CardVerdict::Malformed;
    }
    let ts = match (expected_timestamp, card.identity.issued_at) {
        (Some(e), Some(c)) if e != c => return CardVerdict::BadId,
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => return CardVerdict::Malformed,
    };
    let expected = derive_agent_id(&pk, &card.provider.domain, ts).to_string();
    if card.identity.agent_id != expected {
        return CardVerdict::BadId;
    }
    let Ok(sig) = crate::keys::parse_signature(&card.identity.identity_proof) else {
        return CardVerdict::Malformed;
    };
    if pk.verify(&proof_message(&card.identity.agent_id, &card.skills), &sig) {
        CardVerdict::Ok
    } else {
        CardVerdict::BadProof
    }
}

/// Human approver roles in an authorization workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Authorizing official.
    #[serde(rename = "AO")]
    Ao,
    /// Compliance lead.
    #[serde(rename = "CL")]
    Cl,
    /// Security officer.
    #[serde(rename = "SO")]
    So,
    /// Third-party assessment organization.
    #[serde(rename = "3PAO")]
    ThreePao,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Ao, Role::Cl, Role::So, Role::ThreePao];

    pub fn label(self) -> &'static str {
        match self {
            Role::Ao => "AO",
            Role::Cl => "CL",
            Role::So => "SO",
            Role::ThreePao => "3PAO",
        }
    }

    /// Actor id used in events signed by this role: `hid://<label>`.
    pub fn actor_id(self) -> String {
        alloc::format!("{HUMAN_ID_SCHEME}{}", self.label())
    }

    pub fn from_actor_id(id: &str) -> Option<Role> {
        let label = id.strip_prefix(HUMAN_ID_SCHEME)?;
        Role::ALL.into_iter().find(|r| r.label() == label)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Signed mapping from human roles to their public keys for one workflow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanRegistry {
    pub workflow: String,
    pub entries: BTreeMap<Role, PublicKey>,
    pub authority: PublicKey,
    pub signature: SignatureString,
}

#[derive(Serialize)]
struct RegistryBody<'a> {
    workflow: &'a str,
    entries: &'a BTreeMap<Role, PublicKey>,
    authority: &'a PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("public key registered for more than one role")]
    DuplicateKey,
}

impl HumanRegistry {
    pub fn sign(
        workflow: &str,
        entries: BTreeMap<Role, PublicKey>,
        authority_key: &SigningKey,
    ) -> Result<Self, RegistryError> {
        let distinct: BTreeSet<[u8; 32]> = entries.values().map(|k| *k.as_bytes()).collect();
        if distinct.len() != entries.len() {
            return Err(RegistryError::DuplicateKey);
        }
        let authority = PublicKey::from(authority_key);
        let body = RegistryBody { workflow, entries: &entries, authority: &authority };
        let signature = SignatureString::sign(authority_key, &to_canonical_vec(&body).expect("registry encodes"));
        Ok(Self { workflow: workflow.to_string(), entries, authority, signature })
    }

    /// True iff the registry is signed by `trusted_authority` and maps each
    /// key to at most one role.
    pub fn verify(&self, trusted_authority: &PublicKey) -> bool {
        if self.authority != *trusted_authority {
            return false;
        }
        let distinct: BTreeSet<[u8; 32]> = self.entries.values().map(|k| *k.as_bytes()).collect();
        if distinct.len() != self.entries.len() {
            return false;
        }
        let body = RegistryBody { workflow: &self.workflow, entries: &self.entries, authority: &self.authority };
        match to_canonical_vec(&body) {
            Ok(msg) => self.authority.verify_str(&msg, self.signature.as_str()),
            Err(_) => false,
        }
    }

    pub fn key_for(&self, role: Role) -> Option<&PublicKey> {
        self.entries.get(&role)
    }
}
