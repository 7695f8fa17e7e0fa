//! Call-chain verification.
//!
//! Starting from a head event, the verifier follows `prev` links back to the
//! genesis event. For every event it checks the actor (agent card or human
//! registry), the audited proof package, the link to its successor and the
//! packages of all cited events. Verification keeps going after a failure so
//! the report shows every failing step, but the overall verdict is `fail` as
//! soon as any check fails.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::event::{canonical_encode, event_digest, verify_event_sig, LineageEvent};
use crate::hash::{sha256, sha256_concat, EventDigest};
use crate::identity::{verify_card, AgentCard, CardVerdict, HumanRegistry, Role, AGENT_ID_SCHEME};
use crate::keys::PublicKey;
use crate::package::{verify_proof_package, PackageVerdict, ProofPackage, TrustedLogs};

/// Workflow hash chain: `R_0 = H(E_0)`, `R_t = H(R_{t-1} ∥ E_t)` over the
/// canonical event bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainCommitment {
    #[serde(with = "hex_list")]
    pub roots: Vec<[u8; 32]>,
}

mod hex_list {
    use alloc::string::String;
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[[u8; 32]], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(hex::encode).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<[u8; 32]>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| crate::hash::parse_hex32(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("event list is empty")]
    Empty,
    #[error("event {0} does not point at its predecessor")]
    BrokenPrev(usize),
    #[error("event {0} is missing a mandatory field")]
    Unencodable(usize),
}

pub fn commitment_roots(events: &[LineageEvent]) -> Result<ChainCommitment, ChainError> {
    if events.is_empty() {
        return Err(ChainError::Empty);
    }
    let mut encoded = Vec::with_capacity(events.len());
    for (t, e) in events.iter().enumerate() {
        if t > 0 && e.prev != Some(event_digest(&events[t - 1])) {
            return Err(ChainError::BrokenPrev(t));
        }
        encoded.push(canonical_encode(e).map_err(|_| ChainError::Unencodable(t))?);
    }
    Ok(fold_commitment(encoded.iter().map(Vec::as_slice)))
}

/// The bare hash fold over already-encoded events, with no link checks.
pub fn fold_commitment<'a>(encoded: impl IntoIterator<Item = &'a [u8]>) -> ChainCommitment {
    let mut roots: Vec<[u8; 32]> = Vec::new();
    for bytes in encoded {
        let r = match roots.last() {
            None => sha256(bytes),
            Some(prev_root) => sha256_concat(&[prev_root, bytes]),
        };
        roots.push(r);
    }
    ChainCommitment { roots }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorVerdict {
    Ok,
    /// The agent card itself failed verification.
    CardInvalid(CardVerdict),
    /// The credential belongs to a different actor than the event claims.
    IdentityMismatch,
    BadSignature,
    /// No card or registry entry is available for the claimed actor.
    UnknownActor,
    /// The human registry is not signed by the trusted authority.
    RegistryInvalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Agent,
    Human(Role),
}

/// What the verifier holds for an actor: a card for agents, the signed
/// registry for humans.
#[derive(Debug, Clone, Copy)]
pub enum ActorCredential<'a> {
    Agent(&'a AgentCard),
    Human { registry: &'a HumanRegistry, authority: &'a PublicKey },
}

pub fn verify_actor(event: &LineageEvent, credential: ActorCredential<'_>) -> ActorVerdict {
    match credential {
        ActorCredential::Agent(card) => {
            let card_verdict = verify_card(card, None);
            if card_verdict != CardVerdict::Ok {
                return ActorVerdict::CardInvalid(card_verdict);
            }
            if card.identity.agent_id != event.agent_id {
                return ActorVerdict::IdentityMismatch;
            }
            match card.public_key() {
                Some(pk) if verify_event_sig(event, &pk) => ActorVerdict::Ok,
                _ => ActorVerdict::BadSignature,
            }
        }
        ActorCredential::Human { registry, authority } => {
            if !registry.verify(authority) {
                return ActorVerdict::RegistryInvalid;
            }
            let Some(role) = Role::from_actor_id(&event.agent_id) else {
                return ActorVerdict::IdentityMismatch;
            };
            match registry.key_for(role) {
                Some(pk) if verify_event_sig(event, pk) => ActorVerdict::Ok,
                Some(_) => ActorVerdict::BadSignature,
                None => ActorVerdict::UnknownActor,
            }
        }
    }
}

/// Where the verifier gets packages and agent cards.
pub trait ChainSource {
    type Error;

    fn package(&self, digest: &EventDigest) -> Result<Option<ProofPackage>, Self::Error>;

    fn card(&self, agent_id: &str) -> Result<Option<AgentCard>, Self::Error>;
}

/// Keys the verifier trusts.
#[derive(Debug, Clone)]
pub struct TrustAnchors {
    pub ps_key: PublicKey,
    pub logs: TrustedLogs,
    pub human_registry: Option<HumanRegistry>,
    pub registry_authority: Option<PublicKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPolicy {
    /// action_type → action_types that an event of that type must cite.
    #[serde(default)]
    pub required_cites: BTreeMap<String, Vec<String>>,
    /// Cited events must be ancestors on the `prev` chain.
    #[serde(default = "yes")]
    pub cites_must_be_ancestors: bool,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
}

fn yes() -> bool {
    true
}

fn default_depth() -> usize {
    1 << 20
}

impl Default for ChainPolicy {
    fn default() -> Self {
        Self { required_cites: BTreeMap::new(), cites_must_be_ancestors: true, max_depth: default_depth() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkVerdict {
    Ok,
    /// The package served for this digest holds an event with another digest.
    DigestMismatch,
    /// No package could be obtained for this digest.
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiteVerdict {
    Ok,
    Missing,
    BadPackage(PackageVerdict),
    DigestMismatch,
    NotAncestor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiteCheck {
    pub digest: EventDigest,
    pub action_type: Option<String>,
    pub verdict: CiteVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    pub digest: EventDigest,
    pub action_type: Option<String>,
    pub actor_id: Option<String>,
    pub actor_kind: Option<ActorKind>,
    pub actor: ActorVerdict,
    /// `None` when no package was available.
    pub package: Option<PackageVerdict>,
    pub link: LinkVerdict,
    pub cites: Vec<CiteCheck>,
    /// Required cited action types (per policy) that were not cited.
    pub missing_cites: Vec<String>,
}

impl ChainStep {
    pub fn is_ok(&self) -> bool {
        self.first_failure().is_none()
    }

    /// Identifier of the first failing check on this step.
    pub fn first_failure(&self) -> Option<&'static str> {
        if self.link != LinkVerdict::Ok {
            return Some("link");
        }
        if self.package != Some(PackageVerdict::Ok) {
            return Some("package");
        }
        if self.actor != ActorVerdict::Ok {
            return Some("actor");
        }
        if self.cites.iter().any(|c| c.verdict != CiteVerdict::Ok) || !self.missing_cites.is_empty() {
            return Some("cites");
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRef {
    pub step: usize,
    pub digest: EventDigest,
    pub check: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub head: EventDigest,
    pub verdict: Verdict,
    /// Genesis first.
    pub steps: Vec<ChainStep>,
    pub first_failure: Option<FailureRef>,
    /// Set when the `prev` structure itself is broken (cycle, depth limit).
    pub malformed: Option<String>,
    pub commitment: Option<ChainCommitment>,
    pub package_verifications: usize,
}

impl ChainReport {
    pub fn is_ok(&self) -> bool {
        self.verdict == Verdict::Ok
    }
}

struct Walked {
    step: ChainStep,
    event: Option<LineageEvent>,
}

pub fn verify_chain<S: ChainSource>(
    head: &EventDigest,
    source: &S,
    trust: &TrustAnchors,
    policy: &ChainPolicy,
) -> Result<ChainReport, S::Error> {
    let mut walked: Vec<Walked> = Vec::new();
    let mut visited = BTreeSet::new();
    let mut malformed = None;
    let mut verifications = 0usize;
    let mut cursor = Some(*head);

    while let Some(digest) = cursor.take() {
        if !visited.insert(digest) {
            malformed = Some(alloc::format!("prev cycle at {digest}"));
            break;
        }
        if walked.len() >= policy.max_depth {
            malformed = Some(alloc::format!("chain deeper than {}", policy.max_depth));
            break;
        }
        let Some(pkg) = source.package(&digest)? else {
            walked.push(Walked {
                step: ChainStep {
                    digest,
                    action_type: None,
                    actor_id: None,
                    actor_kind: None,
                    actor: ActorVerdict::UnknownActor,
                    package: None,
                    link: LinkVerdict::Missing,
                    cites: Vec::new(),
                    missing_cites: Vec::new(),
                },
                event: None,
            });
            break;
        };
        verifications += 1;
        let package = verify_proof_package(&pkg, &trust.ps_key, &trust.logs);
        let link = if event_digest(&pkg.event) == digest { LinkVerdict::Ok } else { LinkVerdict::DigestMismatch };
        let (actor_kind, actor) = check_actor(&pkg.event, source, trust)?;

        let mut cites = Vec::new();
        for cited in pkg.event.cites() {
            verifications += 1;
            let check = match source.package(cited)? {
                None => CiteCheck { digest: *cited, action_type: None, verdict: CiteVerdict::Missing },
                Some(cp) => {
                    let v = verify_proof_package(&cp, &trust.ps_key, &trust.logs);
                    let verdict = if !v.is_ok() {
                        CiteVerdict::BadPackage(v)
                    } else if event_digest(&cp.event) != *cited {
                        CiteVerdict::DigestMismatch
                    } else {
                        CiteVerdict::Ok
                    };
                    CiteCheck { digest: *cited, action_type: Some(cp.event.action_type.clone()), verdict }
                }
            };
            cites.push(check);
        }

        let missing_cites = match policy.required_cites.get(&pkg.event.action_type) {
            None => Vec::new(),
            Some(required) => required
                .iter()
                .filter(|r| !cites.iter().any(|c| c.verdict == CiteVerdict::Ok && c.action_type.as_ref() == Some(*r)))
                .cloned()
                .collect(),
        };

        cursor = pkg.event.prev;
        walked.push(Walked {
            step: ChainStep {
                digest,
                action_type: Some(pkg.event.action_type.clone()),
                actor_id: Some(pkg.event.agent_id.clone()),
                actor_kind,
                actor,
                package: Some(package),
                link,
                cites,
                missing_cites,
            },
            event: Some(pkg.event),
        });
    }

    walked.reverse();

    if policy.cites_must_be_ancestors {
        let mut seen = BTreeSet::new();
        for w in &mut walked {
            for c in &mut w.step.cites {
                if c.verdict == CiteVerdict::Ok && !seen.contains(&c.digest) {
                    c.verdict = CiteVerdict::NotAncestor;
                }
            }
            seen.insert(w.step.digest);
        }
    }

    let events: Option<Vec<LineageEvent>> = walked.iter().map(|w| w.event.clone()).collect();
    let commitment = events.and_then(|evs| commitment_roots(&evs).ok());
    let steps: Vec<ChainStep> = walked.into_iter().map(|w| w.step).collect();

    let first_failure = steps.iter().enumerate().find_map(|(i, s)| {
        s.first_failure().map(|check| FailureRef { step: i, digest: s.digest, check: check.to_string() })
    });
    let ok = first_failure.is_none() && malformed.is_none() && !steps.is_empty();
    Ok(ChainReport {
        head: *head,
        verdict: if ok { Verdict::Ok } else { Verdict::Fail },
        steps,
        first_failure,
        malformed,
        commitment,
        package_verifications: verifications,
    })
}

fn check_actor<S: ChainSource>(
    event: &LineageEvent,
    source: &S,
    trust: &TrustAnchors,
) -> Result<(Option<ActorKind>, ActorVerdict), S::Error> {
    if let Some(role) = Role::from_actor_id(&event.agent_id) {
        let verdict = match (&trust.human_registry, &trust.registry_authority) {
            (Some(registry), Some(authority)) => verify_actor(event, ActorCredential::Human { registry, authority }),
            _ => ActorVerdict::UnknownActor,
        };
        return Ok((Some(ActorKind::Human(role)), verdict));
    }
    if !event.agent_id.starts_with(AGENT_ID_SCHEME) {
        return Ok((None, ActorVerdict::UnknownActor));
    }
    let verdict = match source.card(&event.agent_id)? {
        Some(card) => verify_actor(event, ActorCredential::Agent(&card)),
        None => ActorVerdict::UnknownActor,
    };
    Ok((Some(ActorKind::Agent), verdict))
}
