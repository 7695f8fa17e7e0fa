//! Evidence capsules: cited events with their audited proof packages, the
//! issuing agents' cards, and a recent tree head, verifiable offline with a
//! trust config alone.

use lineage_core::{
    event_digest, verify_actor, verify_consistency_package, verify_proof_package, ActorCredential, ActorVerdict,
    AgentCard, ConsistencyPackage, EventDigest, PackageVerdict, ProofPackage, SignedTreeHead, Verdict,
};
use serde::{Deserialize, Serialize};

use crate::trust::TrustConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleItem {
    pub digest: EventDigest,
    pub package: ProofPackage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceCapsule {
    pub workflow_id: String,
    pub items: Vec<CapsuleItem>,
    pub cards: Vec<AgentCard>,
    /// The newest head known when the capsule was sealed.
    pub latest_sth: SignedTreeHead,
    /// Links each package head older than `latest_sth` to it.
    pub consistency: Vec<ConsistencyPackage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemReport {
    pub digest: EventDigest,
    pub action_type: String,
    pub digest_matches: bool,
    pub package: PackageVerdict,
    pub actor: ActorVerdict,
    /// Every package head of the capsule's log is the latest head or is
    /// proven consistent with it.
    pub linked: bool,
}

impl ItemReport {
    pub fn first_failure(&self) -> Option<&'static str> {
        if !self.digest_matches {
            Some("digest")
        } else if !self.package.is_ok() {
            Some("package")
        } else if self.actor != ActorVerdict::Ok {
            Some("actor")
        } else if !self.linked {
            Some("consistency")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleReport {
    pub verdict: Verdict,
    pub latest_sth_ok: bool,
    pub items: Vec<ItemReport>,
    /// `"<digest>:<check>"` of the first failing item, or `"latest_sth"`.
    pub first_failure: Option<String>,
}

impl CapsuleReport {
    pub fn is_ok(&self) -> bool {
        self.verdict == Verdict::Ok
    }
}

pub fn verify_capsule(capsule: &EvidenceCapsule, trust: &TrustConfig) -> CapsuleReport {
    let logs = trust.trusted_logs();
    let latest = &capsule.latest_sth;
    let latest_sth_ok = logs.get(&latest.log_id).is_some_and(|k| latest.verify(k));

    let linked = |sth: &SignedTreeHead| -> bool {
        if sth.log_id != latest.log_id {
            return true;
        }
        if sth.tree_size == latest.tree_size {
            return sth.root == latest.root;
        }
        capsule.consistency.iter().any(|c| {
            c.first_sth.tree_size == sth.tree_size
                && c.first_sth.root == sth.root
                && c.second_sth.tree_size == latest.tree_size
                && c.second_sth.root == latest.root
                && verify_consistency_package(c, &trust.ps_public_key, &logs).is_ok()
        })
    };

    let items: Vec<ItemReport> = capsule
        .items
        .iter()
        .map(|item| {
            let event = &item.package.event;
            let actor = match capsule.cards.iter().find(|c| c.identity.agent_id == event.agent_id) {
                Some(card) => verify_actor(event, ActorCredential::Agent(card)),
                None => ActorVerdict::UnknownActor,
            };
            ItemReport {
                digest: item.digest,
                action_type: event.action_type.clone(),
                digest_matches: event_digest(event) == item.digest,
                package: verify_proof_package(&item.package, &trust.ps_public_key, &logs),
                actor,
                linked: item.package.sths.iter().all(linked),
            }
        })
        .collect();

    let first_failure = if !latest_sth_ok {
        Some("latest_sth".to_string())
    } else if items.is_empty() {
        Some("empty".to_string())
    } else {
        items.iter().find_map(|i| i.first_failure().map(|c| format!("{}:{c}", i.digest)))
    };
    CapsuleReport {
        verdict: if first_failure.is_none() { Verdict::Ok } else { Verdict::Fail },
        latest_sth_ok,
        items,
        first_failure,
    }
}
