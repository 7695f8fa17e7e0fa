//! Audited proof packages counter-signed by the proof server.
//!
//! Each package is verifiable offline from the proof-server key and the
//! trusted log keys alone.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::event::LineageEvent;
use crate::hash::{LeafHash, LogId};
use crate::keys::{PublicKey, SignatureString};
use crate::merkle::{verify_consistency, verify_inclusion, verify_multi, ConsistencyProof, InclusionProof, Multiproof};
use crate::sth::SignedTreeHead;

/// Log id to log public key.
pub type TrustedLogs = BTreeMap<LogId, PublicKey>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackageVerdict {
    Ok,
    BadPsSig,
    BadSthSig,
    BadInclusion,
    BadLeaf,
}

impl PackageVerdict {
    pub fn is_ok(self) -> bool {
        self == PackageVerdict::Ok
    }
}

fn ps_sign<T: Serialize>(key: &SigningKey, body: &T) -> SignatureString {
    SignatureString::sign(key, &to_canonical_vec(body).expect("package body encodes"))
}

fn ps_verify<T: Serialize>(key: &PublicKey, body: &T, sig: &SignatureString) -> bool {
    to_canonical_vec(body).is_ok_and(|msg| key.verify_str(&msg, sig.as_str()))
}

fn sth_trusted(sth: &SignedTreeHead, logs: &TrustedLogs) -> bool {
    logs.get(&sth.log_id).is_some_and(|k| sth.verify(k))
}

/// One event, its leaf hash, and for every covering log a tree head plus an
/// inclusion proof against that head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofPackage {
    pub event: LineageEvent,
    pub leaf_hash: LeafHash,
    pub sths: Vec<SignedTreeHead>,
    pub inclusion_proofs: Vec<InclusionProof>,
    pub ps_signature: SignatureString,
}

#[derive(Serialize)]
struct PackageBody<'a> {
    event: &'a LineageEvent,
    leaf_hash: &'a LeafHash,
    sths: &'a [SignedTreeHead],
    inclusion_proofs: &'a [InclusionProof],
}

impl ProofPackage {
    pub fn sign(
        key: &SigningKey,
        event: LineageEvent,
        sths: Vec<SignedTreeHead>,
        inclusion_proofs: Vec<InclusionProof>,
    ) -> Self {
        let leaf_hash = event.leaf_hash();
        let ps_signature = ps_sign(
            key,
            &PackageBody { event: &event, leaf_hash: &leaf_hash, sths: &sths, inclusion_proofs: &inclusion_proofs },
        );
        Self { event, leaf_hash, sths, inclusion_proofs, ps_signature }
    }

    fn body(&self) -> PackageBody<'_> {
        PackageBody {
            event: &self.event,
            leaf_hash: &self.leaf_hash,
            sths: &self.sths,
            inclusion_proofs: &self.inclusion_proofs,
        }
    }
}

/// Checks, in order: leaf hash recomputation, every tree-head signature,
/// every inclusion proof, then the proof-server signature. The first failing
/// check determines the verdict.
pub fn verify_proof_package(pkg: &ProofPackage, ps_key: &PublicKey, trusted_logs: &TrustedLogs) -> PackageVerdict {
    if pkg.event.leaf_hash() != pkg.leaf_hash {
        return PackageVerdict::BadLeaf;
    }
    if !pkg.sths.iter().all(|s| sth_trusted(s, trusted_logs)) {
        return PackageVerdict::BadSthSig;
    }
    if pkg.sths.is_empty() || pkg.sths.len() != pkg.inclusion_proofs.len() {
        return PackageVerdict::BadInclusion;
    }
    for (sth, proof) in pkg.sths.iter().zip(&pkg.inclusion_proofs) {
        if proof.tree_size != sth.tree_size || !verify_inclusion(&pkg.leaf_hash, proof, &sth.root) {
            return PackageVerdict::BadInclusion;
        }
    }
    if !ps_verify(ps_key, &pkg.body(), &pkg.ps_signature) {
        return PackageVerdict::BadPsSig;
    }
    PackageVerdict::Ok
}

/// Several events of one log proven together against a single tree head.
/// `events[i]` sits at leaf `multiproof.indices[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiproofPackage {
    pub events: Vec<LineageEvent>,
    pub multiproof: Multiproof,
    pub sth: SignedTreeHead,
    pub ps_signature: SignatureString,
}

#[derive(Serialize)]
struct MultiBody<'a> {
    events: &'a [LineageEvent],
    multiproof: &'a Multiproof,
    sth: &'a SignedTreeHead,
}

impl MultiproofPackage {
    pub fn sign(key: &SigningKey, events: Vec<LineageEvent>, multiproof: Multiproof, sth: SignedTreeHead) -> Self {
        let ps_signature = ps_sign(key, &MultiBody { events: &events, multiproof: &multiproof, sth: &sth });
        Self { events, multiproof, sth, ps_signature }
    }
}

pub fn verify_multiproof_package(
    pkg: &MultiproofPackage,
    ps_key: &PublicKey,
    trusted_logs: &TrustedLogs,
) -> PackageVerdict {
    if pkg.events.len() != pkg.multiproof.indices.len() {
        return PackageVerdict::BadLeaf;
    }
    if !sth_trusted(&pkg.sth, trusted_logs) {
        return PackageVerdict::BadSthSig;
    }
    let leaves: BTreeMap<u64, LeafHash> =
        pkg.multiproof.indices.iter().copied().zip(pkg.events.iter().map(LineageEvent::leaf_hash)).collect();
    if pkg.multiproof.tree_size != pkg.sth.tree_size || !verify_multi(&leaves, &pkg.multiproof, &pkg.sth.root) {
        return PackageVerdict::BadInclusion;
    }
    let body = MultiBody { events: &pkg.events, multiproof: &pkg.multiproof, sth: &pkg.sth };
    if !ps_verify(ps_key, &body, &pkg.ps_signature) {
        return PackageVerdict::BadPsSig;
    }
    PackageVerdict::Ok
}

/// Consistency proof between two tree heads of the same log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyPackage {
    pub proof: ConsistencyProof,
    pub first_sth: SignedTreeHead,
    pub second_sth: SignedTreeHead,
    pub ps_signature: SignatureString,
}

#[derive(Serialize)]
struct ConsistencyBody<'a> {
    proof: &'a ConsistencyProof,
    first_sth: &'a SignedTreeHead,
    second_sth: &'a SignedTreeHead,
}

impl ConsistencyPackage {
    pub fn sign(
        key: &SigningKey,
        proof: ConsistencyProof,
        first_sth: SignedTreeHead,
        second_sth: SignedTreeHead,
    ) -> Self {
        let ps_signature =
            ps_sign(key, &ConsistencyBody { proof: &proof, first_sth: &first_sth, second_sth: &second_sth });
        Self { proof, first_sth, second_sth, ps_signature }
    }
}

pub fn verify_consistency_package(
    pkg: &ConsistencyPackage,
    ps_key: &PublicKey,
    trusted_logs: &TrustedLogs,
) -> PackageVerdict {
    if pkg.first_sth.log_id != pkg.second_sth.log_id
        || !sth_trusted(&pkg.first_sth, trusted_logs)
        || !sth_trusted(&pkg.second_sth, trusted_logs)
    {
        return PackageVerdict::BadSthSig;
    }
    if pkg.proof.first_size != pkg.first_sth.tree_size
        || pkg.proof.second_size != pkg.second_sth.tree_size
        || !verify_consistency(&pkg.first_sth.root, &pkg.second_sth.root, &pkg.proof)
    {
        return PackageVerdict::BadInclusion;
    }
    let body = ConsistencyBody { proof: &pkg.proof, first_sth: &pkg.first_sth, second_sth: &pkg.second_sth };
    if !ps_verify(ps_key, &body, &pkg.ps_signature) {
        return PackageVerdict::BadPsSig;
    }
    PackageVerdict::Ok
}
