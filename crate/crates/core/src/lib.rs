//! Verifiable agent lineage: an append-only Merkle log of signed agent and
//! human action events, cryptographically bound agent identities, audited
//! proof packages and call-chain verification.
//!
//! This crate is `no_std` (with `alloc`) and performs no IO. Persistence,
//! HTTP services, the scenario harness and the command-line tool live in the
//! companion `lineage` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod canonical;
pub mod chain;
pub mod event;
pub mod hash;
pub mod identity;
pub mod keys;
pub mod merkle;
pub mod package;
pub mod sth;

pub use canonical::{to_canonical_vec, CanonicalError};
pub use chain::{
    commitment_roots, fold_commitment, verify_actor, verify_chain, ActorCredential, ActorKind, ActorVerdict,
    ChainCommitment, ChainError, ChainPolicy, ChainReport, ChainSource, ChainStep, CiteVerdict, LinkVerdict,
    TrustAnchors, Verdict,
};
pub use event::{
    canonical_encode, decode_canonical, event_digest, sign_event, verify_event_sig, EventError, LineageEvent, Signer,
};
pub use hash::{EventDigest, Hash32, LeafHash, LogId, NodeHash};
pub use identity::{
    derive_agent_id, derive_agent_id_raw, issue_card, verify_card, AgentCard, AgentId, CardTemplate, CardVerdict,
    HumanRegistry, LineageSupport, Provider, Role, Skill,
};
pub use keys::{KeyError, PublicKey, SignatureString};
pub use merkle::{
    verify_consistency, verify_inclusion, verify_multi, ConsistencyProof, InclusionProof, MerkleError, MerkleLog,
    Multiproof, TreeSize,
};
pub use package::{
    verify_consistency_package, verify_multiproof_package, verify_proof_package, ConsistencyPackage, MultiproofPackage,
    PackageVerdict, ProofPackage, TrustedLogs,
};
pub use sth::SignedTreeHead;
