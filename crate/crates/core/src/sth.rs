use alloc::vec::Vec;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::hash::{LogId, NodeHash};
use crate::keys::{PublicKey, SignatureString};
use crate::merkle::TreeSize;

/// Signed snapshot of a lineage log.
///
/// The signature covers the canonical JSON of the other five fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTreeHead {
    pub tree_size: TreeSize,
    pub root: NodeHash,
    /// Unix milliseconds at signing.
    pub wallclock_t: u64,
    pub monotonic_ctr: u64,
    pub log_id: LogId,
    pub signature: SignatureString,
}

#[derive(Serialize)]
struct SthBody<'a> {
    tree_size: TreeSize,
    root: &'a NodeHash,
    wallclock_t: u64,
    monotonic_ctr: u64,
    log_id: &'a LogId,
}

fn body_bytes(tree_size: TreeSize, root: &NodeHash, wallclock_t: u64, monotonic_ctr: u64, log_id: &LogId) -> Vec<u8> {
    to_canonical_vec(&SthBody { tree_size, root, wallclock_t, monotonic_ctr, log_id }).expect("sth body encodes")
}

impl SignedTreeHead {
    /// Signs a tree head; the log id is derived from `key`.
    pub fn sign(key: &SigningKey, tree_size: TreeSize, root: NodeHash, wallclock_t: u64, monotonic_ctr: u64) -> Self {
        let log_id = LogId::for_key(PublicKey::from(key).as_bytes());
        let msg = body_bytes(tree_size, &root, wallclock_t, monotonic_ctr, &log_id);
        Self { tree_size, root, wallclock_t, monotonic_ctr, log_id, signature: SignatureString::sign(key, &msg) }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        body_bytes(self.tree_size, &self.root, self.wallclock_t, self.monotonic_ctr, &self.log_id)
    }

    /// True iff `log_key` is this log's key and the signature is valid.
    pub fn verify(&self, log_key: &PublicKey) -> bool {
        LogId::for_key(log_key.as_bytes()) == self.log_id
            && log_key.verify_str(&self.signed_bytes(), self.signature.as_str())
    }
}
