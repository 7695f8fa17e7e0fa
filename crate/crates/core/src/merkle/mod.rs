//! Append-only binary Merkle tree in the Certificate Transparency shape.
//!
//! A tree over `n > 1` leaves splits into a left subtree holding the largest
//! power of two strictly below `n` and a right subtree holding the rest.
//! Leaves are `H(0x00 ∥ payload)`, internal nodes `H(0x01 ∥ left ∥ right)`,
//! and the empty tree hashes to `H("")`.
//!
//! [`MerkleLog`] caches the hash of every complete, aligned power-of-two
//! subtree, so any historical root or proof costs `O(log n)` hash operations.

mod consistency;
mod multiproof;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::{LeafHash, NodeHash};

pub use consistency::{verify_consistency, ConsistencyProof};
pub use multiproof::{verify_multi, Multiproof, MultiproofNode};

/// Number of leaves in a tree snapshot.
pub type TreeSize = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MerkleError {
    #[error("tree size {requested} exceeds log size {available}")]
    SizeOutOfRange { requested: u64, available: u64 },
    #[error("leaf index {index} not below tree size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("consistency range {first}..{second} is not ordered")]
    BadOrder { first: u64, second: u64 },
    #[error("multiproof index set is empty")]
    EmptyIndices,
    #[error("multiproof indices must be strictly increasing (saw {0} out of order)")]
    UnsortedIndices(u64),
}

/// Largest power of two strictly less than `n`. Requires `n >= 2`.
pub(crate) fn split_point(n: u64) -> u64 {
    debug_assert!(n >= 2);
    1u64 << (63 - (n - 1).leading_zeros())
}

/// `ceil(log2(n))`, with `0` for `n <= 1`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Append-only log of opaque payloads with cached subtree hashes.
#[derive(Debug, Clone, Default)]
pub struct MerkleLog {
    payloads: Vec<Vec<u8>>,
    // levels[k][j] is the hash of leaves [j * 2^k, (j + 1) * 2^k).
    levels: Vec<Vec<NodeHash>>,
}

impl MerkleLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> TreeSize {
        self.payloads.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    /// Appends a payload, returning its index, its leaf hash and the new root.
    pub fn append(&mut self, payload: Vec<u8>) -> (u64, LeafHash, NodeHash) {
        let leaf = LeafHash::of(&payload);
        let index = self.size();
        self.payloads.push(payload);
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf.into());

        let mut level = 0;
        while self.levels[level].len().is_multiple_of(2) {
            let row = &self.levels[level];
            let parent = NodeHash::combine(&row[row.len() - 2], &row[row.len() - 1]);
            if self.levels.len() == level + 1 {
                self.levels.push(Vec::new());
            }
            self.levels[level + 1].push(parent);
            level += 1;
        }
        (index, leaf, self.root())
    }

    pub fn payload(&self, index: u64) -> Option<&[u8]> {
        self.payloads.get(usize::try_from(index).ok()?).map(Vec::as_slice)
    }

    pub fn leaf_hash(&self, index: u64) -> Option<LeafHash> {
        let i = usize::try_from(index).ok()?;
        self.levels.first()?.get(i).map(|n| LeafHash(n.0))
    }

    pub fn root(&self) -> NodeHash {
        self.subtree(0, self.size())
    }

    /// Root of the first `size` leaves.
    pub fn root_at(&self, size: TreeSize) -> Result<NodeHash, MerkleError> {
        self.check_size(size)?;
        Ok(self.subtree(0, size))
    }

    /// Audit path for `leaf_index` in the snapshot of `size` leaves.
    pub fn prove_inclusion(&self, leaf_index: u64, size: TreeSize) -> Result<InclusionProof, MerkleError> {
        self.check_size(size)?;
        if leaf_index >= size {
            return Err(MerkleError::IndexOutOfRange { index: leaf_index, size });
        }
        let mut audit_path = Vec::with_capacity(ceil_log2(size) as usize);
        self.audit_path(leaf_index, 0, size, &mut audit_path);
        Ok(InclusionProof { leaf_index, tree_size: size, audit_path })
    }

    fn check_size(&self, size: TreeSize) -> Result<(), MerkleError> {
        if size > self.size() {
            return Err(MerkleError::SizeOutOfRange { requested: size, available: self.size() });
        }
        Ok(())
    }

    /// Hash of leaves `[lo, hi)`. Callers guarantee `hi <= self.size()`.
    pub(crate) fn subtree(&self, lo: u64, hi: u64) -> NodeHash {
        let n = hi - lo;
        if n == 0 {
            return NodeHash::empty();
        }
        if n.is_power_of_two() && lo.is_multiple_of(n) {
            let level = n.trailing_zeros() as usize;
            return self.levels[level][(lo / n) as usize];
        }
        let k = split_point(n);
        NodeHash::combine(&self.subtree(lo, lo + k), &self.subtree(lo + k, hi))
    }

    fn audit_path(&self, index: u64, lo: u64, hi: u64, out: &mut Vec<NodeHash>) {
        let n = hi - lo;
        if n <= 1 {
            return;
        }
        let k = split_point(n);
        if index < lo + k {
            self.audit_path(index, lo, lo + k, out);
            out.push(self.subtree(lo + k, hi));
        } else {
            self.audit_path(index, lo + k, hi, out);
            out.push(self.subtree(lo, lo + k));
        }
    }
}

/// Sibling hashes from a leaf up to the root, deepest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: TreeSize,
    pub audit_path: Vec<NodeHash>,
}

/// Checks that folding `leaf` along the proof's audit path yields `root`.
///
/// Malformed proofs (wrong path length, index beyond size) return `false`.
pub fn verify_inclusion(leaf: &LeafHash, proof: &InclusionProof, root: &NodeHash) -> bool {
    if proof.leaf_index >= proof.tree_size {
        return false;
    }
    let mut fnode = proof.leaf_index;
    let mut snode = proof.tree_size - 1;
    let mut acc = NodeHash::from(*leaf);
    for sibling in &proof.audit_path {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            acc = NodeHash::combine(sibling, &acc);
            while fnode & 1 == 0 && fnode != 0 {
                fnode >>= 1;
                snode >>= 1;
            }
        } else {
            acc = NodeHash::combine(&acc, sibling);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    snode == 0 && acc == *root
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn log_of(n: u64) -> MerkleLog {
        let mut log = MerkleLog::new();
        for i in 0..n {
            log.append(vec![i as u8, (i >> 8) as u8]);
        }
        log
    }

    #[test]
    fn split_point_values() {
        assert_eq!(split_point(2), 1);
        assert_eq!(split_point(3), 2);
        assert_eq!(split_point(4), 2);
        assert_eq!(split_point(5), 4);
        assert_eq!(split_point(1 << 40), 1 << 39);
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(0), 0);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(9), 4);
    }

    #[test]
    fn single_leaf_root_is_leaf() {
        let mut log = MerkleLog::new();
        let (idx, leaf, root) = log.append(b"p".to_vec());
        assert_eq!(idx, 0);
        assert_eq!(NodeHash::from(leaf), root);
        assert!(log.prove_inclusion(0, 1).unwrap().audit_path.is_empty());
    }

    #[test]
    fn empty_payload_allowed() {
        let mut log = MerkleLog::new();
        let (_, leaf, _) = log.append(Vec::new());
        assert_eq!(leaf, LeafHash::of(&[]));
    }

    #[test]
    fn out_of_range_errors() {
        let log = log_of(4);
        assert!(matches!(log.root_at(5), Err(MerkleError::SizeOutOfRange { .. })));
        assert!(matches!(log.prove_inclusion(4, 4), Err(MerkleError::IndexOutOfRange { .. })));
        assert!(matches!(log.prove_inclusion(0, 5), Err(MerkleError::SizeOutOfRange { .. })));
    }

    #[test]
    fn malformed_inclusion_is_false() {
        let log = log_of(6);
        let root = log.root();
        let leaf = log.leaf_hash(2).unwrap();
        let mut p = log.prove_inclusion(2, 6).unwrap();
        assert!(verify_inclusion(&leaf, &p, &root));
        p.audit_path.push(root);
        assert!(!verify_inclusion(&leaf, &p, &root));
        p.audit_path.truncate(1);
        assert!(!verify_inclusion(&leaf, &p, &root));
        let p = InclusionProof { leaf_index: 9, tree_size: 6, audit_path: vec![] };
        assert!(!verify_inclusion(&leaf, &p, &root));
        let p = InclusionProof { leaf_index: 0, tree_size: 0, audit_path: vec![] };
        assert!(!verify_inclusion(&leaf, &p, &root));
    }
}
