//! Batched membership proofs for several leaves of one snapshot.
//!
//! A multiproof carries exactly the maximal subtrees that contain none of the
//! target leaves. Each node names the leaf range it covers, so the verifier
//! rebuilds the root top-down without any ordering conventions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ceil_log2, split_point, MerkleError, MerkleLog, TreeSize};
use crate::hash::{LeafHash, NodeHash};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiproofNode {
    /// First leaf covered by this subtree.
    pub start: u64,
    /// One past the last leaf covered.
    pub end: u64,
    pub hash: NodeHash,
}

impl MultiproofNode {
    pub fn height(&self) -> u32 {
        ceil_log2(self.end - self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Multiproof {
    pub indices: Vec<u64>,
    pub tree_size: TreeSize,
    /// Sorted by (height, start).
    pub nodes: Vec<MultiproofNode>,
}

impl MerkleLog {
    pub fn prove_multi(&self, indices: &[u64], size: TreeSize) -> Result<Multiproof, MerkleError> {
        self.check_size(size)?;
        if indices.is_empty() {
            return Err(MerkleError::EmptyIndices);
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(MerkleError::UnsortedIndices(w[1]));
            }
        }
        let last = indices[indices.len() - 1];
        if last >= size {
            return Err(MerkleError::IndexOutOfRange { index: last, size });
        }

        let mut nodes = Vec::new();
        self.collect_multi(indices, 0, size, &mut nodes);
        nodes.sort_by_key(|n| (n.height(), n.start));
        Ok(Multiproof { indices: indices.to_vec(), tree_size: size, nodes })
    }

    fn collect_multi(&self, targets: &[u64], lo: u64, hi: u64, out: &mut Vec<MultiproofNode>) {
        if targets.is_empty() {
            out.push(MultiproofNode { start: lo, end: hi, hash: self.subtree(lo, hi) });
            return;
        }
        if hi - lo == 1 {
            return;
        }
        let mid = lo + split_point(hi - lo);
        let cut = targets.partition_point(|&i| i < mid);
        self.collect_multi(&targets[..cut], lo, mid, out);
        self.collect_multi(&targets[cut..], mid, hi, out);
    }
}

/// Rebuilds the root from `leaves` plus the proof nodes and compares it to
/// `root`. Leaf keys must equal `proof.indices`; every supplied node must be
/// used exactly once and must not cover a target leaf.
pub fn verify_multi(leaves: &BTreeMap<u64, LeafHash>, proof: &Multiproof, root: &NodeHash) -> bool {
    if proof.tree_size == 0 || proof.indices.is_empty() {
        return false;
    }
    if leaves.len() != proof.indices.len() || !proof.indices.iter().all(|i| leaves.contains_key(i)) {
        return false;
    }
    if proof.indices.iter().any(|&i| i >= proof.tree_size) {
        return false;
    }
    let targets: BTreeSet<u64> = proof.indices.iter().copied().collect();

    let mut supplied = BTreeMap::new();
    for node in &proof.nodes {
        if node.start >= node.end || node.end > proof.tree_size {
            return false;
        }
        if supplied.insert((node.start, node.end), node.hash).is_some() {
            return false;
        }
    }

    let rebuilt = rebuild(0, proof.tree_size, leaves, &targets, &mut supplied);
    supplied.is_empty() && rebuilt.as_ref() == Some(root)
}

fn rebuild(
    lo: u64,
    hi: u64,
    leaves: &BTreeMap<u64, LeafHash>,
    targets: &BTreeSet<u64>,
    supplied: &mut BTreeMap<(u64, u64), NodeHash>,
) -> Option<NodeHash> {
    let has_target = targets.range(lo..hi).next().is_some();
    if let Some(h) = supplied.remove(&(lo, hi)) {
        return if has_target { None } else { Some(h) };
    }
    if !has_target {
        return None;
    }
    if hi - lo == 1 {
        return leaves.get(&lo).map(|l| NodeHash::from(*l));
    }
    let mid = lo + split_point(hi - lo);
    let left = rebuild(lo, mid, leaves, targets, supplied)?;
    let right = rebuild(mid, hi, leaves, targets, supplied)?;
    Some(NodeHash::combine(&left, &right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn log_of(n: u64) -> MerkleLog {
        let mut log = MerkleLog::new();
        for i in 0..n {
            log.append(vec![i as u8, 0xAA]);
        }
        log
    }

    fn leaves_for(log: &MerkleLog, idx: &[u64]) -> BTreeMap<u64, LeafHash> {
        idx.iter().map(|&i| (i, log.leaf_hash(i).unwrap())).collect()
    }

    #[test]
    fn rejects_bad_index_sets() {
        let log = log_of(8);
        assert_eq!(log.prove_multi(&[], 8), Err(MerkleError::EmptyIndices));
        assert_eq!(log.prove_multi(&[3, 3], 8), Err(MerkleError::UnsortedIndices(3)));
        assert_eq!(log.prove_multi(&[4, 2], 8), Err(MerkleError::UnsortedIndices(2)));
        assert!(matches!(log.prove_multi(&[8], 8), Err(MerkleError::IndexOutOfRange { .. })));
    }

    #[test]
    fn all_leaves_need_no_nodes() {
        let log = log_of(11);
        let idx: Vec<u64> = (0..11).collect();
        let p = log.prove_multi(&idx, 11).unwrap();
        assert!(p.nodes.is_empty());
        assert!(verify_multi(&leaves_for(&log, &idx), &p, &log.root()));
    }

    #[test]
    fn single_index_matches_audit_path() {
        let log = log_of(13);
        for i in 0..13 {
            let p = log.prove_multi(&[i], 13).unwrap();
            let mut a: Vec<NodeHash> = log.prove_inclusion(i, 13).unwrap().audit_path;
            let mut b: Vec<NodeHash> = p.nodes.iter().map(|n| n.hash).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tamper_cases_fail() {
        let log = log_of(16);
        let idx = [2, 3, 9];
        let p = log.prove_multi(&idx, 16).unwrap();
        let root = log.root();
        let leaves = leaves_for(&log, &idx);
        assert!(verify_multi(&leaves, &p, &root));

        let mut bad = leaves.clone();
        bad.insert(9, log.leaf_hash(10).unwrap());
        assert!(!verify_multi(&bad, &p, &root));

        for drop in 0..p.nodes.len() {
            let mut q = p.clone();
            q.nodes.remove(drop);
            assert!(!verify_multi(&leaves, &q, &root));
        }

        let mut extra = p.clone();
        extra.nodes.push(MultiproofNode { start: 2, end: 4, hash: root });
        assert!(!verify_multi(&leaves, &extra, &root));

        let mut missing_key = leaves.clone();
        missing_key.remove(&3);
        assert!(!verify_multi(&missing_key, &p, &root));
    }
}
