use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{split_point, MerkleError, MerkleLog, TreeSize};
use crate::hash::NodeHash;

/// Evidence that the first `first_size` leaves of a log are a prefix of its
/// first `second_size` leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProof {
    pub first_size: TreeSize,
    pub second_size: TreeSize,
    pub path: Vec<NodeHash>,
}

impl MerkleLog {
    pub fn prove_consistency(&self, first: TreeSize, second: TreeSize) -> Result<ConsistencyProof, MerkleError> {
        if first > second {
            return Err(MerkleError::BadOrder { first, second });
        }
        self.check_size(second)?;
        let mut path = Vec::new();
        if first > 0 && first < second {
            self.subproof(first, 0, second, true, &mut path);
        }
        Ok(ConsistencyProof { first_size: first, second_size: second, path })
    }

    // `m` is relative to `lo`; `whole` is true while the old tree is still
    // exactly a left-aligned prefix whose root the verifier already has.
    fn subproof(&self, m: u64, lo: u64, hi: u64, whole: bool, out: &mut Vec<NodeHash>) {
        let n = hi - lo;
        if m == n {
            if !whole {
                out.push(self.subtree(lo, hi));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.subproof(m, lo, lo + k, whole, out);
            out.push(self.subtree(lo + k, hi));
        } else {
            self.subproof(m - k, lo + k, hi, false, out);
            out.push(self.subtree(lo, lo + k));
        }
    }
}

/// Checks that `proof` links `old_root` (of `proof.first_size` leaves) to
/// `new_root` (of `proof.second_size` leaves).
///
/// An empty old tree is a prefix of everything, so `first_size == 0` with an
/// empty path accepts any `new_root`.
pub fn verify_consistency(old_root: &NodeHash, new_root: &NodeHash, proof: &ConsistencyProof) -> bool {
    let (first, second) = (proof.first_size, proof.second_size);
    if first > second {
        return false;
    }
    if first == 0 {
        return proof.path.is_empty();
    }
    if first == second {
        return proof.path.is_empty() && old_root == new_root;
    }

    let mut path = proof.path.iter();
    let seed = if first.is_power_of_two() {
        *old_root
    } else {
        match path.next() {
            Some(h) => *h,
            None => return false,
        }
    };

    let mut fnode = first - 1;
    let mut snode = second - 1;
    while fnode & 1 == 1 {
        fnode >>= 1;
        snode >>= 1;
    }

    let mut old_acc = seed;
    let mut new_acc = seed;
    for c in path {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            old_acc = NodeHash::combine(c, &old_acc);
            new_acc = NodeHash::combine(c, &new_acc);
            while fnode & 1 == 0 && fnode != 0 {
                fnode >>= 1;
                snode >>= 1;
            }
        } else {
            new_acc = NodeHash::combine(&new_acc, c);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    snode == 0 && old_acc == *old_root && new_acc == *new_root
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn log_of(n: u64) -> MerkleLog {
        let mut log = MerkleLog::new();
        for i in 0..n {
            log.append(vec![i as u8]);
        }
        log
    }

    #[test]
    fn equal_sizes_give_empty_path() {
        let log = log_of(7);
        let p = log.prove_consistency(5, 5).unwrap();
        assert!(p.path.is_empty());
        let r = log.root_at(5).unwrap();
        assert!(verify_consistency(&r, &r, &p));
        assert!(!verify_consistency(&r, &log.root(), &p));
    }

    #[test]
    fn empty_first_accepts_any_second_root() {
        let log = log_of(7);
        let p = log.prove_consistency(0, 7).unwrap();
        assert!(p.path.is_empty());
        assert!(verify_consistency(&NodeHash::empty(), &NodeHash([9; 32]), &p));
    }

    #[test]
    fn ordering_violation_is_error() {
        let log = log_of(7);
        assert!(matches!(log.prove_consistency(6, 3), Err(MerkleError::BadOrder { .. })));
        assert!(matches!(log.prove_consistency(3, 8), Err(MerkleError::SizeOutOfRange { .. })));
    }

    #[test]
    fn truncated_or_padded_path_rejected() {
        let log = log_of(13);
        let old = log.root_at(6).unwrap();
        let new = log.root();
        let mut p = log.prove_consistency(6, 13).unwrap();
        assert!(verify_consistency(&old, &new, &p));
        p.path.push(new);
        assert!(!verify_consistency(&old, &new, &p));
        p.path.truncate(1);
        assert!(!verify_consistency(&old, &new, &p));
        p.path.clear();
        assert!(!verify_consistency(&old, &new, &p));
    }
}
