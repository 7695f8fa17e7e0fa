//! SHA-256 digests and the 32-byte newtypes built on them.
//!
//! Every digest serializes as 64 lowercase hex characters. Parsing accepts
//! either case.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;

/// Domain separation prefix for leaf hashes.
pub const LEAF_PREFIX: u8 = 0x00;
/// Domain separation prefix for internal node hashes.
pub const NODE_PREFIX: u8 = 0x01;

pub fn sha256(data: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(data).into()
}

pub fn sha256_concat(parts: &[&[u8]]) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("expected {DIGEST_LEN}-byte hex digest")]
pub struct DigestParseError;

pub(crate) fn parse_hex32(s: &str) -> Result<[u8; DIGEST_LEN], DigestParseError> {
    let mut out = [0u8; DIGEST_LEN];
    hex::decode_to_slice(s, &mut out).map_err(|_| DigestParseError)?;
    Ok(out)
}

macro_rules! digest_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; DIGEST_LEN]);

        impl $name {
            pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
                Self(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                for b in self.0 {
                    write!(f, "{:02x}", b)?;
                }
                Ok(())
            }
        }

        impl FromStr for $name {
            type Err = DigestParseError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                parse_hex32(s).map(Self)
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

digest_newtype!(
    /// `H(0x00 ∥ payload)`: the hash of a single log entry.
    LeafHash
);
digest_newtype!(
    /// A Merkle tree node or root. Internal nodes are `H(0x01 ∥ left ∥ right)`.
    NodeHash
);
digest_newtype!(
    /// SHA-256 of an event's full canonical encoding (signature included).
    /// Used for `prev` and `cites` references and as the lookup key at the
    /// proof server.
    EventDigest
);
digest_newtype!(
    /// Identifies one log instance: SHA-256 of the log's public key.
    LogId
);
digest_newtype!(
    /// Arbitrary caller-supplied 32-byte digest (context and artifact hashes).
    Hash32
);

impl LeafHash {
    pub fn of(payload: &[u8]) -> Self {
        Self(sha256_concat(&[&[LEAF_PREFIX], payload]))
    }
}

impl NodeHash {
    pub fn combine(left: &NodeHash, right: &NodeHash) -> Self {
        Self(sha256_concat(&[&[NODE_PREFIX], &left.0, &right.0]))
    }

    /// Root of the empty tree: SHA-256 of the empty string.
    pub fn empty() -> Self {
        Self(sha256(&[]))
    }
}

impl From<LeafHash> for NodeHash {
    fn from(leaf: LeafHash) -> Self {
        Self(leaf.0)
    }
}

impl Hash32 {
    pub fn of(data: &[u8]) -> Self {
        Self(sha256(data))
    }
}

impl LogId {
    pub fn for_key(public_key: &[u8; 32]) -> Self {
        Self(sha256(public_key))
    }
}
