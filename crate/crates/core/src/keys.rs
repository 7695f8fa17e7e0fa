//! Text forms of Ed25519 keys and signatures.
//!
//! Keys and signatures are written as `ed25519:` followed by lowercase hex.
//! Parsing also accepts standard base64 after the prefix, and public keys may
//! be the 44-byte DER `SubjectPublicKeyInfo` form instead of the raw 32 bytes.

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use base64::Engine as _;
use ed25519_dalek::{Signature, Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const KEY_PREFIX: &str = "ed25519:";

/// DER prefix of an Ed25519 `SubjectPublicKeyInfo`.
const SPKI_PREFIX: [u8; 12] = [0x30, 0x2a, 0x30, 0x05, 0x06, 0x03, 0x2b, 0x65, 0x70, 0x03, 0x21, 0x00];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("missing `ed25519:` prefix")]
    MissingPrefix,
    #[error("value is neither hex nor base64")]
    Encoding,
    #[error("wrong length: {0} bytes")]
    Length(usize),
    #[error("not a valid Ed25519 point")]
    InvalidKey,
}

fn decode_body(s: &str) -> Result<alloc::vec::Vec<u8>, KeyError> {
    let body = s.strip_prefix(KEY_PREFIX).ok_or(KeyError::MissingPrefix)?;
    if let Ok(b) = hex::decode(body) {
        return Ok(b);
    }
    base64::engine::general_purpose::STANDARD.decode(body).map_err(|_| KeyError::Encoding)
}

/// Parsed Ed25519 verifying key with the `ed25519:<hex>` text form.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(pub VerifyingKey);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, KeyError> {
        VerifyingKey::from_bytes(bytes).map(Self).map_err(|_| KeyError::InvalidKey)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn verify(&self, message: &[u8], sig: &Signature) -> bool {
        self.0.verify(message, sig).is_ok()
    }

    /// Verifies a signature given in text form; unparsable text is `false`.
    pub fn verify_str(&self, message: &[u8], sig: &str) -> bool {
        parse_signature(sig).is_ok_and(|s| self.verify(message, &s))
    }
}

impl From<&SigningKey> for PublicKey {
    fn from(key: &SigningKey) -> Self {
        Self(key.verifying_key())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{KEY_PREFIX}{}", hex::encode(self.as_bytes()))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({self})")
    }
}

impl FromStr for PublicKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = decode_body(s)?;
        let key: [u8; 32] = match raw.len() {
            32 => raw.as_slice().try_into().unwrap(),
            44 if raw[..12] == SPKI_PREFIX => raw[12..].try_into().unwrap(),
            n => return Err(KeyError::Length(n)),
        };
        Self::from_bytes(&key)
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_signature(s: &str) -> Result<Signature, KeyError> {
    let raw = decode_body(s)?;
    let bytes: [u8; 64] = raw.as_slice().try_into().map_err(|_| KeyError::Length(raw.len()))?;
    Ok(Signature::from_bytes(&bytes))
}

/// Signature kept in its text form so that untrusted, malformed values can
/// still be carried and rejected at verification time.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignatureString(pub String);

impl SignatureString {
    pub fn sign(key: &SigningKey, message: &[u8]) -> Self {
        Self::from(&key.sign(message))
    }

    pub fn parse(&self) -> Result<Signature, KeyError> {
        parse_signature(&self.0)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&Signature> for SignatureString {
    fn from(sig: &Signature) -> Self {
        Self(format!("{KEY_PREFIX}{}", hex::encode(sig.to_bytes())))
    }
}

impl fmt::Display for SignatureString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
