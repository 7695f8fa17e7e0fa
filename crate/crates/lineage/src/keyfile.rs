//! On-disk signing keys.
//!
//! A key file is a small JSON object:
//!
//! ```json
//! {"algorithm":"ed25519","public_key":"ed25519:<hex>","secret_key":"<hex seed>"}
//! ```

use std::fs;
use std::io;
use std::path::Path;

use ed25519_dalek::SigningKey;
use lineage_core::PublicKey;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum KeyFileError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("unparsable key file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported algorithm {0:?}")]
    Algorithm(String),
    #[error("secret key must be 32 hex-encoded bytes")]
    Secret,
    #[error("public key does not match the secret key")]
    Mismatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFile {
    pub algorithm: String,
    pub public_key: PublicKey,
    pub secret_key: String,
}

impl KeyFile {
    pub fn from_key(key: &SigningKey) -> Self {
        KeyFile {
            algorithm: "ed25519".into(),
            public_key: PublicKey::from(key),
            secret_key: hex::encode(key.to_bytes()),
        }
    }

    pub fn signing_key(&self) -> Result<SigningKey, KeyFileError> {
        if self.algorithm != "ed25519" {
            return Err(KeyFileError::Algorithm(self.algorithm.clone()));
        }
        let seed: [u8; 32] =
            hex::decode(&self.secret_key).ok().and_then(|b| b.try_into().ok()).ok_or(KeyFileError::Secret)?;
        let key = SigningKey::from_bytes(&seed);
        if PublicKey::from(&key) != self.public_key {
            return Err(KeyFileError::Mismatch);
        }
        Ok(key)
    }
}

pub fn generate() -> SigningKey {
    let mut seed = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut seed);
    SigningKey::from_bytes(&seed)
}

/// Deterministic key for fixtures and replayable demos. Never use for real
/// identities: anyone who knows the label knows the key.
pub fn derive(label: &str) -> SigningKey {
    SigningKey::from_bytes(&Sha256::digest(label.as_bytes()).into())
}

pub fn load(path: &Path) -> Result<SigningKey, KeyFileError> {
    let file: KeyFile = serde_json::from_slice(&fs::read(path)?)?;
    file.signing_key()
}

pub fn save(path: &Path, key: &SigningKey) -> io::Result<()> {
    let mut body = serde_json::to_vec_pretty(&KeyFile::from_key(key))?;
    body.push(b'\n');
    write_private(path, &body)
}

#[cfg(unix)]
fn write_private(path: &Path, body: &[u8]) -> io::Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = fs::OpenOptions::new().write(true).create(true).truncate(true).mode(0o600).open(path)?;
    f.write_all(body)
}

#[cfg(not(unix))]
fn write_private(path: &Path, body: &[u8]) -> io::Result<()> {
    fs::write(path, body)
}
