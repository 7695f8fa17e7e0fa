//! Verifier trust configuration.
//!
//! ```json
//! {
//!   "ps_public_key": "ed25519:…",
//!   "proof_server": "http://127.0.0.1:7500",
//!   "logs": [{"log_id": "…", "public_key": "ed25519:…", "base_url": "http://127.0.0.1:7400"}],
//!   "card_sources": {"aid://…": "http://127.0.0.1:7400/agents/evidence-harvester"},
//!   "human_registry": "registry.json",
//!   "registry_authority": "ed25519:…"
//! }
//! ```
//!
//! Only `ps_public_key` and `logs` are required. URLs are needed for online
//! verification only; a relative `human_registry` path is resolved against
//! the config file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use lineage_core::{HumanRegistry, LogId, PublicKey, TrustAnchors, TrustedLogs};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TrustError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("unparsable trust config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("log {0} listed twice")]
    DuplicateLog(LogId),
    #[error("log id {0} is not the hash of its public key")]
    LogIdMismatch(LogId),
    #[error("human registry given without a registry authority")]
    NoAuthority,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustedLog {
    pub log_id: LogId,
    pub public_key: PublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustConfig {
    pub ps_public_key: PublicKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proof_server: Option<String>,
    pub logs: Vec<TrustedLog>,
    /// agent_id → base URL serving that agent's card.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub card_sources: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_registry: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry_authority: Option<PublicKey>,
}

impl TrustConfig {
    pub fn new(ps_public_key: PublicKey, log_keys: impl IntoIterator<Item = PublicKey>) -> Self {
        TrustConfig {
            ps_public_key,
            proof_server: None,
            logs: log_keys
                .into_iter()
                .map(|k| TrustedLog { log_id: LogId::for_key(k.as_bytes()), public_key: k, base_url: None })
                .collect(),
            card_sources: BTreeMap::new(),
            human_registry: None,
            registry_authority: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrustError> {
        let mut cfg: TrustConfig = serde_json::from_slice(&fs::read(path)?)?;
        if let (Some(reg), Some(dir)) = (&cfg.human_registry, path.parent()) {
            if reg.is_relative() {
                cfg.human_registry = Some(dir.join(reg));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrustError> {
        let mut seen = BTreeSet::new();
        for log in &self.logs {
            if !seen.insert(log.log_id) {
                return Err(TrustError::DuplicateLog(log.log_id));
            }
            if LogId::for_key(log.public_key.as_bytes()) != log.log_id {
                return Err(TrustError::LogIdMismatch(log.log_id));
            }
        }
        if self.human_registry.is_some() && self.registry_authority.is_none() {
            return Err(TrustError::NoAuthority);
        }
        Ok(())
    }

    pub fn trusted_logs(&self) -> TrustedLogs {
        self.logs.iter().map(|l| (l.log_id, l.public_key)).collect()
    }

    /// Verifier anchors. A registry passed in (for example one shipped in a
    /// transcript) takes precedence over the configured file. The registry is
    /// not checked here: the chain verifier checks it against the authority
    /// and reports a bad one per step.
    pub fn anchors(&self, registry: Option<HumanRegistry>) -> Result<TrustAnchors, TrustError> {
        let registry = match (registry, &self.human_registry) {
            (Some(r), _) => Some(r),
            (None, Some(path)) => Some(serde_json::from_slice(&fs::read(path)?)?),
            (None, None) => None,
        };
        if registry.is_some() && self.registry_authority.is_none() {
            return Err(TrustError::NoAuthority);
        }
        Ok(TrustAnchors {
            ps_key: self.ps_public_key,
            logs: self.trusted_logs(),
            human_registry: registry,
            registry_authority: self.registry_authority,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyfile::derive;

    #[test]
    fn rejects_bad_log_id_and_duplicates() {
        let ls = PublicKey::from(&derive("t/ls"));
        let mut cfg = TrustConfig::new(PublicKey::from(&derive("t/ps")), [ls]);
        cfg.validate().unwrap();
        cfg.logs.push(cfg.logs[0].clone());
        assert!(matches!(cfg.validate(), Err(TrustError::DuplicateLog(_))));
        cfg.logs.pop();
        cfg.logs[0].log_id = LogId([1; 32]);
        assert!(matches!(cfg.validate(), Err(TrustError::LogIdMismatch(_))));
    }

    #[test]
    fn relative_registry_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrustConfig::new(PublicKey::from(&derive("t/ps")), []);
        cfg.human_registry = Some("reg.json".into());
        cfg.registry_authority = Some(PublicKey::from(&derive("t/auth")));
        fs::write(dir.path().join("trust.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
        let loaded = TrustConfig::load(&dir.path().join("trust.json")).unwrap();
        assert_eq!(loaded.human_registry.unwrap(), dir.path().join("reg.json"));
    }
}
