//! The proof server: an auditor that mirrors one or more lineage logs,
//! checks every tree head it sees, and only then counter-signs proof
//! packages.
//!
//! Each upstream log is mirrored entry by entry through [`LogSource`]. A new
//! tree head is accepted only if its signature and log id check out, it does
//! not shrink the log, the mirrored entries hash to its root, and it extends
//! the last accepted head (or the persisted baseline). Anything else is an
//! incident: the log is quarantined and no package touching it is signed
//! again by this instance.
//!
//! Tree heads are cached for a configurable TTL and refreshes are
//! single-flight, so a burst of queries at one snapshot costs one upstream
//! fetch.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use ed25519_dalek::SigningKey;
use lineage_core::{
    verify_consistency, verify_inclusion, verify_multi, ConsistencyPackage, EventDigest, LeafHash, LineageEvent, LogId,
    MerkleLog, MultiproofPackage, ProofPackage, PublicKey, SignedTreeHead, TreeSize,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{ClientError, LsClient};
use crate::store::{LineageStore, LogRecord};

/// Entries pulled per upstream request.
const CHUNK: u64 = 1024;

#[derive(Debug, Clone, thiserror::Error)]
#[error("upstream: {0}")]
pub struct SourceError(pub String);

impl From<ClientError> for SourceError {
    fn from(e: ClientError) -> Self {
        SourceError(e.to_string())
    }
}

/// Read access to a log, as any outside client has it.
pub trait LogSource: Send + Sync {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError>;
    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError>;
    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError>;
}

impl LogSource for LsClient {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError> {
        Ok(LsClient::latest_sth(self)?)
    }

    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError> {
        Ok(LsClient::sth_at(self, size)?)
    }

    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError> {
        Ok(LsClient::entries(self, start, end)?)
    }
}

impl LogSource for LineageStore {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError> {
        Ok(LineageStore::latest_sth(self))
    }

    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError> {
        LineageStore::sth_at(self, size).map_err(|e| SourceError(e.to_string()))
    }

    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError> {
        self.get_entries(start, end).map_err(|e| SourceError(e.to_string()))
    }
}

impl<T: LogSource + ?Sized> LogSource for Arc<T> {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError> {
        (**self).latest_sth()
    }

    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError> {
        (**self).sth_at(size)
    }

    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError> {
        (**self).entries(start, end)
    }
}

pub struct Upstream {
    pub log_id: LogId,
    pub public_key: PublicKey,
    pub source: Box<dyn LogSource>,
}

impl Upstream {
    /// An upstream whose log id is derived from its key.
    pub fn new(public_key: PublicKey, source: impl LogSource + 'static) -> Self {
        Upstream { log_id: LogId::for_key(public_key.as_bytes()), public_key, source: Box::new(source) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    BadSthSignature,
    LogIdMismatch,
    Rollback,
    /// Served entries do not hash to the served root.
    RootMismatch,
    /// The new head does not extend the last accepted one.
    Inconsistent,
    MalformedEntry,
    /// A proof computed from the mirror failed its own check.
    BadProof,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub log_id: LogId,
    pub kind: AuditKind,
    pub detail: String,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum PsError {
    #[error("not found: {missing:?}")]
    NotFound { missing: Vec<EventDigest> },
    #[error("unknown log {0}")]
    UnknownLog(LogId),
    #[error("audit failure on log {}: {:?}: {}", .0.log_id, .0.kind, .0.detail)]
    AuditFailure(Incident),
    #[error("{0}")]
    Upstream(#[from] SourceError),
    #[error("range: {0}")]
    Range(String),
}

#[derive(Debug, Clone)]
pub struct PsOptions {
    /// How long a verified head is served before re-fetching. Zero disables
    /// caching.
    pub ttl: Duration,
    /// Where accepted heads are persisted as the consistency baseline.
    pub baseline_path: Option<PathBuf>,
}

impl Default for PsOptions {
    fn default() -> Self {
        PsOptions { ttl: Duration::from_secs(2), baseline_path: None }
    }
}

#[derive(Default)]
struct MirrorState {
    log: MerkleLog,
    events: Vec<LineageEvent>,
    index: HashMap<EventDigest, u64>,
    sth: Option<SignedTreeHead>,
    /// Head loaded from disk that the first sync must extend.
    baseline: Option<SignedTreeHead>,
    verified_at: Option<Instant>,
    generation: u64,
    quarantined: Option<Incident>,
}

struct Mirror {
    log_id: LogId,
    public_key: PublicKey,
    source: Box<dyn LogSource>,
    state: RwLock<MirrorState>,
    refresh: Mutex<()>,
}

enum AuditError {
    Incident(AuditKind, String),
    Upstream(SourceError),
}

pub struct ProofServer {
    key: SigningKey,
    mirrors: Vec<Mirror>,
    opts: PsOptions,
    incidents: Mutex<Vec<Incident>>,
    baseline_lock: Mutex<()>,
    sth_fetches: AtomicU64,
    packages_signed: AtomicU64,
}

impl ProofServer {
    pub fn new(key: SigningKey, upstreams: Vec<Upstream>, opts: PsOptions) -> io::Result<Self> {
        let baselines: BTreeMap<LogId, SignedTreeHead> = match &opts.baseline_path {
            Some(p) if p.exists() => serde_json::from_slice(&fs::read(p)?)?,
            _ => BTreeMap::new(),
        };
        let mirrors = upstreams
            .into_iter()
            .map(|u| Mirror {
                log_id: u.log_id,
                public_key: u.public_key,
                source: u.source,
                state: RwLock::new(MirrorState { baseline: baselines.get(&u.log_id).cloned(), ..Default::default() }),
                refresh: Mutex::new(()),
            })
            .collect();
        Ok(ProofServer {
            key,
            mirrors,
            opts,
            incidents: Mutex::new(Vec::new()),
            baseline_lock: Mutex::new(()),
            sth_fetches: AtomicU64::new(0),
            packages_signed: AtomicU64::new(0),
        })
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey::from(&self.key)
    }

    pub fn log_ids(&self) -> Vec<LogId> {
        self.mirrors.iter().map(|m| m.log_id).collect()
    }

    /// Number of latest-head fetches sent upstream.
    pub fn sth_fetches(&self) -> u64 {
        self.sth_fetches.load(Ordering::SeqCst)
    }

    pub fn packages_signed(&self) -> u64 {
        self.packages_signed.load(Ordering::SeqCst)
    }

    pub fn incidents(&self) -> Vec<Incident> {
        self.incidents.lock().unwrap().clone()
    }

    /// The last head this server verified for a log.
    pub fn verified_sth(&self, log_id: &LogId) -> Option<SignedTreeHead> {
        self.mirror(log_id).ok()?.state.read().unwrap().sth.clone()
    }

    /// Builds a package covering every configured log that holds the event.
    pub fn build_proof_package(&self, digest: &EventDigest) -> Result<ProofPackage, PsError> {
        self.refresh_all(false)?;
        let mut found = self.locate(digest)?;
        if found.is_none() {
            self.refresh_all(true)?;
            found = self.locate(digest)?;
        }
        let (event, pairs) = found.ok_or(PsError::NotFound { missing: vec![*digest] })?;
        let (sths, proofs) = pairs.into_iter().unzip();
        self.packages_signed.fetch_add(1, Ordering::SeqCst);
        Ok(ProofPackage::sign(&self.key, event, sths, proofs))
    }

    pub fn build_multiproof_package(
        &self,
        digests: &[EventDigest],
        log_id: &LogId,
    ) -> Result<MultiproofPackage, PsError> {
        let mirror = self.mirror(log_id)?;
        self.refresh(mirror, false)?;
        let wanted: BTreeSet<EventDigest> = digests.iter().copied().collect();
        let missing = |s: &MirrorState| -> Vec<EventDigest> {
            wanted.iter().filter(|d| !s.index.contains_key(d)).copied().collect()
        };
        if !missing(&mirror.state.read().unwrap()).is_empty() {
            self.refresh(mirror, true)?;
        }
        let state = mirror.state.read().unwrap();
        let gone = missing(&state);
        if !gone.is_empty() {
            return Err(PsError::NotFound { missing: gone });
        }
        if wanted.is_empty() {
            return Err(PsError::Range("no digests requested".into()));
        }
        let sth = state.sth.clone().expect("refreshed mirror has a head");
        let mut indices: Vec<u64> = wanted.iter().map(|d| state.index[d]).collect();
        indices.sort_unstable();
        let proof = state.log.prove_multi(&indices, sth.tree_size).map_err(|e| PsError::Range(e.to_string()))?;
        let leaves: BTreeMap<u64, LeafHash> =
            indices.iter().map(|&i| (i, state.log.leaf_hash(i).expect("index in mirror"))).collect();
        if !verify_multi(&leaves, &proof, &sth.root) {
            drop(state);
            return Err(self.fail(mirror, AuditKind::BadProof, "multiproof does not reconstruct the head".into()));
        }
        let events = indices.iter().map(|&i| state.events[i as usize].clone()).collect();
        drop(state);
        self.packages_signed.fetch_add(1, Ordering::SeqCst);
        Ok(MultiproofPackage::sign(&self.key, events, proof, sth))
    }

    pub fn get_consistency(
        &self,
        log_id: &LogId,
        first: TreeSize,
        second: TreeSize,
    ) -> Result<ConsistencyPackage, PsError> {
        let mirror = self.mirror(log_id)?;
        if first > second {
            return Err(PsError::Range(format!("first {first} exceeds second {second}")));
        }
        self.refresh(mirror, false)?;
        if mirror.state.read().unwrap().log.size() < second {
            self.refresh(mirror, true)?;
        }
        let size = mirror.state.read().unwrap().log.size();
        if second > size {
            return Err(PsError::Range(format!("second {second} exceeds log size {size}")));
        }
        let first_sth = self.checked_sth_at(mirror, first)?;
        let second_sth = self.checked_sth_at(mirror, second)?;
        let proof = {
            let state = mirror.state.read().unwrap();
            state.log.prove_consistency(first, second).map_err(|e| PsError::Range(e.to_string()))?
        };
        if !verify_consistency(&first_sth.root, &second_sth.root, &proof) {
            return Err(self.fail(mirror, AuditKind::BadProof, "consistency proof failed its own check".into()));
        }
        self.packages_signed.fetch_add(1, Ordering::SeqCst);
        Ok(ConsistencyPackage::sign(&self.key, proof, first_sth, second_sth))
    }

    /// Every covering log's (head, proof) for the event, or `None` if no
    /// mirror holds it.
    #[allow(clippy::type_complexity)]
    fn locate(
        &self,
        digest: &EventDigest,
    ) -> Result<Option<(LineageEvent, Vec<(SignedTreeHead, lineage_core::InclusionProof)>)>, PsError> {
        let mut event = None;
        let mut pairs = Vec::new();
        for m in &self.mirrors {
            let state = m.state.read().unwrap();
            let Some(&index) = state.index.get(digest) else { continue };
            let sth = state.sth.clone().expect("mirror with entries has a head");
            let proof = state.log.prove_inclusion(index, sth.tree_size).expect("index below verified size");
            let leaf = state.log.leaf_hash(index).expect("index in mirror");
            if !verify_inclusion(&leaf, &proof, &sth.root) {
                drop(state);
                return Err(self.fail(
                    m,
                    AuditKind::BadProof,
                    format!("inclusion of leaf {index} failed its own check"),
                ));
            }
            event.get_or_insert_with(|| state.events[index as usize].clone());
            pairs.push((sth, proof));
        }
        Ok(event.map(|e| (e, pairs)))
    }

    fn mirror(&self, log_id: &LogId) -> Result<&Mirror, PsError> {
        self.mirrors.iter().find(|m| m.log_id == *log_id).ok_or(PsError::UnknownLog(*log_id))
    }

    fn refresh_all(&self, force: bool) -> Result<(), PsError> {
        self.mirrors.iter().try_for_each(|m| self.refresh(m, force))
    }

    fn refresh(&self, m: &Mirror, force: bool) -> Result<(), PsError> {
        let seen = {
            let s = m.state.read().unwrap();
            if let Some(inc) = &s.quarantined {
                return Err(PsError::AuditFailure(inc.clone()));
            }
            let fresh = s.verified_at.is_some_and(|t| t.elapsed() < self.opts.ttl);
            if fresh && !force {
                return Ok(());
            }
            s.generation
        };
        let _single_flight = m.refresh.lock().unwrap();
        {
            let s = m.state.read().unwrap();
            if let Some(inc) = &s.quarantined {
                return Err(PsError::AuditFailure(inc.clone()));
            }
            if s.generation != seen {
                // Someone refreshed while we waited; their result is at least as new.
                return Ok(());
            }
        }
        self.sth_fetches.fetch_add(1, Ordering::SeqCst);
        let sth = m.source.latest_sth()?;
        match self.audit(m, sth) {
            Ok(()) => Ok(()),
            Err(AuditError::Upstream(e)) => Err(e.into()),
            Err(AuditError::Incident(kind, detail)) => Err(self.fail(m, kind, detail)),
        }
    }

    /// Checks a candidate head against the mirror and, if it passes, commits
    /// the new entries. Called with the refresh lock held.
    fn audit(&self, m: &Mirror, sth: SignedTreeHead) -> Result<(), AuditError> {
        use AuditError::Incident as I;
        if sth.log_id != m.log_id {
            return Err(I(AuditKind::LogIdMismatch, format!("head claims log {}", sth.log_id)));
        }
        if !sth.verify(&m.public_key) {
            return Err(I(AuditKind::BadSthSignature, format!("head at size {}", sth.tree_size)));
        }
        let (mut log, prior) = {
            let s = m.state.read().unwrap();
            (s.log.clone(), s.sth.clone().or_else(|| s.baseline.clone()))
        };
        let have = log.size();
        if sth.tree_size < have || prior.as_ref().is_some_and(|p| p.tree_size > sth.tree_size) {
            return Err(I(AuditKind::Rollback, format!("head size {} below accepted {}", sth.tree_size, have)));
        }
        let mut fresh = Vec::new();
        let mut next = have;
        while next < sth.tree_size {
            let end = (next + CHUNK).min(sth.tree_size);
            let records = m.source.entries(next, end).map_err(AuditError::Upstream)?;
            if records.len() as u64 != end - next {
                return Err(I(
                    AuditKind::MalformedEntry,
                    format!("asked for {} entries, got {}", end - next, records.len()),
                ));
            }
            for r in records {
                if r.leaf_index != next {
                    return Err(I(AuditKind::MalformedEntry, format!("entry {} served at {next}", r.leaf_index)));
                }
                let event = r.event().map_err(|e| I(AuditKind::MalformedEntry, format!("entry {next}: {e}")))?;
                let digest = EventDigest(Sha256::digest(r.leaf_input.as_bytes()).into());
                if digest != r.digest {
                    return Err(I(AuditKind::MalformedEntry, format!("entry {next} digest does not match its bytes")));
                }
                log.append(r.leaf_input.into_bytes());
                fresh.push((digest, event));
                next += 1;
            }
        }
        if let Some(p) = &prior {
            if log.root_at(p.tree_size).ok() != Some(p.root) {
                return Err(I(
                    AuditKind::Inconsistent,
                    format!("head at size {} does not extend accepted head at size {}", sth.tree_size, p.tree_size),
                ));
            }
            let proof = log.prove_consistency(p.tree_size, sth.tree_size).expect("sizes in range");
            if !verify_consistency(&p.root, &log.root(), &proof) {
                return Err(I(AuditKind::Inconsistent, "consistency proof rejected".into()));
            }
        }
        if log.root() != sth.root {
            let kind = if prior.is_some() { AuditKind::Inconsistent } else { AuditKind::RootMismatch };
            return Err(I(kind, format!("entries do not hash to the root of the size-{} head", sth.tree_size)));
        }

        let mut s = m.state.write().unwrap();
        for (digest, event) in fresh {
            let i = s.events.len() as u64;
            s.index.entry(digest).or_insert(i);
            s.events.push(event);
        }
        s.log = log;
        s.sth = Some(sth);
        s.verified_at = Some(Instant::now());
        s.generation += 1;
        drop(s);
        self.persist_baselines();
        Ok(())
    }

    /// Fetches a historical head and checks it against the mirror.
    fn checked_sth_at(&self, m: &Mirror, size: TreeSize) -> Result<SignedTreeHead, PsError> {
        let sth = m.source.sth_at(size)?;
        let problem = if sth.log_id != m.log_id {
            Some((AuditKind::LogIdMismatch, format!("head claims log {}", sth.log_id)))
        } else if !sth.verify(&m.public_key) {
            Some((AuditKind::BadSthSignature, format!("head at size {size}")))
        } else if sth.tree_size != size {
            Some((AuditKind::Inconsistent, format!("asked for size {size}, got {}", sth.tree_size)))
        } else if m.state.read().unwrap().log.root_at(size).ok() != Some(sth.root) {
            Some((AuditKind::Inconsistent, format!("head at size {size} disagrees with the mirror")))
        } else {
            None
        };
        match problem {
            Some((kind, detail)) => Err(self.fail(m, kind, detail)),
            None => Ok(sth),
        }
    }

    fn fail(&self, m: &Mirror, kind: AuditKind, detail: String) -> PsError {
        let incident = Incident { log_id: m.log_id, kind, detail };
        m.state.write().unwrap().quarantined.get_or_insert_with(|| incident.clone());
        self.incidents.lock().unwrap().push(incident.clone());
        PsError::AuditFailure(incident)
    }

    fn persist_baselines(&self) {
        let Some(path) = &self.opts.baseline_path else { return };
        let _guard = self.baseline_lock.lock().unwrap();
        let heads: BTreeMap<LogId, SignedTreeHead> =
            self.mirrors.iter().filter_map(|m| m.state.read().unwrap().sth.clone().map(|s| (m.log_id, s))).collect();
        let tmp = path.with_extension("tmp");
        let body = serde_json::to_vec_pretty(&heads).expect("heads serialize");
        // Best effort: a lost baseline weakens the next start-up check but
        // never the correctness of served packages.
        if fs::write(&tmp, body).is_ok() {
            let _ = fs::rename(&tmp, path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyfile::derive;
    use crate::store::fixed_clock;
    use lineage_core::{sign_event, verify_proof_package, Hash32, HumanRegistry, PackageVerdict, Role, Signer};

    fn populated(n: u64, label: &str) -> (Arc<LineageStore>, Vec<EventDigest>) {
        let store = Arc::new(LineageStore::in_memory(derive(&format!("{label}/ls")), fixed_clock(1)));
        let ao = Signer::human(Role::Ao, derive("ps-test/ao"));
        let authority = derive("ps-test/authority");
        let registry = HumanRegistry::sign("t", [(Role::Ao, ao.public_key())].into(), &authority).unwrap();
        store.register_humans(registry, PublicKey::from(&authority)).unwrap();
        let mut digests = Vec::new();
        for i in 0..n {
            let e = LineageEvent {
                agent_id: ao.actor_id().into(),
                action_id: format!("{i}"),
                ts: i,
                action_type: "note".into(),
                context_hash: Hash32::of(&i.to_be_bytes()),
                prev: digests.last().copied(),
                cites: None,
                agent_sig: None,
            };
            let e = sign_event(e, &ao).unwrap();
            digests.push(lineage_core::event_digest(&e));
            store.submit_event(e).unwrap();
        }
        (store, digests)
    }

    #[test]
    fn package_for_size_eight() {
        let (store, digests) = populated(8, "p8");
        let ps = ProofServer::new(
            derive("ps"),
            vec![Upstream::new(store.public_key(), store.clone())],
            PsOptions::default(),
        )
        .unwrap();
        let pkg = ps.build_proof_package(&digests[5]).unwrap();
        assert_eq!(pkg.sths.len(), 1);
        assert_eq!(pkg.inclusion_proofs[0].audit_path.len(), 3);
        let logs = [(store.log_id(), store.public_key())].into();
        assert_eq!(verify_proof_package(&pkg, &ps.public_key(), &logs), PackageVerdict::Ok);
    }

    #[test]
    fn unknown_digest() {
        let (store, _) = populated(3, "nf");
        let ps = ProofServer::new(
            derive("ps"),
            vec![Upstream::new(store.public_key(), store.clone())],
            PsOptions::default(),
        )
        .unwrap();
        let d = EventDigest([7; 32]);
        assert!(matches!(ps.build_proof_package(&d), Err(PsError::NotFound { missing }) if missing == vec![d]));
    }

    #[test]
    fn new_events_force_refresh() {
        let (store, _) = populated(4, "stale");
        let opts = PsOptions { ttl: Duration::from_secs(3600), baseline_path: None };
        let ps = ProofServer::new(derive("ps"), vec![Upstream::new(store.public_key(), store.clone())], opts).unwrap();
        ps.refresh_all(false).unwrap();
        assert_eq!(ps.verified_sth(&store.log_id()).unwrap().tree_size, 4);
        let ao = Signer::human(Role::Ao, derive("ps-test/ao"));
        let e = LineageEvent {
            agent_id: ao.actor_id().into(),
            action_id: "late".into(),
            ts: 99,
            action_type: "note".into(),
            context_hash: Hash32::of(b"late"),
            prev: None,
            cites: None,
            agent_sig: None,
        };
        let e = sign_event(e, &ao).unwrap();
        store.submit_event(e.clone()).unwrap();
        let pkg = ps.build_proof_package(&lineage_core::event_digest(&e)).unwrap();
        assert_eq!(pkg.sths[0].tree_size, 5);
        assert_eq!(ps.sth_fetches(), 2);
    }
}
