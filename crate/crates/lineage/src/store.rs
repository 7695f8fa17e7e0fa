//! The lineage store: admission control, the append-only log and its tree
//! heads, and crash-safe persistence.
//!
//! Data directory layout:
//!
//! - `records.bin` — one frame per event: `u32 BE length ‖ u64 BE appended-at
//!   (ms) ‖ canonical event bytes`. A torn final frame is trimmed on open.
//! - `sths.jsonl` — every tree head ever issued, one JSON object per line.
//!   Doubles as the root checkpoint: the last line is the newest commitment.
//! - `actors.json` — registered agent cards and the human registry.
//! - `rejected.jsonl` — refused submissions, kept for forensics only.
//!
//! A record is synced before the tree head that covers it is written, and a
//! tree head is synced before it is handed to anyone.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use ed25519_dalek::SigningKey;
use lineage_core::{
    canonical_encode, decode_canonical, verify_card, verify_event_sig, AgentCard, CardVerdict, ConsistencyProof,
    EventDigest, EventError, HumanRegistry, InclusionProof, LeafHash, LineageEvent, LogId, MerkleLog, NodeHash,
    PublicKey, Role, SignedTreeHead, TreeSize,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Wallclock in unix milliseconds. Swappable so replays are byte-stable.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

pub fn fixed_clock(ms: u64) -> Clock {
    Arc::new(move || ms)
}

/// One log entry as served to auditors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub leaf_index: u64,
    pub digest: EventDigest,
    pub appended_at: u64,
    /// Canonical event bytes exactly as hashed into the leaf.
    pub leaf_input: String,
}

impl LogRecord {
    pub fn event(&self) -> Result<LineageEvent, EventError> {
        decode_canonical(self.leaf_input.as_bytes())
    }

    pub fn leaf_hash(&self) -> LeafHash {
        LeafHash::of(self.leaf_input.as_bytes())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("event cannot be encoded: {0}")]
    Malformed(EventError),
    #[error("unknown actor {0}")]
    UnknownActor(String),
    #[error("signature does not verify for {0}")]
    BadSignature(String),
    #[error("prev {0} is not in the log")]
    UnknownPrev(EventDigest),
    #[error("cited event {0} is not in the log")]
    UnknownCite(EventDigest),
    #[error("action id {1:?} already used by {0} for a different event")]
    Duplicate(String, String),
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
}

impl SubmitError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            SubmitError::Malformed(_) => "malformed",
            SubmitError::UnknownActor(_) => "unknown_actor",
            SubmitError::BadSignature(_) => "bad_signature",
            SubmitError::UnknownPrev(_) => "unknown_prev",
            SubmitError::UnknownCite(_) => "unknown_cite",
            SubmitError::Duplicate(..) => "duplicate",
            SubmitError::Io(_) => "storage",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("card rejected: {0:?}")]
    CardRejected(CardVerdict),
    #[error("human registry signature does not verify under the given authority")]
    RegistryRejected,
    #[error("size {requested} out of range (log size {size})")]
    Range { requested: u64, size: u64 },
}

#[derive(Clone)]
pub struct StoreOptions {
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub clock: Clock,
    /// Call `fsync` after every write. Off only for throwaway logs.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { data_dir: None, clock: system_clock(), sync: true }
    }
}

#[derive(Default, Serialize, Deserialize)]
struct Actors {
    cards: Vec<AgentCard>,
    registry: Option<HumanRegistry>,
    authority: Option<PublicKey>,
}

#[derive(Serialize)]
struct Rejection<'a> {
    at: u64,
    reason: &'a str,
    detail: String,
    event: &'a LineageEvent,
}

struct Disk {
    dir: PathBuf,
    records: File,
    sths: File,
    rejected: File,
    sync: bool,
}

impl Disk {
    fn write(file: &mut File, bytes: &[u8], sync: bool) -> io::Result<()> {
        file.write_all(bytes)?;
        if sync {
            file.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Inner {
    log: MerkleLog,
    records: Vec<LogRecord>,
    by_digest: HashMap<EventDigest, u64>,
    by_action: HashMap<(String, String), EventDigest>,
    sths: Vec<SignedTreeHead>,
    first_sth_at: BTreeMap<TreeSize, usize>,
    actors: Actors,
    agent_keys: HashMap<String, PublicKey>,
    rejected: u64,
    disk: Option<Disk>,
}

pub struct LineageStore {
    key: SigningKey,
    public_key: PublicKey,
    log_id: LogId,
    clock: Clock,
    inner: RwLock<Inner>,
}

impl LineageStore {
    pub fn in_memory(key: SigningKey, clock: Clock) -> Self {
        Self::open(key, StoreOptions { data_dir: None, clock, sync: false }).expect("in-memory open cannot fail")
    }

    /// Opens (or creates) a store. Existing records are replayed and every
    /// persisted tree head is checked against the rebuilt tree.
    pub fn open(key: SigningKey, opts: StoreOptions) -> Result<Self, StoreError> {
        let public_key = PublicKey::from(&key);
        let log_id = LogId::for_key(public_key.as_bytes());
        let mut inner = Inner::default();
        if let Some(dir) = &opts.data_dir {
            fs::create_dir_all(dir)?;
            recover(dir, &public_key, &mut inner)?;
            inner.disk = Some(Disk {
                dir: dir.clone(),
                records: append_file(&dir.join("records.bin"))?,
                sths: append_file(&dir.join("sths.jsonl"))?,
                rejected: append_file(&dir.join("rejected.jsonl"))?,
                sync: opts.sync,
            });
        }
        let store = LineageStore { key, public_key, log_id, clock: opts.clock, inner: RwLock::new(inner) };
        {
            let mut inner = store.inner.write().unwrap();
            let size = inner.log.size();
            // Resume the counter past the last checkpoint with a fresh head.
            store.issue(&mut inner, size)?;
        }
        Ok(store)
    }

    pub fn public_key(&self) -> PublicKey {
        self.public_key
    }

    pub fn log_id(&self) -> LogId {
        self.log_id
    }

    pub fn size(&self) -> TreeSize {
        self.inner.read().unwrap().log.size()
    }

    /// Registers an agent whose card verifies. Re-registering is a no-op.
    pub fn register_agent(&self, card: AgentCard) -> Result<(), StoreError> {
        let verdict = verify_card(&card, None);
        if verdict != CardVerdict::Ok {
            return Err(StoreError::CardRejected(verdict));
        }
        let pk = card.public_key().ok_or(StoreError::CardRejected(CardVerdict::Malformed))?;
        let mut inner = self.inner.write().unwrap();
        if inner.agent_keys.insert(card.identity.agent_id.clone(), pk).is_none() {
            inner.actors.cards.push(card);
            save_actors(&inner)?;
        }
        Ok(())
    }

    pub fn register_humans(&self, registry: HumanRegistry, authority: PublicKey) -> Result<(), StoreError> {
        if !registry.verify(&authority) {
            return Err(StoreError::RegistryRejected);
        }
        let mut inner = self.inner.write().unwrap();
        inner.actors.registry = Some(registry);
        inner.actors.authority = Some(authority);
        Ok(save_actors(&inner)?)
    }

    pub fn cards(&self) -> Vec<AgentCard> {
        self.inner.read().unwrap().actors.cards.clone()
    }

    pub fn card_by_name(&self, name: &str) -> Option<AgentCard> {
        self.inner.read().unwrap().actors.cards.iter().find(|c| c.name == name).cloned()
    }

    pub fn card_by_id(&self, agent_id: &str) -> Option<AgentCard> {
        self.inner.read().unwrap().actors.cards.iter().find(|c| c.identity.agent_id == agent_id).cloned()
    }

    pub fn human_registry(&self) -> Option<HumanRegistry> {
        self.inner.read().unwrap().actors.registry.clone()
    }

    /// Admits and appends one event. Resubmitting an already-stored event
    /// returns its original index together with the latest tree head.
    pub fn submit_event(&self, event: LineageEvent) -> Result<(u64, SignedTreeHead), SubmitError> {
        let bytes = canonical_encode(&event).map_err(SubmitError::Malformed)?;
        let digest = EventDigest(Sha256::digest(&bytes).into());
        let mut inner = self.inner.write().unwrap();
        if let Some(&index) = inner.by_digest.get(&digest) {
            return Ok((index, inner.sths.last().cloned().expect("store always has a head")));
        }
        if let Err(err) = admit(&inner, &event) {
            inner.rejected += 1;
            let at = (self.clock)();
            if let Some(disk) = inner.disk.as_mut() {
                let mut line =
                    serde_json::to_vec(&Rejection { at, reason: err.code(), detail: err.to_string(), event: &event })
                        .expect("rejection serializes");
                line.push(b'\n');
                Disk::write(&mut disk.rejected, &line, disk.sync)?;
            }
            return Err(err);
        }

        let appended_at = (self.clock)();
        if let Some(disk) = inner.disk.as_mut() {
            let mut frame = Vec::with_capacity(12 + bytes.len());
            frame.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            frame.extend_from_slice(&appended_at.to_be_bytes());
            frame.extend_from_slice(&bytes);
            Disk::write(&mut disk.records, &frame, disk.sync)?;
        }
        let index = push_record(&mut inner, bytes, digest, appended_at, &event);
        let size = inner.log.size();
        let sth = self.issue(&mut inner, size)?;
        Ok((index, sth))
    }

    /// The most recently issued tree head, unchanged.
    pub fn latest_sth(&self) -> SignedTreeHead {
        self.inner.read().unwrap().sths.last().cloned().expect("store always has a head")
    }

    /// The first head issued at `size`. Sizes skipped by a crash get a
    /// fresh head on demand.
    pub fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, StoreError> {
        {
            let inner = self.inner.read().unwrap();
            check_range(size, inner.log.size())?;
            if let Some(&i) = inner.first_sth_at.get(&size) {
                return Ok(inner.sths[i].clone());
            }
        }
        let mut inner = self.inner.write().unwrap();
        if let Some(&i) = inner.first_sth_at.get(&size) {
            return Ok(inner.sths[i].clone());
        }
        Ok(self.issue(&mut inner, size)?)
    }

    /// Signs a fresh head over the current size, with a new counter value.
    pub fn sign_now(&self) -> Result<SignedTreeHead, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let size = inner.log.size();
        Ok(self.issue(&mut inner, size)?)
    }

    /// Every head issued by this log, oldest first.
    pub fn issued_sths(&self) -> Vec<SignedTreeHead> {
        self.inner.read().unwrap().sths.clone()
    }

    pub fn get_entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, StoreError> {
        let inner = self.inner.read().unwrap();
        let size = inner.log.size();
        if start > end {
            return Err(StoreError::Range { requested: start, size: end });
        }
        check_range(end, size)?;
        Ok(inner.records[start as usize..end as usize].to_vec())
    }

    pub fn get_by_digest(&self, digest: &EventDigest) -> Option<LogRecord> {
        let inner = self.inner.read().unwrap();
        inner.by_digest.get(digest).map(|&i| inner.records[i as usize].clone())
    }

    pub fn root_at(&self, size: TreeSize) -> Result<NodeHash, StoreError> {
        let inner = self.inner.read().unwrap();
        check_range(size, inner.log.size())?;
        Ok(inner.log.root_at(size).expect("range checked"))
    }

    pub fn prove_inclusion(&self, index: u64, size: TreeSize) -> Result<InclusionProof, StoreError> {
        let inner = self.inner.read().unwrap();
        inner.log.prove_inclusion(index, size).map_err(|_| StoreError::Range { requested: index, size })
    }

    pub fn prove_consistency(&self, first: TreeSize, second: TreeSize) -> Result<ConsistencyProof, StoreError> {
        let inner = self.inner.read().unwrap();
        inner
            .log
            .prove_consistency(first, second)
            .map_err(|_| StoreError::Range { requested: second, size: inner.log.size() })
    }

    pub fn rejected_count(&self) -> u64 {
        self.inner.read().unwrap().rejected
    }

    fn issue(&self, inner: &mut Inner, size: TreeSize) -> io::Result<SignedTreeHead> {
        let ctr = inner.sths.last().map_or(1, |s| s.monotonic_ctr + 1);
        let root = inner.log.root_at(size).expect("size within log");
        let sth = SignedTreeHead::sign(&self.key, size, root, (self.clock)(), ctr);
        if let Some(disk) = inner.disk.as_mut() {
            let mut line = serde_json::to_vec(&sth).expect("tree head serializes");
            line.push(b'\n');
            Disk::write(&mut disk.sths, &line, disk.sync)?;
        }
        inner.first_sth_at.entry(size).or_insert(inner.sths.len());
        inner.sths.push(sth.clone());
        Ok(sth)
    }
}

fn check_range(size: u64, have: u64) -> Result<(), StoreError> {
    if size > have {
        return Err(StoreError::Range { requested: size, size: have });
    }
    Ok(())
}

fn admit(inner: &Inner, event: &LineageEvent) -> Result<(), SubmitError> {
    let key = match Role::from_actor_id(&event.agent_id) {
        Some(role) => inner.actors.registry.as_ref().and_then(|r| r.key_for(role)).copied(),
        None => inner.agent_keys.get(&event.agent_id).copied(),
    }
    .ok_or_else(|| SubmitError::UnknownActor(event.agent_id.clone()))?;
    if !verify_event_sig(event, &key) {
        return Err(SubmitError::BadSignature(event.agent_id.clone()));
    }
    if let Some(prev) = &event.prev {
        if !inner.by_digest.contains_key(prev) {
            return Err(SubmitError::UnknownPrev(*prev));
        }
    }
    if let Some(missing) = event.cites().iter().find(|c| !inner.by_digest.contains_key(c)) {
        return Err(SubmitError::UnknownCite(*missing));
    }
    if inner.by_action.contains_key(&(event.agent_id.clone(), event.action_id.clone())) {
        return Err(SubmitError::Duplicate(event.agent_id.clone(), event.action_id.clone()));
    }
    Ok(())
}

fn push_record(inner: &mut Inner, bytes: Vec<u8>, digest: EventDigest, appended_at: u64, event: &LineageEvent) -> u64 {
    let leaf_input = String::from_utf8(bytes).expect("canonical JSON is UTF-8");
    let (index, _, _) = inner.log.append(leaf_input.clone().into_bytes());
    inner.records.push(LogRecord { leaf_index: index, digest, appended_at, leaf_input });
    inner.by_digest.insert(digest, index);
    inner.by_action.insert((event.agent_id.clone(), event.action_id.clone()), digest);
    index
}

fn append_file(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

fn save_actors(inner: &Inner) -> io::Result<()> {
    let Some(disk) = &inner.disk else { return Ok(()) };
    let tmp = disk.dir.join("actors.json.tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(&serde_json::to_vec_pretty(&inner.actors).expect("actors serialize"))?;
    f.sync_all()?;
    fs::rename(tmp, disk.dir.join("actors.json"))
}

fn recover(dir: &Path, public_key: &PublicKey, inner: &mut Inner) -> Result<(), StoreError> {
    let actors = dir.join("actors.json");
    if actors.exists() {
        inner.actors = serde_json::from_slice(&fs::read(&actors)?)
            .map_err(|e| StoreError::Corrupt(format!("actors.json: {e}")))?;
        for card in &inner.actors.cards {
            if let Some(pk) = card.public_key() {
                inner.agent_keys.insert(card.identity.agent_id.clone(), pk);
            }
        }
    }

    let path = dir.join("records.bin");
    if path.exists() {
        let mut f = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let mut at = 0usize;
        while buf.len() - at >= 12 {
            let len = u32::from_be_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
            let appended_at = u64::from_be_bytes(buf[at + 4..at + 12].try_into().unwrap());
            if buf.len() - at - 12 < len {
                break;
            }
            let bytes = buf[at + 12..at + 12 + len].to_vec();
            let event = decode_canonical(&bytes)
                .map_err(|e| StoreError::Corrupt(format!("record {}: {e}", inner.records.len())))?;
            let digest = EventDigest(Sha256::digest(&bytes).into());
            push_record(inner, bytes, digest, appended_at, &event);
            at += 12 + len;
        }
        if at < buf.len() {
            // Torn write from a crash mid-append; the event was never acknowledged.
            f.set_len(at as u64)?;
            f.seek(SeekFrom::End(0))?;
            f.sync_all()?;
        }
    }

    let path = dir.join("sths.jsonl");
    if path.exists() {
        let f = File::open(&path)?;
        let mut good = 0u64;
        for line in BufReader::new(f).split(b'\n') {
            let line = line?;
            let Ok(sth) = serde_json::from_slice::<SignedTreeHead>(&line) else { break };
            if !sth.verify(public_key) {
                return Err(StoreError::Corrupt(format!("tree head {} not signed by this log", sth.monotonic_ctr)));
            }
            match inner.log.root_at(sth.tree_size) {
                Ok(root) if root == sth.root => {}
                _ => {
                    return Err(StoreError::Corrupt(format!(
                        "tree head at size {} does not match the recovered records",
                        sth.tree_size
                    )))
                }
            }
            inner.first_sth_at.entry(sth.tree_size).or_insert(inner.sths.len());
            inner.sths.push(sth);
            good += line.len() as u64 + 1;
        }
        let f = OpenOptions::new().write(true).open(&path)?;
        if f.metadata()?.len() > good {
            f.set_len(good)?;
            f.sync_all()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyfile::derive;
    use lineage_core::identity::{CardTemplate, LineageSupport, Skill};
    use lineage_core::{issue_card, sign_event, Hash32, Signer};

    fn agent() -> (Signer, AgentCard) {
        let key = derive("store/agent");
        let template = CardTemplate {
            protocol_version: "0.3.0".into(),
            name: "worker".into(),
            description: "test worker".into(),
            url: "https://agents.example.com/worker".into(),
            provider_name: "Example".into(),
            preferred_transport: None,
            version: None,
            capabilities: None,
            skills: vec![Skill { id: "w".into(), name: "Work".into(), description: "works".into() }],
            lineage_support: LineageSupport { merkle_proof_generation: true, dpop_binding: false },
        };
        let card = issue_card(&key, "example.com", 10, template);
        (Signer::agent(key, "example.com", 10), card)
    }

    fn event(signer: &Signer, n: u64, prev: Option<EventDigest>) -> LineageEvent {
        let e = LineageEvent {
            agent_id: signer.actor_id().into(),
            action_id: format!("a{n}"),
            ts: n,
            action_type: "work".into(),
            context_hash: Hash32::of(&n.to_be_bytes()),
            prev,
            cites: None,
            agent_sig: None,
        };
        sign_event(e, signer).unwrap()
    }

    fn store() -> (LineageStore, Signer) {
        let s = LineageStore::in_memory(derive("store/ls"), fixed_clock(5));
        let (signer, card) = agent();
        s.register_agent(card).unwrap();
        (s, signer)
    }

    #[test]
    fn genesis_gets_index_zero() {
        let (s, a) = store();
        let (i, sth) = s.submit_event(event(&a, 0, None)).unwrap();
        assert_eq!((i, sth.tree_size), (0, 1));
        assert!(sth.verify(&s.public_key()));
        assert_eq!(s.latest_sth(), sth);
    }

    #[test]
    fn forged_signature_rejected() {
        let (s, a) = store();
        let mut e = event(&a, 0, None);
        e.ts += 1;
        assert!(matches!(s.submit_event(e), Err(SubmitError::BadSignature(_))));
        assert_eq!(s.size(), 0);
        assert_eq!(s.rejected_count(), 1);
    }

    #[test]
    fn unknown_prev_and_duplicate() {
        let (s, a) = store();
        let e0 = event(&a, 0, None);
        let d0 = lineage_core::event_digest(&e0);
        assert!(matches!(s.submit_event(event(&a, 1, Some(d0))), Err(SubmitError::UnknownPrev(_))));
        s.submit_event(e0.clone()).unwrap();
        // Idempotent retry.
        assert_eq!(s.submit_event(e0).unwrap().0, 0);
        let mut other = event(&a, 0, None);
        other.context_hash = Hash32::of(b"different");
        let other = sign_event(LineageEvent { agent_sig: None, ..other }, &a).unwrap();
        assert!(matches!(s.submit_event(other), Err(SubmitError::Duplicate(..))));
    }

    #[test]
    fn unknown_actor() {
        let (s, _) = store();
        let stranger = Signer::agent(derive("nobody"), "example.com", 1);
        assert!(matches!(s.submit_event(event(&stranger, 0, None)), Err(SubmitError::UnknownActor(_))));
    }

    #[test]
    fn heads_for_same_size_share_root() {
        let (s, a) = store();
        s.submit_event(event(&a, 0, None)).unwrap();
        let x = s.sign_now().unwrap();
        let y = s.sign_now().unwrap();
        assert_eq!(x.root, y.root);
        assert!(y.monotonic_ctr > x.monotonic_ctr);
    }

    #[test]
    fn entries_range() {
        let (s, a) = store();
        s.submit_event(event(&a, 0, None)).unwrap();
        assert!(s.get_entries(0, 0).unwrap().is_empty());
        assert!(s.get_entries(0, 2).is_err());
        assert!(s.sth_at(2).is_err());
    }
}
