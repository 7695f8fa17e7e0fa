#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use ed25519_dalek::SigningKey;
use lineage::keyfile::derive;
use lineage::proof_server::{LogSource, SourceError};
use lineage::store::{fixed_clock, LineageStore, LogRecord, StoreOptions};
use lineage_core::{
    canonical_encode, event_digest, sign_event, EventDigest, Hash32, HumanRegistry, LineageEvent, LogId, PublicKey,
    Role, SignedTreeHead, Signer, TreeSize,
};

pub fn authority() -> SigningKey {
    derive("tests/authority")
}

pub fn registry() -> HumanRegistry {
    let ao = Signer::human(Role::Ao, derive("tests/ao"));
    HumanRegistry::sign("tests", [(Role::Ao, ao.public_key())].into(), &authority()).unwrap()
}

pub fn prepare(store: &LineageStore) {
    if store.human_registry().is_none() {
        store.register_humans(registry(), PublicKey::from(&authority())).unwrap();
    }
}

pub fn memory_store(label: &str) -> Arc<LineageStore> {
    let s = LineageStore::in_memory(derive(label), fixed_clock(1_700_000_000_000));
    prepare(&s);
    Arc::new(s)
}

pub fn disk_store(label: &str, dir: &std::path::Path) -> LineageStore {
    let s = LineageStore::open(
        derive(label),
        StoreOptions { data_dir: Some(dir.to_path_buf()), clock: fixed_clock(1_700_000_000_000), sync: false },
    )
    .unwrap();
    prepare(&s);
    s
}

/// A stream of AO-signed events, each pointing at the last. Cloning a feed
/// and continuing with another tag forks the history.
#[derive(Clone)]
pub struct Feed {
    signer: Signer,
    pub prev: Option<EventDigest>,
    pub n: u64,
    pub tag: String,
}

impl Feed {
    pub fn new(tag: &str) -> Self {
        Feed { signer: Signer::human(Role::Ao, derive("tests/ao")), prev: None, n: 0, tag: tag.into() }
    }

    pub fn next_event(&mut self) -> LineageEvent {
        let e = LineageEvent {
            agent_id: self.signer.actor_id().into(),
            action_id: format!("{}-{}", self.tag, self.n),
            ts: 1_700_000_000 + self.n,
            action_type: "approval".into(),
            context_hash: Hash32::of(format!("{}/{}", self.tag, self.n).as_bytes()),
            prev: self.prev,
            cites: None,
            agent_sig: None,
        };
        let e = sign_event(e, &self.signer).unwrap();
        self.prev = Some(event_digest(&e));
        self.n += 1;
        e
    }

    /// Appends `k` events and returns their digests.
    pub fn push(&mut self, store: &LineageStore, k: u64) -> Vec<EventDigest> {
        (0..k)
            .map(|_| {
                let e = self.next_event();
                store.submit_event(e.clone()).unwrap();
                event_digest(&e)
            })
            .collect()
    }
}

/// A source that misbehaves in one configurable way.
#[derive(Clone, Copy, Debug)]
pub enum Fault {
    /// Entry bytes altered, digest field left alone.
    GarbledEntry,
    /// A different, well-formed event served in place of the logged one.
    SubstitutedEntry,
    /// Head root changed after signing.
    TamperedRoot,
    /// Head signed by a key other than the log's.
    ForeignSigner,
    /// Head claims another log id.
    WrongLogId,
    /// Too few entries served.
    ShortRead,
    /// A smaller head served after a larger one was accepted.
    Rollback,
}

pub struct Faulty {
    inner: Arc<LineageStore>,
    fault: Fault,
    armed: Mutex<bool>,
}

impl Faulty {
    pub fn new(inner: Arc<LineageStore>, fault: Fault) -> Self {
        Faulty { inner, fault, armed: Mutex::new(false) }
    }

    pub fn arm(&self) {
        *self.armed.lock().unwrap() = true;
    }

    fn armed(&self) -> bool {
        *self.armed.lock().unwrap()
    }
}

impl LogSource for Faulty {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError> {
        let mut sth = LineageStore::latest_sth(&self.inner);
        if self.armed() {
            match self.fault {
                Fault::TamperedRoot => sth.root.0[5] ^= 0x10,
                Fault::ForeignSigner => {
                    sth = SignedTreeHead::sign(
                        &derive("tests/rogue"),
                        sth.tree_size,
                        sth.root,
                        sth.wallclock_t,
                        sth.monotonic_ctr,
                    );
                    sth.log_id = self.inner.log_id();
                }
                Fault::WrongLogId => sth.log_id = LogId([7; 32]),
                Fault::Rollback => sth = LineageStore::sth_at(&self.inner, 1).unwrap(),
                _ => {}
            }
        }
        Ok(sth)
    }

    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError> {
        LogSource::sth_at(&self.inner, size)
    }

    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError> {
        let mut records = LogSource::entries(&self.inner, start, end)?;
        if self.armed() {
            match self.fault {
                Fault::GarbledEntry => records.last_mut().unwrap().leaf_input.push(' '),
                Fault::SubstitutedEntry => {
                    let last = records.last_mut().unwrap();
                    let mut e = last.event().unwrap();
                    e.action_id.push_str("-forged");
                    let bytes = canonical_encode(&e).unwrap();
                    last.leaf_input = String::from_utf8(bytes).unwrap();
                    last.digest = event_digest(&e);
                }
                Fault::ShortRead => {
                    records.pop();
                }
                _ => {}
            }
        }
        Ok(records)
    }
}

/// Serves whichever of two histories is currently selected.
pub struct Switch {
    pub sources: Vec<Box<dyn LogSource>>,
    pub current: Mutex<usize>,
}

impl LogSource for Switch {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError> {
        self.sources[*self.current.lock().unwrap()].latest_sth()
    }
    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError> {
        self.sources[*self.current.lock().unwrap()].sth_at(size)
    }
    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError> {
        self.sources[*self.current.lock().unwrap()].entries(start, end)
    }
}

/// Two stores sharing a key and a 4-event prefix, then diverging.
pub fn forked_pair(label: &str) -> (Arc<LineageStore>, Arc<LineageStore>, Vec<EventDigest>) {
    let a = memory_store(label);
    let b = memory_store(label);
    let mut feed = Feed::new("p");
    let mut prefix = Vec::new();
    for _ in 0..4 {
        let e = feed.next_event();
        a.submit_event(e.clone()).unwrap();
        b.submit_event(e.clone()).unwrap();
        prefix.push(event_digest(&e));
    }
    let mut fork = feed.clone();
    fork.tag = "q".into();
    feed.push(&a, 3);
    fork.push(&b, 5);
    assert_eq!(a.log_id(), b.log_id());
    (a, b, prefix)
}
