mod common;

use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::Duration;

use common::{forked_pair, memory_store, Fault, Faulty, Feed, Switch};
use lineage::client::{ClientError, LsClient, PsClient};
use lineage::keyfile::derive;
use lineage::proof_server::{AuditKind, LogSource, ProofServer, PsError, PsOptions, SourceError, Upstream};
use lineage::service;
use lineage::store::{LineageStore, LogRecord};
use lineage_core::{
    event_digest, verify_consistency_package, verify_inclusion, verify_multiproof_package, verify_proof_package,
    EventDigest, LogId, PublicKey, SignedTreeHead, TreeSize, TrustedLogs,
};

fn ps(upstreams: Vec<Upstream>, ttl: Duration) -> ProofServer {
    ProofServer::new(derive("tests/ps"), upstreams, PsOptions { ttl, baseline_path: None }).unwrap()
}

fn trusted(stores: &[&LineageStore]) -> TrustedLogs {
    stores.iter().map(|s| (s.log_id(), s.public_key())).collect()
}

/// Counts latest-head fetches reaching the store.
struct Counting {
    inner: Arc<LineageStore>,
    calls: Arc<Mutex<u64>>,
}

impl LogSource for Counting {
    fn latest_sth(&self) -> Result<SignedTreeHead, SourceError> {
        *self.calls.lock().unwrap() += 1;
        // Widen the window in which concurrent callers pile up.
        thread::sleep(Duration::from_millis(20));
        Ok(LineageStore::latest_sth(&self.inner))
    }
    fn sth_at(&self, size: TreeSize) -> Result<SignedTreeHead, SourceError> {
        LogSource::sth_at(&self.inner, size)
    }
    fn entries(&self, start: u64, end: u64) -> Result<Vec<LogRecord>, SourceError> {
        LogSource::entries(&self.inner, start, end)
    }
}

#[test]
fn concurrent_burst_costs_one_fetch() {
    let store = memory_store("coalesce/ls");
    let digests = Feed::new("c").push(&store, 20);
    let calls = Arc::new(Mutex::new(0));
    let source = Counting { inner: store.clone(), calls: calls.clone() };
    let server = Arc::new(ps(vec![Upstream::new(store.public_key(), source)], Duration::from_secs(60)));
    let barrier = Arc::new(Barrier::new(100));
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let (server, barrier, d) = (server.clone(), barrier.clone(), digests[i % 20]);
            thread::spawn(move || {
                barrier.wait();
                server.build_proof_package(&d).unwrap()
            })
        })
        .collect();
    let pkgs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(server.sth_fetches(), 1);
    assert_eq!(*calls.lock().unwrap(), 1);
    assert_eq!(server.packages_signed(), 100);
    let logs = trusted(&[&store]);
    assert!(pkgs.iter().all(|p| verify_proof_package(p, &server.public_key(), &logs).is_ok()));
    // All answered from one snapshot.
    assert!(pkgs.iter().all(|p| p.sths == pkgs[0].sths));
}

#[test]
fn zero_ttl_fetches_every_time() {
    let store = memory_store("ttl0/ls");
    let d = Feed::new("t").push(&store, 3);
    let server = ps(vec![Upstream::new(store.public_key(), store.clone())], Duration::ZERO);
    for _ in 0..5 {
        server.build_proof_package(&d[0]).unwrap();
    }
    assert_eq!(server.sth_fetches(), 5);
}

#[test]
fn federation_over_two_logs() {
    let a = memory_store("fed/a");
    let b = memory_store("fed/b");
    let mut feed = Feed::new("f");
    let mut shared = Vec::new();
    for _ in 0..6 {
        let e = feed.next_event();
        a.submit_event(e.clone()).unwrap();
        b.submit_event(e.clone()).unwrap();
        shared.push(event_digest(&e));
    }
    let only_b = feed.push(&b, 3);
    let server = ps(
        vec![Upstream::new(a.public_key(), a.clone()), Upstream::new(b.public_key(), b.clone())],
        Duration::from_secs(60),
    );
    let logs = trusted(&[&a, &b]);

    let pkg = server.build_proof_package(&shared[2]).unwrap();
    assert_eq!(pkg.sths.len(), 2);
    assert_eq!(pkg.inclusion_proofs.len(), 2);
    assert!(verify_proof_package(&pkg, &server.public_key(), &logs).is_ok());
    // Each (head, proof) pair stands alone.
    for (sth, proof) in pkg.sths.iter().zip(&pkg.inclusion_proofs) {
        assert!(sth.verify(&logs[&sth.log_id]));
        assert!(verify_inclusion(&pkg.leaf_hash, proof, &sth.root));
    }
    // A verifier that trusts only one of the logs rejects the package.
    let partial = trusted(&[&a]);
    assert!(!verify_proof_package(&pkg, &server.public_key(), &partial).is_ok());

    let pkg = server.build_proof_package(&only_b[0]).unwrap();
    assert_eq!(pkg.sths.len(), 1);
    assert_eq!(pkg.sths[0].log_id, b.log_id());
}

#[test]
fn independent_instances_are_interchangeable() {
    let store = memory_store("stateless/ls");
    let d = Feed::new("s").push(&store, 9);
    let p1 = ps(vec![Upstream::new(store.public_key(), store.clone())], Duration::from_secs(60));
    let p2 = ps(vec![Upstream::new(store.public_key(), store.clone())], Duration::ZERO);
    let logs = trusted(&[&store]);
    for digest in &d {
        let (x, y) = (p1.build_proof_package(digest).unwrap(), p2.build_proof_package(digest).unwrap());
        assert!(verify_proof_package(&x, &p1.public_key(), &logs).is_ok());
        assert!(verify_proof_package(&y, &p1.public_key(), &logs).is_ok());
        assert_eq!(x, y);
    }
}

#[test]
fn multiproof_and_consistency() {
    let store = memory_store("multi/ls");
    let d = Feed::new("m").push(&store, 40);
    let server = ps(vec![Upstream::new(store.public_key(), store.clone())], Duration::from_secs(60));
    let logs = trusted(&[&store]);
    let pick = [d[3], d[17], d[39], d[0]];
    let pkg = server.build_multiproof_package(&pick, &store.log_id()).unwrap();
    assert!(verify_multiproof_package(&pkg, &server.public_key(), &logs).is_ok());
    assert_eq!(pkg.events.len(), 4);

    match server.build_multiproof_package(&[d[1], EventDigest([9; 32])], &store.log_id()) {
        Err(PsError::NotFound { missing }) => assert_eq!(missing, [EventDigest([9; 32])]),
        other => panic!("{other:?}"),
    }
    assert!(matches!(server.build_multiproof_package(&pick, &LogId([1; 32])), Err(PsError::UnknownLog(_))));

    for (first, second) in [(1, 40), (7, 8), (0, 40), (40, 40), (13, 29)] {
        let c = server.get_consistency(&store.log_id(), first, second).unwrap();
        assert!(verify_consistency_package(&c, &server.public_key(), &logs).is_ok(), "{first}..{second}");
    }
    assert!(matches!(server.get_consistency(&store.log_id(), 5, 41), Err(PsError::Range(_))));
    assert!(matches!(server.get_consistency(&store.log_id(), 6, 5), Err(PsError::Range(_))));
}

#[test]
fn faults_at_the_log_boundary_sign_nothing() {
    let cases = [
        (Fault::GarbledEntry, AuditKind::MalformedEntry),
        (Fault::SubstitutedEntry, AuditKind::Inconsistent),
        (Fault::TamperedRoot, AuditKind::BadSthSignature),
        (Fault::ForeignSigner, AuditKind::BadSthSignature),
        (Fault::WrongLogId, AuditKind::LogIdMismatch),
        (Fault::ShortRead, AuditKind::MalformedEntry),
        (Fault::Rollback, AuditKind::Rollback),
    ];
    for (fault, expected) in cases {
        let store = memory_store(&format!("fault/{fault:?}"));
        let mut feed = Feed::new("x");
        let first = feed.push(&store, 5);
        let source = Arc::new(Faulty::new(store.clone(), fault));
        let server = ps(vec![Upstream::new(store.public_key(), source.clone())], Duration::ZERO);
        // Honest warm-up so that later faults have a baseline to contradict.
        server.build_proof_package(&first[0]).unwrap();
        let signed_before = server.packages_signed();

        feed.push(&store, 4);
        source.arm();
        for attempt in 0..3 {
            match server.build_proof_package(&first[1]) {
                Err(PsError::AuditFailure(inc)) => {
                    assert_eq!(inc.kind, expected, "{fault:?} attempt {attempt}: {}", inc.detail);
                    assert_eq!(inc.log_id, store.log_id());
                }
                other => panic!("{fault:?}: expected audit failure, got {other:?}"),
            }
        }
        assert_eq!(server.packages_signed(), signed_before, "{fault:?}");
        assert!(server.build_multiproof_package(&first, &store.log_id()).is_err());
        assert!(server.get_consistency(&store.log_id(), 1, 5).is_err());
        assert_eq!(server.packages_signed(), signed_before, "{fault:?}");
        assert_eq!(server.incidents().len(), 1, "{fault:?}: quarantine is sticky, one incident recorded");
    }
}

#[test]
fn faults_on_first_contact_sign_nothing() {
    for fault in [Fault::GarbledEntry, Fault::SubstitutedEntry, Fault::TamperedRoot, Fault::ShortRead] {
        let store = memory_store(&format!("cold/{fault:?}"));
        let d = Feed::new("y").push(&store, 6);
        let source = Faulty::new(store.clone(), fault);
        source.arm();
        let server = ps(vec![Upstream::new(store.public_key(), source)], Duration::ZERO);
        assert!(matches!(server.build_proof_package(&d[2]), Err(PsError::AuditFailure(_))), "{fault:?}");
        assert_eq!(server.packages_signed(), 0);
    }
}

#[test]
fn forked_log_is_an_audit_failure_over_http() {
    let (a, b, prefix) = forked_pair("fork/ls");
    let ha = service::ls::serve(a.clone(), "127.0.0.1:0").unwrap();
    let hb = service::ls::serve(b.clone(), "127.0.0.1:0").unwrap();
    let switch = Arc::new(Switch {
        sources: vec![Box::new(LsClient::new(&ha.base_url())), Box::new(LsClient::new(&hb.base_url()))],
        current: Mutex::new(0),
    });
    let server = Arc::new(ps(vec![Upstream::new(a.public_key(), switch.clone())], Duration::ZERO));
    let hp = service::ps::serve(server.clone(), "127.0.0.1:0").unwrap();
    let client = PsClient::new(&hp.base_url());

    let pkg = client.package(&prefix[1]).unwrap();
    assert_eq!(pkg.sths[0].tree_size, 7);
    *switch.current.lock().unwrap() = 1;
    match client.package(&prefix[1]) {
        Err(e @ ClientError::Status { status: 409, .. }) => assert_eq!(e.code().as_deref(), Some("audit_failure")),
        other => panic!("{other:?}"),
    }
    assert_eq!(server.packages_signed(), 1);
    assert_eq!(server.incidents()[0].kind, AuditKind::Inconsistent);
    // Switching back does not lift the quarantine.
    *switch.current.lock().unwrap() = 0;
    assert!(client.package(&prefix[1]).is_err());
    assert_eq!(server.packages_signed(), 1);
    for h in [ha, hb, hp] {
        h.shutdown();
    }
}

#[test]
fn baseline_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("baseline.json");
    let (a, b, prefix) = forked_pair("baseline/ls");
    let opts = || PsOptions { ttl: Duration::ZERO, baseline_path: Some(path.clone()) };

    let first = ProofServer::new(derive("tests/ps"), vec![Upstream::new(a.public_key(), a.clone())], opts()).unwrap();
    first.build_proof_package(&prefix[0]).unwrap();
    drop(first);
    assert!(path.exists());

    // A fresh instance pointed at the forked history notices on first contact.
    let second = ProofServer::new(derive("tests/ps"), vec![Upstream::new(b.public_key(), b.clone())], opts()).unwrap();
    match second.build_proof_package(&prefix[0]) {
        Err(PsError::AuditFailure(inc)) => assert_eq!(inc.kind, AuditKind::Inconsistent),
        other => panic!("{other:?}"),
    }
    assert_eq!(second.packages_signed(), 0);

    // The honest history still passes.
    let third = ProofServer::new(derive("tests/ps"), vec![Upstream::new(a.public_key(), a.clone())], opts()).unwrap();
    third.build_proof_package(&prefix[0]).unwrap();
}

#[test]
fn http_surface() {
    let store = memory_store("http-ps/ls");
    let d = Feed::new("h").push(&store, 10);
    let ls = service::ls::serve(store.clone(), "127.0.0.1:0").unwrap();
    let server = Arc::new(ps(vec![Upstream::new(store.public_key(), LsClient::new(&ls.base_url()))], Duration::ZERO));
    let hp = service::ps::serve(server.clone(), "127.0.0.1:0").unwrap();
    let client = PsClient::new(&hp.base_url());
    let logs = trusted(&[&store]);

    let key: PublicKey = client.key().unwrap();
    assert_eq!(key, server.public_key());
    let pkg = client.package(&d[4]).unwrap();
    assert!(verify_proof_package(&pkg, &key, &logs).is_ok());
    let multi = client.multi(store.log_id(), vec![d[0], d[9]]).unwrap();
    assert!(verify_multiproof_package(&multi, &key, &logs).is_ok());
    let cons = client.consistency(store.log_id(), 3, 10).unwrap();
    assert!(verify_consistency_package(&cons, &key, &logs).is_ok());

    let missing = client.package(&EventDigest([0xab; 32])).unwrap_err();
    assert!(matches!(missing, ClientError::NotFound(_)));
    assert_eq!(missing.code().as_deref(), Some("not_found"));
    let unknown = client.multi(LogId([3; 32]), vec![d[0]]).unwrap_err();
    assert_eq!(unknown.code().as_deref(), Some("unknown_log"));
    let range = client.consistency(store.log_id(), 3, 99).unwrap_err();
    assert_eq!(range.code().as_deref(), Some("range"));

    // Upstream gone: a transport-class 502, not an audit failure.
    ls.shutdown();
    let down = client.package(&d[4]).unwrap_err();
    assert!(matches!(down, ClientError::Status { status: 502, .. }), "{down:?}");
    assert!(server.incidents().is_empty());
    hp.shutdown();
}
