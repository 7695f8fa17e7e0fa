//! Scripted FedRAMP authorization workflow.
//!
//! Five agents (A1–A5) and four human roles (AO, CL, SO, 3PAO) produce the
//! eleven-event chain
//!
//! ```text
//! E0 → E1 → E2 → E2a → E3 → E3a → E4 → E4a → E5 → E5a → E6
//! ```
//!
//! with E4 citing {E2, E3} and E5 citing {E2, E3, E4}. Events are submitted to
//! a lineage store, packaged by a proof server, and the resulting transcript
//! is re-verified offline as an independent assessor would. Tamper directives
//! alter either the script (before anything is appended) or the transcript
//! (after), for negative testing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use ed25519_dalek::SigningKey;
use lineage_core::identity::{Capabilities, CardTemplate, LineageSupport, Skill};
use lineage_core::{
    event_digest, issue_card, sign_event, to_canonical_vec, verify_chain, AgentCard, ChainPolicy, ChainReport,
    ConsistencyPackage, EventDigest, Hash32, HumanRegistry, LineageEvent, LogId, ProofPackage, PublicKey, Role,
    SignatureString, SignedTreeHead, Signer, TreeSize,
};
use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleItem, EvidenceCapsule};
use crate::client::{ClientError, LsClient, PsClient};
use crate::keyfile;
use crate::proof_server::{ProofServer, PsError, PsOptions, Upstream};
use crate::service::{self, ServiceHandle};
use crate::source::BundleSource;
use crate::store::{Clock, LineageStore, StoreError, StoreOptions, SubmitError};
use crate::trust::{TrustConfig, TrustError};

pub const DOMAIN: &str = "fedramp.gov";
/// Card issuance time shared by all demo agents.
pub const ISSUED_AT: u64 = 1_758_075_040;
pub const WORKFLOW_ID: &str = "fedramp-demo";

/// Human-signed steps and the role that must sign each.
pub const REQUIRED_APPROVALS: [(&str, Role); 6] = [
    ("boundary_approval", Role::Ao),
    ("inventory_approval", Role::Cl),
    ("risk_acceptance", Role::So),
    ("ssp_approval", Role::Cl),
    ("sar_signed", Role::ThreePao),
    ("ato_decision", Role::Ao),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Agent(u8),
    Human(Role),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Agent(n) => write!(f, "A{n}"),
            Actor::Human(r) => f.write_str(r.label()),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(role) = Role::from_actor_id(&format!("hid://{s}")) {
            return Ok(Actor::Human(role));
        }
        s.strip_prefix('A').and_then(|n| n.parse().ok()).map(Actor::Agent).ok_or_else(|| format!("unknown actor {s:?}"))
    }
}

impl Serialize for Actor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub id: String,
    pub actor: Actor,
    pub action_type: String,
    pub prev: Option<String>,
    #[serde(default)]
    pub cites: Vec<String>,
    /// Synthetic artifact whose hash becomes the event's context hash.
    pub artifact: Option<String>,
    pub ts: u64,
}

/// What a tamper directive corrupts in the transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Field,
    Signature,
    Proof,
    Sth,
    Card,
    Prev,
    PsSig,
}

impl Surface {
    pub const ALL: [Surface; 7] = [
        Surface::Field,
        Surface::Signature,
        Surface::Proof,
        Surface::Sth,
        Surface::Card,
        Surface::Prev,
        Surface::PsSig,
    ];

    fn name(self) -> &'static str {
        match self {
            Surface::Field => "field",
            Surface::Signature => "signature",
            Surface::Proof => "proof",
            Surface::Sth => "sth",
            Surface::Card => "card",
            Surface::Prev => "prev",
            Surface::PsSig => "ps_sig",
        }
    }
}

impl FromStr for Surface {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Surface::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown surface {s:?}"))
    }
}

/// Text forms: `mutate:<step>:<surface>`, `skip:<step>`,
/// `drop-cite:<step>:<cited step>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Tamper {
    /// After appending: corrupt what the transcript shows for a step.
    Mutate { step: String, surface: Surface },
    /// Before appending: leave a step out and wire its successor to its
    /// predecessor.
    Skip { step: String },
    /// Before appending: remove one cite from a step.
    DropCite { step: String, cited: String },
}

impl FromStr for Tamper {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["mutate", step, surface] => Ok(Tamper::Mutate { step: step.to_string(), surface: surface.parse()? }),
            ["skip", step] => Ok(Tamper::Skip { step: step.to_string() }),
            ["drop-cite", step, cited] => Ok(Tamper::DropCite { step: step.to_string(), cited: cited.to_string() }),
            _ => Err(format!(
                "bad tamper directive {s:?}; expected mutate:<step>:<surface>, skip:<step> or drop-cite:<step>:<cited>"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowScript {
    pub workflow_id: String,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub tamper: Vec<Tamper>,
}

impl WorkflowScript {
    /// The eleven-step authorization workflow, one minute between steps.
    pub fn fedramp(base_ts: u64) -> Self {
        use Actor::{Agent, Human};
        #[rustfmt::skip]
        #[allow(clippy::type_complexity)]
        let table: [(&str, Actor, &str, Option<&str>, &[&str], Option<&str>); 11] = [
            ("E0",  Human(Role::Ao),       "boundary_approval",  None,        &[],                 Some("boundary")),
            ("E1",  Agent(1),              "readiness_start",    Some("E0"),  &[],                 None),
            ("E2",  Agent(2),              "collect_inventory",  Some("E1"),  &[],                 Some("inventory")),
            ("E2a", Human(Role::Cl),       "inventory_approval", Some("E2"),  &[],                 None),
            ("E3",  Agent(3),              "scan_results",       Some("E2a"), &[],                 Some("scan-report")),
            ("E3a", Human(Role::So),       "risk_acceptance",    Some("E3"),  &[],                 None),
            ("E4",  Agent(4),              "build_ssp",          Some("E3a"), &["E2", "E3"],       Some("ssp")),
            ("E4a", Human(Role::Cl),       "ssp_approval",       Some("E4"),  &[],                 None),
            ("E5",  Agent(5),              "publish_capsule",    Some("E4a"), &["E2", "E3", "E4"], None),
            ("E5a", Human(Role::ThreePao), "sar_signed",         Some("E5"),  &[],                 Some("sar")),
            ("E6",  Human(Role::Ao),       "ato_decision",       Some("E5a"), &[],                 None),
        ];
        let steps = table
            .iter()
            .enumerate()
            .map(|(k, (id, actor, ty, prev, cites, artifact))| StepSpec {
                id: id.to_string(),
                actor: *actor,
                action_type: ty.to_string(),
                prev: prev.map(str::to_string),
                cites: cites.iter().map(|c| c.to_string()).collect(),
                artifact: artifact.map(str::to_string),
                ts: base_ts + 60 * k as u64,
            })
            .collect();
        WorkflowScript { workflow_id: WORKFLOW_ID.into(), steps, tamper: Vec::new() }
    }

    pub fn with_tamper(mut self, t: Tamper) -> Self {
        self.tamper.push(t);
        self
    }

    /// Steps after applying the pre-append directives.
    pub fn effective_steps(&self) -> Result<Vec<StepSpec>, HarnessError> {
        let mut steps = self.steps.clone();
        for t in &self.tamper {
            match t {
                Tamper::Skip { step } => {
                    let pos = position(&steps, step)?;
                    let gone = steps.remove(pos);
                    for s in &mut steps {
                        if s.prev.as_deref() == Some(step) {
                            s.prev = gone.prev.clone();
                        }
                        s.cites.retain(|c| c != step);
                    }
                }
                Tamper::DropCite { step, cited } => {
                    let pos = position(&steps, step)?;
                    let before = steps[pos].cites.len();
                    steps[pos].cites.retain(|c| c != cited);
                    if steps[pos].cites.len() == before {
                        return Err(HarnessError::Script(format!("{step} does not cite {cited}")));
                    }
                }
                Tamper::Mutate { .. } => {}
            }
        }
        Ok(steps)
    }
}

fn position(steps: &[StepSpec], id: &str) -> Result<usize, HarnessError> {
    steps.iter().position(|s| s.id == id).ok_or_else(|| HarnessError::Script(format!("no step {id}")))
}

/// Cite requirements of the authorization workflow.
pub fn fedramp_policy() -> ChainPolicy {
    let mut policy = ChainPolicy::default();
    policy.required_cites.insert("build_ssp".into(), vec!["collect_inventory".into(), "scan_results".into()]);
    policy
        .required_cites
        .insert("publish_capsule".into(), vec!["collect_inventory".into(), "scan_results".into(), "build_ssp".into()]);
    policy
}

/// Everyone's keys, cards and the signed human registry.
#[derive(Clone)]
pub struct Cast {
    pub agents: BTreeMap<u8, (Signer, AgentCard)>,
    pub humans: BTreeMap<Role, Signer>,
    pub registry: HumanRegistry,
    pub registry_authority: SigningKey,
    pub ls_key: SigningKey,
    pub ps_key: SigningKey,
}

impl Cast {
    /// Keys derived from `label`: the same label always yields the same cast.
    pub fn deterministic(label: &str, agents: u8) -> Self {
        Self::build(agents, |who| keyfile::derive(&format!("{label}/{who}")))
    }

    pub fn random(agents: u8) -> Self {
        Self::build(agents, |_| keyfile::generate())
    }

    fn build(agents: u8, mut key: impl FnMut(&str) -> SigningKey) -> Self {
        let agents = (1..=agents)
            .map(|n| {
                let k = key(&format!("A{n}"));
                let card = issue_card(&k, DOMAIN, ISSUED_AT, agent_template(n));
                (n, (Signer::agent(k, DOMAIN, ISSUED_AT), card))
            })
            .collect();
        let humans: BTreeMap<Role, Signer> = [Role::Ao, Role::Cl, Role::So, Role::ThreePao]
            .into_iter()
            .map(|r| (r, Signer::human(r, key(r.label()))))
            .collect();
        let registry_authority = key("registry-authority");
        let registry = HumanRegistry::sign(
            WORKFLOW_ID,
            humans.iter().map(|(r, s)| (*r, s.public_key())).collect(),
            &registry_authority,
        )
        .expect("distinct human keys");
        Cast { agents, humans, registry, registry_authority, ls_key: key("ls"), ps_key: key("ps") }
    }

    pub fn signer(&self, actor: Actor) -> Option<&Signer> {
        match actor {
            Actor::Agent(n) => self.agents.get(&n).map(|(s, _)| s),
            Actor::Human(r) => self.humans.get(&r),
        }
    }

    pub fn cards(&self) -> Vec<AgentCard> {
        self.agents.values().map(|(_, c)| c.clone()).collect()
    }

    /// Offline trust config: keys only, no URLs.
    pub fn trust_config(&self) -> TrustConfig {
        let mut t = TrustConfig::new(PublicKey::from(&self.ps_key), [PublicKey::from(&self.ls_key)]);
        t.registry_authority = Some(PublicKey::from(&self.registry_authority));
        t
    }
}

fn agent_template(n: u8) -> CardTemplate {
    #[rustfmt::skip]
    let (name, version, streaming, push, skills): (&str, &str, bool, bool, &[(&str, &str)]) = match n {
        1 => ("readiness-coordinator", "1.0.0", false, true, &[
            ("initiate-workflow", "Workflow Initiation"),
            ("validate-boundary-approval", "Boundary Approval Validation"),
            ("generate-readiness-event", "Readiness Event Generation")]),
        2 => ("evidence-harvester", "2.1.0", true, false, &[
            ("collect-inventory", "Asset Inventory Collection"),
            ("harvest-iam-policies", "IAM Policy Harvesting"),
            ("baseline-configuration", "Configuration Baseline Collection"),
            ("hash-artifacts", "Artifact Hashing")]),
        3 => ("scanner-orchestrator", "1.5.2", true, true, &[
            ("vulnerability-scan", "Vulnerability Scanning"),
            ("configuration-scan", "Configuration Compliance Scanning"),
            ("scan-orchestration", "Scan Orchestration"),
            ("result-signing", "Scan Result Signing")]),
        4 => ("ssp-packager", "3.0.1", false, false, &[
            ("assemble-ssp", "SSP Assembly"),
            ("evidence-citation", "Evidence Citation"),
            ("document-generation", "Document Generation"),
            ("integrity-binding", "Evidence Integrity Binding")]),
        5 => ("3pao-liaison", "1.2.3", false, true, &[
            ("package-evidence", "Evidence Capsule Packaging"),
            ("generate-proofs", "Inclusion Proof Generation"),
            ("capsule-delivery", "Secure Capsule Delivery"),
            ("provenance-tracking", "Provenance Tracking")]),
        _ => ("", "0.1.0", false, false, &[("work", "Generic Work")]),
    };
    let name = if name.is_empty() { format!("agent-{n}") } else { name.to_string() };
    CardTemplate {
        protocol_version: "0.3.0".into(),
        description: format!("A{n} in the authorization workflow"),
        url: format!("https://agents.{DOMAIN}/{name}"),
        provider_name: "FedRAMP Authority".into(),
        preferred_transport: Some("JSONRPC".into()),
        version: Some(version.into()),
        capabilities: Some(Capabilities { streaming: Some(streaming), push_notifications: Some(push) }),
        skills: skills
            .iter()
            .map(|(id, label)| Skill { id: id.to_string(), name: label.to_string(), description: format!("{label}.") })
            .collect(),
        lineage_support: LineageSupport { merkle_proof_generation: true, dpop_binding: true },
        name,
    }
}

/// Synthetic artifact bytes; only their hash enters the log.
pub fn artifact_bytes(workflow_id: &str, step: &str, artifact: &str) -> Vec<u8> {
    let body = match artifact {
        "boundary" => "baseline=moderate; boundary=vpc-prod-east,vpc-prod-west; owner=system-owner".to_string(),
        "inventory" => (0..12).map(|i| format!("asset-{i:02}: vm t3.large us-east-1\n")).collect(),
        "scan-report" => (0..12).map(|i| format!("asset-{i:02}: critical=0 high={} medium=2\n", i % 2)).collect(),
        "ssp" => "controls: AC-2 AU-2 AU-6 CA-2 CA-6 CM-8 PL-2 RA-5 SI-2".to_string(),
        "sar" => "assessment complete; residual risk accepted per risk_acceptance".to_string(),
        other => format!("artifact {other}"),
    };
    format!("{workflow_id}/{step}\n{body}").into_bytes()
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("script: {0}")]
    Script(String),
    #[error("no key for actor {0}")]
    ActorMissing(Actor),
    #[error("genesis rule: {0} would be appended before an AO boundary approval")]
    Genesis(String),
    #[error("{service} refused step {step}: {message}")]
    Refused { service: &'static str, step: String, message: String },
    #[error("{service} unreachable at step {step}: {message}")]
    Transport { service: &'static str, step: String, message: String },
    #[error("{0}")]
    Trust(#[from] TrustError),
    #[error("{0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn is_transport(&self) -> bool {
        matches!(self, HarnessError::Transport { .. })
    }
}

/// A failure from a service call, tagged by whether it is transport-level.
pub struct CallError {
    pub transport: bool,
    pub message: String,
}

impl From<ClientError> for CallError {
    fn from(e: ClientError) -> Self {
        CallError { transport: e.is_transport(), message: e.to_string() }
    }
}

impl From<SubmitError> for CallError {
    fn from(e: SubmitError) -> Self {
        CallError { transport: false, message: e.to_string() }
    }
}

impl From<PsError> for CallError {
    fn from(e: PsError) -> Self {
        CallError { transport: matches!(e, PsError::Upstream(_)), message: e.to_string() }
    }
}

/// The calls the workflow makes on the two services.
pub trait Endpoints {
    fn submit(&self, event: &LineageEvent) -> Result<(u64, SignedTreeHead), CallError>;
    fn latest_sth(&self) -> Result<SignedTreeHead, CallError>;
    fn package(&self, digest: &EventDigest) -> Result<ProofPackage, CallError>;
    fn consistency(&self, log_id: LogId, first: TreeSize, second: TreeSize) -> Result<ConsistencyPackage, CallError>;
}

/// Services reached over HTTP.
pub struct Remote {
    pub ls: LsClient,
    pub ps: PsClient,
}

impl Endpoints for Remote {
    fn submit(&self, event: &LineageEvent) -> Result<(u64, SignedTreeHead), CallError> {
        let r = self.ls.submit(event)?;
        Ok((r.leaf_index, r.sth))
    }

    fn latest_sth(&self) -> Result<SignedTreeHead, CallError> {
        Ok(self.ls.latest_sth()?)
    }

    fn package(&self, digest: &EventDigest) -> Result<ProofPackage, CallError> {
        Ok(self.ps.package(digest)?)
    }

    fn consistency(&self, log_id: LogId, first: TreeSize, second: TreeSize) -> Result<ConsistencyPackage, CallError> {
        Ok(self.ps.consistency(log_id, first, second)?)
    }
}

/// Services called in-process.
pub struct Local {
    pub store: Arc<LineageStore>,
    pub ps: Arc<ProofServer>,
}

impl Local {
    /// An in-memory store and a proof server auditing it directly.
    pub fn new(cast: &Cast, clock: Clock) -> Result<Self, HarnessError> {
        let store = Arc::new(LineageStore::in_memory(cast.ls_key.clone(), clock));
        register(&store, cast)?;
        let ps = ProofServer::new(
            cast.ps_key.clone(),
            vec![Upstream::new(store.public_key(), store.clone())],
            PsOptions::default(),
        )?;
        Ok(Local { store, ps: Arc::new(ps) })
    }
}

impl Endpoints for Local {
    fn submit(&self, event: &LineageEvent) -> Result<(u64, SignedTreeHead), CallError> {
        Ok(self.store.submit_event(event.clone())?)
    }

    fn latest_sth(&self) -> Result<SignedTreeHead, CallError> {
        Ok(self.store.latest_sth())
    }

    fn package(&self, digest: &EventDigest) -> Result<ProofPackage, CallError> {
        Ok(self.ps.build_proof_package(digest)?)
    }

    fn consistency(&self, log_id: LogId, first: TreeSize, second: TreeSize) -> Result<ConsistencyPackage, CallError> {
        Ok(self.ps.get_consistency(&log_id, first, second)?)
    }
}

fn register(store: &LineageStore, cast: &Cast) -> Result<(), HarnessError> {
    for card in cast.cards() {
        store.register_agent(card)?;
    }
    store.register_humans(cast.registry.clone(), PublicKey::from(&cast.registry_authority))?;
    Ok(())
}

/// A store and a proof server on loopback HTTP, the proof server auditing
/// the store through its public API.
pub struct Deployment {
    pub store: Arc<LineageStore>,
    pub ps: Arc<ProofServer>,
    ls_http: ServiceHandle,
    ps_http: ServiceHandle,
}

impl Deployment {
    /// `ttl` is the proof server's head cache lifetime; zero makes every
    /// package reflect the log's latest head, which deterministic runs need.
    pub fn start(cast: &Cast, clock: Clock, data_dir: Option<PathBuf>, ttl: Duration) -> Result<Self, HarnessError> {
        let store = Arc::new(LineageStore::open(cast.ls_key.clone(), StoreOptions { data_dir, clock, sync: true })?);
        register(&store, cast)?;
        let ls_http = service::ls::serve(store.clone(), "127.0.0.1:0")?;
        let upstream = Upstream::new(store.public_key(), LsClient::new(&ls_http.base_url()));
        let opts = PsOptions { ttl, baseline_path: None };
        let ps = Arc::new(ProofServer::new(cast.ps_key.clone(), vec![upstream], opts)?);
        let ps_http = service::ps::serve(ps.clone(), "127.0.0.1:0")?;
        Ok(Deployment { store, ps, ls_http, ps_http })
    }

    pub fn ls_url(&self) -> String {
        self.ls_http.base_url()
    }

    pub fn ps_url(&self) -> String {
        self.ps_http.base_url()
    }

    pub fn remote(&self) -> Remote {
        Remote { ls: LsClient::new(&self.ls_url()), ps: PsClient::new(&self.ps_url()) }
    }

    /// Online trust config pointing at this deployment.
    pub fn trust_config(&self, cast: &Cast) -> TrustConfig {
        let mut t = cast.trust_config();
        t.proof_server = Some(self.ps_url());
        t.logs[0].base_url = Some(self.ls_url());
        t.card_sources = cast
            .cards()
            .into_iter()
            .map(|c| (c.identity.agent_id.clone(), format!("{}/agents/{}", self.ls_url(), c.name)))
            .collect();
        t
    }

    pub fn shutdown(self) {
        self.ls_http.shutdown();
        self.ps_http.shutdown();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step: String,
    pub actor: Actor,
    pub leaf_index: u64,
    pub digest: EventDigest,
    pub package: ProofPackage,
}

/// Everything an assessor needs to re-verify the run offline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub workflow_id: String,
    pub head: EventDigest,
    pub entries: Vec<TranscriptEntry>,
    pub cards: Vec<AgentCard>,
    pub registry: HumanRegistry,
    pub latest_sth: SignedTreeHead,
}

impl Transcript {
    pub fn events(&self) -> impl Iterator<Item = &LineageEvent> {
        self.entries.iter().map(|e| &e.package.event)
    }

    pub fn entry(&self, step: &str) -> Option<&TranscriptEntry> {
        self.entries.iter().find(|e| e.step == step)
    }

    pub fn source(&self) -> BundleSource {
        BundleSource::new(self.entries.iter().map(|e| (e.digest, e.package.clone())), self.cards.clone())
    }

    /// Applies one post-append corruption.
    pub fn mutate(&mut self, step: &str, surface: Surface) -> Result<(), HarnessError> {
        let i = self
            .entries
            .iter()
            .position(|e| e.step == step)
            .ok_or_else(|| HarnessError::Script(format!("no step {step} in transcript")))?;
        let actor = self.entries[i].actor;
        let pkg = &mut self.entries[i].package;
        match surface {
            Surface::Field => pkg.event.context_hash.0[0] ^= 1,
            Surface::Signature => {
                let sig = pkg.event.agent_sig.as_ref().map(|s| s.as_str().to_string()).unwrap_or_default();
                pkg.event.agent_sig = Some(SignatureString(flip_last_hex(&sig)));
            }
            Surface::Proof => match pkg.inclusion_proofs.first_mut() {
                Some(p) if !p.audit_path.is_empty() => p.audit_path[0].0[0] ^= 1,
                Some(p) => p.audit_path.push(lineage_core::NodeHash([0; 32])),
                None => return Err(HarnessError::Script("package has no proofs".into())),
            },
            Surface::Sth => pkg.sths[0].root.0[0] ^= 1,
            Surface::Prev => {
                pkg.event.prev = Some(match pkg.event.prev {
                    Some(mut d) => {
                        d.0[0] ^= 1;
                        d
                    }
                    None => EventDigest([0xee; 32]),
                })
            }
            Surface::PsSig => pkg.ps_signature = SignatureString(flip_last_hex(pkg.ps_signature.as_str())),
            Surface::Card => match actor {
                Actor::Agent(_) => {
                    let id = pkg.event.agent_id.clone();
                    let card = self
                        .cards
                        .iter_mut()
                        .find(|c| c.identity.agent_id == id)
                        .ok_or_else(|| HarnessError::Script(format!("no card for {id}")))?;
                    card.skills[0].name.push('*');
                }
                Actor::Human(role) => {
                    // Swap in a key the authority never vouched for.
                    let rogue = PublicKey::from(&keyfile::derive("rogue-approver"));
                    self.registry.entries.insert(role, rogue);
                }
            },
        }
        Ok(())
    }
}

fn flip_last_hex(s: &str) -> String {
    let mut out = s.to_string();
    match out.pop() {
        Some(c) => out.push(if c == '0' { '1' } else { '0' }),
        None => out.push('0'),
    }
    out
}

/// Workflow rules beyond cryptographic validity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub ok: bool,
    /// The first event is an AO boundary approval.
    pub genesis: bool,
    /// Required approval action types that never appear.
    pub missing_approvals: Vec<String>,
    /// Approvals signed by the wrong role.
    pub wrong_approver: Vec<String>,
    pub human_action_types: BTreeSet<String>,
}

/// Checks approvals and the genesis rule over events in chain order.
pub fn check_policy<'a>(events: impl IntoIterator<Item = &'a LineageEvent>) -> PolicyReport {
    let events: Vec<&LineageEvent> = events.into_iter().collect();
    let genesis =
        events.first().is_some_and(|e| e.action_type == "boundary_approval" && e.agent_id == Role::Ao.actor_id());
    let human_action_types: BTreeSet<String> =
        events.iter().filter(|e| Role::from_actor_id(&e.agent_id).is_some()).map(|e| e.action_type.clone()).collect();
    let mut missing_approvals = Vec::new();
    let mut wrong_approver = Vec::new();
    for (ty, role) in REQUIRED_APPROVALS {
        let signed: Vec<&&LineageEvent> = events.iter().filter(|e| e.action_type == ty).collect();
        if signed.is_empty() {
            missing_approvals.push(ty.to_string());
        } else if signed.iter().any(|e| e.agent_id != role.actor_id()) {
            wrong_approver.push(ty.to_string());
        }
    }
    PolicyReport {
        ok: genesis && missing_approvals.is_empty() && wrong_approver.is_empty(),
        genesis,
        missing_approvals,
        wrong_approver,
        human_action_types,
    }
}

pub struct Run {
    pub transcript: Transcript,
    pub report: ChainReport,
    pub policy: PolicyReport,
    pub capsule: Option<EvidenceCapsule>,
    /// Offline trust context used for the assessor's verification.
    pub trust: TrustConfig,
}

impl Run {
    pub fn is_ok(&self) -> bool {
        self.report.is_ok() && self.policy.ok
    }
}

/// Drives the script against the services, then verifies the (possibly
/// tampered) transcript offline under a separate trust context.
pub fn run_fedramp(script: &WorkflowScript, cast: &Cast, ep: &dyn Endpoints) -> Result<Run, HarnessError> {
    let steps = script.effective_steps()?;
    let mut digests: HashMap<String, EventDigest> = HashMap::new();
    let mut appended: Vec<(StepSpec, u64, EventDigest)> = Vec::new();
    let mut capsule = None;
    let mut genesis_seen = false;

    let call = |service: &'static str, step: &str, e: CallError| {
        if e.transport {
            HarnessError::Transport { service, step: step.into(), message: e.message }
        } else {
            HarnessError::Refused { service, step: step.into(), message: e.message }
        }
    };
    let lookup = |digests: &HashMap<String, EventDigest>, id: &str| {
        digests.get(id).copied().ok_or_else(|| HarnessError::Script(format!("reference to unappended step {id}")))
    };

    for step in &steps {
        let signer = cast.signer(step.actor).ok_or(HarnessError::ActorMissing(step.actor))?;
        if matches!(step.actor, Actor::Agent(_)) && !genesis_seen {
            return Err(HarnessError::Genesis(step.id.clone()));
        }
        let prev = step.prev.as_deref().map(|p| lookup(&digests, p)).transpose()?;
        let cites = step.cites.iter().map(|c| lookup(&digests, c)).collect::<Result<Vec<_>, _>>()?;
        let context_hash = if step.action_type == "publish_capsule" {
            let c = seal_capsule(&script.workflow_id, &step.cites, &digests, cast, ep)
                .map_err(|e| call("proof server", &step.id, e))?;
            let h = Hash32::of(&to_canonical_vec(&c).expect("capsule encodes"));
            capsule = Some(c);
            h
        } else {
            let artifact = step.artifact.clone().unwrap_or_else(|| step.action_type.clone());
            Hash32::of(&artifact_bytes(&script.workflow_id, &step.id, &artifact))
        };
        let event = LineageEvent {
            agent_id: signer.actor_id().into(),
            action_id: format!("{}/{}", script.workflow_id, step.id),
            ts: step.ts,
            action_type: step.action_type.clone(),
            context_hash,
            prev,
            cites: if cites.is_empty() { None } else { Some(cites) },
            agent_sig: None,
        };
        let event = sign_event(event, signer).map_err(|e| HarnessError::Script(e.to_string()))?;
        let digest = event_digest(&event);
        let (index, _) = ep.submit(&event).map_err(|e| call("lineage store", &step.id, e))?;
        if step.action_type == "boundary_approval" && step.actor == Actor::Human(Role::Ao) {
            genesis_seen = true;
        }
        digests.insert(step.id.clone(), digest);
        appended.push((step.clone(), index, digest));
    }

    let mut entries = Vec::with_capacity(appended.len());
    for (step, leaf_index, digest) in appended {
        let package = ep.package(&digest).map_err(|e| call("proof server", &step.id, e))?;
        entries.push(TranscriptEntry { step: step.id, actor: step.actor, leaf_index, digest, package });
    }
    let head = entries.last().map(|e| e.digest).ok_or_else(|| HarnessError::Script("empty workflow".into()))?;
    let latest_sth = ep.latest_sth().map_err(|e| call("lineage store", "final", e))?;
    let mut transcript = Transcript {
        workflow_id: script.workflow_id.clone(),
        head,
        entries,
        cards: cast.cards(),
        registry: cast.registry.clone(),
        latest_sth,
    };
    for t in &script.tamper {
        if let Tamper::Mutate { step, surface } = t {
            transcript.mutate(step, *surface)?;
        }
    }

    let trust = cast.trust_config();
    let (report, policy) = assess(&transcript, &trust)?;
    Ok(Run { transcript, report, policy, capsule, trust })
}

/// The assessor's independent check of a transcript.
pub fn assess(transcript: &Transcript, trust: &TrustConfig) -> Result<(ChainReport, PolicyReport), HarnessError> {
    let anchors = trust.anchors(Some(transcript.registry.clone()))?;
    let report = match verify_chain(&transcript.head, &transcript.source(), &anchors, &fedramp_policy()) {
        Ok(r) => r,
        Err(never) => match never {},
    };
    let policy = check_policy(transcript.events());
    Ok((report, policy))
}

fn seal_capsule(
    workflow_id: &str,
    cited: &[String],
    digests: &HashMap<String, EventDigest>,
    cast: &Cast,
    ep: &dyn Endpoints,
) -> Result<EvidenceCapsule, CallError> {
    let latest_sth = ep.latest_sth()?;
    let mut items = Vec::new();
    let mut consistency: Vec<ConsistencyPackage> = Vec::new();
    for id in cited {
        let digest = digests[id];
        let package = ep.package(&digest)?;
        for sth in &package.sths {
            let older = sth.log_id == latest_sth.log_id && sth.tree_size < latest_sth.tree_size;
            if older && !consistency.iter().any(|c| c.first_sth.tree_size == sth.tree_size) {
                consistency.push(ep.consistency(sth.log_id, sth.tree_size, latest_sth.tree_size)?);
            }
        }
        items.push(CapsuleItem { digest, package });
    }
    let ids: BTreeSet<&str> = items.iter().map(|i| i.package.event.agent_id.as_str()).collect();
    let cards = cast.cards().into_iter().filter(|c| ids.contains(c.identity.agent_id.as_str())).collect();
    Ok(EvidenceCapsule { workflow_id: workflow_id.into(), items, cards, latest_sth, consistency })
}

/// Graphviz rendering of the chain: solid edges for `prev`, dashed for
/// `cites`, boxes for human approvals. Steps that failed verification are
/// drawn red.
pub fn to_dot(transcript: &Transcript, report: Option<&ChainReport>) -> String {
    let failed: BTreeSet<EventDigest> =
        report.map(|r| r.steps.iter().filter(|s| !s.is_ok()).map(|s| s.digest).collect()).unwrap_or_default();
    let roots: HashMap<EventDigest, String> = report
        .and_then(|r| r.commitment.as_ref().map(|c| (r, c)))
        .map(|(r, c)| r.steps.iter().zip(&c.roots).map(|(s, root)| (s.digest, hex::encode(&root[..4]))).collect())
        .unwrap_or_default();
    let by_digest: HashMap<EventDigest, &str> =
        transcript.entries.iter().map(|e| (e.digest, e.step.as_str())).collect();

    let mut out = String::from("digraph lineage {\n  rankdir=LR;\n  node [fontname=\"Helvetica\", fontsize=10];\n");
    for e in &transcript.entries {
        let ev = &e.package.event;
        let shape = if matches!(e.actor, Actor::Human(_)) { "box" } else { "ellipse" };
        let color = if failed.contains(&e.digest) { ", color=red, fontcolor=red" } else { "" };
        let root = roots.get(&e.digest).map(|r| format!("\\nR={r}…")).unwrap_or_default();
        out += &format!(
            "  \"{}\" [shape={shape}{color}, label=\"{}\\n{}\\n{}{root}\"];\n",
            e.step, e.step, ev.action_type, e.actor
        );
    }
    for e in &transcript.entries {
        let ev = &e.package.event;
        if let Some(p) = ev.prev.as_ref().and_then(|p| by_digest.get(p)) {
            out += &format!("  \"{p}\" -> \"{}\";\n", e.step);
        }
        for c in ev.cites().iter().filter_map(|c| by_digest.get(c)) {
            out += &format!("  \"{c}\" -> \"{}\" [style=dashed, label=\"cites\"];\n", e.step);
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::fixed_clock;

    #[test]
    fn script_shape() {
        let s = WorkflowScript::fedramp(ISSUED_AT);
        let ids: Vec<&str> = s.steps.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["E0", "E1", "E2", "E2a", "E3", "E3a", "E4", "E4a", "E5", "E5a", "E6"]);
        for w in s.steps.windows(2) {
            assert_eq!(w[1].prev.as_deref(), Some(w[0].id.as_str()));
        }
    }

    #[test]
    fn tamper_parsing() {
        assert_eq!(
            "mutate:E2:field".parse::<Tamper>().unwrap(),
            Tamper::Mutate { step: "E2".into(), surface: Surface::Field }
        );
        assert_eq!("skip:E3a".parse::<Tamper>().unwrap(), Tamper::Skip { step: "E3a".into() });
        assert!("mutate:E2".parse::<Tamper>().is_err());
        assert!("mutate:E2:nope".parse::<Tamper>().is_err());
    }

    #[test]
    fn skip_rewires_prev() {
        let s = WorkflowScript::fedramp(0).with_tamper(Tamper::Skip { step: "E3a".into() });
        let steps = s.effective_steps().unwrap();
        assert_eq!(steps.len(), 10);
        assert_eq!(steps.iter().find(|s| s.id == "E4").unwrap().prev.as_deref(), Some("E3"));
    }

    #[test]
    fn honest_in_process_run() {
        let cast = Cast::deterministic("unit", 5);
        let local = Local::new(&cast, fixed_clock(ISSUED_AT * 1000)).unwrap();
        let run = run_fedramp(&WorkflowScript::fedramp(ISSUED_AT), &cast, &local).unwrap();
        assert!(run.is_ok(), "{:#?}", run.report);
        assert_eq!(local.store.size(), 11);
        assert_eq!(run.report.package_verifications, 16);
    }

    #[test]
    fn actor_round_trip() {
        for a in [Actor::Agent(3), Actor::Human(Role::ThreePao), Actor::Human(Role::Ao)] {
            assert_eq!(a.to_string().parse::<Actor>().unwrap(), a);
        }
    }
}
