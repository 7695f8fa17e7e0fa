//! `lineage` — operator CLI.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage or input error,
//! 3 transport error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use lineage::capsule::{verify_capsule, EvidenceCapsule};
use lineage::client::{fetch_card, ClientError, LsClient, PsClient};
use lineage::config::Config;
use lineage::harness::{self, Cast, Deployment, HarnessError, Tamper, Transcript, WorkflowScript};
use lineage::keyfile::{self, KeyFile};
use lineage::proof_server::{ProofServer, PsOptions, Upstream};
use lineage::source::RemoteSource;
use lineage::store::{fixed_clock, system_clock, LineageStore, StoreOptions};
use lineage::trust::TrustConfig;
use lineage::{service, store};
use lineage_core::{
    event_digest, issue_card, sign_event, verify_card, verify_chain, verify_consistency_package, verify_inclusion,
    verify_multiproof_package, verify_proof_package, AgentCard, CardTemplate, ChainReport, EventDigest, Hash32,
    HumanRegistry, LineageEvent, LineageSupport, LogId, MerkleLog, PackageVerdict, Role, Signer, Skill,
};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "lineage", version, about = "Verifiable lineage logs for agent workflows")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an Ed25519 key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Derive the key from a label instead of the OS RNG (tests, demos).
        #[arg(long)]
        derive: Option<String>,
    },
    #[command(subcommand)]
    Card(CardCmd),
    #[command(subcommand)]
    Registry(RegistryCmd),
    #[command(subcommand)]
    Event(EventCmd),
    #[command(subcommand)]
    Sth(SthCmd),
    #[command(subcommand)]
    Proof(ProofCmd),
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Same as `verify chain`.
    VerifyChain(ChainArgs),
    #[command(subcommand)]
    Demo(DemoCmd),
    #[command(subcommand)]
    Serve(ServeCmd),
}

#[derive(Subcommand)]
enum CardCmd {
    /// Issue an agent card bound to a key, domain and issuance time.
    Create {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        domain: String,
        /// Issuance time, unix seconds (default: now).
        #[arg(long)]
        ts: Option<u64>,
        #[arg(long, default_value = "")]
        description: String,
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        version: Option<String>,
        /// `id=Display Name`; repeatable.
        #[arg(long = "skill", value_parser = parse_skill)]
        skills: Vec<Skill>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a card's agent id and identity proof.
    Verify {
        /// Card file; or use --url.
        card: Option<PathBuf>,
        /// Fetch from `<url>/.well-known/agent-card.json`.
        #[arg(long, conflicts_with = "card")]
        url: Option<String>,
        /// Expected issuance time.
        #[arg(long)]
        ts: Option<u64>,
    },
    /// Serve cards at `/.well-known/agent-card.json` (first card) and
    /// `/agents/<name>/.well-known/agent-card.json`.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7300")]
        listen: String,
        #[arg(required = true)]
        cards: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Sign the roster of human approvers for a workflow.
    Sign {
        /// Key of the authority vouching for the roster.
        #[arg(long)]
        authority: PathBuf,
        #[arg(long)]
        workflow: String,
        /// `ROLE=keyfile`, e.g. `AO=ao.key`; repeatable.
        #[arg(long = "member", value_parser = parse_member, required = true)]
        members: Vec<(Role, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum EventCmd {
    /// Build and sign a lineage event.
    Sign {
        #[arg(long)]
        key: PathBuf,
        /// Agent card for the key; or --role for a human approver.
        #[arg(long, required_unless_present = "role", conflicts_with = "role")]
        card: Option<PathBuf>,
        /// AO, CL, SO or 3PAO.
        #[arg(long, value_parser = parse_role)]
        role: Option<Role>,
        #[arg(long)]
        action_id: String,
        #[arg(long)]
        action_type: String,
        /// Unix seconds (default: now).
        #[arg(long)]
        ts: Option<u64>,
        /// Hex SHA-256 of the action's context.
        #[arg(long, required_unless_present = "artifact", conflicts_with = "artifact")]
        context_hash: Option<Hash32>,
        /// File whose SHA-256 becomes the context hash.
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long)]
        prev: Option<EventDigest>,
        /// Repeatable.
        #[arg(long = "cite")]
        cites: Vec<EventDigest>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Submit a signed event to a lineage store.
    Submit {
        #[arg(long, env = "LINEAGE_LS_URL")]
        ls: String,
        event: PathBuf,
    },
}

#[derive(Subcommand)]
enum SthCmd {
    /// Fetch a signed tree head, checking it against the trust config if given.
    Get {
        #[arg(long, env = "LINEAGE_LS_URL")]
        ls: String,
        #[arg(long)]
        size: Option<u64>,
        #[arg(long, env = "LINEAGE_TRUST")]
        trust: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProofCmd {
    /// Audit path for a leaf, rebuilt from the log's entries and checked
    /// against its signed head.
    Inclusion {
        #[arg(long, env = "LINEAGE_LS_URL")]
        ls: String,
        #[arg(long)]
        index: u64,
        /// Tree size (default: latest).
        #[arg(long)]
        size: Option<u64>,
    },
    /// Signed consistency package from the proof server.
    Consistency {
        #[arg(long, env = "LINEAGE_PS_URL")]
        ps: String,
        #[arg(long)]
        log_id: LogId,
        #[arg(long)]
        first: u64,
        #[arg(long)]
        second: u64,
        #[arg(long, env = "LINEAGE_TRUST")]
        trust: Option<PathBuf>,
    },
    /// Batched proof for several events in one log.
    Multi {
        #[arg(long, env = "LINEAGE_PS_URL")]
        ps: String,
        #[arg(long)]
        log_id: LogId,
        #[arg(required = true)]
        digests: Vec<EventDigest>,
        #[arg(long, env = "LINEAGE_TRUST")]
        trust: Option<PathBuf>,
    },
    /// Audited proof package for one event.
    Package {
        #[arg(long, env = "LINEAGE_PS_URL")]
        ps: String,
        digest: EventDigest,
        #[arg(long, env = "LINEAGE_TRUST")]
        trust: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Walk a chain back from its head and verify every step.
    Chain(ChainArgs),
    /// Verify a proof package file.
    Package {
        package: PathBuf,
        #[arg(long, env = "LINEAGE_TRUST")]
        trust: PathBuf,
    },
    /// Verify an evidence capsule offline.
    Capsule {
        capsule: PathBuf,
        #[arg(long, env = "LINEAGE_TRUST")]
        trust: PathBuf,
    },
}

#[derive(Args)]
struct ChainArgs {
    /// Head event digest (default: the transcript's head).
    #[arg(long, required_unless_present = "transcript")]
    head: Option<EventDigest>,
    #[arg(long, env = "LINEAGE_TRUST")]
    trust: PathBuf,
    /// Verify offline against a transcript instead of the live proof server.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// `action_type=cited_type,cited_type`; repeatable.
    #[arg(long = "require-cites", value_parser = parse_required_cites)]
    require_cites: Vec<(String, Vec<String>)>,
    /// Use the FedRAMP demo's cite requirements.
    #[arg(long)]
    fedramp_policy: bool,
    /// Require cited events to be ancestors of the citing event.
    #[arg(long)]
    cites_must_be_ancestors: bool,
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Run the authorization workflow against live local services.
    Fedramp {
        /// Fixed keys and clock: identical outputs on every run.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `mutate:<step>:<surface>`, `skip:<step>` or `drop-cite:<step>:<cited>`; repeatable.
        #[arg(long = "tamper")]
        tamper: Vec<Tamper>,
        /// Persist the log here instead of in memory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ServeCmd {
    /// Run a lineage store.
    Ls {
        #[arg(long, env = "LINEAGE_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Run a proof server over the configured upstream logs.
    Ps {
        #[arg(long, env = "LINEAGE_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        key: Option<PathBuf>,
    },
}

fn parse_skill(s: &str) -> Result<Skill, String> {
    let (id, name) = s.split_once('=').ok_or("expected id=Name")?;
    Ok(Skill { id: id.into(), name: name.into(), description: String::new() })
}

fn parse_role(s: &str) -> Result<Role, String> {
    Role::from_actor_id(&format!("hid://{s}")).ok_or_else(|| format!("unknown role {s}; expected AO, CL, SO or 3PAO"))
}

fn parse_member(s: &str) -> Result<(Role, PathBuf), String> {
    let (role, path) = s.split_once('=').ok_or("expected ROLE=keyfile")?;
    Ok((parse_role(role)?, path.into()))
}

fn parse_required_cites(s: &str) -> Result<(String, Vec<String>), String> {
    let (ty, cited) = s.split_once('=').ok_or("expected action_type=cited,cited")?;
    Ok((ty.into(), cited.split(',').filter(|c| !c.is_empty()).map(String::from).collect()))
}

enum Failure {
    /// Verdict already reported on stdout.
    Verify,
    Usage(String),
    Transport(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        // A gateway error means the service behind the proof server is unreachable.
        if e.is_transport() || matches!(e, ClientError::Status { status: 502..=504, .. }) {
            Failure::Transport(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(
    std::io::Error,
    serde_json::Error,
    lineage::keyfile::KeyFileError,
    lineage::trust::TrustError,
    lineage::config::ConfigError,
    lineage::store::StoreError,
    lineage_core::EventError,
    lineage_core::CanonicalError
);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_transport() {
            Failure::Transport(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

struct Out {
    json: bool,
}

impl Out {
    /// Prints `value` as JSON, or `human` otherwise.
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
        } else {
            println!("{}", human());
        }
    }

    /// Prints a verification result and turns a failing verdict into exit 1.
    fn verdict(&self, ok: bool, first_failure: Option<String>, detail: serde_json::Value) -> Outcome {
        let verdict = if ok { "ok" } else { "fail" };
        let body = json!({"verdict": verdict, "first_failure": first_failure, "detail": detail});
        if ok {
            self.emit(&body, || "ok".into());
            Ok(())
        } else {
            self.emit(&body, || format!("FAIL: {}", first_failure.as_deref().unwrap_or("unknown")));
            Err(Failure::Verify)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Out { json: cli.json };
    match run(cli.cmd, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Transport(msg)) => {
            eprintln!("transport error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_or_print<T: Serialize>(value: &T, path: Option<&Path>) -> Outcome {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Cmd, out: &Out) -> Outcome {
    match cmd {
        Cmd::Keygen { out: path, derive } => {
            let key = match &derive {
                Some(label) => keyfile::derive(label),
                None => keyfile::generate(),
            };
            keyfile::save(&path, &key)?;
            let kf = KeyFile::from_key(&key);
            let log_id = LogId::for_key(kf.public_key.as_bytes());
            out.emit(&json!({"public_key": kf.public_key, "log_id": log_id, "path": path}), || {
                format!("{}\nlog_id {log_id}", kf.public_key)
            });
            Ok(())
        }
        Cmd::Card(c) => card(c, out),
        Cmd::Registry(RegistryCmd::Sign { authority, workflow, members, out: path }) => {
            let authority = keyfile::load(&authority)?;
            let mut roster = std::collections::BTreeMap::new();
            for (role, p) in members {
                roster.insert(role, lineage_core::PublicKey::from(&keyfile::load(&p)?));
            }
            let registry =
                HumanRegistry::sign(&workflow, roster, &authority).map_err(|e| Failure::Usage(e.to_string()))?;
            write_or_print(&registry, path.as_deref())
        }
        Cmd::Event(e) => event(e, out),
        Cmd::Sth(SthCmd::Get { ls, size, trust }) => {
            let client = LsClient::new(&ls);
            let sth = match size {
                Some(s) => client.sth_at(s)?,
                None => client.latest_sth()?,
            };
            match trust {
                None => write_or_print(&sth, None),
                Some(t) => {
                    let trust = TrustConfig::load(&t)?;
                    let ok = trust.trusted_logs().get(&sth.log_id).is_some_and(|k| sth.verify(k));
                    out.verdict(ok, (!ok).then(|| "sth_signature".into()), serde_json::to_value(&sth)?)
                }
            }
        }
        Cmd::Proof(p) => proof(p, out),
        Cmd::Verify(VerifyCmd::Chain(args)) | Cmd::VerifyChain(args) => verify_chain_cmd(args, out),
        Cmd::Verify(VerifyCmd::Package { package, trust }) => {
            let trust = TrustConfig::load(&trust)?;
            let pkg = read_json(&package)?;
            let v = verify_proof_package(&pkg, &trust.ps_public_key, &trust.trusted_logs());
            package_verdict(out, v)
        }
        Cmd::Verify(VerifyCmd::Capsule { capsule, trust }) => {
            let trust = TrustConfig::load(&trust)?;
            let capsule: EvidenceCapsule = read_json(&capsule)?;
            let report = verify_capsule(&capsule, &trust);
            out.verdict(report.is_ok(), report.first_failure.clone(), serde_json::to_value(&report)?)
        }
        Cmd::Demo(DemoCmd::Fedramp { deterministic, out: dir, tamper, data_dir }) => {
            demo(deterministic, dir, tamper, data_dir, out)
        }
        Cmd::Serve(s) => serve(s),
    }
}

fn package_verdict(out: &Out, v: PackageVerdict) -> Outcome {
    let failure = (!v.is_ok()).then(|| serde_json::to_value(v).ok().and_then(|s| s.as_str().map(String::from)));
    out.verdict(v.is_ok(), failure.flatten(), json!(v))
}

fn card(cmd: CardCmd, out: &Out) -> Outcome {
    match cmd {
        CardCmd::Create { key, name, domain, ts, description, url, provider, version, skills, out: path } => {
            let key = keyfile::load(&key)?;
            let template = CardTemplate {
                protocol_version: "0.3.0".into(),
                url: url.unwrap_or_else(|| format!("https://{domain}/{name}")),
                provider_name: provider.unwrap_or_else(|| domain.clone()),
                name,
                description,
                preferred_transport: None,
                version,
                capabilities: None,
                skills,
                lineage_support: LineageSupport { merkle_proof_generation: true, dpop_binding: false },
            };
            let card = issue_card(&key, &domain, ts.unwrap_or_else(now_secs), template);
            write_or_print(&card, path.as_deref())
        }
        CardCmd::Verify { card, url, ts } => {
            let card: AgentCard = match (card, url) {
                (Some(p), _) => read_json(&p)?,
                (None, Some(u)) => fetch_card(&u)?,
                (None, None) => return Err(Failure::Usage("give a card file or --url".into())),
            };
            let v = verify_card(&card, ts);
            let failure = serde_json::to_value(v)?.as_str().map(String::from);
            let ok = v == lineage_core::CardVerdict::Ok;
            out.verdict(ok, if ok { None } else { failure }, json!({"agent_id": card.identity.agent_id, "card": v}))
        }
        CardCmd::Serve { listen, cards } => {
            let cards = cards.iter().map(|p| read_json(p)).collect::<Result<Vec<AgentCard>, _>>()?;
            let handle = service::cards::serve(cards, &listen)?;
            println!("serving cards at {}", handle.base_url());
            handle.wait();
            Ok(())
        }
    }
}

fn event(cmd: EventCmd, out: &Out) -> Outcome {
    match cmd {
        EventCmd::Sign {
            key,
            card,
            role,
            action_id,
            action_type,
            ts,
            context_hash,
            artifact,
            prev,
            cites,
            out: path,
        } => {
            let key = keyfile::load(&key)?;
            let signer = match (card, role) {
                (Some(p), _) => {
                    let card: AgentCard = read_json(&p)?;
                    if card.public_key() != Some((&key).into()) {
                        return Err(Failure::Usage("key does not match the card".into()));
                    }
                    let issued = card.identity.issued_at.ok_or(Failure::Usage("card has no issued_at".into()))?;
                    Signer::agent(key, &card.provider.domain, issued)
                }
                (None, Some(r)) => Signer::human(r, key),
                (None, None) => return Err(Failure::Usage("give --card or --role".into())),
            };
            let context_hash = match (context_hash, artifact) {
                (Some(h), _) => h,
                (None, Some(p)) => Hash32::of(&fs::read(&p)?),
                (None, None) => return Err(Failure::Usage("give --context-hash or --artifact".into())),
            };
            let e = LineageEvent {
                agent_id: signer.actor_id().into(),
                action_id,
                ts: ts.unwrap_or_else(now_secs),
                action_type,
                context_hash,
                prev,
                cites: if cites.is_empty() { None } else { Some(cites) },
                agent_sig: None,
            };
            let e = sign_event(e, &signer)?;
            if path.is_some() && !out.json {
                eprintln!("digest {}", event_digest(&e));
            }
            write_or_print(&e, path.as_deref())
        }
        EventCmd::Submit { ls, event } => {
            let e: LineageEvent = read_json(&event)?;
            match LsClient::new(&ls).submit(&e) {
                Ok(r) => {
                    let digest = event_digest(&e);
                    out.emit(&json!({"digest": digest, "leaf_index": r.leaf_index, "sth": r.sth}), || {
                        format!("appended {digest} at index {} (tree size {})", r.leaf_index, r.sth.tree_size)
                    });
                    Ok(())
                }
                // The store refusing an event is a verification outcome.
                Err(e @ ClientError::Status { status: 400 | 422, .. }) => {
                    out.verdict(false, e.code().or(Some("rejected".into())), json!(e.to_string()))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn load_trust(path: Option<&Path>) -> Result<Option<TrustConfig>, Failure> {
    path.map(TrustConfig::load).transpose().map_err(Into::into)
}

fn proof(cmd: ProofCmd, out: &Out) -> Outcome {
    match cmd {
        ProofCmd::Inclusion { ls, index, size } => {
            let client = LsClient::new(&ls);
            let sth = match size {
                Some(s) => client.sth_at(s)?,
                None => client.latest_sth()?,
            };
            let mut log = MerkleLog::new();
            let mut start = 0;
            while start < sth.tree_size {
                let batch = client.entries(start, sth.tree_size)?;
                if batch.is_empty() {
                    return Err(Failure::Usage("log returned no entries".into()));
                }
                for r in &batch {
                    log.append(r.leaf_input.as_bytes().to_vec());
                }
                start += batch.len() as u64;
            }
            let proof = log.prove_inclusion(index, sth.tree_size).map_err(|e| Failure::Usage(e.to_string()))?;
            let leaf = log.leaf_hash(index).expect("index checked");
            let ok = verify_inclusion(&leaf, &proof, &sth.root);
            let detail = json!({"leaf_hash": leaf, "proof": proof, "sth": sth});
            if out.json || !ok {
                out.verdict(ok, (!ok).then(|| "root_mismatch".into()), detail)
            } else {
                write_or_print(&detail, None)
            }
        }
        ProofCmd::Consistency { ps, log_id, first, second, trust } => {
            let pkg = PsClient::new(&ps).consistency(log_id, first, second)?;
            match load_trust(trust.as_deref())? {
                Some(t) => package_verdict(out, verify_consistency_package(&pkg, &t.ps_public_key, &t.trusted_logs())),
                None => write_or_print(&pkg, None),
            }
        }
        ProofCmd::Multi { ps, log_id, digests, trust } => {
            let pkg = PsClient::new(&ps).multi(log_id, digests)?;
            match load_trust(trust.as_deref())? {
                Some(t) => package_verdict(out, verify_multiproof_package(&pkg, &t.ps_public_key, &t.trusted_logs())),
                None => write_or_print(&pkg, None),
            }
        }
        ProofCmd::Package { ps, digest, trust } => {
            let pkg = PsClient::new(&ps).package(&digest)?;
            match load_trust(trust.as_deref())? {
                Some(t) => package_verdict(out, verify_proof_package(&pkg, &t.ps_public_key, &t.trusted_logs())),
                None => write_or_print(&pkg, None),
            }
        }
    }
}

fn chain_report_outcome(out: &Out, report: &ChainReport) -> Outcome {
    let failure = report.first_failure.as_ref().map(|f| format!("step {} ({}): {}", f.step, f.digest, f.check));
    if !out.json && report.is_ok() {
        println!("ok: {} steps, head {}", report.steps.len(), report.head);
        return Ok(());
    }
    out.verdict(report.is_ok(), failure, serde_json::to_value(report)?)
}

fn verify_chain_cmd(args: ChainArgs, out: &Out) -> Outcome {
    let trust = TrustConfig::load(&args.trust)?;
    let mut policy = if args.fedramp_policy { harness::fedramp_policy() } else { Default::default() };
    policy.required_cites.extend(args.require_cites);
    policy.cites_must_be_ancestors |= args.cites_must_be_ancestors;

    let report = match args.transcript {
        Some(path) => {
            let t: Transcript = read_json(&path)?;
            let anchors = trust.anchors(Some(t.registry.clone()))?;
            let head = args.head.unwrap_or(t.head);
            match verify_chain(&head, &t.source(), &anchors, &policy) {
                Ok(r) => r,
                Err(never) => match never {},
            }
        }
        None => {
            let ps = trust.proof_server.clone().ok_or(Failure::Usage("trust config names no proof_server".into()))?;
            let anchors = trust.anchors(None)?;
            let source = RemoteSource::new(PsClient::new(&ps), trust.card_sources.clone());
            let head = args.head.expect("clap requires --head without --transcript");
            verify_chain(&head, &source, &anchors, &policy)?
        }
    };
    chain_report_outcome(out, &report)
}

fn demo(
    deterministic: bool,
    dir: Option<PathBuf>,
    tamper: Vec<Tamper>,
    data_dir: Option<PathBuf>,
    out: &Out,
) -> Outcome {
    let (cast, clock, base_ts) = if deterministic {
        (Cast::deterministic(harness::WORKFLOW_ID, 5), fixed_clock(harness::ISSUED_AT * 1000), harness::ISSUED_AT)
    } else {
        (Cast::random(5), system_clock(), now_secs())
    };
    let ttl = if deterministic { Duration::ZERO } else { Duration::from_secs(2) };
    let dep = Deployment::start(&cast, clock, data_dir, ttl)?;
    let mut script = WorkflowScript::fedramp(base_ts);
    script.tamper = tamper;
    let run = harness::run_fedramp(&script, &cast, &dep.remote());
    dep.shutdown();
    let run = match run {
        Ok(run) => run,
        // The services refusing a step is itself a verification outcome.
        Err(e @ (HarnessError::Genesis(_) | HarnessError::Refused { .. })) => {
            return out.verdict(false, Some("scenario".into()), json!(e.to_string()));
        }
        Err(e) => return Err(e.into()),
    };

    if let Some(dir) = &dir {
        fs::create_dir_all(dir)?;
        let write = |name: &str, value: &dyn erased::Json| -> std::io::Result<()> {
            fs::write(dir.join(name), value.pretty() + "\n")
        };
        write("transcript.json", &run.transcript)?;
        write("report.json", &run.report)?;
        write("policy.json", &run.policy)?;
        write("trust.json", &run.trust)?;
        write("registry.json", &run.transcript.registry)?;
        if let Some(c) = &run.capsule {
            write("capsule.json", c)?;
        }
        fs::write(dir.join("lineage.dot"), harness::to_dot(&run.transcript, Some(&run.report)))?;
    }

    let ok = run.is_ok();
    let first_failure = run
        .report
        .first_failure
        .as_ref()
        .map(|f| format!("step {} ({}): {}", f.step, f.digest, f.check))
        .or_else(|| (!run.policy.ok).then(|| "policy".into()));
    let summary = json!({
        "verdict": if ok { "ok" } else { "fail" },
        "first_failure": first_failure,
        "events": run.transcript.entries.len(),
        "head": run.transcript.head,
        "tree_size": run.transcript.latest_sth.tree_size,
        "policy": run.policy,
        "out": dir,
    });
    if !out.json {
        for (e, s) in run.transcript.entries.iter().zip(&run.report.steps) {
            let status = s.first_failure().unwrap_or("ok");
            println!("{:<4} {:<5} {:<19} {}", e.step, e.actor.to_string(), e.package.event.action_type, status);
        }
        if !run.policy.ok {
            println!("policy: {}", serde_json::to_string(&run.policy)?);
        }
    }
    if ok {
        out.emit(&summary, || format!("ok: {} events, head {}", run.transcript.entries.len(), run.transcript.head));
        Ok(())
    } else {
        if out.json {
            println!("{}", serde_json::to_string_pretty(&summary)?);
        } else {
            println!("FAIL: {}", first_failure.unwrap_or_default());
        }
        Err(Failure::Verify)
    }
}

mod erased {
    pub trait Json {
        fn pretty(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn pretty(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable")
        }
    }
}

fn serve(cmd: ServeCmd) -> Outcome {
    match cmd {
        ServeCmd::Ls { config, listen, data_dir, key } => {
            let mut cfg = Config::load(config.as_deref())?.ls;
            cfg.listen = listen.unwrap_or(cfg.listen);
            cfg.data_dir = data_dir.or(cfg.data_dir);
            let key_path =
                key.or(cfg.key).ok_or(Failure::Usage("no LS key (--key, LINEAGE_LS_KEY or config)".into()))?;
            let store = LineageStore::open(
                keyfile::load(&key_path)?,
                StoreOptions { data_dir: cfg.data_dir.clone(), clock: store::system_clock(), sync: true },
            )?;
            for p in &cfg.cards {
                store.register_agent(read_json(p)?)?;
            }
            if let Some(p) = &cfg.registry {
                let registry: HumanRegistry = read_json(p)?;
                let authority =
                    cfg.registry_authority.ok_or(Failure::Usage("registry without registry_authority".into()))?;
                store.register_humans(registry, authority)?;
            }
            let store = Arc::new(store);
            let handle = service::ls::serve(store.clone(), &cfg.listen)?;
            println!(
                "lineage store {} listening on {} (tree size {})",
                store.log_id(),
                handle.base_url(),
                store.size()
            );
            handle.wait();
            Ok(())
        }
        ServeCmd::Ps { config, listen, key } => {
            let mut cfg = Config::load(config.as_deref())?.ps;
            cfg.listen = listen.unwrap_or(cfg.listen);
            let key_path =
                key.or(cfg.key).ok_or(Failure::Usage("no PS key (--key, LINEAGE_PS_KEY or config)".into()))?;
            if cfg.upstreams.is_empty() {
                return Err(Failure::Usage("no upstream logs configured".into()));
            }
            let mut upstreams = Vec::new();
            for u in &cfg.upstreams {
                u.validate()?;
                upstreams.push(Upstream::new(u.public_key, LsClient::new(&u.base_url)));
            }
            let opts = PsOptions { ttl: Duration::from_millis(cfg.cache_ttl_ms), baseline_path: cfg.baseline.clone() };
            let ps = Arc::new(ProofServer::new(keyfile::load(&key_path)?, upstreams, opts)?);
            let handle = service::ps::serve(ps.clone(), &cfg.listen)?;
            println!("proof server {} listening on {}", ps.public_key(), handle.base_url());
            handle.wait();
            Ok(())
        }
    }
}
