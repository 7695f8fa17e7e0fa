use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn lineage() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lineage"));
    c.env_remove("LINEAGE_CONFIG").env_remove("LINEAGE_TRUST");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    lineage().args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn keygen_card_create_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(&["keygen", "--out", "a.key"], d)), 0);
    let o = run(
        &[
            "card",
            "create",
            "--key",
            "a.key",
            "--name",
            "worker",
            "--domain",
            "example.com",
            "--ts",
            "1700000000",
            "--skill",
            "scan=Scanning",
            "--out",
            "card.json",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["--json", "card", "verify", "card.json"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["verdict"], "ok");
    assert_eq!(code(&run(&["card", "verify", "card.json", "--ts", "1700000000"], d)), 0);

    // Wrong issuance time, then an edited skill.
    let o = run(&["--json", "card", "verify", "card.json", "--ts", "1700000001"], d);
    assert_eq!(code(&o), 1);
    assert_eq!(json(&o)["first_failure"], "bad_id");
    let mut card: Value = serde_json::from_slice(&fs::read(d.join("card.json")).unwrap()).unwrap();
    card["skills"][0]["name"] = "Something else".into();
    fs::write(d.join("card.json"), serde_json::to_vec(&card).unwrap()).unwrap();
    let o = run(&["--json", "card", "verify", "card.json"], d);
    assert_eq!(code(&o), 1);
    assert_eq!(json(&o)["first_failure"], "bad_proof");
}

#[test]
fn exit_code_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(&["card", "create"], d)), 2, "missing arguments");
    assert_eq!(code(&run(&["card", "verify", "missing.json"], d)), 2, "unreadable input");
    assert_eq!(code(&run(&["demo", "fedramp", "--tamper", "explode:E1"], d)), 2);
    assert_eq!(code(&run(&["sth", "get", "--ls", "http://127.0.0.1:1"], d)), 3);
    let o = run(&["proof", "package", "--ps", "http://127.0.0.1:1", &"ab".repeat(32)], d);
    assert_eq!(code(&o), 3);
}

#[test]
fn deterministic_demo_is_byte_stable_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["one", "two"] {
        let o = run(&["--json", "demo", "fedramp", "--deterministic", "--out", out], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let summary = json(&o);
        assert_eq!(summary["events"], 11);
        assert_eq!(summary["tree_size"], 11);
    }
    let mut names: Vec<String> =
        fs::read_dir(d.join("one")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        ["capsule.json", "lineage.dot", "policy.json", "registry.json", "report.json", "transcript.json", "trust.json"]
    );
    for n in &names {
        assert_eq!(fs::read(d.join("one").join(n)).unwrap(), fs::read(d.join("two").join(n)).unwrap(), "{n} differs");
    }

    let o = run(
        &[
            "--json",
            "verify",
            "chain",
            "--transcript",
            "one/transcript.json",
            "--trust",
            "one/trust.json",
            "--fedramp-policy",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["verdict"], "ok");
    let o = run(&["verify", "capsule", "one/capsule.json", "--trust", "one/trust.json"], d);
    assert_eq!(code(&o), 0);

    // Tamper with the transcript on disk: the E3 event's context hash.
    let mut t: Value = serde_json::from_slice(&fs::read(d.join("one/transcript.json")).unwrap()).unwrap();
    let entry = t["entries"].as_array_mut().unwrap().iter_mut().find(|e| e["step"] == "E3").unwrap();
    let digest = entry["digest"].as_str().unwrap().to_string();
    entry["package"]["event"]["context_hash"] = "00".repeat(32).into();
    fs::write(d.join("tampered.json"), serde_json::to_vec(&t).unwrap()).unwrap();
    let o = run(&["--json", "verify-chain", "--transcript", "tampered.json", "--trust", "one/trust.json"], d);
    assert_eq!(code(&o), 1);
    let v = json(&o);
    assert_eq!(v["verdict"], "fail");
    let first = v["first_failure"].as_str().unwrap();
    assert!(first.starts_with("step 4 ") && first.contains(&digest), "{first}");

    // Capsule with a proof node dropped.
    let mut c: Value = serde_json::from_slice(&fs::read(d.join("one/capsule.json")).unwrap()).unwrap();
    c["items"][0]["package"]["inclusion_proofs"][0]["audit_path"].as_array_mut().unwrap().pop();
    fs::write(d.join("capsule-bad.json"), serde_json::to_vec(&c).unwrap()).unwrap();
    let o = run(&["--json", "verify", "capsule", "capsule-bad.json", "--trust", "one/trust.json"], d);
    assert_eq!(code(&o), 1);
    assert!(json(&o)["first_failure"].as_str().unwrap().ends_with(":package"));
}

#[test]
fn demo_tamper_directives() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(&["--json", "demo", "fedramp", "--deterministic", "--tamper", "mutate:E2:signature"], d);
    assert_eq!(code(&o), 1);
    assert!(json(&o)["first_failure"].as_str().unwrap().starts_with("step 2 "));
    let o = run(&["--json", "demo", "fedramp", "--deterministic", "--tamper", "skip:E3a"], d);
    assert_eq!(code(&o), 1);
    assert_eq!(json(&o)["policy"]["missing_approvals"][0], "risk_acceptance");
    let o = run(&["--json", "demo", "fedramp", "--deterministic", "--tamper", "drop-cite:E5:E4"], d);
    assert_eq!(code(&o), 1);
    assert!(json(&o)["first_failure"].as_str().unwrap().ends_with("cites"));
}

/// A `lineage serve …` child process; killed on drop.
struct Service {
    child: Child,
    line: String,
    url: String,
}

impl Service {
    /// Starts the process and waits for its "listening on" line.
    fn start(mut cmd: Command) -> Self {
        let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line.split_whitespace().find(|w| w.starts_with("http://")).expect(&line).to_string();
        Service { child, line, url }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn operator_flow_against_served_processes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut keys = std::collections::HashMap::new();
    for k in ["ls", "ps", "ao", "so", "authority"] {
        let o = run(&["--json", "keygen", "--out", &format!("{k}.key"), "--derive", &format!("cli/{k}")], d);
        assert_eq!(code(&o), 0);
        keys.insert(k, json(&o));
    }
    let o = run(
        &[
            "registry",
            "sign",
            "--authority",
            "authority.key",
            "--workflow",
            "ops",
            "--member",
            "AO=ao.key",
            "--out",
            "registry.json",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // The LS key and listen address come from the environment, the rest from the file.
    let base_toml = format!(
        "[ls]\nlisten = \"127.0.0.1:7\"\ndata_dir = \"ls-data\"\nregistry = \"registry.json\"\nregistry_authority = \"{}\"\n\n\
         [ps]\nlisten = \"127.0.0.1:0\"\nkey = \"ps.key\"\ncache_ttl_ms = 0\n",
        keys["authority"]["public_key"].as_str().unwrap()
    );
    fs::write(d.join("lineage.toml"), &base_toml).unwrap();
    let mut cmd = lineage();
    cmd.args(["serve", "ls"])
        .current_dir(d)
        .env("LINEAGE_CONFIG", d.join("lineage.toml"))
        .env("LINEAGE_LS_KEY", d.join("ls.key"))
        .env("LINEAGE_LS_LISTEN", "127.0.0.1:0");
    let ls = Service::start(cmd);
    assert!(ls.line.contains(keys["ls"]["log_id"].as_str().unwrap()), "{}", ls.line);

    let mut prev: Option<String> = None;
    for i in 0..3 {
        let action = format!("a{i}");
        let hash = format!("{i:064x}");
        let mut args = vec![
            "event",
            "sign",
            "--key",
            "ao.key",
            "--role",
            "AO",
            "--action-type",
            "approval",
            "--ts",
            "1700000000",
            "--action-id",
            &action,
            "--context-hash",
            &hash,
            "--out",
            "ev.json",
        ];
        if let Some(p) = &prev {
            args.extend(["--prev", p]);
        }
        let o = run(&args, d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = run(&["--json", "event", "submit", "--ls", &ls.url, "ev.json"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v = json(&o);
        assert_eq!(v["leaf_index"], i);
        prev = Some(v["digest"].as_str().unwrap().to_string());
    }
    // SO is not on the roster: the store's refusal is a verdict.
    let o = run(
        &[
            "event",
            "sign",
            "--key",
            "so.key",
            "--role",
            "SO",
            "--action-id",
            "x",
            "--action-type",
            "t",
            "--context-hash",
            &"11".repeat(32),
            "--out",
            "bad.json",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    let o = run(&["--json", "event", "submit", "--ls", &ls.url, "bad.json"], d);
    assert_eq!(code(&o), 1);
    assert_eq!(json(&o)["first_failure"], "unknown_actor");

    let o = run(&["--json", "proof", "inclusion", "--ls", &ls.url, "--index", "1"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["detail"]["proof"]["tree_size"], 3);

    // Proof server over the same log.
    let log_id = keys["ls"]["log_id"].as_str().unwrap();
    let ls_pub = keys["ls"]["public_key"].as_str().unwrap();
    fs::write(
        d.join("lineage.toml"),
        format!(
            "{base_toml}\n[[ps.upstreams]]\nlog_id = \"{log_id}\"\nbase_url = \"{}\"\npublic_key = \"{ls_pub}\"\n",
            ls.url
        ),
    )
    .unwrap();
    let mut cmd = lineage();
    cmd.args(["serve", "ps", "--config", "lineage.toml"]).current_dir(d);
    let ps = Service::start(cmd);
    let ps_pub = keys["ps"]["public_key"].as_str().unwrap();
    assert!(ps.line.contains(ps_pub), "{}", ps.line);

    let trust = serde_json::json!({
        "ps_public_key": ps_pub,
        "proof_server": ps.url,
        "logs": [{"log_id": log_id, "public_key": ls_pub, "base_url": ls.url}],
        "human_registry": "registry.json",
        "registry_authority": keys["authority"]["public_key"],
    });
    fs::write(d.join("trust.json"), serde_json::to_vec_pretty(&trust).unwrap()).unwrap();

    let head = prev.unwrap();
    let o = run(&["--json", "sth", "get", "--ls", &ls.url, "--trust", "trust.json"], d);
    assert_eq!(code(&o), 0);
    let o = run(&["--json", "proof", "package", "--ps", &ps.url, &head, "--trust", "trust.json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(
        &[
            "--json",
            "proof",
            "consistency",
            "--ps",
            &ps.url,
            "--log-id",
            log_id,
            "--first",
            "1",
            "--second",
            "3",
            "--trust",
            "trust.json",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    let o = run(&["--json", "proof", "multi", "--ps", &ps.url, "--log-id", log_id, &head, "--trust", "trust.json"], d);
    assert_eq!(code(&o), 0);
    let o = run(&["--json", "verify", "chain", "--head", &head, "--trust", "trust.json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(json(&o)["detail"]["steps"].as_array().unwrap().len(), 3);

    // Environment defaults stand in for the flags.
    let o = lineage()
        .args(["--json", "proof", "package", &head])
        .current_dir(d)
        .env("LINEAGE_PS_URL", &ps.url)
        .env("LINEAGE_TRUST", d.join("trust.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);

    // With the log gone the proof server cannot refresh: transport class.
    drop(ls);
    let o = run(&["--json", "verify", "chain", "--head", &head, "--trust", "trust.json"], d);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));
}
