//! The `textguard` binary end to end: stores on disk, a real HTTP key
//! directory, stdin/stdout pipes and exit codes.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use serde_json::Value;
use textguard_core::directory::Directory;
use textguard_core::token;
use textguard_net::DirectoryServer;

struct Env {
    home: tempfile::TempDir,
    directory: Option<DirectoryServer>,
}

impl Env {
    fn new() -> Self {
        Self { home: tempfile::tempdir().unwrap(), directory: None }
    }

    fn with_directory() -> Self {
        let mut env = Self::new();
        let server = DirectoryServer::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), Arc::new(Directory::new())).unwrap();
        env.directory = Some(server);
        env
    }

    fn store(&self, who: &str) -> PathBuf {
        self.home.path().join(who)
    }

    /// Run as `who` (their own store and directory user id).
    fn run(&self, who: &str, args: &[&str], stdin: &str) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_textguard"));
        cmd.env("HOME", self.home.path())
            .env_remove("TEXTGUARD_STORE")
            .env_remove("TEXTGUARD_CONFIG")
            .env_remove("RUST_LOG")
            .arg("--store")
            .arg(self.store(who))
            .args(["--user", who]);
        if let Some(d) = &self.directory {
            cmd.args(["--directory", &d.url()]);
        }
        run(cmd.args(args), stdin)
    }
}

fn run(cmd: &mut Command, stdin: &str) -> Output {
    let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json_err(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    let last = text.lines().last().expect("an error line on stderr");
    serde_json::from_str(last).unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn pipe_round_trip_between_two_stores() {
    let env = Env::with_directory();
    for who in ["alice", "bob"] {
        ok(env.run(who, &["init"], ""));
    }
    ok(env.run("bob", &["keys", "publish"], ""));

    for (flags, text) in [(&[][..], "hello"), (&["--v2"][..], "second, one-shot")] {
        let mut args = vec!["encrypt", "--to", "bob"];
        args.extend_from_slice(flags);
        let wire = stdout(&ok(env.run("alice", &args, &format!("{text}\n"))));
        assert_eq!(token::scan_tokens(&wire).len(), 1, "one token: {wire}");
        assert!(!wire.contains(text));

        let out = ok(env.run("bob", &["decrypt"], &wire));
        assert_eq!(stdout(&out), format!("{text}\n"));

        // Keys are gone after the first read.
        let again = env.run("bob", &["--json", "decrypt"], &wire);
        assert_eq!(code(&again), 4);
        let body: Value = serde_json::from_str(&stdout(&again)).unwrap();
        assert_eq!(body["messages"][0]["status"], "unrecoverable");
        assert_eq!(json_err(&again)["error"], "crypto");

        // The sender reads its own message from the local cache.
        let mine: Value = serde_json::from_str(&stdout(&ok(env.run("alice", &["--json", "decrypt"], &wire)))).unwrap();
        assert_eq!(mine["messages"][0]["text"], text);
        assert_eq!(mine["messages"][0]["from_cache"], true);
    }

    let contacts: Value = serde_json::from_str(&stdout(&ok(env.run("alice", &["--json", "contact", "list"], "")))).unwrap();
    assert_eq!(contacts["contacts"][0]["contact"], "bob");
    assert_eq!(contacts["contacts"][0]["session"], true);
}

#[test]
fn tampered_token_is_an_integrity_failure() {
    let env = Env::with_directory();
    for who in ["alice", "bob"] {
        ok(env.run(who, &["init"], ""));
    }
    ok(env.run("bob", &["keys", "publish"], ""));
    let wire = stdout(&ok(env.run("alice", &["encrypt", "--to", "bob", "--v2"], "attack at dawn")));
    let interior_start = wire.find("Guard-start").unwrap() + "Guard-start".len();
    let mut bytes = wire.into_bytes();
    let i = interior_start + 60;
    bytes[i] = if bytes[i] == b'A' { b'B' } else { b'A' };
    let forged = String::from_utf8(bytes).unwrap();

    let out = env.run("bob", &["--json", "decrypt"], &forged);
    assert_eq!(code(&out), 4);
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["messages"][0]["status"], "integrity_warning");
    assert!(!stdout(&out).contains("attack"));
}

#[test]
fn simulate_jsonl_script() {
    let env = Env::new();
    let path = scenario("v1_basic.jsonl");
    let out = ok(env.run("x", &["simulate", path.to_str().unwrap()], ""));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let alice = report["participants"].as_array().unwrap().iter().find(|p| p["name"] == "alice").unwrap();
    let textbox = alice["transcript"]["textbox"].as_str().unwrap();
    assert_eq!(token::scan_tokens(textbox).len(), 1, "{textbox}");
    assert!(textbox.starts_with("ok"), "the clear typing before the shortcut reaches the app");
    for marker in report["markers"].as_array().unwrap() {
        assert!(marker_only_in_report_header(&report, marker), "{marker} leaked into the report");
    }
    assert!(report["verdicts"].as_array().unwrap().iter().all(|v| v["pass"] == true));
}

/// The report lists its markers up front; they must appear nowhere else.
fn marker_only_in_report_header(report: &Value, marker: &Value) -> bool {
    let mut rest = report.clone();
    rest["markers"] = Value::Null;
    !rest.to_string().contains(marker.as_str().unwrap())
}

#[test]
fn simulate_reports_failed_verdicts_with_exit_1() {
    let env = Env::new();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.json");
    std::fs::write(
        &path,
        r#"{"steps": [{"who": "alice", "do": "wait", "ms": 1}],
            "expect": [{"who": "bob", "outcome": "plaintext", "text": "never sent"}]}"#,
    )
    .unwrap();
    let report_path = dir.path().join("report.json");
    let out = env.run("x", &["--json", "simulate", path.to_str().unwrap(), "--out", report_path.to_str().unwrap()], "");
    assert_eq!(code(&out), 1);
    assert_eq!(json_err(&out)["error"], "failed");
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(saved["name"], "wrong");

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"do\": \"teleport\"}\n").unwrap();
    assert_eq!(code(&env.run("x", &["simulate", bad.to_str().unwrap()], "")), 2);
}

#[test]
fn exit_codes_and_json_errors() {
    let env = Env::new();
    // No store yet.
    let out = env.run("alice", &["--json", "decrypt"], "Guard-startAAAAGuard-end");
    assert_eq!(code(&out), 3);
    let err = json_err(&out);
    assert_eq!(err["error"], "store");
    assert_eq!(err["exit_code"], 3);

    ok(env.run("alice", &["init"], ""));
    assert_eq!(code(&env.run("alice", &["init"], "")), 3, "init twice");

    // Usage.
    assert_eq!(code(&env.run("alice", &["encrypt"], "")), 2);
    assert_eq!(code(&env.run("alice", &["frobnicate"], "")), 2);
    assert_eq!(code(&env.run("alice", &["keys", "publish"], "")), 2, "no directory configured");
    assert_eq!(code(&env.run("alice", &["encrypt", "--to", "bob"], "")), 2, "empty input");

    // Nothing decryptable.
    let out = env.run("alice", &["--json", "decrypt"], "no tokens here");
    assert_eq!(code(&out), 4);
    assert_eq!(json_err(&out)["error"], "nothing_to_decrypt");

    // Directory down.
    let out = env.run("alice", &["--json", "--directory", "http://127.0.0.1:9", "encrypt", "--to", "bob"], "hi");
    assert_eq!(code(&out), 5);
    assert_eq!(json_err(&out)["error"], "directory_unavailable");

    // Unknown user on a live directory.
    let live = Env::with_directory();
    ok(live.run("alice", &["init"], ""));
    let out = live.run("alice", &["--json", "keys", "fetch", "nobody"], "");
    assert_eq!(code(&out), 5);
    assert_eq!(json_err(&out)["error"], "not_found");
}

#[test]
fn contacts_pin_and_verify_fingerprints() {
    let env = Env::new();
    for who in ["alice", "bob"] {
        ok(env.run(who, &["init"], ""));
    }
    let bob: Value = serde_json::from_str(&stdout(&ok(env.run("bob", &["--json", "keys", "show"], "")))).unwrap();
    let identity = bob["identity"].as_str().unwrap();
    let fingerprint = bob["fingerprint"].as_str().unwrap();
    assert_eq!(bob["one_time_prekeys"], 100);

    ok(env.run("alice", &["contact", "add", "bob", "--identity", identity], ""));
    let again = stdout(&ok(env.run("alice", &["contact", "add", "bob", "--identity", identity], "")));
    assert!(again.starts_with("unchanged"));

    let carol: Value = {
        ok(env.run("carol", &["init"], ""));
        serde_json::from_str(&stdout(&ok(env.run("carol", &["--json", "keys", "show"], "")))).unwrap()
    };
    let clash = env.run("alice", &["contact", "add", "bob", "--identity", carol["identity"].as_str().unwrap()], "");
    assert_eq!(code(&clash), 3, "a pinned key is never silently replaced");

    assert_eq!(code(&env.run("alice", &["contact", "verify", "bob", "--fingerprint", "00"], "")), 4);
    let list = stdout(&ok(env.run("alice", &["contact", "list"], "")));
    assert!(list.contains("unverified"));
    let spaced_upper = fingerprint.to_uppercase().replace(' ', "");
    ok(env.run("alice", &["contact", "verify", "bob", "--fingerprint", &spaced_upper], ""));
    let list: Value = serde_json::from_str(&stdout(&ok(env.run("alice", &["--json", "contact", "list"], "")))).unwrap();
    assert_eq!(list["contacts"][0]["verified"], true);
    assert_eq!(list["contacts"][0]["fingerprint"], fingerprint);

    assert_eq!(code(&env.run("alice", &["contact", "add", "x", "--identity", "not base64!"], "")), 2);
    assert_eq!(code(&env.run("alice", &["contact", "verify", "nobody"], "")), 3);
}

#[test]
fn config_file_and_environment() {
    let env = Env::new();
    let from_file = env.home.path().join("file-store");
    let from_env = env.home.path().join("env-store");
    let config = env.home.path().join("tg.toml");
    std::fs::write(&config, format!("store = {:?}\n", from_file.to_str().unwrap())).unwrap();
    let cmd = |extra_env: Option<&Path>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_textguard"));
        c.env("HOME", env.home.path()).env_remove("TEXTGUARD_STORE").arg("--config").arg(&config).arg("init");
        if let Some(p) = extra_env {
            c.env("TEXTGUARD_STORE", p);
        }
        c
    };
    ok(run(&mut cmd(None), ""));
    assert!(from_file.join("store.json").exists());
    ok(run(&mut cmd(Some(&from_env)), ""));
    assert!(from_env.join("store.json").exists());

    std::fs::write(&config, "stor = \"typo\"\n").unwrap();
    let out = run(cmd(None).arg("--json"), "");
    assert_eq!(code(&out), 2);
    assert_eq!(json_err(&out)["error"], "config");
}

#[test]
fn bench_prints_four_rows() {
    let env = Env::new();
    let out = ok(env.run("x", &["--json", "bench", "--iterations", "20"], ""));
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let rows = body["rows"].as_array().unwrap();
    let names: Vec<_> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["watch per keystroke", "stream encrypt per char", "one-shot encrypt", "decrypt"]);
    for r in rows {
        for s in r["samples"].as_array().unwrap() {
            assert!(s["median_us"].as_f64().unwrap() > 0.0);
            assert!(s["p95_us"].as_f64().unwrap() >= s["median_us"].as_f64().unwrap());
        }
    }
    let table = stdout(&ok(env.run("x", &["bench", "--iterations", "20"], "")));
    assert_eq!(table.lines().count(), 7);
}

#[test]
fn headless_daemon_serves_the_dev_api_until_stdin_closes() {
    use std::io::{BufRead, BufReader};
    use std::net::TcpStream;

    let env = Env::new();
    let config = env.home.path().join("tg.toml");
    std::fs::write(&config, "dev_port = 0\ngui_port = 0\n").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_textguard"))
        .env("HOME", env.home.path())
        .env_remove("TEXTGUARD_STORE")
        .arg("--config")
        .arg(&config)
        .arg("--store")
        .arg(env.store("alice"))
        .args(["daemon", "run", "--init"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut banner = BufReader::new(child.stderr.take().unwrap());
    let mut gui_line = String::new();
    banner.read_line(&mut gui_line).unwrap();
    assert!(gui_line.starts_with("gui socket 127.0.0.1:"), "{gui_line}");
    let mut dev_line = String::new();
    banner.read_line(&mut dev_line).unwrap();
    let dev_addr = dev_line.trim().strip_prefix("dev api ").unwrap().to_string();
    assert!(env.store("alice").join("gui.token").exists());

    let mut s = TcpStream::connect(&dev_addr).unwrap();
    writeln!(s, r#"{{"action":"encrypt","recipient":"nobody"}}"#).unwrap();
    let mut reply = String::new();
    BufReader::new(s).read_line(&mut reply).unwrap();
    assert!(reply.contains("contact_not_found"), "{reply}");

    // Typing in the clear passes through to the application.
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"t_us":0,"key":"h","action":"down"}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0);
    let app: Value = serde_json::from_str(stdout(&out).lines().next().expect("one app event")).unwrap();
    assert_eq!(app["input"], "h");
    assert_eq!(app["synthetic"], false);
    assert!(!env.store("alice").join("gui.token").exists(), "token file removed on exit");
}
