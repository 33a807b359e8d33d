mod bench;
mod config;
mod error;
mod oneshot;

use std::io::{BufRead, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use textguard_core::directory::{Directory, KeyDirectory, RegisterRequest};
use textguard_core::gui::ComposeMode;
use textguard_core::interceptor::DecryptOutcome;
use textguard_core::keystore::{ContactUpdate, Keystore, StoreError};
use textguard_core::ratchet::IdentityPublic;
use textguard_core::sim::{self, Scenario};
use textguard_net::{DaemonOptions, DirectoryServer};

use config::{FileConfig, Overrides, Settings};
use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "textguard", version, about = "Keyboard-level end-to-end encryption")]
struct Cli {
    /// Config file (TOML). Defaults to ~/.config/textguard/config.toml when present.
    #[arg(long, global = true, env = "TEXTGUARD_CONFIG")]
    config: Option<PathBuf>,
    /// Store directory; beats TEXTGUARD_STORE and the config file.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Key directory base URL.
    #[arg(long, global = true)]
    directory: Option<String>,
    /// Our user id on the key directory.
    #[arg(long, global = true)]
    user: Option<String>,
    /// Machine-readable output on stdout, errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// More logging on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a new store with a fresh identity.
    Init,
    #[command(subcommand)]
    Daemon(DaemonCommand),
    #[command(subcommand)]
    Directory(DirectoryCommand),
    #[command(subcommand)]
    Contact(ContactCommand),
    #[command(subcommand)]
    Keys(KeysCommand),
    /// Encrypt stdin for one contact and print a single token.
    Encrypt {
        #[arg(long)]
        to: String,
        /// One-shot compose mode instead of keystroke streaming.
        #[arg(long)]
        v2: bool,
    },
    /// Decrypt every token found on stdin.
    Decrypt {
        /// Who sent it, when the store cannot tell.
        #[arg(long)]
        from: Option<String>,
    },
    /// Run a scenario (JSON or JSON Lines) and print its report.
    Simulate {
        scenario: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure keystroke, encryption and decryption latency.
    Bench {
        #[arg(long, default_value_t = 2000)]
        iterations: usize,
    },
}

#[derive(Debug, Subcommand)]
enum DaemonCommand {
    /// Run in the foreground until stdin closes (headless) or forever.
    Run(DaemonRun),
}

#[derive(Debug, Args)]
struct DaemonRun {
    /// Create the store first if it does not exist.
    #[arg(long)]
    init: bool,
    /// Keyboard event device to grab, e.g. /dev/input/event3.
    #[cfg(feature = "linux")]
    #[arg(long)]
    device: Option<PathBuf>,
    #[arg(long)]
    no_dev_api: bool,
}

#[derive(Debug, Subcommand)]
enum DirectoryCommand {
    /// Serve an in-memory key directory over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:47800")]
        bind: SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
enum ContactCommand {
    /// Pin a contact's identity key, given or fetched from the directory.
    Add {
        id: String,
        /// Identity key in base64, as printed by `keys show`.
        #[arg(long)]
        identity: Option<String>,
    },
    List,
    /// Compare a fingerprint read out of band and mark the contact verified.
    Verify {
        id: String,
        #[arg(long)]
        fingerprint: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum KeysCommand {
    /// Print our identity key and fingerprint.
    Show,
    /// Register our bundle and one-time prekeys with the directory.
    Publish,
    /// Fetch a user's bundle. Consumes one of their one-time prekeys.
    Fetch { user: String },
}

/// What a command prints, in both output modes.
struct Out {
    text: String,
    json: Value,
    /// Reported after the output; decides the exit code.
    error: Option<CliError>,
}

impl Out {
    fn new(text: impl Into<String>, json: Value) -> Self {
        Self { text: text.into(), json, error: None }
    }
}

fn fingerprint(id: &IdentityPublic) -> String {
    let hex: String = id.as_bytes().iter().map(|b| format!("{b:02x}")).collect();
    hex.as_bytes().chunks(4).map(|c| std::str::from_utf8(c).expect("hex")).collect::<Vec<_>>().join(" ")
}

fn identity_b64(id: &IdentityPublic) -> String {
    serde_json::to_value(id).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn parse_identity(b64: &str) -> Result<IdentityPublic, CliError> {
    serde_json::from_value(Value::String(b64.trim().to_string()))
        .map_err(|_| CliError::Usage(format!("{b64:?} is not a base64 identity key")))
}

fn open_store(s: &Settings) -> Result<Keystore, CliError> {
    Ok(Keystore::open(&s.store)?)
}

/// For commands that write sessions or contacts: a running daemon keeps
/// its own copy in memory and would overwrite ours.
fn open_store_exclusive(s: &Settings) -> Result<Keystore, CliError> {
    if s.daemon_running() {
        return Err(CliError::DaemonRunning(s.store.display().to_string()));
    }
    open_store(s)
}

fn read_stdin() -> Result<String, CliError> {
    let mut text = String::new();
    std::io::stdin().read_to_string(&mut text)?;
    Ok(text)
}

fn require_user(s: &Settings) -> Result<&str, CliError> {
    s.user.as_deref().ok_or_else(|| CliError::Usage("no user id: set --user or `user` in the config".into()))
}

fn require_directory(s: &Settings) -> Result<Arc<dyn KeyDirectory>, CliError> {
    if s.directory.is_none() {
        return Err(CliError::Usage("no key directory: set --directory or `directory` in the config".into()));
    }
    Ok(s.key_directory())
}

fn init(s: &Settings) -> Result<Out, CliError> {
    let store = Keystore::init(&s.store, None)?;
    let id = store.identity().public();
    Ok(Out::new(
        format!("initialised {}\nfingerprint {}\n", s.store.display(), fingerprint(&id)),
        json!({ "store": s.store, "identity": identity_b64(&id), "fingerprint": fingerprint(&id) }),
    ))
}

fn daemon_run(s: &Settings, args: &DaemonRun, quiet: bool) -> Result<Out, CliError> {
    let store = match Keystore::open(&s.store) {
        Err(StoreError::Unavailable { .. }) if args.init => Keystore::init(&s.store, None)?,
        other => other?,
    };
    if s.daemon_running() {
        return Err(CliError::DaemonRunning(s.store.display().to_string()));
    }
    if s.token_path().exists() {
        log::warn!("removing stale token file {}", s.token_path().display());
        std::fs::remove_file(s.token_path())?;
    }
    let dev_port = (s.dev_api && !args.no_dev_api).then_some(s.dev_port);
    let options = DaemonOptions::loopback(dev_port, s.gui_port, s.token_path());

    #[cfg(feature = "linux")]
    if let Some(device) = &args.device {
        use textguard_net::linux::{spawn_reader, EvdevCapture, UinputSink};
        let (capture, file) = EvdevCapture::open(device).map_err(|e| CliError::Failed(e.to_string()))?;
        let backends = textguard_net::Backends {
            sink: Box::new(UinputSink::create().map_err(|e| CliError::Failed(e.to_string()))?),
            capture: Box::new(capture),
            selection: Box::new(selection(s)?),
        };
        let daemon = textguard_net::Daemon::start(store, s.key_directory(), backends, s.interceptor_config(), &options)?;
        banner(&daemon, &options, quiet);
        spawn_reader(file, daemon.handle())?;
        daemon.wait();
        return Ok(Out::new("", json!({ "stopped": true })));
    }

    // Headless: key events as JSON lines on stdin, application input as
    // JSON lines on stdout.
    let backends = textguard_net::Backends {
        sink: Box::new(textguard_net::backends::JsonLinesSink::new(std::io::stdout())),
        capture: Box::new(textguard_net::backends::NoCapture::default()),
        selection: Box::new(selection(s)?),
    };
    let daemon = textguard_net::Daemon::start(store, s.key_directory(), backends, s.interceptor_config(), &options)?;
    banner(&daemon, &options, quiet);
    let handle = daemon.handle();
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        match textguard_core::io::parse_script(&line) {
            Ok(events) => {
                for e in events {
                    handle.key(e)?;
                }
            }
            Err(e) => log::warn!("ignoring input line: {e}"),
        }
    }
    let ic = daemon.shutdown();
    Ok(Out::new("", json!({ "stopped": true, "errors": ic.errors().len() })))
}

fn selection(s: &Settings) -> Result<textguard_net::backends::CommandSelection, CliError> {
    textguard_net::backends::CommandSelection::new(&s.selection_command)
        .ok_or_else(|| CliError::Usage("selection_command is empty".into()))
}

fn banner(daemon: &textguard_net::Daemon, options: &DaemonOptions, quiet: bool) {
    if quiet {
        return;
    }
    eprintln!("gui socket {} (token in {})", daemon.gui_addr(), options.token_path.display());
    if let Some(addr) = daemon.dev_addr() {
        eprintln!("dev api {addr}");
    }
}

fn directory_serve(bind: SocketAddr) -> Result<Out, CliError> {
    let server = DirectoryServer::spawn(bind, Arc::new(Directory::new()))?;
    println!("{}", server.url());
    std::io::stdout().flush()?;
    server.wait();
    Ok(Out::new("", json!({ "stopped": true })))
}

fn contact(s: &Settings, cmd: &ContactCommand) -> Result<Out, CliError> {
    match cmd {
        ContactCommand::Add { id, identity } => {
            let mut store = open_store_exclusive(s)?;
            let key = match identity {
                Some(b64) => parse_identity(b64)?,
                None => require_directory(s)?.fetch_bundle(id)?.identity_pub,
            };
            let added = store.add_contact(id, key)? == ContactUpdate::Added;
            Ok(Out::new(
                format!("{} {id} {}\n", if added { "added" } else { "unchanged" }, fingerprint(&key)),
                json!({ "contact": id, "added": added, "fingerprint": fingerprint(&key) }),
            ))
        }
        ContactCommand::List => {
            let store = open_store(s)?;
            let mut text = String::new();
            let mut list = Vec::new();
            for c in store.contacts() {
                let fp = fingerprint(&c.identity_pub);
                let mark = if c.verified { "verified" } else { "unverified" };
                text.push_str(&format!("{}\t{mark}\t{fp}\n", c.contact_id));
                list.push(json!({
                    "contact": c.contact_id,
                    "verified": c.verified,
                    "fingerprint": fp,
                    "session": store.has_session(&c.contact_id),
                }));
            }
            Ok(Out::new(text, json!({ "contacts": list })))
        }
        ContactCommand::Verify { id, fingerprint: given } => {
            let mut store = open_store_exclusive(s)?;
            let c = store.contact(id).ok_or_else(|| StoreError::ContactNotFound(id.clone()))?;
            let actual = fingerprint(&c.identity_pub);
            let Some(given) = given else {
                return Ok(Out::new(
                    format!("{id} {actual}\n"),
                    json!({ "contact": id, "fingerprint": actual, "verified": c.verified }),
                ));
            };
            let norm = |f: &str| f.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
            if norm(given) != norm(&actual) {
                return Err(CliError::Crypto(format!("fingerprint mismatch for {id}: stored {actual}")));
            }
            store.verify_contact(id)?;
            Ok(Out::new(format!("verified {id}\n"), json!({ "contact": id, "verified": true })))
        }
    }
}

fn keys(s: &Settings, cmd: &KeysCommand) -> Result<Out, CliError> {
    match cmd {
        KeysCommand::Show => {
            let store = open_store(s)?;
            let id = store.identity().public();
            Ok(Out::new(
                format!("identity {}\nfingerprint {}\n", identity_b64(&id), fingerprint(&id)),
                json!({
                    "identity": identity_b64(&id),
                    "fingerprint": fingerprint(&id),
                    "one_time_prekeys": store.one_time_prekeys_held(),
                }),
            ))
        }
        KeysCommand::Publish => {
            let store = open_store(s)?;
            let user = require_user(s)?;
            let (bundle, one_time_prekeys) = store.publishable_bundle();
            let outcome = require_directory(s)?.register(user, RegisterRequest { bundle, one_time_prekeys })?;
            let mut text = format!("published {user} with {} one-time prekeys\n", outcome.one_time_prekeys);
            if outcome.identity_changed {
                text.push_str("note: this replaced a different identity key\n");
            }
            Ok(Out::new(
                text,
                json!({
                    "user": user,
                    "one_time_prekeys": outcome.one_time_prekeys,
                    "identity_changed": outcome.identity_changed,
                }),
            ))
        }
        KeysCommand::Fetch { user } => {
            let bundle = require_directory(s)?.fetch_bundle(user)?;
            bundle.verify().map_err(|e| CliError::Crypto(format!("bundle for {user}: {e}")))?;
            let value = serde_json::to_value(&bundle).expect("bundles serialise");
            Ok(Out::new(
                format!("{user} {}\n", fingerprint(&bundle.identity_pub)),
                json!({ "user": user, "fingerprint": fingerprint(&bundle.identity_pub), "bundle": value }),
            ))
        }
    }
}

/// One trailing newline is treated as the end of input, not message text.
fn strip_final_newline(mut text: String) -> String {
    if text.ends_with('\n') {
        text.pop();
        if text.ends_with('\r') {
            text.pop();
        }
    }
    text
}

fn encrypt(s: &Settings, to: &str, v2: bool) -> Result<Out, CliError> {
    let store = open_store_exclusive(s)?;
    let text = strip_final_newline(read_stdin()?);
    let mode = if v2 { ComposeMode::V2 } else { ComposeMode::V1 };
    let mut session = oneshot::Session::new(store, s.key_directory(), s.interceptor_config());
    let token = session.encrypt(to, mode, &text)?;
    Ok(Out::new(format!("{token}\n"), json!({ "to": to, "token": token })))
}

fn decrypt(s: &Settings, from: Option<&str>) -> Result<Out, CliError> {
    let store = open_store_exclusive(s)?;
    let selection = read_stdin()?;
    let mut session = oneshot::Session::new(store, s.key_directory(), s.interceptor_config());
    let outcomes = session.decrypt(&selection, from)?;
    let mut text = String::new();
    let mut items = Vec::new();
    let mut failed = 0;
    for o in &outcomes {
        items.push(match o {
            DecryptOutcome::Plaintext { sender, text: t, from_cache } => {
                text.push_str(t);
                text.push('\n');
                json!({ "status": "plaintext", "sender": sender, "text": t, "from_cache": from_cache })
            }
            DecryptOutcome::IntegrityWarning(why) => {
                failed += 1;
                log::warn!("integrity check failed: {why}");
                json!({ "status": "integrity_warning", "reason": why })
            }
            DecryptOutcome::Unrecoverable(why) => {
                failed += 1;
                log::warn!("cannot decrypt: {why}");
                json!({ "status": "unrecoverable", "reason": why })
            }
        });
    }
    let mut out = Out::new(text, json!({ "messages": items }));
    if failed > 0 {
        let reasons: Vec<String> = outcomes
            .iter()
            .filter_map(|o| match o {
                DecryptOutcome::IntegrityWarning(w) => Some(format!("integrity check failed: {w}")),
                DecryptOutcome::Unrecoverable(w) => Some(format!("unrecoverable: {w}")),
                DecryptOutcome::Plaintext { .. } => None,
            })
            .collect();
        out.error = Some(CliError::Crypto(format!(
            "{failed} of {} tokens not decrypted ({})",
            outcomes.len(),
            reasons.join("; ")
        )));
    }
    Ok(out)
}

fn simulate(path: &Path, out_path: Option<&Path>) -> Result<Out, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|n| n.to_str()).unwrap_or("scenario");
    let scenario = Scenario::parse(&text, name)?;
    let report = sim::run_scenario(&scenario)?;
    let rendered = report.to_json();
    if let Some(p) = out_path {
        std::fs::write(p, &rendered)?;
    }
    let mut out = Out::new(rendered, serde_json::to_value(&report).expect("reports serialise"));
    if !report.passed() {
        let failed: Vec<&str> = report.verdicts.iter().filter(|v| !v.pass).map(|v| v.property.as_str()).collect();
        out.error = Some(CliError::Failed(format!("failed verdicts: {}", failed.join(", "))));
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<Out, CliError> {
    let home = std::env::var_os("HOME").map(PathBuf::from);
    // A broken config file is reported even for commands that ignore it.
    let file = FileConfig::load(cli.config.as_deref(), home.as_deref())?;
    let over = Overrides {
        store_flag: cli.store.clone(),
        store_env: std::env::var_os("TEXTGUARD_STORE").map(PathBuf::from),
        directory: cli.directory.clone(),
        user: cli.user.clone(),
    };
    let settings = || Settings::resolve(file.clone(), over.clone(), home.as_deref());
    match &cli.command {
        Command::Init => init(&settings()?),
        Command::Daemon(DaemonCommand::Run(args)) => daemon_run(&settings()?, args, cli.json),
        Command::Directory(DirectoryCommand::Serve { bind }) => directory_serve(*bind),
        Command::Contact(cmd) => contact(&settings()?, cmd),
        Command::Keys(cmd) => keys(&settings()?, cmd),
        Command::Encrypt { to, v2 } => encrypt(&settings()?, to, *v2),
        Command::Decrypt { from } => decrypt(&settings()?, from.as_deref()),
        Command::Simulate { scenario, out } => simulate(scenario, out.as_deref()),
        Command::Bench { iterations } => {
            let rows = bench::run(*iterations)?;
            Ok(Out::new(bench::render(&rows), json!({ "rows": rows })))
        }
    }
}

fn report_error(e: &CliError, json: bool) {
    if json {
        let body = json!({ "error": e.code(), "message": e.to_string(), "exit_code": e.exit_code() });
        eprintln!("{body}");
    } else {
        eprintln!("textguard: {e}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = run(&cli);
    let error = match result {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let printed = if cli.json {
                writeln!(stdout, "{}", out.json)
            } else {
                stdout.write_all(out.text.as_bytes())
            };
            if printed.is_err() {
                return ExitCode::from(exit::FAILED);
            }
            out.error
        }
        Err(e) => Some(e),
    };
    match error {
        None => ExitCode::from(exit::OK),
        Some(e) => {
            report_error(&e, cli.json);
            ExitCode::from(e.exit_code())
        }
    }
}
