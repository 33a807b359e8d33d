//! The threaded daemon driven over its real sockets, with simulated
//! keyboard, application and selection.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use textguard_core::directory::{Directory, KeyDirectory, RegisterRequest};
use textguard_core::gui::{AuthToken, GuiFrame, GuiMessage, Purpose};
use textguard_core::interceptor::{DecryptOutcome, InterceptorConfig, Mode};
use textguard_core::io::{Chord, InputCapture, KeyEvent, SimCapture, SimSelection, SimSink};
use textguard_core::keystore::Keystore;
use textguard_core::token;
use textguard_net::gui_socket::read_token_file;
use textguard_net::{Backends, Daemon, DaemonHandle, DaemonOptions};

struct Rig {
    daemon: Daemon,
    sink: SimSink,
    capture: SimCapture,
    selection: SimSelection,
    token_path: std::path::PathBuf,
    _tmp: tempfile::TempDir,
}

fn rig(dir: Arc<Directory>, seed: u8, knows: Option<&Keystore>) -> Rig {
    let tmp = tempfile::tempdir().unwrap();
    let mut store = Keystore::ephemeral(Some([seed; 32]));
    if let Some(peer) = knows {
        store.add_contact("bob", peer.identity().public()).unwrap();
    }
    let sink = SimSink::new();
    let capture = SimCapture::new();
    let selection = SimSelection::new();
    let backends = Backends {
        sink: Box::new(sink.clone()),
        capture: Box::new(capture.clone()),
        selection: Box::new(selection.clone()),
    };
    let token_path = tmp.path().join("gui.token");
    let options = DaemonOptions::loopback(Some(0), 0, token_path.clone());
    let config = InterceptorConfig { rng_seed: Some([seed; 32]), ..Default::default() };
    let daemon = Daemon::start(store, dir, backends, config, &options).unwrap();
    Rig { daemon, sink, capture, selection, token_path, _tmp: tmp }
}

fn published_bob(dir: &Directory) -> Keystore {
    let bob = Keystore::ephemeral(Some([2; 32]));
    let (bundle, one_time_prekeys) = bob.publishable_bundle();
    dir.register("bob", RegisterRequest { bundle, one_time_prekeys }).unwrap();
    bob
}

struct GuiClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    token: AuthToken,
}

impl GuiClient {
    fn connect(addr: SocketAddr, token_path: &Path) -> Self {
        let token = read_token_file(token_path).unwrap();
        let writer = TcpStream::connect(addr).unwrap();
        writer.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let reader = BufReader::new(writer.try_clone().unwrap());
        let mut g = Self { reader, writer, token };
        g.send(GuiMessage::Close {});
        g
    }

    fn send(&mut self, msg: GuiMessage) {
        let mut line = GuiFrame::new(msg, &self.token).to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).unwrap();
    }

    fn recv(&mut self) -> GuiFrame {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        GuiFrame::from_line(&line).unwrap()
    }

    fn recv_until(&mut self, kind: &str) -> GuiFrame {
        loop {
            let f = self.recv();
            assert_eq!(f.auth, self.token.as_str(), "daemon frames carry the token");
            if f.message.kind() == kind {
                return f;
            }
        }
    }
}

fn wait_for(what: &str, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn mode(h: &DaemonHandle) -> Mode {
    h.with(|ic| ic.mode()).unwrap()
}

fn press(h: &DaemonHandle, chord: &str) {
    let c: Chord = chord.parse().unwrap();
    h.key(KeyEvent::down(0, c.mods, c.key.clone())).unwrap();
    h.key(KeyEvent::up(0, c.mods, c.key)).unwrap();
}

fn type_text(h: &DaemonHandle, text: &str) {
    for e in textguard_core::io::type_text(text, 0, 0) {
        h.key(e).unwrap();
    }
}

#[cfg(unix)]
#[test]
fn token_file_is_owner_only() {
    use std::os::unix::fs::PermissionsExt;
    let r = rig(Arc::new(Directory::new()), 1, None);
    let mode = std::fs::metadata(&r.token_path).unwrap().permissions().mode();
    assert_eq!(mode & 0o777, 0o600);
    assert_eq!(read_token_file(&r.token_path).unwrap().as_str().len(), 64);
    let path = r.token_path.clone();
    drop(r);
    assert!(!path.exists(), "token file removed at shutdown");
}

#[test]
fn wrong_token_is_rejected_without_a_session() {
    let r = rig(Arc::new(Directory::new()), 1, None);
    let mut s = TcpStream::connect(r.daemon.gui_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let forged = GuiFrame { message: GuiMessage::Close {}, auth: "0".repeat(64) };
    writeln!(s, "{}", forged.to_line()).unwrap();
    let mut reader = BufReader::new(s);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let f = GuiFrame::from_line(&line).unwrap();
    assert!(matches!(f.message, GuiMessage::Error { ref code, .. } if code == "bad_auth"));
    assert!(f.auth.is_empty(), "the token is never sent to an unauthenticated peer");
    line.clear();
    assert_eq!(reader.read_line(&mut line).unwrap(), 0, "connection closed");
    assert_eq!(mode(&r.daemon.handle()), Mode::Idle);
}

#[test]
fn shortcut_picker_type_flush_and_decrypt() {
    let dir = Arc::new(Directory::new());
    let bob_store = published_bob(&dir);
    let alice = rig(dir.clone(), 1, None);
    let h = alice.daemon.handle();
    let mut gui = GuiClient::connect(alice.daemon.gui_addr(), &alice.token_path);
    wait_for("gui connected", || alice.daemon.gui_connected());

    press(&h, "ctrl+alt+e");
    let start = gui.recv_until("session_start");
    assert!(matches!(start.message, GuiMessage::SessionStart { purpose: Purpose::Encrypt, .. }));
    gui.send(GuiMessage::RecipientSet { contact: "bob".into(), mode: Default::default(), add_new: true });
    wait_for("encrypting", || mode(&h) == Mode::EncryptingV1);
    assert!(alice.capture.is_held());

    type_text(&h, "meet at noon");
    // The mirror gets every character.
    let mut mirrored = String::new();
    while mirrored != "meet at noon" {
        if let GuiMessage::PlaintextAppend { text } = gui.recv().message {
            mirrored.push_str(&text);
        }
    }
    // Real debounce: a token appears once typing stops.
    wait_for("flush", || !token::scan_tokens(&alice.sink.textbox()).is_empty());
    press(&h, "ctrl+alt+e");
    wait_for("idle", || mode(&h) == Mode::Idle);
    assert!(!alice.capture.is_held());

    let textbox = alice.sink.textbox();
    assert_eq!(token::scan_tokens(&textbox).len(), 1);
    assert!(!textbox.contains("noon"));

    // Bob, in-process, reads it.
    let mut bob = textguard_core::interceptor::Interceptor::new(
        bob_store,
        dir,
        textguard_core::interceptor::Io::simulated(&Default::default()).0,
        AuthToken::from_string("b".into()),
        Default::default(),
    );
    let out = bob.decrypt_selection(&textbox, Some("alice")).unwrap();
    assert_eq!(out[0].plaintext(), Some("meet at noon"));
}

#[test]
fn dev_api_over_tcp() {
    let dir = Arc::new(Directory::new());
    let bob = published_bob(&dir);
    let alice = rig(dir, 1, Some(&bob));
    let _gui = GuiClient::connect(alice.daemon.gui_addr(), &alice.token_path);
    wait_for("gui connected", || alice.daemon.gui_connected());
    let s = TcpStream::connect(alice.daemon.dev_addr().unwrap()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut w = s.try_clone().unwrap();
    let mut r = BufReader::new(s);
    let mut ask = |line: &str| {
        writeln!(w, "{line}").unwrap();
        let mut out = String::new();
        r.read_line(&mut out).unwrap();
        out.trim().to_string()
    };
    assert!(ask("not json").starts_with(r#"{"status":"error","code":"bad_request""#));
    assert!(ask(r#"{"action":"encrypt","recipient":"mallory"}"#).contains("contact_not_found"));
    assert_eq!(ask(r#"{"action":"encrypt","recipient":"bob","mode":"v1"}"#), r#"{"status":"ok"}"#);
    assert!(ask(r#"{"action":"encrypt","recipient":"bob"}"#).contains(r#""code":"busy""#));
    assert_eq!(mode(&alice.daemon.handle()), Mode::EncryptingV1);
    assert!(alice.sink.transcript().event_log.is_empty(), "the dev API never types anything");
}

#[test]
fn gui_disconnect_fails_closed() {
    let dir = Arc::new(Directory::new());
    let bob = published_bob(&dir);
    let alice = rig(dir, 1, Some(&bob));
    let h = alice.daemon.handle();
    let gui = GuiClient::connect(alice.daemon.gui_addr(), &alice.token_path);
    wait_for("gui connected", || alice.daemon.gui_connected());
    assert!(h.dev_request(r#"{"action":"encrypt","recipient":"bob"}"#).unwrap().is_ok());
    type_text(&h, "half a thought");
    wait_for("flush", || !alice.sink.textbox().is_empty());
    drop(gui);
    wait_for("abort", || mode(&h) == Mode::Idle);
    assert!(!alice.capture.is_held());
    assert_eq!(alice.sink.textbox(), "", "emitted token erased on abort");
}

#[test]
fn decrypt_shortcut_with_gui_sender_choice() {
    let dir = Arc::new(Directory::new());
    // Bob runs the daemon; Alice encrypts in-process.
    let bob = rig(dir.clone(), 2, None);
    let bob_pub = Keystore::ephemeral(Some([2; 32]));
    let (bundle, one_time_prekeys) = bob_pub.publishable_bundle();
    dir.register("bob", RegisterRequest { bundle, one_time_prekeys }).unwrap();
    let mut alice_store = Keystore::ephemeral(Some([1; 32]));
    alice_store.add_contact("bob", bob_pub.identity().public()).unwrap();
    let (io, ah) = textguard_core::interceptor::Io::simulated(&Default::default());
    let mut alice = textguard_core::interceptor::Interceptor::new(
        alice_store,
        dir.clone() as Arc<dyn KeyDirectory>,
        io,
        AuthToken::from_string("a".into()),
        InterceptorConfig { rng_seed: Some([1; 32]), ..Default::default() },
    );
    alice.request_encryption(0, "bob", textguard_core::gui::ComposeMode::V2).unwrap();
    let frame = GuiFrame::new(GuiMessage::ComposeSubmit { text: "for bob".into() }, alice.auth_token());
    alice.handle_gui(1000, &frame).unwrap();
    let wire = ah.sink.textbox();

    let h = bob.daemon.handle();
    let mut gui = GuiClient::connect(bob.daemon.gui_addr(), &bob.token_path);
    wait_for("gui connected", || bob.daemon.gui_connected());
    bob.selection.stage(&format!("> {wire}\n"));
    press(&h, "ctrl+alt+u");
    gui.recv_until("session_start");
    gui.send(GuiMessage::RecipientSet { contact: "alice".into(), mode: Default::default(), add_new: false });
    let shown = gui.recv_until("show_decrypted");
    assert!(matches!(
        shown.message,
        GuiMessage::ShowDecrypted { text: Some(ref t), .. } if t == "for bob"
    ));
    let log = h.with(|ic| ic.decrypt_log().to_vec()).unwrap();
    assert!(matches!(log[0].outcome, DecryptOutcome::Plaintext { .. }));
    assert_eq!(bob.sink.textbox(), "", "decryption never types into the app");
}
