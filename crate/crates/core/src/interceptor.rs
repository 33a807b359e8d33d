//! The daemon's mode state machine.
//!
//! One owner drives an [`Interceptor`] from a single ordered stream of
//! inputs: key events, GUI frames, developer-API requests and clock ticks.
//! Time is whatever the inputs say it is; the flush debounce fires when an
//! input (or [`Interceptor::tick`]) carries the clock past the deadline.

use std::sync::Arc;

use log::{debug, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use zeroize::Zeroizing;

use crate::directory::{DirectoryError, KeyDirectory};
use crate::gui::{
    AuthToken, ComposeMode, GuiChannel, GuiError, GuiFrame, GuiMessage, HeadlessGui, Purpose,
};
use crate::io::{
    Chord, InputCapture, IoError, Key, KeyEvent, Modifiers, Output, OutputSink, SelectionProvider,
    SimCapture, SimSelection, SimSink, WhitelistPolicy, MIN_EMIT_GAP_US,
};
use crate::keystore::{Keystore, StoreError};
use crate::message::{self, OpenError};
use crate::ratchet::{
    self, HandshakeHeader, MessageKeys, RatchetError, RatchetHeader, SessionState,
};
use crate::stream::{self, ComposeBuffer, Edit, KeystreamPad};
use crate::token::{self, DecodedToken, WireToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Idle,
    SelectingRecipient,
    EncryptingV1,
    EncryptingV2,
    Decrypting,
}

impl Mode {
    pub fn holds_capture(self) -> bool {
        matches!(
            self,
            Mode::SelectingRecipient | Mode::EncryptingV1 | Mode::EncryptingV2
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterceptorError {
    #[error(transparent)]
    CaptureDenied(IoError),
    #[error("the secure GUI is not connected")]
    GuiUnavailable,
    #[error(transparent)]
    Gui(#[from] GuiError),
    #[error("unknown contact {0:?}")]
    ContactNotFound(String),
    #[error("key directory unavailable: {0}")]
    DirectoryUnavailable(String),
    #[error("identity key for {0:?} differs from the pinned key")]
    IdentityChanged(String),
    #[error("no token in the selection")]
    NothingToDecrypt,
    #[error("already in {0:?} mode")]
    Busy(Mode),
    #[error("{kind} frame not expected in {mode:?} mode")]
    UnexpectedFrame { kind: &'static str, mode: Mode },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ratchet(#[from] RatchetError),
}

impl InterceptorError {
    /// Stable machine-readable code, shared with the developer API.
    pub fn code(&self) -> &'static str {
        match self {
            InterceptorError::CaptureDenied(_) => "capture_denied",
            InterceptorError::GuiUnavailable => "gui_unavailable",
            InterceptorError::Gui(GuiError::BadAuth) => "bad_auth",
            InterceptorError::Gui(_) => "gui_failed",
            InterceptorError::ContactNotFound(_) => "contact_not_found",
            InterceptorError::DirectoryUnavailable(_) => "directory_unavailable",
            InterceptorError::IdentityChanged(_) => "identity_changed",
            InterceptorError::NothingToDecrypt => "nothing_to_decrypt",
            InterceptorError::Busy(_) => "busy",
            InterceptorError::UnexpectedFrame { .. } => "unexpected_frame",
            InterceptorError::Store(_) => "store",
            InterceptorError::Ratchet(_) => "crypto",
        }
    }
}

impl From<DirectoryError> for InterceptorError {
    fn from(e: DirectoryError) -> Self {
        match e {
            DirectoryError::NotFound(id) => InterceptorError::ContactNotFound(id),
            other => InterceptorError::DirectoryUnavailable(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, InterceptorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingPolicy {
    pub min_emit_gap_us: u64,
    pub flush_debounce_ms: u64,
}

impl Default for TimingPolicy {
    fn default() -> Self {
        Self {
            min_emit_gap_us: MIN_EMIT_GAP_US,
            flush_debounce_ms: 300,
        }
    }
}

impl TimingPolicy {
    pub fn debounce_us(&self) -> u64 {
        self.flush_debounce_ms * 1000
    }
}

#[derive(Debug, Clone)]
pub struct InterceptorConfig {
    pub timing: TimingPolicy,
    pub whitelist: WhitelistPolicy,
    pub encrypt_shortcut: Chord,
    pub decrypt_shortcut: Chord,
    /// Keep received plaintexts in the local cache too. Off by default so
    /// erased keys really make old messages unreadable.
    pub cache_received: bool,
    /// Refuse to start without a connected GUI (plaintext has nowhere safe
    /// to go otherwise).
    pub require_gui: bool,
    /// Seed for ratchet key generation; entropy when unset.
    pub rng_seed: Option<[u8; 32]>,
    /// Negative control: replace the keystream with zeros.
    #[doc(hidden)]
    pub cipher_disabled: bool,
}

impl Default for InterceptorConfig {
    fn default() -> Self {
        Self {
            timing: TimingPolicy::default(),
            whitelist: WhitelistPolicy::default(),
            encrypt_shortcut: Chord::new(Modifiers::CTRL_ALT, Key::Char('e')),
            decrypt_shortcut: Chord::new(Modifiers::CTRL_ALT, Key::Char('u')),
            cache_received: false,
            require_gui: true,
            rng_seed: None,
            cipher_disabled: false,
        }
    }
}

/// Result of decrypting one token from a selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecryptOutcome {
    Plaintext {
        sender: Option<String>,
        text: String,
        from_cache: bool,
    },
    /// Malformed, forged or corrupted: nothing is displayed.
    IntegrityWarning(String),
    /// The message key has been erased and no cached copy exists.
    Unrecoverable(String),
}

impl DecryptOutcome {
    pub fn plaintext(&self) -> Option<&str> {
        match self {
            DecryptOutcome::Plaintext { text, .. } => Some(text),
            _ => None,
        }
    }

    fn to_frame(&self) -> GuiMessage {
        match self {
            DecryptOutcome::Plaintext { sender, text, .. } => GuiMessage::ShowDecrypted {
                sender: sender.clone(),
                text: Some(text.clone()),
                warning: None,
            },
            DecryptOutcome::IntegrityWarning(why) => GuiMessage::ShowDecrypted {
                sender: None,
                text: None,
                warning: Some(format!("integrity check failed: {why}")),
            },
            DecryptOutcome::Unrecoverable(why) => GuiMessage::ShowDecrypted {
                sender: None,
                text: None,
                warning: Some(format!("message can no longer be decrypted: {why}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecryptRecord {
    pub token_digest: [u8; 32],
    pub outcome: DecryptOutcome,
}

/// Everything the interceptor talks to besides the keystore and directory.
pub struct Io {
    pub sink: Box<dyn OutputSink + Send>,
    pub capture: Box<dyn InputCapture + Send>,
    pub selection: Box<dyn SelectionProvider + Send>,
    pub gui: Box<dyn GuiChannel + Send>,
}

/// Handles onto the simulated backends behind an [`Io`].
#[derive(Debug, Clone)]
pub struct SimHandles {
    pub sink: SimSink,
    pub capture: SimCapture,
    pub selection: SimSelection,
    pub gui: HeadlessGui,
}

impl Io {
    pub fn simulated(timing: &TimingPolicy) -> (Io, SimHandles) {
        let h = SimHandles {
            sink: SimSink::with_gap(timing.min_emit_gap_us),
            capture: SimCapture::new(),
            selection: SimSelection::new(),
            gui: HeadlessGui::connected(),
        };
        let io = Io {
            sink: Box::new(h.sink.clone()),
            capture: Box::new(h.capture.clone()),
            selection: Box::new(h.selection.clone()),
            gui: Box::new(h.gui.clone()),
        };
        (io, h)
    }
}

/// Inputs in the order the event loop received them.
#[derive(Debug, Clone)]
pub enum DaemonInput {
    Key(KeyEvent),
    Gui { at_us: u64, frame: GuiFrame },
    Tick(u64),
}

/// Keys and running ciphertext for the message being typed.
struct Draft {
    keys: MessageKeys,
    ratchet: RatchetHeader,
    handshake: Option<HandshakeHeader>,
    pad: KeystreamPad,
    compose: ComposeBuffer,
    /// Byte offset of the compose cursor; always on a char boundary.
    cursor: usize,
}

impl Draft {
    fn text(&self) -> &str {
        std::str::from_utf8(self.compose.plaintext()).expect("compose holds whole characters")
    }

    fn char_index(&self, byte: usize) -> usize {
        self.text()[..byte].chars().count()
    }
}

struct Outgoing {
    contact: String,
    session: SessionState,
    draft: Option<Draft>,
    /// Characters of our token currently sitting in the application.
    emitted_chars: usize,
    last_token: Option<WireToken>,
    last_plaintext: Zeroizing<Vec<u8>>,
}

pub struct Interceptor {
    config: InterceptorConfig,
    store: Keystore,
    directory: Arc<dyn KeyDirectory>,
    io: Io,
    auth: AuthToken,
    rng: ChaCha20Rng,
    mode: Mode,
    now_us: u64,
    flush_deadline: Option<u64>,
    outgoing: Option<Outgoing>,
    pending_selection: Option<String>,
    errors: Vec<InterceptorError>,
    decrypts: Vec<DecryptRecord>,
    sent: Vec<WireToken>,
}

impl Interceptor {
    pub fn new(
        store: Keystore,
        directory: Arc<dyn KeyDirectory>,
        io: Io,
        auth: AuthToken,
        config: InterceptorConfig,
    ) -> Self {
        let rng = match config.rng_seed {
            Some(seed) => ChaCha20Rng::from_seed(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Self {
            config,
            store,
            directory,
            io,
            auth,
            rng,
            mode: Mode::Idle,
            now_us: 0,
            flush_deadline: None,
            outgoing: None,
            pending_selection: None,
            errors: Vec::new(),
            decrypts: Vec::new(),
            sent: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn config(&self) -> &InterceptorConfig {
        &self.config
    }

    pub fn store(&self) -> &Keystore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Keystore {
        &mut self.store
    }

    pub fn into_store(self) -> Keystore {
        self.store
    }

    pub fn auth_token(&self) -> &AuthToken {
        &self.auth
    }

    pub fn capture_held(&self) -> bool {
        self.io.capture.is_held()
    }

    pub fn flush_deadline(&self) -> Option<u64> {
        self.flush_deadline
    }

    /// Every user-visible error raised so far, oldest first.
    pub fn errors(&self) -> &[InterceptorError] {
        &self.errors
    }

    pub fn decrypt_log(&self) -> &[DecryptRecord] {
        &self.decrypts
    }

    /// Final tokens of completed encryptions, in order.
    pub fn sent_tokens(&self) -> &[WireToken] {
        &self.sent
    }

    /// Plaintext currently being composed, if encrypting in v1.
    pub fn compose_text(&self) -> Option<&str> {
        self.outgoing.as_ref()?.draft.as_ref().map(Draft::text)
    }

    pub fn dispatch(&mut self, input: DaemonInput) -> Result<()> {
        match input {
            DaemonInput::Key(e) => self.handle_key(&e),
            DaemonInput::Gui { at_us, frame } => self.handle_gui(at_us, &frame),
            DaemonInput::Tick(t) => self.tick(t),
        }
    }

    /// Run any flush that falls due at or before `now_us`.
    pub fn tick(&mut self, now_us: u64) -> Result<()> {
        if let Some(deadline) = self.flush_deadline {
            if deadline <= now_us {
                self.now_us = self.now_us.max(deadline);
                self.flush_deadline = None;
                self.flush();
            }
        }
        self.now_us = self.now_us.max(now_us);
        Ok(())
    }

    pub fn handle_key(&mut self, event: &KeyEvent) -> Result<()> {
        self.tick(event.timestamp_us)?;
        let r = match self.mode {
            Mode::Idle | Mode::Decrypting => self.watch(event),
            Mode::SelectingRecipient => {
                if self.is_shortcut(event, &self.config.encrypt_shortcut) && event.is_down() {
                    self.abort("cancelled");
                }
                Ok(())
            }
            Mode::EncryptingV1 => self.on_key_encrypting(event),
            Mode::EncryptingV2 => {
                if self.is_shortcut(event, &self.config.encrypt_shortcut) && event.is_down() {
                    self.end_encryption()
                } else {
                    Ok(())
                }
            }
        };
        self.report(r)
    }

    pub fn handle_gui(&mut self, at_us: u64, frame: &GuiFrame) -> Result<()> {
        self.tick(at_us)?;
        if let Err(e) = self.auth.check(frame) {
            return self.report(Err(e.into()));
        }
        let r = match (&frame.message, self.mode) {
            (GuiMessage::RecipientSet { contact, mode, add_new }, Mode::SelectingRecipient) => {
                self.set_recipient(contact, *mode, *add_new)
            }
            (GuiMessage::RecipientSet { contact, .. }, Mode::Decrypting) => {
                let selection = self.pending_selection.take().unwrap_or_default();
                let sender = (!contact.is_empty()).then_some(contact.as_str());
                self.decrypt_selection(&selection, sender).map(drop)
            }
            (GuiMessage::ComposeSubmit { text }, Mode::EncryptingV2) => self.compose_v2(text),
            (GuiMessage::Close {}, m) if m.holds_capture() => {
                self.abort("closed by user");
                Ok(())
            }
            (GuiMessage::Close {}, Mode::Decrypting) => {
                self.pending_selection = None;
                self.mode = Mode::Idle;
                Ok(())
            }
            (GuiMessage::Close {}, _) => Ok(()),
            (msg, mode) => Err(InterceptorError::UnexpectedFrame { kind: msg.kind(), mode }),
        };
        self.report(r)
    }

    /// Start encrypting to a known contact without the shortcut and picker.
    pub fn request_encryption(&mut self, at_us: u64, contact: &str, mode: ComposeMode) -> Result<()> {
        self.tick(at_us)?;
        if self.mode != Mode::Idle {
            return self.report(Err(InterceptorError::Busy(self.mode)));
        }
        if self.store.contact(contact).is_none() {
            return self.report(Err(InterceptorError::ContactNotFound(contact.to_string())));
        }
        let r = self
            .begin_encrypt()
            .and_then(|()| self.set_recipient(contact, mode, false));
        self.report(r)
    }

    fn report(&mut self, r: Result<()>) -> Result<()> {
        if let Err(e) = &r {
            warn!("{e}");
            self.errors.push(e.clone());
            if self.io.gui.is_connected() {
                let _ = self.io.gui.send(GuiMessage::Error {
                    code: e.code().to_string(),
                    message: e.to_string(),
                });
            }
        }
        r
    }

    fn is_shortcut(&self, event: &KeyEvent, shortcut: &Chord) -> bool {
        let key = match &event.key {
            Key::Char(c) => Key::Char(c.to_ascii_lowercase()),
            other => other.clone(),
        };
        event.mods.ctrl == shortcut.mods.ctrl && event.mods.alt == shortcut.mods.alt && key == shortcut.key
    }

    // Idle

    fn watch(&mut self, event: &KeyEvent) -> Result<()> {
        if self.is_shortcut(event, &self.config.encrypt_shortcut) {
            if event.is_down() {
                self.pending_selection = None;
                self.mode = Mode::Idle;
                return self.begin_encrypt();
            }
            return Ok(());
        }
        if self.is_shortcut(event, &self.config.decrypt_shortcut) {
            if event.is_down() {
                return self.begin_decrypt();
            }
            return Ok(());
        }
        self.io.sink.pass_through(event);
        Ok(())
    }

    fn begin_encrypt(&mut self) -> Result<()> {
        if self.config.require_gui && !self.io.gui.is_connected() {
            return Err(InterceptorError::GuiUnavailable);
        }
        self.io.capture.acquire().map_err(InterceptorError::CaptureDenied)?;
        self.mode = Mode::SelectingRecipient;
        let contacts = self.store.contacts().map(|c| c.contact_id.clone()).collect();
        let start = GuiMessage::SessionStart {
            purpose: Purpose::Encrypt,
            contacts,
            recipient: None,
            mode: None,
        };
        if let Err(e) = self.io.gui.send(start) {
            if self.config.require_gui {
                self.abort("GUI channel failed");
                return Err(e.into());
            }
        }
        debug!("capture acquired, selecting recipient");
        Ok(())
    }

    // Recipient selection

    fn set_recipient(&mut self, contact: &str, mode: ComposeMode, add_new: bool) -> Result<()> {
        let session = match self.open_outgoing(contact, add_new) {
            Ok(s) => s,
            Err(e) => {
                self.abort("recipient unavailable");
                return Err(e);
            }
        };
        self.outgoing = Some(Outgoing {
            contact: contact.to_string(),
            session,
            draft: None,
            emitted_chars: 0,
            last_token: None,
            last_plaintext: Zeroizing::new(Vec::new()),
        });
        self.mode = match mode {
            ComposeMode::V1 => Mode::EncryptingV1,
            ComposeMode::V2 => Mode::EncryptingV2,
        };
        let r = self.io.gui.send(GuiMessage::SessionStart {
            purpose: Purpose::Encrypt,
            contacts: Vec::new(),
            recipient: Some(contact.to_string()),
            mode: Some(mode),
        });
        self.gui_sent(r)
    }

    fn open_outgoing(&mut self, contact: &str, add_new: bool) -> Result<SessionState> {
        let pinned = self.store.contact(contact).map(|c| c.identity_pub);
        if pinned.is_some() && self.store.has_session(contact) {
            return Ok(self.store.session_load(contact)?);
        }
        if pinned.is_none() && !add_new {
            return Err(InterceptorError::ContactNotFound(contact.to_string()));
        }
        let bundle = self.directory.fetch_bundle(contact)?;
        if pinned.is_some_and(|p| p != bundle.identity_pub) {
            return Err(InterceptorError::IdentityChanged(contact.to_string()));
        }
        let (session, _) = ratchet::session_init_sender(self.store.identity(), &bundle, &mut self.rng)?;
        self.store.add_contact(contact, bundle.identity_pub).map_err(|e| match e {
            StoreError::IdentityChanged(id) => InterceptorError::IdentityChanged(id),
            other => other.into(),
        })?;
        self.store.session_save(contact, &session)?;
        Ok(session)
    }

    // Encrypting

    fn on_key_encrypting(&mut self, event: &KeyEvent) -> Result<()> {
        if !event.is_down() {
            return Ok(());
        }
        if self.is_shortcut(event, &self.config.encrypt_shortcut) {
            return self.end_encryption();
        }
        if self.outgoing.as_ref().is_some_and(|o| o.draft.as_ref().is_some_and(|d| d.compose.is_dirty())) {
            self.flush_deadline = Some(self.now_us + self.config.timing.debounce_us());
        }
        let chord = event.chord();
        if self.config.whitelist.allows(&chord) {
            if !chord.mods.is_command() {
                self.move_cursor(&chord.key);
            }
            self.io.sink.emit(self.now_us, &[Output::Chord(chord)]);
            return Ok(());
        }
        if event.mods.is_command() {
            return Ok(());
        }
        match event.key {
            Key::Char(c) => self.insert_char(c),
            Key::Enter => self.insert_char('\n'),
            Key::Tab => self.insert_char('\t'),
            Key::Backspace => self.delete_char(true),
            Key::Delete => self.delete_char(false),
            _ => Ok(()),
        }
    }

    fn ensure_draft(&mut self) -> Result<()> {
        let out = self.outgoing.as_mut().expect("encrypting without a recipient");
        if out.draft.is_some() {
            return Ok(());
        }
        let handshake = out.session.pending_handshake();
        let (keys, ratchet) = out.session.next_sending_keys(&mut self.rng)?;
        // Persist the advanced chain before anything derived from it leaves
        // the process, so these keys can never be drawn twice.
        self.store.session_save(&out.contact, &out.session)?;
        let pad = if self.config.cipher_disabled {
            KeystreamPad::disabled(&keys)
        } else {
            KeystreamPad::new(&keys)
        };
        out.draft = Some(Draft {
            keys,
            ratchet,
            handshake,
            pad,
            compose: ComposeBuffer::new(),
            cursor: 0,
        });
        Ok(())
    }

    fn draft_mut(&mut self) -> &mut Draft {
        self.outgoing
            .as_mut()
            .and_then(|o| o.draft.as_mut())
            .expect("draft exists while composing")
    }

    fn schedule_flush(&mut self) {
        self.flush_deadline = Some(self.now_us + self.config.timing.debounce_us());
    }

    fn insert_char(&mut self, c: char) -> Result<()> {
        self.ensure_draft()?;
        let d = self.draft_mut();
        let mut buf = [0u8; 4];
        let bytes = c.encode_utf8(&mut buf).as_bytes();
        let at_end = d.cursor == d.compose.len();
        let index = d.char_index(d.cursor);
        for &b in bytes {
            if d.cursor == d.compose.len() {
                d.compose.push(&mut d.pad, b);
            } else {
                d.compose
                    .edit(&mut d.pad, d.cursor, Edit::Insert(b))
                    .expect("cursor within compose buffer");
            }
            d.cursor += 1;
        }
        self.schedule_flush();
        let frame = if at_end {
            GuiMessage::PlaintextAppend { text: c.to_string() }
        } else {
            GuiMessage::PlaintextEdit { index, delete: 0, insert: c.to_string() }
        };
        let r = self.io.gui.send(frame);
        self.gui_sent(r)
    }

    fn delete_char(&mut self, backwards: bool) -> Result<()> {
        let Some(d) = self.outgoing.as_mut().and_then(|o| o.draft.as_mut()) else {
            return Ok(());
        };
        let (start, width) = if backwards {
            match d.text()[..d.cursor].chars().next_back() {
                Some(c) => (d.cursor - c.len_utf8(), c.len_utf8()),
                None => return Ok(()),
            }
        } else {
            match d.text()[d.cursor..].chars().next() {
                Some(c) => (d.cursor, c.len_utf8()),
                None => return Ok(()),
            }
        };
        let index = d.char_index(start);
        for _ in 0..width {
            d.compose
                .edit(&mut d.pad, start, Edit::Delete)
                .expect("deletion within compose buffer");
        }
        d.cursor = start;
        self.schedule_flush();
        let r = self.io.gui.send(GuiMessage::PlaintextEdit {
            index,
            delete: 1,
            insert: String::new(),
        });
        self.gui_sent(r)
    }

    fn move_cursor(&mut self, key: &Key) {
        let Some(d) = self.outgoing.as_mut().and_then(|o| o.draft.as_mut()) else {
            return;
        };
        let text = d.text();
        d.cursor = match key {
            Key::Left => text[..d.cursor].chars().next_back().map_or(0, |c| d.cursor - c.len_utf8()),
            Key::Right => text[d.cursor..].chars().next().map_or(d.cursor, |c| d.cursor + c.len_utf8()),
            Key::Home => 0,
            Key::End => text.len(),
            _ => d.cursor,
        };
    }

    fn gui_sent(&mut self, r: std::result::Result<(), GuiError>) -> Result<()> {
        if let Err(e) = r {
            self.abort("GUI channel failed");
            return Err(e.into());
        }
        Ok(())
    }

    /// Replace whatever token we typed earlier with one for the current
    /// compose buffer.
    fn flush(&mut self) {
        let Some(out) = self.outgoing.as_mut() else {
            return;
        };
        let Some(d) = out.draft.as_mut() else {
            return;
        };
        let mut items = vec![Output::Backspace; out.emitted_chars];
        if d.compose.is_empty() {
            out.emitted_chars = 0;
            out.last_token = None;
            out.last_plaintext = Zeroizing::new(Vec::new());
        } else {
            let token = message::seal_token(&d.keys, d.ratchet, d.handshake, d.compose.ciphertext());
            items.extend(Output::text(token.as_str()));
            out.emitted_chars = token.as_str().chars().count();
            out.last_plaintext = Zeroizing::new(d.compose.plaintext().to_vec());
            out.last_token = Some(token);
        }
        d.compose.mark_clean();
        if !items.is_empty() {
            let done = self.io.sink.emit(self.now_us, &items);
            debug!("flush: {} synthetic events, done at {done} us", items.len());
        }
    }

    /// Type a finished message composed in the GUI.
    fn compose_v2(&mut self, text: &str) -> Result<()> {
        if text.is_empty() {
            return self.end_encryption();
        }
        self.ensure_draft()?;
        let out = self.outgoing.as_mut().expect("encrypting without a recipient");
        let d = out.draft.as_mut().expect("draft just created");
        let ciphertext = if self.config.cipher_disabled {
            d.compose.extend(&mut d.pad, text.as_bytes());
            d.compose.ciphertext().to_vec()
        } else {
            stream::one_shot_encrypt(&d.keys, text.as_bytes())
        };
        let token = message::seal_token(&d.keys, d.ratchet, d.handshake, &ciphertext);
        self.io.sink.emit(self.now_us, &Output::text(token.as_str()).collect::<Vec<_>>());
        out.emitted_chars = token.as_str().chars().count();
        out.last_plaintext = Zeroizing::new(text.as_bytes().to_vec());
        out.last_token = Some(token);
        d.compose.mark_clean();
        self.end_encryption()
    }

    /// Final flush, cache the sent plaintext, erase keys, give the
    /// keyboard back.
    pub fn end_encryption(&mut self) -> Result<()> {
        if !self.mode.holds_capture() {
            return Err(InterceptorError::Busy(self.mode));
        }
        if self.mode == Mode::EncryptingV1
            && self
                .outgoing
                .as_ref()
                .is_some_and(|o| o.draft.as_ref().is_some_and(|d| d.compose.is_dirty()))
        {
            self.flush();
        }
        self.flush_deadline = None;
        let mut result = Ok(());
        if let Some(out) = self.outgoing.take() {
            if let Some(token) = &out.last_token {
                result = self.store.cache_put(token.digest(), &out.last_plaintext);
                self.sent.push(token.clone());
            }
            let saved = self.store.session_save(&out.contact, &out.session);
            result = result.and(saved);
            // `out` drops here: pad and message keys are zeroized.
        }
        self.release();
        result.map_err(Into::into)
    }

    /// Fail-closed exit from any capturing mode: the partial token is erased
    /// from the application and nothing is cached.
    fn abort(&mut self, why: &str) {
        debug!("abort: {why}");
        self.flush_deadline = None;
        if let Some(out) = self.outgoing.take() {
            if out.emitted_chars > 0 {
                self.io
                    .sink
                    .emit(self.now_us, &vec![Output::Backspace; out.emitted_chars]);
            }
            if out.draft.is_some() {
                // Keys were drawn; keep them burned.
                let _ = self.store.session_save(&out.contact, &out.session);
            }
        }
        self.release();
    }

    fn release(&mut self) {
        self.io.capture.release();
        if self.io.gui.is_connected() {
            let _ = self.io.gui.send(GuiMessage::Close {});
        }
        self.mode = Mode::Idle;
    }

    // Decrypting

    fn begin_decrypt(&mut self) -> Result<()> {
        self.pending_selection = None;
        self.mode = Mode::Decrypting;
        let selection = match self.io.selection.selection() {
            Ok(s) => s,
            Err(IoError::EmptySelection) => {
                self.mode = Mode::Idle;
                return Err(InterceptorError::NothingToDecrypt);
            }
            Err(e) => {
                self.mode = Mode::Idle;
                return Err(InterceptorError::CaptureDenied(e));
            }
        };
        let found = token::scan_tokens(&selection);
        if found.is_empty() {
            self.mode = Mode::Idle;
            return Err(InterceptorError::NothingToDecrypt);
        }
        let all_cached = found.iter().all(|t| {
            t.as_ref()
                .is_ok_and(|t| matches!(self.store.cache_get(&t.digest()), Ok(Some(_))))
        });
        if all_cached || !self.io.gui.is_connected() {
            return self.decrypt_selection(&selection, None).map(drop);
        }
        self.pending_selection = Some(selection);
        let contacts = self.store.contacts().map(|c| c.contact_id.clone()).collect();
        let r = self.io.gui.send(GuiMessage::SessionStart {
            purpose: Purpose::Decrypt,
            contacts,
            recipient: None,
            mode: None,
        });
        if let Err(e) = r {
            self.pending_selection = None;
            self.mode = Mode::Idle;
            return Err(e.into());
        }
        Ok(())
    }

    /// Decrypt every token in `selection` and show the results in the GUI.
    /// `sender` is the user's answer to "who sent this", tried first.
    pub fn decrypt_selection(&mut self, selection: &str, sender: Option<&str>) -> Result<Vec<DecryptOutcome>> {
        self.pending_selection = None;
        let found = token::scan_tokens(selection);
        if found.is_empty() {
            self.mode = Mode::Idle;
            return Err(InterceptorError::NothingToDecrypt);
        }
        let mut outcomes = Vec::with_capacity(found.len());
        for t in found {
            let (digest, outcome) = match t {
                Ok(t) => (t.digest(), self.decrypt_token(&t, sender)),
                Err(e) => ([0; 32], DecryptOutcome::IntegrityWarning(e.to_string())),
            };
            if self.io.gui.is_connected() {
                let _ = self.io.gui.send(outcome.to_frame());
            }
            self.decrypts.push(DecryptRecord {
                token_digest: digest,
                outcome: outcome.clone(),
            });
            outcomes.push(outcome);
        }
        self.mode = Mode::Idle;
        Ok(outcomes)
    }

    fn decrypt_token(&mut self, token: &WireToken, sender: Option<&str>) -> DecryptOutcome {
        let digest = token.digest();
        match self.store.cache_get(&digest) {
            Ok(Some(pt)) => {
                return DecryptOutcome::Plaintext {
                    sender: None,
                    text: String::from_utf8_lossy(&pt).into_owned(),
                    from_cache: true,
                }
            }
            Ok(None) => {}
            Err(e) => warn!("plaintext cache: {e}"),
        }
        let decoded = match token.decode() {
            Ok(d) => d,
            Err(e) => return DecryptOutcome::IntegrityWarning(e.to_string()),
        };
        let result = match decoded.header.handshake {
            Some(hs) => self.open_with_handshake(&decoded, &hs, sender),
            None => self.open_with_sessions(&decoded, sender),
        };
        match result {
            Ok((contact, pt)) => {
                if self.config.cache_received {
                    if let Err(e) = self.store.cache_put(digest, &pt) {
                        warn!("plaintext cache: {e}");
                    }
                }
                DecryptOutcome::Plaintext {
                    sender: Some(contact),
                    text: String::from_utf8_lossy(&pt).into_owned(),
                    from_cache: false,
                }
            }
            Err(outcome) => outcome,
        }
    }

    fn try_session(&mut self, contact: &str, decoded: &DecodedToken) -> std::result::Result<Vec<u8>, OpenError> {
        let mut session = self
            .store
            .session_load(contact)
            .map_err(|_| OpenError::Ratchet(RatchetError::BundleRejected("no session")))?;
        let pt = message::open_decoded(&mut session, decoded)?;
        if let Err(e) = self.store.session_save(contact, &session) {
            warn!("saving session for {contact}: {e}");
        }
        Ok(pt)
    }

    fn open_with_sessions(
        &mut self,
        decoded: &DecodedToken,
        sender: Option<&str>,
    ) -> std::result::Result<(String, Vec<u8>), DecryptOutcome> {
        let mut candidates: Vec<String> = Vec::new();
        if let Some(s) = sender.filter(|s| self.store.has_session(s)) {
            candidates.push(s.to_string());
        }
        let ratchet_pub = decoded.header.ratchet.ratchet_pub;
        let mut rest: Vec<(bool, String)> = self
            .store
            .contacts()
            .map(|c| c.contact_id.clone())
            .filter(|c| self.store.has_session(c) && !candidates.contains(c))
            .map(|c| {
                let matches = self
                    .store
                    .session_load(&c)
                    .is_ok_and(|s| s.current_remote_ratchet() == ratchet_pub);
                (!matches, c)
            })
            .collect();
        rest.sort();
        candidates.extend(rest.into_iter().map(|(_, c)| c));

        let mut erased = false;
        for contact in candidates {
            match self.try_session(&contact, decoded) {
                Ok(pt) => return Ok((contact, pt)),
                Err(OpenError::Ratchet(RatchetError::KeyErased(_))) => erased = true,
                Err(_) => {}
            }
        }
        Err(if erased {
            DecryptOutcome::Unrecoverable("message key already used and erased".into())
        } else {
            DecryptOutcome::IntegrityWarning("no session authenticates this message".into())
        })
    }

    fn open_with_handshake(
        &mut self,
        decoded: &DecodedToken,
        hs: &HandshakeHeader,
        sender: Option<&str>,
    ) -> std::result::Result<(String, Vec<u8>), DecryptOutcome> {
        let known = self.store.contact_by_identity(&hs.identity_pub).map(|c| c.contact_id.clone());
        let contact = match (known, sender) {
            (Some(c), _) => c,
            (None, Some(s)) if self.store.contact(s).is_some() => {
                return Err(DecryptOutcome::IntegrityWarning(format!(
                    "sender identity does not match the key pinned for {s:?}"
                )))
            }
            (None, Some(s)) => s.to_string(),
            (None, None) => format!("peer-{}", hex::encode(&hs.identity_pub.as_bytes()[..4])),
        };

        // The sender attaches the handshake until we reply, so an existing
        // session may already cover this message.
        if self.store.has_session(&contact) {
            match self.try_session(&contact, decoded) {
                Ok(pt) => return Ok((contact, pt)),
                Err(OpenError::Ratchet(RatchetError::KeyErased(_))) => {
                    return Err(DecryptOutcome::Unrecoverable(
                        "message key already used and erased".into(),
                    ))
                }
                Err(_) => {}
            }
        }

        let opened = self.store.accept_handshake_with(hs, |session| {
            message::open_decoded(session, decoded).map_err(HandshakeOpen::Open)
        });
        let (session, pt) = match opened {
            Ok(v) => v,
            Err(HandshakeOpen::Store(StoreError::Ratchet(RatchetError::PrekeyMissing(id)))) => {
                return Err(DecryptOutcome::IntegrityWarning(format!(
                    "handshake names prekey {id}, which this device does not hold"
                )))
            }
            Err(e) => return Err(DecryptOutcome::IntegrityWarning(e.to_string())),
        };
        if self.store.contact(&contact).is_none() {
            if let Err(e) = self.store.add_contact(&contact, hs.identity_pub) {
                return Err(DecryptOutcome::IntegrityWarning(e.to_string()));
            }
        }
        if let Err(e) = self.store.session_save(&contact, &session) {
            warn!("saving session for {contact}: {e}");
        }
        Ok((contact, pt))
    }
}

#[derive(Debug, Error)]
enum HandshakeOpen {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Open(OpenError),
}

impl std::fmt::Debug for Interceptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Interceptor")
            .field("mode", &self.mode)
            .field("now_us", &self.now_us)
            .field("flush_deadline", &self.flush_deadline)
            .finish_non_exhaustive()
    }
}

/// Random 32-byte seed, for callers that want a reproducible run.
pub fn seed_from_u64(n: u64) -> [u8; 32] {
    let mut seed = [0u8; 32];
    ChaCha20Rng::seed_from_u64(n).fill_bytes(&mut seed);
    seed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directory::{Directory, OfflineDirectory, RegisterRequest};
    use crate::io::type_text;

    const MS: u64 = 1000;

    struct Party {
        ic: Interceptor,
        h: SimHandles,
    }

    impl Party {
        fn new(name: &str, seed: u8, dir: Arc<dyn KeyDirectory>) -> Self {
            let store = Keystore::ephemeral(Some([seed; 32]));
            let (bundle, one_time_prekeys) = store.publishable_bundle();
            let _ = dir.register(name, RegisterRequest { bundle, one_time_prekeys });
            let config = InterceptorConfig {
                rng_seed: Some([seed.wrapping_add(100); 32]),
                ..InterceptorConfig::default()
            };
            let (io, h) = Io::simulated(&config.timing);
            let ic = Interceptor::new(store, dir, io, AuthToken::from_string(format!("{name}-token")), config);
            Self { ic, h }
        }

        fn gui(&mut self, t: u64, msg: GuiMessage) -> Result<()> {
            let frame = GuiFrame::new(msg, self.ic.auth_token());
            self.ic.handle_gui(t, &frame)
        }

        fn chord(&mut self, t: u64, chord: &str) -> Result<()> {
            let c: Chord = chord.parse().unwrap();
            self.ic.handle_key(&KeyEvent::down(t, c.mods, c.key.clone()))?;
            self.ic.handle_key(&KeyEvent::up(t + 10, c.mods, c.key))
        }

        fn type_str(&mut self, t: u64, text: &str) -> u64 {
            let events = type_text(text, t, 80 * MS);
            for e in &events {
                self.ic.handle_key(e).unwrap();
            }
            events.last().map_or(t, |e| e.timestamp_us)
        }

        fn start_v1(&mut self, t: u64, to: &str, add_new: bool) {
            self.chord(t, "ctrl+alt+e").unwrap();
            self.gui(t + MS, GuiMessage::RecipientSet { contact: to.into(), mode: ComposeMode::V1, add_new })
                .unwrap();
        }

        fn textbox(&self) -> String {
            self.h.sink.textbox()
        }
    }

    fn pair() -> (Party, Party, Arc<Directory>) {
        let dir = Arc::new(Directory::new());
        let alice = Party::new("alice", 1, dir.clone());
        let bob = Party::new("bob", 2, dir.clone());
        (alice, bob, dir)
    }

    fn only_token(text: &str) -> WireToken {
        let found = token::scan_tokens(text);
        assert_eq!(found.len(), 1, "textbox: {text:?}");
        let t = found.into_iter().next().unwrap().unwrap();
        assert_eq!(t.as_str(), text, "textbox holds exactly the token");
        t
    }

    #[test]
    fn shortcut_enters_selection_without_touching_app() {
        let (mut a, _, _) = pair();
        a.chord(0, "ctrl+alt+e").unwrap();
        assert_eq!(a.ic.mode(), Mode::SelectingRecipient);
        assert!(a.ic.capture_held());
        assert!(a.h.sink.transcript().event_log.is_empty());
        a.chord(MS, "ctrl+alt+e").unwrap();
        assert_eq!(a.ic.mode(), Mode::Idle);
        assert!(!a.ic.capture_held());
    }

    #[test]
    fn idle_keys_pass_through() {
        let (mut a, _, _) = pair();
        a.type_str(0, "ab");
        assert_eq!(a.textbox(), "ab");
        assert!(a.h.sink.transcript().event_log.iter().all(|e| !e.synthetic));
    }

    #[test]
    fn decrypt_shortcut_without_selection() {
        let (mut a, _, _) = pair();
        assert_eq!(a.chord(0, "ctrl+alt+u"), Err(InterceptorError::NothingToDecrypt));
        assert_eq!(a.ic.mode(), Mode::Idle);
        a.h.selection.stage("hello");
        assert_eq!(a.chord(MS, "ctrl+alt+u"), Err(InterceptorError::NothingToDecrypt));
    }

    #[test]
    fn capture_denied_stays_idle() {
        let (mut a, _, _) = pair();
        a.h.capture.deny("busy");
        assert!(matches!(a.chord(0, "ctrl+alt+e"), Err(InterceptorError::CaptureDenied(_))));
        assert_eq!(a.ic.mode(), Mode::Idle);
        assert!(matches!(a.h.gui.frames().last(), Some(GuiMessage::Error { .. })));
    }

    #[test]
    fn gui_required() {
        let (mut a, _, _) = pair();
        a.h.gui.set_connected(false);
        assert_eq!(a.chord(0, "ctrl+alt+e"), Err(InterceptorError::GuiUnavailable));
        assert!(!a.ic.capture_held());
    }

    #[test]
    fn v1_hi_then_quiescence_gives_one_token() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        assert_eq!(a.ic.mode(), Mode::EncryptingV1);
        let last = a.type_str(10 * MS, "hi");
        a.ic.tick(last + 300 * MS).unwrap();
        assert_eq!(a.h.gui.mirror(), "hi");
        let tok = only_token(&a.textbox());
        let out = b.ic.decrypt_selection(tok.as_str(), Some("alice")).unwrap();
        assert_eq!(out[0].plaintext(), Some("hi"));
    }

    #[test]
    fn flush_waits_for_silence() {
        let (mut a, _, _) = pair();
        a.start_v1(0, "bob", true);
        let last_key = 10 * MS;
        a.ic.handle_key(&KeyEvent::down(last_key, Modifiers::NONE, Key::Char('x'))).unwrap();
        a.ic.tick(last_key + 299 * MS).unwrap();
        assert_eq!(a.textbox(), "");
        a.ic.tick(last_key + 300 * MS).unwrap();
        let times = a.h.sink.transcript().synthetic_times();
        assert_eq!(times[0], last_key + 300 * MS);
        only_token(&a.textbox());
    }

    #[test]
    fn backspace_edits_compose() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "hello");
        a.ic.handle_key(&KeyEvent::down(t + 50 * MS, Modifiers::NONE, Key::Backspace)).unwrap();
        a.ic.tick(t + 400 * MS).unwrap();
        assert_eq!(a.h.gui.mirror(), "hell");
        let tok = only_token(&a.textbox());
        assert_eq!(b.ic.decrypt_selection(tok.as_str(), None).unwrap()[0].plaintext(), Some("hell"));
    }

    #[test]
    fn cursor_moves_and_multibyte_chars() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "héo");
        a.chord(t + MS, "left").unwrap();
        a.type_str(t + 2 * MS, "l");
        a.chord(t + 200 * MS, "home").unwrap();
        a.ic.handle_key(&KeyEvent::down(t + 201 * MS, Modifiers::NONE, Key::Delete)).unwrap();
        a.type_str(t + 202 * MS, "ö");
        a.chord(t + 300 * MS, "end").unwrap();
        a.ic.handle_key(&KeyEvent::down(t + 301 * MS, Modifiers::NONE, Key::Backspace)).unwrap();
        a.chord(t + 400 * MS, "ctrl+alt+e").unwrap();
        assert_eq!(a.h.gui.mirror(), "öél");
        let tok = only_token(&a.textbox());
        assert_eq!(b.ic.decrypt_selection(tok.as_str(), None).unwrap()[0].plaintext(), Some("öél"));
    }

    #[test]
    fn whitelisted_chord_forwarded_raw() {
        let (mut a, _, _) = pair();
        a.start_v1(0, "bob", true);
        a.type_str(10 * MS, "ab");
        a.chord(200 * MS, "ctrl+c").unwrap();
        a.chord(210 * MS, "ctrl+v").unwrap();
        let log = a.h.sink.transcript().event_log;
        assert!(log.iter().any(|e| e.input == "ctrl+c" && e.synthetic));
        assert!(!log.iter().any(|e| e.input == "ctrl+v"));
        assert!(!log.iter().any(|e| !e.synthetic));
    }

    #[test]
    fn termination_caches_and_releases() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "secret");
        a.chord(t + 5 * MS, "ctrl+alt+e").unwrap();
        assert_eq!(a.ic.mode(), Mode::Idle);
        assert!(!a.ic.capture_held());
        assert!(matches!(a.h.gui.frames().last(), Some(GuiMessage::Close {})));
        let tok = only_token(&a.textbox());
        assert_eq!(a.ic.sent_tokens(), std::slice::from_ref(&tok));

        // Keys are gone, but the sender's cache still knows the text.
        a.h.selection.stage(&format!("look: {tok} <-"));
        a.chord(t + 10 * MS, "ctrl+alt+u").unwrap();
        assert_eq!(
            a.ic.decrypt_log().last().unwrap().outcome,
            DecryptOutcome::Plaintext { sender: None, text: "secret".into(), from_cache: true }
        );

        // Plain typing reaches the app again.
        a.type_str(t + 20 * MS, "!");
        assert!(a.textbox().ends_with("Guard-end!"));

        let got = b.ic.decrypt_selection(tok.as_str(), None).unwrap();
        assert_eq!(got[0].plaintext(), Some("secret"));
        // No sender named: the new contact is pinned under a derived id.
        assert_eq!(b.ic.store().contacts().count(), 1);
    }

    #[test]
    fn decrypt_prompts_for_sender() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "yo");
        a.chord(t + MS, "ctrl+alt+e").unwrap();
        b.h.selection.stage(&a.textbox());
        b.chord(0, "ctrl+alt+u").unwrap();
        assert_eq!(b.ic.mode(), Mode::Decrypting);
        assert!(!b.ic.capture_held());
        b.gui(MS, GuiMessage::RecipientSet { contact: "alice".into(), mode: ComposeMode::V1, add_new: false })
            .unwrap();
        assert_eq!(b.ic.mode(), Mode::Idle);
        assert_eq!(
            b.h.gui.shown(),
            vec![GuiMessage::ShowDecrypted { sender: Some("alice".into()), text: Some("yo".into()), warning: None }]
        );
        assert!(b.textbox().is_empty());
    }

    #[test]
    fn replay_after_erasure_is_unrecoverable() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "once");
        a.chord(t + MS, "ctrl+alt+e").unwrap();
        let tok = a.textbox();
        assert!(b.ic.decrypt_selection(&tok, None).unwrap()[0].plaintext().is_some());
        let again = b.ic.decrypt_selection(&tok, None).unwrap();
        assert!(matches!(again[0], DecryptOutcome::Unrecoverable(_)), "{again:?}");
    }

    #[test]
    fn tampered_token_warns() {
        let (mut a, mut b, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "pay 10");
        a.chord(t + MS, "ctrl+alt+e").unwrap();
        let tok = only_token(&a.textbox());
        let mut d = tok.decode().unwrap();
        d.ciphertext[4] ^= 0x01;
        let forged = token::encode_token(&d.header, &d.ciphertext, &d.mac).unwrap();
        let out = b.ic.decrypt_selection(forged.as_str(), Some("alice")).unwrap();
        assert!(matches!(out[0], DecryptOutcome::IntegrityWarning(_)));
        assert!(b.h.gui.shown().iter().all(|f| matches!(f, GuiMessage::ShowDecrypted { text: None, .. })));
        // The genuine message still opens; the forgery burned nothing.
        assert_eq!(b.ic.decrypt_selection(tok.as_str(), None).unwrap()[0].plaintext(), Some("pay 10"));
    }

    #[test]
    fn conversation_both_ways() {
        let (mut a, mut b, _) = pair();
        let mut t = 0;
        for round in 0..4 {
            let (from, to, to_name) = if round % 2 == 0 { (&mut a, &mut b, "bob") } else { (&mut b, &mut a, "alice") };
            from.start_v1(t, to_name, true);
            let text = format!("message {round}");
            t = from.type_str(t + 10 * MS, &text);
            from.chord(t + MS, "ctrl+alt+e").unwrap();
            let box_text = from.textbox();
            let tok = token::scan_tokens(&box_text).pop().unwrap().unwrap();
            let got = to.ic.decrypt_selection(tok.as_str(), None).unwrap();
            assert_eq!(got[0].plaintext(), Some(text.as_str()), "round {round}");
            t += 10 * MS;
        }
        // Once Bob has replied, Alice's tokens carry no handshake.
        let last_from_alice = token::scan_tokens(&a.textbox()).pop().unwrap().unwrap();
        assert!(last_from_alice.decode().unwrap().header.handshake.is_none());
    }

    #[test]
    fn v2_compose_round_trip() {
        let (mut a, mut b, _) = pair();
        a.chord(0, "ctrl+alt+e").unwrap();
        a.gui(MS, GuiMessage::RecipientSet { contact: "bob".into(), mode: ComposeMode::V2, add_new: true })
            .unwrap();
        assert_eq!(a.ic.mode(), Mode::EncryptingV2);
        a.type_str(2 * MS, "ignored");
        assert_eq!(a.textbox(), "");
        a.gui(3 * MS, GuiMessage::ComposeSubmit { text: "server password: hunter2".into() }).unwrap();
        assert_eq!(a.ic.mode(), Mode::Idle);
        let tok = only_token(&a.textbox());
        assert_eq!(
            b.ic.decrypt_selection(tok.as_str(), None).unwrap()[0].plaintext(),
            Some("server password: hunter2")
        );
    }

    #[test]
    fn v2_empty_submission_emits_nothing() {
        let (mut a, _, _) = pair();
        a.chord(0, "ctrl+alt+e").unwrap();
        a.gui(MS, GuiMessage::RecipientSet { contact: "bob".into(), mode: ComposeMode::V2, add_new: true })
            .unwrap();
        a.gui(2 * MS, GuiMessage::ComposeSubmit { text: String::new() }).unwrap();
        assert_eq!(a.ic.mode(), Mode::Idle);
        assert!(a.h.sink.transcript().event_log.is_empty());
        assert!(a.ic.sent_tokens().is_empty());
    }

    #[test]
    fn v2_long_message_is_paced() {
        let (mut a, _, _) = pair();
        a.chord(0, "ctrl+alt+e").unwrap();
        a.gui(MS, GuiMessage::RecipientSet { contact: "bob".into(), mode: ComposeMode::V2, add_new: true })
            .unwrap();
        let text: String = "x".repeat(1000);
        a.gui(2 * MS, GuiMessage::ComposeSubmit { text }).unwrap();
        let times = a.h.sink.transcript().synthetic_times();
        assert!(times.len() > 1000);
        assert!(times.windows(2).all(|w| w[1] - w[0] >= MIN_EMIT_GAP_US));
    }

    #[test]
    fn unknown_contact_and_directory_down() {
        let (mut a, _, _) = pair();
        a.chord(0, "ctrl+alt+e").unwrap();
        let r = a.gui(MS, GuiMessage::RecipientSet { contact: "carol".into(), mode: ComposeMode::V1, add_new: false });
        assert_eq!(r, Err(InterceptorError::ContactNotFound("carol".into())));
        assert_eq!(a.ic.mode(), Mode::Idle);
        assert!(!a.ic.capture_held());

        let mut off = Party::new("alice", 1, Arc::new(OfflineDirectory));
        off.chord(0, "ctrl+alt+e").unwrap();
        let r = off.gui(MS, GuiMessage::RecipientSet { contact: "bob".into(), mode: ComposeMode::V1, add_new: true });
        assert!(matches!(r, Err(InterceptorError::DirectoryUnavailable(_))));
        assert_eq!(off.ic.mode(), Mode::Idle);
        assert!(!off.ic.capture_held());
        assert!(off.h.sink.transcript().event_log.is_empty());
    }

    #[test]
    fn identity_change_is_refused() {
        let dir = Arc::new(Directory::new());
        let mut a = Party::new("alice", 1, dir.clone());
        let _bob = Party::new("bob", 2, dir.clone());
        a.start_v1(0, "bob", true);
        a.chord(MS, "ctrl+alt+e").unwrap();
        // Bob reinstalls with a new key; Alice has a session, so nothing
        // is fetched. Drop the session to force a fetch.
        let _bob2 = Party::new("bob", 3, dir.clone());
        let mut fresh = Party::new("alice", 1, dir.clone());
        fresh.ic.store_mut().add_contact("bob", Keystore::ephemeral(Some([2; 32])).identity().public()).unwrap();
        fresh.chord(0, "ctrl+alt+e").unwrap();
        let r = fresh.gui(MS, GuiMessage::RecipientSet { contact: "bob".into(), mode: ComposeMode::V1, add_new: false });
        assert_eq!(r, Err(InterceptorError::IdentityChanged("bob".into())));
        assert!(!fresh.ic.capture_held());
    }

    #[test]
    fn gui_failure_aborts_and_erases() {
        let (mut a, _, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "abc");
        a.ic.tick(t + 400 * MS).unwrap();
        assert!(!a.textbox().is_empty());
        a.h.gui.fail_after(0);
        let r = a.ic.handle_key(&KeyEvent::down(t + 500 * MS, Modifiers::NONE, Key::Char('d')));
        assert!(matches!(r, Err(InterceptorError::Gui(GuiError::Disconnected))));
        assert_eq!(a.ic.mode(), Mode::Idle);
        assert!(!a.ic.capture_held());
        assert_eq!(a.textbox(), "");
        assert!(a.ic.sent_tokens().is_empty());
    }

    #[test]
    fn cancel_erases_emitted_token() {
        let (mut a, _, _) = pair();
        a.start_v1(0, "bob", true);
        let t = a.type_str(10 * MS, "draft");
        a.ic.tick(t + 400 * MS).unwrap();
        a.gui(t + 500 * MS, GuiMessage::Close {}).unwrap();
        assert_eq!(a.textbox(), "");
        assert!(!a.ic.capture_held());
        // Burned keys stay burned: the next message uses a later counter.
        a.start_v1(t + 600 * MS, "bob", false);
        let t2 = a.type_str(t + 700 * MS, "real");
        a.chord(t2 + MS, "ctrl+alt+e").unwrap();
        let tok = only_token(&a.textbox());
        assert_eq!(tok.decode().unwrap().header.ratchet.counter, 1);
    }

    #[test]
    fn bad_auth_frame_rejected() {
        let (mut a, _, _) = pair();
        a.chord(0, "ctrl+alt+e").unwrap();
        let forged = GuiFrame::new(
            GuiMessage::RecipientSet { contact: "bob".into(), mode: ComposeMode::V1, add_new: true },
            &AuthToken::from_string("wrong".into()),
        );
        assert_eq!(a.ic.handle_gui(MS, &forged), Err(InterceptorError::Gui(GuiError::BadAuth)));
        assert_eq!(a.ic.mode(), Mode::SelectingRecipient);
    }

    #[test]
    fn dev_request_paths() {
        let (mut a, _, _) = pair();
        assert_eq!(
            a.ic.request_encryption(0, "bob", ComposeMode::V1),
            Err(InterceptorError::ContactNotFound("bob".into()))
        );
        a.start_v1(0, "bob", true);
        assert_eq!(a.ic.request_encryption(MS, "bob", ComposeMode::V1), Err(InterceptorError::Busy(Mode::EncryptingV1)));
        a.chord(2 * MS, "ctrl+alt+e").unwrap();
        a.ic.request_encryption(3 * MS, "bob", ComposeMode::V1).unwrap();
        assert_eq!(a.ic.mode(), Mode::EncryptingV1);
        assert!(a.ic.capture_held());
    }

    #[test]
    fn deterministic_transcripts() {
        let run = || {
            let (mut a, _, _) = pair();
            a.start_v1(0, "bob", true);
            let t = a.type_str(10 * MS, "same every time");
            a.chord(t + 400 * MS, "ctrl+alt+e").unwrap();
            a.h.sink.transcript()
        };
        assert_eq!(run(), run());
    }
}
