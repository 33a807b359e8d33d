//! Frames exchanged between the daemon and the secure GUI window.
//!
//! On the wire a frame is one line of JSON: `{"kind":..,"payload":{..},"auth":..}`.
//! Plaintext only ever travels over this channel. The real GUI is a separate
//! program; [`HeadlessGui`] stands in for it in tests and headless daemons.

use std::sync::{Arc, Mutex, MutexGuard};

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuiError {
    #[error("GUI is not connected")]
    Disconnected,
    #[error("frame rejected: bad auth token")]
    BadAuth,
    #[error("malformed frame: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Encrypt,
    Decrypt,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    /// Continual: each keystroke is encrypted as it is typed.
    #[default]
    V1,
    /// One-time: the message is written in the GUI and encrypted at once.
    V2,
}

/// Typed frame contents. `kind` selects the variant and `payload` holds
/// its fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum GuiMessage {
    /// Daemon asks the GUI to open. `recipient` is set once one is chosen.
    SessionStart {
        purpose: Purpose,
        #[serde(default)]
        contacts: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        recipient: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<ComposeMode>,
    },
    /// GUI picked a recipient (encrypt) or a sender (decrypt).
    RecipientSet {
        contact: String,
        #[serde(default)]
        mode: ComposeMode,
        /// Fetch the contact from the directory and pin its key first.
        #[serde(default)]
        add_new: bool,
    },
    PlaintextAppend { text: String },
    /// Splice at a character index: remove `delete` chars, then insert `insert`.
    PlaintextEdit {
        index: usize,
        delete: usize,
        #[serde(default)]
        insert: String,
    },
    ShowDecrypted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sender: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    ComposeSubmit { text: String },
    Close {},
    Error { code: String, message: String },
}

impl GuiMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            GuiMessage::SessionStart { .. } => "session_start",
            GuiMessage::RecipientSet { .. } => "recipient_set",
            GuiMessage::PlaintextAppend { .. } => "plaintext_append",
            GuiMessage::PlaintextEdit { .. } => "plaintext_edit",
            GuiMessage::ShowDecrypted { .. } => "show_decrypted",
            GuiMessage::ComposeSubmit { .. } => "compose_submit",
            GuiMessage::Close {} => "close",
            GuiMessage::Error { .. } => "error",
        }
    }

    /// Whether this frame may carry plaintext.
    pub fn carries_plaintext(&self) -> bool {
        matches!(
            self,
            GuiMessage::PlaintextAppend { .. }
                | GuiMessage::PlaintextEdit { .. }
                | GuiMessage::ShowDecrypted { .. }
                | GuiMessage::ComposeSubmit { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuiFrame {
    #[serde(flatten)]
    pub message: GuiMessage,
    pub auth: String,
}

impl GuiFrame {
    pub fn new(message: GuiMessage, auth: &AuthToken) -> Self {
        Self {
            message,
            auth: auth.as_str().to_string(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frames always serialise")
    }

    pub fn from_line(line: &str) -> Result<Self, GuiError> {
        serde_json::from_str(line.trim()).map_err(|e| GuiError::Malformed(e.to_string()))
    }
}

/// Random per-boot secret shared with the GUI through an owner-only file.
#[derive(Clone, PartialEq, Eq)]
pub struct AuthToken(String);

impl std::fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AuthToken(..)")
    }
}

impl AuthToken {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut raw = [0u8; 32];
        rng.fill_bytes(&mut raw);
        Self(hex::encode(raw))
    }

    pub fn from_string(s: String) -> Self {
        Self(s.trim().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn check(&self, frame: &GuiFrame) -> Result<(), GuiError> {
        let ok = self.0.len() == frame.auth.len()
            && bool::from(self.0.as_bytes().ct_eq(frame.auth.as_bytes()));
        if ok {
            Ok(())
        } else {
            Err(GuiError::BadAuth)
        }
    }
}

/// Daemon-to-GUI direction. GUI-to-daemon frames arrive on the daemon's
/// input queue.
pub trait GuiChannel {
    fn is_connected(&self) -> bool;
    fn send(&mut self, message: GuiMessage) -> Result<(), GuiError>;
}

#[derive(Debug, Default)]
struct HeadlessState {
    connected: bool,
    fail_after: Option<usize>,
    frames: Vec<GuiMessage>,
}

/// Records every frame. Clones share state so a test can keep a handle
/// while the interceptor owns another.
#[derive(Debug, Clone)]
pub struct HeadlessGui {
    inner: Arc<Mutex<HeadlessState>>,
}

impl Default for HeadlessGui {
    fn default() -> Self {
        Self::connected()
    }
}

impl HeadlessGui {
    pub fn connected() -> Self {
        Self {
            inner: Arc::new(Mutex::new(HeadlessState {
                connected: true,
                ..HeadlessState::default()
            })),
        }
    }

    pub fn disconnected() -> Self {
        let g = Self::connected();
        g.set_connected(false);
        g
    }

    fn state(&self) -> MutexGuard<'_, HeadlessState> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn set_connected(&self, on: bool) {
        self.state().connected = on;
    }

    /// Accept `n` more frames, then report the channel as closed.
    pub fn fail_after(&self, n: usize) {
        let mut s = self.state();
        s.fail_after = Some(s.frames.len() + n);
    }

    pub fn frames(&self) -> Vec<GuiMessage> {
        self.state().frames.clone()
    }

    /// The plaintext mirror as the GUI would render it from the frames.
    pub fn mirror(&self) -> String {
        let mut text: Vec<char> = Vec::new();
        for f in &self.state().frames {
            match f {
                GuiMessage::SessionStart { purpose: Purpose::Encrypt, recipient: None, .. } => text.clear(),
                GuiMessage::PlaintextAppend { text: t } => text.extend(t.chars()),
                GuiMessage::PlaintextEdit { index, delete, insert } => {
                    let at = (*index).min(text.len());
                    let end = (at + delete).min(text.len());
                    text.splice(at..end, insert.chars());
                }
                _ => {}
            }
        }
        text.into_iter().collect()
    }

    /// Every `show_decrypted` frame received.
    pub fn shown(&self) -> Vec<GuiMessage> {
        self.state()
            .frames
            .iter()
            .filter(|f| matches!(f, GuiMessage::ShowDecrypted { .. }))
            .cloned()
            .collect()
    }
}

impl GuiChannel for HeadlessGui {
    fn is_connected(&self) -> bool {
        self.state().connected
    }

    fn send(&mut self, message: GuiMessage) -> Result<(), GuiError> {
        let mut s = self.state();
        if s.fail_after.is_some_and(|n| s.frames.len() >= n) {
            s.connected = false;
        }
        if !s.connected {
            return Err(GuiError::Disconnected);
        }
        s.frames.push(message);
        Ok(())
    }
}
