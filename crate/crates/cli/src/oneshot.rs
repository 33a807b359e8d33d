//! One-shot encryption and decryption through an in-process interceptor,
//! driven the way a user would: shortcut, recipient, typing.

use std::sync::Arc;

use textguard_core::directory::KeyDirectory;
use textguard_core::gui::{AuthToken, ComposeMode, GuiFrame, GuiMessage};
use textguard_core::interceptor::{DecryptOutcome, Interceptor, InterceptorConfig, Io};
use textguard_core::io::{self, KeyEvent};
use textguard_core::keystore::Keystore;

use crate::error::CliError;

pub struct Session {
    pub ic: Interceptor,
    /// Virtual clock, microseconds.
    pub t: u64,
}

impl Session {
    pub fn new(store: Keystore, directory: Arc<dyn KeyDirectory>, config: InterceptorConfig) -> Self {
        let (io, _) = Io::simulated(&config.timing);
        let ic = Interceptor::new(store, directory, io, AuthToken::from_string("in-process".into()), config);
        Self { ic, t: 0 }
    }

    fn frame(&mut self, message: GuiMessage) -> Result<(), CliError> {
        self.t += 1000;
        let frame = GuiFrame::new(message, self.ic.auth_token());
        self.ic.handle_gui(self.t, &frame)?;
        Ok(())
    }

    fn chord(&mut self, shortcut: fn(&InterceptorConfig) -> &textguard_core::io::Chord) -> Result<(), CliError> {
        self.t += 1000;
        let c = shortcut(self.ic.config()).clone();
        self.ic.handle_key(&KeyEvent::down(self.t, c.mods, c.key.clone()))?;
        self.ic.handle_key(&KeyEvent::up(self.t, c.mods, c.key))?;
        Ok(())
    }

    /// Encrypt `text` for `to` and return the armored token. A recipient
    /// not yet in the store is fetched from the directory and pinned.
    pub fn encrypt(&mut self, to: &str, mode: ComposeMode, text: &str) -> Result<String, CliError> {
        if text.is_empty() {
            return Err(CliError::Usage("nothing to encrypt".into()));
        }
        let sent_before = self.ic.sent_tokens().len();
        self.chord(|c| &c.encrypt_shortcut)?;
        self.frame(GuiMessage::RecipientSet { contact: to.to_string(), mode, add_new: true })?;
        match mode {
            ComposeMode::V1 => {
                self.t += 1000;
                for e in io::type_text(text, self.t, 0) {
                    self.ic.handle_key(&e)?;
                }
                self.chord(|c| &c.encrypt_shortcut)?;
            }
            ComposeMode::V2 => self.frame(GuiMessage::ComposeSubmit { text: text.to_string() })?,
        }
        match self.ic.sent_tokens().get(sent_before) {
            Some(t) if self.ic.sent_tokens().len() == sent_before + 1 => Ok(t.as_str().to_string()),
            _ => Err(CliError::Failed("encryption produced no token".into())),
        }
    }

    pub fn decrypt(&mut self, selection: &str, sender: Option<&str>) -> Result<Vec<DecryptOutcome>, CliError> {
        Ok(self.ic.decrypt_selection(selection, sender)?)
    }
}
