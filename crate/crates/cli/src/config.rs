//! Settings: built-in defaults, then the TOML config file, then flags. The
//! `TEXTGUARD_STORE` variable sits between the file and `--store`.

use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use textguard_core::directory::{KeyDirectory, OfflineDirectory};
use textguard_core::interceptor::{InterceptorConfig, TimingPolicy};
use textguard_core::io::{Chord, MIN_EMIT_GAP_US};
use textguard_net::HttpDirectory;

use crate::error::CliError;

pub const DEFAULT_DEV_PORT: u16 = 47801;
pub const DEFAULT_GUI_PORT: u16 = 47802;
pub const DEFAULT_SELECTION_COMMAND: &str = "xclip -o -selection primary";
const TOKEN_FILE: &str = "gui.token";

/// The config file as written.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub store: Option<PathBuf>,
    /// Our user id on the key directory.
    pub user: Option<String>,
    /// Base URL of the key directory, e.g. `http://127.0.0.1:47800`.
    pub directory: Option<String>,
    pub dev_api: Option<bool>,
    pub dev_port: Option<u16>,
    pub gui_port: Option<u16>,
    pub encrypt_shortcut: Option<String>,
    pub decrypt_shortcut: Option<String>,
    pub min_emit_gap_us: Option<u64>,
    pub flush_debounce_ms: Option<u64>,
    pub selection_command: Option<String>,
}

impl FileConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            reason: e.message().to_string(),
        })
    }

    /// Read `explicit` if given (it must exist), else the default location
    /// if present, else nothing.
    pub fn load(explicit: Option<&Path>, home: Option<&Path>) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => match home.map(|h| h.join(".config/textguard/config.toml")) {
                Some(p) if p.exists() => p,
                _ => return Ok(Self::default()),
            },
        };
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, &path)
    }
}

/// Overrides from the command line and environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub store_flag: Option<PathBuf>,
    pub store_env: Option<PathBuf>,
    pub directory: Option<String>,
    pub user: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub store: PathBuf,
    pub user: Option<String>,
    pub directory: Option<String>,
    pub dev_api: bool,
    pub dev_port: u16,
    pub gui_port: u16,
    pub encrypt_shortcut: Chord,
    pub decrypt_shortcut: Chord,
    pub timing: TimingPolicy,
    pub selection_command: String,
}

impl Settings {
    pub fn resolve(file: FileConfig, over: Overrides, home: Option<&Path>) -> Result<Self, CliError> {
        let store = over
            .store_flag
            .or(over.store_env)
            .or(file.store)
            .or_else(|| home.map(|h| h.join(".textguard")))
            .ok_or_else(|| CliError::Usage("no store path: set --store, TEXTGUARD_STORE or HOME".into()))?;
        let defaults = InterceptorConfig::default();
        let chord = |name: &str, value: Option<String>, default: Chord| match value {
            None => Ok(default),
            Some(s) => s.parse::<Chord>().map_err(|e| CliError::Config {
                path: name.to_string(),
                reason: format!("{s:?}: {e}"),
            }),
        };
        let timing = TimingPolicy {
            min_emit_gap_us: file.min_emit_gap_us.unwrap_or(defaults.timing.min_emit_gap_us),
            flush_debounce_ms: file.flush_debounce_ms.unwrap_or(defaults.timing.flush_debounce_ms),
        };
        // Pacing can be slowed down, never sped up past the floor.
        if timing.min_emit_gap_us < MIN_EMIT_GAP_US {
            return Err(CliError::Config {
                path: "min_emit_gap_us".into(),
                reason: format!("{} is below the {MIN_EMIT_GAP_US} us floor", timing.min_emit_gap_us),
            });
        }
        Ok(Self {
            store,
            user: over.user.or(file.user),
            directory: over.directory.or(file.directory),
            dev_api: file.dev_api.unwrap_or(true),
            dev_port: file.dev_port.unwrap_or(DEFAULT_DEV_PORT),
            gui_port: file.gui_port.unwrap_or(DEFAULT_GUI_PORT),
            encrypt_shortcut: chord("encrypt_shortcut", file.encrypt_shortcut, defaults.encrypt_shortcut)?,
            decrypt_shortcut: chord("decrypt_shortcut", file.decrypt_shortcut, defaults.decrypt_shortcut)?,
            timing,
            selection_command: file.selection_command.unwrap_or_else(|| DEFAULT_SELECTION_COMMAND.into()),
        })
    }

    pub fn interceptor_config(&self) -> InterceptorConfig {
        InterceptorConfig {
            timing: self.timing,
            encrypt_shortcut: self.encrypt_shortcut.clone(),
            decrypt_shortcut: self.decrypt_shortcut.clone(),
            ..Default::default()
        }
    }

    pub fn key_directory(&self) -> Arc<dyn KeyDirectory> {
        match &self.directory {
            Some(url) => Arc::new(HttpDirectory::new(url)),
            None => Arc::new(OfflineDirectory),
        }
    }

    pub fn token_path(&self) -> PathBuf {
        self.store.join(TOKEN_FILE)
    }

    /// A daemon owns the store while its token file exists and its GUI
    /// port answers. A token file without a listener is left over from a
    /// crash.
    pub fn daemon_running(&self) -> bool {
        if !self.token_path().exists() {
            return false;
        }
        let addr = SocketAddr::from(([127, 0, 0, 1], self.gui_port));
        TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> FileConfig {
        FileConfig::parse(text, Path::new("test.toml")).unwrap()
    }

    #[test]
    fn defaults_without_a_file() {
        let s = Settings::resolve(FileConfig::default(), Overrides::default(), Some(Path::new("/home/u"))).unwrap();
        assert_eq!(s.store, Path::new("/home/u/.textguard"));
        assert_eq!(s.timing, TimingPolicy::default());
        assert_eq!(s.encrypt_shortcut.to_string(), "ctrl+alt+e");
        assert!(s.dev_api);
    }

    #[test]
    fn store_precedence_is_flag_then_env_then_file() {
        let f = file(r#"store = "/from/file""#);
        let mut over = Overrides::default();
        let resolve = |o: &Overrides| Settings::resolve(f.clone(), o.clone(), None).unwrap().store;
        assert_eq!(resolve(&over), Path::new("/from/file"));
        over.store_env = Some("/from/env".into());
        assert_eq!(resolve(&over), Path::new("/from/env"));
        over.store_flag = Some("/from/flag".into());
        assert_eq!(resolve(&over), Path::new("/from/flag"));
    }

    #[test]
    fn file_overrides_shortcuts_and_pacing() {
        let f = file(
            r#"
            encrypt_shortcut = "ctrl+alt+k"
            min_emit_gap_us = 2000
            flush_debounce_ms = 500
            dev_api = false
            "#,
        );
        let s = Settings::resolve(f, Overrides::default(), Some(Path::new("/h"))).unwrap();
        assert_eq!(s.encrypt_shortcut.to_string(), "ctrl+alt+k");
        assert_eq!(s.timing, TimingPolicy { min_emit_gap_us: 2000, flush_debounce_ms: 500 });
        assert!(!s.dev_api);
    }

    #[test]
    fn unknown_keys_and_bad_chords_are_rejected() {
        assert!(FileConfig::parse("colour = 1", Path::new("x")).is_err());
        let fast = file("min_emit_gap_us = 1000");
        assert!(Settings::resolve(fast, Overrides::default(), Some(Path::new("/h"))).is_err());
        for bad in ["ctrl+alt+", "hyper+u"] {
            let f = file(&format!("decrypt_shortcut = {bad:?}"));
            assert!(Settings::resolve(f, Overrides::default(), Some(Path::new("/h"))).is_err(), "{bad}");
        }
    }
}
