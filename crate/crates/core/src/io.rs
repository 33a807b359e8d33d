//! Keyboard events and the input/output boundary between the interceptor
//! and the operating system.
//!
//! Every backend has a deterministic simulated implementation here. The
//! simulated clock is virtual: pacing shows up in timestamps, nothing sleeps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum spacing between two synthetic key presses.
pub const MIN_EMIT_GAP_US: u64 = 1250;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IoError {
    #[error("exclusive keyboard capture denied: {0}")]
    CaptureDenied(String),
    #[error("nothing is selected")]
    EmptySelection,
    #[error("event at {got} us precedes device clock {clock} us")]
    ClockError { clock: u64, got: u64 },
    #[error("script line {line}: {reason}")]
    Script { line: usize, reason: String },
    #[error("backend failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    /// A key producing this character (already shifted).
    Char(char),
    Enter,
    Backspace,
    Delete,
    Left,
    Right,
    Up,
    Down,
    Home,
    End,
    Tab,
    Escape,
    F(u8),
    Other(String),
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Char(' ') => f.write_str("space"),
            Key::Char(c) => write!(f, "{c}"),
            Key::Enter => f.write_str("enter"),
            Key::Backspace => f.write_str("backspace"),
            Key::Delete => f.write_str("delete"),
            Key::Left => f.write_str("left"),
            Key::Right => f.write_str("right"),
            Key::Up => f.write_str("up"),
            Key::Down => f.write_str("down"),
            Key::Home => f.write_str("home"),
            Key::End => f.write_str("end"),
            Key::Tab => f.write_str("tab"),
            Key::Escape => f.write_str("escape"),
            Key::F(n) => write!(f, "f{n}"),
            Key::Other(name) => f.write_str(name),
        }
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut chars = s.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return Ok(Key::Char(c));
        }
        let key = match s.to_ascii_lowercase().as_str() {
            "" => return Err("empty key name".into()),
            "space" => Key::Char(' '),
            "enter" | "return" => Key::Enter,
            "backspace" => Key::Backspace,
            "delete" => Key::Delete,
            "left" => Key::Left,
            "right" => Key::Right,
            "up" => Key::Up,
            "down" => Key::Down,
            "home" => Key::Home,
            "end" => Key::End,
            "tab" => Key::Tab,
            "escape" | "esc" => Key::Escape,
            lower => match lower.strip_prefix('f').and_then(|n| n.parse::<u8>().ok()) {
                Some(n) if (1..=24).contains(&n) => Key::F(n),
                _ => Key::Other(lower.to_string()),
            },
        };
        Ok(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Modifiers {
    pub ctrl: bool,
    pub alt: bool,
    pub shift: bool,
}

impl Modifiers {
    pub const NONE: Self = Self { ctrl: false, alt: false, shift: false };
    pub const CTRL: Self = Self { ctrl: true, alt: false, shift: false };
    pub const ALT: Self = Self { ctrl: false, alt: true, shift: false };
    pub const CTRL_ALT: Self = Self { ctrl: true, alt: true, shift: false };

    /// True when a shortcut modifier is held. Shift alone only selects
    /// the character.
    pub fn is_command(self) -> bool {
        self.ctrl || self.alt
    }

    fn names(self) -> Vec<String> {
        let mut v = Vec::new();
        for (on, name) in [(self.ctrl, "ctrl"), (self.alt, "alt"), (self.shift, "shift")] {
            if on {
                v.push(name.to_string());
            }
        }
        v
    }
}

/// A key together with its modifiers, e.g. `ctrl+alt+e`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chord {
    pub mods: Modifiers,
    pub key: Key,
}

impl Chord {
    pub fn new(mods: Modifiers, key: Key) -> Self {
        Self { mods, key }
    }
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.mods.names() {
            write!(f, "{m}+")?;
        }
        write!(f, "{}", self.key)
    }
}

impl FromStr for Chord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        // "ctrl++" names the plus key.
        let (mods_part, key_part) = match s.strip_suffix("++") {
            Some(rest) => (format!("{rest}+"), "+"),
            None => match s.rfind('+') {
                Some(i) if i + 1 < s.len() => (s[..=i].to_string(), &s[i + 1..]),
                Some(_) if s != "+" => return Err(format!("{s:?} ends in a dangling '+'")),
                _ => (String::new(), s),
            },
        };
        let mut mods = Modifiers::NONE;
        for m in mods_part.split('+').filter(|m| !m.is_empty()) {
            set_modifier(&mut mods, m)?;
        }
        Ok(Chord::new(mods, key_part.parse()?))
    }
}

fn set_modifier(mods: &mut Modifiers, name: &str) -> Result<(), String> {
    match name.to_ascii_lowercase().as_str() {
        "ctrl" | "control" => mods.ctrl = true,
        "alt" => mods.alt = true,
        "shift" => mods.shift = true,
        other => return Err(format!("unknown modifier {other:?}")),
    }
    Ok(())
}

/// One raw keyboard event.
///
/// Serialised as a script line:
/// `{"t_us":1000,"key":"a","action":"down","mods":["shift"]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent", into = "RawEvent")]
pub struct KeyEvent {
    pub timestamp_us: u64,
    pub key: Key,
    pub action: Action,
    pub mods: Modifiers,
}

impl KeyEvent {
    pub fn down(timestamp_us: u64, mods: Modifiers, key: Key) -> Self {
        Self { timestamp_us, key, action: Action::Down, mods }
    }

    pub fn up(timestamp_us: u64, mods: Modifiers, key: Key) -> Self {
        Self { timestamp_us, key, action: Action::Up, mods }
    }

    pub fn chord(&self) -> Chord {
        Chord::new(self.mods, self.key.clone())
    }

    pub fn is_down(&self) -> bool {
        self.action == Action::Down
    }
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    t_us: u64,
    key: String,
    action: Action,
    #[serde(default)]
    mods: Vec<String>,
}

impl TryFrom<RawEvent> for KeyEvent {
    type Error = String;

    fn try_from(raw: RawEvent) -> Result<Self, String> {
        let mut mods = Modifiers::NONE;
        for m in &raw.mods {
            set_modifier(&mut mods, m)?;
        }
        Ok(KeyEvent {
            timestamp_us: raw.t_us,
            key: raw.key.parse()?,
            action: raw.action,
            mods,
        })
    }
}

impl From<KeyEvent> for RawEvent {
    fn from(e: KeyEvent) -> Self {
        RawEvent {
            t_us: e.timestamp_us,
            key: e.key.to_string(),
            action: e.action,
            mods: e.mods.names(),
        }
    }
}

/// Parse a JSON Lines key script. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_script(text: &str) -> Result<Vec<KeyEvent>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let event = serde_json::from_str(line).map_err(|e| IoError::Script {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(event);
    }
    Ok(out)
}

/// Press and release every character of `text` starting at `start_us`,
/// `step_us` apart. Handy for tests and scenario generation.
pub fn type_text(text: &str, start_us: u64, step_us: u64) -> Vec<KeyEvent> {
    let mut out = Vec::with_capacity(text.len() * 2);
    let mut t = start_us;
    for c in text.chars() {
        let key = match c {
            '\n' => Key::Enter,
            '\t' => Key::Tab,
            c => Key::Char(c),
        };
        out.push(KeyEvent::down(t, Modifiers::NONE, key.clone()));
        out.push(KeyEvent::up(t + step_us / 2, Modifiers::NONE, key));
        t += step_us;
    }
    out
}

/// What a sink delivers to the focused application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Text(char),
    Backspace,
    Chord(Chord),
}

impl Output {
    pub fn text(s: &str) -> impl Iterator<Item = Output> + '_ {
        s.chars().map(Output::Text)
    }
}

/// Exclusive capture of the physical keyboard.
pub trait InputCapture {
    fn acquire(&mut self) -> Result<(), IoError>;
    fn release(&mut self);
    fn is_held(&self) -> bool;
}

/// The focused application's input: synthetic key presses typed on the
/// user's behalf, plus raw events the application receives directly while
/// capture is not held.
pub trait OutputSink {
    /// Type `items` no earlier than `now_us`, paced by the minimum gap.
    /// Returns the timestamp of the last item (or `now_us` when empty).
    fn emit(&mut self, now_us: u64, items: &[Output]) -> u64;

    /// An event reaching the application without interception.
    fn pass_through(&mut self, event: &KeyEvent);
}

pub trait SelectionProvider {
    fn selection(&mut self) -> Result<String, IoError>;
}

/// One entry of the application's view of its input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppEvent {
    pub t_us: u64,
    /// A character, `backspace`, or a chord such as `ctrl+c`.
    pub input: String,
    pub synthetic: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppTranscript {
    pub textbox: String,
    pub event_log: Vec<AppEvent>,
}

impl AppTranscript {
    fn record(&mut self, t_us: u64, out: &Output, synthetic: bool) {
        let input = match out {
            Output::Text(c) => {
                self.textbox.push(*c);
                c.to_string()
            }
            Output::Backspace => {
                self.textbox.pop();
                "backspace".to_string()
            }
            Output::Chord(ch) => ch.to_string(),
        };
        self.event_log.push(AppEvent { t_us, input, synthetic });
    }

    /// Rebuild the textbox from the event log alone.
    pub fn fold(&self) -> String {
        let mut text = String::new();
        for e in &self.event_log {
            let mut chars = e.input.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => text.push(c),
                _ if e.input == "backspace" => {
                    text.pop();
                }
                _ => {}
            }
        }
        text
    }

    /// Timestamps of the synthetic events, in emission order.
    pub fn synthetic_times(&self) -> Vec<u64> {
        self.event_log.iter().filter(|e| e.synthetic).map(|e| e.t_us).collect()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug)]
struct SimSinkState {
    transcript: AppTranscript,
    next_free_us: u64,
    gap_us: u64,
}

/// A single simulated textbox. Clones share the same transcript.
#[derive(Debug, Clone)]
pub struct SimSink {
    inner: Arc<Mutex<SimSinkState>>,
}

impl Default for SimSink {
    fn default() -> Self {
        Self::with_gap(MIN_EMIT_GAP_US)
    }
}

impl SimSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_gap(gap_us: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(SimSinkState {
                transcript: AppTranscript::default(),
                next_free_us: 0,
                gap_us,
            })),
        }
    }

    pub fn transcript(&self) -> AppTranscript {
        lock(&self.inner).transcript.clone()
    }

    pub fn textbox(&self) -> String {
        lock(&self.inner).transcript.textbox.clone()
    }

    /// Time at which the last scheduled synthetic event has been typed.
    pub fn busy_until(&self) -> u64 {
        let s = lock(&self.inner);
        s.next_free_us.saturating_sub(s.gap_us)
    }
}

impl OutputSink for SimSink {
    fn emit(&mut self, now_us: u64, items: &[Output]) -> u64 {
        let mut s = lock(&self.inner);
        let mut t = now_us.max(s.next_free_us);
        let mut last = now_us;
        for item in items {
            s.transcript.record(t, item, true);
            last = t;
            t += s.gap_us;
        }
        if !items.is_empty() {
            s.next_free_us = t;
        }
        last
    }

    fn pass_through(&mut self, event: &KeyEvent) {
        if !event.is_down() {
            return;
        }
        let out = match (&event.key, event.mods.is_command()) {
            (Key::Char(c), false) => Output::Text(*c),
            (Key::Enter, false) => Output::Text('\n'),
            (Key::Tab, false) => Output::Text('\t'),
            (Key::Backspace, false) => Output::Backspace,
            _ => Output::Chord(event.chord()),
        };
        lock(&self.inner).transcript.record(event.timestamp_us, &out, false);
    }
}

#[derive(Debug, Default)]
struct SimCaptureState {
    held: bool,
    deny: Option<String>,
    acquisitions: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SimCapture {
    inner: Arc<Mutex<SimCaptureState>>,
}

impl SimCapture {
    pub fn new() -> Self {
        Self::default()
    }

    /// Make every later `acquire` fail, as when another process holds the grab.
    pub fn deny(&self, reason: &str) {
        lock(&self.inner).deny = Some(reason.to_string());
    }

    pub fn allow(&self) {
        lock(&self.inner).deny = None;
    }

    pub fn acquisitions(&self) -> usize {
        lock(&self.inner).acquisitions
    }
}

impl InputCapture for SimCapture {
    fn acquire(&mut self) -> Result<(), IoError> {
        let mut s = lock(&self.inner);
        if let Some(reason) = &s.deny {
            return Err(IoError::CaptureDenied(reason.clone()));
        }
        s.held = true;
        s.acquisitions += 1;
        Ok(())
    }

    fn release(&mut self) {
        lock(&self.inner).held = false;
    }

    fn is_held(&self) -> bool {
        lock(&self.inner).held
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimSelection {
    inner: Arc<Mutex<Option<String>>>,
}

impl SimSelection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&self, text: &str) {
        *lock(&self.inner) = Some(text.to_string());
    }

    pub fn clear(&self) {
        *lock(&self.inner) = None;
    }
}

impl SelectionProvider for SimSelection {
    fn selection(&mut self) -> Result<String, IoError> {
        match lock(&self.inner).as_deref() {
            None | Some("") => Err(IoError::EmptySelection),
            Some(s) => Ok(s.to_string()),
        }
    }
}

/// A scripted keyboard with a virtual microsecond clock.
#[derive(Debug, Clone, Default)]
pub struct SimDevice {
    script: Vec<KeyEvent>,
    clock_us: u64,
}

impl SimDevice {
    pub fn new(script: Vec<KeyEvent>) -> Self {
        Self { script, clock_us: 0 }
    }

    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    /// Accept `event` if it does not run the clock backwards.
    pub fn push(&mut self, event: KeyEvent) -> Result<KeyEvent, IoError> {
        if event.timestamp_us < self.clock_us {
            return Err(IoError::ClockError {
                clock: self.clock_us,
                got: event.timestamp_us,
            });
        }
        self.clock_us = event.timestamp_us;
        Ok(event)
    }

    /// Validate and drain the whole script in order.
    pub fn drain(&mut self) -> Result<Vec<KeyEvent>, IoError> {
        let script = std::mem::take(&mut self.script);
        script.into_iter().map(|e| self.push(e)).collect()
    }
}

/// Chords forwarded to the application unencrypted while capture is held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhitelistPolicy {
    pub passthrough: BTreeSet<Chord>,
}

impl Default for WhitelistPolicy {
    fn default() -> Self {
        let mut passthrough = BTreeSet::new();
        for key in [Key::Left, Key::Right, Key::Up, Key::Down, Key::Home, Key::End] {
            passthrough.insert(Chord::new(Modifiers::NONE, key));
        }
        passthrough.insert(Chord::new(Modifiers::CTRL, Key::Char('a')));
        passthrough.insert(Chord::new(Modifiers::CTRL, Key::Char('c')));
        passthrough.insert(Chord::new(Modifiers::ALT, Key::F(4)));
        Self { passthrough }
    }
}

impl WhitelistPolicy {
    pub fn allows(&self, chord: &Chord) -> bool {
        let mut normal = chord.clone();
        if let Key::Char(c) = normal.key {
            if normal.mods.is_command() {
                normal.key = Key::Char(c.to_ascii_lowercase());
                normal.mods.shift = false;
            }
        }
        self.passthrough.contains(&normal)
    }
}
