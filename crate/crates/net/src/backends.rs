//! Backends for running the daemon without the Linux input stack.

use std::io::Write;
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use textguard_core::io::{InputCapture, IoError, KeyEvent, Output, OutputSink, SelectionProvider, MIN_EMIT_GAP_US};

/// Writes what the focused application would receive as JSON lines:
/// `{"t_us":..,"input":"a","synthetic":true}`.
pub struct JsonLinesSink<W: Write + Send> {
    out: Arc<Mutex<W>>,
    gap_us: u64,
    next_free: u64,
}

#[derive(Serialize)]
struct Line<'a> {
    t_us: u64,
    input: &'a str,
    synthetic: bool,
}

impl<W: Write + Send> JsonLinesSink<W> {
    pub fn new(out: W) -> Self {
        Self { out: Arc::new(Mutex::new(out)), gap_us: MIN_EMIT_GAP_US, next_free: 0 }
    }

    fn write(&self, t_us: u64, input: &str, synthetic: bool) {
        let mut line = serde_json::to_string(&Line { t_us, input, synthetic }).expect("lines always serialise");
        line.push('\n');
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
    }
}

fn describe(o: &Output) -> String {
    match o {
        Output::Text(c) => c.to_string(),
        Output::Backspace => "backspace".into(),
        Output::Chord(c) => c.to_string(),
    }
}

impl<W: Write + Send> OutputSink for JsonLinesSink<W> {
    fn emit(&mut self, now_us: u64, items: &[Output]) -> u64 {
        let mut t = now_us.max(self.next_free);
        let mut last = now_us;
        for item in items {
            self.write(t, &describe(item), true);
            last = t;
            t += self.gap_us;
        }
        if !items.is_empty() {
            self.next_free = t;
        }
        last
    }

    fn pass_through(&mut self, event: &KeyEvent) {
        if event.is_down() {
            let input = if event.mods.is_command() { event.chord().to_string() } else { event.key.to_string() };
            self.write(event.timestamp_us, &input, false);
        }
    }
}

/// Capture that always succeeds: for headless daemons whose only input is
/// the dev API and injected scripts.
#[derive(Debug, Default)]
pub struct NoCapture {
    held: bool,
}

impl InputCapture for NoCapture {
    fn acquire(&mut self) -> Result<(), IoError> {
        self.held = true;
        Ok(())
    }

    fn release(&mut self) {
        self.held = false;
    }

    fn is_held(&self) -> bool {
        self.held
    }
}

/// Reads the selection by running a command such as
/// `xclip -o -selection primary`.
#[derive(Debug, Clone)]
pub struct CommandSelection {
    program: String,
    args: Vec<String>,
}

impl CommandSelection {
    pub fn new(command: &str) -> Option<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self { program, args: parts.collect() })
    }
}

impl SelectionProvider for CommandSelection {
    fn selection(&mut self) -> Result<String, IoError> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .output()
            .map_err(|e| IoError::Backend(format!("{}: {e}", self.program)))?;
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        if !out.status.success() || text.is_empty() {
            return Err(IoError::EmptySelection);
        }
        Ok(text)
    }
}
