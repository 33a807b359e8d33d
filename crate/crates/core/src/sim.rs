//! Deterministic end-to-end scenarios.
//!
//! Participants each run an [`Interceptor`] on simulated backends against a
//! shared in-process directory. Whatever a participant's application
//! "sends" goes through a relay that plays the hostile server: it records
//! everything and may corrupt or replay messages. The report carries every
//! transcript and a verdict per property.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {"name": "v1_basic", "seed": 7, "relay": "faithful",
//!  "participants": [{"name": "alice"}, {"name": "bob"}],
//!  "steps": [
//!    {"at_ms": 0,  "who": "alice", "do": "chord", "chord": "ctrl+alt+e"},
//!    {"at_ms": 5,  "who": "alice", "do": "gui", "frame": {"kind": "recipient_set",
//!                  "payload": {"contact": "bob", "mode": "v1", "add_new": true}}},
//!    {"at_ms": 10, "who": "alice", "do": "type", "text": "{marker0}"},
//!    {"who": "alice", "do": "chord", "chord": "ctrl+alt+e"},
//!    {"who": "alice", "do": "send", "to": "bob"},
//!    {"who": "bob", "do": "receive"},
//!    {"who": "bob", "do": "chord", "chord": "ctrl+alt+u"},
//!    {"who": "bob", "do": "gui", "frame": {"kind": "recipient_set", "payload": {"contact": "alice"}}}
//!  ],
//!  "expect": [{"who": "bob", "outcome": "plaintext", "text": "{marker0}"}]}
//! ```
//!
//! The same steps may instead be given one per line (JSON Lines). Lines
//! holding a bare key event (`{"t_us":..,"key":..,"action":..}`) are typed
//! by the first participant. `{markerN}` in any text expands to the N-th
//! 32-character random alphanumeric marker drawn from the seed.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::distributions::Alphanumeric;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devapi;
use crate::directory::{Directory, KeyDirectory, OfflineDirectory, RegisterRequest};
use crate::gui::{AuthToken, GuiFrame, GuiMessage};
use crate::interceptor::{DecryptOutcome, Interceptor, InterceptorConfig, Io, SimHandles};
use crate::io::{AppTranscript, Chord, KeyEvent, MIN_EMIT_GAP_US};
use crate::keystore::Keystore;
use crate::token::{self, WireToken};

pub const MARKER_LEN: usize = 32;
const MS: u64 = 1000;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("scenario is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("unknown participant {0:?}")]
    UnknownParticipant(String),
    #[error("duplicate participant {0:?}")]
    DuplicateParticipant(String),
    #[error("step {step}: time runs backwards ({at_ms} ms < {now_ms} ms)")]
    TimeRegression { step: usize, at_ms: u64, now_ms: u64 },
    #[error("step {step}: {reason}")]
    Step { step: usize, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayBehavior {
    #[default]
    Faithful,
    /// Flip one seeded bit inside every token passing through.
    Tamper,
    /// Deliver normally, then deliver the first message to each recipient
    /// a second time once its queue is drained.
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantSpec {
    pub name: String,
    /// Publish a bundle to the directory at start.
    #[serde(default = "yes")]
    pub registered: bool,
    /// Contacts pinned before the run (no directory fetch, no session).
    #[serde(default)]
    pub knows: Vec<String>,
    #[serde(default)]
    pub cache_received: bool,
    #[serde(default = "yes")]
    pub gui_connected: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Chord { chord: String },
    Type {
        text: String,
        #[serde(default = "default_step_ms")]
        step_ms: u64,
    },
    Key { event: KeyEvent },
    Gui {
        frame: GuiMessage,
        /// Override the auth token (to model a forged frame).
        #[serde(default)]
        auth: Option<String>,
    },
    Dev { request: String },
    /// The application sends its text typed since the last send.
    Send { to: String },
    /// The relay delivers the next queued message and the user selects it.
    Receive {},
    /// Stage arbitrary text as the selection.
    Select { text: String },
    /// Let time pass.
    Wait { ms: u64 },
    /// The GUI process dies.
    GuiDisconnect {},
}

fn default_step_ms() -> u64 {
    80
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub who: Option<String>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub who: String,
    /// `plaintext`, `integrity_warning` or `unrecoverable`, matched in
    /// order against the participant's decrypt results.
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    /// An error code the participant must have raised.
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub relay: RelayBehavior,
    #[serde(default = "yes")]
    pub directory_online: bool,
    #[serde(default = "default_participants")]
    pub participants: Vec<ParticipantSpec>,
    #[serde(default)]
    pub markers: Option<usize>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub expect: Vec<Expectation>,
}

fn default_participants() -> Vec<ParticipantSpec> {
    ["alice", "bob"]
        .into_iter()
        .map(|n| ParticipantSpec {
            name: n.to_string(),
            registered: true,
            knows: Vec::new(),
            cache_received: false,
            gui_connected: true,
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptLine {
    Step(Step),
    Key(KeyEvent),
}

impl Scenario {
    /// Parse either a JSON document or JSON Lines steps.
    pub fn parse(text: &str, name: &str) -> Result<Self, SpecError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            if let Ok(doc) = serde_json::from_str::<Scenario>(text) {
                let mut doc = doc;
                if doc.name.is_empty() {
                    doc.name = name.to_string();
                }
                return Ok(doc);
            }
            // A single-line JSONL file is also a valid object; fall through
            // only when the document form clearly does not apply.
            if serde_json::from_str::<serde_json::Value>(text).is_ok_and(|v| v.get("steps").is_some()) {
                return Err(serde_json::from_str::<Scenario>(text).unwrap_err().into());
            }
        }
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(line).map_err(|e| SpecError::Line {
                line: i + 1,
                reason: e.to_string(),
            })?;
            steps.push(match parsed {
                ScriptLine::Step(s) => s,
                ScriptLine::Key(event) => Step {
                    at_ms: None,
                    who: None,
                    action: Action::Key { event },
                },
            });
        }
        Ok(Scenario {
            name: name.to_string(),
            seed: 0,
            relay: RelayBehavior::Faithful,
            directory_online: true,
            participants: default_participants(),
            markers: None,
            steps,
            expect: Vec::new(),
        })
    }

    fn marker_count(&self) -> usize {
        if let Some(n) = self.markers {
            return n;
        }
        let text = serde_json::to_string(self).unwrap_or_default();
        (0..100)
            .take_while(|i| text.contains(&format!("{{marker{i}}}")))
            .count()
    }
}

/// Knobs that are not part of the scenario itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Negative control: run every participant with the keystream zeroed.
    pub cipher_disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRecord {
    pub from: String,
    pub to: String,
    /// Text as received from the sender.
    pub sent: String,
    /// Text as handed to the recipient.
    pub delivered: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptSummary {
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sender: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plaintext: Option<String>,
    pub from_cache: bool,
}

impl From<&DecryptOutcome> for DecryptSummary {
    fn from(o: &DecryptOutcome) -> Self {
        match o {
            DecryptOutcome::Plaintext { sender, text, from_cache } => DecryptSummary {
                outcome: "plaintext".into(),
                sender: sender.clone(),
                plaintext: Some(text.clone()),
                from_cache: *from_cache,
            },
            DecryptOutcome::IntegrityWarning(_) => DecryptSummary {
                outcome: "integrity_warning".into(),
                sender: None,
                plaintext: None,
                from_cache: false,
            },
            DecryptOutcome::Unrecoverable(_) => DecryptSummary {
                outcome: "unrecoverable".into(),
                sender: None,
                plaintext: None,
                from_cache: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantReport {
    pub name: String,
    pub transcript: AppTranscript,
    pub decrypts: Vec<DecryptSummary>,
    pub errors: Vec<String>,
    pub final_mode: String,
    pub capture_held: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub markers: Vec<String>,
    pub participants: Vec<ParticipantReport>,
    pub relay: Vec<RelayRecord>,
    pub verdicts: Vec<Verdict>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, property: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.property == property)
    }

    pub fn participant(&self, name: &str) -> Option<&ParticipantReport> {
        self.participants.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialise");
        s.push('\n');
        s
    }
}

/// Where a marker leaked.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("marker {marker} found in {location} at byte {offset}")]
pub struct Leak {
    pub marker: usize,
    pub location: String,
    pub offset: usize,
}

fn find_bytes(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Raw bytes inside every token-looking span of `text`, decoded when the
/// armor allows. Catches a cipher that leaks through the base64 layer.
fn token_payloads(text: &str) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find(token::GUARD_START) {
        let body = &rest[i + token::GUARD_START.len()..];
        let end = body.find(token::GUARD_END).unwrap_or(body.len());
        let interior: String = body[..end].chars().filter(|c| !c.is_ascii_whitespace()).collect();
        if let Ok(raw) = STANDARD.decode(interior.as_bytes()) {
            out.push(raw);
        }
        rest = &body[end..];
    }
    out
}

fn scan_text(markers: &[String], location: &str, text: &str) -> Result<(), Leak> {
    for (m, marker) in markers.iter().enumerate() {
        if let Some(offset) = text.find(marker.as_str()) {
            return Err(Leak { marker: m, location: location.to_string(), offset });
        }
        for (k, raw) in token_payloads(text).iter().enumerate() {
            if let Some(offset) = find_bytes(raw, marker.as_bytes()) {
                return Err(Leak {
                    marker: m,
                    location: format!("decoded token {k} of {location}"),
                    offset,
                });
            }
        }
    }
    Ok(())
}

/// Fail iff any marker appears in an application transcript or anything
/// the relay saw, including the decoded bytes of tokens.
pub fn assert_confidentiality(report: &ScenarioReport) -> Result<(), Leak> {
    let markers = &report.markers;
    for p in &report.participants {
        scan_text(markers, &format!("{} textbox", p.name), &p.transcript.textbox)?;
        let typed: String = p.transcript.event_log.iter().map(|e| e.input.as_str()).collect();
        scan_text(markers, &format!("{} event log", p.name), &typed)?;
    }
    for (i, r) in report.relay.iter().enumerate() {
        scan_text(markers, &format!("relay message {i}"), &r.sent)?;
        if let Some(d) = &r.delivered {
            scan_text(markers, &format!("relay delivery {i}"), d)?;
        }
    }
    Ok(())
}

struct Participant {
    name: String,
    ic: Interceptor,
    h: SimHandles,
    sent_chars: usize,
    exclusivity_violations: usize,
}

struct Run {
    scenario: Scenario,
    markers: Vec<String>,
    people: Vec<Participant>,
    relay: Vec<RelayRecord>,
    queues: BTreeMap<String, VecDeque<usize>>,
    replayed: BTreeMap<String, bool>,
    rng: ChaCha20Rng,
    now_us: u64,
}

fn expand(markers: &[String], text: &str) -> String {
    let mut out = text.to_string();
    for (i, m) in markers.iter().enumerate().rev() {
        out = out.replace(&format!("{{marker{i}}}"), m);
    }
    out
}

fn seed_bytes(seed: u64, salt: u64) -> [u8; 32] {
    let mut b = [0u8; 32];
    ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt).fill_bytes(&mut b);
    b
}

pub fn generate_markers(seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d61_726b);
    (0..count)
        .map(|_| (&mut rng).sample_iter(&Alphanumeric).take(MARKER_LEN).map(char::from).collect())
        .collect()
}

pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioReport, SpecError> {
    run_scenario_with(scenario, RunOptions::default())
}

pub fn run_scenario_with(scenario: &Scenario, options: RunOptions) -> Result<ScenarioReport, SpecError> {
    let markers = generate_markers(scenario.seed, scenario.marker_count());
    let directory: Arc<dyn KeyDirectory> = if scenario.directory_online {
        Arc::new(Directory::new())
    } else {
        Arc::new(OfflineDirectory)
    };

    let mut stores = Vec::new();
    for (i, spec) in scenario.participants.iter().enumerate() {
        if scenario.participants[..i].iter().any(|p| p.name == spec.name) {
            return Err(SpecError::DuplicateParticipant(spec.name.clone()));
        }
        let store = Keystore::ephemeral(Some(seed_bytes(scenario.seed, i as u64 + 1)));
        if spec.registered {
            let (bundle, one_time_prekeys) = store.publishable_bundle();
            // An offline directory rejects this; the scenario is about that.
            let _ = directory.register(&spec.name, RegisterRequest { bundle, one_time_prekeys });
        }
        stores.push(store);
    }
    let identities: BTreeMap<String, _> = scenario
        .participants
        .iter()
        .zip(&stores)
        .map(|(p, s)| (p.name.clone(), s.identity().public()))
        .collect();

    let mut people = Vec::new();
    for (i, (spec, mut store)) in scenario.participants.iter().zip(stores).enumerate() {
        for known in &spec.knows {
            let id = identities
                .get(known)
                .ok_or_else(|| SpecError::UnknownParticipant(known.clone()))?;
            store
                .add_contact(known, *id)
                .map_err(|e| SpecError::Step { step: 0, reason: e.to_string() })?;
        }
        let config = InterceptorConfig {
            cache_received: spec.cache_received,
            rng_seed: Some(seed_bytes(scenario.seed, 1000 + i as u64)),
            cipher_disabled: options.cipher_disabled,
            ..InterceptorConfig::default()
        };
        let (io, h) = Io::simulated(&config.timing);
        h.gui.set_connected(spec.gui_connected);
        let auth = AuthToken::from_string(hex::encode(seed_bytes(scenario.seed, 2000 + i as u64)));
        people.push(Participant {
            name: spec.name.clone(),
            ic: Interceptor::new(store, directory.clone(), io, auth, config),
            h,
            sent_chars: 0,
            exclusivity_violations: 0,
        });
    }

    let mut run = Run {
        scenario: scenario.clone(),
        markers,
        people,
        relay: Vec::new(),
        queues: BTreeMap::new(),
        replayed: BTreeMap::new(),
        rng: ChaCha20Rng::seed_from_u64(scenario.seed ^ 0x7265_6c61),
        now_us: 0,
    };
    for (i, step) in scenario.steps.iter().enumerate() {
        run.step(i, step)?;
    }
    // Let every pending flush land.
    run.now_us += 10_000 * MS;
    let t = run.now_us;
    for p in &mut run.people {
        let _ = p.ic.tick(t);
    }
    Ok(run.report())
}

impl Run {
    fn who(&self, step: usize, name: Option<&str>) -> Result<usize, SpecError> {
        match name {
            None if !self.people.is_empty() => Ok(0),
            None => Err(SpecError::Step { step, reason: "no participants".into() }),
            Some(n) => self
                .people
                .iter()
                .position(|p| p.name == n)
                .ok_or_else(|| SpecError::UnknownParticipant(n.to_string())),
        }
    }

    fn key(&mut self, who: usize, event: &KeyEvent) {
        let p = &mut self.people[who];
        let held = p.ic.capture_held();
        let raw_before = p.h.sink.transcript().event_log.iter().filter(|e| !e.synthetic).count();
        let _ = p.ic.handle_key(event);
        let raw_after = p.h.sink.transcript().event_log.iter().filter(|e| !e.synthetic).count();
        if held && raw_after > raw_before {
            p.exclusivity_violations += 1;
        }
    }

    fn step(&mut self, i: usize, step: &Step) -> Result<(), SpecError> {
        let who = self.who(i, step.who.as_deref())?;
        match step.at_ms {
            Some(at) if at * MS < self.now_us => {
                return Err(SpecError::TimeRegression { step: i, at_ms: at, now_ms: self.now_us / MS })
            }
            Some(at) => self.now_us = at * MS,
            None => self.now_us += MS,
        }
        // Whatever the step, the world's clock has moved for everyone.
        let now = self.now_us;
        for p in &mut self.people {
            let _ = p.ic.tick(now);
        }
        match &step.action {
            Action::Chord { chord } => {
                let c: Chord = chord.parse().map_err(|reason| SpecError::Step { step: i, reason })?;
                self.key(who, &KeyEvent::down(now, c.mods, c.key.clone()));
                self.key(who, &KeyEvent::up(now + MS / 2, c.mods, c.key));
                self.now_us += MS / 2;
            }
            Action::Type { text, step_ms } => {
                let text = expand(&self.markers, text);
                for e in crate::io::type_text(&text, now, step_ms * MS) {
                    self.key(who, &e);
                    self.now_us = e.timestamp_us;
                }
            }
            Action::Key { event } => {
                let mut e = event.clone();
                if step.at_ms.is_none() {
                    // Bare key lines carry their own clock.
                    if e.timestamp_us < self.now_us - MS {
                        return Err(SpecError::TimeRegression {
                            step: i,
                            at_ms: e.timestamp_us / MS,
                            now_ms: self.now_us / MS,
                        });
                    }
                    self.now_us = e.timestamp_us;
                } else {
                    e.timestamp_us = now;
                }
                self.key(who, &e);
            }
            Action::Gui { frame, auth } => {
                let mut frame = match frame {
                    GuiMessage::ComposeSubmit { text } => GuiMessage::ComposeSubmit { text: expand(&self.markers, text) },
                    other => other.clone(),
                };
                if let GuiMessage::RecipientSet { contact, .. } = &mut frame {
                    *contact = expand(&self.markers, contact);
                }
                let p = &mut self.people[who];
                let mut f = GuiFrame::new(frame, p.ic.auth_token());
                if let Some(a) = auth {
                    f.auth = a.clone();
                }
                let _ = p.ic.handle_gui(now, &f);
            }
            Action::Dev { request } => {
                let p = &mut self.people[who];
                let _ = devapi::handle_request(&mut p.ic, now, request);
            }
            Action::Send { to } => {
                self.who(i, Some(to))?;
                let p = &mut self.people[who];
                // The app cannot send while the daemon is still typing.
                self.now_us = self.now_us.max(p.h.sink.busy_until() + MIN_EMIT_GAP_US);
                let text = p.h.sink.textbox();
                let chars: Vec<char> = text.chars().collect();
                let message: String = chars[p.sent_chars.min(chars.len())..].iter().collect();
                p.sent_chars = chars.len();
                let from = p.name.clone();
                self.relay.push(RelayRecord { from, to: to.clone(), sent: message, delivered: None });
                self.queues.entry(to.clone()).or_default().push_back(self.relay.len() - 1);
            }
            Action::Receive {} => {
                let name = self.people[who].name.clone();
                let queue = self.queues.entry(name.clone()).or_default();
                let idx = match queue.pop_front() {
                    Some(idx) => idx,
                    None if self.scenario.relay == RelayBehavior::Replay
                        && !self.replayed.get(&name).copied().unwrap_or(false) =>
                    {
                        self.replayed.insert(name.clone(), true);
                        let first = self
                            .relay
                            .iter()
                            .position(|r| r.to == name)
                            .ok_or_else(|| SpecError::Step { step: i, reason: "nothing to replay".into() })?;
                        let mut copy = self.relay[first].clone();
                        copy.delivered = None;
                        self.relay.push(copy);
                        self.relay.len() - 1
                    }
                    None => return Err(SpecError::Step { step: i, reason: format!("no message queued for {name}") }),
                };
                let sent = self.relay[idx].sent.clone();
                let delivered = match self.scenario.relay {
                    RelayBehavior::Tamper => tamper(&sent, &mut self.rng),
                    _ => sent,
                };
                self.people[who].h.selection.stage(&delivered);
                self.relay[idx].delivered = Some(delivered);
            }
            Action::Select { text } => {
                let text = expand(&self.markers, text);
                self.people[who].h.selection.stage(&text);
            }
            Action::Wait { ms } => {
                self.now_us += ms * MS;
                let t = self.now_us;
                for p in &mut self.people {
                    let _ = p.ic.tick(t);
                }
            }
            Action::GuiDisconnect {} => self.people[who].h.gui.set_connected(false),
        }
        Ok(())
    }

    fn report(self) -> ScenarioReport {
        let participants: Vec<ParticipantReport> = self
            .people
            .iter()
            .map(|p| ParticipantReport {
                name: p.name.clone(),
                transcript: p.h.sink.transcript(),
                decrypts: p.ic.decrypt_log().iter().map(|r| DecryptSummary::from(&r.outcome)).collect(),
                errors: p.ic.errors().iter().map(|e| e.code().to_string()).collect(),
                final_mode: format!("{:?}", p.ic.mode()),
                capture_held: p.ic.capture_held(),
            })
            .collect();
        let mut report = ScenarioReport {
            name: self.scenario.name.clone(),
            markers: self.markers.clone(),
            participants,
            relay: self.relay,
            verdicts: Vec::new(),
        };

        let confidentiality = assert_confidentiality(&report);
        report.verdicts.push(Verdict {
            property: "confidentiality".into(),
            pass: confidentiality.is_ok(),
            detail: confidentiality.err().map(|l| l.to_string()).unwrap_or_default(),
        });

        let mut pacing = Vec::new();
        for p in &report.participants {
            let times = p.transcript.synthetic_times();
            if let Some(w) = times.windows(2).find(|w| w[1] < w[0] + MIN_EMIT_GAP_US) {
                pacing.push(format!("{}: {} us after {} us", p.name, w[1], w[0]));
            }
        }
        report.verdicts.push(Verdict {
            property: "pacing".into(),
            pass: pacing.is_empty(),
            detail: pacing.join("; "),
        });

        let exclusivity: Vec<String> = self
            .people
            .iter()
            .filter(|p| p.exclusivity_violations > 0)
            .map(|p| format!("{}: {} raw events while captured", p.name, p.exclusivity_violations))
            .collect();
        report.verdicts.push(Verdict {
            property: "exclusivity".into(),
            pass: exclusivity.is_empty(),
            detail: exclusivity.join("; "),
        });

        let released: Vec<String> = report
            .participants
            .iter()
            .filter(|p| p.capture_held)
            .map(|p| format!("{} still holds capture in {}", p.name, p.final_mode))
            .collect();
        report.verdicts.push(Verdict {
            property: "capture_released".into(),
            pass: released.is_empty(),
            detail: released.join("; "),
        });

        let mut single = Vec::new();
        for (i, r) in report.relay.iter().enumerate() {
            if r.sent.contains(token::GUARD_START) {
                let found = token::scan_tokens(&r.sent);
                let exact = found.len() == 1
                    && found[0].as_ref().is_ok_and(|t: &WireToken| t.as_str() == r.sent.trim());
                if !exact {
                    single.push(format!("relay message {i} is not exactly one token"));
                }
            }
        }
        report.verdicts.push(Verdict {
            property: "one_token_per_message".into(),
            pass: single.is_empty(),
            detail: single.join("; "),
        });

        let mut failures = Vec::new();
        let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
        for (k, e) in self.scenario.expect.iter().enumerate() {
            let Some(p) = report.participant(&e.who) else {
                failures.push(format!("expectation {k}: unknown participant {}", e.who));
                continue;
            };
            if let Some(code) = &e.error {
                if !p.errors.contains(code) {
                    failures.push(format!("expectation {k}: {} never raised {code}", e.who));
                }
            }
            if let Some(outcome) = &e.outcome {
                let n = cursor.entry(e.who.as_str()).or_insert(0);
                match p.decrypts.get(*n) {
                    None => failures.push(format!("expectation {k}: {} decrypted only {n} tokens", e.who)),
                    Some(d) => {
                        if &d.outcome != outcome {
                            failures.push(format!("expectation {k}: got {} not {outcome}", d.outcome));
                        }
                        if let Some(text) = &e.text {
                            let want = expand(&report.markers, text);
                            if d.plaintext.as_deref() != Some(want.as_str()) {
                                failures.push(format!("expectation {k}: wrong plaintext"));
                            }
                        }
                    }
                }
                *n += 1;
            }
        }
        report.verdicts.push(Verdict {
            property: "expectations".into(),
            pass: failures.is_empty(),
            detail: failures.join("; "),
        });
        report
    }
}

/// Flip one bit inside the binary body of every token in `text`.
fn tamper(text: &str, rng: &mut ChaCha20Rng) -> String {
    let mut out = text.to_string();
    for t in token::scan_tokens(text).into_iter().flatten() {
        let Ok(mut raw) = STANDARD.decode(t.interior()) else { continue };
        let bit = rng.gen_range(0..raw.len() * 8);
        raw[bit / 8] ^= 1 << (bit % 8);
        let forged = format!("{}{}{}", token::GUARD_START, STANDARD.encode(&raw), token::GUARD_END);
        out = out.replacen(t.as_str(), &forged, 1);
    }
    out
}
