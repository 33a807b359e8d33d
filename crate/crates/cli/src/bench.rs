//! Desk-scale latency measurements over in-memory stores.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use textguard_core::directory::{Directory, KeyDirectory, RegisterRequest};
use textguard_core::gui::ComposeMode;
use textguard_core::io::{Key, KeyEvent, Modifiers};
use textguard_core::keystore::Keystore;

use crate::error::CliError;
use crate::oneshot::Session;

const MS: u64 = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub name: String,
    /// One entry per measured size.
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub label: String,
    pub median_us: f64,
    pub p95_us: f64,
}

fn sample(label: &str, mut d: Vec<Duration>) -> Sample {
    d.sort();
    let at = |q: f64| d[((d.len() - 1) as f64 * q).round() as usize].as_secs_f64() * 1e6;
    Sample { label: label.to_string(), median_us: at(0.5), p95_us: at(0.95) }
}

fn letter(i: u64) -> Key {
    Key::Char((b'a' + (i % 26) as u8) as char)
}

fn text(len: usize) -> String {
    (0..len as u64).map(|i| (b'a' + (i % 26) as u8) as char).collect()
}

fn pair() -> Result<(Session, Session), CliError> {
    let dir = Arc::new(Directory::new());
    let bob = Keystore::ephemeral(None);
    let (bundle, one_time_prekeys) = bob.publishable_bundle();
    dir.register("bob", RegisterRequest { bundle, one_time_prekeys })?;
    let dir: Arc<dyn KeyDirectory> = dir;
    Ok((
        Session::new(Keystore::ephemeral(None), dir.clone(), Default::default()),
        Session::new(bob, dir, Default::default()),
    ))
}

/// The four rows: keystroke watch, per-character stream encryption,
/// one-shot encryption at 200 and 1000 characters, decryption at 50 and
/// 1000 characters.
pub fn run(iterations: usize) -> Result<Vec<Row>, CliError> {
    let n = iterations.max(1);
    let (mut alice, mut bob) = pair()?;

    let mut watch = Vec::with_capacity(n);
    for i in 0..n as u64 {
        alice.t += 50 * MS;
        let e = KeyEvent::down(alice.t, Modifiers::NONE, letter(i));
        let started = Instant::now();
        alice.ic.handle_key(&e)?;
        watch.push(started.elapsed());
    }

    // Establish the session first so setup cost stays out of the rows.
    let first = alice.encrypt("bob", ComposeMode::V2, "warm up")?;
    bob.decrypt(&first, None)?;

    alice.t += MS;
    alice.ic.request_encryption(alice.t, "bob", ComposeMode::V1)?;
    let mut per_char = Vec::with_capacity(n);
    for i in 0..n as u64 {
        // Spaced beyond the debounce so each keystroke pays for a flush.
        alice.t += 80 * MS;
        let e = KeyEvent::down(alice.t, Modifiers::NONE, letter(i));
        let started = Instant::now();
        alice.ic.handle_key(&e)?;
        per_char.push(started.elapsed());
    }
    alice.ic.end_encryption()?;
    let first = alice.ic.sent_tokens().last().expect("just sent").as_str().to_string();
    bob.decrypt(&first, None)?;

    let rounds = n.div_ceil(10).clamp(3, 200);
    let mut one_shot = Vec::new();
    let mut decrypt = Vec::new();
    for (enc_len, dec_len) in [(200, 50), (1000, 1000)] {
        let mut enc = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let started = Instant::now();
            let wire = alice.encrypt("bob", ComposeMode::V2, &text(enc_len))?;
            enc.push(started.elapsed());
            bob.decrypt(&wire, None)?;
        }
        one_shot.push(sample(&format!("{enc_len} chars"), enc));
        let mut dec = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let wire = alice.encrypt("bob", ComposeMode::V2, &text(dec_len))?;
            let started = Instant::now();
            let out = bob.decrypt(&wire, None)?;
            dec.push(started.elapsed());
            if out[0].plaintext().map(str::len) != Some(dec_len) {
                return Err(CliError::Crypto(format!("benchmark message of {dec_len} chars did not decrypt")));
            }
        }
        decrypt.push(sample(&format!("{dec_len} chars"), dec));
    }

    Ok(vec![
        Row { name: "watch per keystroke".into(), samples: vec![sample("idle", watch)] },
        Row { name: "stream encrypt per char".into(), samples: vec![sample("v1", per_char)] },
        Row { name: "one-shot encrypt".into(), samples: one_shot },
        Row { name: "decrypt".into(), samples: decrypt },
    ])
}

fn human(us: f64) -> String {
    if us >= 1000.0 {
        format!("{:.2} ms", us / 1000.0)
    } else {
        format!("{us:.1} us")
    }
}

pub fn render(rows: &[Row]) -> String {
    let mut out = format!("{:<26} {:<12} {:>12} {:>12}\n", "measurement", "size", "median", "p95");
    for r in rows {
        for s in &r.samples {
            out.push_str(&format!(
                "{:<26} {:<12} {:>12} {:>12}\n",
                r.name,
                s.label,
                human(s.median_us),
                human(s.p95_us)
            ));
        }
    }
    out
}
