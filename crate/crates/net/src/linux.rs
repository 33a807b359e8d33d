//! Real keyboard backends on Linux: exclusive grab of an event device and a
//! uinput virtual keyboard for typing tokens. US layout only.
//!
//! Needs read access to `/dev/input/eventN` and write access to
//! `/dev/uinput`; run the daemon as a dedicated user in the `input` group.
//! Not exercised by the test suite.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::fd::AsRawFd;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use textguard_core::io::{Action, InputCapture, IoError, Key, KeyEvent, Modifiers, Output, OutputSink, MIN_EMIT_GAP_US};

use crate::daemon::DaemonHandle;

const EV_SYN: u16 = 0x00;
const EV_KEY: u16 = 0x01;
const SYN_REPORT: u16 = 0;

const KEY_LEFTCTRL: u16 = 29;
const KEY_LEFTSHIFT: u16 = 42;
const KEY_RIGHTSHIFT: u16 = 54;
const KEY_LEFTALT: u16 = 56;
const KEY_RIGHTCTRL: u16 = 97;
const KEY_RIGHTALT: u16 = 100;
const KEY_BACKSPACE: u16 = 14;

const fn ioc(dir: u64, kind: u8, nr: u8, size: usize) -> u64 {
    (dir << 30) | ((size as u64) << 16) | ((kind as u64) << 8) | nr as u64
}
const IOC_WRITE: u64 = 1;
const EVIOCGRAB: u64 = ioc(IOC_WRITE, b'E', 0x90, std::mem::size_of::<libc::c_int>());
const UI_SET_EVBIT: u64 = ioc(IOC_WRITE, b'U', 100, std::mem::size_of::<libc::c_int>());
const UI_SET_KEYBIT: u64 = ioc(IOC_WRITE, b'U', 101, std::mem::size_of::<libc::c_int>());
const UI_DEV_SETUP: u64 = ioc(IOC_WRITE, b'U', 3, std::mem::size_of::<UinputSetup>());
const UI_DEV_CREATE: u64 = ioc(0, b'U', 1, 0);
const UI_DEV_DESTROY: u64 = ioc(0, b'U', 2, 0);

#[repr(C)]
#[derive(Clone, Copy)]
struct InputEvent {
    time: libc::timeval,
    kind: u16,
    code: u16,
    value: i32,
}

#[repr(C)]
struct UinputSetup {
    bustype: u16,
    vendor: u16,
    product: u16,
    version: u16,
    name: [u8; 80],
    ff_effects_max: u32,
}

/// (code, shifted) for every character the sink can type.
fn us_layout() -> Vec<(char, u16, bool)> {
    let mut t = Vec::new();
    let rows: [(&str, &str, u16); 4] = [
        ("1234567890-=", "!@#$%^&*()_+", 2),
        ("qwertyuiop[]", "QWERTYUIOP{}", 16),
        ("asdfghjkl;'`", "ASDFGHJKL:\"~", 30),
        ("\\zxcvbnm,./", "|ZXCVBNM<>?", 43),
    ];
    for (plain, shifted, first) in rows {
        for (i, (p, s)) in plain.chars().zip(shifted.chars()).enumerate() {
            t.push((p, first + i as u16, false));
            t.push((s, first + i as u16, true));
        }
    }
    t.push((' ', 57, false));
    t.push(('\n', 28, false));
    t.push(('\t', 15, false));
    t
}

fn named_key(code: u16) -> Option<Key> {
    Some(match code {
        1 => Key::Escape,
        14 => Key::Backspace,
        15 => Key::Tab,
        28 => Key::Enter,
        59..=68 => Key::F((code - 58) as u8),
        87 => Key::F(11),
        88 => Key::F(12),
        102 => Key::Home,
        103 => Key::Up,
        105 => Key::Left,
        106 => Key::Right,
        107 => Key::End,
        108 => Key::Down,
        111 => Key::Delete,
        _ => return None,
    })
}

fn ioctl(file: &File, request: u64, arg: libc::c_ulong) -> std::io::Result<()> {
    // SAFETY: the fd is open for the lifetime of `file`; every request used
    // here takes an int or a pointer to a live, correctly sized struct.
    let r = unsafe { libc::ioctl(file.as_raw_fd(), request as _, arg) };
    if r < 0 {
        Err(std::io::Error::last_os_error())
    } else {
        Ok(())
    }
}

/// Exclusive grab of one keyboard event device.
pub struct EvdevCapture {
    device: Arc<File>,
    held: bool,
}

impl EvdevCapture {
    pub fn open(path: &Path) -> Result<(Self, Arc<File>), IoError> {
        let file = File::open(path).map_err(|e| IoError::Backend(format!("{}: {e}", path.display())))?;
        let device = Arc::new(file);
        Ok((Self { device: device.clone(), held: false }, device))
    }
}

impl InputCapture for EvdevCapture {
    fn acquire(&mut self) -> Result<(), IoError> {
        ioctl(&self.device, EVIOCGRAB, 1).map_err(|e| IoError::CaptureDenied(e.to_string()))?;
        self.held = true;
        Ok(())
    }

    fn release(&mut self) {
        if let Err(e) = ioctl(&self.device, EVIOCGRAB, 0) {
            log::error!("releasing keyboard grab: {e}");
        }
        self.held = false;
    }

    fn is_held(&self) -> bool {
        self.held
    }
}

impl Drop for EvdevCapture {
    fn drop(&mut self) {
        if self.held {
            self.release();
        }
    }
}

/// Read key events from `device` forever, feeding them to the daemon.
pub fn spawn_reader(device: Arc<File>, daemon: DaemonHandle) -> std::io::Result<std::thread::JoinHandle<()>> {
    std::thread::Builder::new().name("textguard-evdev".into()).spawn(move || {
        let layout = us_layout();
        let mut mods = Modifiers::NONE;
        let mut buf = [0u8; std::mem::size_of::<InputEvent>()];
        let mut file: &File = &device;
        while file.read_exact(&mut buf).is_ok() {
            // SAFETY: `buf` is exactly one kernel input_event.
            let ev: InputEvent = unsafe { std::ptr::read_unaligned(buf.as_ptr().cast()) };
            if ev.kind != EV_KEY {
                continue;
            }
            let down = ev.value != 0;
            match ev.code {
                KEY_LEFTCTRL | KEY_RIGHTCTRL => mods.ctrl = down,
                KEY_LEFTALT | KEY_RIGHTALT => mods.alt = down,
                KEY_LEFTSHIFT | KEY_RIGHTSHIFT => mods.shift = down,
                _ => {}
            }
            let key = named_key(ev.code).or_else(|| {
                layout
                    .iter()
                    .find(|(_, code, shifted)| *code == ev.code && *shifted == mods.shift)
                    .map(|(c, _, _)| Key::Char(*c))
            });
            let Some(key) = key else { continue };
            let mut key_mods = mods;
            if matches!(key, Key::Char(_)) {
                // Shift is already folded into the character.
                key_mods.shift = false;
            }
            let event = KeyEvent {
                timestamp_us: 0,
                key,
                action: if down { Action::Down } else { Action::Up },
                mods: key_mods,
            };
            if daemon.key(event).is_err() {
                break;
            }
        }
    })
}

/// Virtual keyboard typing into whatever has focus.
pub struct UinputSink {
    device: File,
    layout: Vec<(char, u16, bool)>,
    gap: Duration,
}

impl UinputSink {
    pub fn create() -> Result<Self, IoError> {
        let err = |e: std::io::Error| IoError::Backend(format!("/dev/uinput: {e}"));
        let device = OpenOptions::new().write(true).open("/dev/uinput").map_err(err)?;
        ioctl(&device, UI_SET_EVBIT, EV_KEY as _).map_err(err)?;
        let layout = us_layout();
        let mut codes: Vec<u16> = layout.iter().map(|(_, c, _)| *c).collect();
        codes.extend([KEY_LEFTSHIFT, KEY_LEFTCTRL, KEY_LEFTALT, KEY_BACKSPACE, 102, 103, 105, 106, 107, 108, 111]);
        codes.sort_unstable();
        codes.dedup();
        for code in codes {
            ioctl(&device, UI_SET_KEYBIT, code as _).map_err(err)?;
        }
        let mut setup = UinputSetup {
            bustype: 0x06, // BUS_VIRTUAL
            vendor: 0x7467,
            product: 0x0001,
            version: 1,
            name: [0; 80],
            ff_effects_max: 0,
        };
        let name = b"textguard virtual keyboard";
        setup.name[..name.len()].copy_from_slice(name);
        ioctl(&device, UI_DEV_SETUP, &setup as *const UinputSetup as libc::c_ulong).map_err(err)?;
        ioctl(&device, UI_DEV_CREATE, 0).map_err(err)?;
        // Give the display server a moment to notice the new device.
        std::thread::sleep(Duration::from_millis(200));
        Ok(Self { device, layout, gap: Duration::from_micros(MIN_EMIT_GAP_US) })
    }

    fn write(&mut self, kind: u16, code: u16, value: i32) {
        let ev = InputEvent { time: libc::timeval { tv_sec: 0, tv_usec: 0 }, kind, code, value };
        // SAFETY: InputEvent is repr(C) plain data.
        let bytes = unsafe {
            std::slice::from_raw_parts((&ev as *const InputEvent).cast::<u8>(), std::mem::size_of::<InputEvent>())
        };
        if let Err(e) = self.device.write_all(bytes) {
            log::error!("uinput write: {e}");
        }
    }

    fn tap(&mut self, modifiers: &[u16], code: u16) {
        for &m in modifiers {
            self.write(EV_KEY, m, 1);
        }
        self.write(EV_KEY, code, 1);
        self.write(EV_SYN, SYN_REPORT, 0);
        self.write(EV_KEY, code, 0);
        for &m in modifiers.iter().rev() {
            self.write(EV_KEY, m, 0);
        }
        self.write(EV_SYN, SYN_REPORT, 0);
    }

    fn code_for(&self, key: &Key) -> Option<(u16, bool)> {
        match key {
            Key::Char(c) => self.layout.iter().find(|(ch, _, _)| ch == c).map(|(_, code, s)| (*code, *s)),
            Key::Enter => Some((28, false)),
            Key::Backspace => Some((KEY_BACKSPACE, false)),
            Key::Tab => Some((15, false)),
            Key::Home => Some((102, false)),
            Key::Up => Some((103, false)),
            Key::Left => Some((105, false)),
            Key::Right => Some((106, false)),
            Key::End => Some((107, false)),
            Key::Down => Some((108, false)),
            Key::Delete => Some((111, false)),
            _ => None,
        }
    }
}

impl OutputSink for UinputSink {
    fn emit(&mut self, now_us: u64, items: &[Output]) -> u64 {
        let mut t = now_us;
        for (i, item) in items.iter().enumerate() {
            if i > 0 {
                std::thread::sleep(self.gap);
                t += MIN_EMIT_GAP_US;
            }
            let (key, mods) = match item {
                Output::Text(c) => (Key::Char(*c), Modifiers::NONE),
                Output::Backspace => (Key::Backspace, Modifiers::NONE),
                Output::Chord(chord) => (chord.key.clone(), chord.mods),
            };
            let Some((code, shifted)) = self.code_for(&key) else {
                log::warn!("no key code for {key}; skipped");
                continue;
            };
            let mut held = Vec::new();
            if mods.ctrl {
                held.push(KEY_LEFTCTRL);
            }
            if mods.alt {
                held.push(KEY_LEFTALT);
            }
            if mods.shift || shifted {
                held.push(KEY_LEFTSHIFT);
            }
            self.tap(&held, code);
        }
        t
    }

    /// Ungrabbed keystrokes already reach the application from the kernel.
    fn pass_through(&mut self, _event: &KeyEvent) {}
}

impl Drop for UinputSink {
    fn drop(&mut self) {
        let _ = ioctl(&self.device, UI_DEV_DESTROY, 0);
    }
}
