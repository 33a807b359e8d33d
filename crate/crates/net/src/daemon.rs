//! The running daemon: one thread owns the [`Interceptor`]; input sources,
//! the GUI socket and the dev API feed it through a queue. Flush deadlines
//! are served by waking the loop when the next one falls due.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::rngs::OsRng;
use textguard_core::devapi::{self, DevResponse};
use textguard_core::directory::KeyDirectory;
use textguard_core::gui::{AuthToken, GuiChannel, GuiFrame};
use textguard_core::interceptor::{Interceptor, InterceptorConfig, Io};
use textguard_core::io::{InputCapture, KeyEvent, OutputSink, SelectionProvider};
use textguard_core::keystore::Keystore;

use crate::gui_socket::{GuiServer, SocketGui};
use crate::NetError;

const IDLE_WAKE: Duration = Duration::from_millis(250);
const DEV_REPLY_TIMEOUT: Duration = Duration::from_secs(5);

/// Microseconds since the daemon started.
#[derive(Debug, Clone, Copy)]
pub struct Clock(Instant);

impl Clock {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn now_us(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }
}

type Inspect = Box<dyn FnOnce(&mut Interceptor) + Send>;

pub enum DaemonEvent {
    Key(KeyEvent),
    Gui(GuiFrame),
    Dev { line: String, reply: Sender<DevResponse> },
    /// Run a closure against the interceptor on the loop thread.
    Inspect(Inspect),
    Shutdown,
}

/// Cloneable handle for feeding the loop.
#[derive(Clone)]
pub struct DaemonHandle {
    tx: Sender<DaemonEvent>,
    clock: Clock,
}

impl DaemonHandle {
    pub fn now_us(&self) -> u64 {
        self.clock.now_us()
    }

    pub fn send(&self, event: DaemonEvent) -> Result<(), NetError> {
        self.tx.send(event).map_err(|_| NetError::Stopped)
    }

    /// A key event stamped with the daemon clock.
    pub fn key(&self, mut event: KeyEvent) -> Result<(), NetError> {
        event.timestamp_us = self.now_us();
        self.send(DaemonEvent::Key(event))
    }

    pub fn dev_request(&self, line: &str) -> Result<DevResponse, NetError> {
        let (reply, rx) = mpsc::channel();
        self.send(DaemonEvent::Dev { line: line.to_string(), reply })?;
        rx.recv_timeout(DEV_REPLY_TIMEOUT).map_err(|_| NetError::Stopped)
    }

    /// Evaluate `f` on the loop thread and return its result.
    pub fn with<T: Send + 'static>(&self, f: impl FnOnce(&mut Interceptor) -> T + Send + 'static) -> Result<T, NetError> {
        let (tx, rx) = mpsc::channel();
        self.send(DaemonEvent::Inspect(Box::new(move |ic| {
            let _ = tx.send(f(ic));
        })))?;
        rx.recv_timeout(DEV_REPLY_TIMEOUT).map_err(|_| NetError::Stopped)
    }
}

pub struct Backends {
    pub sink: Box<dyn OutputSink + Send>,
    pub capture: Box<dyn InputCapture + Send>,
    pub selection: Box<dyn SelectionProvider + Send>,
}

#[derive(Debug, Clone)]
pub struct DaemonOptions {
    /// Dev API listener; `None` disables it.
    pub dev_addr: Option<SocketAddr>,
    pub gui_addr: SocketAddr,
    pub token_path: PathBuf,
}

impl DaemonOptions {
    pub fn loopback(dev_port: Option<u16>, gui_port: u16, token_path: PathBuf) -> Self {
        let lo = |p| SocketAddr::from(([127, 0, 0, 1], p));
        Self { dev_addr: dev_port.map(lo), gui_addr: lo(gui_port), token_path }
    }
}

pub struct Daemon {
    handle: DaemonHandle,
    event_loop: Option<JoinHandle<Interceptor>>,
    gui: Option<GuiServer>,
    gui_link: SocketGui,
    dev: Option<DevServer>,
}

impl Daemon {
    pub fn start(
        store: Keystore,
        directory: Arc<dyn KeyDirectory>,
        backends: Backends,
        config: InterceptorConfig,
        options: &DaemonOptions,
    ) -> Result<Daemon, NetError> {
        let clock = Clock::start();
        let (tx, rx) = mpsc::channel();
        let handle = DaemonHandle { tx, clock };

        let token = AuthToken::generate(&mut OsRng);
        let gui_tx = handle.clone();
        let (gui_server, gui) = GuiServer::start(options.gui_addr, &options.token_path, token.clone(), move |f| {
            let _ = gui_tx.send(DaemonEvent::Gui(f));
        })?;
        let dev = match options.dev_addr {
            Some(addr) => Some(DevServer::start(addr, handle.clone())?),
            None => None,
        };

        let gui_link = gui.clone();
        let io = Io { sink: backends.sink, capture: backends.capture, selection: backends.selection, gui: Box::new(gui) };
        let ic = Interceptor::new(store, directory, io, token, config);
        let event_loop = std::thread::Builder::new()
            .name("textguard-daemon".into())
            .spawn(move || run_loop(ic, rx, clock))?;
        Ok(Daemon { handle, event_loop: Some(event_loop), gui: Some(gui_server), gui_link, dev })
    }

    pub fn handle(&self) -> DaemonHandle {
        self.handle.clone()
    }

    pub fn gui_addr(&self) -> SocketAddr {
        self.gui.as_ref().expect("running").local_addr()
    }

    /// Whether an authenticated GUI is attached.
    pub fn gui_connected(&self) -> bool {
        self.gui_link.is_connected()
    }

    pub fn dev_addr(&self) -> Option<SocketAddr> {
        self.dev.as_ref().map(|d| d.addr)
    }

    /// Stop every listener and hand back the interceptor.
    pub fn shutdown(mut self) -> Interceptor {
        self.stop().expect("event loop already joined")
    }

    /// Block until the event loop ends.
    pub fn wait(mut self) -> Option<Interceptor> {
        let ic = self.event_loop.take().and_then(|t| t.join().ok());
        self.stop();
        ic
    }

    fn stop(&mut self) -> Option<Interceptor> {
        self.dev.take();
        self.gui.take();
        let _ = self.handle.send(DaemonEvent::Shutdown);
        self.event_loop.take().and_then(|t| t.join().ok())
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run_loop(mut ic: Interceptor, rx: Receiver<DaemonEvent>, clock: Clock) -> Interceptor {
    loop {
        let now = clock.now_us();
        let wait = ic
            .flush_deadline()
            .map(|d| Duration::from_micros(d.saturating_sub(now)))
            .unwrap_or(IDLE_WAKE);
        let event = match rx.recv_timeout(wait) {
            Ok(e) => e,
            Err(RecvTimeoutError::Timeout) => {
                let _ = ic.tick(clock.now_us());
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let now = clock.now_us().max(ic.now_us());
        match event {
            DaemonEvent::Key(mut e) => {
                e.timestamp_us = e.timestamp_us.max(ic.now_us());
                let _ = ic.handle_key(&e);
            }
            DaemonEvent::Gui(frame) => {
                let _ = ic.handle_gui(now, &frame);
            }
            DaemonEvent::Dev { line, reply } => {
                let _ = ic.tick(now);
                let _ = reply.send(devapi::handle_request(&mut ic, now, &line));
            }
            DaemonEvent::Inspect(f) => {
                let _ = ic.tick(now);
                f(&mut ic);
            }
            DaemonEvent::Shutdown => break,
        }
    }
    if ic.mode().holds_capture() {
        // Going down mid-message: finish it rather than strand capture.
        let _ = ic.end_encryption();
    }
    ic
}

/// Line-JSON listener for application-initiated encryption.
struct DevServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl DevServer {
    fn start(bind: SocketAddr, daemon: DaemonHandle) -> Result<Self, NetError> {
        let listener = TcpListener::bind(bind).map_err(|source| NetError::Bind { addr: bind, source })?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::Builder::new().name("textguard-dev-accept".into()).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let daemon = daemon.clone();
                let _ = std::thread::Builder::new()
                    .name("textguard-dev-conn".into())
                    .spawn(move || serve_dev(stream, daemon));
            }
        })?;
        Ok(Self { addr, stop, accept: Some(accept) })
    }
}

impl Drop for DevServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

fn serve_dev(stream: TcpStream, daemon: DaemonHandle) {
    let Ok(mut out) = stream.try_clone() else { return };
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let resp = daemon
            .dev_request(&line)
            .unwrap_or_else(|e| DevResponse::error("unavailable", e.to_string()));
        let mut text = resp.to_line();
        text.push('\n');
        if out.write_all(text.as_bytes()).is_err() {
            break;
        }
    }
}
