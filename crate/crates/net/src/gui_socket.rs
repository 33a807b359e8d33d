//! Loopback socket for the GUI process.
//!
//! The daemon writes a fresh token to an owner-only file at start. A GUI
//! connects, and every line it sends is a [`GuiFrame`] carrying that token.
//! Nothing is sent to a connection until its first frame authenticates;
//! the usual opening frame is `{"kind":"close","payload":{},"auth":".."}`,
//! which is a no-op while the daemon is idle. A frame with a bad token gets
//! one `error` frame back (with an empty `auth`) and the connection is
//! dropped. A newer authenticated connection replaces an older one.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use textguard_core::gui::{AuthToken, GuiChannel, GuiError, GuiFrame, GuiMessage};

use crate::NetError;

#[derive(Default)]
struct Link {
    writer: Option<TcpStream>,
    generation: u64,
}

/// Daemon-side [`GuiChannel`] writing to whichever GUI is connected.
#[derive(Clone)]
pub struct SocketGui {
    link: Arc<Mutex<Link>>,
    token: AuthToken,
}

impl SocketGui {
    fn link(&self) -> MutexGuard<'_, Link> {
        self.link.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl GuiChannel for SocketGui {
    fn is_connected(&self) -> bool {
        self.link().writer.is_some()
    }

    fn send(&mut self, message: GuiMessage) -> Result<(), GuiError> {
        let mut link = self.link();
        let Some(stream) = link.writer.as_mut() else {
            return Err(GuiError::Disconnected);
        };
        let mut line = GuiFrame::new(message, &self.token).to_line();
        line.push('\n');
        if stream.write_all(line.as_bytes()).and_then(|_| stream.flush()).is_err() {
            link.writer = None;
            return Err(GuiError::Disconnected);
        }
        Ok(())
    }
}

/// Write `token` to `path`, readable and writable by the owner only.
pub fn write_token_file(path: &Path, token: &AuthToken) -> Result<(), NetError> {
    let _ = std::fs::remove_file(path);
    let mut opts = OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts
        .open(path)
        .map_err(|source| NetError::TokenFile { path: path.to_path_buf(), source })?;
    f.write_all(token.as_str().as_bytes())
        .map_err(|source| NetError::TokenFile { path: path.to_path_buf(), source })?;
    Ok(())
}

pub fn read_token_file(path: &Path) -> Result<AuthToken, NetError> {
    let text = std::fs::read_to_string(path).map_err(|source| NetError::TokenFile { path: path.to_path_buf(), source })?;
    Ok(AuthToken::from_string(text))
}

pub struct GuiServer {
    addr: SocketAddr,
    token_path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

type FrameHandler = Arc<dyn Fn(GuiFrame) + Send + Sync>;

impl GuiServer {
    /// Bind, write the token file and start accepting. Authenticated
    /// frames go to `on_frame`; when the active GUI goes away a `close`
    /// frame is delivered in its place so the daemon fails closed.
    pub fn start(
        bind: SocketAddr,
        token_path: &Path,
        token: AuthToken,
        on_frame: impl Fn(GuiFrame) + Send + Sync + 'static,
    ) -> Result<(GuiServer, SocketGui), NetError> {
        let listener = TcpListener::bind(bind).map_err(|source| NetError::Bind { addr: bind, source })?;
        let addr = listener.local_addr()?;
        write_token_file(token_path, &token)?;
        let gui = SocketGui { link: Arc::new(Mutex::new(Link::default())), token: token.clone() };
        let stop = Arc::new(AtomicBool::new(false));
        let handler: FrameHandler = Arc::new(on_frame);
        let generations = Arc::new(AtomicU64::new(0));

        let accept = {
            let stop = stop.clone();
            let gui = gui.clone();
            std::thread::Builder::new().name("textguard-gui-accept".into()).spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let gui = gui.clone();
                    let handler = handler.clone();
                    let generation = generations.fetch_add(1, Ordering::SeqCst) + 1;
                    let _ = std::thread::Builder::new()
                        .name("textguard-gui-conn".into())
                        .spawn(move || serve_connection(stream, gui, handler, generation));
                }
            })?
        };
        Ok((
            GuiServer { addr, token_path: token_path.to_path_buf(), stop, accept: Some(accept) },
            gui,
        ))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn token_path(&self) -> &Path {
        &self.token_path
    }

    fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.token_path);
    }
}

impl Drop for GuiServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(stream: TcpStream, gui: SocketGui, handler: FrameHandler, generation: u64) {
    let Ok(mut reply) = stream.try_clone() else { return };
    let mut authenticated = false;
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let checked = GuiFrame::from_line(&line).and_then(|f| gui.token.check(&f).map(|_| f));
        let frame = match checked {
            Ok(f) => f,
            Err(e) if authenticated => {
                log::warn!("GUI sent an unusable frame: {e}");
                let _ = gui.clone().send(GuiMessage::Error { code: "bad_frame".into(), message: e.to_string() });
                continue;
            }
            Err(e) => {
                let code = if e == GuiError::BadAuth { "bad_auth" } else { "bad_frame" };
                let msg = GuiMessage::Error { code: code.into(), message: e.to_string() };
                let mut out = GuiFrame { message: msg, auth: String::new() }.to_line();
                out.push('\n');
                let _ = reply.write_all(out.as_bytes());
                return;
            }
        };
        if !authenticated {
            authenticated = true;
            let mut link = gui.link();
            link.writer = reply.try_clone().ok();
            link.generation = generation;
        }
        handler(frame);
    }
    if authenticated {
        let mut link = gui.link();
        if link.generation == generation {
            link.writer = None;
            drop(link);
            handler(GuiFrame::new(GuiMessage::Close {}, &gui.token));
        }
    }
}
