//! Network and process plumbing around `textguard-core`.

use std::net::SocketAddr;
use std::path::PathBuf;

use thiserror::Error;

pub mod backends;
pub mod daemon;
pub mod directory_http;
pub mod gui_socket;
#[cfg(feature = "linux")]
pub mod linux;

pub use daemon::{Backends, Daemon, DaemonEvent, DaemonHandle, DaemonOptions};
pub use directory_http::{DirectoryServer, HttpDirectory};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("token file {path}: {source}")]
    TokenFile { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("daemon is not running")]
    Stopped,
}
