use textguard_core::directory::DirectoryError;
use textguard_core::interceptor::InterceptorError;
use textguard_core::keystore::StoreError;
use textguard_core::sim::SpecError;
use textguard_net::NetError;
use thiserror::Error;

/// Exit codes are part of the interface; scripts depend on them.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const STORE: u8 = 3;
    pub const CRYPTO: u8 = 4;
    pub const NETWORK: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store {0} is in use by a running daemon")]
    DaemonRunning(String),
    #[error("{0}")]
    Crypto(String),
    #[error(transparent)]
    Directory(#[from] DirectoryError),
    #[error(transparent)]
    Interceptor(#[from] InterceptorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Scenario(#[from] SpecError),
    /// The command ran but its result is a failure (e.g. a failed verdict).
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use InterceptorError as I;
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Scenario(_) => exit::USAGE,
            CliError::Store(_) | CliError::DaemonRunning(_) => exit::STORE,
            CliError::Crypto(_) => exit::CRYPTO,
            CliError::Directory(DirectoryError::Rejected(_)) => exit::CRYPTO,
            CliError::Directory(_) | CliError::Net(_) => exit::NETWORK,
            CliError::Interceptor(e) => match e {
                I::Store(_) | I::ContactNotFound(_) => exit::STORE,
                I::Ratchet(_) | I::IdentityChanged(_) | I::NothingToDecrypt => exit::CRYPTO,
                I::DirectoryUnavailable(_) => exit::NETWORK,
                _ => exit::FAILED,
            },
            CliError::Failed(_) | CliError::Io(_) => exit::FAILED,
        }
    }

    /// Stable machine-readable code for `--json` error output.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Store(StoreError::ContactNotFound(_)) => "contact_not_found",
            CliError::Store(_) => "store",
            CliError::DaemonRunning(_) => "daemon_running",
            CliError::Crypto(_) => "crypto",
            CliError::Directory(DirectoryError::NotFound(_)) => "not_found",
            CliError::Directory(DirectoryError::Rejected(_)) => "rejected",
            CliError::Directory(DirectoryError::Unavailable(_)) | CliError::Net(_) => "network",
            CliError::Interceptor(e) => e.code(),
            CliError::Scenario(_) => "scenario",
            CliError::Failed(_) => "failed",
            CliError::Io(_) => "io",
        }
    }
}
