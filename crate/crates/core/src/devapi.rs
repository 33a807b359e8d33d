//! Application-initiated encryption.
//!
//! One JSON object per line in each direction:
//!
//! ```text
//! > {"action":"encrypt","recipient":"bob","mode":"v1"}
//! < {"status":"ok"}
//! > {"action":"encrypt","recipient":"mallory"}
//! < {"status":"error","code":"contact_not_found","message":"unknown contact \"mallory\""}
//! ```
//!
//! The only action starts encryption mode; nothing on this channel can make
//! the daemon type plaintext anywhere.

use serde::{Deserialize, Serialize};

use crate::gui::ComposeMode;
use crate::interceptor::Interceptor;

pub const DEFAULT_PORT: u16 = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevAction {
    Encrypt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevRequest {
    pub action: DevAction,
    pub recipient: String,
    #[serde(default)]
    pub mode: ComposeMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum DevResponse {
    Ok,
    Error {
        code: String,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        message: String,
    },
}

impl DevResponse {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        DevResponse::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("responses always serialise")
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, DevResponse::Ok)
    }
}

pub fn parse_request(line: &str) -> Result<DevRequest, DevResponse> {
    serde_json::from_str(line.trim()).map_err(|e| DevResponse::error("bad_request", e.to_string()))
}

/// Apply one request line to the interceptor.
pub fn handle_request(ic: &mut Interceptor, at_us: u64, line: &str) -> DevResponse {
    let req = match parse_request(line) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    match req.action {
        DevAction::Encrypt => match ic.request_encryption(at_us, &req.recipient, req.mode) {
            Ok(()) => DevResponse::Ok,
            Err(e) => DevResponse::error(e.code(), e.to_string()),
        },
    }
}
