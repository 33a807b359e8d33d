//! Centralised prekey directory.
//!
//! [`Directory`] is the in-process service; the HTTP front end and client
//! live in the `textguard-net` crate and speak the JSON types defined here.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ratchet::{OneTimePrekeyPublic, PreKeyBundle};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DirectoryError {
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("no directory record for {0:?}")]
    NotFound(String),
    #[error("directory unavailable: {0}")]
    Unavailable(String),
}

/// Body of `POST /v1/keys/{user}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub bundle: PreKeyBundle,
    #[serde(default)]
    pub one_time_prekeys: Vec<OneTimePrekeyPublic>,
}

/// Response to a successful registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterOutcome {
    /// The user was already registered under a different identity key.
    pub identity_changed: bool,
    pub one_time_prekeys: usize,
}

pub trait KeyDirectory: Send + Sync {
    fn register(&self, user_id: &str, request: RegisterRequest) -> Result<RegisterOutcome, DirectoryError>;

    /// Fetch a bundle, consuming one one-time prekey when any remain.
    fn fetch_bundle(&self, user_id: &str) -> Result<PreKeyBundle, DirectoryError>;
}

impl<T: KeyDirectory + ?Sized> KeyDirectory for Arc<T> {
    fn register(&self, user_id: &str, request: RegisterRequest) -> Result<RegisterOutcome, DirectoryError> {
        (**self).register(user_id, request)
    }

    fn fetch_bundle(&self, user_id: &str) -> Result<PreKeyBundle, DirectoryError> {
        (**self).fetch_bundle(user_id)
    }
}

#[derive(Debug, Clone)]
pub struct DirectoryRecord {
    pub user_id: String,
    pub bundle: PreKeyBundle,
    pub one_time_prekeys: VecDeque<OneTimePrekeyPublic>,
}

#[derive(Debug, Default)]
pub struct Directory {
    records: RwLock<HashMap<String, Arc<Mutex<DirectoryRecord>>>>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn remaining_one_time_prekeys(&self, user_id: &str) -> Option<usize> {
        let records = self.records.read().expect("directory lock poisoned");
        records
            .get(user_id)
            .map(|r| r.lock().expect("record lock poisoned").one_time_prekeys.len())
    }
}

impl KeyDirectory for Directory {
    fn register(&self, user_id: &str, request: RegisterRequest) -> Result<RegisterOutcome, DirectoryError> {
        if user_id.is_empty() {
            return Err(DirectoryError::Rejected("empty user id".into()));
        }
        request
            .bundle
            .verify()
            .map_err(|e| DirectoryError::Rejected(e.to_string()))?;
        let mut bundle = request.bundle;
        bundle.one_time_prekey = None;
        let record = DirectoryRecord {
            user_id: user_id.to_string(),
            bundle,
            one_time_prekeys: request.one_time_prekeys.into(),
        };
        let outcome_count = record.one_time_prekeys.len();

        let mut records = self.records.write().expect("directory lock poisoned");
        let identity_changed = match records.get(user_id) {
            Some(existing) => {
                let mut existing = existing.lock().expect("record lock poisoned");
                let changed = existing.bundle.identity_pub != record.bundle.identity_pub;
                *existing = record;
                changed
            }
            None => {
                records.insert(user_id.to_string(), Arc::new(Mutex::new(record)));
                false
            }
        };
        Ok(RegisterOutcome {
            identity_changed,
            one_time_prekeys: outcome_count,
        })
    }

    fn fetch_bundle(&self, user_id: &str) -> Result<PreKeyBundle, DirectoryError> {
        let record = {
            let records = self.records.read().expect("directory lock poisoned");
            records
                .get(user_id)
                .cloned()
                .ok_or_else(|| DirectoryError::NotFound(user_id.to_string()))?
        };
        let mut record = record.lock().expect("record lock poisoned");
        let mut bundle = record.bundle.clone();
        bundle.one_time_prekey = record.one_time_prekeys.pop_front();
        Ok(bundle)
    }
}

/// A directory that is never reachable.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineDirectory;

impl KeyDirectory for OfflineDirectory {
    fn register(&self, _: &str, _: RegisterRequest) -> Result<RegisterOutcome, DirectoryError> {
        Err(DirectoryError::Unavailable("offline".into()))
    }

    fn fetch_bundle(&self, _: &str) -> Result<PreKeyBundle, DirectoryError> {
        Err(DirectoryError::Unavailable("offline".into()))
    }
}
