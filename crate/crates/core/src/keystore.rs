//! Local persistent state: identity, prekeys, contacts, sessions and the
//! sealed plaintext cache.
//!
//! Directory layout (all files owner-only):
//!
//! ```text
//! store.json            index: format number, registration id, contacts
//! identity.key          32-byte identity seed
//! prekeys.bin           CBOR LocalPrekeys
//! cache.key             32-byte key sealing the plaintext cache
//! sessions/<id>.bin     CBOR SessionState, one per contact
//! cache/<hash>.bin      created_at (u64 BE) || nonce (12) || sealed plaintext
//! .lock                 advisory lock taken around writes
//! ```
//!
//! A keystore without a root keeps everything in memory; the simulator
//! uses that mode.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

use crate::ratchet::{
    self, HandshakeHeader, IdentityKeyPair, IdentityPublic, LocalPrekeys, OneTimePrekeyPublic,
    PreKeyBundle, RatchetError, SessionState,
};

pub const STORE_FORMAT: u32 = 1;
pub const MAX_CONTACT_ID_LEN: usize = 128;
const INITIAL_ONE_TIME_PREKEYS: u32 = 100;

const INDEX_FILE: &str = "store.json";
const IDENTITY_FILE: &str = "identity.key";
const PREKEYS_FILE: &str = "prekeys.bin";
const CACHE_KEY_FILE: &str = "cache.key";
const SESSIONS_DIR: &str = "sessions";
const CACHE_DIR: &str = "cache";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("store unavailable at {path}: {reason}")]
    Unavailable { path: PathBuf, reason: String },
    #[error("store already initialised at {0}")]
    AlreadyInitialized(PathBuf),
    #[error("store file {file} is corrupt: {reason}")]
    Corrupt { file: PathBuf, reason: String },
    #[error("unknown contact {0:?}")]
    ContactNotFound(String),
    #[error("no session with {0:?}")]
    SessionNotFound(String),
    #[error("identity key of {0:?} changed; refusing to overwrite the pinned key")]
    IdentityChanged(String),
    #[error("invalid contact id: {0}")]
    InvalidContactId(&'static str),
    #[error("cache entry failed to unseal")]
    CacheCorrupt,
    #[error(transparent)]
    Ratchet(#[from] RatchetError),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactRecord {
    pub contact_id: String,
    pub identity_pub: IdentityPublic,
    /// Trust-on-first-use: false until the user confirms the key out of band.
    pub verified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactUpdate {
    Added,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaintextCacheEntry {
    pub token_hash: [u8; 32],
    pub sealed_plaintext: Vec<u8>,
    pub created_at: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: u32,
    registration_id: u32,
    contacts: Vec<ContactRecord>,
}

pub fn validate_contact_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(StoreError::InvalidContactId("empty"));
    }
    if id.len() > MAX_CONTACT_ID_LEN {
        return Err(StoreError::InvalidContactId("longer than 128 bytes"));
    }
    if id.chars().any(char::is_control) {
        return Err(StoreError::InvalidContactId("contains control characters"));
    }
    Ok(())
}

pub struct Keystore {
    root: Option<PathBuf>,
    identity: IdentityKeyPair,
    registration_id: u32,
    prekeys: LocalPrekeys,
    cache_key: [u8; 32],
    contacts: BTreeMap<String, ContactRecord>,
    sessions: BTreeMap<String, SessionState>,
    memory_cache: BTreeMap<[u8; 32], PlaintextCacheEntry>,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for Keystore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Keystore")
            .field("root", &self.root)
            .field("identity", &self.identity.public())
            .field("contacts", &self.contacts.len())
            .finish_non_exhaustive()
    }
}

impl Drop for Keystore {
    fn drop(&mut self) {
        self.cache_key.zeroize();
    }
}

fn rng_from_seed(seed: Option<[u8; 32]>) -> ChaCha20Rng {
    match seed {
        Some(s) => {
            let mut h = Sha256::new();
            h.update(b"keystore rng");
            h.update(s);
            ChaCha20Rng::from_seed(h.finalize().into())
        }
        None => ChaCha20Rng::from_entropy(),
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn session_file_name(contact_id: &str) -> String {
    format!("{}.bin", hex::encode(&Sha256::digest(contact_id.as_bytes())[..16]))
}

impl Keystore {
    /// In-memory store with a fresh identity.
    pub fn ephemeral(seed: Option<[u8; 32]>) -> Self {
        let mut rng = rng_from_seed(seed);
        let identity = match seed {
            Some(s) => IdentityKeyPair::from_seed(s),
            None => IdentityKeyPair::random(&mut rng),
        };
        let prekeys = LocalPrekeys::generate(&identity, INITIAL_ONE_TIME_PREKEYS, &mut rng);
        let mut cache_key = [0u8; 32];
        rng.fill_bytes(&mut cache_key);
        Self {
            root: None,
            registration_id: rng.next_u32() & 0x3fff,
            identity,
            prekeys,
            cache_key,
            contacts: BTreeMap::new(),
            sessions: BTreeMap::new(),
            memory_cache: BTreeMap::new(),
            rng,
        }
    }

    /// Create a store directory with owner-only permissions and a new identity.
    pub fn init(path: &Path, seed: Option<[u8; 32]>) -> Result<Self> {
        if path.join(INDEX_FILE).exists() {
            return Err(StoreError::AlreadyInitialized(path.to_path_buf()));
        }
        let unavailable = |e: std::io::Error| StoreError::Unavailable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        create_private_dir(path).map_err(unavailable)?;
        create_private_dir(&path.join(SESSIONS_DIR)).map_err(unavailable)?;
        create_private_dir(&path.join(CACHE_DIR)).map_err(unavailable)?;

        let mut store = Self::ephemeral(seed);
        store.root = Some(path.to_path_buf());
        store.write_file(IDENTITY_FILE, &store.identity.seed())?;
        store.write_file(CACHE_KEY_FILE, &store.cache_key.clone())?;
        store.save_prekeys()?;
        store.save_index()?;
        Ok(store)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let index_path = path.join(INDEX_FILE);
        let index_raw = fs::read(&index_path).map_err(|e| StoreError::Unavailable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let index: Index = serde_json::from_slice(&index_raw).map_err(|e| corrupt(&index_path, e))?;
        if index.format != STORE_FORMAT {
            return Err(corrupt(&index_path, format!("unsupported format {}", index.format)));
        }
        let seed: [u8; 32] = read_array(&path.join(IDENTITY_FILE))?;
        let cache_key: [u8; 32] = read_array(&path.join(CACHE_KEY_FILE))?;
        let prekeys_path = path.join(PREKEYS_FILE);
        let prekeys: LocalPrekeys = read_cbor(&prekeys_path)?;

        let mut contacts = BTreeMap::new();
        let mut sessions = BTreeMap::new();
        for c in index.contacts {
            let file = path.join(SESSIONS_DIR).join(session_file_name(&c.contact_id));
            if file.exists() {
                sessions.insert(c.contact_id.clone(), read_cbor(&file)?);
            }
            contacts.insert(c.contact_id.clone(), c);
        }
        Ok(Self {
            root: Some(path.to_path_buf()),
            identity: IdentityKeyPair::from_seed(seed),
            registration_id: index.registration_id,
            prekeys,
            cache_key,
            contacts,
            sessions,
            memory_cache: BTreeMap::new(),
            rng: ChaCha20Rng::from_entropy(),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn identity(&self) -> &IdentityKeyPair {
        &self.identity
    }

    pub fn registration_id(&self) -> u32 {
        self.registration_id
    }

    /// Bundle to publish plus every unconsumed one-time prekey.
    pub fn publishable_bundle(&self) -> (PreKeyBundle, Vec<OneTimePrekeyPublic>) {
        (
            self.prekeys.bundle(&self.identity, self.registration_id),
            self.prekeys.one_time_publics(),
        )
    }

    pub fn replenish_prekeys(&mut self, count: u32) -> Result<Vec<OneTimePrekeyPublic>> {
        let minted = self.prekeys.add_one_time(count, &mut self.rng);
        self.save_prekeys()?;
        Ok(minted)
    }

    pub fn one_time_prekeys_held(&self) -> usize {
        self.prekeys.one_time_count()
    }

    /// Complete a session from a sender's handshake and persist the
    /// consumed prekey.
    pub fn accept_handshake(&mut self, header: &HandshakeHeader) -> Result<SessionState> {
        self.accept_handshake_with(header, |_| Ok::<_, StoreError>(()))
            .map(|(session, ())| session)
    }

    /// Like [`Keystore::accept_handshake`], but the one-time prekey is only
    /// consumed when `open` succeeds on the new session. A forged handshake
    /// therefore cannot burn prekeys.
    pub fn accept_handshake_with<T, E>(
        &mut self,
        header: &HandshakeHeader,
        open: impl FnOnce(&mut SessionState) -> std::result::Result<T, E>,
    ) -> std::result::Result<(SessionState, T), E>
    where
        E: From<StoreError>,
    {
        let mut prekeys = self.prekeys.clone();
        let mut session = ratchet::session_init_receiver(&self.identity, &mut prekeys, header)
            .map_err(StoreError::from)?;
        let value = open(&mut session)?;
        self.prekeys = prekeys;
        self.save_prekeys()?;
        Ok((session, value))
    }

    // Contacts

    pub fn contacts(&self) -> impl Iterator<Item = &ContactRecord> {
        self.contacts.values()
    }

    pub fn contact(&self, id: &str) -> Option<&ContactRecord> {
        self.contacts.get(id)
    }

    pub fn contact_by_identity(&self, identity: &IdentityPublic) -> Option<&ContactRecord> {
        self.contacts.values().find(|c| &c.identity_pub == identity)
    }

    /// Pin `identity` for `id`. A different key for a known contact is an
    /// error, never a silent overwrite.
    pub fn add_contact(&mut self, id: &str, identity: IdentityPublic) -> Result<ContactUpdate> {
        validate_contact_id(id)?;
        match self.contacts.get(id) {
            Some(c) if c.identity_pub == identity => Ok(ContactUpdate::Unchanged),
            Some(_) => Err(StoreError::IdentityChanged(id.to_string())),
            None => {
                self.contacts.insert(
                    id.to_string(),
                    ContactRecord {
                        contact_id: id.to_string(),
                        identity_pub: identity,
                        verified: false,
                    },
                );
                self.save_index()?;
                Ok(ContactUpdate::Added)
            }
        }
    }

    pub fn verify_contact(&mut self, id: &str) -> Result<()> {
        let c = self
            .contacts
            .get_mut(id)
            .ok_or_else(|| StoreError::ContactNotFound(id.to_string()))?;
        c.verified = true;
        self.save_index()
    }

    // Sessions

    pub fn session_save(&mut self, contact_id: &str, session: &SessionState) -> Result<()> {
        if !self.contacts.contains_key(contact_id) {
            return Err(StoreError::ContactNotFound(contact_id.to_string()));
        }
        if self.root.is_some() {
            let mut blob = Vec::new();
            ciborium::into_writer(session, &mut blob).expect("in-memory CBOR encoding");
            let name = format!("{SESSIONS_DIR}/{}", session_file_name(contact_id));
            self.write_file(&name, &blob)?;
        }
        self.sessions.insert(contact_id.to_string(), session.clone());
        Ok(())
    }

    pub fn session_load(&self, contact_id: &str) -> Result<SessionState> {
        self.sessions
            .get(contact_id)
            .cloned()
            .ok_or_else(|| StoreError::SessionNotFound(contact_id.to_string()))
    }

    pub fn has_session(&self, contact_id: &str) -> bool {
        self.sessions.contains_key(contact_id)
    }

    // Plaintext cache

    pub fn cache_put(&mut self, token_hash: [u8; 32], plaintext: &[u8]) -> Result<()> {
        let created_at = now_secs();
        let mut nonce = [0u8; 12];
        self.rng.fill_bytes(&mut nonce);
        let aad = cache_aad(&token_hash, created_at);
        let sealed = ChaCha20Poly1305::new(&self.cache_key.into())
            .encrypt(&nonce.into(), Payload { msg: plaintext, aad: &aad })
            .expect("ChaCha20-Poly1305 sealing is infallible for in-memory buffers");
        let mut sealed_plaintext = nonce.to_vec();
        sealed_plaintext.extend_from_slice(&sealed);
        let entry = PlaintextCacheEntry {
            token_hash,
            sealed_plaintext,
            created_at,
        };
        if self.root.is_some() {
            let mut file = created_at.to_be_bytes().to_vec();
            file.extend_from_slice(&entry.sealed_plaintext);
            self.write_file(&format!("{CACHE_DIR}/{}.bin", hex::encode(token_hash)), &file)?;
        } else {
            self.memory_cache.insert(token_hash, entry);
        }
        Ok(())
    }

    pub fn cache_get(&self, token_hash: &[u8; 32]) -> Result<Option<Vec<u8>>> {
        let entry = match &self.root {
            Some(root) => {
                let path = root.join(CACHE_DIR).join(format!("{}.bin", hex::encode(token_hash)));
                let raw = match fs::read(&path) {
                    Ok(raw) => raw,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
                    Err(e) => {
                        return Err(StoreError::Unavailable { path, reason: e.to_string() })
                    }
                };
                if raw.len() < 8 + 12 {
                    return Err(StoreError::CacheCorrupt);
                }
                PlaintextCacheEntry {
                    token_hash: *token_hash,
                    created_at: u64::from_be_bytes(raw[..8].try_into().expect("8 bytes")),
                    sealed_plaintext: raw[8..].to_vec(),
                }
            }
            None => match self.memory_cache.get(token_hash) {
                Some(e) => e.clone(),
                None => return Ok(None),
            },
        };
        let (nonce, sealed) = entry.sealed_plaintext.split_at(12);
        let aad = cache_aad(&entry.token_hash, entry.created_at);
        ChaCha20Poly1305::new(&self.cache_key.into())
            .decrypt(nonce.into(), Payload { msg: sealed, aad: &aad })
            .map(Some)
            .map_err(|_| StoreError::CacheCorrupt)
    }

    // Persistence helpers

    fn save_index(&self) -> Result<()> {
        if self.root.is_none() {
            return Ok(());
        }
        let index = Index {
            format: STORE_FORMAT,
            registration_id: self.registration_id,
            contacts: self.contacts.values().cloned().collect(),
        };
        let json = serde_json::to_vec_pretty(&index).expect("index serialises");
        self.write_file(INDEX_FILE, &json)
    }

    fn save_prekeys(&self) -> Result<()> {
        if self.root.is_none() {
            return Ok(());
        }
        let mut blob = Vec::new();
        ciborium::into_writer(&self.prekeys, &mut blob).expect("in-memory CBOR encoding");
        self.write_file(PREKEYS_FILE, &blob)
    }

    /// Atomic owner-only write under the advisory store lock.
    fn write_file(&self, relative: &str, bytes: &[u8]) -> Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let unavailable = |e: std::io::Error| StoreError::Unavailable {
            path: root.join(relative),
            reason: e.to_string(),
        };
        let lock = private_options()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(root.join(LOCK_FILE))
            .map_err(unavailable)?;
        lock.lock().map_err(unavailable)?;
        let target = root.join(relative);
        let tmp = target.with_extension("tmp");
        let result = (|| {
            let mut f = private_options()
                .write(true)
                .create(true)
                .truncate(true)
                .open(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        })();
        let _ = lock.unlock();
        result.map_err(unavailable)
    }
}

fn cache_aad(token_hash: &[u8; 32], created_at: u64) -> Vec<u8> {
    let mut aad = token_hash.to_vec();
    aad.extend_from_slice(&created_at.to_be_bytes());
    aad
}

fn corrupt(file: &Path, reason: impl ToString) -> StoreError {
    StoreError::Corrupt {
        file: file.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_array<const N: usize>(path: &Path) -> Result<[u8; N]> {
    let raw = fs::read(path).map_err(|e| corrupt(path, e))?;
    raw.as_slice()
        .try_into()
        .map_err(|_| corrupt(path, format!("expected {N} bytes, found {}", raw.len())))
}

fn read_cbor<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(|e| corrupt(path, e))?;
    ciborium::from_reader(raw.as_slice()).map_err(|e| corrupt(path, e))
}

#[cfg(unix)]
fn private_options() -> OpenOptions {
    use std::os::unix::fs::OpenOptionsExt;
    let mut o = OpenOptions::new();
    o.mode(0o600);
    o
}

#[cfg(not(unix))]
fn private_options() -> OpenOptions {
    OpenOptions::new()
}

fn create_private_dir(path: &Path) -> std::io::Result<()> {
    let mut builder = fs::DirBuilder::new();
    builder.recursive(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::DirBuilderExt;
        builder.mode(0o700);
    }
    builder.create(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o700))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message;
    use crate::ratchet::session_init_sender;
    use rand_chacha::ChaCha20Rng;

    fn temp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn init_then_open_keeps_identity() {
        let dir = temp();
        let path = dir.path().join("store");
        let a = Keystore::init(&path, Some([3; 32])).unwrap();
        let b = Keystore::open(&path).unwrap();
        assert_eq!(a.identity().public(), b.identity().public());
        assert_eq!(a.registration_id(), b.registration_id());
        assert!(matches!(
            Keystore::init(&path, None),
            Err(StoreError::AlreadyInitialized(_))
        ));
    }

    #[cfg(unix)]
    #[test]
    fn directory_is_owner_only() {
        use std::os::unix::fs::PermissionsExt;
        let dir = temp();
        let path = dir.path().join("store");
        Keystore::init(&path, None).unwrap();
        let mode = fs::metadata(&path).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode, 0o700);
        let mode = fs::metadata(path.join(IDENTITY_FILE)).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode, 0o600);
    }

    #[test]
    fn open_missing_store_is_unavailable() {
        let dir = temp();
        assert!(matches!(
            Keystore::open(&dir.path().join("nope")),
            Err(StoreError::Unavailable { .. })
        ));
    }

    fn store_with_session(path: &Path) -> (Keystore, Keystore) {
        let mut alice = Keystore::init(path, Some([1; 32])).unwrap();
        let mut bob = Keystore::ephemeral(Some([2; 32]));
        let (mut bundle, otks) = bob.publishable_bundle();
        bundle.one_time_prekey = otks.first().copied();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (session, _) = session_init_sender(alice.identity(), &bundle, &mut rng).unwrap();
        alice.add_contact("bob", bundle.identity_pub).unwrap();
        alice.session_save("bob", &session).unwrap();
        bob.add_contact("alice", alice.identity().public()).unwrap();
        (alice, bob)
    }

    use rand::SeedableRng;

    #[test]
    fn truncated_session_file_names_the_file() {
        let dir = temp();
        let path = dir.path().join("store");
        store_with_session(&path);
        let file = path.join(SESSIONS_DIR).join(session_file_name("bob"));
        let raw = fs::read(&file).unwrap();
        fs::write(&file, &raw[..raw.len() / 2]).unwrap();
        match Keystore::open(&path) {
            Err(StoreError::Corrupt { file: f, .. }) => assert_eq!(f, file),
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[test]
    fn session_continues_after_reload() {
        let dir = temp();
        let path = dir.path().join("store");
        let (mut alice, mut bob) = store_with_session(&path);
        let mut rng = ChaCha20Rng::seed_from_u64(6);

        let mut s = alice.session_load("bob").unwrap();
        let t0 = message::encrypt_message(&mut s, b"one", &mut rng).unwrap();
        alice.session_save("bob", &s).unwrap();
        drop(alice);

        let d0 = t0.decode().unwrap();
        let mut bs = bob.accept_handshake(&d0.header.handshake.unwrap()).unwrap();
        assert_eq!(message::open_decoded(&mut bs, &d0).unwrap(), b"one");
        bob.session_save("alice", &bs).unwrap();

        let alice = Keystore::open(&path).unwrap();
        let mut s = alice.session_load("bob").unwrap();
        let t1 = message::encrypt_message(&mut s, b"two", &mut rng).unwrap();
        assert_eq!(message::open_token(&mut bs, &t1).unwrap(), b"two");
    }

    #[test]
    fn serialization_round_trip_preserves_behaviour() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let bob = Keystore::ephemeral(Some([9; 32]));
        let (bundle, _) = bob.publishable_bundle();
        let alice = IdentityKeyPair::from_seed([8; 32]);
        for i in 0..100u64 {
            let (mut s, _) = session_init_sender(&alice, &bundle, &mut rng).unwrap();
            for _ in 0..(i % 7) {
                s.next_sending_keys(&mut rng).unwrap();
            }
            let mut blob = Vec::new();
            ciborium::into_writer(&s, &mut blob).unwrap();
            let mut back: SessionState = ciborium::from_reader(blob.as_slice()).unwrap();
            let mut r1 = ChaCha20Rng::seed_from_u64(i);
            let mut r2 = ChaCha20Rng::seed_from_u64(i);
            let (k1, h1) = s.next_sending_keys(&mut r1).unwrap();
            let (k2, h2) = back.next_sending_keys(&mut r2).unwrap();
            assert_eq!((k1, h1), (k2, h2));
            assert_eq!(s.root_key(), back.root_key());
        }
    }

    #[test]
    fn unknown_session() {
        let store = Keystore::ephemeral(None);
        assert!(matches!(
            store.session_load("carol"),
            Err(StoreError::SessionNotFound(_))
        ));
    }

    #[test]
    fn tofu_refuses_changed_identity() {
        let mut store = Keystore::ephemeral(None);
        let k1 = IdentityKeyPair::from_seed([1; 32]).public();
        let k2 = IdentityKeyPair::from_seed([2; 32]).public();
        assert_eq!(store.add_contact("bob", k1).unwrap(), ContactUpdate::Added);
        assert_eq!(store.add_contact("bob", k1).unwrap(), ContactUpdate::Unchanged);
        assert!(matches!(
            store.add_contact("bob", k2),
            Err(StoreError::IdentityChanged(_))
        ));
        assert_eq!(store.contact("bob").unwrap().identity_pub, k1);
    }

    #[test]
    fn contact_id_rules() {
        let mut store = Keystore::ephemeral(None);
        let k = IdentityKeyPair::from_seed([1; 32]).public();
        assert!(store.add_contact(&"x".repeat(129), k).is_err());
        assert!(store.add_contact("bad\nid", k).is_err());
        assert!(store.add_contact(&"é".repeat(64), k).is_ok());
    }

    #[test]
    fn cache_round_trip_in_memory_and_on_disk() {
        let dir = temp();
        for mut store in [
            Keystore::ephemeral(None),
            Keystore::init(&dir.path().join("s"), None).unwrap(),
        ] {
            store.cache_put([1; 32], b"secret words").unwrap();
            assert_eq!(store.cache_get(&[1; 32]).unwrap().unwrap(), b"secret words");
            assert_eq!(store.cache_get(&[2; 32]).unwrap(), None);
        }
    }

    #[test]
    fn tampered_cache_file_is_detected() {
        let dir = temp();
        let path = dir.path().join("s");
        let mut store = Keystore::init(&path, None).unwrap();
        store.cache_put([4; 32], b"do not alter").unwrap();
        let file = path.join(CACHE_DIR).join(format!("{}.bin", hex::encode([4u8; 32])));
        let mut raw = fs::read(&file).unwrap();
        let last = raw.len() - 1;
        raw[last] ^= 0x01;
        fs::write(&file, raw).unwrap();
        assert!(matches!(store.cache_get(&[4; 32]), Err(StoreError::CacheCorrupt)));
    }

    #[test]
    fn no_plaintext_at_rest() {
        let dir = temp();
        let path = dir.path().join("s");
        let mut store = Keystore::init(&path, None).unwrap();
        let marker = b"Zq8LmN3vT0pXr5WcY2bK7dHs9fJ4gA1e";
        store.cache_put([5; 32], marker).unwrap();
        for entry in walk(&path) {
            let raw = fs::read(&entry).unwrap();
            assert!(
                !raw.windows(marker.len()).any(|w| w == marker),
                "{entry:?} holds plaintext"
            );
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
