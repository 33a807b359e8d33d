//! Double Ratchet sessions with a simplified X3DH handshake.
//!
//! Primitives follow the published Double Ratchet algorithm:
//!
//! * X25519 for every Diffie-Hellman step. Identity keys are Ed25519 keys
//!   (so they can sign prekeys) and are mapped to X25519 for the handshake.
//! * HKDF-SHA256 for the handshake secret, the root chain and message-key
//!   expansion.
//! * HMAC-SHA256 chain stepping: constant `0x01` yields the message key,
//!   `0x02` the next chain key.
//!
//! The sender's handshake ephemeral key is also its first ratchet key, and
//! both sides run the first root-KDF step during session setup, so the two
//! root keys agree as soon as the handshake completes. A receiver creates its
//! sending chain lazily, on the first message it sends.
//!
//! Message keys are erased on use: a receiving chain only moves forward and
//! skipped keys are removed when consumed. Callers that need to verify a MAC
//! before committing should derive keys on a clone of the session and replace
//! the original only after verification succeeds (see [`SessionState::receive`]).

use std::collections::{BTreeMap, VecDeque};

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

/// Version byte carried by every message header: current version 3 in the
/// high nibble, message version 3 in the low nibble.
pub const MESSAGE_VERSION: u8 = 0x33;

/// Maximum number of skipped message keys a session will hold.
pub const MAX_SKIPPED_KEYS: usize = 1024;

const RETIRED_REMOTE_KEYS: usize = 32;

const INFO_HANDSHAKE: &[u8] = b"TextGuard X3DH";
const INFO_ROOT: &[u8] = b"TextGuard Ratchet";
const INFO_MESSAGE: &[u8] = b"TextGuard MessageKeys";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RatchetError {
    #[error("seed must be 32 bytes, got {0}")]
    InvalidSeed(usize),
    #[error("prekey bundle rejected: {0}")]
    BundleRejected(&'static str),
    #[error("prekey {0} is not held locally")]
    PrekeyMissing(u32),
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("message key for counter {0} was already erased")]
    KeyErased(u32),
    #[error("header would skip {0} message keys, more than the session allows")]
    TooManySkipped(u64),
}

pub type Result<T> = std::result::Result<T, RatchetError>;

/// Long-term identity key pair.
#[derive(Clone)]
pub struct IdentityKeyPair {
    signing: SigningKey,
}

impl IdentityKeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            signing: SigningKey::generate(rng),
        }
    }

    /// Secret seed; this is what a keystore persists.
    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> IdentityPublic {
        IdentityPublic(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }

    fn dh(&self, their_public: &[u8; 32]) -> Result<[u8; 32]> {
        let mut scalar = self.signing.to_scalar_bytes();
        let shared = x25519_dalek::x25519(scalar, *their_public);
        scalar.zeroize();
        contributory(shared)
    }
}

impl std::fmt::Debug for IdentityKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityKeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

/// Generate an identity key pair, deterministically when a seed is supplied.
pub fn generate_identity(seed: Option<&[u8]>) -> Result<IdentityKeyPair> {
    match seed {
        Some(bytes) => {
            let seed: [u8; 32] = bytes
                .try_into()
                .map_err(|_| RatchetError::InvalidSeed(bytes.len()))?;
            Ok(IdentityKeyPair::from_seed(seed))
        }
        None => Ok(IdentityKeyPair::random(&mut rand::rngs::OsRng)),
    }
}

/// Public half of an identity key (an Ed25519 point, 32 bytes).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityPublic(#[serde(with = "crate::b64")] pub [u8; 32]);

impl IdentityPublic {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn verify(&self, message: &[u8], signature: &[u8; 64]) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        key.verify_strict(message, &ed25519_dalek::Signature::from_bytes(signature))
            .is_ok()
    }

    fn to_x25519(self) -> Result<[u8; 32]> {
        let key = VerifyingKey::from_bytes(&self.0).map_err(|_| RatchetError::InvalidPublicKey)?;
        Ok(key.to_montgomery().to_bytes())
    }
}

impl std::fmt::Debug for IdentityPublic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "IdentityPublic({})", hex::encode(&self.0[..8]))
    }
}

/// An X25519 key pair used for prekeys, ephemerals and ratchet steps.
#[derive(Clone, Serialize, Deserialize, Zeroize, ZeroizeOnDrop)]
pub struct DhKeyPair {
    secret: [u8; 32],
    public: [u8; 32],
}

impl DhKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = x25519_dalek::StaticSecret::random_from_rng(rng);
        Self::from_secret(secret.to_bytes())
    }

    pub fn from_secret(secret: [u8; 32]) -> Self {
        let public = x25519_dalek::x25519(secret, x25519_dalek::X25519_BASEPOINT_BYTES);
        Self { secret, public }
    }

    pub fn public(&self) -> [u8; 32] {
        self.public
    }

    fn dh(&self, their_public: &[u8; 32]) -> Result<[u8; 32]> {
        contributory(x25519_dalek::x25519(self.secret, *their_public))
    }
}

impl std::fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DhKeyPair({})", hex::encode(&self.public[..8]))
    }
}

fn contributory(shared: [u8; 32]) -> Result<[u8; 32]> {
    if shared == [0u8; 32] {
        Err(RatchetError::InvalidPublicKey)
    } else {
        Ok(shared)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneTimePrekeyPublic {
    pub id: u32,
    #[serde(with = "crate::b64")]
    pub public: [u8; 32],
}

/// A user's published key bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreKeyBundle {
    pub registration_id: u32,
    pub identity_pub: IdentityPublic,
    pub signed_prekey_id: u32,
    #[serde(with = "crate::b64")]
    pub signed_prekey_pub: [u8; 32],
    #[serde(with = "crate::b64")]
    pub prekey_signature: [u8; 64],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_time_prekey: Option<OneTimePrekeyPublic>,
}

impl PreKeyBundle {
    pub fn verify(&self) -> Result<()> {
        if self
            .identity_pub
            .verify(&self.signed_prekey_pub, &self.prekey_signature)
        {
            Ok(())
        } else {
            Err(RatchetError::BundleRejected("signed prekey signature does not verify"))
        }
    }
}

/// The private side of a user's prekeys, held in the local keystore.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalPrekeys {
    pub signed_prekey_id: u32,
    signed_prekey: DhKeyPair,
    #[serde(with = "crate::b64")]
    signature: [u8; 64],
    one_time: BTreeMap<u32, DhKeyPair>,
    next_one_time_id: u32,
}

impl LocalPrekeys {
    pub fn generate<R: RngCore + CryptoRng>(
        identity: &IdentityKeyPair,
        one_time_count: u32,
        rng: &mut R,
    ) -> Self {
        let signed_prekey = DhKeyPair::generate(rng);
        let signature = identity.sign(&signed_prekey.public());
        let mut prekeys = Self {
            signed_prekey_id: 1,
            signed_prekey,
            signature,
            one_time: BTreeMap::new(),
            next_one_time_id: 1,
        };
        prekeys.add_one_time(one_time_count, rng);
        prekeys
    }

    /// Mint `count` fresh one-time prekeys and return their public halves.
    pub fn add_one_time<R: RngCore + CryptoRng>(
        &mut self,
        count: u32,
        rng: &mut R,
    ) -> Vec<OneTimePrekeyPublic> {
        (0..count)
            .map(|_| {
                let id = self.next_one_time_id;
                self.next_one_time_id += 1;
                let pair = DhKeyPair::generate(rng);
                let public = pair.public();
                self.one_time.insert(id, pair);
                OneTimePrekeyPublic { id, public }
            })
            .collect()
    }

    pub fn one_time_publics(&self) -> Vec<OneTimePrekeyPublic> {
        self.one_time
            .iter()
            .map(|(&id, pair)| OneTimePrekeyPublic {
                id,
                public: pair.public(),
            })
            .collect()
    }

    pub fn one_time_count(&self) -> usize {
        self.one_time.len()
    }

    pub fn holds_one_time(&self, id: u32) -> bool {
        self.one_time.contains_key(&id)
    }

    /// Bundle without a one-time prekey; a directory attaches one per fetch.
    pub fn bundle(&self, identity: &IdentityKeyPair, registration_id: u32) -> PreKeyBundle {
        PreKeyBundle {
            registration_id,
            identity_pub: identity.public(),
            signed_prekey_id: self.signed_prekey_id,
            signed_prekey_pub: self.signed_prekey.public(),
            prekey_signature: self.signature,
            one_time_prekey: None,
        }
    }
}

/// Handshake data the receiver needs to complete session setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeHeader {
    pub identity_pub: IdentityPublic,
    #[serde(with = "crate::b64")]
    pub ephemeral_pub: [u8; 32],
    pub signed_prekey_id: u32,
    pub one_time_prekey_id: Option<u32>,
}

/// Per-message header fields produced by the sending chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RatchetHeader {
    #[serde(with = "crate::b64")]
    pub ratchet_pub: [u8; 32],
    pub counter: u32,
    pub previous_counter: u32,
}

/// Keys for exactly one message.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize, Zeroize, ZeroizeOnDrop)]
pub struct MessageKeys {
    pub cipher_key: [u8; 16],
    pub mac_key: [u8; 32],
    pub iv: [u8; 16],
    pub counter: u32,
}

impl MessageKeys {
    fn derive(message_key: &[u8; 32], counter: u32) -> Self {
        let mut okm = [0u8; 64];
        Hkdf::<Sha256>::new(Some(&[0u8; 32]), message_key)
            .expand(INFO_MESSAGE, &mut okm)
            .expect("64 bytes is a valid HKDF-SHA256 output length");
        let mut keys = Self {
            cipher_key: [0; 16],
            mac_key: [0; 32],
            iv: [0; 16],
            counter,
        };
        keys.cipher_key.copy_from_slice(&okm[..16]);
        keys.mac_key.copy_from_slice(&okm[16..48]);
        keys.iv.copy_from_slice(&okm[48..]);
        okm.zeroize();
        keys
    }
}

impl std::fmt::Debug for MessageKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MessageKeys")
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Serialize, Deserialize, Zeroize, ZeroizeOnDrop)]
struct SkippedKey {
    ratchet_pub: [u8; 32],
    counter: u32,
    keys: MessageKeys,
}

/// Per-contact Double Ratchet state.
#[derive(Clone, Serialize, Deserialize)]
pub struct SessionState {
    remote_identity: IdentityPublic,
    root_key: [u8; 32],
    send_chain_key: Option<[u8; 32]>,
    recv_chain_key: Option<[u8; 32]>,
    ratchet_keypair: DhKeyPair,
    remote_ratchet_pub: [u8; 32],
    send_counter: u32,
    recv_counter: u32,
    previous_counter: u32,
    skipped: Vec<SkippedKey>,
    retired_remote: VecDeque<[u8; 32]>,
    pending_handshake: Option<HandshakeHeader>,
}

impl Drop for SessionState {
    fn drop(&mut self) {
        self.root_key.zeroize();
        self.send_chain_key.zeroize();
        self.recv_chain_key.zeroize();
    }
}

impl std::fmt::Debug for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionState")
            .field("remote_identity", &self.remote_identity)
            .field("send_counter", &self.send_counter)
            .field("recv_counter", &self.recv_counter)
            .field("previous_counter", &self.previous_counter)
            .field("skipped", &self.skipped.len())
            .finish_non_exhaustive()
    }
}

fn kdf_root(root_key: &[u8; 32], dh_out: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let mut okm = [0u8; 64];
    Hkdf::<Sha256>::new(Some(root_key), dh_out)
        .expand(INFO_ROOT, &mut okm)
        .expect("64 bytes is a valid HKDF-SHA256 output length");
    let mut root = [0u8; 32];
    let mut chain = [0u8; 32];
    root.copy_from_slice(&okm[..32]);
    chain.copy_from_slice(&okm[32..]);
    okm.zeroize();
    (root, chain)
}

fn chain_step(chain_key: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let step = |constant: u8| -> [u8; 32] {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(chain_key)
            .expect("HMAC accepts any key length");
        mac.update(&[constant]);
        mac.finalize().into_bytes().into()
    };
    (step(0x01), step(0x02))
}

fn handshake_secret(dh_outputs: &[[u8; 32]]) -> [u8; 32] {
    let mut ikm = vec![0xFFu8; 32];
    for dh in dh_outputs {
        ikm.extend_from_slice(dh);
    }
    let mut secret = [0u8; 32];
    Hkdf::<Sha256>::new(Some(&[0u8; 32]), &ikm)
        .expand(INFO_HANDSHAKE, &mut secret)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    ikm.zeroize();
    secret
}

/// Start a session towards the owner of `remote`.
pub fn session_init_sender<R: RngCore + CryptoRng>(
    local: &IdentityKeyPair,
    remote: &PreKeyBundle,
    rng: &mut R,
) -> Result<(SessionState, HandshakeHeader)> {
    remote.verify()?;
    let ephemeral = DhKeyPair::generate(rng);

    let mut dhs = vec![
        local.dh(&remote.signed_prekey_pub)?,
        ephemeral.dh(&remote.identity_pub.to_x25519()?)?,
        ephemeral.dh(&remote.signed_prekey_pub)?,
    ];
    if let Some(otk) = &remote.one_time_prekey {
        dhs.push(ephemeral.dh(&otk.public)?);
    }
    let mut secret = handshake_secret(&dhs);
    dhs.zeroize();

    let (root_key, chain_key) = kdf_root(&secret, &ephemeral.dh(&remote.signed_prekey_pub)?);
    secret.zeroize();

    let header = HandshakeHeader {
        identity_pub: local.public(),
        ephemeral_pub: ephemeral.public(),
        signed_prekey_id: remote.signed_prekey_id,
        one_time_prekey_id: remote.one_time_prekey.map(|k| k.id),
    };
    let session = SessionState {
        remote_identity: remote.identity_pub,
        root_key,
        send_chain_key: Some(chain_key),
        recv_chain_key: None,
        remote_ratchet_pub: remote.signed_prekey_pub,
        ratchet_keypair: ephemeral,
        send_counter: 0,
        recv_counter: 0,
        previous_counter: 0,
        skipped: Vec::new(),
        retired_remote: VecDeque::new(),
        pending_handshake: Some(header),
    };
    Ok((session, header))
}

/// Complete a session from a sender's handshake; consumes the referenced
/// one-time prekey on success.
pub fn session_init_receiver(
    local: &IdentityKeyPair,
    prekeys: &mut LocalPrekeys,
    header: &HandshakeHeader,
) -> Result<SessionState> {
    if header.signed_prekey_id != prekeys.signed_prekey_id {
        return Err(RatchetError::PrekeyMissing(header.signed_prekey_id));
    }
    let one_time = match header.one_time_prekey_id {
        Some(id) => Some(
            prekeys
                .one_time
                .get(&id)
                .ok_or(RatchetError::PrekeyMissing(id))?,
        ),
        None => None,
    };
    let signed = &prekeys.signed_prekey;
    let mut dhs = vec![
        signed.dh(&header.identity_pub.to_x25519()?)?,
        local.dh(&header.ephemeral_pub)?,
        signed.dh(&header.ephemeral_pub)?,
    ];
    if let Some(otk) = one_time {
        dhs.push(otk.dh(&header.ephemeral_pub)?);
    }
    let mut secret = handshake_secret(&dhs);
    dhs.zeroize();
    let (root_key, chain_key) = kdf_root(&secret, &signed.dh(&header.ephemeral_pub)?);
    secret.zeroize();

    let session = SessionState {
        remote_identity: header.identity_pub,
        root_key,
        send_chain_key: None,
        recv_chain_key: Some(chain_key),
        ratchet_keypair: signed.clone(),
        remote_ratchet_pub: header.ephemeral_pub,
        send_counter: 0,
        recv_counter: 0,
        previous_counter: 0,
        skipped: Vec::new(),
        retired_remote: VecDeque::new(),
        pending_handshake: None,
    };
    if let Some(id) = header.one_time_prekey_id {
        prekeys.one_time.remove(&id);
    }
    Ok(session)
}

impl SessionState {
    pub fn root_key(&self) -> &[u8; 32] {
        &self.root_key
    }

    pub fn remote_identity(&self) -> IdentityPublic {
        self.remote_identity
    }

    /// Ns: messages sent on the current sending chain.
    pub fn send_counter(&self) -> u32 {
        self.send_counter
    }

    /// Nr: messages received on the current receiving chain.
    pub fn recv_counter(&self) -> u32 {
        self.recv_counter
    }

    /// PN: length of the previous sending chain.
    pub fn previous_counter(&self) -> u32 {
        self.previous_counter
    }

    pub fn skipped_len(&self) -> usize {
        self.skipped.len()
    }

    /// Handshake to attach to outgoing messages until the peer has replied.
    pub fn pending_handshake(&self) -> Option<HandshakeHeader> {
        self.pending_handshake
    }

    pub fn current_remote_ratchet(&self) -> [u8; 32] {
        self.remote_ratchet_pub
    }

    /// Draw keys for the next outgoing message.
    pub fn next_sending_keys<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
    ) -> Result<(MessageKeys, RatchetHeader)> {
        let chain_key = match self.send_chain_key {
            Some(ck) => ck,
            None => {
                let fresh = DhKeyPair::generate(rng);
                let dh = fresh.dh(&self.remote_ratchet_pub)?;
                let (root, ck) = kdf_root(&self.root_key, &dh);
                self.root_key = root;
                self.ratchet_keypair = fresh;
                ck
            }
        };
        let (mut message_key, next_chain) = chain_step(&chain_key);
        let keys = MessageKeys::derive(&message_key, self.send_counter);
        message_key.zeroize();
        let header = RatchetHeader {
            ratchet_pub: self.ratchet_keypair.public(),
            counter: self.send_counter,
            previous_counter: self.previous_counter,
        };
        self.send_chain_key = Some(next_chain);
        self.send_counter += 1;
        Ok((keys, header))
    }

    /// Derive the keys for an incoming message, ratcheting as needed.
    ///
    /// The returned keys are no longer retrievable from this state; derive on
    /// a clone when the outcome still depends on a MAC check.
    pub fn keys_for_header(&mut self, header: &RatchetHeader) -> Result<MessageKeys> {
        if let Some(pos) = self
            .skipped
            .iter()
            .position(|s| s.ratchet_pub == header.ratchet_pub && s.counter == header.counter)
        {
            let entry = self.skipped.swap_remove(pos);
            return Ok(entry.keys.clone());
        }

        if header.ratchet_pub == self.remote_ratchet_pub {
            if self.recv_chain_key.is_none() || header.counter < self.recv_counter {
                return Err(RatchetError::KeyErased(header.counter));
            }
        } else if self.retired_remote.contains(&header.ratchet_pub) {
            return Err(RatchetError::KeyErased(header.counter));
        } else {
            // Budget the whole operation up front so a failure leaves no partial state.
            let retiring = if self.recv_chain_key.is_some() {
                u64::from(header.previous_counter.saturating_sub(self.recv_counter))
            } else {
                0
            };
            self.check_skip_budget(retiring + u64::from(header.counter))?;
            self.skip_until(header.previous_counter)?;
            self.dh_ratchet_receive(header.ratchet_pub)?;
        }

        self.skip_until(header.counter)?;
        let chain_key = self
            .recv_chain_key
            .expect("receiving chain exists after ratchet");
        let (mut message_key, next_chain) = chain_step(&chain_key);
        let keys = MessageKeys::derive(&message_key, header.counter);
        message_key.zeroize();
        self.recv_chain_key = Some(next_chain);
        self.recv_counter = header.counter + 1;
        Ok(keys)
    }

    /// Derive keys on a scratch copy, run `open`, and commit the advanced
    /// state only if `open` succeeds.
    pub fn receive<T, E>(
        &mut self,
        header: &RatchetHeader,
        open: impl FnOnce(&MessageKeys) -> std::result::Result<T, E>,
    ) -> std::result::Result<T, ReceiveError<E>> {
        let mut trial = self.clone();
        let keys = trial.keys_for_header(header).map_err(ReceiveError::Ratchet)?;
        let value = open(&keys).map_err(ReceiveError::Open)?;
        trial.pending_handshake = None;
        *self = trial;
        Ok(value)
    }

    fn check_skip_budget(&self, additional: u64) -> Result<()> {
        if self.skipped.len() as u64 + additional > MAX_SKIPPED_KEYS as u64 {
            Err(RatchetError::TooManySkipped(additional))
        } else {
            Ok(())
        }
    }

    fn skip_until(&mut self, until: u32) -> Result<()> {
        let Some(mut chain_key) = self.recv_chain_key else {
            return Ok(());
        };
        if until <= self.recv_counter {
            return Ok(());
        }
        self.check_skip_budget(u64::from(until - self.recv_counter))?;
        while self.recv_counter < until {
            let (mut message_key, next_chain) = chain_step(&chain_key);
            self.skipped.push(SkippedKey {
                ratchet_pub: self.remote_ratchet_pub,
                counter: self.recv_counter,
                keys: MessageKeys::derive(&message_key, self.recv_counter),
            });
            message_key.zeroize();
            chain_key = next_chain;
            self.recv_counter += 1;
        }
        self.recv_chain_key = Some(chain_key);
        Ok(())
    }

    fn dh_ratchet_receive(&mut self, remote_pub: [u8; 32]) -> Result<()> {
        let dh = self.ratchet_keypair.dh(&remote_pub)?;
        let (root, chain) = kdf_root(&self.root_key, &dh);
        self.retired_remote.push_back(self.remote_ratchet_pub);
        if self.retired_remote.len() > RETIRED_REMOTE_KEYS {
            self.retired_remote.pop_front();
        }
        self.previous_counter = self.send_counter;
        self.send_counter = 0;
        self.recv_counter = 0;
        self.remote_ratchet_pub = remote_pub;
        self.root_key = root;
        self.recv_chain_key = Some(chain);
        self.send_chain_key = None;
        // The peer has our ratchet key, so it has completed the handshake.
        self.pending_handshake = None;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ReceiveError<E> {
    #[error(transparent)]
    Ratchet(RatchetError),
    #[error("message rejected")]
    Open(E),
}
