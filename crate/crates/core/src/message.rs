//! Sealing and opening complete messages: ratchet keys, keystream, MAC and
//! armor in one place.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::ratchet::{
    HandshakeHeader, MessageKeys, RatchetError, RatchetHeader, ReceiveError, SessionState,
};
use crate::stream::{self, StreamError};
use crate::token::{self, DecodedToken, MetadataHeader, TokenError, WireToken};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpenError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Ratchet(#[from] RatchetError),
    #[error(transparent)]
    Integrity(#[from] StreamError),
}

/// Build the token for `ciphertext` under `keys`, sealing a MAC over the
/// serialized header and the ciphertext.
pub fn seal_token(
    keys: &MessageKeys,
    ratchet: RatchetHeader,
    handshake: Option<HandshakeHeader>,
    ciphertext: &[u8],
) -> WireToken {
    let header = MetadataHeader {
        ratchet,
        ciphertext_length: ciphertext.len() as u32,
        handshake,
    };
    let header_bytes = token::serialize_header(&header);
    let mac = stream::seal_mac(keys, &header_bytes, ciphertext);
    token::encode_token(&header, ciphertext, &mac).expect("header length set from ciphertext")
}

/// Encrypt a finished plaintext as the next message of `session`.
pub fn encrypt_message<R: RngCore + CryptoRng>(
    session: &mut SessionState,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<WireToken, RatchetError> {
    let handshake = session.pending_handshake();
    let (keys, ratchet) = session.next_sending_keys(rng)?;
    let ciphertext = stream::one_shot_encrypt(&keys, plaintext);
    Ok(seal_token(&keys, ratchet, handshake, &ciphertext))
}

/// Verify and decrypt a decoded token. The session advances (and the
/// message key is erased) only when the MAC verifies.
pub fn open_decoded(session: &mut SessionState, decoded: &DecodedToken) -> Result<Vec<u8>, OpenError> {
    session
        .receive(&decoded.header.ratchet, |keys| {
            if stream::verify_mac(keys, &decoded.header_bytes, &decoded.ciphertext, &decoded.mac) {
                Ok(stream::decrypt(keys, &decoded.ciphertext))
            } else {
                Err(StreamError::MacMismatch)
            }
        })
        .map_err(|e| match e {
            ReceiveError::Ratchet(r) => OpenError::Ratchet(r),
            ReceiveError::Open(s) => OpenError::Integrity(s),
        })
}

pub fn open_token(session: &mut SessionState, token: &WireToken) -> Result<Vec<u8>, OpenError> {
    open_decoded(session, &token.decode()?)
}
