//! Position-indexed keystream pads over AES-128-OFB.
//!
//! A pad is grown by encrypting blocks of zeros through a running OFB
//! context: the ciphertext of a zero block is the keystream block itself.
//! Plaintext byte `i` is always XORed with pad byte `i`, which makes
//! in-place edits possible: after any edit the suffix is re-XORed against
//! the pad positions it now occupies.
//!
//! Reusing pad positions across edits reveals the XOR of the old and new
//! plaintext at those positions to anyone who saw both ciphertexts. Edits
//! only happen inside one compose session, before the message is final.

use aes::Aes128;
use hmac::{Hmac, Mac};
use ofb::cipher::{KeyIvInit, StreamCipher};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::Zeroize;

use crate::ratchet::MessageKeys;

type Aes128Ofb = ofb::Ofb<Aes128>;

pub const BLOCK_LEN: usize = 16;
/// The pad grows once fewer than this many unused bytes (16 bits) remain.
pub const EXTEND_THRESHOLD: usize = 2;
pub const MAC_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamError {
    #[error("edit index {index} out of range for length {len}")]
    BadIndex { index: usize, len: usize },
    #[error("message authentication failed")]
    MacMismatch,
}

/// Keystream for one compose session, grown a block at a time.
pub struct KeystreamPad {
    pad: Vec<u8>,
    consumed: usize,
    ofb: Aes128Ofb,
    zeroed: bool,
}

impl KeystreamPad {
    /// Start a pad holding one block of keystream.
    pub fn new(keys: &MessageKeys) -> Self {
        let mut pad = Self {
            pad: Vec::with_capacity(4 * BLOCK_LEN),
            consumed: 0,
            ofb: Aes128Ofb::new(&keys.cipher_key.into(), &keys.iv.into()),
            zeroed: false,
        };
        pad.extend_block();
        pad
    }

    /// Negative-control pad whose keystream is all zeros. Only the
    /// confidentiality harness uses this, to prove its leak check fires.
    #[doc(hidden)]
    pub fn disabled(keys: &MessageKeys) -> Self {
        let mut pad = Self::new(keys);
        pad.zeroed = true;
        pad.pad.iter_mut().for_each(|b| *b = 0);
        pad
    }

    /// Append exactly one more block of keystream.
    pub fn extend_block(&mut self) {
        let mut block = [0u8; BLOCK_LEN];
        if !self.zeroed {
            self.ofb.apply_keystream(&mut block);
        }
        self.pad.extend_from_slice(&block);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pad
    }

    pub fn len(&self) -> usize {
        self.pad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad.is_empty()
    }

    /// Number of pad bytes bound to plaintext positions.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn unused(&self) -> usize {
        self.pad.len() - self.consumed
    }

    /// Bind the first `len` positions and keep the unused headroom above
    /// the extension threshold.
    fn bind(&mut self, len: usize) {
        self.consumed = len;
        while self.pad.len() < len || self.unused() < EXTEND_THRESHOLD {
            self.extend_block();
        }
    }

    fn at(&self, index: usize) -> u8 {
        self.pad[index]
    }
}

impl Drop for KeystreamPad {
    fn drop(&mut self) {
        self.pad.zeroize();
    }
}

impl std::fmt::Debug for KeystreamPad {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeystreamPad")
            .field("len", &self.pad.len())
            .field("consumed", &self.consumed)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Replace(u8),
    Insert(u8),
    Delete,
}

/// Plaintext being composed together with its running ciphertext.
#[derive(Default)]
pub struct ComposeBuffer {
    plaintext: Vec<u8>,
    ciphertext: Vec<u8>,
    dirty_from: usize,
    changed: bool,
}

impl ComposeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn plaintext(&self) -> &[u8] {
        &self.plaintext
    }

    pub fn ciphertext(&self) -> &[u8] {
        &self.ciphertext
    }

    pub fn len(&self) -> usize {
        self.plaintext.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plaintext.is_empty()
    }

    /// Lowest index whose ciphertext changed since the last [`Self::mark_clean`].
    /// Equal to `len()` when nothing is pending.
    pub fn dirty_from(&self) -> usize {
        if self.changed {
            self.dirty_from.min(self.len())
        } else {
            self.len()
        }
    }

    pub fn is_dirty(&self) -> bool {
        self.changed
    }

    pub fn mark_clean(&mut self) {
        self.changed = false;
        self.dirty_from = self.len();
    }

    fn touch(&mut self, index: usize) {
        self.dirty_from = if self.changed { self.dirty_from.min(index) } else { index };
        self.changed = true;
    }

    /// Encrypt one byte at the end of the buffer.
    pub fn push(&mut self, pad: &mut KeystreamPad, byte: u8) {
        let index = self.plaintext.len();
        pad.bind(index + 1);
        self.plaintext.push(byte);
        self.ciphertext.push(byte ^ pad.at(index));
        self.touch(index);
    }

    pub fn extend(&mut self, pad: &mut KeystreamPad, bytes: &[u8]) {
        for &b in bytes {
            self.push(pad, b);
        }
    }

    /// Edit the plaintext at `index` and re-encrypt every position from
    /// there on.
    pub fn edit(&mut self, pad: &mut KeystreamPad, index: usize, edit: Edit) -> Result<(), StreamError> {
        let len = self.plaintext.len();
        let in_range = match edit {
            Edit::Insert(_) => index <= len,
            Edit::Replace(_) | Edit::Delete => index < len,
        };
        if !in_range {
            return Err(StreamError::BadIndex { index, len });
        }
        match edit {
            Edit::Replace(b) => self.plaintext[index] = b,
            Edit::Insert(b) => {
                self.plaintext.insert(index, b);
                self.ciphertext.push(0);
            }
            Edit::Delete => {
                self.plaintext.remove(index);
                self.ciphertext.pop();
            }
        }
        pad.bind(self.plaintext.len());
        for i in index..self.plaintext.len() {
            self.ciphertext[i] = self.plaintext[i] ^ pad.at(i);
        }
        self.touch(index);
        Ok(())
    }
}

impl Drop for ComposeBuffer {
    fn drop(&mut self) {
        self.plaintext.zeroize();
    }
}

impl std::fmt::Debug for ComposeBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComposeBuffer")
            .field("len", &self.plaintext.len())
            .field("dirty_from", &self.dirty_from())
            .finish_non_exhaustive()
    }
}

/// Encrypt a complete plaintext in one pass.
pub fn one_shot_encrypt(keys: &MessageKeys, plaintext: &[u8]) -> Vec<u8> {
    let mut out = plaintext.to_vec();
    Aes128Ofb::new(&keys.cipher_key.into(), &keys.iv.into()).apply_keystream(&mut out);
    out
}

pub fn decrypt(keys: &MessageKeys, ciphertext: &[u8]) -> Vec<u8> {
    one_shot_encrypt(keys, ciphertext)
}

/// Truncated HMAC-SHA256 over `header || ciphertext`.
pub fn seal_mac(keys: &MessageKeys, header: &[u8], ciphertext: &[u8]) -> [u8; MAC_LEN] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&keys.mac_key)
        .expect("HMAC accepts any key length");
    mac.update(header);
    mac.update(ciphertext);
    let full = mac.finalize().into_bytes();
    let mut out = [0u8; MAC_LEN];
    out.copy_from_slice(&full[..MAC_LEN]);
    out
}

pub fn verify_mac(keys: &MessageKeys, header: &[u8], ciphertext: &[u8], mac: &[u8]) -> bool {
    mac.len() == MAC_LEN && bool::from(seal_mac(keys, header, ciphertext).ct_eq(mac))
}
