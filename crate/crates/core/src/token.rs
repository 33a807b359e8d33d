//! Armored wire tokens.
//!
//! ```text
//! token    = "Guard-start" base64( header || ciphertext || mac ) "Guard-end"
//! header   = 0x01 version            ; 0x33
//!            0x02 0x20 ratchet_pub   ; 32 bytes, length-prefixed
//!            [0x06 varint len handshake]
//!            0x03 varint counter
//!            0x04 varint previous_counter
//!            0x05 varint ciphertext_length
//! handshake = identity_pub(32) ephemeral_pub(32) varint signed_prekey_id
//!             varint (one_time_prekey_id + 1, or 0 when absent)
//! mac      = 8 bytes
//! ```
//!
//! Varints are unsigned LEB128. With single-byte varints and no handshake
//! block the header is 42 bytes, 50 with the MAC. The handshake block is
//! only present on messages sent before the peer has replied.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ratchet::{HandshakeHeader, IdentityPublic, RatchetHeader, MESSAGE_VERSION};
use crate::stream::MAC_LEN;

pub const GUARD_START: &str = "Guard-start";
pub const GUARD_END: &str = "Guard-end";

const TAG_VERSION: u8 = 0x01;
const TAG_RATCHET_KEY: u8 = 0x02;
const TAG_COUNTER: u8 = 0x03;
const TAG_PREVIOUS_COUNTER: u8 = 0x04;
const TAG_CIPHERTEXT_LENGTH: u8 = 0x05;
const TAG_HANDSHAKE: u8 = 0x06;
const KEY_LEN: u8 = 32;

/// Header size with one-byte varints and no handshake block.
pub const BASE_HEADER_LEN: usize = 42;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("header parse error: {0}")]
    HeaderParse(&'static str),
    #[error("header declares {declared} ciphertext bytes, got {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed token at offset {offset}: {reason}")]
    MalformedToken { offset: usize, reason: &'static str },
    #[error("armor {0:?} is not an accepted wire format")]
    UnsupportedArmor(Armor),
}

/// Text armor for token interiors. Only base64 is a wire format; base62 is
/// accepted in configuration so it can be rejected with a clear error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Armor {
    #[default]
    Base64,
    Base62,
}

impl Armor {
    pub fn ensure_supported(self) -> Result<(), TokenError> {
        match self {
            Armor::Base64 => Ok(()),
            other => Err(TokenError::UnsupportedArmor(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataHeader {
    pub ratchet: RatchetHeader,
    pub ciphertext_length: u32,
    pub handshake: Option<HandshakeHeader>,
}

impl MetadataHeader {
    pub fn version(&self) -> u8 {
        MESSAGE_VERSION
    }
}

pub fn varint_len(mut value: u64) -> usize {
    let mut n = 1;
    while value >= 0x80 {
        value >>= 7;
        n += 1;
    }
    n
}

fn put_varint(out: &mut Vec<u8>, mut value: u64) {
    while value >= 0x80 {
        out.push((value as u8 & 0x7f) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn byte(&mut self) -> Result<u8, TokenError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(TokenError::HeaderParse("truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TokenError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(TokenError::HeaderParse("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array32(&mut self) -> Result<[u8; 32], TokenError> {
        Ok(self.take(32)?.try_into().expect("took 32 bytes"))
    }

    fn varint_u32(&mut self) -> Result<u32, TokenError> {
        let mut value: u64 = 0;
        for shift in (0..35).step_by(7) {
            let b = self.byte()?;
            value |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                if varint_len(value) != shift / 7 + 1 {
                    return Err(TokenError::HeaderParse("non-minimal varint"));
                }
                return u32::try_from(value).map_err(|_| TokenError::HeaderParse("varint overflow"));
            }
        }
        Err(TokenError::HeaderParse("varint too long"))
    }

    fn expect(&mut self, tag: u8) -> Result<(), TokenError> {
        if self.byte()? == tag {
            Ok(())
        } else {
            Err(TokenError::HeaderParse("unexpected field tag"))
        }
    }
}

pub fn serialize_header(h: &MetadataHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(BASE_HEADER_LEN + 80);
    out.extend_from_slice(&[TAG_VERSION, MESSAGE_VERSION, TAG_RATCHET_KEY, KEY_LEN]);
    out.extend_from_slice(&h.ratchet.ratchet_pub);
    if let Some(hs) = &h.handshake {
        let mut block = Vec::with_capacity(72);
        block.extend_from_slice(hs.identity_pub.as_bytes());
        block.extend_from_slice(&hs.ephemeral_pub);
        put_varint(&mut block, hs.signed_prekey_id.into());
        put_varint(&mut block, hs.one_time_prekey_id.map_or(0, |id| u64::from(id) + 1));
        out.push(TAG_HANDSHAKE);
        put_varint(&mut out, block.len() as u64);
        out.extend_from_slice(&block);
    }
    out.push(TAG_COUNTER);
    put_varint(&mut out, h.ratchet.counter.into());
    out.push(TAG_PREVIOUS_COUNTER);
    put_varint(&mut out, h.ratchet.previous_counter.into());
    out.push(TAG_CIPHERTEXT_LENGTH);
    put_varint(&mut out, h.ciphertext_length.into());
    out
}

/// Parse a header from the front of `bytes`; returns it with its encoded length.
pub fn parse_header_prefix(bytes: &[u8]) -> Result<(MetadataHeader, usize), TokenError> {
    let mut r = Reader { bytes, pos: 0 };
    r.expect(TAG_VERSION)?;
    if r.byte()? != MESSAGE_VERSION {
        return Err(TokenError::HeaderParse("unsupported message version"));
    }
    r.expect(TAG_RATCHET_KEY)?;
    if r.byte()? != KEY_LEN {
        return Err(TokenError::HeaderParse("bad ratchet key length"));
    }
    let ratchet_pub = r.array32()?;
    let mut handshake = None;
    if r.bytes.get(r.pos) == Some(&TAG_HANDSHAKE) {
        r.pos += 1;
        let len = r.varint_u32()? as usize;
        let mut block = Reader { bytes: r.take(len)?, pos: 0 };
        let identity_pub = IdentityPublic(block.array32()?);
        let ephemeral_pub = block.array32()?;
        let signed_prekey_id = block.varint_u32()?;
        let otk = block.varint_u32()?;
        if block.pos != block.bytes.len() {
            return Err(TokenError::HeaderParse("trailing handshake bytes"));
        }
        handshake = Some(HandshakeHeader {
            identity_pub,
            ephemeral_pub,
            signed_prekey_id,
            one_time_prekey_id: otk.checked_sub(1),
        });
    }
    r.expect(TAG_COUNTER)?;
    let counter = r.varint_u32()?;
    r.expect(TAG_PREVIOUS_COUNTER)?;
    let previous_counter = r.varint_u32()?;
    r.expect(TAG_CIPHERTEXT_LENGTH)?;
    let ciphertext_length = r.varint_u32()?;

    let header = MetadataHeader {
        ratchet: RatchetHeader {
            ratchet_pub,
            counter,
            previous_counter,
        },
        ciphertext_length,
        handshake,
    };
    Ok((header, r.pos))
}

/// Parse a header that must span `bytes` exactly.
pub fn parse_header(bytes: &[u8]) -> Result<MetadataHeader, TokenError> {
    let (h, used) = parse_header_prefix(bytes)?;
    if used != bytes.len() {
        return Err(TokenError::HeaderParse("trailing bytes after header"));
    }
    Ok(h)
}

/// A complete armored token as it appears in an application's text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WireToken(String);

/// Binary content of a token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedToken {
    pub header: MetadataHeader,
    pub header_bytes: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub mac: [u8; MAC_LEN],
}

impl WireToken {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn interior(&self) -> &str {
        &self.0[GUARD_START.len()..self.0.len() - GUARD_END.len()]
    }

    /// SHA-256 of the full token text, delimiters included.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.0.as_bytes()).into()
    }

    /// Parse a string that must be exactly one token.
    pub fn parse(text: &str) -> Result<Self, TokenError> {
        let mut found = scan_tokens(text);
        match (found.len(), found.pop()) {
            (1, Some(Ok(t))) if t.0 == text.trim() => Ok(t),
            (_, Some(Err(e))) => Err(e),
            _ => Err(TokenError::MalformedToken {
                offset: 0,
                reason: "expected exactly one token",
            }),
        }
    }

    pub fn decode(&self) -> Result<DecodedToken, TokenError> {
        let raw = STANDARD
            .decode(self.interior())
            .map_err(|_| TokenError::MalformedToken { offset: 0, reason: "invalid base64" })?;
        let (header, used) = parse_header_prefix(&raw)?;
        let body = &raw[used..];
        let declared = header.ciphertext_length as usize;
        if body.len() != declared + MAC_LEN {
            return Err(TokenError::LengthMismatch {
                declared,
                actual: body.len().saturating_sub(MAC_LEN),
            });
        }
        let (ciphertext, mac) = body.split_at(declared);
        Ok(DecodedToken {
            header,
            header_bytes: raw[..used].to_vec(),
            ciphertext: ciphertext.to_vec(),
            mac: mac.try_into().expect("MAC_LEN bytes"),
        })
    }
}

impl std::fmt::Display for WireToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn encode_token(
    header: &MetadataHeader,
    ciphertext: &[u8],
    mac: &[u8; MAC_LEN],
) -> Result<WireToken, TokenError> {
    if header.ciphertext_length as usize != ciphertext.len() {
        return Err(TokenError::LengthMismatch {
            declared: header.ciphertext_length as usize,
            actual: ciphertext.len(),
        });
    }
    let mut raw = serialize_header(header);
    raw.extend_from_slice(ciphertext);
    raw.extend_from_slice(mac);
    Ok(WireToken(format!("{GUARD_START}{}{GUARD_END}", STANDARD.encode(&raw))))
}

/// Find every delimited token in `selection`, in order.
///
/// ASCII whitespace inside a token (soft wrapping in the host app) is
/// dropped. A start delimiter without a matching end, or an interior that
/// is not padded standard base64, yields a `MalformedToken` entry and the
/// scan continues after it.
pub fn scan_tokens(selection: &str) -> Vec<Result<WireToken, TokenError>> {
    let mut out = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = selection[cursor..].find(GUARD_START) {
        let start = cursor + rel;
        let body_start = start + GUARD_START.len();
        let next_start = selection[body_start..].find(GUARD_START).map(|i| body_start + i);
        let end = selection[body_start..].find(GUARD_END).map(|i| body_start + i);
        match end {
            Some(end) if next_start.is_none_or(|ns| end < ns) => {
                let interior: String = selection[body_start..end]
                    .chars()
                    .filter(|c| !c.is_ascii_whitespace())
                    .collect();
                if is_padded_base64(&interior) {
                    out.push(Ok(WireToken(format!("{GUARD_START}{interior}{GUARD_END}"))));
                } else {
                    out.push(Err(TokenError::MalformedToken {
                        offset: start,
                        reason: "interior is not base64",
                    }));
                }
                cursor = end + GUARD_END.len();
            }
            _ => {
                out.push(Err(TokenError::MalformedToken {
                    offset: start,
                    reason: "unbalanced delimiters",
                }));
                cursor = next_start.unwrap_or(selection.len());
            }
        }
    }
    out
}

fn is_padded_base64(s: &str) -> bool {
    !s.is_empty() && s.len().is_multiple_of(4) && STANDARD.decode(s).is_ok()
}

/// Bytes a token adds on top of an `plaintext_len`-byte message, computed
/// from the actual layout of an established-session message whose counter
/// and previous counter both equal `message_number`.
///
/// Compare with the rough closed form in [`approximate_overhead`].
pub fn overhead_bytes(plaintext_len: usize, message_number: u32) -> usize {
    let n = u64::from(message_number);
    let header = BASE_HEADER_LEN - 3
        + 2 * varint_len(n)
        + varint_len(plaintext_len as u64);
    let raw = header + plaintext_len + MAC_LEN;
    GUARD_START.len() + GUARD_END.len() + base64_len(raw) - plaintext_len
}

/// `0.33 L + 50 + floor(L / 128) + 2 floor(n / 128)`; excludes delimiters.
pub fn approximate_overhead(plaintext_len: usize, message_number: u32) -> f64 {
    0.33 * plaintext_len as f64
        + 50.0
        + (plaintext_len / 128) as f64
        + 2.0 * f64::from(message_number / 128)
}

pub fn base64_len(raw_len: usize) -> usize {
    4 * raw_len.div_ceil(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(counter: u32, previous_counter: u32, len: u32) -> MetadataHeader {
        MetadataHeader {
            ratchet: RatchetHeader {
                ratchet_pub: [0xab; 32],
                counter,
                previous_counter,
            },
            ciphertext_length: len,
            handshake: None,
        }
    }

    #[test]
    fn base_case_is_fifty_bytes_with_mac() {
        let h = serialize_header(&header(0, 0, 64));
        assert_eq!(h.len(), BASE_HEADER_LEN);
        assert_eq!(h.len() + MAC_LEN, 50);
    }

    #[test]
    fn counter_growth_adds_one_byte_per_field() {
        let base = serialize_header(&header(127, 127, 10)).len();
        assert_eq!(serialize_header(&header(128, 0, 10)).len(), base + 1);
        assert_eq!(serialize_header(&header(200, 0, 10)).len(), base + 1);
        assert_eq!(serialize_header(&header(128, 128, 10)).len(), base + 2);
    }

    #[test]
    fn empty_ciphertext_token() {
        let t = encode_token(&header(0, 0, 0), &[], &[7; 8]).unwrap();
        assert!(t.as_str().starts_with(GUARD_START) && t.as_str().ends_with(GUARD_END));
        assert_eq!(t.interior().len(), base64_len(50));
        assert_eq!(GUARD_START.len() + GUARD_END.len(), 20);
        assert_eq!(t.len(), 20 + 68);
    }

    #[test]
    fn interior_length_tracks_base64_expansion() {
        for l in [0usize, 1, 2, 3, 128, 1000] {
            let h = header(0, 0, l as u32);
            let t = encode_token(&h, &vec![0x61; l], &[1; 8]).unwrap();
            let raw = serialize_header(&h).len() + l + MAC_LEN;
            assert_eq!(t.interior().len(), 4 * raw.div_ceil(3));
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        assert_eq!(
            encode_token(&header(0, 0, 3), b"ab", &[0; 8]),
            Err(TokenError::LengthMismatch { declared: 3, actual: 2 })
        );
    }

    #[test]
    fn truncated_header_rejected() {
        let bytes = serialize_header(&header(1, 2, 3));
        for cut in 0..bytes.len() {
            assert!(parse_header(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[1] = 0x32;
        assert!(parse_header(&bad).is_err());
    }

    #[test]
    fn handshake_block_round_trips() {
        let mut h = header(0, 0, 5);
        h.handshake = Some(HandshakeHeader {
            identity_pub: IdentityPublic([1; 32]),
            ephemeral_pub: [2; 32],
            signed_prekey_id: 1,
            one_time_prekey_id: Some(0),
        });
        assert_eq!(parse_header(&serialize_header(&h)).unwrap(), h);
        h.handshake.as_mut().unwrap().one_time_prekey_id = None;
        assert_eq!(parse_header(&serialize_header(&h)).unwrap(), h);
    }

    #[test]
    fn scan_finds_token_in_prose() {
        let t = encode_token(&header(0, 0, 2), b"hi", &[0; 8]).unwrap();
        let found = scan_tokens(&format!("see {t} thanks"));
        assert_eq!(found, vec![Ok(t)]);
    }

    #[test]
    fn scan_finds_two_tokens_in_order() {
        let a = encode_token(&header(0, 0, 2), b"hi", &[0; 8]).unwrap();
        let b = encode_token(&header(1, 0, 3), b"hey", &[1; 8]).unwrap();
        let found = scan_tokens(&format!("  {a}\nand then {b}  "));
        assert_eq!(found, vec![Ok(a), Ok(b)]);
    }

    #[test]
    fn scan_reports_malformed_and_continues() {
        let good = encode_token(&header(0, 0, 1), b"x", &[0; 8]).unwrap();
        let found = scan_tokens(&format!("Guard-start???Guard-end Guard-start oops {good}"));
        assert!(matches!(found[0], Err(TokenError::MalformedToken { offset: 0, .. })));
        assert!(matches!(found[1], Err(TokenError::MalformedToken { reason: "unbalanced delimiters", .. })));
        assert_eq!(found[2], Ok(good));
    }

    #[test]
    fn scan_tolerates_wrapped_interior() {
        let t = encode_token(&header(0, 0, 40), &[9; 40], &[0; 8]).unwrap();
        let s = t.as_str();
        let wrapped = format!("{}\n{}", &s[..30], &s[30..]);
        assert_eq!(scan_tokens(&wrapped), vec![Ok(t)]);
    }

    #[test]
    fn overhead_matches_layout() {
        assert_eq!(overhead_bytes(0, 0), 20 + 68);
        for l in [0usize, 1, 5, 127, 128, 300, 1000] {
            for n in [0u32, 1, 127, 128, 500] {
                let h = header(n, n, l as u32);
                let t = encode_token(&h, &vec![0; l], &[0; 8]).unwrap();
                assert_eq!(overhead_bytes(l, n), t.len() - l, "L={l} n={n}");
            }
        }
    }

    #[test]
    fn overhead_is_monotone() {
        let mut prev = 0;
        for l in 0..600 {
            let o = overhead_bytes(l, 0) + l;
            assert!(o >= prev);
            prev = o;
        }
        for n in 0..20_000u32 {
            assert!(overhead_bytes(10, n + 1) >= overhead_bytes(10, n));
        }
    }

    #[test]
    fn base62_is_not_a_wire_format() {
        assert!(Armor::Base64.ensure_supported().is_ok());
        assert_eq!(
            Armor::Base62.ensure_supported(),
            Err(TokenError::UnsupportedArmor(Armor::Base62))
        );
    }

    fn arb_header() -> impl Strategy<Value = MetadataHeader> {
        let hs = proptest::option::of((any::<[u8; 32]>(), any::<[u8; 32]>(), any::<u32>(), proptest::option::of(0u32..u32::MAX)));
        (any::<[u8; 32]>(), any::<u32>(), any::<u32>(), any::<u32>(), hs).prop_map(
            |(ratchet_pub, counter, previous_counter, ciphertext_length, hs)| MetadataHeader {
                ratchet: RatchetHeader { ratchet_pub, counter, previous_counter },
                ciphertext_length,
                handshake: hs.map(|(id, eph, spk, otk)| HandshakeHeader {
                    identity_pub: IdentityPublic(id),
                    ephemeral_pub: eph,
                    signed_prekey_id: spk,
                    one_time_prekey_id: otk,
                }),
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn header_round_trip(h in arb_header()) {
            prop_assert_eq!(parse_header(&serialize_header(&h)).unwrap(), h);
        }

        #[test]
        fn token_round_trip(h in arb_header(), body in proptest::collection::vec(any::<u8>(), 0..300), mac in any::<[u8; 8]>()) {
            let mut h = h;
            h.ciphertext_length = body.len() as u32;
            let t = encode_token(&h, &body, &mac).unwrap();
            prop_assert!(t.as_str().bytes().all(|b| b.is_ascii_alphanumeric() || b"+/=-".contains(&b)));
            let d = WireToken::parse(t.as_str()).unwrap().decode().unwrap();
            prop_assert_eq!(d.header, h);
            prop_assert_eq!(d.ciphertext, body);
            prop_assert_eq!(d.mac, mac);
        }
    }
}
