//! Serde adapters that encode fixed-size byte arrays as standard base64 strings.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&STANDARD.encode(bytes))
}

pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
    let text = String::deserialize(d)?;
    let raw = STANDARD.decode(text.as_bytes()).map_err(D::Error::custom)?;
    raw.as_slice()
        .try_into()
        .map_err(|_| D::Error::custom(format!("expected {N} bytes, got {}", raw.len())))
}
