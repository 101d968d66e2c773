//! Base32 encoding used for store path hashes and origin digests.
//!
//! The alphabet omits `e`, `o`, `u` and `t`. Bytes are split into 5-bit
//! groups starting from the least significant bit of the first byte, and the
//! group with the highest index is emitted first.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

pub const ALPHABET: &[u8; 32] = b"0123456789abcdfghijklmnpqrsvwxyz";

/// Length of a store path hash in characters.
pub const HASH_CHARS: usize = 32;

/// Number of bytes of truncated digest encoded into a store path hash.
pub const HASH_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Base32Error {
    #[error("invalid digest: expected {expected} bytes, got {actual}")]
    InvalidDigest { expected: usize, actual: usize },
    #[error("invalid base32 character {0:?}")]
    InvalidChar(char),
    #[error("invalid base32 length {actual}, expected {expected}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("base32 string encodes bits beyond the decoded length")]
    Overflow,
}

/// Number of characters needed to encode `len` bytes.
pub const fn encoded_len(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        (len * 8 - 1) / 5 + 1
    }
}

/// Number of bytes a string of `chars` characters decodes to.
pub const fn decoded_len(chars: usize) -> usize {
    chars * 5 / 8
}

pub fn is_base32_char(c: u8) -> bool {
    digit_value(c).is_some()
}

fn digit_value(c: u8) -> Option<u8> {
    ALPHABET.iter().position(|&a| a == c).map(|p| p as u8)
}

pub fn encode(bytes: &[u8]) -> String {
    let len = encoded_len(bytes.len());
    let mut out = String::with_capacity(len);
    for k in (0..len).rev() {
        let bit = k * 5;
        let i = bit / 8;
        let j = bit % 8;
        let low = (bytes[i] as u16) >> j;
        let high = if i + 1 < bytes.len() { (bytes[i + 1] as u16) << (8 - j) } else { 0 };
        out.push(ALPHABET[((low | high) & 0x1f) as usize] as char);
    }
    out
}

pub fn decode(s: &str) -> Result<Vec<u8>, Base32Error> {
    let chars = s.as_bytes();
    let n = decoded_len(chars.len());
    let mut bytes = vec![0u8; n];
    for (pos, &c) in chars.iter().enumerate() {
        let digit = digit_value(c).ok_or(Base32Error::InvalidChar(c as char))? as u16;
        let k = chars.len() - 1 - pos;
        let bit = k * 5;
        let i = bit / 8;
        let j = bit % 8;
        let shifted = digit << j;
        if i >= n {
            if shifted != 0 {
                return Err(Base32Error::Overflow);
            }
            continue;
        }
        bytes[i] |= (shifted & 0xff) as u8;
        let carry = shifted >> 8;
        if i + 1 < n {
            bytes[i + 1] |= carry as u8;
        } else if carry != 0 {
            return Err(Base32Error::Overflow);
        }
    }
    Ok(bytes)
}

/// Decodes a string that must represent exactly `len` bytes.
pub fn decode_exact(s: &str, len: usize) -> Result<Vec<u8>, Base32Error> {
    let expected = encoded_len(len);
    if s.len() != expected {
        return Err(Base32Error::InvalidLength { expected, actual: s.len() });
    }
    decode(s)
}

/// Encodes a 160-bit truncated digest into the 32 characters of a store path hash.
pub fn hash_to_base32(digest: &[u8]) -> Result<String, Base32Error> {
    if digest.len() != HASH_BYTES {
        return Err(Base32Error::InvalidDigest { expected: HASH_BYTES, actual: digest.len() });
    }
    Ok(encode(digest))
}
