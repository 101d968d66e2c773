//! Reference scanning.
//!
//! A build output refers to another store path if the 32-character hash of
//! that path appears anywhere in its bytes. [`RefScanner`] looks for a known
//! set of hashes in a stream of chunks; [`find_path_literals`] finds whole
//! store path strings in text.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::base32::{is_base32_char, HASH_CHARS};
use crate::store_path::{is_valid_name_char, StorePath};

/// Streams bytes and records which candidate hashes occur in them.
#[derive(Debug, Clone)]
pub struct RefScanner<'a> {
    candidates: &'a BTreeSet<String>,
    found: BTreeSet<String>,
    tail: Vec<u8>,
}

impl<'a> RefScanner<'a> {
    /// `candidates` holds store path hashes (32 base32 characters).
    pub fn new(candidates: &'a BTreeSet<String>) -> Self {
        RefScanner { candidates, found: BTreeSet::new(), tail: Vec::new() }
    }

    pub fn feed(&mut self, chunk: &[u8]) {
        if self.candidates.is_empty() {
            return;
        }
        // Keep the unfinished base32 run from the previous chunk in front.
        let mut buf = core::mem::take(&mut self.tail);
        buf.extend_from_slice(chunk);
        let mut start = 0;
        while start < buf.len() {
            if !is_base32_char(buf[start]) {
                start += 1;
                continue;
            }
            let mut end = start;
            while end < buf.len() && is_base32_char(buf[end]) {
                end += 1;
            }
            self.check_run(&buf[start..end]);
            if end == buf.len() {
                // The run may continue in the next chunk; only the last
                // HASH_CHARS - 1 bytes can still start a new match.
                let keep = (end - start).min(HASH_CHARS - 1);
                self.tail = buf[end - keep..].to_vec();
            }
            start = end;
        }
    }

    fn check_run(&mut self, run: &[u8]) {
        if run.len() < HASH_CHARS {
            return;
        }
        for w in run.windows(HASH_CHARS) {
            // Base32 characters are ASCII, so the window is valid UTF-8.
            let s = core::str::from_utf8(w).expect("base32 is ascii");
            if self.candidates.contains(s) {
                self.found.insert(String::from(s));
            }
        }
    }

    /// Hashes found so far.
    pub fn finish(self) -> BTreeSet<String> {
        self.found
    }
}

/// Hashes from `candidates` that occur in `bytes`.
pub fn scan_references(bytes: &[u8], candidates: &BTreeSet<String>) -> BTreeSet<String> {
    let mut s = RefScanner::new(candidates);
    s.feed(bytes);
    s.finish()
}

/// Store paths under `root` written out in `bytes`: the root, a slash, a
/// 32-character hash, a dash and a name of valid name characters.
pub fn find_path_literals(bytes: &[u8], root: &str) -> BTreeSet<StorePath> {
    let mut found = BTreeSet::new();
    let mut prefix = Vec::with_capacity(root.len() + 1);
    prefix.extend_from_slice(root.as_bytes());
    prefix.push(b'/');
    let mut i = 0;
    while i + prefix.len() <= bytes.len() {
        if bytes[i..].starts_with(&prefix) {
            let h = i + prefix.len();
            let hash_end = h + HASH_CHARS;
            let ok = hash_end < bytes.len()
                && bytes[h..hash_end].iter().all(|&c| is_base32_char(c))
                && bytes[hash_end] == b'-';
            if ok {
                let name_start = hash_end + 1;
                let mut name_end = name_start;
                while name_end < bytes.len() && is_valid_name_char(bytes[name_end]) {
                    name_end += 1;
                }
                let text = core::str::from_utf8(&bytes[i..name_end]).expect("ascii");
                if let Ok(p) = StorePath::parse_in(root, text) {
                    found.insert(p);
                    i = name_end;
                    continue;
                }
            }
        }
        i += 1;
    }
    found
}
