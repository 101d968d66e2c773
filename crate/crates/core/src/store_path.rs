//! Store path naming.
//!
//! A store path is rendered as `<root>/<hash>-<name>` where `hash` is the
//! base32 encoding of the first 20 bytes of
//! `sha256(tag ":" hex(content_digest) ":" root ":" name)`.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::base32::{self, HASH_BYTES, HASH_CHARS};

/// Longest name accepted in a store path.
pub const MAX_NAME_LEN: usize = 211;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorePathError {
    #[error("invalid store path name {0:?}")]
    InvalidName(String),
    #[error("invalid store root {0:?}: must be an absolute path")]
    InvalidRoot(String),
    #[error("not a store path: {0:?}")]
    NotAStorePath(String),
    #[error("store path {path:?} is not under store root {root:?}")]
    WrongRoot { path: String, root: String },
}

/// Kind of object a store path names; participates in the path hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathTag {
    /// Interned files and directories.
    Source,
    /// Serialized derivations (`.drv` files).
    Derivation,
    /// The `out` output of a derivation.
    Output,
}

impl PathTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PathTag::Source => "source",
            PathTag::Derivation => "derivation",
            PathTag::Output => "output:out",
        }
    }
}

impl fmt::Display for PathTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn is_valid_name_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, b'.' | b'+' | b'-' | b'_')
}

pub fn validate_name(name: &str) -> Result<(), StorePathError> {
    let ok = !name.is_empty()
        && name.len() <= MAX_NAME_LEN
        && !name.starts_with('.')
        && name.bytes().all(is_valid_name_char);
    if ok {
        Ok(())
    } else {
        Err(StorePathError::InvalidName(name.to_string()))
    }
}

/// Strips trailing slashes and checks the root is absolute.
pub fn normalize_root(root: &str) -> Result<String, StorePathError> {
    let trimmed = root.trim_end_matches('/');
    if !root.starts_with('/') || trimmed.is_empty() || trimmed.contains("//") {
        return Err(StorePathError::InvalidRoot(root.to_string()));
    }
    Ok(trimmed.to_string())
}

/// An immutable location `<root>/<hash>-<name>` in the store.
///
/// Equality, ordering and hashing all follow the rendered form.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StorePath {
    full: String,
    root_len: usize,
}

impl StorePath {
    /// Computes the store path for an object of kind `tag` whose contents
    /// hash to `content_digest`.
    pub fn make(root: &str, tag: PathTag, content_digest: &[u8; 32], name: &str) -> Result<StorePath, StorePathError> {
        let root = normalize_root(root)?;
        validate_name(name)?;
        let mut hasher = Sha256::new();
        hasher.update(tag.as_str().as_bytes());
        hasher.update(b":");
        hasher.update(hex::encode(content_digest).as_bytes());
        hasher.update(b":");
        hasher.update(root.as_bytes());
        hasher.update(b":");
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let hash = base32::encode(&digest[..HASH_BYTES]);
        Ok(Self::assemble(&root, &hash, name))
    }

    /// Builds a path from already validated parts.
    pub fn from_parts(root: &str, hash: &str, name: &str) -> Result<StorePath, StorePathError> {
        let root = normalize_root(root)?;
        validate_name(name)?;
        if hash.len() != HASH_CHARS || !hash.bytes().all(base32::is_base32_char) {
            return Err(StorePathError::NotAStorePath(format!("{root}/{hash}-{name}")));
        }
        Ok(Self::assemble(&root, hash, name))
    }

    fn assemble(root: &str, hash: &str, name: &str) -> StorePath {
        let mut full = String::with_capacity(root.len() + 2 + HASH_CHARS + name.len());
        full.push_str(root);
        full.push('/');
        full.push_str(hash);
        full.push('-');
        full.push_str(name);
        StorePath { full, root_len: root.len() }
    }

    /// Parses a rendered store path. The root is everything before the last `/`.
    pub fn parse(s: &str) -> Result<StorePath, StorePathError> {
        let bad = || StorePathError::NotAStorePath(s.to_string());
        let slash = s.rfind('/').ok_or_else(bad)?;
        let (root, base) = (&s[..slash], &s[slash + 1..]);
        if root.is_empty() || base.len() < HASH_CHARS + 2 || base.as_bytes()[HASH_CHARS] != b'-' {
            return Err(bad());
        }
        Self::from_parts(root, &base[..HASH_CHARS], &base[HASH_CHARS + 1..]).map_err(|_| bad())
    }

    /// Parses a rendered path and checks it lives directly under `root`.
    pub fn parse_in(root: &str, s: &str) -> Result<StorePath, StorePathError> {
        let p = Self::parse(s)?;
        let root = normalize_root(root)?;
        if p.root() != root {
            return Err(StorePathError::WrongRoot { path: s.to_string(), root });
        }
        Ok(p)
    }

    pub fn as_str(&self) -> &str {
        &self.full
    }

    pub fn root(&self) -> &str {
        &self.full[..self.root_len]
    }

    pub fn hash(&self) -> &str {
        &self.full[self.root_len + 1..self.root_len + 1 + HASH_CHARS]
    }

    pub fn name(&self) -> &str {
        &self.full[self.root_len + 2 + HASH_CHARS..]
    }

    /// The `<hash>-<name>` file name inside the store directory.
    pub fn base_name(&self) -> &str {
        &self.full[self.root_len + 1..]
    }

    pub fn is_derivation(&self) -> bool {
        self.name().ends_with(".drv")
    }
}

impl fmt::Display for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.full)
    }
}

impl fmt::Debug for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StorePath({:?})", self.full)
    }
}

impl AsRef<str> for StorePath {
    fn as_ref(&self) -> &str {
        &self.full
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    const ROOT: &str = "/fpm/store";

    fn sha(bytes: &[u8]) -> [u8; 32] {
        Sha256::digest(bytes).into()
    }

    #[test]
    fn deterministic() {
        let d = sha(b"hello");
        let a = StorePath::make(ROOT, PathTag::Source, &d, "greeting").unwrap();
        let b = StorePath::make(ROOT, PathTag::Source, &d, "greeting").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_str(), b.as_str());
    }

    #[test]
    fn golden_source_path() {
        // Frozen from an independent Python computation:
        //   h = sha256(b"source:" + sha256(b"hello").hexdigest() + ":/fpm/store:greeting")[:20]
        // encoded with a separate base32 implementation.
        let p = StorePath::make(ROOT, PathTag::Source, &sha(b"hello"), "greeting").unwrap();
        assert_eq!(p.as_str(), GOLDEN_GREETING);
    }

    const GOLDEN_GREETING: &str = "/fpm/store/2gvh43c4i0z644avnqrcylv567c3nk1m-greeting";

    #[test]
    fn name_changes_hash() {
        let d = sha(b"x");
        let a = StorePath::make(ROOT, PathTag::Derivation, &d, "example-1.0").unwrap();
        let b = StorePath::make(ROOT, PathTag::Derivation, &d, "example-1.1").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn accessors() {
        let p = StorePath::make(ROOT, PathTag::Output, &[7u8; 32], "hello-2.8").unwrap();
        assert_eq!(p.root(), ROOT);
        assert_eq!(p.name(), "hello-2.8");
        assert_eq!(p.hash().len(), 32);
        assert_eq!(p.base_name(), &p.as_str()[ROOT.len() + 1..]);
        assert_eq!(StorePath::parse(p.as_str()).unwrap(), p);
        assert_eq!(StorePath::parse_in("/fpm/store/", p.as_str()).unwrap(), p);
        assert!(StorePath::parse_in("/other", p.as_str()).is_err());
    }

    #[test]
    fn invalid_names() {
        for name in ["", "a b", "a/b", ".hidden", "ünï", "x:y"] {
            assert!(
                matches!(StorePath::make(ROOT, PathTag::Source, &[0; 32], name), Err(StorePathError::InvalidName(_))),
                "{name:?}"
            );
        }
        assert!(StorePath::make(ROOT, PathTag::Source, &[0; 32], "a.b+c-d_e").is_ok());
        assert!(StorePath::make("relative", PathTag::Source, &[0; 32], "x").is_err());
    }

    #[test]
    fn parse_rejects_garbage() {
        for s in [
            "",
            "/fpm/store",
            "/fpm/store/short-name",
            "/fpm/store/eeeeeeeeeeeeeeeeeeeeeeeeeeeeeeee-x",
            "/fpm/store/00000000000000000000000000000000x",
            "/fpm/store/00000000000000000000000000000000-",
            "nostore/00000000000000000000000000000000-a",
        ] {
            assert!(StorePath::parse(s).is_err(), "{s:?}");
        }
    }

    proptest! {
        #[test]
        fn every_input_component_matters(
            content in proptest::collection::vec(any::<u8>(), 0..32),
            flip in 0usize..256,
            name in "[a-z][a-z0-9.+_-]{0,20}",
        ) {
            let d = sha(&content);
            let base = StorePath::make(ROOT, PathTag::Source, &d, &name).unwrap();
            let mut d2 = d;
            d2[flip / 8] ^= 1 << (flip % 8);
            let other = format!("{name}x");
            let variants = [
                StorePath::make(ROOT, PathTag::Source, &d2, &name).unwrap(),
                StorePath::make(ROOT, PathTag::Derivation, &d, &name).unwrap(),
                StorePath::make(ROOT, PathTag::Output, &d, &name).unwrap(),
                StorePath::make("/fpm/storf", PathTag::Source, &d, &name).unwrap(),
                StorePath::make(ROOT, PathTag::Source, &d, &other).unwrap(),
            ];
            for v in variants {
                prop_assert_ne!(v.hash(), base.hash());
            }
        }
    }
}
