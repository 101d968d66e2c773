//! Profile manifests.
//!
//! A manifest lists what a profile generation contains, one entry per line:
//!
//! ```text
//! name<TAB>version<TAB>output<TAB>propagated,outputs
//! ```
//!
//! Entries keep the order in which they were added; later entries win file
//! conflicts when the generation is materialized.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::store_path::{StorePath, StorePathError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("manifest line {line}: duplicate entry {name:?}")]
    DuplicateName { line: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ManifestEntry {
    pub name: String,
    pub version: String,
    pub output: StorePath,
    pub propagated: Vec<StorePath>,
}

impl ManifestEntry {
    /// The output followed by the propagated outputs.
    pub fn all_outputs(&self) -> impl Iterator<Item = &StorePath> {
        core::iter::once(&self.output).chain(self.propagated.iter())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Adds `entry`, dropping any entry of the same name first.
    pub fn install(&mut self, entry: ManifestEntry) {
        self.remove(&entry.name);
        self.entries.push(entry);
    }

    pub fn remove(&mut self, name: &str) -> Option<ManifestEntry> {
        let i = self.entries.iter().position(|e| e.name == name)?;
        Some(self.entries.remove(i))
    }

    /// Replaces the entry called `entry.name` where it stands, or appends.
    pub fn replace(&mut self, entry: ManifestEntry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn parse(text: &str) -> Result<Manifest, ManifestError> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let bad = |message: &str| ManifestError::Malformed { line: line_no, message: message.to_string() };
            let path = |s: &str| StorePath::parse(s).map_err(|e: StorePathError| bad(&e.to_string()));
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, version, output, propagated] = fields[..] else {
                return Err(bad("expected four tab-separated fields"));
            };
            if name.is_empty() || version.is_empty() {
                return Err(bad("empty name or version"));
            }
            if m.contains(name) {
                return Err(ManifestError::DuplicateName { line: line_no, name: name.to_string() });
            }
            let propagated = if propagated.is_empty() {
                Vec::new()
            } else {
                propagated.split(',').map(path).collect::<Result<_, _>>()?
            };
            m.entries.push(ManifestEntry {
                name: name.to_string(),
                version: version.to_string(),
                output: path(output)?,
                propagated,
            });
        }
        Ok(m)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            write!(f, "{}\t{}\t{}\t", e.name, e.version, e.output)?;
            for (i, p) in e.propagated.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{p}")?;
            }
            f.write_str("\n")?;
        }
        Ok(())
    }
}
