use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fpm_core::version;
use regex::Regex;
use walkdir::WalkDir;

use super::{parse_package_file, Package};
use crate::error::{Error, Result};

/// Every known package, by name and by `name@version`.
#[derive(Default)]
pub struct PackageRegistry {
    /// Versions of each name, lowest first.
    by_name: BTreeMap<String, Vec<Arc<Package>>>,
}

impl PackageRegistry {
    /// Loads every `.pkg` file under `dirs`, in file-name order.
    pub fn load(dirs: &[PathBuf]) -> Result<PackageRegistry> {
        let mut r = PackageRegistry::default();
        for dir in dirs {
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "package directory not found"),
                ));
            }
            for entry in WalkDir::new(dir).sort_by_file_name() {
                let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
                if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "pkg") {
                    for (_, p) in parse_package_file(entry.path())? {
                        r.add(p)?;
                    }
                }
            }
        }
        Ok(r)
    }

    /// Parses a colon-separated directory list, as in `FPM_PKG_PATH`.
    pub fn load_path(list: &str) -> Result<PackageRegistry> {
        let dirs: Vec<PathBuf> = list.split(':').filter(|d| !d.is_empty()).map(PathBuf::from).collect();
        PackageRegistry::load(&dirs)
    }

    pub fn from_packages(packages: impl IntoIterator<Item = Arc<Package>>) -> Result<PackageRegistry> {
        let mut r = PackageRegistry::default();
        for p in packages {
            r.add(p)?;
        }
        Ok(r)
    }

    pub fn add(&mut self, p: Arc<Package>) -> Result<()> {
        let versions = self.by_name.entry(p.name.clone()).or_default();
        if versions.iter().any(|q| q.version == p.version) {
            return Err(Error::DuplicatePackage(p.full_name()));
        }
        let at = versions.partition_point(|q| version::compare(&q.version, &p.version).is_lt());
        versions.insert(at, p);
        Ok(())
    }

    /// Looks up `name` (highest version) or `name@version`.
    pub fn lookup(&self, spec: &str) -> Result<Arc<Package>> {
        let (name, ver) = match spec.split_once('@') {
            Some((n, v)) => (n, Some(v)),
            None => (spec, None),
        };
        let versions = self.by_name.get(name).ok_or_else(|| Error::PackageNotFound(spec.to_string()))?;
        let found = match ver {
            Some(v) => versions.iter().find(|p| p.version == v),
            None => versions.last(),
        };
        found.cloned().ok_or_else(|| Error::PackageNotFound(spec.to_string()))
    }

    /// Every package, sorted by name then version.
    pub fn packages(&self) -> impl Iterator<Item = &Arc<Package>> {
        self.by_name.values().flatten()
    }

    /// Packages whose name matches `pattern`, sorted by name then version.
    pub fn search(&self, pattern: Option<&Regex>) -> Vec<Arc<Package>> {
        self.packages().filter(|p| pattern.is_none_or(|re| re.is_match(&p.name))).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.by_name.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Where `p` was defined, relative to `base` when possible.
    pub fn display_location(p: &Package, base: Option<&Path>) -> String {
        let file = base.and_then(|b| p.location.file.strip_prefix(b).ok()).unwrap_or(&p.location.file);
        format!("{}:{}", file.display(), p.location.line)
    }
}
