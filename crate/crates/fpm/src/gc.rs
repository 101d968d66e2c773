//! Garbage collection.
//!
//! Roots are the store paths named by every generation of every profile
//! and by the symlinks in `<state>/gcroots/`. Everything reachable from
//! them through the references recorded at registration is live; every
//! other valid path is deleted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use fpm_core::manifest::Manifest;
use fpm_core::StorePath;
use walkdir::WalkDir;

use crate::error::{Error, IoContext, Result};
use crate::fsutil;
use crate::profiles::profiles_dir;
use crate::store::Store;

/// Directory of explicit root links.
pub fn gcroots_dir(state_dir: &Path) -> PathBuf {
    state_dir.join("gcroots")
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RootSet {
    /// Sorted and free of duplicates.
    pub paths: Vec<StorePath>,
    pub warnings: Vec<String>,
}

/// Finds the roots under `state_dir`.
pub fn collect_roots(store: &Store, state_dir: &Path) -> Result<RootSet> {
    let mut roots = BTreeSet::new();
    let mut warnings = Vec::new();

    let profiles = profiles_dir(state_dir);
    for user in read_dir_sorted(&profiles)? {
        if !user.is_dir() {
            continue;
        }
        for entry in read_dir_sorted(&user)? {
            let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "profile" {
                if fs::metadata(&entry).is_err() {
                    warnings.push(format!("{}: link to a missing generation, skipped", entry.display()));
                }
            } else if name.starts_with("generation-") && entry.is_dir() {
                generation_roots(store, &entry, &mut roots, &mut warnings)?;
            }
        }
    }

    let gcroots = gcroots_dir(state_dir);
    if gcroots.is_dir() {
        for entry in WalkDir::new(&gcroots).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::io(&gcroots, e.into()))?;
            if entry.file_type().is_dir() {
                continue;
            }
            let link = entry.path();
            match root_target(store, link) {
                Some(p) => {
                    roots.insert(p);
                }
                None => warnings.push(format!("{}: dangling or outside the store, skipped", link.display())),
            }
        }
    }

    Ok(RootSet { paths: roots.into_iter().collect(), warnings })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        out.push(entry.at(dir)?.path());
    }
    out.sort();
    Ok(out)
}

/// The valid store path a link resolves into, if any.
fn root_target(store: &Store, link: &Path) -> Option<StorePath> {
    let target = match fs::read_link(link) {
        Ok(t) if t.is_absolute() => t,
        Ok(t) => link.parent()?.join(t),
        Err(_) => link.to_path_buf(),
    };
    let p = store.containing_path(&target)?;
    (fs::symlink_metadata(store.real_path(&p)).is_ok() && store.is_valid(&p).unwrap_or(false)).then_some(p)
}

/// Roots of one generation: its manifest entries and every store path its
/// symlink tree points into.
fn generation_roots(
    store: &Store,
    dir: &Path,
    roots: &mut BTreeSet<StorePath>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let manifest_path = dir.join("manifest");
    match fs::read_to_string(&manifest_path) {
        Ok(text) => match Manifest::parse(&text) {
            Ok(m) => {
                for e in m.entries() {
                    roots.extend(e.all_outputs().cloned());
                }
            }
            Err(e) => warnings.push(format!("{}: {e}", manifest_path.display())),
        },
        Err(e) => warnings.push(format!("{}: {e}", manifest_path.display())),
    }
    for entry in WalkDir::new(dir).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if !entry.path_is_symlink() {
            continue;
        }
        match root_target(store, entry.path()) {
            Some(p) => {
                roots.insert(p);
            }
            None => warnings.push(format!("{}: dangling link, skipped", entry.path().display())),
        }
    }
    Ok(())
}

/// Paths reachable from `roots` through `refs`.
pub fn live_set(refs: &BTreeMap<StorePath, Vec<StorePath>>, roots: &[StorePath]) -> BTreeSet<StorePath> {
    let mut live = BTreeSet::new();
    let mut todo: Vec<&StorePath> = roots.iter().collect();
    while let Some(p) = todo.pop() {
        if live.insert(p.clone()) {
            if let Some(rs) = refs.get(p) {
                todo.extend(rs.iter().filter(|r| !live.contains(*r)));
            }
        }
    }
    live
}

#[derive(Debug, Default)]
pub struct Report {
    pub dry_run: bool,
    /// Valid paths deleted (or, in a dry run, that would be).
    pub deleted: Vec<StorePath>,
    /// Unregistered leftovers removed from the store directory.
    pub strays: Vec<String>,
    pub freed: u64,
    pub kept: usize,
    /// Paths that could not be deleted, with the reason. They stay valid.
    pub failures: Vec<(StorePath, String)>,
    pub warnings: Vec<String>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.deleted.len() + self.strays.len();
        if self.dry_run {
            write!(f, "would delete {n} paths, free {} bytes", self.freed)
        } else {
            write!(f, "deleted {n} paths, freed {} bytes", self.freed)
        }
    }
}

/// Deletes every valid path not reachable from the roots.
///
/// Runs with the store lock held and excludes builds and transactions for
/// its whole duration.
pub fn collect_garbage(store: &Store, state_dir: &Path, dry_run: bool) -> Result<Report> {
    let _exclusive = store.gc_lock(true)?;
    let guard = store.lock()?;
    let result = collect_locked(store, state_dir, dry_run);
    let released = guard.release();
    let report = result?;
    released?;
    Ok(report)
}

fn collect_locked(store: &Store, state_dir: &Path, dry_run: bool) -> Result<Report> {
    let roots = collect_roots(store, state_dir)?;
    for w in &roots.warnings {
        log::warn!("{w}");
    }
    let refs = store.registry_snapshot()?;
    let live = live_set(&refs, &roots.paths);
    let mut report = Report {
        dry_run,
        kept: refs.keys().filter(|p| live.contains(*p)).count(),
        warnings: roots.warnings,
        ..Report::default()
    };

    // Referrers go before what they refer to, so a failed deletion never
    // leaves a valid path pointing at a deleted one.
    let dead: BTreeSet<&StorePath> = refs.keys().filter(|p| !live.contains(*p)).collect();
    let mut referrers: BTreeMap<&StorePath, Vec<&StorePath>> = BTreeMap::new();
    for p in &dead {
        for r in &refs[*p] {
            if r != *p && dead.contains(r) {
                referrers.entry(r).or_default().push(p);
            }
        }
    }
    let mut pending: BTreeMap<&StorePath, usize> =
        dead.iter().map(|p| (*p, referrers.get(p).map_or(0, Vec::len))).collect();
    let mut ready: Vec<&StorePath> = pending.iter().filter(|(_, n)| **n == 0).map(|(p, _)| *p).collect();
    ready.reverse();
    let mut blocked: BTreeSet<&StorePath> = BTreeSet::new();
    while let Some(p) = ready.pop() {
        let blocked_by = referrers.get(p).and_then(|rs| rs.iter().find(|r| blocked.contains(**r)));
        if let Some(r) = blocked_by {
            report.failures.push((p.clone(), format!("still referenced by {r}")));
            blocked.insert(p);
        } else if dry_run {
            report.freed += fsutil::tree_size(&store.real_path(p));
            report.deleted.push(p.clone());
        } else {
            match store.delete_path(p) {
                Ok(size) => {
                    report.freed += size;
                    report.deleted.push(p.clone());
                }
                Err(e) => {
                    log::warn!("cannot delete {p}: {e}");
                    report.failures.push((p.clone(), e.to_string()));
                    blocked.insert(p);
                }
            }
        }
        for r in &refs[p] {
            if let Some(n) = pending.get_mut(r) {
                if r != p {
                    *n -= 1;
                    if *n == 0 {
                        ready.push(r);
                    }
                }
            }
        }
    }
    report.kept += report.failures.len();

    // Leftovers of interrupted additions or builds.
    let valid: BTreeSet<&str> = refs.keys().map(|p| p.base_name()).collect();
    for name in store.directory_entries()? {
        if valid.contains(name.as_str()) {
            continue;
        }
        let path = store.root().join(&name);
        let size = fsutil::tree_size(&path);
        if !dry_run {
            if let Err(e) = fsutil::remove_tree(&path) {
                report.warnings.push(format!("cannot remove {}: {e}", path.display()));
                continue;
            }
        }
        report.freed += size;
        report.strays.push(name);
    }
    Ok(report)
}
