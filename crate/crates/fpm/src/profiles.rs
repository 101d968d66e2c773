//! Per-user profiles.
//!
//! A profile lives in `<state>/profiles/<user>/`. Each generation is a
//! directory `generation-<N>` holding a `manifest` file and a tree of
//! symlinks into the store; `profile` is a symlink naming the current one.
//! Generation 0 is the empty profile and has no directory: a missing link
//! means generation 0 is current.
//!
//! A transaction builds everything first, writes the new generation under
//! a temporary name, renames it into place and finally swaps the link, so
//! the link only ever names complete generations.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Instant, SystemTime};

use fpm_core::manifest::{Manifest, ManifestEntry};
use fpm_core::StorePath;
use regex::Regex;

use crate::engine::Engine;
use crate::error::{Error, IoContext, Result};
use crate::fsutil;
use crate::packages::{Compiler, Package, PackageRegistry};
use crate::store::Store;

const LINK: &str = "profile";
const MANIFEST: &str = "manifest";
const GENERATION_PREFIX: &str = "generation-";

/// One change requested of a profile.
#[derive(Debug, Clone)]
pub enum Action {
    /// Install `name` or `name@version`, replacing an entry of that name.
    Install(String),
    /// Remove an installed entry.
    Remove(String),
    /// Re-resolve every installed name matching the pattern, or all names.
    Upgrade(Option<Regex>),
}

#[derive(Debug)]
pub enum Outcome {
    /// The profile moved to a new generation.
    Committed { generation: u64, warnings: Vec<String> },
    /// The transaction would not change the manifest; no generation made.
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub number: u64,
    pub dir: Option<PathBuf>,
    pub manifest: Manifest,
    pub created: Option<SystemTime>,
}

/// Counts the file-system steps of generation materialization and can
/// make the n-th one fail.
#[derive(Debug, Default)]
pub struct Faults {
    fail_at: Option<usize>,
    steps: AtomicUsize,
}

impl Faults {
    pub fn fail_at(step: usize) -> Faults {
        Faults { fail_at: Some(step), steps: AtomicUsize::new(0) }
    }

    pub fn steps(&self) -> usize {
        self.steps.load(Ordering::SeqCst)
    }

    fn step(&self, what: &str) -> Result<()> {
        let n = self.steps.fetch_add(1, Ordering::SeqCst);
        if self.fail_at == Some(n) {
            return Err(Error::FaultInjected(format!("step {n} ({what})")));
        }
        Ok(())
    }
}

pub struct Profile {
    user: String,
    dir: PathBuf,
    store: Arc<Store>,
    faults: Faults,
}

/// Directory holding every user's profile.
pub fn profiles_dir(state_dir: &Path) -> PathBuf {
    state_dir.join("profiles")
}

fn generation_name(n: u64) -> String {
    format!("{GENERATION_PREFIX}{n}")
}

fn parse_generation_name(name: &str) -> Option<u64> {
    let n = name.strip_prefix(GENERATION_PREFIX)?;
    if n.starts_with('0') || n.is_empty() {
        return None;
    }
    n.parse().ok()
}

impl Profile {
    pub fn open(store: Arc<Store>, state_dir: &Path, user: &str) -> Result<Profile> {
        if user.is_empty() || user.starts_with('.') || user.contains('/') {
            return Err(Error::Usage(format!("invalid user name {user:?}")));
        }
        let dir = profiles_dir(state_dir).join(user);
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(Profile { user: user.to_string(), dir, store, faults: Faults::default() })
    }

    pub fn with_faults(mut self, faults: Faults) -> Profile {
        self.faults = faults;
        self
    }

    pub fn faults(&self) -> &Faults {
        &self.faults
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn link(&self) -> PathBuf {
        self.dir.join(LINK)
    }

    /// Numbers of the existing generation directories, ascending.
    pub fn generations(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).at(&self.dir)? {
            let entry = entry.at(&self.dir)?;
            if let Some(n) = entry.file_name().to_str().and_then(parse_generation_name) {
                out.push(n);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// The generation the link names, 0 when there is no link.
    pub fn current(&self) -> Result<u64> {
        let link = self.link();
        match fs::read_link(&link) {
            Ok(target) => target
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(parse_generation_name)
                .ok_or_else(|| Error::Corrupt(format!("{} points to {}", link.display(), target.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(Error::io(link, e)),
        }
    }

    pub fn generation_dir(&self, n: u64) -> PathBuf {
        self.dir.join(generation_name(n))
    }

    pub fn generation(&self, n: u64) -> Result<Generation> {
        if n == 0 {
            return Ok(Generation { number: 0, dir: None, manifest: Manifest::new(), created: None });
        }
        let dir = self.generation_dir(n);
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        let manifest = Manifest::parse(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        let created = fs::metadata(&path).and_then(|m| m.modified()).ok();
        Ok(Generation { number: n, dir: Some(dir), manifest, created })
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(self.generation(self.current()?)?.manifest)
    }

    /// Installed entries whose name matches `pattern`, by name then version.
    pub fn list_installed(&self, pattern: Option<&Regex>) -> Result<Vec<ManifestEntry>> {
        let mut rows: Vec<ManifestEntry> = self
            .manifest()?
            .entries()
            .iter()
            .filter(|e| pattern.is_none_or(|re| re.is_match(&e.name)))
            .cloned()
            .collect();
        rows.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| fpm_core::version::compare(&a.version, &b.version)));
        Ok(rows)
    }

    fn lock(&self) -> Result<File> {
        let path = self.dir.join(".lock");
        let file = File::options().create(true).truncate(false).write(true).open(&path).at(&path)?;
        let timeout = self.store.lock_timeout();
        let deadline = Instant::now() + timeout;
        loop {
            match file.try_lock() {
                Ok(()) => return Ok(file),
                Err(fs::TryLockError::WouldBlock) if Instant::now() < deadline => {
                    thread::sleep(std::time::Duration::from_millis(10))
                }
                Err(fs::TryLockError::WouldBlock) => return Err(Error::StoreBusy { path, timeout }),
                Err(fs::TryLockError::Error(e)) => return Err(Error::io(&path, e)),
            }
        }
    }

    /// Applies `actions` in order as a single transaction.
    pub fn transact(&self, compiler: &Compiler, engine: &Engine, actions: &[Action]) -> Result<Outcome> {
        if actions.is_empty() {
            return Err(Error::EmptyTransaction);
        }
        let _profile_lock = self.lock()?;
        // Keeps the collector away until the new generation roots the builds.
        let _gc_guard = self.store.build_guard()?;
        let current = self.current()?;
        let old = self.generation(current)?.manifest;
        let registry = compiler.registry();
        let system = engine.system();

        let mut next = old.clone();
        let mut drvs = Vec::new();
        for action in actions {
            match action {
                Action::Install(spec) => {
                    let p = registry.lookup(spec)?;
                    next.replace(entry_for(compiler, system, &p, &mut drvs)?);
                }
                Action::Remove(name) => {
                    if next.remove(name).is_none() {
                        return Err(Error::NotInstalled(name.clone()));
                    }
                }
                Action::Upgrade(pattern) => {
                    let names: Vec<String> = next
                        .entries()
                        .iter()
                        .filter(|e| pattern.as_ref().is_none_or(|re| re.is_match(&e.name)))
                        .map(|e| e.name.clone())
                        .collect();
                    for name in names {
                        match registry.lookup(&name) {
                            Ok(p) => next.replace(entry_for(compiler, system, &p, &mut drvs)?),
                            Err(Error::PackageNotFound(_)) => {
                                log::warn!("{name} is no longer available; keeping the installed version")
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        }
        if next == old {
            return Ok(Outcome::Unchanged);
        }
        // Entries installed and removed again in the same transaction are skipped.
        let needed: BTreeSet<&StorePath> = next.entries().iter().flat_map(|e| e.all_outputs()).collect();
        let drvs: Vec<StorePath> =
            drvs.into_iter().filter(|(_, out)| needed.contains(out)).map(|(drv, _)| drv).collect();
        for r in engine.build_derivations(&drvs)? {
            if let Some(e) = r.error {
                return Err(e);
            }
        }

        let number = self.generations()?.last().copied().unwrap_or(0).max(current) + 1;
        let warnings = self.materialize(number, &next)?;
        Ok(Outcome::Committed { generation: number, warnings })
    }

    /// Writes generation `number` for `manifest` and points the link at it.
    /// On failure nothing is left behind and the link is untouched.
    fn materialize(&self, number: u64, manifest: &Manifest) -> Result<Vec<String>> {
        let final_dir = self.generation_dir(number);
        let tmp = self.dir.join(format!(".{}.tmp", generation_name(number)));
        let tmp_link = self.dir.join(format!(".{LINK}.tmp"));
        let result = (|| {
            fsutil::remove_tree(&tmp).at(&tmp)?;
            self.faults.step("create generation directory")?;
            fs::create_dir(&tmp).at(&tmp)?;
            let mut warnings = Vec::new();
            for entry in manifest.entries() {
                for out in entry.all_outputs() {
                    self.union_into(&tmp, out, &mut warnings)?;
                }
            }
            self.faults.step("write manifest")?;
            let mpath = tmp.join(MANIFEST);
            fs::write(&mpath, manifest.to_string()).at(&mpath)?;
            self.faults.step("seal generation")?;
            fsutil::make_read_only(&tmp).at(&tmp)?;
            self.faults.step("rename generation into place")?;
            fs::rename(&tmp, &final_dir).at(&final_dir)?;
            self.faults.step("create new link")?;
            let _ = fs::remove_file(&tmp_link);
            symlink(generation_name(number), &tmp_link).at(&tmp_link)?;
            self.faults.step("switch link")?;
            fs::rename(&tmp_link, self.link()).at(self.link())?;
            Ok(warnings)
        })();
        if result.is_err() {
            let _ = fsutil::remove_tree(&tmp);
            let _ = fs::remove_file(&tmp_link);
            let links_to_new = fs::read_link(self.link()).is_ok_and(|t| t == Path::new(&generation_name(number)));
            if !links_to_new {
                let _ = fsutil::remove_tree(&final_dir);
            }
        }
        result
    }

    /// Links every file of store path `out` into `gen`, creating real
    /// directories so several outputs can share them.
    fn union_into(&self, gen: &Path, out: &StorePath, warnings: &mut Vec<String>) -> Result<()> {
        let real = self.store.real_path(out);
        let meta = fs::symlink_metadata(&real).at(&real)?;
        if !meta.is_dir() {
            return self.link_file(&gen.join(out.name()), &real, warnings);
        }
        for entry in walkdir::WalkDir::new(&real).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::io(&real, e.into()))?;
            let rel = entry.path().strip_prefix(&real).expect("walkdir yields paths under its root");
            let dst = gen.join(rel);
            if entry.file_type().is_dir() {
                match fs::symlink_metadata(&dst) {
                    Ok(m) if m.is_dir() => {}
                    Ok(_) => {
                        warnings.push(format!("{}: directory from {out} replaces a file", rel.display()));
                        self.faults.step("replace conflicting file")?;
                        fs::remove_file(&dst).at(&dst)?;
                        self.faults.step("create directory")?;
                        fs::create_dir(&dst).at(&dst)?;
                    }
                    Err(_) => {
                        self.faults.step("create directory")?;
                        fs::create_dir(&dst).at(&dst)?;
                    }
                }
            } else {
                self.link_file(&dst, entry.path(), warnings)?;
            }
        }
        Ok(())
    }

    fn link_file(&self, dst: &Path, target: &Path, warnings: &mut Vec<String>) -> Result<()> {
        match fs::symlink_metadata(dst) {
            Ok(m) => {
                if m.file_type().is_symlink() && fs::read_link(dst).is_ok_and(|t| t == target) {
                    return Ok(());
                }
                let msg = format!("{}: {} replaces an earlier entry", dst.display(), target.display());
                log::warn!("{msg}");
                warnings.push(msg);
                self.faults.step("replace conflicting entry")?;
                fsutil::remove_tree(dst).at(dst)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(dst, e)),
        }
        self.faults.step("link file")?;
        symlink(target, dst).at(dst)
    }

    /// Points the link at the newest generation below the current one, or
    /// at the empty generation 0.
    pub fn roll_back(&self) -> Result<u64> {
        let _lock = self.lock()?;
        let current = self.current()?;
        if current == 0 {
            return Err(Error::NothingToRollBack);
        }
        let target = self.generations()?.into_iter().rfind(|&n| n < current).unwrap_or(0);
        self.switch_to(target)?;
        Ok(target)
    }

    /// Points the link at generation `n`, which must exist (or be 0).
    pub fn switch_to(&self, n: u64) -> Result<()> {
        let link = self.link();
        if n == 0 {
            return match fs::remove_file(&link) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(Error::io(link, e)),
                _ => Ok(()),
            };
        }
        if !self.generation_dir(n).is_dir() {
            return Err(Error::Usage(format!("generation {n} does not exist")));
        }
        let tmp_link = self.dir.join(format!(".{LINK}.tmp"));
        let _ = fs::remove_file(&tmp_link);
        symlink(generation_name(n), &tmp_link).at(&tmp_link)?;
        fs::rename(&tmp_link, &link).at(&link)
    }

    /// Deletes every generation but the current one, so that the
    /// collector may reclaim what only they referred to.
    pub fn delete_generations(&self) -> Result<Vec<u64>> {
        let _lock = self.lock()?;
        let current = self.current()?;
        let mut deleted = Vec::new();
        for n in self.generations()? {
            if n != current {
                let dir = self.generation_dir(n);
                fsutil::remove_tree(&dir).at(&dir)?;
                deleted.push(n);
            }
        }
        Ok(deleted)
    }
}

/// The manifest entry for `p`, queueing the derivations it needs.
fn entry_for(
    compiler: &Compiler,
    system: &str,
    p: &Arc<Package>,
    drvs: &mut Vec<(StorePath, StorePath)>,
) -> Result<ManifestEntry> {
    let (drv, d) = compiler.package_derivation(p, system)?;
    drvs.push((drv, d.output().clone()));
    let mut propagated = Vec::new();
    for q in propagated_closure(p, compiler.registry())? {
        let (qdrv, qd) = compiler.package_derivation(&q, system)?;
        drvs.push((qdrv, qd.output().clone()));
        propagated.push(qd.output().clone());
    }
    Ok(ManifestEntry { name: p.name.clone(), version: p.version.clone(), output: d.output().clone(), propagated })
}

/// Propagated inputs of `p` and, recursively, theirs; each once.
fn propagated_closure(p: &Package, registry: &PackageRegistry) -> Result<Vec<Arc<Package>>> {
    let mut out: Vec<Arc<Package>> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut todo: Vec<Arc<Package>> =
        p.propagated_inputs.iter().map(|(_, r)| r.resolve(registry)).collect::<Result<_>>()?;
    todo.reverse();
    while let Some(q) = todo.pop() {
        if !seen.insert(q.id()) {
            continue;
        }
        for (_, r) in q.propagated_inputs.iter().rev() {
            todo.push(r.resolve(registry)?);
        }
        out.push(q);
    }
    Ok(out)
}

/// Packages matching `pattern`, with the file and line they come from.
pub fn list_available(registry: &PackageRegistry, pattern: Option<&Regex>) -> Vec<(String, String, String)> {
    registry
        .search(pattern)
        .iter()
        .map(|p| (p.name.clone(), p.version.clone(), PackageRegistry::display_location(p, None)))
        .collect()
}
