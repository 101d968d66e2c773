//! The store: an append-mostly directory of immutable, content-named paths.
//!
//! Every mutation happens under an exclusive advisory lock on
//! `<root>/.lock`. The lock is reentrant within a thread. The set of valid
//! paths and their references lives in `<root>/.registry`, one line per path:
//!
//! ```text
//! /store/…-hello-2.8<TAB>/store/…-gawk-4.0,/store/…-glibc
//! ```
//!
//! The registry is cached in memory and written back, atomically, when the
//! outermost lock is released.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, TryLockError};
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::{self, ThreadId};
use std::time::{Duration, Instant};

use fpm_core::store_path::normalize_root;
use fpm_core::{Derivation, PathTag, StorePath};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::fsutil;

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(60);
const POLL: Duration = Duration::from_millis(5);

/// Names inside the store directory that are bookkeeping, not store paths.
pub(crate) fn is_bookkeeping(name: &str) -> bool {
    name.starts_with('.')
}

#[derive(Default)]
struct Registry {
    entries: BTreeMap<StorePath, Vec<StorePath>>,
    stamp: Option<(u64, i64, i64, u64)>,
    dirty: bool,
}

#[derive(Default)]
struct LockInner {
    owner: Option<ThreadId>,
    depth: usize,
    file: Option<File>,
}

pub struct Store {
    root: PathBuf,
    root_str: String,
    lock: Mutex<LockInner>,
    lock_released: Condvar,
    registry: Mutex<Registry>,
    lock_timeout: Mutex<Duration>,
    copies: AtomicU64,
    pub(crate) drv_memo: Mutex<HashMap<[u8; 32], StorePath>>,
    pub(crate) drv_cache: Mutex<HashMap<StorePath, Arc<Derivation>>>,
    pub(crate) drv_writes: AtomicU64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

fn open_stores() -> &'static Mutex<HashMap<PathBuf, Arc<Store>>> {
    static STORES: OnceLock<Mutex<HashMap<PathBuf, Arc<Store>>>> = OnceLock::new();
    STORES.get_or_init(Default::default)
}

impl Store {
    /// Opens (creating if needed) the store rooted at `root`. Opening the
    /// same directory twice in one process returns the same instance, so
    /// locks and caches are shared.
    pub fn open(root: impl AsRef<Path>) -> Result<Arc<Store>> {
        let root = root.as_ref();
        fs::create_dir_all(root).at(root)?;
        let root = fs::canonicalize(root).at(root)?;
        let root_str =
            root.to_str().ok_or_else(|| Error::Usage(format!("store root {} is not UTF-8", root.display())))?;
        let root_str = normalize_root(root_str)?;
        let mut stores = open_stores().lock().unwrap();
        if let Some(s) = stores.get(&root) {
            return Ok(s.clone());
        }
        let store = Arc::new(Store {
            root: root.clone(),
            root_str,
            lock: Mutex::new(LockInner::default()),
            lock_released: Condvar::new(),
            registry: Mutex::new(Registry::default()),
            lock_timeout: Mutex::new(DEFAULT_LOCK_TIMEOUT),
            copies: AtomicU64::new(0),
            drv_memo: Mutex::new(HashMap::new()),
            drv_cache: Mutex::new(HashMap::new()),
            drv_writes: AtomicU64::new(0),
        });
        stores.insert(root, store.clone());
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn root_str(&self) -> &str {
        &self.root_str
    }

    pub fn set_lock_timeout(&self, timeout: Duration) {
        *self.lock_timeout.lock().unwrap() = timeout;
    }

    pub fn lock_timeout(&self) -> Duration {
        *self.lock_timeout.lock().unwrap()
    }

    /// File-system location of a store path.
    pub fn real_path(&self, p: &StorePath) -> PathBuf {
        self.root.join(p.base_name())
    }

    pub fn make_path(&self, tag: PathTag, digest: &[u8; 32], name: &str) -> Result<StorePath> {
        Ok(StorePath::make(&self.root_str, tag, digest, name)?)
    }

    /// Parses a rendered path and checks it belongs to this store.
    pub fn parse_path(&self, s: &str) -> Result<StorePath> {
        Ok(StorePath::parse_in(&self.root_str, s)?)
    }

    /// Maps a file-system path inside the store to the store path containing it.
    pub fn containing_path(&self, p: &Path) -> Option<StorePath> {
        let rel = p.strip_prefix(&self.root).ok()?;
        let first = rel.components().next()?;
        let name = first.as_os_str().to_str()?;
        self.parse_path(&format!("{}/{}", self.root_str, name)).ok()
    }

    /// Number of times content was actually copied into the store.
    pub fn copy_count(&self) -> u64 {
        self.copies.load(Ordering::SeqCst)
    }

    // Locking

    /// Runs `action` with the store lock held.
    pub fn with_lock<T>(&self, action: impl FnOnce() -> Result<T>) -> Result<T> {
        let guard = self.lock()?;
        let result = action();
        let released = guard.release();
        let value = result?;
        released?;
        Ok(value)
    }

    /// Takes the store lock. It is released when the guard is dropped.
    pub fn lock(&self) -> Result<StoreLock<'_>> {
        let me = thread::current().id();
        let timeout = self.lock_timeout();
        let deadline = Instant::now() + timeout;
        let lock_path = self.root.join(".lock");
        let mut inner = self.lock.lock().unwrap();
        loop {
            match inner.owner {
                Some(owner) if owner == me => {
                    inner.depth += 1;
                    return Ok(StoreLock { store: self, released: false });
                }
                None => break,
                Some(_) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(Error::StoreBusy { path: lock_path, timeout });
                    }
                    inner = self.lock_released.wait_timeout(inner, deadline - now).unwrap().0;
                }
            }
        }
        inner.owner = Some(me);
        inner.depth = 1;
        drop(inner);

        let acquired = (|| {
            let file = File::options().create(true).truncate(false).write(true).open(&lock_path).at(&lock_path)?;
            loop {
                match file.try_lock() {
                    Ok(()) => return Ok(file),
                    Err(TryLockError::WouldBlock) => {
                        if Instant::now() >= deadline {
                            return Err(Error::StoreBusy { path: lock_path.clone(), timeout });
                        }
                        thread::sleep(POLL);
                    }
                    Err(TryLockError::Error(e)) => return Err(Error::io(&lock_path, e)),
                }
            }
        })();
        let mut inner = self.lock.lock().unwrap();
        match acquired {
            Ok(file) => {
                inner.file = Some(file);
                Ok(StoreLock { store: self, released: false })
            }
            Err(e) => {
                inner.owner = None;
                inner.depth = 0;
                self.lock_released.notify_all();
                Err(e)
            }
        }
    }

    /// Whether the calling thread holds the store lock.
    pub fn holds_lock(&self) -> bool {
        self.lock.lock().unwrap().owner == Some(thread::current().id())
    }

    fn unlock(&self) -> Result<()> {
        let mut inner = self.lock.lock().unwrap();
        debug_assert_eq!(inner.owner, Some(thread::current().id()));
        inner.depth -= 1;
        if inner.depth > 0 {
            return Ok(());
        }
        let flushed = self.flush_registry();
        if let Some(file) = inner.file.take() {
            let _ = file.unlock();
        }
        inner.owner = None;
        self.lock_released.notify_all();
        flushed
    }

    /// Shared lock held for the duration of builds and transactions. The
    /// garbage collector takes it exclusively, so it never runs while paths
    /// are being produced or installed.
    pub fn build_guard(&self) -> Result<File> {
        self.gc_lock(false)
    }

    pub(crate) fn gc_lock(&self, exclusive: bool) -> Result<File> {
        let path = self.root.join(".gc.lock");
        let file = File::options().create(true).truncate(false).write(true).open(&path).at(&path)?;
        let timeout = self.lock_timeout();
        let deadline = Instant::now() + timeout;
        loop {
            let r = if exclusive { file.try_lock() } else { file.try_lock_shared() };
            match r {
                Ok(()) => return Ok(file),
                Err(TryLockError::WouldBlock) if Instant::now() < deadline => thread::sleep(POLL),
                Err(TryLockError::WouldBlock) => return Err(Error::StoreBusy { path, timeout }),
                Err(TryLockError::Error(e)) => return Err(Error::io(&path, e)),
            }
        }
    }

    // Registry

    fn registry_path(&self) -> PathBuf {
        self.root.join(".registry")
    }

    fn file_stamp(path: &Path) -> Option<(u64, i64, i64, u64)> {
        fs::metadata(path).ok().map(|m| (m.ino(), m.mtime(), m.mtime_nsec(), m.len()))
    }

    /// Runs `f` on an up-to-date view of the registry.
    fn with_registry<T>(&self, f: impl FnOnce(&mut Registry) -> Result<T>) -> Result<T> {
        let mut reg = self.registry.lock().unwrap();
        if !reg.dirty {
            let path = self.registry_path();
            let stamp = Self::file_stamp(&path);
            if stamp != reg.stamp || (stamp.is_none() && !reg.entries.is_empty()) {
                reg.entries = match stamp {
                    Some(_) => self.read_registry(&path)?,
                    None => BTreeMap::new(),
                };
                reg.stamp = stamp;
            }
        }
        f(&mut reg)
    }

    fn read_registry(&self, path: &Path) -> Result<BTreeMap<StorePath, Vec<StorePath>>> {
        let text = fs::read_to_string(path).at(path)?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Corrupt(format!("{}:{}: malformed entry", path.display(), i + 1));
            let (p, refs) = line.split_once('\t').ok_or_else(bad)?;
            let p = self.parse_path(p).map_err(|_| bad())?;
            let refs = if refs.is_empty() {
                Vec::new()
            } else {
                refs.split(',').map(|r| self.parse_path(r).map_err(|_| bad())).collect::<Result<_>>()?
            };
            entries.insert(p, refs);
        }
        Ok(entries)
    }

    fn flush_registry(&self) -> Result<()> {
        let mut reg = self.registry.lock().unwrap();
        if !reg.dirty {
            return Ok(());
        }
        let mut text = String::new();
        for (p, refs) in &reg.entries {
            text.push_str(p.as_str());
            text.push('\t');
            for (i, r) in refs.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                text.push_str(r.as_str());
            }
            text.push('\n');
        }
        let path = self.registry_path();
        fsutil::write_atomic(&path, text.as_bytes()).at(&path)?;
        reg.stamp = Self::file_stamp(&path);
        reg.dirty = false;
        Ok(())
    }

    pub fn is_valid(&self, p: &StorePath) -> Result<bool> {
        self.with_registry(|r| Ok(r.entries.contains_key(p)))
    }

    /// References recorded when `p` was registered, or `None` if `p` is not valid.
    pub fn references(&self, p: &StorePath) -> Result<Option<Vec<StorePath>>> {
        self.with_registry(|r| Ok(r.entries.get(p).cloned()))
    }

    pub fn valid_paths(&self) -> Result<Vec<StorePath>> {
        self.with_registry(|r| Ok(r.entries.keys().cloned().collect()))
    }

    /// Snapshot of the whole registry.
    pub fn registry_snapshot(&self) -> Result<BTreeMap<StorePath, Vec<StorePath>>> {
        self.with_registry(|r| Ok(r.entries.clone()))
    }

    /// Paths reachable from `roots` through recorded references.
    pub fn closure(&self, roots: impl IntoIterator<Item = StorePath>) -> Result<BTreeSet<StorePath>> {
        self.with_registry(|r| {
            let mut seen = BTreeSet::new();
            let mut stack: Vec<StorePath> = roots.into_iter().collect();
            while let Some(p) = stack.pop() {
                if let Some(refs) = r.entries.get(&p) {
                    stack.extend(refs.iter().filter(|x| !seen.contains(*x)).cloned());
                }
                seen.insert(p);
            }
            Ok(seen)
        })
    }

    /// Marks `path` valid with the given references and write-protects it.
    /// Registering an already valid path keeps its original references.
    pub fn register_valid(&self, path: &StorePath, references: &[StorePath]) -> Result<()> {
        self.with_lock(|| {
            let real = self.real_path(path);
            if fs::symlink_metadata(&real).is_err() {
                return Err(Error::ClosureViolation(format!("{path} does not exist")));
            }
            self.with_registry(|reg| {
                if reg.entries.contains_key(path) {
                    return Ok(());
                }
                let mut refs: Vec<StorePath> = references.to_vec();
                refs.sort();
                refs.dedup();
                for r in &refs {
                    if r != path && !reg.entries.contains_key(r) {
                        return Err(Error::ClosureViolation(format!("{path} refers to {r}, which is not valid")));
                    }
                }
                fsutil::make_read_only(&real).at(&real)?;
                reg.entries.insert(path.clone(), refs);
                reg.dirty = true;
                Ok(())
            })
        })
    }

    /// Audits the registry: every recorded reference must itself be valid.
    /// Returns the offending (path, reference) pairs.
    pub fn audit_closure(&self) -> Result<Vec<(StorePath, StorePath)>> {
        self.with_registry(|r| {
            Ok(r.entries
                .iter()
                .flat_map(|(p, refs)| refs.iter().map(move |x| (p, x)))
                .filter(|(_, x)| !r.entries.contains_key(*x))
                .map(|(p, x)| (p.clone(), x.clone()))
                .collect())
        })
    }

    // Adding content

    /// Copies a file or directory into the store.
    ///
    /// Flat mode hashes the bytes of a single file; recursive mode hashes the
    /// canonical serialization of the tree (and keeps executable bits).
    pub fn add_to_store(&self, name: &str, recursive: bool, source: &Path) -> Result<StorePath> {
        let meta = fs::metadata(source).at(source)?;
        let digest = if recursive {
            fsutil::hash_tree(source).at(source)?
        } else {
            if !meta.is_file() {
                return Err(Error::io(
                    source,
                    std::io::Error::new(std::io::ErrorKind::InvalidInput, "flat add needs a regular file"),
                ));
            }
            fsutil::hash_file(source).at(source)?
        };
        let path = self.make_path(PathTag::Source, &digest, name)?;
        if self.is_valid(&path)? {
            return Ok(path);
        }
        self.with_lock(|| {
            if self.is_valid(&path)? {
                return Ok(());
            }
            self.install_new(&path, |tmp| {
                if recursive {
                    fsutil::copy_tree(source, tmp)
                } else {
                    fs::copy(source, tmp).map(|_| ())
                }
            })?;
            self.copies.fetch_add(1, Ordering::SeqCst);
            self.register_valid(&path, &[])
        })?;
        Ok(path)
    }

    /// Writes `bytes` as the regular file `path`, registering it with
    /// `references`. Does nothing if the path is already valid.
    pub fn add_bytes(&self, path: &StorePath, bytes: &[u8], references: &[StorePath]) -> Result<bool> {
        if self.is_valid(path)? {
            return Ok(false);
        }
        self.with_lock(|| {
            if self.is_valid(path)? {
                return Ok(false);
            }
            for r in references {
                if !self.is_valid(r)? {
                    return Err(Error::ClosureViolation(format!("{path} refers to {r}, which is not valid")));
                }
            }
            self.install_new(path, |tmp| fs::write(tmp, bytes))?;
            self.copies.fetch_add(1, Ordering::SeqCst);
            self.register_valid(path, references)?;
            Ok(true)
        })
    }

    /// Interns a text under its content hash.
    pub fn add_text(&self, tag: PathTag, name: &str, text: &str, references: &[StorePath]) -> Result<StorePath> {
        let digest: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let path = self.make_path(tag, &digest, name)?;
        self.add_bytes(&path, text.as_bytes(), references)?;
        Ok(path)
    }

    /// Populates a temporary sibling with `fill` and renames it into place,
    /// replacing any stale, unregistered leftover. Caller holds the lock.
    fn install_new(&self, path: &StorePath, fill: impl FnOnce(&Path) -> std::io::Result<()>) -> Result<()> {
        let real = self.real_path(path);
        let tmp = self.root.join(format!(".tmp-{}-{}", std::process::id(), path.base_name()));
        fsutil::remove_tree(&tmp).at(&tmp)?;
        fill(&tmp).at(&tmp)?;
        fsutil::remove_tree(&real).at(&real)?;
        fs::rename(&tmp, &real).at(&real)?;
        Ok(())
    }

    /// Unregisters and deletes `path`. On failure the path stays registered.
    pub fn delete_path(&self, path: &StorePath) -> Result<u64> {
        self.with_lock(|| {
            let real = self.real_path(path);
            let old = self.with_registry(|reg| {
                let old = reg.entries.remove(path);
                if old.is_some() {
                    reg.dirty = true;
                }
                Ok(old)
            })?;
            let size = fsutil::tree_size(&real);
            if let Err(e) = fsutil::remove_tree(&real) {
                if let Some(refs) = old {
                    self.with_registry(|reg| {
                        reg.entries.insert(path.clone(), refs);
                        Ok(())
                    })?;
                }
                return Err(Error::io(real, e));
            }
            Ok(size)
        })
    }

    /// Entries of the store directory that are not bookkeeping files.
    pub(crate) fn directory_entries(&self) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for entry in fs::read_dir(&self.root).at(&self.root)? {
            let entry = entry.at(&self.root)?;
            if let Some(name) = entry.file_name().to_str() {
                if !is_bookkeeping(name) {
                    out.insert(name.to_string());
                }
            }
        }
        Ok(out)
    }
}

/// Guard for the store lock.
pub struct StoreLock<'a> {
    store: &'a Store,
    released: bool,
}

impl StoreLock<'_> {
    /// Releases the lock, reporting a failure to write the registry.
    pub fn release(mut self) -> Result<()> {
        self.released = true;
        self.store.unlock()
    }
}

impl Drop for StoreLock<'_> {
    fn drop(&mut self) {
        if !self.released {
            if let Err(e) = self.store.unlock() {
                log::error!("releasing store lock: {e}");
            }
        }
    }
}
