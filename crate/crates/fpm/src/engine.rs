//! Realizing derivations: scheduling, running builders, checking and
//! registering their outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, TryLockError};
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Instant;

use fpm_core::derivation::{Builder, BuiltinTag};
use fpm_core::scan::RefScanner;
use fpm_core::{base32, Derivation, StorePath};

use crate::buildlang;
use crate::drv::cycle_error;
use crate::error::{Error, IoContext, Result};
use crate::fsutil;
use crate::store::Store;

/// Stack size for in-process interpreter builds.
const INTERPRETER_STACK: usize = 64 << 20;

/// Value of `PATH` when a build declares no inputs with a `bin` directory.
const NO_PATH: &str = "/path-not-set";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildStatus {
    Built,
    /// The output was already valid; no builder ran.
    Cached,
    Failed,
    /// A dependency failed, so the build was never started.
    NotAttempted,
}

#[derive(Debug)]
pub struct BuildResult {
    pub drv_path: StorePath,
    pub output: StorePath,
    pub status: BuildStatus,
    pub log: Option<PathBuf>,
    /// References found in the output, itself excluded.
    pub references: Vec<StorePath>,
    pub error: Option<Error>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildEvent {
    Start(StorePath),
    Finish(StorePath),
}

pub struct Engine {
    store: Arc<Store>,
    state_dir: PathBuf,
    system: String,
    max_jobs: usize,
    launches: AtomicU64,
    events: Mutex<Vec<BuildEvent>>,
}

struct Outcome {
    status: BuildStatus,
    references: Vec<StorePath>,
    log: Option<PathBuf>,
    error: Option<Error>,
}

impl Engine {
    pub fn new(store: Arc<Store>, state_dir: impl Into<PathBuf>, system: impl Into<String>) -> Engine {
        Engine {
            store,
            state_dir: state_dir.into(),
            system: system.into(),
            max_jobs: 1,
            launches: AtomicU64::new(0),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn with_max_jobs(mut self, jobs: usize) -> Engine {
        self.max_jobs = jobs.max(1);
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn state_dir(&self) -> &Path {
        &self.state_dir
    }

    /// Number of builders started by this engine.
    pub fn builder_launches(&self) -> u64 {
        self.launches.load(Ordering::SeqCst)
    }

    /// Start and finish of every builder run, in order.
    pub fn events(&self) -> Vec<BuildEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn log_path(&self, drv: &StorePath) -> PathBuf {
        self.state_dir.join("logs").join(format!("{}.log", drv.hash()))
    }

    /// Builds `drv` and everything it needs, returning its output path or
    /// the first error encountered.
    pub fn build(&self, drv: &StorePath) -> Result<StorePath> {
        let results = self.build_derivations(std::slice::from_ref(drv))?;
        let mut first_error = None;
        let mut output = None;
        for r in results {
            if &r.drv_path == drv {
                output = Some((r.output, r.status));
            }
            if first_error.is_none() {
                first_error = r.error;
            }
        }
        match output {
            Some((out, BuildStatus::Built | BuildStatus::Cached)) => Ok(out),
            _ => Err(first_error.unwrap_or_else(|| Error::BuildFailed {
                drv: drv.clone(),
                reason: "not built".into(),
                log: None,
            })),
        }
    }

    /// Builds the closures of `targets`. Inputs are built before the
    /// derivations that need them and up to `max_jobs` builders run at
    /// once. A failure stops its dependents but not unrelated builds.
    ///
    /// Returns one result per derivation in the closure, dependencies first.
    pub fn build_derivations(&self, targets: &[StorePath]) -> Result<Vec<BuildResult>> {
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let _guard = self.store.build_guard()?;
        let graph = self.store.derivation_graph(targets)?;
        let order = graph.topo_order().map_err(cycle_error)?;
        let index: HashMap<&StorePath, usize> = order.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let drvs: Vec<Arc<Derivation>> = order.iter().map(|p| self.store.read_derivation(p)).collect::<Result<_>>()?;
        let deps: Vec<Vec<usize>> = order.iter().map(|p| graph.deps(p).map(|d| index[d]).collect()).collect();
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
        for (i, ds) in deps.iter().enumerate() {
            for &d in ds {
                dependents[d].push(i);
            }
        }

        let mut waiting: Vec<usize> = deps.iter().map(Vec::len).collect();
        let mut outcomes: Vec<Option<Outcome>> = (0..order.len()).map(|_| None).collect();
        let mut ready: BTreeSet<usize> = (0..order.len()).filter(|&i| waiting[i] == 0).collect();
        let mut running = 0;

        thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
            loop {
                while running < self.max_jobs {
                    let Some(i) = ready.pop_first() else { break };
                    if self.store.is_valid(drvs[i].output())? {
                        let done = Outcome {
                            status: BuildStatus::Cached,
                            references: self.store.references(drvs[i].output())?.unwrap_or_default(),
                            log: None,
                            error: None,
                        };
                        self.finish(i, done, &mut outcomes, &mut ready, &mut waiting, &dependents);
                        continue;
                    }
                    running += 1;
                    let tx = tx.clone();
                    let (path, drv) = (&order[i], drvs[i].clone());
                    scope.spawn(move || {
                        let outcome = self.realise(path, &drv);
                        let _ = tx.send((i, outcome));
                    });
                }
                if running == 0 {
                    break;
                }
                let (i, done) = rx.recv().expect("a worker is running");
                running -= 1;
                self.finish(i, done, &mut outcomes, &mut ready, &mut waiting, &dependents);
            }
            Ok(())
        })?;

        Ok(order
            .into_iter()
            .zip(drvs)
            .zip(outcomes)
            .map(|((drv_path, d), o)| {
                let o = o.unwrap_or(Outcome {
                    status: BuildStatus::NotAttempted,
                    references: Vec::new(),
                    log: None,
                    error: None,
                });
                BuildResult {
                    drv_path,
                    output: d.output().clone(),
                    status: o.status,
                    log: o.log,
                    references: o.references,
                    error: o.error,
                }
            })
            .collect())
    }

    fn finish(
        &self,
        i: usize,
        outcome: Outcome,
        outcomes: &mut [Option<Outcome>],
        ready: &mut BTreeSet<usize>,
        waiting: &mut [usize],
        dependents: &[Vec<usize>],
    ) {
        let ok = matches!(outcome.status, BuildStatus::Built | BuildStatus::Cached);
        outcomes[i] = Some(outcome);
        if ok {
            for &d in &dependents[i] {
                waiting[d] -= 1;
                if waiting[d] == 0 {
                    ready.insert(d);
                }
            }
        } else {
            let mut stack = dependents[i].clone();
            while let Some(d) = stack.pop() {
                if outcomes[d].is_none() {
                    outcomes[d] = Some(Outcome {
                        status: BuildStatus::NotAttempted,
                        references: Vec::new(),
                        log: None,
                        error: None,
                    });
                    stack.extend(dependents[d].iter().copied());
                }
            }
        }
    }

    /// Builds one derivation whose inputs are all valid.
    fn realise(&self, drv_path: &StorePath, d: &Derivation) -> Outcome {
        let log = self.log_path(drv_path);
        match self.realise_inner(drv_path, d, &log) {
            Ok((status, references)) => {
                Outcome { status, references, log: (status == BuildStatus::Built).then_some(log), error: None }
            }
            Err(e) => {
                log::error!("{e}");
                Outcome {
                    status: BuildStatus::Failed,
                    references: Vec::new(),
                    log: log.exists().then_some(log),
                    error: Some(e),
                }
            }
        }
    }

    fn realise_inner(
        &self,
        drv_path: &StorePath,
        d: &Derivation,
        log_path: &Path,
    ) -> Result<(BuildStatus, Vec<StorePath>)> {
        let fail =
            |reason: String| Error::BuildFailed { drv: drv_path.clone(), reason, log: Some(log_path.to_path_buf()) };
        if d.system() != self.system {
            return Err(Error::BuildFailed {
                drv: drv_path.clone(),
                reason: format!("wrong system: derivation is for {}, engine builds {}", d.system(), self.system),
                log: None,
            });
        }
        let out = d.output();
        let _out_lock = self.lock_output(out)?;
        if self.store.is_valid(out)? {
            let refs = self.store.references(out)?.unwrap_or_default();
            return Ok((BuildStatus::Cached, refs));
        }

        let mut input_outputs = Vec::new();
        for input in d.inputs() {
            let dep = self.store.read_derivation(&input.drv_path)?;
            if !self.store.is_valid(dep.output())? {
                return Err(fail(format!("input {} is not valid", dep.output())));
            }
            input_outputs.push(dep.output().clone());
        }

        let out_real = self.store.real_path(out);
        self.remove_output(&out_real)?;
        let tmp_root = self.state_dir.join("tmp");
        fs::create_dir_all(&tmp_root).at(&tmp_root)?;
        let build_dir =
            tempfile::Builder::new().prefix(&format!("build-{}-", d.name())).tempdir_in(&tmp_root).at(&tmp_root)?;
        let logs = self.state_dir.join("logs");
        fs::create_dir_all(&logs).at(&logs)?;
        let mut log = File::create(log_path).at(log_path)?;

        let before = self.store.directory_entries()?;
        let env = self.build_env(d, &input_outputs);
        self.launches.fetch_add(1, Ordering::SeqCst);
        self.events.lock().unwrap().push(BuildEvent::Start(drv_path.clone()));
        let started = Instant::now();
        let ran = self.run_builder(drv_path, d, &env, build_dir.path(), &mut log);
        self.events.lock().unwrap().push(BuildEvent::Finish(drv_path.clone()));
        let _ = writeln!(log, "builder finished in {:.3}s", started.elapsed().as_secs_f64());

        let checked = ran.and_then(|()| self.check_and_register(drv_path, d, &input_outputs, &before));
        match checked {
            Ok(refs) => Ok((BuildStatus::Built, refs)),
            Err(e) => {
                let _ = writeln!(log, "build failed: {e}");
                if let Err(rm) = self.remove_output(&out_real) {
                    log::warn!("could not remove failed output: {rm}");
                }
                Err(e)
            }
        }
    }

    /// Exclusive lock on `<root>/.locks/<hash>.lock`, so two processes
    /// never build the same output at once.
    fn lock_output(&self, out: &StorePath) -> Result<File> {
        let dir = self.store.root().join(".locks");
        fs::create_dir_all(&dir).at(&dir)?;
        let path = dir.join(format!("{}.lock", out.hash()));
        let file = File::options().create(true).truncate(false).write(true).open(&path).at(&path)?;
        let timeout = self.store.lock_timeout();
        let deadline = Instant::now() + timeout;
        loop {
            match file.try_lock() {
                Ok(()) => return Ok(file),
                Err(TryLockError::WouldBlock) if Instant::now() < deadline => {
                    thread::sleep(std::time::Duration::from_millis(5))
                }
                Err(TryLockError::WouldBlock) => return Err(Error::StoreBusy { path, timeout }),
                Err(TryLockError::Error(e)) => return Err(Error::io(&path, e)),
            }
        }
    }

    fn remove_output(&self, out_real: &Path) -> Result<()> {
        if fs::symlink_metadata(out_real).is_ok() {
            fsutil::make_dirs_writable(out_real).at(out_real)?;
            fsutil::remove_tree(out_real).at(out_real)?;
        }
        Ok(())
    }

    /// The builder's entire environment: the declared variables, `out`,
    /// and a `PATH` made of the inputs' `bin` directories unless the
    /// derivation sets one itself.
    fn build_env(&self, d: &Derivation, input_outputs: &[StorePath]) -> BTreeMap<String, String> {
        let mut env: BTreeMap<String, String> = d.env_with_out().into_iter().collect();
        if !env.contains_key("PATH") {
            let bins: Vec<String> = input_outputs
                .iter()
                .chain(d.sources())
                .map(|p| self.store.real_path(p).join("bin"))
                .filter(|b| b.is_dir())
                .map(|b| b.to_string_lossy().into_owned())
                .collect();
            let path = if bins.is_empty() { NO_PATH.to_string() } else { bins.join(":") };
            env.insert("PATH".into(), path);
        }
        env
    }

    fn run_builder(
        &self,
        drv_path: &StorePath,
        d: &Derivation,
        env: &BTreeMap<String, String>,
        build_dir: &Path,
        log: &mut File,
    ) -> Result<()> {
        let out_real = self.store.real_path(d.output());
        let fail =
            |reason: String| Error::BuildFailed { drv: drv_path.clone(), reason, log: Some(self.log_path(drv_path)) };
        match d.builder() {
            Builder::Builtin(BuiltinTag::WriteText) => {
                let text = d.env_value("text").ok_or_else(|| fail("write-text needs a `text' variable".into()))?;
                fs::write(&out_real, text).at(&out_real)
            }
            Builder::Builtin(BuiltinTag::UnpackSeed) => self.unpack_seed(drv_path, d, &out_real, log),
            Builder::Path(p) => {
                let exe = self.store.real_path(p);
                if buildlang::is_interpreter(&exe) {
                    return self.run_interpreter(&exe, env, build_dir, log).map_err(fail);
                }
                let meta = fs::metadata(&exe).at(&exe)?;
                if !meta.is_file() || meta.permissions().mode() & 0o111 == 0 {
                    return Err(Error::BuilderNotExecutable(exe));
                }
                let stdout = log.try_clone().at(self.log_path(drv_path))?;
                let stderr = log.try_clone().at(self.log_path(drv_path))?;
                let status = Command::new(&exe)
                    .args(d.args())
                    .env_clear()
                    .envs(env)
                    .current_dir(build_dir)
                    .stdin(Stdio::null())
                    .stdout(stdout)
                    .stderr(stderr)
                    .status()
                    .at(&exe)?;
                if status.success() {
                    Ok(())
                } else {
                    Err(fail(match status.code() {
                        Some(c) => format!("builder exited with status {c}"),
                        None => "builder was killed by a signal".into(),
                    }))
                }
            }
        }
    }

    fn run_interpreter(
        &self,
        interpreter: &Path,
        env: &BTreeMap<String, String>,
        build_dir: &Path,
        log: &File,
    ) -> std::result::Result<(), String> {
        let log = log.try_clone().map_err(|e| e.to_string())?;
        let (interpreter, env, build_dir) = (interpreter.to_path_buf(), env.clone(), build_dir.to_path_buf());
        let worker = thread::Builder::new()
            .name("interpreter".into())
            .stack_size(INTERPRETER_STACK)
            .spawn(move || {
                let mut log = log;
                let r = buildlang::run_build(
                    &interpreter,
                    &env,
                    &build_dir,
                    Box::new(log.try_clone().expect("log handle")),
                );
                if let Err(e) = &r {
                    let _ = writeln!(log, "error: {e}");
                }
                r.map_err(|e| e.to_string())
            })
            .map_err(|e| e.to_string())?;
        worker.join().unwrap_or_else(|_| Err("interpreter panicked".into()))
    }

    /// Copies or extracts the single source into the output, checking its
    /// digest when the derivation declares one.
    fn unpack_seed(&self, drv_path: &StorePath, d: &Derivation, out: &Path, log: &mut File) -> Result<()> {
        let [src] = d.sources() else {
            return Err(Error::BuildFailed {
                drv: drv_path.clone(),
                reason: format!("unpack-seed needs exactly one source, got {}", d.sources().len()),
                log: None,
            });
        };
        let real = self.store.real_path(src);
        let meta = fs::metadata(&real).at(&real)?;
        if let Some(expected) = d.env_value("sha256") {
            let digest = if meta.is_dir() { fsutil::hash_tree(&real) } else { fsutil::hash_file(&real) }.at(&real)?;
            let actual = base32::encode(&digest);
            if actual != expected {
                return Err(Error::HashMismatch { what: src.to_string(), expected: expected.to_string(), actual });
            }
        }
        if meta.is_dir() {
            fsutil::copy_tree(&real, out).at(out)?;
        } else if src.name().ends_with(".tar") {
            fs::create_dir_all(out).at(out)?;
            let file = File::open(&real).at(&real)?;
            let mut archive = tar::Archive::new(file);
            archive.set_preserve_permissions(true);
            archive.unpack(out).at(out)?;
        } else {
            fs::copy(&real, out).at(out)?;
        }
        let _ = writeln!(log, "unpacked {src}");
        Ok(())
    }

    /// Post-build checks: the output exists, nothing else appeared in the
    /// store, and the output refers only to paths in its inputs' closure.
    fn check_and_register(
        &self,
        drv_path: &StorePath,
        d: &Derivation,
        input_outputs: &[StorePath],
        before: &BTreeSet<String>,
    ) -> Result<Vec<StorePath>> {
        let out = d.output();
        let out_real = self.store.real_path(out);
        if fs::symlink_metadata(&out_real).is_err() {
            return Err(Error::MissingOutput { drv: drv_path.clone(), output: out.clone() });
        }
        self.store.with_lock(|| {
            let stray = self.stray_entries(before, out)?;
            if !stray.is_empty() {
                for s in &stray {
                    let p = self.store.root().join(s);
                    let _ = fsutil::make_dirs_writable(&p);
                    let _ = fsutil::remove_tree(&p);
                }
                return Err(Error::ImpurityDetected {
                    drv: drv_path.clone(),
                    paths: stray.into_iter().map(|s| format!("{}/{s}", self.store.root_str())).collect(),
                });
            }

            let found = self.scan_output(out)?;
            let mut allowed = self.store.closure(input_outputs.iter().chain(d.sources()).cloned())?;
            allowed.insert(out.clone());
            let undeclared: Vec<String> =
                found.iter().filter(|p| !allowed.contains(*p)).map(|p| p.to_string()).collect();
            if !undeclared.is_empty() {
                return Err(Error::ImpurityDetected { drv: drv_path.clone(), paths: undeclared });
            }
            let refs: Vec<StorePath> = found.into_iter().filter(|p| p != out).collect();
            self.store.register_valid(out, &refs)?;
            Ok(refs)
        })
    }

    /// Store entries that appeared during the build and belong to nobody:
    /// not registered, not the output, and not being built elsewhere.
    fn stray_entries(&self, before: &BTreeSet<String>, out: &StorePath) -> Result<Vec<String>> {
        let mut stray = Vec::new();
        for name in self.store.directory_entries()? {
            if before.contains(&name) || name == out.base_name() {
                continue;
            }
            let Ok(p) = self.store.parse_path(&format!("{}/{name}", self.store.root_str())) else {
                stray.push(name);
                continue;
            };
            if self.store.is_valid(&p)? || self.in_flight(&p) {
                continue;
            }
            stray.push(name);
        }
        Ok(stray)
    }

    fn in_flight(&self, p: &StorePath) -> bool {
        let path = self.store.root().join(".locks").join(format!("{}.lock", p.hash()));
        let Ok(file) = File::options().write(true).open(&path) else {
            return false;
        };
        match file.try_lock() {
            Ok(()) => {
                let _ = file.unlock();
                false
            }
            Err(_) => true,
        }
    }

    /// Valid paths whose hash occurs in the output's files or symlink
    /// targets.
    fn scan_output(&self, out: &StorePath) -> Result<BTreeSet<StorePath>> {
        let mut by_hash: BTreeMap<String, StorePath> =
            self.store.valid_paths()?.into_iter().map(|p| (p.hash().to_string(), p)).collect();
        by_hash.insert(out.hash().to_string(), out.clone());
        let candidates: BTreeSet<String> = by_hash.keys().cloned().collect();
        let found = scan_tree(&self.store.real_path(out), &candidates)?;
        Ok(found.into_iter().filter_map(|h| by_hash.remove(&h)).collect())
    }
}

/// Hashes from `candidates` occurring anywhere under `root`.
pub fn scan_tree(root: &Path, candidates: &BTreeSet<String>) -> Result<BTreeSet<String>> {
    let mut found = BTreeSet::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        let ft = entry.file_type();
        if ft.is_symlink() {
            let target = fs::read_link(entry.path()).at(entry.path())?;
            let mut s = RefScanner::new(candidates);
            s.feed(target.as_os_str().as_encoded_bytes());
            found.extend(s.finish());
        } else if ft.is_file() {
            let mut s = RefScanner::new(candidates);
            let mut f = File::open(entry.path()).at(entry.path())?;
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                let n = std::io::Read::read(&mut f, &mut buf).at(entry.path())?;
                if n == 0 {
                    break;
                }
                s.feed(&buf[..n]);
            }
            found.extend(s.finish());
        }
    }
    Ok(found)
}
