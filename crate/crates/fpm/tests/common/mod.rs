#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fpm::core::derivation::{Builder, DerivationSpec};
use fpm::core::StorePath;
use fpm::engine::Engine;
use fpm::packages::{Compiler, PackageRegistry};
use fpm::store::Store;

pub const SYSTEM: &str = "x86_64-linux";

const TOOLS: &[&str] = &["cat", "cp", "env", "ln", "ls", "mkdir", "sleep", "sort"];

/// A throwaway store and state directory.
pub struct Sandbox {
    pub dir: tempfile::TempDir,
    pub store: Arc<Store>,
}

impl Sandbox {
    pub fn new() -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("store")).unwrap();
        Sandbox { dir, store }
    }

    pub fn state(&self) -> PathBuf {
        self.dir.path().join("state")
    }

    pub fn engine(&self) -> Engine {
        Engine::new(self.store.clone(), self.state(), SYSTEM)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// The system shell interned as `static-bash`.
    pub fn static_bash(&self) -> StorePath {
        self.store.add_to_store("static-bash", false, Path::new("/bin/dash")).unwrap()
    }

    /// A few host tools interned as a `bin` directory, standing in for a
    /// bootstrap tool set.
    pub fn tools(&self) -> StorePath {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("tools/bin");
        std::fs::create_dir_all(&bin).unwrap();
        for tool in TOOLS {
            std::fs::copy(Path::new("/bin").join(tool), bin.join(tool)).unwrap();
        }
        self.store.add_to_store("tools", true, &dir.path().join("tools")).unwrap()
    }

    /// A derivation running `script` with the interned shell and tools.
    pub fn shell_spec(&self, name: &str, script: &str) -> DerivationSpec {
        let sh = self.static_bash();
        let mut spec = DerivationSpec::new(name, SYSTEM, Builder::Path(sh.clone()));
        spec.args = vec!["-c".into(), script.into()];
        spec.sources = vec![sh, self.tools()];
        spec
    }
}

/// Directory holding the test fixtures.
pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Loads the package files of one fixture directory.
pub fn registry(dir: &str) -> Arc<PackageRegistry> {
    Arc::new(PackageRegistry::load(&[fixtures().join(dir)]).unwrap())
}

impl Sandbox {
    pub fn compiler(&self, registry: Arc<PackageRegistry>) -> Compiler {
        Compiler::new(self.store.clone(), registry)
    }

    /// Builds the named package and returns its output directory.
    pub fn build_package(&self, c: &Compiler, name: &str) -> fpm::Result<PathBuf> {
        let p = c.registry().lookup(name)?;
        let (drv, _) = c.package_derivation(&p, SYSTEM)?;
        let out = self.engine().build(&drv)?;
        Ok(self.store.real_path(&out))
    }
}

/// Reachability computed straight from the registry file, by repeated
/// passes until nothing changes.
pub fn reachable_from_registry_file(store_root: &Path, roots: &[String]) -> std::collections::BTreeSet<String> {
    let text = std::fs::read_to_string(store_root.join(".registry")).unwrap_or_default();
    let edges: Vec<(String, Vec<String>)> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (p, refs) = l.split_once('\t').unwrap();
            let refs = refs.split(',').filter(|r| !r.is_empty()).map(String::from).collect();
            (p.to_string(), refs)
        })
        .collect();
    let valid: std::collections::BTreeSet<&String> = edges.iter().map(|(p, _)| p).collect();
    let mut live: std::collections::BTreeSet<String> = roots.iter().filter(|r| valid.contains(r)).cloned().collect();
    loop {
        let before = live.len();
        for (p, refs) in &edges {
            if live.contains(p) {
                live.extend(refs.iter().cloned());
            }
        }
        if live.len() == before {
            return live;
        }
    }
}

/// Builds a random reference graph of at most `max_nodes` paths, roots a
/// random subset through `gcroots` links, collects, and compares the
/// surviving paths with brute-force reachability.
pub fn random_gc_trial(rng: &mut impl rand::Rng, max_nodes: usize) -> Result<(), String> {
    use fpm::core::PathTag;

    let sb = Sandbox::new();
    let n = rng.gen_range(1..=max_nodes);
    let mut nodes: Vec<StorePath> = Vec::with_capacity(n);
    for i in 0..n {
        let mut refs = Vec::new();
        if i > 0 {
            for _ in 0..rng.gen_range(0..4) {
                refs.push(nodes[rng.gen_range(0..i)].clone());
            }
        }
        refs.sort();
        refs.dedup();
        let body = format!("node {i} {}\n", rng.gen::<u64>());
        let p = sb.store.add_text(PathTag::Source, &format!("n{i}"), &body, &refs).unwrap();
        nodes.push(p);
    }
    let gcroots = sb.state().join("gcroots");
    std::fs::create_dir_all(&gcroots).unwrap();
    let mut roots = Vec::new();
    for (i, p) in nodes.iter().enumerate() {
        if rng.gen_bool(0.1) {
            std::os::unix::fs::symlink(sb.store.real_path(p), gcroots.join(format!("r{i}"))).unwrap();
            roots.push(p.as_str().to_string());
        }
    }
    let expected = reachable_from_registry_file(sb.store.root(), &roots);

    let report = fpm::gc::collect_garbage(&sb.store, &sb.state(), false).map_err(|e| e.to_string())?;
    let kept: std::collections::BTreeSet<String> =
        sb.store.valid_paths().unwrap().iter().map(|p| p.as_str().to_string()).collect();
    if kept != expected {
        return Err(format!("{n} nodes: kept {} paths, expected {}", kept.len(), expected.len()));
    }
    for p in &nodes {
        let on_disk = sb.store.real_path(p).exists();
        if on_disk != expected.contains(p.as_str()) {
            return Err(format!("{p}: on disk {on_disk}, live {}", expected.contains(p.as_str())));
        }
    }
    if report.deleted.len() != n - expected.len() || !report.failures.is_empty() {
        return Err(format!("report {report:?} does not match"));
    }
    let again = fpm::gc::collect_garbage(&sb.store, &sb.state(), false).map_err(|e| e.to_string())?;
    if !again.deleted.is_empty() {
        return Err("second collection deleted paths".into());
    }
    Ok(())
}
