//! Host side of the build language: turning build expressions into
//! derivations whose builder is the interpreter seed.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex};

use fpm_core::derivation::{Builder, BuiltinTag, DerivationInput, DerivationSpec};
use fpm_core::sexpr::SExpr;
use fpm_core::{Derivation, StorePath};

use crate::error::{Error, IoContext, Result};
use crate::store::Store;

/// File whose presence marks a store directory as the interpreter seed.
pub const INTERPRETER_MARKER: &str = "fpm-interpreter";

const STDLIB: &str = include_str!("modules/stdlib.bl");

const EMBEDDED_MODULES: &[(&str, &str)] = &[
    ("gnu-build-system", include_str!("modules/gnu-build-system.bl")),
    ("script-build-system", include_str!("modules/script-build-system.bl")),
];

/// Where module names are looked up: each directory in turn, then the
/// modules shipped with the program.
#[derive(Debug, Clone, Default)]
pub struct ModuleSearch {
    dirs: Vec<PathBuf>,
}

impl ModuleSearch {
    pub fn new(dirs: Vec<PathBuf>) -> ModuleSearch {
        ModuleSearch { dirs }
    }

    /// Parses a colon-separated directory list.
    pub fn from_path_list(list: &str) -> ModuleSearch {
        ModuleSearch::new(list.split(':').filter(|d| !d.is_empty()).map(PathBuf::from).collect())
    }

    /// Reads `FPM_MODULE_PATH`.
    pub fn from_env() -> ModuleSearch {
        ModuleSearch::from_path_list(&std::env::var("FPM_MODULE_PATH").unwrap_or_default())
    }

    pub fn dirs(&self) -> &[PathBuf] {
        &self.dirs
    }

    /// Source text of a module.
    pub fn find(&self, name: &str) -> Result<String> {
        fpm_core::store_path::validate_name(name).map_err(|_| Error::ModuleNotFound(name.to_string()))?;
        for d in &self.dirs {
            let p = d.join(format!("{name}.bl"));
            if p.is_file() {
                return fs::read_to_string(&p).at(&p);
            }
        }
        EMBEDDED_MODULES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| text.to_string())
            .ok_or_else(|| Error::ModuleNotFound(name.to_string()))
    }
}

type SeedKey = (String, String);
static SEEDS: LazyLock<Mutex<HashMap<SeedKey, StorePath>>> = LazyLock::new(Default::default);

/// Interns a directory holding `files` under `name`.
fn intern_files(store: &Store, name: &str, files: &[(String, String)]) -> Result<StorePath> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let root = dir.path().join(name);
    fs::create_dir(&root).at(&root)?;
    for (file, text) in files {
        let p = root.join(file);
        fs::write(&p, text).at(&p)?;
    }
    store.add_to_store(name, true, &root)
}

/// The derivation producing the interpreter seed for `system`.
pub fn interpreter_derivation(store: &Store, system: &str) -> Result<(StorePath, Arc<Derivation>)> {
    let key = (store.root_str().to_string(), system.to_string());
    let cached = SEEDS.lock().unwrap().get(&key).cloned();
    if let Some(p) = cached {
        if store.is_valid(&p)? {
            return Ok((p.clone(), store.read_derivation(&p)?));
        }
    }
    let src = intern_files(
        store,
        "buildlang-interpreter",
        &[("stdlib.bl".into(), STDLIB.into()), (INTERPRETER_MARKER.into(), "build-language interpreter seed\n".into())],
    )?;
    let mut spec = DerivationSpec::new("buildlang-bootstrap", system, Builder::Builtin(BuiltinTag::UnpackSeed));
    spec.sources = vec![src];
    let (p, d) = store.derivation(spec)?;
    SEEDS.lock().unwrap().insert(key, p.clone());
    Ok((p, d))
}

fn print(e: &SExpr) -> Result<String> {
    e.try_print().map_err(|u| Error::NotSerializable(format!("symbol {:?}", u.0)))
}

/// A derivation run by the interpreter seed.
fn interpreted(
    store: &Store,
    name: &str,
    system: &str,
    expr: &SExpr,
    inputs: &[(String, StorePath)],
    modules: Option<(&[String], StorePath)>,
) -> Result<(StorePath, Arc<Derivation>)> {
    let (seed_drv, seed) = interpreter_derivation(store, system)?;
    let mut spec = DerivationSpec::new(name, system, Builder::Path(seed.output().clone()));
    spec.inputs.push(DerivationInput::new("%interpreter", seed_drv));

    let mut labels = BTreeSet::new();
    let mut listed = Vec::new();
    for (label, drv) in inputs {
        if label.starts_with('%') || !labels.insert(label.as_str()) {
            return Err(Error::ArgumentError(format!("input label {label:?} is reserved or repeated")));
        }
        let out = store.read_derivation(drv)?.output().clone();
        listed.push(SExpr::list([SExpr::str(label), SExpr::str(out.as_str())]));
        spec.inputs.push(DerivationInput::new(label.clone(), drv.clone()));
    }
    spec.env.push(("build-inputs".into(), print(&SExpr::List(listed))?));
    spec.env.push(("expr".into(), print(expr)?));
    if let Some((names, compiled)) = modules {
        let out = store.read_derivation(&compiled)?.output().clone();
        spec.inputs.push(DerivationInput::new("%modules", compiled));
        spec.env.push(("module-dir".into(), out.to_string()));
        let names = SExpr::list(names.iter().map(|n| SExpr::str(n)));
        spec.env.push(("modules".into(), print(&names)?));
    }
    store.derivation(spec)
}

/// Imports modules into the store: a `module-import` derivation copying
/// their sources and a `module-import-compiled` one checking and
/// installing them. Returns the latter.
fn modules_derivation(store: &Store, system: &str, names: &[String], search: &ModuleSearch) -> Result<StorePath> {
    let mut files = Vec::new();
    for n in names {
        files.push((format!("{n}.bl"), search.find(n)?));
    }
    let src = intern_files(store, "module-sources", &files)?;
    let mut spec = DerivationSpec::new("module-import", system, Builder::Builtin(BuiltinTag::UnpackSeed));
    spec.sources = vec![src];
    let (import, _) = store.derivation(spec)?;
    let expr = SExpr::list([
        SExpr::sym("compile-modules"),
        SExpr::list([SExpr::sym("assoc-ref"), SExpr::sym("%build-inputs"), SExpr::str("module-import")]),
        SExpr::sym("%output"),
    ]);
    let (compiled, _) =
        interpreted(store, "module-import-compiled", system, &expr, &[("module-import".into(), import)], None)?;
    Ok(compiled)
}

/// Turns a build expression into a derivation.
///
/// At build time `%output` is bound to the output path and `%build-inputs`
/// to an alist from each label to the output of its derivation. Named
/// modules are loaded before the expression runs.
pub fn build_expression_to_derivation(
    store: &Store,
    name: &str,
    system: &str,
    expr: &SExpr,
    inputs: &[(String, StorePath)],
    modules: &[String],
    search: &ModuleSearch,
) -> Result<(StorePath, Arc<Derivation>)> {
    let modules_drv =
        if modules.is_empty() { None } else { Some((modules, modules_derivation(store, system, modules, search)?)) };
    interpreted(store, name, system, expr, inputs, modules_drv)
}

/// Whether `dir` is an interpreter seed.
pub(crate) fn is_interpreter(dir: &Path) -> bool {
    dir.join(INTERPRETER_MARKER).is_file()
}
