//! Build systems: descriptors that turn a package's source, inputs and
//! arguments into a build expression run by the phase runner.
//!
//! A build system names the modules its phases live in and the phase list
//! handed to `gnu-build`. Arguments are a flat list of keyword/value pairs
//! whose values are build-side expressions, so they may refer to
//! `%build-inputs`, `%output` and `%standard-phases`.

use std::collections::BTreeMap;
use std::sync::Arc;

use fpm_core::sexpr::SExpr;
use fpm_core::{Derivation, StorePath};

use crate::buildlang::{build_expression_to_derivation, ModuleSearch};
use crate::error::{Error, Result};
use crate::store::Store;

const STANDARD_PHASES: [&str; 6] = ["unpack", "patch-source-shebangs", "configure", "build", "check", "install"];

const KNOWN_ARGUMENTS: [&str; 5] = ["configure-flags", "make-flags", "tests?", "phases", "modules"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildSystem {
    name: String,
    modules: Vec<String>,
    phase_names: Vec<String>,
    phases: SExpr,
}

impl BuildSystem {
    /// The generic build system and its six standard phases.
    pub fn generic() -> BuildSystem {
        BuildSystem {
            name: "gnu-build-system".into(),
            modules: vec!["gnu-build-system".into()],
            phase_names: STANDARD_PHASES.iter().map(|s| s.to_string()).collect(),
            phases: SExpr::sym("%standard-phases"),
        }
    }

    /// The script build system: the generic one with its own configure
    /// and check phases.
    pub fn script() -> BuildSystem {
        variant_build_system(
            "script-build-system",
            &BuildSystem::generic(),
            &["script-build-system"],
            &[("configure", "script-configure"), ("check", "script-check")],
        )
        .expect("standard phases contain configure and check")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn modules(&self) -> &[String] {
        &self.modules
    }

    pub fn phase_names(&self) -> &[String] {
        &self.phase_names
    }

    /// The build-side expression yielding this system's phase list.
    pub fn phases_expr(&self) -> &SExpr {
        &self.phases
    }

    /// The expression a build of package `name` with `arguments` evaluates.
    pub fn build_expression(&self, name: &str, system: &str, arguments: &SExpr) -> Result<(SExpr, Vec<String>)> {
        let args = parse_arguments(arguments)?;
        let arg = |key: &str, default: SExpr| args.get(key).cloned().unwrap_or(default);
        let pair = |key: &str, value: SExpr| SExpr::list([SExpr::sym("cons"), SExpr::quote(SExpr::sym(key)), value]);
        let empty = SExpr::quote(SExpr::List(Vec::new()));
        let alist = SExpr::list([
            SExpr::sym("list"),
            pair("source", SExpr::list([SExpr::sym("assoc-ref"), SExpr::sym("%build-inputs"), SExpr::str("source")])),
            pair("out", SExpr::sym("%output")),
            pair("name", SExpr::str(name)),
            pair("inputs", SExpr::sym("%build-inputs")),
            pair("system", SExpr::str(system)),
            pair("configure-flags", arg("configure-flags", empty.clone())),
            pair("make-flags", arg("make-flags", empty)),
            pair("tests?", arg("tests?", SExpr::Bool(true))),
            pair("phases", arg("phases", SExpr::sym("%standard-phases"))),
        ]);
        let expr = SExpr::list([
            SExpr::sym("let"),
            SExpr::list([SExpr::list([SExpr::sym("%standard-phases"), self.phases.clone()])]),
            SExpr::list([SExpr::sym("gnu-build"), alist]),
        ]);

        let mut modules = self.modules.clone();
        if let Some(extra) = args.get("modules") {
            for m in module_list(extra)? {
                if !modules.contains(&m) {
                    modules.push(m);
                }
            }
        }
        Ok((expr, modules))
    }

    /// Builds `source` with `inputs` visible under their labels and the
    /// source under `"source"`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        &self,
        store: &Store,
        name: &str,
        system: &str,
        source: &StorePath,
        inputs: &[(String, StorePath)],
        arguments: &SExpr,
        search: &ModuleSearch,
    ) -> Result<(StorePath, Arc<Derivation>)> {
        let (expr, modules) = self.build_expression(name, system, arguments)?;
        let mut all = Vec::with_capacity(inputs.len() + 1);
        all.push(("source".to_string(), source.clone()));
        all.extend(inputs.iter().cloned());
        build_expression_to_derivation(store, name, system, &expr, &all, &modules, search)
    }
}

/// Derives a build system from `base` by replacing phases by name with
/// procedures defined in `modules`.
pub fn variant_build_system(
    name: &str,
    base: &BuildSystem,
    modules: &[&str],
    overrides: &[(&str, &str)],
) -> Result<BuildSystem> {
    let mut phases = base.phases.clone();
    for (phase, procedure) in overrides {
        if !base.phase_names.iter().any(|p| p == phase) {
            return Err(Error::KeyNotFound(phase.to_string()));
        }
        phases =
            SExpr::list([SExpr::sym("alist-replace"), SExpr::quote(SExpr::sym(phase)), SExpr::sym(procedure), phases]);
    }
    let mut all_modules = base.modules.clone();
    all_modules.extend(modules.iter().map(|m| m.to_string()));
    Ok(BuildSystem { name: name.into(), modules: all_modules, phase_names: base.phase_names.clone(), phases })
}

/// Splits a `(#:key value ...)` list into a map from key to value.
pub fn parse_arguments(arguments: &SExpr) -> Result<BTreeMap<String, SExpr>> {
    let items = arguments.as_list().ok_or_else(|| Error::ArgumentError(format!("expected a list, got {arguments}")))?;
    if items.len() % 2 != 0 {
        return Err(Error::ArgumentError(format!("odd number of elements in argument list {arguments}")));
    }
    let mut out = BTreeMap::new();
    for kv in items.chunks(2) {
        let key = match &kv[0] {
            k @ SExpr::Symbol(s) if k.is_keyword() => &s[2..],
            k => return Err(Error::ArgumentError(format!("expected a keyword, got {k}"))),
        };
        if !KNOWN_ARGUMENTS.contains(&key) {
            return Err(Error::ArgumentError(format!("unknown argument #:{key}")));
        }
        if out.insert(key.to_string(), kv[1].clone()).is_some() {
            return Err(Error::ArgumentError(format!("argument #:{key} given twice")));
        }
    }
    Ok(out)
}

/// Accepts `("a" "b")` or `'("a" "b")`.
fn module_list(e: &SExpr) -> Result<Vec<String>> {
    let e = match e.as_list() {
        Some([SExpr::Symbol(q), datum]) if q == "quote" => datum,
        _ => e,
    };
    e.as_list()
        .and_then(|items| items.iter().map(|m| m.as_str().map(str::to_string)).collect())
        .ok_or_else(|| Error::ArgumentError(format!("#:modules expects a list of strings, got {e}")))
}

/// The build systems packages may name.
#[derive(Debug, Clone)]
pub struct BuildSystems {
    systems: BTreeMap<String, BuildSystem>,
}

impl Default for BuildSystems {
    fn default() -> Self {
        let mut r = BuildSystems { systems: BTreeMap::new() };
        r.register(BuildSystem::generic());
        r.register(BuildSystem::script());
        r
    }
}

impl BuildSystems {
    pub fn register(&mut self, bs: BuildSystem) {
        self.systems.insert(bs.name.clone(), bs);
    }

    pub fn get(&self, name: &str) -> Result<&BuildSystem> {
        self.systems.get(name).ok_or_else(|| Error::UnknownBuildSystem(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.systems.keys().map(String::as_str)
    }
}
