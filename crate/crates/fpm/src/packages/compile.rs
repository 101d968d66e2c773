use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use fpm_core::base32;
use fpm_core::derivation::{Builder, BuiltinTag, DerivationSpec};
use fpm_core::{Derivation, StorePath};

use super::{ForceContext, Origin, Package, PackageRegistry};
use crate::build_systems::BuildSystems;
use crate::buildlang::ModuleSearch;
use crate::error::{Error, Result};
use crate::store::Store;

type Compiled = (StorePath, Arc<Derivation>);

/// The derivation that puts `o` in the store. Its builder checks the
/// digest, so a file that does not match fails at build time.
pub fn origin_derivation(store: &Store, o: &Origin, system: &str) -> Result<Compiled> {
    let file_name = o
        .uri
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::ArgumentError(format!("origin uri {} has no file name", o.uri.display())))?;
    let meta = std::fs::metadata(&o.uri).map_err(|e| Error::io(&o.uri, e))?;
    let src = store.add_to_store(file_name, meta.is_dir(), &o.uri)?;
    let mut spec = DerivationSpec::new(file_name, system, Builder::Builtin(BuiltinTag::UnpackSeed));
    spec.sources = vec![src];
    spec.env = vec![("sha256".into(), base32::encode(&o.sha256))];
    store.derivation(spec)
}

/// Compiles packages to derivations, remembering each (package, system).
pub struct Compiler {
    store: Arc<Store>,
    registry: Arc<PackageRegistry>,
    build_systems: BuildSystems,
    search: ModuleSearch,
    packages: Mutex<HashMap<(u64, String), Compiled>>,
    origins: Mutex<HashMap<(Origin, String), Compiled>>,
}

impl Compiler {
    pub fn new(store: Arc<Store>, registry: Arc<PackageRegistry>) -> Compiler {
        Compiler {
            store,
            registry,
            build_systems: BuildSystems::default(),
            search: ModuleSearch::default(),
            packages: Mutex::new(HashMap::new()),
            origins: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_module_search(mut self, search: ModuleSearch) -> Compiler {
        self.search = search;
        self
    }

    pub fn with_build_systems(mut self, systems: BuildSystems) -> Compiler {
        self.build_systems = systems;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<PackageRegistry> {
        &self.registry
    }

    pub fn build_systems(&self) -> &BuildSystems {
        &self.build_systems
    }

    pub fn origin_derivation(&self, o: &Origin, system: &str) -> Result<Compiled> {
        let key = (o.clone(), system.to_string());
        let hit = self.origins.lock().unwrap().get(&key).cloned();
        if let Some(c) = hit.filter(|c| self.store.is_valid(&c.0).unwrap_or(false)) {
            return Ok(c);
        }
        let c = origin_derivation(&self.store, o, system)?;
        self.origins.lock().unwrap().insert(key, c.clone());
        Ok(c)
    }

    /// The derivation building `p` for `system`, computing those of its
    /// inputs first.
    pub fn package_derivation(&self, p: &Arc<Package>, system: &str) -> Result<Compiled> {
        self.derive(p, system, &mut Vec::new())
    }

    /// The inputs `p` is built with, in order: its inputs then its
    /// propagated inputs.
    pub fn build_inputs(&self, p: &Package, system: &str) -> Result<Vec<(String, Arc<Package>)>> {
        let cx = ForceContext { system, registry: &self.registry };
        let mut out: Vec<(String, Arc<Package>)> = Vec::new();
        for (label, r) in p.inputs.force(&cx)?.iter().chain(&p.propagated_inputs) {
            if out.iter().any(|(l, _)| l == label) {
                return Err(Error::PackageSyntax {
                    message: format!("{}: input label {label:?} appears twice", p.full_name()),
                    location: p.location.clone(),
                });
            }
            out.push((label.clone(), r.resolve(&self.registry)?));
        }
        Ok(out)
    }

    fn derive(&self, p: &Arc<Package>, system: &str, stack: &mut Vec<Arc<Package>>) -> Result<Compiled> {
        let key = (p.id(), system.to_string());
        // A cached derivation may since have been collected.
        let hit = self.packages.lock().unwrap().get(&key).cloned();
        if let Some(c) = hit.filter(|c| self.store.is_valid(&c.0).unwrap_or(false)) {
            return Ok(c);
        }
        if let Some(i) = stack.iter().position(|q| q.id() == p.id()) {
            let mut names: Vec<String> = stack[i..].iter().map(|q| q.full_name()).collect();
            names.push(p.full_name());
            return Err(Error::DependencyCycle(names));
        }
        let bs = self.build_systems.get(&p.build_system)?;
        stack.push(p.clone());
        let result = (|| {
            let mut inputs = Vec::new();
            for (label, q) in self.build_inputs(p, system)? {
                let (drv, _) = self.derive(&q, system, stack)?;
                inputs.push((label, drv));
            }
            let (source, _) = self.origin_derivation(&p.source, system)?;
            let cx = ForceContext { system, registry: &self.registry };
            let arguments = p.arguments.force(&cx)?;
            bs.build(
                &self.store,
                &format!("{}-{}", p.name, p.version),
                system,
                &source,
                &inputs,
                &arguments,
                &self.search,
            )
        })();
        stack.pop();
        let c = result?;
        self.packages.lock().unwrap().insert(key, c.clone());
        Ok(c)
    }
}
