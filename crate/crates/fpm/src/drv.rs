//! Writing derivations into the store and reading them back.

use std::collections::BTreeSet;
use std::fs;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use fpm_core::derivation::{Builder, DerivationSpec};
use fpm_core::graph::{Cycle, Graph};
use fpm_core::{Derivation, StorePath};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::store::Store;

impl Store {
    /// Instantiates a derivation: computes its output path, writes the
    /// `.drv` file and registers it with its inputs and sources as
    /// references.
    ///
    /// Identical requests within one process are answered from a memo table
    /// without touching the store again.
    pub fn derivation(&self, spec: DerivationSpec) -> Result<(StorePath, Arc<Derivation>)> {
        let drv = Derivation::new(self.root_str(), spec)?;
        let text = drv.write();
        let key: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let memo = self.drv_memo.lock().unwrap().get(&key).cloned();
        if let Some(path) = memo {
            if self.is_valid(&path)? {
                let d = self.read_derivation(&path)?;
                return Ok((path, d));
            }
        }

        let mut refs: Vec<StorePath> = Vec::new();
        let mut allowed: BTreeSet<StorePath> = BTreeSet::new();
        for input in drv.inputs() {
            if !input.drv_path.is_derivation() {
                return Err(Error::ClosureViolation(format!(
                    "input {:?} of {} is not a derivation: {}",
                    input.label,
                    drv.name(),
                    input.drv_path
                )));
            }
            if !self.is_valid(&input.drv_path)? {
                return Err(Error::ClosureViolation(format!(
                    "input {:?} of {} is not valid: {}",
                    input.label,
                    drv.name(),
                    input.drv_path
                )));
            }
            let dep = self.read_derivation(&input.drv_path)?;
            allowed.insert(dep.output().clone());
            refs.push(input.drv_path.clone());
        }
        for src in drv.sources() {
            if !self.is_valid(src)? {
                return Err(Error::ClosureViolation(format!("source of {} is not valid: {src}", drv.name())));
            }
            allowed.insert(src.clone());
            refs.push(src.clone());
        }
        let undeclared: Vec<String> =
            drv.path_literals().into_iter().filter(|p| !allowed.contains(p)).map(|p| p.to_string()).collect();
        if !undeclared.is_empty() {
            return Err(Error::ClosureViolation(format!(
                "{} mentions undeclared store paths: {}",
                drv.name(),
                undeclared.join(", ")
            )));
        }

        let path = drv.drv_path();
        if self.add_bytes(&path, text.as_bytes(), &refs)? {
            self.drv_writes.fetch_add(1, Ordering::SeqCst);
        }
        let drv = Arc::new(drv);
        self.drv_cache.lock().unwrap().insert(path.clone(), drv.clone());
        self.drv_memo.lock().unwrap().insert(key, path.clone());
        Ok((path, drv))
    }

    /// Number of `.drv` files this process has written.
    pub fn derivation_writes(&self) -> u64 {
        self.drv_writes.load(Ordering::SeqCst)
    }

    /// Reads and parses a `.drv` file, caching the result.
    pub fn read_derivation(&self, path: &StorePath) -> Result<Arc<Derivation>> {
        if let Some(d) = self.drv_cache.lock().unwrap().get(path) {
            return Ok(d.clone());
        }
        let real = self.real_path(path);
        let text = fs::read_to_string(&real).at(&real)?;
        let d = Derivation::parse(&text).map_err(|e| match e {
            fpm_core::DerivationError::Parse(error) => Error::Parse { file: real.clone(), error },
            other => Error::Derivation(other),
        })?;
        if d.root() != self.root_str() {
            return Err(Error::ClosureViolation(format!("{path} belongs to another store ({})", d.root())));
        }
        let d = Arc::new(d);
        self.drv_cache.lock().unwrap().insert(path.clone(), d.clone());
        Ok(d)
    }

    /// Dependency graph of `.drv` paths reachable from `roots`.
    pub fn derivation_graph(&self, roots: &[StorePath]) -> Result<Graph<StorePath>> {
        let mut g = Graph::new();
        let mut seen = BTreeSet::new();
        let mut stack: Vec<StorePath> = roots.to_vec();
        while let Some(p) = stack.pop() {
            if !seen.insert(p.clone()) {
                continue;
            }
            g.add_node(p.clone());
            let d = self.read_derivation(&p)?;
            for input in d.inputs() {
                g.add_edge(p.clone(), input.drv_path.clone());
                stack.push(input.drv_path.clone());
            }
        }
        Ok(g)
    }

    /// Every derivation `drv_path` depends on, and itself, dependencies first.
    /// Ties are broken by path.
    pub fn input_closure(&self, drv_path: &StorePath) -> Result<Vec<(StorePath, Arc<Derivation>)>> {
        let g = self.derivation_graph(std::slice::from_ref(drv_path))?;
        let order = g.topo_order().map_err(cycle_error)?;
        order
            .into_iter()
            .map(|p| {
                let d = self.read_derivation(&p)?;
                Ok((p, d))
            })
            .collect()
    }

    /// File-system location of an external builder.
    pub fn builder_path(&self, d: &Derivation) -> Option<std::path::PathBuf> {
        match d.builder() {
            Builder::Path(p) => Some(self.real_path(p)),
            Builder::Builtin(_) => None,
        }
    }
}

pub(crate) fn cycle_error(c: Cycle<StorePath>) -> Error {
    Error::DependencyCycle(c.0.into_iter().map(|p| p.to_string()).collect())
}
