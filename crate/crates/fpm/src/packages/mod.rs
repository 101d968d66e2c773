//! Package and origin records, the `.pkg` file reader, the package
//! registry and compilation of packages to derivations.

mod compile;
mod reader;
mod registry;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use fpm_core::sexpr::SExpr;

use crate::error::{Error, Location, Result};

pub use compile::{origin_derivation, Compiler};
pub use reader::{parse_package_file, parse_package_str};
pub use registry::PackageRegistry;

/// How an origin's file gets into the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OriginMethod {
    /// A file or directory next to the package file.
    LocalFile,
    /// A bootstrap binary shipped with the package collection.
    Seed,
}

impl OriginMethod {
    pub fn parse(s: &str) -> Option<OriginMethod> {
        match s {
            "local-file" => Some(OriginMethod::LocalFile),
            "seed" => Some(OriginMethod::Seed),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OriginMethod::LocalFile => "local-file",
            OriginMethod::Seed => "seed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    pub method: OriginMethod,
    pub uri: PathBuf,
    pub sha256: [u8; 32],
}

/// What thunked fields may look at while they are forced.
#[derive(Clone, Copy)]
pub struct ForceContext<'a> {
    pub system: &'a str,
    pub registry: &'a PackageRegistry,
}

type Compute<T> = dyn Fn(&ForceContext<'_>) -> Result<T> + Send + Sync;
type Slot<T> = Arc<OnceLock<Result<T, String>>>;

/// A field computed on demand for a given system, at most once per
/// system. Failures are remembered too.
pub struct Thunk<T> {
    compute: Box<Compute<T>>,
    cache: Mutex<HashMap<String, Slot<T>>>,
    location: Option<Location>,
}

impl<T: Clone + Send + Sync + 'static> Thunk<T> {
    pub fn new(f: impl Fn(&ForceContext<'_>) -> Result<T> + Send + Sync + 'static) -> Arc<Thunk<T>> {
        Arc::new(Thunk { compute: Box::new(f), cache: Mutex::new(HashMap::new()), location: None })
    }

    pub(crate) fn at(
        location: Location,
        f: impl Fn(&ForceContext<'_>) -> Result<T> + Send + Sync + 'static,
    ) -> Arc<Thunk<T>> {
        Arc::new(Thunk { compute: Box::new(f), cache: Mutex::new(HashMap::new()), location: Some(location) })
    }

    pub fn value(v: T) -> Arc<Thunk<T>> {
        Thunk::new(move |_| Ok(v.clone()))
    }

    pub fn force(&self, cx: &ForceContext<'_>) -> Result<T> {
        let cell = self.cache.lock().unwrap().entry(cx.system.to_string()).or_default().clone();
        match cell.get_or_init(|| (self.compute)(cx).map_err(|e| e.to_string())) {
            Ok(v) => Ok(v.clone()),
            Err(message) => Err(match &self.location {
                Some(location) => Error::PackageSyntax { message: message.clone(), location: location.clone() },
                None => Error::ArgumentError(message.clone()),
            }),
        }
    }

    /// How many systems the thunk has been forced for.
    pub fn forced_count(&self) -> usize {
        self.cache.lock().unwrap().values().filter(|c| c.get().is_some()).count()
    }
}

/// A package named in an input list: either the record itself or a name
/// looked up in the registry when needed.
#[derive(Clone)]
pub enum PackageRef {
    Package(Arc<Package>),
    Named(String),
}

impl PackageRef {
    pub fn resolve(&self, registry: &PackageRegistry) -> Result<Arc<Package>> {
        match self {
            PackageRef::Package(p) => Ok(p.clone()),
            PackageRef::Named(n) => registry.lookup(n),
        }
    }
}

impl fmt::Debug for PackageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PackageRef::Package(p) => write!(f, "{}", p.full_name()),
            PackageRef::Named(n) => write!(f, "(registry-ref {n:?})"),
        }
    }
}

pub type Input = (String, PackageRef);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub struct Package {
    id: u64,
    pub name: String,
    pub version: String,
    pub source: Origin,
    pub build_system: String,
    pub arguments: Arc<Thunk<SExpr>>,
    pub inputs: Arc<Thunk<Vec<Input>>>,
    pub propagated_inputs: Vec<Input>,
    pub synopsis: String,
    pub description: String,
    pub home_page: String,
    pub license: String,
    pub location: Location,
}

impl Package {
    /// A package with empty arguments, inputs and metadata.
    pub fn new(name: &str, version: &str, source: Origin, build_system: &str, location: Location) -> Package {
        Package {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            version: version.into(),
            source,
            build_system: build_system.into(),
            arguments: Thunk::value(SExpr::List(Vec::new())),
            inputs: Thunk::value(Vec::new()),
            propagated_inputs: Vec::new(),
            synopsis: String::new(),
            description: String::new(),
            home_page: String::new(),
            license: String::new(),
            location,
        }
    }

    /// Identity used to memoize derivations; fresh for every record.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// `name@version`.
    pub fn full_name(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    /// A new record with every field shared with `self`, thunks included.
    pub fn inherit(&self) -> Package {
        Package {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            name: self.name.clone(),
            version: self.version.clone(),
            source: self.source.clone(),
            build_system: self.build_system.clone(),
            arguments: self.arguments.clone(),
            inputs: self.inputs.clone(),
            propagated_inputs: self.propagated_inputs.clone(),
            synopsis: self.synopsis.clone(),
            description: self.description.clone(),
            home_page: self.home_page.clone(),
            license: self.license.clone(),
            location: self.location.clone(),
        }
    }

    /// Whether every field but the location is the same, thunks compared
    /// by identity.
    pub fn same_fields(&self, other: &Package) -> bool {
        let same_inputs = |a: &[Input], b: &[Input]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|((la, pa), (lb, pb))| {
                    la == lb
                        && match (pa, pb) {
                            (PackageRef::Package(x), PackageRef::Package(y)) => Arc::ptr_eq(x, y),
                            (PackageRef::Named(x), PackageRef::Named(y)) => x == y,
                            _ => false,
                        }
                })
        };
        self.name == other.name
            && self.version == other.version
            && self.source == other.source
            && self.build_system == other.build_system
            && Arc::ptr_eq(&self.arguments, &other.arguments)
            && Arc::ptr_eq(&self.inputs, &other.inputs)
            && same_inputs(&self.propagated_inputs, &other.propagated_inputs)
            && self.synopsis == other.synopsis
            && self.description == other.description
            && self.home_page == other.home_page
            && self.license == other.license
    }
}

impl fmt::Debug for Package {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Package")
            .field("name", &self.name)
            .field("version", &self.version)
            .field("build_system", &self.build_system)
            .field("location", &self.location)
            .finish_non_exhaustive()
    }
}

const STATIC_FLAG: &str = "--disable-shared";

/// A variant of `p` built with [`STATIC_FLAG`] appended to its configure
/// flags, applied recursively to every input.
pub fn static_variant(p: &Arc<Package>) -> Arc<Package> {
    let memo = Arc::new(Mutex::new(HashMap::new()));
    static_with(p, &memo)
}

type StaticMemo = Arc<Mutex<HashMap<u64, Arc<Package>>>>;

fn static_with(p: &Arc<Package>, memo: &StaticMemo) -> Arc<Package> {
    if let Some(v) = memo.lock().unwrap().get(&p.id) {
        return v.clone();
    }
    let mut v = p.inherit();
    let base_args = p.arguments.clone();
    v.arguments = Thunk::new(move |cx| add_configure_flag(&base_args.force(cx)?, STATIC_FLAG));
    let base_inputs = p.inputs.clone();
    let m = memo.clone();
    v.inputs = Thunk::new(move |cx| {
        base_inputs
            .force(cx)?
            .into_iter()
            .map(|(label, r)| Ok((label, PackageRef::Package(static_with(&r.resolve(cx.registry)?, &m)))))
            .collect()
    });
    v.propagated_inputs = p
        .propagated_inputs
        .iter()
        .map(|(label, r)| {
            let r = match r {
                PackageRef::Package(q) => PackageRef::Package(static_with(q, memo)),
                named => named.clone(),
            };
            (label.clone(), r)
        })
        .collect();
    let v = Arc::new(v);
    memo.lock().unwrap().insert(p.id, v.clone());
    v
}

/// Appends `flag` to the `#:configure-flags` of an argument list, adding
/// the keyword if absent.
fn add_configure_flag(arguments: &SExpr, flag: &str) -> Result<SExpr> {
    let items = arguments.as_list().ok_or_else(|| Error::ArgumentError(format!("expected a list, got {arguments}")))?;
    let mut out = items.to_vec();
    let extra = SExpr::quote(SExpr::list([SExpr::str(flag)]));
    match out.iter().position(|e| e.as_symbol() == Some("#:configure-flags")) {
        Some(i) if i + 1 < out.len() => {
            out[i + 1] = SExpr::list([SExpr::sym("append"), out[i + 1].clone(), extra]);
        }
        _ => {
            out.push(SExpr::sym("#:configure-flags"));
            out.push(extra);
        }
    }
    Ok(SExpr::List(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpm_core::sexpr::parse_one;
    use std::sync::atomic::AtomicUsize;

    fn loc() -> Location {
        Location { file: "t.pkg".into(), line: 1, column: 1 }
    }

    fn origin() -> Origin {
        Origin { method: OriginMethod::LocalFile, uri: "/dev/null".into(), sha256: [0; 32] }
    }

    #[test]
    fn thunks_are_forced_once_per_system() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let t = Thunk::new(move |cx| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(cx.system.to_string())
        });
        let reg = PackageRegistry::default();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for sys in ["a", "b"] {
                        let cx = ForceContext { system: sys, registry: &reg };
                        assert_eq!(t.force(&cx).unwrap(), sys);
                    }
                });
            }
        });
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(t.forced_count(), 2);
    }

    #[test]
    fn inherit_shares_fields() {
        let mut base = Package::new("hello", "2.8", origin(), "gnu-build-system", loc());
        base.synopsis = "Hello".into();
        let v = base.inherit();
        assert!(v.same_fields(&base));
        assert_ne!(v.id(), base.id());
        let mut w = base.inherit();
        w.version = "2.7".into();
        assert!(!w.same_fields(&base));
        assert_eq!(base.version, "2.8");
    }

    #[test]
    fn configure_flag_is_appended() {
        let a = add_configure_flag(&parse_one(r#"(#:tests? #f)"#).unwrap(), "--x").unwrap();
        assert_eq!(a.to_string(), r#"(#:tests? #f #:configure-flags (quote ("--x")))"#);
        let b = add_configure_flag(&parse_one(r#"(#:configure-flags '("--a"))"#).unwrap(), "--x").unwrap();
        assert_eq!(b.to_string(), r#"(#:configure-flags (append (quote ("--a")) (quote ("--x"))))"#);
    }

    #[test]
    fn static_variant_reaches_every_node() {
        let reg = PackageRegistry::default();
        let cx = ForceContext { system: "x86_64-linux", registry: &reg };
        let c = Arc::new(Package::new("c", "1", origin(), "gnu-build-system", loc()));
        let mut b = Package::new("b", "1", origin(), "gnu-build-system", loc());
        b.inputs = Thunk::value(vec![("c".into(), PackageRef::Package(c.clone()))]);
        let b = Arc::new(b);
        let mut a = Package::new("a", "1", origin(), "gnu-build-system", loc());
        a.inputs = Thunk::value(vec![("b".into(), PackageRef::Package(b))]);
        a.arguments = Thunk::value(parse_one(r#"(#:configure-flags '("--with-x"))"#).unwrap());
        let a = Arc::new(a);

        let s = static_variant(&a);
        let mut node = s;
        let mut seen = 0;
        loop {
            let args = node.arguments.force(&cx).unwrap().to_string();
            assert!(args.contains(STATIC_FLAG), "{}: {args}", node.name);
            seen += 1;
            let inputs = node.inputs.force(&cx).unwrap();
            let Some((_, r)) = inputs.first() else { break };
            node = r.resolve(&reg).unwrap();
        }
        assert_eq!(seen, 3);
        assert!(!a.arguments.force(&cx).unwrap().to_string().contains(STATIC_FLAG));
        assert!(!c.arguments.force(&cx).unwrap().to_string().contains(STATIC_FLAG));
    }
}
