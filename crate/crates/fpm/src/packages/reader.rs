//! Reader for `.pkg` files.
//!
//! A package file is a sequence of `(define name expr)` forms. Expressions
//! are a small declarative language: literals, references to earlier
//! definitions, `quote`/`quasiquote`, `if`/`and`/`or`/`not`, a few string
//! and list procedures, `(current-system)` inside thunked fields,
//! `(registry-ref "name")` for packages defined in other files, and the
//! `package`, `origin` and `base32` constructors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fpm_core::base32;
use fpm_core::sexpr::{parse_nodes, Node, NodeKind, SExpr};

use super::{static_variant, ForceContext, Input, Origin, OriginMethod, Package, PackageRef, Thunk};
use crate::error::{Error, IoContext, Location, Result};

const PACKAGE_FIELDS: [&str; 13] = [
    "inherit",
    "name",
    "version",
    "source",
    "build-system",
    "arguments",
    "inputs",
    "propagated-inputs",
    "synopsis",
    "description",
    "home-page",
    "license",
    "location",
];

const REQUIRED_FIELDS: [&str; 8] =
    ["name", "version", "source", "build-system", "synopsis", "description", "home-page", "license"];

#[derive(Debug, Clone)]
enum Value {
    Str(String),
    Sym(String),
    Int(i64),
    Bool(bool),
    List(Vec<Value>),
    Package(Arc<Package>),
    Ref(String),
    Origin(Origin),
    Hash([u8; 32]),
}

impl Value {
    fn from_sexpr(e: &SExpr) -> Value {
        match e {
            SExpr::Symbol(s) => Value::Sym(s.clone()),
            SExpr::Str(s) => Value::Str(s.clone()),
            SExpr::Int(i) => Value::Int(*i),
            SExpr::Bool(b) => Value::Bool(*b),
            SExpr::List(items) => Value::List(items.iter().map(Value::from_sexpr).collect()),
        }
    }

    fn to_sexpr(&self) -> Option<SExpr> {
        Some(match self {
            Value::Str(s) => SExpr::Str(s.clone()),
            Value::Sym(s) => SExpr::Symbol(s.clone()),
            Value::Int(i) => SExpr::Int(*i),
            Value::Bool(b) => SExpr::Bool(*b),
            Value::List(items) => SExpr::List(items.iter().map(Value::to_sexpr).collect::<Option<_>>()?),
            _ => return None,
        })
    }

    fn is_true(&self) -> bool {
        !matches!(self, Value::Bool(false))
    }

    fn describe(&self) -> String {
        match self {
            Value::Package(p) => format!("#<package {}>", p.full_name()),
            Value::Ref(n) => format!("#<registry-ref {n}>"),
            Value::Origin(o) => format!("#<origin {}>", o.uri.display()),
            Value::Hash(h) => format!("#<sha256 {}>", base32::encode(h)),
            v => v.to_sexpr().map(|e| e.to_string()).unwrap_or_default(),
        }
    }

    fn equal(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Package(a), Value::Package(b)) => Arc::ptr_eq(a, b),
            (Value::List(a), Value::List(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.equal(y)),
            _ => match (self.to_sexpr(), other.to_sexpr()) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            },
        }
    }
}

type Env = Arc<BTreeMap<String, Value>>;

/// Evaluation state shared by every form of one file.
#[derive(Clone)]
struct Reader {
    file: Arc<PathBuf>,
    dir: Arc<PathBuf>,
}

impl Reader {
    fn location(&self, node: &Node) -> Location {
        Location { file: self.file.to_path_buf(), line: node.pos.line as usize, column: node.pos.col as usize }
    }

    fn error(&self, node: &Node, message: impl Into<String>) -> Error {
        Error::PackageSyntax { message: message.into(), location: self.location(node) }
    }

    fn eval(&self, node: &Node, env: &Env, system: Option<&str>) -> Result<Value> {
        match &node.kind {
            NodeKind::Str(s) => Ok(Value::Str(s.clone())),
            NodeKind::Int(i) => Ok(Value::Int(*i)),
            NodeKind::Bool(b) => Ok(Value::Bool(*b)),
            NodeKind::Symbol(s) if s.starts_with("#:") => Ok(Value::Sym(s.clone())),
            NodeKind::Symbol(s) => {
                env.get(s).cloned().ok_or_else(|| self.error(node, format!("unbound variable: {s}")))
            }
            NodeKind::List(items) => {
                let Some((head, args)) = items.split_first() else {
                    return Ok(Value::List(Vec::new()));
                };
                let Some(op) = head.as_symbol() else {
                    return Err(self.error(head, "expected a form name"));
                };
                self.form(node, op, args, env, system)
            }
        }
    }

    fn eval_all(&self, args: &[Node], env: &Env, system: Option<&str>) -> Result<Vec<Value>> {
        args.iter().map(|a| self.eval(a, env, system)).collect()
    }

    fn string(&self, node: &Node, v: Value) -> Result<String> {
        match v {
            Value::Str(s) => Ok(s),
            v => Err(self.error(node, format!("expected a string, got {}", v.describe()))),
        }
    }

    fn arity(&self, node: &Node, op: &str, args: &[Node], n: usize) -> Result<()> {
        if args.len() == n {
            Ok(())
        } else {
            Err(self.error(node, format!("{op}: expected {n} arguments, got {}", args.len())))
        }
    }

    fn form(&self, node: &Node, op: &str, args: &[Node], env: &Env, system: Option<&str>) -> Result<Value> {
        match op {
            "quote" => {
                self.arity(node, op, args, 1)?;
                Ok(Value::from_sexpr(&args[0].to_sexpr()))
            }
            "quasiquote" => {
                self.arity(node, op, args, 1)?;
                self.quasi(&args[0], env, system)
            }
            "unquote" | "unquote-splicing" => Err(self.error(node, format!("{op} outside quasiquote"))),
            "if" => {
                if args.len() != 2 && args.len() != 3 {
                    return Err(self.error(node, "if: expected 2 or 3 arguments"));
                }
                if self.eval(&args[0], env, system)?.is_true() {
                    self.eval(&args[1], env, system)
                } else if let Some(alt) = args.get(2) {
                    self.eval(alt, env, system)
                } else {
                    Ok(Value::Bool(false))
                }
            }
            "and" => {
                let mut last = Value::Bool(true);
                for a in args {
                    last = self.eval(a, env, system)?;
                    if !last.is_true() {
                        break;
                    }
                }
                Ok(last)
            }
            "or" => {
                for a in args {
                    let v = self.eval(a, env, system)?;
                    if v.is_true() {
                        return Ok(v);
                    }
                }
                Ok(Value::Bool(false))
            }
            "not" => {
                self.arity(node, op, args, 1)?;
                Ok(Value::Bool(!self.eval(&args[0], env, system)?.is_true()))
            }
            "current-system" => {
                self.arity(node, op, args, 0)?;
                system
                    .map(|s| Value::Str(s.to_string()))
                    .ok_or_else(|| self.error(node, "current-system is only available in thunked fields"))
            }
            "string-append" => {
                let mut out = String::new();
                for (a, v) in args.iter().zip(self.eval_all(args, env, system)?) {
                    out.push_str(&self.string(a, v)?);
                }
                Ok(Value::Str(out))
            }
            "string=?" | "string-prefix?" => {
                self.arity(node, op, args, 2)?;
                let a = self.string(&args[0], self.eval(&args[0], env, system)?)?;
                let b = self.string(&args[1], self.eval(&args[1], env, system)?)?;
                Ok(Value::Bool(if op == "string=?" { a == b } else { b.starts_with(&a) }))
            }
            "equal?" => {
                self.arity(node, op, args, 2)?;
                let a = self.eval(&args[0], env, system)?;
                Ok(Value::Bool(a.equal(&self.eval(&args[1], env, system)?)))
            }
            "list" => Ok(Value::List(self.eval_all(args, env, system)?)),
            "cons" => {
                self.arity(node, op, args, 2)?;
                let head = self.eval(&args[0], env, system)?;
                match self.eval(&args[1], env, system)? {
                    Value::List(mut tail) => {
                        tail.insert(0, head);
                        Ok(Value::List(tail))
                    }
                    v => Err(self.error(&args[1], format!("cons: expected a list, got {}", v.describe()))),
                }
            }
            "append" => {
                let mut out = Vec::new();
                for (a, v) in args.iter().zip(self.eval_all(args, env, system)?) {
                    match v {
                        Value::List(items) => out.extend(items),
                        v => return Err(self.error(a, format!("append: expected a list, got {}", v.describe()))),
                    }
                }
                Ok(Value::List(out))
            }
            "base32" => {
                self.arity(node, op, args, 1)?;
                let s = self.string(&args[0], self.eval(&args[0], env, system)?)?;
                let bytes = base32::decode_exact(&s, 32)
                    .map_err(|e| self.error(&args[0], format!("invalid sha256 {s:?}: {e}")))?;
                Ok(Value::Hash(bytes.try_into().expect("decode_exact returns 32 bytes")))
            }
            "registry-ref" => {
                self.arity(node, op, args, 1)?;
                Ok(Value::Ref(self.string(&args[0], self.eval(&args[0], env, system)?)?))
            }
            "static-package" => {
                self.arity(node, op, args, 1)?;
                match self.eval(&args[0], env, system)? {
                    Value::Package(p) => Ok(Value::Package(static_variant(&p))),
                    v => Err(self.error(&args[0], format!("expected a package, got {}", v.describe()))),
                }
            }
            "origin" => self.origin(node, args, env, system).map(Value::Origin),
            "package" => self.package(node, env, system).map(|p| Value::Package(Arc::new(p))),
            _ => Err(self.error(node, format!("unknown form {op:?}"))),
        }
    }

    fn quasi(&self, node: &Node, env: &Env, system: Option<&str>) -> Result<Value> {
        let NodeKind::List(items) = &node.kind else {
            return Ok(Value::from_sexpr(&node.to_sexpr()));
        };
        if let Some(("unquote", [e])) = node.as_form() {
            return self.eval(e, env, system);
        }
        let mut out = Vec::new();
        for item in items {
            if let Some(("unquote-splicing", [e])) = item.as_form() {
                match self.eval(e, env, system)? {
                    Value::List(xs) => out.extend(xs),
                    v => {
                        return Err(self.error(item, format!("unquote-splicing: expected a list, got {}", v.describe())))
                    }
                }
            } else {
                out.push(self.quasi(item, env, system)?);
            }
        }
        Ok(Value::List(out))
    }

    /// Splits `(field value)` clauses, rejecting unknown and repeated ones.
    fn fields<'n>(&self, args: &'n [Node], known: &[&str]) -> Result<BTreeMap<&'n str, &'n Node>> {
        let mut out = BTreeMap::new();
        for clause in args {
            let Some((name, [value])) = clause.as_form() else {
                return Err(self.error(clause, "expected a (field value) clause"));
            };
            if !known.contains(&name) {
                return Err(Error::UnknownField { field: name.to_string(), location: self.location(clause) });
            }
            if out.insert(name, value).is_some() {
                return Err(self.error(clause, format!("field {name:?} given twice")));
            }
        }
        Ok(out)
    }

    fn origin(&self, node: &Node, args: &[Node], env: &Env, system: Option<&str>) -> Result<Origin> {
        let f = self.fields(args, &["method", "uri", "sha256"])?;
        let get = |name: &str| {
            f.get(name)
                .copied()
                .ok_or_else(|| Error::MissingField { field: name.to_string(), location: self.location(node) })
        };
        let m = get("method")?;
        let method = m
            .as_symbol()
            .or_else(|| m.as_str())
            .and_then(OriginMethod::parse)
            .ok_or_else(|| self.error(m, "origin method must be local-file or seed"))?;
        let u = get("uri")?;
        let uri = self.string(u, self.eval(u, env, system)?)?;
        let h = get("sha256")?;
        let sha256 = match self.eval(h, env, system)? {
            Value::Hash(h) => h,
            v => return Err(self.error(h, format!("sha256 must be (base32 \"...\"), got {}", v.describe()))),
        };
        Ok(Origin { method, uri: self.dir.join(uri), sha256 })
    }

    fn inputs(&self, node: &Node, v: Value) -> Result<Vec<Input>> {
        let bad =
            |v: &Value| self.error(node, format!("expected a list of (label package) pairs, got {}", v.describe()));
        let Value::List(items) = v else { return Err(bad(&v)) };
        let mut out: Vec<Input> = Vec::new();
        for item in items {
            let (label, r) = match &item {
                Value::List(pair) => match &pair[..] {
                    [Value::Str(l), Value::Package(p)] => (l.clone(), PackageRef::Package(p.clone())),
                    [Value::Str(l), Value::Ref(n)] => (l.clone(), PackageRef::Named(n.clone())),
                    _ => return Err(bad(&item)),
                },
                _ => return Err(bad(&item)),
            };
            if out.iter().any(|(l, _)| *l == label) {
                return Err(self.error(node, format!("input label {label:?} appears twice")));
            }
            out.push((label, r));
        }
        Ok(out)
    }

    /// The location recorded is that of the `package` symbol.
    fn package(&self, node: &Node, env: &Env, system: Option<&str>) -> Result<Package> {
        let items = node.as_list().expect("package forms are lists");
        let location = self.location(&items[0]);
        let f = self.fields(&items[1..], &PACKAGE_FIELDS)?;
        if f.contains_key("location") {
            return Err(Error::UnknownField { field: "location".into(), location });
        }
        let base = match f.get("inherit") {
            Some(n) => match self.eval(n, env, system)? {
                Value::Package(p) => Some(p),
                v => return Err(self.error(n, format!("inherit: expected a package, got {}", v.describe()))),
            },
            None => None,
        };
        if base.is_none() {
            if let Some(missing) = REQUIRED_FIELDS.iter().find(|r| !f.contains_key(*r)) {
                return Err(Error::MissingField { field: missing.to_string(), location });
            }
        }
        let str_field = |name: &str| -> Result<Option<String>> {
            match f.get(name) {
                Some(n) => {
                    let s = self.string(n, self.eval(n, env, system)?)?;
                    if s.is_empty() && (name == "name" || name == "version") {
                        return Err(self.error(n, format!("{name} must not be empty")));
                    }
                    Ok(Some(s))
                }
                None => Ok(None),
            }
        };
        let word_field = |name: &str| -> Result<Option<String>> {
            match f.get(name) {
                Some(n) => n
                    .as_symbol()
                    .or_else(|| n.as_str())
                    .map(|s| Some(s.to_string()))
                    .ok_or_else(|| self.error(n, format!("{name} must be a symbol"))),
                None => Ok(None),
            }
        };
        let source = match f.get("source") {
            Some(n) => match self.eval(n, env, system)? {
                Value::Origin(o) => Some(o),
                v => return Err(self.error(n, format!("source must be an origin, got {}", v.describe()))),
            },
            None => None,
        };

        let mut p = match &base {
            Some(b) => {
                let mut p = b.inherit();
                p.location = location.clone();
                p
            }
            None => Package::new("", "", source.clone().expect("required field checked"), "", location.clone()),
        };
        if let Some(v) = str_field("name")? {
            p.name = v;
        }
        if let Some(v) = str_field("version")? {
            p.version = v;
        }
        if let Some(o) = source {
            p.source = o;
        }
        if let Some(v) = word_field("build-system")? {
            p.build_system = v;
        }
        if let Some(v) = str_field("synopsis")? {
            p.synopsis = v;
        }
        if let Some(v) = str_field("description")? {
            p.description = v;
        }
        if let Some(v) = str_field("home-page")? {
            p.home_page = v;
        }
        if let Some(v) = word_field("license")? {
            p.license = v;
        }
        if let Some(n) = f.get("propagated-inputs") {
            p.propagated_inputs = self.inputs(n, self.eval(n, env, system)?)?;
        }
        if let Some(n) = f.get("arguments") {
            let (r, n, env) = (self.clone(), (*n).clone(), env.clone());
            p.arguments = Thunk::at(self.location(&n), move |cx: &ForceContext<'_>| {
                let v = r.eval(&n, &env, Some(cx.system))?;
                v.to_sexpr().ok_or_else(|| r.error(&n, format!("arguments must be plain data, got {}", v.describe())))
            });
        }
        if let Some(n) = f.get("inputs") {
            let (r, n, env) = (self.clone(), (*n).clone(), env.clone());
            p.inputs = Thunk::at(self.location(&n), move |cx: &ForceContext<'_>| {
                r.inputs(&n, r.eval(&n, &env, Some(cx.system))?)
            });
        }
        Ok(p)
    }
}

/// Reads package definitions from `text`, reporting locations in `file`.
/// Relative origin URIs are resolved against `file`'s directory.
pub fn parse_package_str(file: &Path, text: &str) -> Result<Vec<(String, Arc<Package>)>> {
    let nodes = parse_nodes(text).map_err(|error| Error::Parse { file: file.to_path_buf(), error })?;
    let reader = Reader {
        file: Arc::new(file.to_path_buf()),
        dir: Arc::new(file.parent().map(Path::to_path_buf).unwrap_or_default()),
    };
    let mut env: Env = Arc::new(BTreeMap::new());
    let mut out = Vec::new();
    for node in &nodes {
        let (name, expr) = match node.as_form() {
            Some(("define", [name, expr])) => match name.as_symbol() {
                Some(n) if !n.starts_with("#:") => (n, expr),
                _ => return Err(reader.error(name, "define: expected a variable name")),
            },
            _ => return Err(reader.error(node, "only (define name expression) forms are allowed at top level")),
        };
        let v = reader.eval(expr, &env, None)?;
        if let Value::Package(p) = &v {
            out.push((name.to_string(), p.clone()));
        }
        Arc::make_mut(&mut env).insert(name.to_string(), v);
    }
    Ok(out)
}

/// Reads the package definitions of a `.pkg` file.
pub fn parse_package_file(path: &Path) -> Result<Vec<(String, Arc<Package>)>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_package_str(path, &text)
}
