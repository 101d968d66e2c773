//! The derivation record and its canonical on-disk form.
//!
//! A derivation is written as a single s-expression with its fields in a
//! fixed order:
//!
//! ```text
//! (derivation
//!   (name "example-1.0")
//!   (system "x86_64-linux")
//!   (builder "/store/...-static-bash")
//!   (args "-c" "echo hello > $out")
//!   (env ("out" "/store/...-example-1.0"))
//!   (inputs)
//!   (sources "/store/...-static-bash")
//!   (output "/store/...-example-1.0"))
//! ```
//!
//! The output path is computed by writing the record with a placeholder of
//! 32 zeros in place of the output (both in `output` and in the `out`
//! environment entry), hashing that text and deriving an output path from
//! it.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scan::find_path_literals;
use crate::sexpr::{self, write_string_literal, Node, NodeKind, ParseError, Pos};
use crate::store_path::{PathTag, StorePath, StorePathError};

/// Stand-in written where the output path goes while the output path itself
/// is being computed.
pub const OUTPUT_PLACEHOLDER: &str = "00000000000000000000000000000000";

const FIELDS: [&str; 8] = ["name", "system", "builder", "args", "env", "inputs", "sources", "output"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DerivationError {
    #[error("environment key {0:?} is reserved")]
    ReservedKey(String),
    #[error("duplicate environment key {0:?}")]
    DuplicateKey(String),
    #[error(transparent)]
    StorePath(#[from] StorePathError),
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("{pos}: unknown derivation field {field:?}")]
    UnknownField { field: String, pos: Pos },
    #[error("{pos}: derivation has no {field:?} field")]
    MissingField { field: &'static str, pos: Pos },
    #[error("unknown builtin builder {0:?}")]
    UnknownBuiltin(String),
}

/// Builders that run inside the build engine without an external process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BuiltinTag {
    /// Copies (or, for `.tar` archives, extracts) the single source to `$out`.
    UnpackSeed,
    /// Writes the `text` environment value to `$out`.
    WriteText,
}

impl BuiltinTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinTag::UnpackSeed => "builtin:unpack-seed",
            BuiltinTag::WriteText => "builtin:write-text",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self, DerivationError> {
        match s {
            "builtin:unpack-seed" => Ok(BuiltinTag::UnpackSeed),
            "builtin:write-text" => Ok(BuiltinTag::WriteText),
            other => Err(DerivationError::UnknownBuiltin(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Builder {
    Path(StorePath),
    Builtin(BuiltinTag),
}

impl fmt::Display for Builder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Builder::Path(p) => write!(f, "{p}"),
            Builder::Builtin(t) => f.write_str(t.as_str()),
        }
    }
}

/// A dependency on another derivation, labelled with the input it satisfies.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DerivationInput {
    pub label: String,
    pub drv_path: StorePath,
}

impl DerivationInput {
    pub fn new(label: impl Into<String>, drv_path: StorePath) -> Self {
        DerivationInput { label: label.into(), drv_path }
    }
}

/// Every field of a derivation except the computed output path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DerivationSpec {
    pub name: String,
    pub system: String,
    pub builder: Builder,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    pub inputs: Vec<DerivationInput>,
    pub sources: Vec<StorePath>,
}

impl DerivationSpec {
    pub fn new(name: impl Into<String>, system: impl Into<String>, builder: Builder) -> Self {
        DerivationSpec {
            name: name.into(),
            system: system.into(),
            builder,
            args: Vec::new(),
            env: Vec::new(),
            inputs: Vec::new(),
            sources: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), DerivationError> {
        crate::store_path::validate_name(&self.name)?;
        crate::store_path::validate_name(&format!("{}.drv", self.name))?;
        let mut seen = BTreeSet::new();
        for (k, _) in &self.env {
            if k == "out" {
                return Err(DerivationError::ReservedKey(k.clone()));
            }
            if !seen.insert(k.as_str()) {
                return Err(DerivationError::DuplicateKey(k.clone()));
            }
        }
        Ok(())
    }
}

/// A build promise: builder, arguments, environment and inputs, plus the
/// output path they determine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Derivation {
    spec: DerivationSpec,
    output: StorePath,
}

impl Derivation {
    /// Validates `spec` and computes its output path under `root`.
    pub fn new(root: &str, spec: DerivationSpec) -> Result<Derivation, DerivationError> {
        spec.validate()?;
        let output = compute_output(root, &spec)?;
        Ok(Derivation { spec, output })
    }

    pub fn spec(&self) -> &DerivationSpec {
        &self.spec
    }

    pub fn into_spec(self) -> DerivationSpec {
        self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn system(&self) -> &str {
        &self.spec.system
    }

    pub fn builder(&self) -> &Builder {
        &self.spec.builder
    }

    pub fn args(&self) -> &[String] {
        &self.spec.args
    }

    /// Declared environment, without the implicit `out` entry.
    pub fn env(&self) -> &[(String, String)] {
        &self.spec.env
    }

    pub fn env_value(&self, key: &str) -> Option<&str> {
        if key == "out" {
            return Some(self.output.as_str());
        }
        self.spec.env.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Declared environment followed by `out`.
    pub fn env_with_out(&self) -> Vec<(String, String)> {
        let mut env = self.spec.env.clone();
        env.push(("out".to_owned(), self.output.to_string()));
        env
    }

    pub fn inputs(&self) -> &[DerivationInput] {
        &self.spec.inputs
    }

    pub fn sources(&self) -> &[StorePath] {
        &self.spec.sources
    }

    pub fn output(&self) -> &StorePath {
        &self.output
    }

    pub fn root(&self) -> &str {
        self.output.root()
    }

    /// Canonical serialization.
    pub fn write(&self) -> String {
        write_with_output(&self.spec, self.output.as_str())
    }

    /// Store path of the `.drv` file holding [`Derivation::write`].
    pub fn drv_path(&self) -> StorePath {
        let digest: [u8; 32] = Sha256::digest(self.write().as_bytes()).into();
        StorePath::make(self.root(), PathTag::Derivation, &digest, &format!("{}.drv", self.spec.name))
            .expect("derivation name validated at construction")
    }

    /// Whether the recorded output path matches the other fields.
    pub fn is_consistent(&self) -> bool {
        compute_output(self.root(), &self.spec).as_ref() == Ok(&self.output)
    }

    /// Store paths mentioned in the builder, arguments and environment.
    pub fn path_literals(&self) -> BTreeSet<StorePath> {
        let root = self.root();
        let mut found = BTreeSet::new();
        if let Builder::Path(p) = &self.spec.builder {
            found.insert(p.clone());
        }
        let texts = self.spec.args.iter().chain(self.spec.env.iter().flat_map(|(k, v)| [k, v]));
        for text in texts {
            found.extend(find_path_literals(text.as_bytes(), root));
        }
        found
    }

    /// Parses the canonical form. Fields may appear in any order.
    pub fn parse(text: &str) -> Result<Derivation, DerivationError> {
        let nodes = sexpr::parse_nodes(text)?;
        let top = match nodes.as_slice() {
            [one] => one,
            [] => return Err(ParseError::new(Pos { line: 1, col: 1 }, "empty derivation").into()),
            [_, second, ..] => return Err(second.error("trailing data after derivation").into()),
        };
        let fields = match top.as_form() {
            Some(("derivation", fields)) => fields,
            _ => return Err(top.error("expected (derivation ...)").into()),
        };
        let mut slots: [Option<&[Node]>; 8] = [None; 8];
        for field in fields {
            let (head, body) = field.as_form().ok_or_else(|| field.error("expected a (field ...) form"))?;
            let idx = FIELDS
                .iter()
                .position(|f| *f == head)
                .ok_or_else(|| DerivationError::UnknownField { field: head.to_string(), pos: field.pos })?;
            if slots[idx].is_some() {
                return Err(field.error(format!("duplicate field {head:?}")).into());
            }
            slots[idx] = Some(body);
        }
        let get = |i: usize| slots[i].ok_or(DerivationError::MissingField { field: FIELDS[i], pos: top.pos });

        let output_node = single(get(7)?, top, "output")?;
        let output = store_path_node(output_node, None)?;
        let root = output.root().to_string();

        let name = string_node(single(get(0)?, top, "name")?)?.to_string();
        let system = string_node(single(get(1)?, top, "system")?)?.to_string();
        let builder_node = single(get(2)?, top, "builder")?;
        let builder = match &builder_node.kind {
            NodeKind::Str(_) => Builder::Path(store_path_node(builder_node, Some(&root))?),
            NodeKind::Symbol(s) => Builder::Builtin(BuiltinTag::from_tag(s)?),
            _ => return Err(builder_node.error("builder must be a path or builtin").into()),
        };
        let args = get(3)?.iter().map(|n| string_node(n).map(str::to_string)).collect::<Result<Vec<_>, _>>()?;

        let mut env = Vec::new();
        let mut out_value = None;
        for pair in get(4)? {
            let (k, v) = match pair.as_list() {
                Some([k, v]) => (string_node(k)?, string_node(v)?),
                _ => return Err(pair.error("expected (\"key\" \"value\")").into()),
            };
            if k == "out" {
                if out_value.is_some() {
                    return Err(DerivationError::DuplicateKey(k.to_string()));
                }
                out_value = Some((v, pair));
            } else {
                env.push((k.to_string(), v.to_string()));
            }
        }
        match out_value {
            Some((v, _)) if v == output.as_str() => {}
            Some((_, node)) => return Err(node.error("\"out\" differs from output").into()),
            None => return Err(top.error("environment lacks \"out\"").into()),
        }

        let inputs = get(5)?
            .iter()
            .map(|pair| match pair.as_list() {
                Some([label, path]) => Ok(DerivationInput {
                    label: string_node(label)?.to_string(),
                    drv_path: store_path_node(path, Some(&root))?,
                }),
                _ => Err(pair.error("expected (\"label\" \"path\")").into()),
            })
            .collect::<Result<Vec<_>, DerivationError>>()?;
        let sources = get(6)?.iter().map(|n| store_path_node(n, Some(&root))).collect::<Result<Vec<_>, _>>()?;

        let spec = DerivationSpec { name, system, builder, args, env, inputs, sources };
        spec.validate()?;
        Ok(Derivation { spec, output })
    }
}

fn single<'a>(body: &'a [Node], top: &Node, field: &str) -> Result<&'a Node, DerivationError> {
    match body {
        [one] => Ok(one),
        _ => Err(top.error(format!("field {field:?} takes exactly one value")).into()),
    }
}

fn string_node(node: &Node) -> Result<&str, DerivationError> {
    node.as_str().ok_or_else(|| node.error("expected a string").into())
}

fn store_path_node(node: &Node, root: Option<&str>) -> Result<StorePath, DerivationError> {
    let s = string_node(node)?;
    let parsed = match root {
        Some(root) => StorePath::parse_in(root, s),
        None => StorePath::parse(s),
    };
    parsed.map_err(|e| node.error(e.to_string()).into())
}

fn compute_output(root: &str, spec: &DerivationSpec) -> Result<StorePath, DerivationError> {
    let text = write_with_output(spec, OUTPUT_PLACEHOLDER);
    let digest: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    Ok(StorePath::make(root, PathTag::Output, &digest, &spec.name)?)
}

fn write_with_output(spec: &DerivationSpec, output: &str) -> String {
    let mut out = String::new();
    write_canonical(&mut out, spec, output).expect("writing to a String cannot fail");
    out
}

fn write_canonical(out: &mut String, spec: &DerivationSpec, output: &str) -> fmt::Result {
    out.write_str("(derivation\n  (name ")?;
    write_string_literal(out, &spec.name)?;
    out.write_str(")\n  (system ")?;
    write_string_literal(out, &spec.system)?;
    out.write_str(")\n  (builder ")?;
    match &spec.builder {
        Builder::Path(p) => write_string_literal(out, p.as_str())?,
        Builder::Builtin(t) => out.write_str(t.as_str())?,
    }
    out.write_str(")\n  (args")?;
    for a in &spec.args {
        out.write_char(' ')?;
        write_string_literal(out, a)?;
    }
    out.write_str(")\n  (env")?;
    let out_pair = ("out", output);
    for (k, v) in spec.env.iter().map(|(k, v)| (k.as_str(), v.as_str())).chain(core::iter::once(out_pair)) {
        out.write_str(" (")?;
        write_string_literal(out, k)?;
        out.write_char(' ')?;
        write_string_literal(out, v)?;
        out.write_char(')')?;
    }
    out.write_str(")\n  (inputs")?;
    for input in &spec.inputs {
        out.write_str(" (")?;
        write_string_literal(out, &input.label)?;
        out.write_char(' ')?;
        write_string_literal(out, input.drv_path.as_str())?;
        out.write_char(')')?;
    }
    out.write_str(")\n  (sources")?;
    for s in &spec.sources {
        out.write_char(' ')?;
        write_string_literal(out, s.as_str())?;
    }
    out.write_str(")\n  (output ")?;
    write_string_literal(out, output)?;
    out.write_str("))\n")
}
