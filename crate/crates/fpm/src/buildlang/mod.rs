//! The build language: an s-expression evaluator that runs inside builds,
//! and the host-side bridge that turns build expressions into derivations.

mod bridge;
mod builtins;
mod eval;
pub mod fs;
mod value;

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use fpm_core::sexpr::{self, ParseError, SExpr};
use thiserror::Error;

pub(crate) use bridge::is_interpreter;
pub use bridge::{build_expression_to_derivation, interpreter_derivation, ModuleSearch, INTERPRETER_MARKER};
pub use eval::{Frame, Interp, LogBuffer, MAX_DEPTH};
pub use value::{Builtin, Closure, Params, Value};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unbound variable: {0}")]
    UnboundVariable(String),
    #[error("{name}: wrong number of arguments: expected {expected}, got {got}")]
    ArityError { name: String, expected: String, got: usize },
    #[error("type error: {0}")]
    TypeError(String),
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("parse error: {0}")]
    Parse(ParseError),
    #[error("evaluation nested deeper than {MAX_DEPTH} levels")]
    TooDeep,
    #[error("value has no written form: {0}")]
    NotSerializable(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("invoke {program}: {}", match status {
        Some(s) => format!("exited with status {s}"),
        None => "program not found or killed".to_string(),
    })]
    InvokeFailed { program: String, status: Option<i32> },
    #[error(transparent)]
    Regex(#[from] regex::Error),
    #[error("key not found: {0}")]
    KeyNotFound(String),
    #[error("{0}")]
    User(String),
    #[error("phase `{phase}' failed: {source}")]
    PhaseFailed { phase: String, source: Box<EvalError> },
    #[error("build expression returned #f")]
    ReturnedFalse,
}

impl EvalError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> EvalError {
        EvalError::Io { path: path.as_ref().to_path_buf(), source }
    }
}

/// Reads the `(label path)` list stored in the `build-inputs` variable.
/// Labels starting with `%` name plumbing inputs and are left out.
fn build_inputs(env: &BTreeMap<String, String>) -> Result<Value, EvalError> {
    let Some(text) = env.get("build-inputs") else {
        return Ok(Value::nil());
    };
    let parsed = sexpr::parse_one(text).map_err(EvalError::Parse)?;
    let mut out = Vec::new();
    for entry in parsed.as_list().unwrap_or(&[]) {
        match entry.as_list() {
            Some([SExpr::Str(label), SExpr::Str(path)]) => {
                if !label.starts_with('%') {
                    out.push(Value::cons(Value::str(label), Value::str(path)));
                }
            }
            _ => return Err(EvalError::Syntax(format!("malformed build input {entry}"))),
        }
    }
    Ok(Value::list(out))
}

fn module_names(env: &BTreeMap<String, String>) -> Result<Vec<String>, EvalError> {
    let Some(text) = env.get("modules") else {
        return Ok(Vec::new());
    };
    let parsed = sexpr::parse_one(text).map_err(EvalError::Parse)?;
    parsed
        .as_list()
        .unwrap_or(&[])
        .iter()
        .map(|m| m.as_str().map(str::to_string).ok_or_else(|| EvalError::Syntax(format!("malformed module name {m}"))))
        .collect()
}

/// Runs a build whose builder is the interpreter seed at `interpreter`.
///
/// Everything the build sees comes from `env`: the expression in `expr`,
/// the inputs in `build-inputs` and the modules in `modules`/`module-dir`.
pub fn run_build(
    interpreter: &Path,
    env: &BTreeMap<String, String>,
    build_dir: &Path,
    log: Box<dyn Write>,
) -> Result<(), EvalError> {
    let mut interp = Interp::new(Box::new(fs::OsFs), build_dir.to_path_buf(), env.clone(), log);
    let out = env.get("out").ok_or_else(|| EvalError::UnboundVariable("%output".into()))?;
    interp.define_global("%output", Value::str(out))?;
    interp.define_global("%build-inputs", build_inputs(env)?)?;
    interp.define_global("%build-directory", Value::str(&build_dir.to_string_lossy()))?;
    interp.load_module(&interpreter.join("stdlib.bl"))?;
    let modules = module_names(env)?;
    if !modules.is_empty() {
        let dir = env.get("module-dir").ok_or_else(|| EvalError::UnboundVariable("module-dir".into()))?;
        for m in &modules {
            interp.load_module(&Path::new(dir).join(format!("{m}.bl")))?;
        }
    }
    interp.freeze();
    let expr = env.get("expr").ok_or_else(|| EvalError::UnboundVariable("expr".into()))?;
    let expr = sexpr::parse_one(expr).map_err(EvalError::Parse)?;
    if interp.eval_form(&expr)?.is_true() {
        Ok(())
    } else if let Some(phase) = interp.failed_phase.take() {
        Err(EvalError::PhaseFailed { phase, source: Box::new(EvalError::ReturnedFalse) })
    } else {
        Err(EvalError::ReturnedFalse)
    }
}
