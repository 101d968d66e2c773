use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use fpm_core::sexpr::{self, SExpr};

use super::builtins::{self, BUILTINS};
use super::fs::BuildFs;
use super::value::{Closure, Params, Value};
use super::EvalError;

/// Deepest nesting of evaluation before giving up.
pub const MAX_DEPTH: usize = 1000;

/// One lexical scope.
pub struct Frame {
    vars: RefCell<HashMap<Rc<str>, Value>>,
    parent: Option<Rc<Frame>>,
}

impl Frame {
    pub fn new(parent: Option<Rc<Frame>>) -> Rc<Frame> {
        Rc::new(Frame { vars: RefCell::new(HashMap::new()), parent })
    }

    pub fn lookup(&self, name: &str) -> Option<Value> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Some(v.clone());
        }
        let mut frame = self.parent.as_ref();
        while let Some(f) = frame {
            if let Some(v) = f.vars.borrow().get(name) {
                return Some(v.clone());
            }
            frame = f.parent.as_ref();
        }
        None
    }

    pub fn define(&self, name: &str, value: Value) {
        self.vars.borrow_mut().insert(Rc::from(name), value);
    }
}

/// A `Write` sink that can be read back, used for build logs in tests.
#[derive(Clone, Default)]
pub struct LogBuffer(Rc<RefCell<Vec<u8>>>);

impl LogBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contents(&self) -> String {
        String::from_utf8_lossy(&self.0.borrow()).into_owned()
    }
}

impl Write for LogBuffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.borrow_mut().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// An evaluator for one build.
///
/// Builtins live in a global frame that is frozen before the build
/// expression runs. Top-level definitions go to a separate frame below it.
pub struct Interp {
    global: Rc<Frame>,
    top: Rc<Frame>,
    frozen: bool,
    pub(crate) cwd: PathBuf,
    pub(crate) fs: Box<dyn BuildFs>,
    pub(crate) env: BTreeMap<String, String>,
    pub(crate) log: Box<dyn Write>,
    depth: usize,
    /// The phase that made the last `run-phases` return false.
    pub(crate) failed_phase: Option<String>,
}

impl Drop for Interp {
    fn drop(&mut self) {
        // Closures stored in these frames point back at them.
        self.top.vars.borrow_mut().clear();
        self.global.vars.borrow_mut().clear();
    }
}

fn sym_name(e: &SExpr) -> Option<&str> {
    match e {
        SExpr::Symbol(s) => Some(s),
        _ => None,
    }
}

fn syntax(msg: impl Into<String>) -> EvalError {
    EvalError::Syntax(msg.into())
}

impl Interp {
    pub fn new(fs: Box<dyn BuildFs>, cwd: PathBuf, env: BTreeMap<String, String>, log: Box<dyn Write>) -> Interp {
        let global = Frame::new(None);
        for b in BUILTINS {
            global.define(b.name, Value::Builtin(b));
        }
        let top = Frame::new(Some(global.clone()));
        Interp { global, top, frozen: false, cwd, fs, env, log, depth: 0, failed_phase: None }
    }

    /// Binds a name in the global frame. Fails once the frame is frozen.
    pub fn define_global(&mut self, name: &str, value: Value) -> Result<(), EvalError> {
        if self.frozen {
            return Err(EvalError::Syntax(format!("cannot define {name}: the global environment is frozen")));
        }
        self.global.define(name, value);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn lookup(&self, name: &str) -> Option<Value> {
        self.top.lookup(name)
    }

    pub fn cwd(&self) -> &Path {
        &self.cwd
    }

    /// Resolves a path against the current directory.
    pub fn resolve(&self, p: &str) -> PathBuf {
        self.cwd.join(p)
    }

    pub fn log_line(&mut self, line: &str) {
        let _ = writeln!(self.log, "{line}");
    }

    /// Evaluates every form of `src` at top level and returns the last value.
    pub fn eval_str(&mut self, src: &str) -> Result<Value, EvalError> {
        let forms = sexpr::parse(src).map_err(EvalError::Parse)?;
        let top = self.top.clone();
        let mut last = Value::Unit;
        for f in &forms {
            last = self.eval_toplevel(f, &top)?;
        }
        Ok(last)
    }

    /// Evaluates one form at top level.
    pub fn eval_form(&mut self, e: &SExpr) -> Result<Value, EvalError> {
        let top = self.top.clone();
        self.eval_toplevel(e, &top)
    }

    /// Evaluates a file's forms in a fresh frame below the top level, after
    /// binding `bindings` there.
    pub fn load_file(&mut self, path: &Path, bindings: &[(Rc<str>, Value)]) -> Result<Value, EvalError> {
        let bytes = self.fs.read(path).map_err(|e| EvalError::io(path, e))?;
        let src = String::from_utf8(bytes)
            .map_err(|_| EvalError::TypeError(format!("{} is not UTF-8 text", path.display())))?;
        let forms = sexpr::parse(&src).map_err(EvalError::Parse)?;
        let frame = Frame::new(Some(self.top.clone()));
        for (k, v) in bindings {
            frame.define(k, v.clone());
        }
        let mut last = Value::Unit;
        for f in &forms {
            last = self.eval_toplevel(f, &frame)?;
        }
        Ok(last)
    }

    /// Loads a module file into the top-level frame.
    pub fn load_module(&mut self, path: &Path) -> Result<(), EvalError> {
        let bytes = self.fs.read(path).map_err(|e| EvalError::io(path, e))?;
        let src = String::from_utf8_lossy(&bytes).into_owned();
        self.eval_str(&src).map(|_| ())
    }

    /// Evaluates a form where `define` is allowed, binding into `frame`.
    pub fn eval_toplevel(&mut self, e: &SExpr, frame: &Rc<Frame>) -> Result<Value, EvalError> {
        if let SExpr::List(items) = e {
            match items.first().and_then(sym_name) {
                Some("define") => return self.eval_define(&items[1..], frame),
                Some("begin") => {
                    let mut last = Value::Unit;
                    for f in &items[1..] {
                        last = self.eval_toplevel(f, frame)?;
                    }
                    return Ok(last);
                }
                _ => {}
            }
        }
        self.eval(e, frame)
    }

    fn eval_define(&mut self, rest: &[SExpr], frame: &Rc<Frame>) -> Result<Value, EvalError> {
        match rest {
            [SExpr::Symbol(name), expr] => {
                let mut v = self.eval(expr, frame)?;
                if let Value::Closure(c) = &v {
                    if c.name.is_none() {
                        v = Value::Closure(Rc::new(Closure {
                            name: Some(Rc::from(name.as_str())),
                            params: c.params.clone(),
                            body: c.body.clone(),
                            env: c.env.clone(),
                        }));
                    }
                }
                frame.define(name, v);
                Ok(Value::Unit)
            }
            [SExpr::List(sig), body @ ..] if !body.is_empty() => {
                let (name, params) = sig.split_first().ok_or_else(|| syntax("define: empty signature"))?;
                let name = sym_name(name).ok_or_else(|| syntax("define: procedure name must be a symbol"))?;
                let params = parse_params(params)?;
                let c =
                    Closure { name: Some(Rc::from(name)), params, body: Rc::from(body.to_vec()), env: frame.clone() };
                frame.define(name, Value::Closure(Rc::new(c)));
                Ok(Value::Unit)
            }
            _ => Err(syntax("malformed define")),
        }
    }

    pub fn eval(&mut self, e: &SExpr, env: &Rc<Frame>) -> Result<Value, EvalError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            self.depth -= 1;
            return Err(EvalError::TooDeep);
        }
        let r = self.eval_inner(e, env);
        self.depth -= 1;
        r
    }

    fn eval_inner(&mut self, e: &SExpr, env: &Rc<Frame>) -> Result<Value, EvalError> {
        match e {
            SExpr::Str(s) => Ok(Value::str(s)),
            SExpr::Int(i) => Ok(Value::Int(*i)),
            SExpr::Bool(b) => Ok(Value::Bool(*b)),
            SExpr::Symbol(s) if s.starts_with("#:") => Ok(Value::sym(s)),
            SExpr::Symbol(s) => env.lookup(s).ok_or_else(|| EvalError::UnboundVariable(s.clone())),
            SExpr::List(items) => {
                let Some((head, rest)) = items.split_first() else {
                    return Err(syntax("cannot evaluate the empty combination ()"));
                };
                if let Some(name) = sym_name(head) {
                    // Special forms are recognized unless the name is
                    // shadowed by a local binding.
                    if is_special(name) && env.lookup(name).is_none() {
                        return self.eval_special(name, rest, env);
                    }
                }
                let f = self.eval(head, env)?;
                let mut args = Vec::with_capacity(rest.len());
                for a in rest {
                    args.push(self.eval(a, env)?);
                }
                self.apply(&f, args)
            }
        }
    }

    fn eval_body(&mut self, body: &[SExpr], env: &Rc<Frame>) -> Result<Value, EvalError> {
        let mut last = Value::Unit;
        for e in body {
            last = self.eval(e, env)?;
        }
        Ok(last)
    }

    fn eval_special(&mut self, name: &str, rest: &[SExpr], env: &Rc<Frame>) -> Result<Value, EvalError> {
        match name {
            "quote" => match rest {
                [datum] => Ok(Value::from_sexpr(datum)),
                _ => Err(syntax("quote takes one datum")),
            },
            "quasiquote" => match rest {
                [datum] => self.quasi(datum, env),
                _ => Err(syntax("quasiquote takes one datum")),
            },
            "unquote" | "unquote-splicing" => Err(syntax(format!("{name} outside quasiquote"))),
            "if" => match rest {
                [c, t] | [c, t, _] => {
                    if self.eval(c, env)?.is_true() {
                        self.eval(t, env)
                    } else if let [_, _, f] = rest {
                        self.eval(f, env)
                    } else {
                        Ok(Value::Unit)
                    }
                }
                _ => Err(syntax("if takes a test, a consequent and an optional alternative")),
            },
            "when" | "unless" => {
                let (test, body) = rest.split_first().ok_or_else(|| syntax(format!("{name} needs a test")))?;
                if self.eval(test, env)?.is_true() == (name == "when") {
                    self.eval_body(body, env)
                } else {
                    Ok(Value::Unit)
                }
            }
            "cond" => {
                for clause in rest {
                    let SExpr::List(parts) = clause else {
                        return Err(syntax("cond clause must be a list"));
                    };
                    let (test, body) = parts.split_first().ok_or_else(|| syntax("empty cond clause"))?;
                    let hit = match sym_name(test) {
                        Some("else") => Value::Bool(true),
                        _ => self.eval(test, env)?,
                    };
                    if hit.is_true() {
                        return if body.is_empty() { Ok(hit) } else { self.eval_body(body, env) };
                    }
                }
                Ok(Value::Unit)
            }
            "and" => {
                let mut last = Value::Bool(true);
                for e in rest {
                    last = self.eval(e, env)?;
                    if !last.is_true() {
                        break;
                    }
                }
                Ok(last)
            }
            "or" => {
                for e in rest {
                    let v = self.eval(e, env)?;
                    if v.is_true() {
                        return Ok(v);
                    }
                }
                Ok(Value::Bool(false))
            }
            "begin" => self.eval_body(rest, env),
            "let" => self.eval_let(rest, env, false),
            "let*" => self.eval_let(rest, env, true),
            "lambda" | "lambda*" => {
                let (params, body) = rest.split_first().ok_or_else(|| syntax("lambda needs parameters"))?;
                if body.is_empty() {
                    return Err(syntax("lambda needs a body"));
                }
                let params = match params {
                    SExpr::Symbol(rest_name) => Params::Positional(Vec::new(), Some(Rc::from(rest_name.as_str()))),
                    SExpr::List(ps) => parse_params(ps)?,
                    _ => return Err(syntax("malformed parameter list")),
                };
                Ok(Value::Closure(Rc::new(Closure {
                    name: None,
                    params,
                    body: Rc::from(body.to_vec()),
                    env: env.clone(),
                })))
            }
            "define" => Err(syntax("define is only allowed at top level")),
            "substitute*" => builtins::substitute_star(self, rest, env),
            _ => unreachable!("is_special covers {name}"),
        }
    }

    fn eval_let(&mut self, rest: &[SExpr], env: &Rc<Frame>, sequential: bool) -> Result<Value, EvalError> {
        // Named let: (let loop ((var init) ...) body ...)
        if let [SExpr::Symbol(loop_name), SExpr::List(bindings), body @ ..] = rest {
            if sequential {
                return Err(syntax("let* cannot be named"));
            }
            let (names, inits) = self.split_bindings(bindings)?;
            let mut args = Vec::with_capacity(inits.len());
            for i in inits {
                args.push(self.eval(i, env)?);
            }
            let frame = Frame::new(Some(env.clone()));
            let proc = Value::Closure(Rc::new(Closure {
                name: Some(Rc::from(loop_name.as_str())),
                params: Params::Positional(names, None),
                body: Rc::from(body.to_vec()),
                env: frame.clone(),
            }));
            frame.define(loop_name, proc.clone());
            return self.apply(&proc, args);
        }
        let [SExpr::List(bindings), body @ ..] = rest else {
            return Err(syntax("let needs a binding list"));
        };
        if body.is_empty() {
            return Err(syntax("let needs a body"));
        }
        let (names, inits) = self.split_bindings(bindings)?;
        let frame = Frame::new(Some(env.clone()));
        for (n, i) in names.iter().zip(inits) {
            let scope = if sequential { &frame } else { env };
            let v = self.eval(i, scope)?;
            frame.define(n, v);
        }
        self.eval_body(body, &frame)
    }

    fn split_bindings<'e>(&self, bindings: &'e [SExpr]) -> Result<(Vec<Rc<str>>, Vec<&'e SExpr>), EvalError> {
        let mut names = Vec::new();
        let mut inits = Vec::new();
        for b in bindings {
            match b {
                SExpr::List(pair) if pair.len() == 2 => {
                    let n = sym_name(&pair[0]).ok_or_else(|| syntax("binding name must be a symbol"))?;
                    names.push(Rc::from(n));
                    inits.push(&pair[1]);
                }
                _ => return Err(syntax("binding must be (name expression)")),
            }
        }
        Ok((names, inits))
    }

    fn quasi(&mut self, datum: &SExpr, env: &Rc<Frame>) -> Result<Value, EvalError> {
        let SExpr::List(items) = datum else {
            return Ok(Value::from_sexpr(datum));
        };
        if let [SExpr::Symbol(head), arg] = items.as_slice() {
            match head.as_str() {
                "unquote" => return self.eval(arg, env),
                "unquote-splicing" => return Err(syntax("unquote-splicing outside a list")),
                "quasiquote" => return Err(syntax("nested quasiquote is not supported")),
                _ => {}
            }
        }
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            if let SExpr::List(inner) = item {
                if let [SExpr::Symbol(h), arg] = inner.as_slice() {
                    if h == "unquote-splicing" {
                        match self.eval(arg, env)? {
                            Value::List(l) => out.extend(l.iter().cloned()),
                            other => {
                                return Err(EvalError::TypeError(format!(
                                    "unquote-splicing needs a list, got {}",
                                    other.type_name()
                                )))
                            }
                        }
                        continue;
                    }
                }
            }
            out.push(self.quasi(item, env)?);
        }
        Ok(Value::list(out))
    }

    /// Calls a procedure.
    pub fn apply(&mut self, f: &Value, args: Vec<Value>) -> Result<Value, EvalError> {
        match f {
            Value::Builtin(b) => {
                if args.len() < b.min_args || b.max_args.is_some_and(|m| args.len() > m) {
                    return Err(EvalError::ArityError {
                        name: b.name.to_string(),
                        expected: match b.max_args {
                            Some(m) if m == b.min_args => format!("{m}"),
                            Some(m) => format!("{} to {m}", b.min_args),
                            None => format!("at least {}", b.min_args),
                        },
                        got: args.len(),
                    });
                }
                (b.func)(self, args)
            }
            Value::Closure(c) => {
                let frame = Frame::new(Some(c.env.clone()));
                let name = || c.name.as_deref().unwrap_or("anonymous procedure").to_string();
                match &c.params {
                    Params::Positional(names, rest) => {
                        let ok = match rest {
                            Some(_) => args.len() >= names.len(),
                            None => args.len() == names.len(),
                        };
                        if !ok {
                            return Err(EvalError::ArityError {
                                name: name(),
                                expected: match rest {
                                    Some(_) => format!("at least {}", names.len()),
                                    None => names.len().to_string(),
                                },
                                got: args.len(),
                            });
                        }
                        let mut args = args.into_iter();
                        for n in names {
                            frame.define(n, args.next().expect("arity checked"));
                        }
                        if let Some(r) = rest {
                            frame.define(r, Value::list(args.collect()));
                        }
                    }
                    Params::Keys(keys) => bind_keys(&frame, keys, args, &name())?,
                }
                self.eval_body(&c.body, &frame)
            }
            other => Err(EvalError::TypeError(format!("cannot call {}, a {}", other, other.type_name()))),
        }
    }
}

/// Binds `lambda*` keys from either a single argument alist or
/// `#:key value` pairs. Missing keys are `#f`; unknown ones are ignored.
fn bind_keys(frame: &Rc<Frame>, keys: &[Rc<str>], args: Vec<Value>, name: &str) -> Result<(), EvalError> {
    let mut found: HashMap<String, Value> = HashMap::new();
    match args.as_slice() {
        [Value::List(alist)] => {
            for entry in alist.iter() {
                if let (Some(Value::Sym(k)), Some(v)) = (entry.car(), entry.cdr()) {
                    found.entry(k.to_string()).or_insert(v);
                }
            }
        }
        _ => {
            if !args.len().is_multiple_of(2) {
                return Err(EvalError::ArityError {
                    name: name.to_string(),
                    expected: "an argument alist or #:key value pairs".into(),
                    got: args.len(),
                });
            }
            for pair in args.chunks(2) {
                match &pair[0] {
                    Value::Sym(k) if k.starts_with("#:") => {
                        found.insert(k[2..].to_string(), pair[1].clone());
                    }
                    other => return Err(EvalError::TypeError(format!("expected a keyword, got {other}"))),
                }
            }
        }
    }
    for k in keys {
        frame.define(k, found.remove(&**k).unwrap_or(Value::Bool(false)));
    }
    Ok(())
}

fn is_special(name: &str) -> bool {
    matches!(
        name,
        "quote"
            | "quasiquote"
            | "unquote"
            | "unquote-splicing"
            | "if"
            | "when"
            | "unless"
            | "cond"
            | "and"
            | "or"
            | "begin"
            | "let"
            | "let*"
            | "lambda"
            | "lambda*"
            | "define"
            | "substitute*"
    )
}

fn parse_params(ps: &[SExpr]) -> Result<Params, EvalError> {
    if ps.first().and_then(sym_name) == Some("#:key") {
        let mut keys = Vec::new();
        for p in &ps[1..] {
            match sym_name(p) {
                Some("#:allow-other-keys") => {}
                Some(n) if !n.starts_with("#:") => keys.push(Rc::from(n)),
                _ => return Err(syntax("malformed #:key parameter list")),
            }
        }
        return Ok(Params::Keys(keys));
    }
    let mut names = Vec::new();
    let mut iter = ps.iter();
    while let Some(p) = iter.next() {
        match sym_name(p) {
            Some(".") => {
                let rest = iter.next().and_then(sym_name).ok_or_else(|| syntax("missing rest parameter after ."))?;
                if iter.next().is_some() {
                    return Err(syntax("only one rest parameter is allowed"));
                }
                return Ok(Params::Positional(names, Some(Rc::from(rest))));
            }
            Some(n) => names.push(Rc::from(n)),
            None => return Err(syntax("parameters must be symbols")),
        }
    }
    Ok(Params::Positional(names, None))
}
