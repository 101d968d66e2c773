use std::fmt;
use std::rc::Rc;

use fpm_core::sexpr::{write_string_literal, SExpr};

use super::eval::Frame;
use super::{EvalError, Interp};

pub type BuiltinFn = fn(&mut Interp, Vec<Value>) -> Result<Value, EvalError>;

/// A procedure implemented in Rust.
pub struct Builtin {
    pub name: &'static str,
    pub min_args: usize,
    /// `None` for variadic procedures.
    pub max_args: Option<usize>,
    pub func: BuiltinFn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    /// Positional parameters, optionally followed by a rest parameter.
    Positional(Vec<Rc<str>>, Option<Rc<str>>),
    /// `lambda*` keyword parameters, looked up by name in an argument alist.
    Keys(Vec<Rc<str>>),
}

pub struct Closure {
    pub name: Option<Rc<str>>,
    pub params: Params,
    pub body: Rc<[SExpr]>,
    pub env: Rc<Frame>,
}

#[derive(Clone)]
pub enum Value {
    Unit,
    Bool(bool),
    Int(i64),
    Str(Rc<str>),
    Sym(Rc<str>),
    /// A proper list; `'()` is the empty list.
    List(Rc<Vec<Value>>),
    /// A pair whose tail is not a list.
    Pair(Rc<(Value, Value)>),
    Closure(Rc<Closure>),
    Builtin(&'static Builtin),
}

impl Value {
    pub fn str(s: &str) -> Value {
        Value::Str(Rc::from(s))
    }

    pub fn sym(s: &str) -> Value {
        Value::Sym(Rc::from(s))
    }

    pub fn list(items: Vec<Value>) -> Value {
        Value::List(Rc::new(items))
    }

    pub fn nil() -> Value {
        Value::List(Rc::new(Vec::new()))
    }

    pub fn cons(head: Value, tail: Value) -> Value {
        match tail {
            Value::List(l) => {
                let mut items = Vec::with_capacity(l.len() + 1);
                items.push(head);
                items.extend(l.iter().cloned());
                Value::List(Rc::new(items))
            }
            other => Value::Pair(Rc::new((head, other))),
        }
    }

    pub fn is_true(&self) -> bool {
        !matches!(self, Value::Bool(false))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Unit => "unspecified",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Str(_) => "string",
            Value::Sym(_) => "symbol",
            Value::List(l) if l.is_empty() => "empty list",
            Value::List(_) => "list",
            Value::Pair(_) => "pair",
            Value::Closure(_) | Value::Builtin(_) => "procedure",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_procedure(&self) -> bool {
        matches!(self, Value::Closure(_) | Value::Builtin(_))
    }

    /// First element of a pair or non-empty list.
    pub fn car(&self) -> Option<Value> {
        match self {
            Value::List(l) => l.first().cloned(),
            Value::Pair(p) => Some(p.0.clone()),
            _ => None,
        }
    }

    /// Everything after the first element.
    pub fn cdr(&self) -> Option<Value> {
        match self {
            Value::List(l) if !l.is_empty() => Some(Value::list(l[1..].to_vec())),
            Value::Pair(p) => Some(p.1.clone()),
            _ => None,
        }
    }

    pub fn from_sexpr(e: &SExpr) -> Value {
        match e {
            SExpr::Symbol(s) => Value::sym(s),
            SExpr::Str(s) => Value::str(s),
            SExpr::Int(i) => Value::Int(*i),
            SExpr::Bool(b) => Value::Bool(*b),
            SExpr::List(items) => Value::list(items.iter().map(Value::from_sexpr).collect()),
        }
    }

    /// Converts data back to an s-expression. Procedures, pairs and the
    /// unspecified value have no written form.
    pub fn to_sexpr(&self) -> Result<SExpr, EvalError> {
        Ok(match self {
            Value::Bool(b) => SExpr::Bool(*b),
            Value::Int(i) => SExpr::Int(*i),
            Value::Str(s) => SExpr::Str(s.to_string()),
            Value::Sym(s) => SExpr::Symbol(s.to_string()),
            Value::List(items) => SExpr::List(items.iter().map(Value::to_sexpr).collect::<Result<_, _>>()?),
            other => return Err(EvalError::NotSerializable(other.to_string())),
        })
    }

    /// Structural equality, as `equal?`.
    pub fn equal(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Unit, Value::Unit) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Sym(a), Value::Sym(b)) => a == b,
            (Value::List(a), Value::List(b)) => a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.equal(y)),
            (Value::Pair(a), Value::Pair(b)) => a.0.equal(&b.0) && a.1.equal(&b.1),
            (Value::Closure(a), Value::Closure(b)) => Rc::ptr_eq(a, b),
            (Value::Builtin(a), Value::Builtin(b)) => std::ptr::eq(*a, *b),
            _ => false,
        }
    }

    /// Text as printed by `display`: strings without quotes.
    pub fn display_string(&self) -> String {
        match self {
            Value::Str(s) => s.to_string(),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Unit => f.write_str("#<unspecified>"),
            Value::Bool(true) => f.write_str("#t"),
            Value::Bool(false) => f.write_str("#f"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => write_string_literal(f, s),
            Value::Sym(s) => f.write_str(s),
            Value::List(items) => {
                f.write_str("(")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str(")")
            }
            Value::Pair(p) => write!(f, "({} . {})", p.0, p.1),
            Value::Closure(c) => match &c.name {
                Some(n) => write!(f, "#<procedure {n}>"),
                None => f.write_str("#<procedure>"),
            },
            Value::Builtin(b) => write!(f, "#<procedure {}>", b.name),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}
