//! Procedures available to build expressions.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;

use fpm_core::sexpr::{self, SExpr};
use regex::Regex;

use super::eval::{Frame, Interp};
use super::fs::FileKind;
use super::value::{Builtin, Value};
use super::EvalError;

type R = Result<Value, EvalError>;

macro_rules! builtin {
    ($name:expr, $min:expr, $max:expr, $f:expr) => {
        Builtin { name: $name, min_args: $min, max_args: $max, func: $f }
    };
}

pub(super) static BUILTINS: &[Builtin] = &[
    // lists and data
    builtin!("list", 0, None, |_, a| Ok(Value::list(a))),
    builtin!("cons", 2, Some(2), cons),
    builtin!("car", 1, Some(1), car),
    builtin!("cdr", 1, Some(1), cdr),
    builtin!("cadr", 1, Some(1), cadr),
    builtin!("null?", 1, Some(1), |_, a| Ok(Value::Bool(matches!(&a[0], Value::List(l) if l.is_empty())))),
    builtin!("pair?", 1, Some(1), |_, a| {
        Ok(Value::Bool(match &a[0] {
            Value::List(l) => !l.is_empty(),
            Value::Pair(_) => true,
            _ => false,
        }))
    }),
    builtin!("list?", 1, Some(1), |_, a| Ok(Value::Bool(matches!(a[0], Value::List(_))))),
    builtin!("string?", 1, Some(1), |_, a| Ok(Value::Bool(matches!(a[0], Value::Str(_))))),
    builtin!("symbol?", 1, Some(1), |_, a| Ok(Value::Bool(matches!(a[0], Value::Sym(_))))),
    builtin!("integer?", 1, Some(1), |_, a| Ok(Value::Bool(matches!(a[0], Value::Int(_))))),
    builtin!("boolean?", 1, Some(1), |_, a| Ok(Value::Bool(matches!(a[0], Value::Bool(_))))),
    builtin!("procedure?", 1, Some(1), |_, a| Ok(Value::Bool(a[0].is_procedure()))),
    builtin!("equal?", 2, Some(2), |_, a| Ok(Value::Bool(a[0].equal(&a[1])))),
    builtin!("eq?", 2, Some(2), |_, a| Ok(Value::Bool(a[0].equal(&a[1])))),
    builtin!("not", 1, Some(1), |_, a| Ok(Value::Bool(!a[0].is_true()))),
    builtin!("length", 1, Some(1), |_, a| Ok(Value::Int(list_arg("length", &a, 0)?.len() as i64))),
    builtin!("append", 0, None, append),
    builtin!("reverse", 1, Some(1), |_, a| {
        let mut l = list_arg("reverse", &a, 0)?.to_vec();
        l.reverse();
        Ok(Value::list(l))
    }),
    builtin!("list-ref", 2, Some(2), |_, a| {
        let l = list_arg("list-ref", &a, 0)?;
        let i = int_arg("list-ref", &a, 1)?;
        usize::try_from(i)
            .ok()
            .and_then(|i| l.get(i).cloned())
            .ok_or_else(|| EvalError::TypeError(format!("list-ref: index {i} out of range")))
    }),
    builtin!("last", 1, Some(1), |_, a| {
        list_arg("last", &a, 0)?.last().cloned().ok_or_else(|| EvalError::TypeError("last: empty list".into()))
    }),
    builtin!("member", 2, Some(2), |_, a| {
        let l = list_arg("member", &a, 1)?;
        Ok(match l.iter().position(|x| x.equal(&a[0])) {
            Some(i) => Value::list(l[i..].to_vec()),
            None => Value::Bool(false),
        })
    }),
    builtin!("map", 2, Some(2), map),
    builtin!("for-each", 2, Some(2), for_each),
    builtin!("filter", 2, Some(2), filter),
    builtin!("apply", 2, Some(2), |i, a| {
        let args = list_arg("apply", &a, 1)?.to_vec();
        i.apply(&a[0], args)
    }),
    // association lists
    builtin!("assoc", 2, Some(2), |_, a| {
        let l = list_arg("assoc", &a, 1)?;
        Ok(find_entry(l, &a[0]).map(|i| l[i].clone()).unwrap_or(Value::Bool(false)))
    }),
    builtin!("assoc-ref", 2, Some(2), assoc_ref),
    builtin!("acons", 3, Some(3), |_, a| { Ok(Value::cons(Value::cons(a[0].clone(), a[1].clone()), a[2].clone())) }),
    builtin!("alist-cons-after", 4, Some(4), |_, a| alist_insert("alist-cons-after", a, 1)),
    builtin!("alist-cons-before", 4, Some(4), |_, a| alist_insert("alist-cons-before", a, 0)),
    builtin!("alist-replace", 3, Some(3), alist_replace),
    builtin!("alist-delete", 2, Some(2), |_, a| {
        let l = list_arg("alist-delete", &a, 1)?;
        Ok(Value::list(l.iter().filter(|e| !e.car().is_some_and(|k| k.equal(&a[0]))).cloned().collect()))
    }),
    // strings and symbols
    builtin!("string-append", 0, None, |_, a| {
        let mut s = String::new();
        for i in 0..a.len() {
            s.push_str(str_arg("string-append", &a, i)?);
        }
        Ok(Value::str(&s))
    }),
    builtin!("string-join", 1, Some(2), |_, a| {
        let sep = if a.len() > 1 { str_arg("string-join", &a, 1)? } else { " " };
        let parts = strings_arg("string-join", &a, 0)?;
        Ok(Value::str(&parts.join(sep)))
    }),
    builtin!("string-split", 2, Some(2), |_, a| {
        let s = str_arg("string-split", &a, 0)?;
        let sep = str_arg("string-split", &a, 1)?;
        if sep.is_empty() {
            return Err(EvalError::TypeError("string-split: empty separator".into()));
        }
        Ok(Value::list(s.split(sep).map(Value::str).collect()))
    }),
    builtin!("string-length", 1, Some(1), |_, a| Ok(Value::Int(
        str_arg("string-length", &a, 0)?.chars().count() as i64
    ))),
    builtin!("string=?", 2, Some(2), |_, a| Ok(Value::Bool(
        str_arg("string=?", &a, 0)? == str_arg("string=?", &a, 1)?
    ))),
    builtin!("string-prefix?", 2, Some(2), |_, a| {
        Ok(Value::Bool(str_arg("string-prefix?", &a, 1)?.starts_with(str_arg("string-prefix?", &a, 0)?)))
    }),
    builtin!("string-suffix?", 2, Some(2), |_, a| {
        Ok(Value::Bool(str_arg("string-suffix?", &a, 1)?.ends_with(str_arg("string-suffix?", &a, 0)?)))
    }),
    builtin!("string-contains", 2, Some(2), |_, a| {
        let s = str_arg("string-contains", &a, 0)?;
        Ok(match s.find(str_arg("string-contains", &a, 1)?) {
            Some(i) => Value::Int(s[..i].chars().count() as i64),
            None => Value::Bool(false),
        })
    }),
    builtin!("substring", 2, Some(3), substring),
    builtin!("symbol->string", 1, Some(1), |_, a| match &a[0] {
        Value::Sym(s) => Ok(Value::Str(s.clone())),
        other => Err(type_error("symbol->string", "symbol", other)),
    }),
    builtin!("string->symbol", 1, Some(1), |_, a| Ok(Value::sym(str_arg("string->symbol", &a, 0)?))),
    builtin!("number->string", 1, Some(1), |_, a| Ok(Value::str(&int_arg("number->string", &a, 0)?.to_string()))),
    builtin!("string->number", 1, Some(1), |_, a| {
        Ok(str_arg("string->number", &a, 0)?.parse::<i64>().map(Value::Int).unwrap_or(Value::Bool(false)))
    }),
    builtin!("basename", 1, Some(1), |_, a| {
        let p = str_arg("basename", &a, 0)?;
        Ok(Value::str(p.trim_end_matches('/').rsplit('/').next().unwrap_or("")))
    }),
    builtin!("dirname", 1, Some(1), |_, a| {
        let p = str_arg("dirname", &a, 0)?.trim_end_matches('/');
        Ok(Value::str(match p.rfind('/') {
            Some(0) => "/",
            Some(i) => &p[..i],
            None => ".",
        }))
    }),
    // numbers
    builtin!("+", 0, None, |_, a| fold_ints("+", &a, 0, i64::checked_add)),
    builtin!("*", 0, None, |_, a| fold_ints("*", &a, 1, i64::checked_mul)),
    builtin!("-", 1, None, |_, a| {
        if a.len() == 1 {
            return Ok(Value::Int(-int_arg("-", &a, 0)?));
        }
        let first = int_arg("-", &a, 0)?;
        fold_ints("-", &a[1..], first, i64::checked_sub)
    }),
    builtin!("=", 2, None, |_, a| compare_ints("=", &a, |x, y| x == y)),
    builtin!("<", 2, None, |_, a| compare_ints("<", &a, |x, y| x < y)),
    builtin!(">", 2, None, |_, a| compare_ints(">", &a, |x, y| x > y)),
    builtin!("<=", 2, None, |_, a| compare_ints("<=", &a, |x, y| x <= y)),
    builtin!(">=", 2, None, |_, a| compare_ints(">=", &a, |x, y| x >= y)),
    // output and errors
    builtin!("display", 1, Some(1), |i, a| {
        let _ = write!(i.log, "{}", a[0].display_string());
        Ok(Value::Unit)
    }),
    builtin!("newline", 0, Some(0), |i, _| {
        let _ = writeln!(i.log);
        Ok(Value::Unit)
    }),
    builtin!("error", 1, None, |_, a| {
        let mut msg = a[0].display_string();
        for v in &a[1..] {
            msg.push(' ');
            msg.push_str(&v.to_string());
        }
        Err(EvalError::User(msg))
    }),
    builtin!("getenv", 1, Some(1), |i, a| {
        let k = str_arg("getenv", &a, 0)?;
        Ok(i.env.get(k).map(|v| Value::str(v)).unwrap_or(Value::Bool(false)))
    }),
    // files
    builtin!("write-file", 2, Some(2), |i, a| {
        let p = path_arg(i, "write-file", &a, 0)?;
        let text = str_arg("write-file", &a, 1)?;
        i.fs.write(&p, text.as_bytes()).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::Bool(true))
    }),
    builtin!("read-file", 1, Some(1), |i, a| {
        let p = path_arg(i, "read-file", &a, 0)?;
        let bytes = i.fs.read(&p).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::str(&String::from_utf8_lossy(&bytes)))
    }),
    builtin!("mkdir-p", 1, Some(1), |i, a| {
        let p = path_arg(i, "mkdir-p", &a, 0)?;
        i.fs.create_dir_all(&p).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::Bool(true))
    }),
    builtin!("symlink", 2, Some(2), |i, a| {
        let target = PathBuf::from(str_arg("symlink", &a, 0)?);
        let link = path_arg(i, "symlink", &a, 1)?;
        i.fs.symlink(&target, &link).map_err(|e| EvalError::io(&link, e))?;
        Ok(Value::Bool(true))
    }),
    builtin!("readlink", 1, Some(1), |i, a| {
        let p = path_arg(i, "readlink", &a, 0)?;
        let t = i.fs.read_link(&p).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::str(&t.to_string_lossy()))
    }),
    builtin!("file-exists?", 1, Some(1), |i, a| {
        let p = path_arg(i, "file-exists?", &a, 0)?;
        Ok(Value::Bool(i.fs.kind(&p).map_err(|e| EvalError::io(&p, e))?.is_some()))
    }),
    builtin!("directory-exists?", 1, Some(1), |i, a| {
        let p = path_arg(i, "directory-exists?", &a, 0)?;
        let k = i.fs.resolved_kind(&p).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::Bool(k == Some(FileKind::Dir)))
    }),
    builtin!("executable-file?", 1, Some(1), |i, a| {
        let p = path_arg(i, "executable-file?", &a, 0)?;
        Ok(Value::Bool(is_executable(i, &p)?))
    }),
    builtin!("chmod", 2, Some(2), |i, a| {
        let p = path_arg(i, "chmod", &a, 0)?;
        let mode = int_arg("chmod", &a, 1)?;
        i.fs.set_mode(&p, mode as u32).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::Bool(true))
    }),
    builtin!("chdir", 1, Some(1), |i, a| {
        let p = path_arg(i, "chdir", &a, 0)?;
        match i.fs.resolved_kind(&p).map_err(|e| EvalError::io(&p, e))? {
            Some(FileKind::Dir) => {
                i.cwd = p;
                Ok(Value::Bool(true))
            }
            _ => Err(EvalError::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"))),
        }
    }),
    builtin!("directory-entries", 1, Some(1), |i, a| {
        let p = path_arg(i, "directory-entries", &a, 0)?;
        let names = i.fs.read_dir(&p).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::list(names.iter().map(|n| Value::str(n)).collect()))
    }),
    builtin!("getcwd", 0, Some(0), |i, _| Ok(Value::str(&i.cwd.to_string_lossy()))),
    builtin!("find-files", 1, Some(2), find_files),
    builtin!("copy-file", 2, Some(2), |i, a| {
        let from = path_arg(i, "copy-file", &a, 0)?;
        let to = path_arg(i, "copy-file", &a, 1)?;
        i.fs.copy_file(&from, &to).map_err(|e| EvalError::io(&from, e))?;
        Ok(Value::Bool(true))
    }),
    builtin!("copy-recursively", 2, Some(2), |i, a| {
        let from = path_arg(i, "copy-recursively", &a, 0)?;
        let to = path_arg(i, "copy-recursively", &a, 1)?;
        copy_recursively(i, &from, &to)?;
        Ok(Value::Bool(true))
    }),
    builtin!("delete-recursively", 1, Some(1), |i, a| {
        let p = path_arg(i, "delete-recursively", &a, 0)?;
        i.fs.remove_tree(&p).map_err(|e| EvalError::io(&p, e))?;
        Ok(Value::Bool(true))
    }),
    builtin!("which", 1, Some(1), |i, a| {
        let prog = str_arg("which", &a, 0)?;
        Ok(match search_path(i, prog)? {
            Some(p) => Value::str(&p.to_string_lossy()),
            None => Value::Bool(false),
        })
    }),
    builtin!("invoke", 1, None, invoke),
    builtin!("patch-shebang", 1, Some(2), patch_shebang),
    builtin!("substitute", 2, Some(2), substitute),
    // evaluation
    builtin!("run-phases", 2, Some(2), run_phases),
    builtin!("load", 1, Some(2), load),
    builtin!("compile-modules", 2, Some(2), compile_modules),
];

use std::io::Write as _;

fn type_error(name: &str, wanted: &str, got: &Value) -> EvalError {
    EvalError::TypeError(format!("{name}: expected a {wanted}, got {got} ({})", got.type_name()))
}

fn str_arg<'a>(name: &str, a: &'a [Value], i: usize) -> Result<&'a str, EvalError> {
    a[i].as_str().ok_or_else(|| type_error(name, "string", &a[i]))
}

fn int_arg(name: &str, a: &[Value], i: usize) -> Result<i64, EvalError> {
    match a[i] {
        Value::Int(n) => Ok(n),
        ref other => Err(type_error(name, "integer", other)),
    }
}

fn list_arg<'a>(name: &str, a: &'a [Value], i: usize) -> Result<&'a [Value], EvalError> {
    a[i].as_list().ok_or_else(|| type_error(name, "list", &a[i]))
}

/// A string or a list of strings.
fn strings_arg(name: &str, a: &[Value], i: usize) -> Result<Vec<String>, EvalError> {
    match &a[i] {
        Value::Str(s) => Ok(vec![s.to_string()]),
        Value::List(l) => {
            l.iter().map(|v| v.as_str().map(str::to_string).ok_or_else(|| type_error(name, "string", v))).collect()
        }
        other => Err(type_error(name, "list of strings", other)),
    }
}

fn path_arg(i: &Interp, name: &str, a: &[Value], n: usize) -> Result<PathBuf, EvalError> {
    Ok(i.resolve(str_arg(name, a, n)?))
}

fn cons(_: &mut Interp, a: Vec<Value>) -> R {
    let mut a = a.into_iter();
    let head = a.next().unwrap();
    Ok(Value::cons(head, a.next().unwrap()))
}

fn car(_: &mut Interp, a: Vec<Value>) -> R {
    a[0].car().ok_or_else(|| type_error("car", "pair", &a[0]))
}

fn cdr(_: &mut Interp, a: Vec<Value>) -> R {
    a[0].cdr().ok_or_else(|| type_error("cdr", "pair", &a[0]))
}

fn cadr(_: &mut Interp, a: Vec<Value>) -> R {
    a[0].cdr().and_then(|t| t.car()).ok_or_else(|| type_error("cadr", "list of two or more elements", &a[0]))
}

fn append(_: &mut Interp, a: Vec<Value>) -> R {
    let mut out = Vec::new();
    for i in 0..a.len() {
        out.extend(list_arg("append", &a, i)?.iter().cloned());
    }
    Ok(Value::list(out))
}

fn map(i: &mut Interp, a: Vec<Value>) -> R {
    let items = list_arg("map", &a, 1)?.to_vec();
    let mut out = Vec::with_capacity(items.len());
    for x in items {
        out.push(i.apply(&a[0], vec![x])?);
    }
    Ok(Value::list(out))
}

fn for_each(i: &mut Interp, a: Vec<Value>) -> R {
    for x in list_arg("for-each", &a, 1)?.to_vec() {
        i.apply(&a[0], vec![x])?;
    }
    Ok(Value::Unit)
}

fn filter(i: &mut Interp, a: Vec<Value>) -> R {
    let mut out = Vec::new();
    for x in list_arg("filter", &a, 1)?.to_vec() {
        if i.apply(&a[0], vec![x.clone()])?.is_true() {
            out.push(x);
        }
    }
    Ok(Value::list(out))
}

fn substring(_: &mut Interp, a: Vec<Value>) -> R {
    let s: Vec<char> = str_arg("substring", &a, 0)?.chars().collect();
    let start = int_arg("substring", &a, 1)?;
    let end = if a.len() > 2 { int_arg("substring", &a, 2)? } else { s.len() as i64 };
    if start < 0 || end < start || end as usize > s.len() {
        return Err(EvalError::TypeError(format!(
            "substring: range {start}..{end} out of bounds for length {}",
            s.len()
        )));
    }
    Ok(Value::str(&s[start as usize..end as usize].iter().collect::<String>()))
}

fn fold_ints(name: &str, a: &[Value], init: i64, op: fn(i64, i64) -> Option<i64>) -> R {
    let mut acc = init;
    for i in 0..a.len() {
        acc = op(acc, int_arg(name, a, i)?).ok_or_else(|| EvalError::TypeError(format!("{name}: integer overflow")))?;
    }
    Ok(Value::Int(acc))
}

fn compare_ints(name: &str, a: &[Value], op: fn(i64, i64) -> bool) -> R {
    for i in 1..a.len() {
        if !op(int_arg(name, a, i - 1)?, int_arg(name, a, i)?) {
            return Ok(Value::Bool(false));
        }
    }
    Ok(Value::Bool(true))
}

fn find_entry(alist: &[Value], key: &Value) -> Option<usize> {
    alist.iter().position(|e| e.car().is_some_and(|k| k.equal(key)))
}

fn assoc_ref(_: &mut Interp, a: Vec<Value>) -> R {
    let l = list_arg("assoc-ref", &a, 0)?;
    Ok(match find_entry(l, &a[1]) {
        Some(i) => l[i].cdr().expect("entry has a head"),
        None => Value::Bool(false),
    })
}

/// Inserts `(new-key . value)` before (`offset` 0) or after (1) `key`.
fn alist_insert(name: &str, a: Vec<Value>, offset: usize) -> R {
    let l = list_arg(name, &a, 3)?;
    let i = find_entry(l, &a[0]).ok_or_else(|| EvalError::KeyNotFound(a[0].to_string()))?;
    let mut out = l.to_vec();
    out.insert(i + offset, Value::cons(a[1].clone(), a[2].clone()));
    Ok(Value::list(out))
}

fn alist_replace(_: &mut Interp, a: Vec<Value>) -> R {
    let l = list_arg("alist-replace", &a, 2)?;
    let i = find_entry(l, &a[0]).ok_or_else(|| EvalError::KeyNotFound(a[0].to_string()))?;
    let mut out = l.to_vec();
    out[i] = Value::cons(a[0].clone(), a[1].clone());
    Ok(Value::list(out))
}

fn is_executable(i: &Interp, p: &Path) -> Result<bool, EvalError> {
    match i.fs.resolved_kind(p).map_err(|e| EvalError::io(p, e))? {
        Some(FileKind::File) => Ok(i.fs.mode(p).map_err(|e| EvalError::io(p, e))? & 0o111 != 0),
        _ => Ok(false),
    }
}

/// Looks `prog` up in the build environment's `PATH`.
fn search_path(i: &Interp, prog: &str) -> Result<Option<PathBuf>, EvalError> {
    if prog.contains('/') {
        let p = i.resolve(prog);
        return Ok(is_executable(i, &p)?.then_some(p));
    }
    let Some(path) = i.env.get("PATH") else {
        return Ok(None);
    };
    for dir in path.split(':').filter(|d| !d.is_empty()) {
        let candidate = Path::new(dir).join(prog);
        if is_executable(i, &candidate)? {
            return Ok(Some(candidate));
        }
    }
    Ok(None)
}

fn invoke(i: &mut Interp, a: Vec<Value>) -> R {
    let prog = str_arg("invoke", &a, 0)?;
    let mut args = Vec::new();
    for n in 1..a.len() {
        args.push(str_arg("invoke", &a, n)?.to_string());
    }
    let Some(exe) = search_path(i, prog)? else {
        return Err(EvalError::InvokeFailed { program: prog.to_string(), status: None });
    };
    let out = Command::new(&exe)
        .args(&args)
        .env_clear()
        .envs(&i.env)
        .current_dir(&i.cwd)
        .output()
        .map_err(|e| EvalError::io(&exe, e))?;
    let _ = i.log.write_all(&out.stdout);
    let _ = i.log.write_all(&out.stderr);
    if !out.status.success() {
        return Err(EvalError::InvokeFailed { program: prog.to_string(), status: out.status.code() });
    }
    Ok(Value::Bool(true))
}

fn find_files(i: &mut Interp, a: Vec<Value>) -> R {
    let dir = str_arg("find-files", &a, 0)?.to_string();
    let re = match a.get(1) {
        Some(_) => Some(Regex::new(str_arg("find-files", &a, 1)?)?),
        None => None,
    };
    let mut found = Vec::new();
    walk_files(i, &dir, re.as_ref(), &mut found)?;
    found.sort();
    Ok(Value::list(found.iter().map(|s| Value::str(s)).collect()))
}

fn walk_files(i: &Interp, dir: &str, re: Option<&Regex>, out: &mut Vec<String>) -> Result<(), EvalError> {
    let real = i.resolve(dir);
    let names = i.fs.read_dir(&real).map_err(|e| EvalError::io(&real, e))?;
    for name in names {
        let shown = format!("{}/{name}", dir.trim_end_matches('/'));
        let p = real.join(&name);
        match i.fs.kind(&p).map_err(|e| EvalError::io(&p, e))? {
            Some(FileKind::Dir) => walk_files(i, &shown, re, out)?,
            Some(FileKind::File) => {
                if re.is_none_or(|r| r.is_match(&name)) {
                    out.push(shown);
                }
            }
            Some(FileKind::Symlink) => {
                let target = i.fs.resolved_kind(&p).map_err(|e| EvalError::io(&p, e))?;
                if target == Some(FileKind::File) && re.is_none_or(|r| r.is_match(&name)) {
                    out.push(shown);
                }
            }
            None => {}
        }
    }
    Ok(())
}

/// Copies the contents of `from` into `to`, like `cp -r from/. to`. Copied
/// files are made writable by their owner.
fn copy_recursively(i: &Interp, from: &Path, to: &Path) -> Result<(), EvalError> {
    match i.fs.kind(from).map_err(|e| EvalError::io(from, e))? {
        Some(FileKind::Dir) => {
            i.fs.create_dir_all(to).map_err(|e| EvalError::io(to, e))?;
            for name in i.fs.read_dir(from).map_err(|e| EvalError::io(from, e))? {
                copy_recursively(i, &from.join(&name), &to.join(&name))?;
            }
            let mode = i.fs.mode(to).map_err(|e| EvalError::io(to, e))?;
            i.fs.set_mode(to, mode | 0o700).map_err(|e| EvalError::io(to, e))
        }
        Some(FileKind::File) => {
            if i.fs.kind(to).map_err(|e| EvalError::io(to, e))?.is_some() {
                i.fs.remove_tree(to).map_err(|e| EvalError::io(to, e))?;
            }
            i.fs.copy_file(from, to).map_err(|e| EvalError::io(from, e))?;
            let mode = i.fs.mode(to).map_err(|e| EvalError::io(to, e))?;
            i.fs.set_mode(to, mode | 0o200).map_err(|e| EvalError::io(to, e))
        }
        Some(FileKind::Symlink) => {
            let target = i.fs.read_link(from).map_err(|e| EvalError::io(from, e))?;
            if i.fs.kind(to).map_err(|e| EvalError::io(to, e))?.is_some() {
                i.fs.remove_tree(to).map_err(|e| EvalError::io(to, e))?;
            }
            i.fs.symlink(&target, to).map_err(|e| EvalError::io(to, e))
        }
        None => {
            Err(EvalError::io(from, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
        }
    }
}

/// Rewrites a `#!` line to point into the first input directory that
/// provides the same program under `bin/`.
fn patch_shebang(i: &mut Interp, a: Vec<Value>) -> R {
    let file = path_arg(i, "patch-shebang", &a, 0)?;
    let dirs = if a.len() > 1 { strings_arg("patch-shebang", &a, 1)? } else { input_dirs(i) };
    patch_shebang_file(i, &file, &dirs).map(Value::Bool)
}

/// Input directories taken from `PATH` entries ending in `/bin`.
fn input_dirs(i: &Interp) -> Vec<String> {
    i.env
        .get("PATH")
        .map(|p| p.split(':').filter_map(|d| d.strip_suffix("/bin")).map(str::to_string).collect())
        .unwrap_or_default()
}

pub(super) fn patch_shebang_file(i: &mut Interp, file: &Path, dirs: &[String]) -> Result<bool, EvalError> {
    let data = i.fs.read(file).map_err(|e| EvalError::io(file, e))?;
    let Some(rest) = data.strip_prefix(b"#!") else {
        return Ok(false);
    };
    let line_end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
    let Ok(line) = std::str::from_utf8(&rest[..line_end]) else {
        return Ok(false);
    };
    let trimmed = line.trim_start();
    let interp_end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
    let (interpreter, args) = trimmed.split_at(interp_end);
    let Some((_, prog)) = interpreter.rsplit_once('/') else {
        return Ok(false);
    };
    if prog.is_empty() {
        return Ok(false);
    }
    for dir in dirs {
        let candidate = Path::new(dir).join("bin").join(prog);
        if i.fs.resolved_kind(&candidate).map_err(|e| EvalError::io(&candidate, e))? != Some(FileKind::File) {
            continue;
        }
        let new_interp = candidate.to_string_lossy();
        if new_interp == interpreter {
            return Ok(false);
        }
        let mut out = format!("#!{new_interp}{args}").into_bytes();
        out.extend_from_slice(&rest[line_end..]);
        i.fs.replace(file, &out).map_err(|e| EvalError::io(file, e))?;
        i.log_line(&format!("patch-shebang: {}: changing `{interpreter}' to `{new_interp}'", file.display()));
        return Ok(true);
    }
    Ok(false)
}

/// Applies `edit` to every line of `file`, rewriting it only if something
/// changed. `edit` returns `None` to leave a line as it is.
fn rewrite_lines(
    i: &mut Interp,
    file: &Path,
    mut edit: impl FnMut(&mut Interp, &str) -> Result<Option<String>, EvalError>,
) -> Result<bool, EvalError> {
    let data = i.fs.read(file).map_err(|e| EvalError::io(file, e))?;
    let text =
        String::from_utf8(data).map_err(|_| EvalError::TypeError(format!("{} is not UTF-8 text", file.display())))?;
    let mut out = String::with_capacity(text.len());
    let mut changed = false;
    for raw in text.split_inclusive('\n') {
        let (line, nl) = match raw.strip_suffix('\n') {
            Some(l) => (l, "\n"),
            None => (raw, ""),
        };
        match edit(i, line)? {
            Some(new) if new != line => {
                changed = true;
                out.push_str(&new);
            }
            _ => out.push_str(line),
        }
        out.push_str(nl);
    }
    if changed {
        i.fs.replace(file, out.as_bytes()).map_err(|e| EvalError::io(file, e))?;
    }
    Ok(changed)
}

/// Expands `\0`..`\9` in a replacement template.
fn expand_template(template: &str, caps: &regex::Captures<'_>) -> String {
    let mut out = String::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.peek() {
                Some(d) if d.is_ascii_digit() => {
                    let n = d.to_digit(10).unwrap() as usize;
                    chars.next();
                    out.push_str(caps.get(n).map_or("", |m| m.as_str()));
                    continue;
                }
                Some('\\') => {
                    chars.next();
                    out.push('\\');
                    continue;
                }
                _ => {}
            }
        }
        out.push(c);
    }
    out
}

/// Replaces every match of the first clause whose regex matches `line`.
fn apply_first<T>(
    i: &mut Interp,
    line: &str,
    clauses: &[(Regex, T)],
    mut replacement: impl FnMut(&mut Interp, &T, &regex::Captures<'_>) -> Result<String, EvalError>,
) -> Result<Option<String>, EvalError> {
    for (re, clause) in clauses {
        if !re.is_match(line) {
            continue;
        }
        let mut out = String::new();
        let mut last = 0;
        for caps in re.captures_iter(line) {
            let m = caps.get(0).unwrap();
            out.push_str(&line[last..m.start()]);
            out.push_str(&replacement(i, clause, &caps)?);
            last = m.end();
        }
        out.push_str(&line[last..]);
        return Ok(Some(out));
    }
    Ok(None)
}

fn substitute(i: &mut Interp, a: Vec<Value>) -> R {
    let files = strings_arg("substitute", &a, 0)?;
    let mut clauses = Vec::new();
    for c in list_arg("substitute", &a, 1)? {
        match c.as_list() {
            Some([Value::Str(re), Value::Str(template)]) => clauses.push((Regex::new(re)?, template.clone())),
            _ => return Err(type_error("substitute", "(regex template) clause", c)),
        }
    }
    let mut any = false;
    for f in files {
        let path = i.resolve(&f);
        any |= rewrite_lines(i, &path, |i, line| {
            apply_first(i, line, &clauses, |_, t, caps| Ok(expand_template(t, caps)))
        })?;
    }
    Ok(Value::Bool(any))
}

/// `(substitute* files ((regex var ...) body ...) ...)`: the body of the
/// first clause matching a line computes the replacement for each match,
/// with the variables bound to the whole match and then each group.
/// Match variables and body of one `substitute*` clause.
type Clause<'a> = (Vec<Rc<str>>, &'a [SExpr]);

pub(super) fn substitute_star(i: &mut Interp, rest: &[SExpr], env: &Rc<Frame>) -> R {
    let (files, clause_forms) =
        rest.split_first().ok_or_else(|| EvalError::Syntax("substitute* needs a file argument".into()))?;
    let files = i.eval(files, env)?;
    let files = strings_arg("substitute*", &[files], 0)?;
    let mut clauses: Vec<(Regex, Clause<'_>)> = Vec::new();
    for c in clause_forms {
        let parts = c.as_list().unwrap_or(&[]);
        let Some((SExpr::List(head), body)) = parts.split_first() else {
            return Err(EvalError::Syntax("substitute* clause must be ((regex var ...) body ...)".into()));
        };
        let Some((re, vars)) = head.split_first() else {
            return Err(EvalError::Syntax("substitute* clause needs a regex".into()));
        };
        let re = i.eval(re, env)?;
        let re = Regex::new(str_arg("substitute*", &[re], 0)?)?;
        let vars = vars
            .iter()
            .map(|v| v.as_symbol().map(Rc::from))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| EvalError::Syntax("substitute* variables must be symbols".into()))?;
        clauses.push((re, (vars, body)));
    }
    let mut any = false;
    for f in files {
        let path = i.resolve(&f);
        any |= rewrite_lines(i, &path, |i, line| {
            apply_first(i, line, &clauses, |i, (vars, body), caps| {
                let frame = Frame::new(Some(env.clone()));
                for (n, v) in vars.iter().enumerate() {
                    let s = caps.get(n).map_or("", |m| m.as_str());
                    frame.define(v, Value::str(s));
                }
                let mut last = Value::Unit;
                for e in body.iter() {
                    last = i.eval(e, &frame)?;
                }
                match last {
                    Value::Str(s) => Ok(s.to_string()),
                    other => Err(type_error("substitute*", "string replacement", &other)),
                }
            })
        })?;
    }
    Ok(Value::Bool(any))
}

fn run_phases(i: &mut Interp, a: Vec<Value>) -> R {
    let phases = list_arg("run-phases", &a, 0)?.to_vec();
    let args = a[1].clone();
    for entry in phases {
        let (name, proc) = match &entry {
            Value::Pair(p) => (p.0.clone(), p.1.clone()),
            Value::List(l) if l.len() == 2 => (l[0].clone(), l[1].clone()),
            other => return Err(type_error("run-phases", "(name . procedure) entry", other)),
        };
        let name = name.display_string();
        i.log_line(&format!("starting phase `{name}'"));
        match i.apply(&proc, vec![args.clone()]) {
            Ok(v) if v.is_true() => i.log_line(&format!("phase `{name}' done")),
            Ok(_) => {
                i.log_line(&format!("phase `{name}' failed"));
                i.failed_phase = Some(name);
                return Ok(Value::Bool(false));
            }
            Err(e) => {
                i.log_line(&format!("phase `{name}' failed: {e}"));
                return Err(EvalError::PhaseFailed { phase: name, source: Box::new(e) });
            }
        }
    }
    Ok(Value::Bool(true))
}

fn load(i: &mut Interp, a: Vec<Value>) -> R {
    let p = path_arg(i, "load", &a, 0)?;
    let mut bindings = Vec::new();
    if a.len() > 1 {
        for e in list_arg("load", &a, 1)? {
            let (k, v) = match (e.car(), e.cdr()) {
                (Some(Value::Sym(k) | Value::Str(k)), Some(v)) => (k, v),
                _ => return Err(type_error("load", "(name . value) binding", e)),
            };
            bindings.push((k, v));
        }
    }
    i.load_file(&p, &bindings)
}

/// Checks that every module under `from` parses and copies it to `to`.
fn compile_modules(i: &mut Interp, a: Vec<Value>) -> R {
    let from = path_arg(i, "compile-modules", &a, 0)?;
    let to = path_arg(i, "compile-modules", &a, 1)?;
    i.fs.create_dir_all(&to).map_err(|e| EvalError::io(&to, e))?;
    for name in i.fs.read_dir(&from).map_err(|e| EvalError::io(&from, e))? {
        if !name.ends_with(".bl") {
            continue;
        }
        let src = from.join(&name);
        let bytes = i.fs.read(&src).map_err(|e| EvalError::io(&src, e))?;
        let text = String::from_utf8_lossy(&bytes);
        sexpr::parse(&text).map_err(EvalError::Parse)?;
        let dst = to.join(&name);
        i.fs.write(&dst, &bytes).map_err(|e| EvalError::io(&dst, e))?;
        i.log_line(&format!("compiled {name}"));
    }
    Ok(Value::Bool(true))
}
