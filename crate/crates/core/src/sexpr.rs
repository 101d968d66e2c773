//! S-expression reader and printer.
//!
//! Shared by the derivation file format, package files and the build
//! language. Strings accept the escapes `\"`, `\\`, `\n` and `\t` only;
//! integers are signed 64-bit; `#t`/`#f` are booleans and `#:name` reads as
//! a keyword symbol. `'x`, `` `x ``, `,x` and `,@x` expand to `(quote x)`,
//! `(quasiquote x)`, `(unquote x)` and `(unquote-splicing x)`.
//! Quasiquotation nests one level deep at most.

use alloc::borrow::ToOwned;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{pos}: {message}")]
pub struct ParseError {
    pub pos: Pos,
    pub message: String,
}

impl ParseError {
    pub fn new(pos: Pos, message: impl Into<String>) -> Self {
        ParseError { pos, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SExpr {
    Symbol(String),
    Str(String),
    Int(i64),
    Bool(bool),
    List(Vec<SExpr>),
}

/// A datum together with the position of its first character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub pos: Pos,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Symbol(String),
    Str(String),
    Int(i64),
    Bool(bool),
    List(Vec<Node>),
}

impl Node {
    pub fn to_sexpr(&self) -> SExpr {
        match &self.kind {
            NodeKind::Symbol(s) => SExpr::Symbol(s.clone()),
            NodeKind::Str(s) => SExpr::Str(s.clone()),
            NodeKind::Int(i) => SExpr::Int(*i),
            NodeKind::Bool(b) => SExpr::Bool(*b),
            NodeKind::List(items) => SExpr::List(items.iter().map(Node::to_sexpr).collect()),
        }
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Node]> {
        match &self.kind {
            NodeKind::List(items) => Some(items),
            _ => None,
        }
    }

    /// For a list whose head is a symbol, returns the head and the rest.
    pub fn as_form(&self) -> Option<(&str, &[Node])> {
        let items = self.as_list()?;
        let (head, rest) = items.split_first()?;
        Some((head.as_symbol()?, rest))
    }

    pub fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError::new(self.pos, message)
    }
}

impl SExpr {
    pub fn sym(s: &str) -> SExpr {
        SExpr::Symbol(s.to_owned())
    }

    pub fn str(s: &str) -> SExpr {
        SExpr::Str(s.to_owned())
    }

    pub fn list<I: IntoIterator<Item = SExpr>>(items: I) -> SExpr {
        SExpr::List(items.into_iter().collect())
    }

    pub fn quote(datum: SExpr) -> SExpr {
        SExpr::List(alloc::vec![SExpr::sym("quote"), datum])
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match self {
            SExpr::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            SExpr::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(items) => Some(items),
            _ => None,
        }
    }

    pub fn is_keyword(&self) -> bool {
        matches!(self, SExpr::Symbol(s) if s.starts_with("#:"))
    }

    /// Prints the datum, failing if it contains a symbol the reader could
    /// not read back.
    pub fn try_print(&self) -> Result<String, UnprintableSymbol> {
        let mut out = String::new();
        self.check_printable()?;
        write_sexpr(&mut out, self).expect("writing to a String cannot fail");
        Ok(out)
    }

    fn check_printable(&self) -> Result<(), UnprintableSymbol> {
        match self {
            SExpr::Symbol(s) if !is_readable_symbol(s) => Err(UnprintableSymbol(s.clone())),
            SExpr::List(items) => items.iter().try_for_each(SExpr::check_printable),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("symbol {0:?} cannot be written as an s-expression")]
pub struct UnprintableSymbol(pub String);

fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || matches!(c, '(' | ')' | '"' | ';' | '\'' | '`' | ',')
}

fn looks_like_int(s: &str) -> bool {
    let digits = s.strip_prefix(['-', '+']).unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Whether `s` reads back as the same symbol.
pub fn is_readable_symbol(s: &str) -> bool {
    if s.is_empty() || s.chars().any(is_delimiter) || looks_like_int(s) {
        return false;
    }
    match s.strip_prefix('#') {
        Some(rest) => rest.strip_prefix(':').is_some_and(|k| !k.is_empty()),
        None => true,
    }
}

pub fn write_string_literal<W: fmt::Write>(out: &mut W, s: &str) -> fmt::Result {
    out.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => out.write_str("\\\"")?,
            '\\' => out.write_str("\\\\")?,
            '\n' => out.write_str("\\n")?,
            '\t' => out.write_str("\\t")?,
            c => out.write_char(c)?,
        }
    }
    out.write_char('"')
}

fn write_sexpr<W: fmt::Write>(out: &mut W, e: &SExpr) -> fmt::Result {
    match e {
        SExpr::Symbol(s) => out.write_str(s),
        SExpr::Str(s) => write_string_literal(out, s),
        SExpr::Int(i) => write!(out, "{i}"),
        SExpr::Bool(true) => out.write_str("#t"),
        SExpr::Bool(false) => out.write_str("#f"),
        SExpr::List(items) => {
            out.write_char('(')?;
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.write_char(' ')?;
                }
                write_sexpr(out, item)?;
            }
            out.write_char(')')
        }
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_sexpr(f, self)
    }
}

struct Reader<'a> {
    src: &'a str,
    offset: usize,
    pos: Pos,
}

impl<'a> Reader<'a> {
    fn new(src: &'a str) -> Self {
        Reader { src, offset: 0, pos: Pos { line: 1, col: 1 } }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.offset..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.offset += c.len_utf8();
        if c == '\n' {
            self.pos.line += 1;
            self.pos.col = 1;
        } else {
            self.pos.col += 1;
        }
        Some(c)
    }

    fn skip_atmosphere(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == ';' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn datum(&mut self, in_quasi: bool) -> Result<Node, ParseError> {
        self.skip_atmosphere();
        let start = self.pos;
        let c = self.peek().ok_or_else(|| ParseError::new(start, "unexpected end of input"))?;
        match c {
            '(' => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_atmosphere();
                    match self.peek() {
                        None => return Err(ParseError::new(start, "unbalanced '(': missing ')'")),
                        Some(')') => {
                            self.bump();
                            break;
                        }
                        Some(_) => items.push(self.datum(in_quasi)?),
                    }
                }
                Ok(Node { pos: start, kind: NodeKind::List(items) })
            }
            ')' => Err(ParseError::new(start, "unexpected ')'")),
            '\'' => {
                self.bump();
                self.prefixed(start, "quote", in_quasi)
            }
            '`' => {
                self.bump();
                if in_quasi {
                    return Err(ParseError::new(start, "nested quasiquote is not supported (one level only)"));
                }
                self.prefixed(start, "quasiquote", true)
            }
            ',' => {
                self.bump();
                let form = if self.peek() == Some('@') {
                    self.bump();
                    "unquote-splicing"
                } else {
                    "unquote"
                };
                self.prefixed(start, form, false)
            }
            '"' => self.string(start),
            _ => self.atom(start),
        }
    }

    fn prefixed(&mut self, start: Pos, head: &str, in_quasi: bool) -> Result<Node, ParseError> {
        self.skip_atmosphere();
        if self.peek().is_none() {
            return Err(ParseError::new(start, "unexpected end of input after prefix"));
        }
        let inner = self.datum(in_quasi)?;
        Ok(Node {
            pos: start,
            kind: NodeKind::List(alloc::vec![Node { pos: start, kind: NodeKind::Symbol(head.to_string()) }, inner,]),
        })
    }

    fn string(&mut self, start: Pos) -> Result<Node, ParseError> {
        self.bump();
        let mut s = String::new();
        loop {
            let here = self.pos;
            match self.bump() {
                None => return Err(ParseError::new(start, "unterminated string")),
                Some('"') => break,
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some(other) => return Err(ParseError::new(here, alloc::format!("bad escape '\\{other}'"))),
                    None => return Err(ParseError::new(start, "unterminated string")),
                },
                Some(c) => s.push(c),
            }
        }
        Ok(Node { pos: start, kind: NodeKind::Str(s) })
    }

    fn atom(&mut self, start: Pos) -> Result<Node, ParseError> {
        let begin = self.offset;
        while let Some(c) = self.peek() {
            if is_delimiter(c) {
                break;
            }
            self.bump();
        }
        let text = &self.src[begin..self.offset];
        let kind = if looks_like_int(text) {
            let v = text.parse::<i64>().map_err(|_| ParseError::new(start, "integer out of range"))?;
            NodeKind::Int(v)
        } else if let Some(rest) = text.strip_prefix('#') {
            match rest {
                "t" | "true" => NodeKind::Bool(true),
                "f" | "false" => NodeKind::Bool(false),
                _ if rest.starts_with(':') && rest.len() > 1 => NodeKind::Symbol(text.to_string()),
                _ => return Err(ParseError::new(start, alloc::format!("bad syntax {text:?}"))),
            }
        } else {
            NodeKind::Symbol(text.to_string())
        };
        Ok(Node { pos: start, kind })
    }
}

/// Reads every datum in `src`, keeping source positions.
pub fn parse_nodes(src: &str) -> Result<Vec<Node>, ParseError> {
    let mut reader = Reader::new(src);
    let mut out = Vec::new();
    loop {
        reader.skip_atmosphere();
        if reader.peek().is_none() {
            return Ok(out);
        }
        out.push(reader.datum(false)?);
    }
}

pub fn parse(src: &str) -> Result<Vec<SExpr>, ParseError> {
    Ok(parse_nodes(src)?.iter().map(Node::to_sexpr).collect())
}

/// Reads exactly one datum.
pub fn parse_one(src: &str) -> Result<SExpr, ParseError> {
    let nodes = parse_nodes(src)?;
    match nodes.len() {
        1 => Ok(nodes[0].to_sexpr()),
        0 => Err(ParseError::new(Pos { line: 1, col: 1 }, "expected one datum, found none")),
        _ => Err(nodes[1].error("expected a single datum")),
    }
}
