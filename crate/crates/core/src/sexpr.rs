//! A small s-expression reader and the string quoting used by every
//! canonical text format in the crate.
//!
//! Only the subset needed by manifests, derivations, package definitions,
//! revisions and pin files is supported: lists, symbols, double-quoted
//! strings (escapes limited to `\"` and `\\`), the `'` quote prefix and
//! `;` line comments.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{pos}: {detail}")]
pub struct SyntaxError {
    pub pos: Pos,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sexp {
    Symbol(String, Pos),
    Str(String, Pos),
    List(Vec<Sexp>, Pos),
    Quote(Box<Sexp>, Pos),
}

impl Sexp {
    pub fn pos(&self) -> Pos {
        match self {
            Sexp::Symbol(_, p) | Sexp::Str(_, p) | Sexp::List(_, p) | Sexp::Quote(_, p) => *p,
        }
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match self {
            Sexp::Symbol(s, _) => Some(s),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Sexp::Str(s, _) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Sexp]> {
        match self {
            Sexp::List(items, _) => Some(items),
            _ => None,
        }
    }

    /// Returns the arguments of `(head args…)`, or an error naming `head`.
    pub fn form(&self, head: &str) -> Result<&[Sexp], SyntaxError> {
        match self.as_list() {
            Some([Sexp::Symbol(h, _), rest @ ..]) if h == head => Ok(rest),
            _ => Err(SyntaxError {
                pos: self.pos(),
                detail: format!("expected ({head} …)"),
            }),
        }
    }

    /// Like [`Sexp::form`] with exactly one string argument.
    pub fn string_field(&self, head: &str) -> Result<&str, SyntaxError> {
        match self.form(head)? {
            [Sexp::Str(s, _)] => Ok(s),
            _ => Err(SyntaxError {
                pos: self.pos(),
                detail: format!("expected ({head} \"…\")"),
            }),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Sexp::Symbol(s, _) => format!("symbol `{s}`"),
            Sexp::Str(_, _) => "string".into(),
            Sexp::List(items, _) => match items.first() {
                Some(Sexp::Symbol(h, _)) => format!("form ({h} …)"),
                _ => "list".into(),
            },
            Sexp::Quote(_, _) => "quoted datum".into(),
        }
    }
}

pub fn error(pos: Pos, detail: impl Into<String>) -> SyntaxError {
    SyntaxError {
        pos,
        detail: detail.into(),
    }
}

/// Renders `s` as a double-quoted string literal.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Joins `head` and already-rendered `items` into `(head item…)`.
pub fn list(head: &str, items: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("({head}");
    for item in items {
        out.push(' ');
        out.push_str(&item);
    }
    out.push(')');
    out
}

struct Reader<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl Reader<'_> {
    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(&c) = self.chars.peek() {
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

    fn datum(&mut self) -> Result<Sexp, SyntaxError> {
        self.skip_trivia();
        let pos = self.pos();
        match self.chars.peek().copied() {
            None => Err(error(pos, "unexpected end of input")),
            Some('(') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_trivia();
                    match self.chars.peek() {
                        None => return Err(error(pos, "unclosed parenthesis")),
                        Some(')') => {
                            self.bump();
                            return Ok(Sexp::List(items, pos));
                        }
                        Some(_) => items.push(self.datum()?),
                    }
                }
            }
            Some(')') => Err(error(pos, "unexpected ')'")),
            Some('\'') => {
                self.bump();
                Ok(Sexp::Quote(Box::new(self.datum()?), pos))
            }
            Some('"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        None => return Err(error(pos, "unterminated string")),
                        Some('"') => return Ok(Sexp::Str(s, pos)),
                        Some('\\') => match self.bump() {
                            Some(c @ ('"' | '\\')) => s.push(c),
                            _ => return Err(error(self.pos(), "unsupported escape sequence")),
                        },
                        Some(c) => s.push(c),
                    }
                }
            }
            Some(_) => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_whitespace() || matches!(c, '(' | ')' | '"' | ';' | '\'') {
                        break;
                    }
                    s.push(c);
                    self.bump();
                }
                Ok(Sexp::Symbol(s, pos))
            }
        }
    }
}

/// Reads every top-level datum in `text`.
pub fn parse_all(text: &str) -> Result<Vec<Sexp>, SyntaxError> {
    let mut r = Reader {
        chars: text.chars().peekable(),
        line: 1,
        col: 1,
    };
    let mut out = Vec::new();
    loop {
        r.skip_trivia();
        if r.chars.peek().is_none() {
            return Ok(out);
        }
        out.push(r.datum()?);
    }
}

/// Reads exactly one top-level datum.
pub fn parse_one(text: &str) -> Result<Sexp, SyntaxError> {
    let mut all = parse_all(text)?;
    match all.len() {
        0 => Err(error(Pos { line: 1, col: 1 }, "empty input")),
        1 => Ok(all.pop().unwrap()),
        _ => Err(error(all[1].pos(), "expected a single top-level form")),
    }
}
