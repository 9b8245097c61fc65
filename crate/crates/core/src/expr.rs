//! Condition mini-language for branch and loop conditions.
//!
//! ```text
//! expr    := or
//! or      := and ("or" and)*
//! and     := unary ("and" unary)*
//! unary   := "not" unary | compare
//! compare := primary (("=" | "==" | "!=" | "<" | "<=" | ">" | ">=") primary)?
//! primary := number | string | "true" | "false" | "null"
//!          | path | call | "(" expr ")"
//! call    := ("len" | "has" | "contains") "(" args ")"
//! path    := ident ("." ident)*
//! ```
//!
//! Paths are resolved against a JSON scope. Stepping into a list projects the
//! remaining path over every element, so `days.condition` over a list of day
//! records yields the list of conditions. Evaluation is total: every
//! expression produces a value or an [`ExprError`].

use std::fmt;

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("parse error at {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Len,
    Has,
    Contains,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Path(Vec<String>),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let tokens = lex(src)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.or()?;
        match parser.peek() {
            Some(tok) => Err(ExprError::Parse {
                position: tok.offset,
                reason: format!("unexpected {}", tok.kind),
            }),
            None => Ok(expr),
        }
    }

    /// Root keys of every path the expression reads, in first-seen order.
    pub fn root_keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_roots(&mut out);
        out
    }

    fn collect_roots(&self, out: &mut Vec<String>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Path(segments) => {
                if !out.contains(&segments[0]) {
                    out.push(segments[0].clone());
                }
            }
            Expr::Not(inner) => inner.collect_roots(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Compare(_, a, b) => {
                a.collect_roots(out);
                b.collect_roots(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_roots(out)),
        }
    }

    /// Root keys that must be present for evaluation to succeed. Paths only
    /// reached through `has(...)` are excluded since presence is what they test.
    pub fn required_keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_required(&mut out);
        out
    }

    fn collect_required(&self, out: &mut Vec<String>) {
        match self {
            Expr::Call(Func::Has, _) => {}
            Expr::Not(inner) => inner.collect_required(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Compare(_, a, b) => {
                a.collect_required(out);
                b.collect_required(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_required(out)),
            other => other.collect_roots(out),
        }
    }

    pub fn eval(&self, scope: &Map<String, Value>) -> Result<Value, ExprError> {
        match self {
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Path(segments) => resolve_path(scope, segments),
            Expr::Not(inner) => Ok(Value::Bool(!as_bool(&inner.eval(scope)?)?)),
            Expr::And(a, b) => {
                if !as_bool(&a.eval(scope)?)? {
                    return Ok(Value::Bool(false));
                }
                Ok(Value::Bool(as_bool(&b.eval(scope)?)?))
            }
            Expr::Or(a, b) => {
                if as_bool(&a.eval(scope)?)? {
                    return Ok(Value::Bool(true));
                }
                Ok(Value::Bool(as_bool(&b.eval(scope)?)?))
            }
            Expr::Compare(op, a, b) => compare(*op, &a.eval(scope)?, &b.eval(scope)?),
            Expr::Call(func, args) => call(*func, args, scope),
        }
    }

    /// Evaluates and requires a boolean result.
    pub fn eval_bool(&self, scope: &Map<String, Value>) -> Result<bool, ExprError> {
        as_bool(&self.eval(scope)?)
    }
}

/// Parses and evaluates a condition in one go.
pub fn eval_condition(src: &str, scope: &Map<String, Value>) -> Result<bool, ExprError> {
    Expr::parse(src)?.eval_bool(scope)
}

/// Resolves a dotted path with list projection.
pub fn resolve_path(scope: &Map<String, Value>, segments: &[String]) -> Result<Value, ExprError> {
    let (first, rest) = segments
        .split_first()
        .ok_or_else(|| ExprError::MissingKey(String::new()))?;
    let root = scope
        .get(first)
        .ok_or_else(|| ExprError::MissingKey(first.clone()))?;
    descend(root, rest, first)
}

fn descend(value: &Value, rest: &[String], trail: &str) -> Result<Value, ExprError> {
    let Some((head, tail)) = rest.split_first() else {
        return Ok(value.clone());
    };
    match value {
        Value::Object(map) => {
            let next = map
                .get(head)
                .ok_or_else(|| ExprError::MissingKey(format!("{trail}.{head}")))?;
            descend(next, tail, &format!("{trail}.{head}"))
        }
        Value::Array(items) => items
            .iter()
            .map(|item| descend(item, rest, trail))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        other => Err(ExprError::TypeMismatch(format!(
            "cannot read `{head}` from {} at `{trail}`",
            type_name(other)
        ))),
    }
}

fn path_present(scope: &Map<String, Value>, segments: &[String]) -> bool {
    resolve_path(scope, segments).is_ok()
}

pub fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "object",
    }
}

fn as_bool(v: &Value) -> Result<bool, ExprError> {
    v.as_bool()
        .ok_or_else(|| ExprError::TypeMismatch(format!("expected boolean, got {}", type_name(v))))
}

fn compare(op: CmpOp, a: &Value, b: &Value) -> Result<Value, ExprError> {
    use std::cmp::Ordering;
    let ordering: Option<Ordering> = match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (
                x.as_f64().unwrap_or(f64::NAN),
                y.as_f64().unwrap_or(f64::NAN),
            );
            x.partial_cmp(&y)
        }
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    };
    let result = match (op, ordering) {
        (CmpOp::Eq, Some(o)) => o == Ordering::Equal,
        (CmpOp::Ne, Some(o)) => o != Ordering::Equal,
        (CmpOp::Lt, Some(o)) => o == Ordering::Less,
        (CmpOp::Le, Some(o)) => o != Ordering::Greater,
        (CmpOp::Gt, Some(o)) => o == Ordering::Greater,
        (CmpOp::Ge, Some(o)) => o != Ordering::Less,
        (CmpOp::Eq | CmpOp::Ne, None) if type_name(a) == type_name(b) => {
            (a == b) == (op == CmpOp::Eq)
        }
        _ => {
            return Err(ExprError::TypeMismatch(format!(
                "cannot compare {} {op} {}",
                type_name(a),
                type_name(b)
            )))
        }
    };
    Ok(Value::Bool(result))
}

fn call(func: Func, args: &[Expr], scope: &Map<String, Value>) -> Result<Value, ExprError> {
    match func {
        Func::Len => {
            let v = args[0].eval(scope)?;
            match &v {
                Value::Array(items) => Ok(Value::from(items.len())),
                Value::String(s) => Ok(Value::from(s.chars().count())),
                Value::Object(m) => Ok(Value::from(m.len())),
                other => Err(ExprError::TypeMismatch(format!(
                    "len() of {}",
                    type_name(other)
                ))),
            }
        }
        Func::Has => match &args[0] {
            Expr::Path(segments) => Ok(Value::Bool(path_present(scope, segments))),
            _ => Err(ExprError::TypeMismatch("has() takes a key path".into())),
        },
        Func::Contains => {
            let haystack = args[0].eval(scope)?;
            let needle = args[1].eval(scope)?;
            match (&haystack, &needle) {
                (Value::Array(items), _) => Ok(Value::Bool(items.contains(&needle))),
                (Value::String(s), Value::String(n)) => Ok(Value::Bool(s.contains(n.as_str()))),
                _ => Err(ExprError::TypeMismatch(format!(
                    "contains() over {} and {}",
                    type_name(&haystack),
                    type_name(&needle)
                ))),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Number(f64),
    Str(String),
    Ident(String),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
    Dot,
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Number(n) => write!(f, "number {n}"),
            TokKind::Str(s) => write!(f, "string {s:?}"),
            TokKind::Ident(s) => write!(f, "`{s}`"),
            TokKind::Op(op) => write!(f, "`{op}`"),
            TokKind::LParen => f.write_str("`(`"),
            TokKind::RParen => f.write_str("`)`"),
            TokKind::Comma => f.write_str("`,`"),
            TokKind::Dot => f.write_str("`.`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let kind = match c {
            '(' => {
                i += 1;
                TokKind::LParen
            }
            ')' => {
                i += 1;
                TokKind::RParen
            }
            ',' => {
                i += 1;
                TokKind::Comma
            }
            '.' => {
                i += 1;
                TokKind::Dot
            }
            '=' => {
                i += if bytes.get(i + 1) == Some(&b'=') {
                    2
                } else {
                    1
                };
                TokKind::Op(CmpOp::Eq)
            }
            '!' if bytes.get(i + 1) == Some(&b'=') => {
                i += 2;
                TokKind::Op(CmpOp::Ne)
            }
            '<' | '>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                i += if eq { 2 } else { 1 };
                TokKind::Op(match (c, eq) {
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    _ => CmpOp::Ge,
                })
            }
            '"' | '\'' => {
                let quote = c;
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = src[i..].chars().next() else {
                        return Err(ExprError::Parse {
                            position: start,
                            reason: "unterminated string".into(),
                        });
                    };
                    i += ch.len_utf8();
                    match ch {
                        '\\' => {
                            let Some(esc) = src[i..].chars().next() else {
                                return Err(ExprError::Parse {
                                    position: i,
                                    reason: "dangling escape".into(),
                                });
                            };
                            i += esc.len_utf8();
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                other => other,
                            });
                        }
                        ch if ch == quote => break,
                        ch => s.push(ch),
                    }
                }
                TokKind::Str(s)
            }
            c if c.is_ascii_digit()
                || (c == '-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) =>
            {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    // a dot followed by a non-digit ends the number (path access)
                    if bytes[i] == b'.' && !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                        break;
                    }
                    i += 1;
                }
                let text = &src[start..i];
                TokKind::Number(text.parse().map_err(|_| ExprError::Parse {
                    position: start,
                    reason: format!("bad number `{text}`"),
                })?)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                TokKind::Ident(src[start..i].to_string())
            }
            other => {
                return Err(ExprError::Parse {
                    position: start,
                    reason: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push(Token {
            kind,
            offset: start,
        });
    }
    Ok(out)
}

const KEYWORDS: [&str; 6] = ["and", "or", "not", "true", "false", "null"];

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn end_offset(&self) -> usize {
        self.tokens.last().map(|t| t.offset + 1).unwrap_or(0)
    }

    fn next(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        tok
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { kind: TokKind::Ident(s), .. }) if s == kw)
    }

    fn expect(&mut self, kind: TokKind) -> Result<(), ExprError> {
        match self.next() {
            Some(tok) if tok.kind == kind => Ok(()),
            Some(tok) => Err(ExprError::Parse {
                position: tok.offset,
                reason: format!("expected {kind}, found {}", tok.kind),
            }),
            None => Err(ExprError::Parse {
                position: self.end_offset(),
                reason: format!("expected {kind}, found end of input"),
            }),
        }
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut left = self.and()?;
        while self.at_keyword("or") {
            self.pos += 1;
            left = Expr::Or(Box::new(left), Box::new(self.and()?));
        }
        Ok(left)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut left = self.unary()?;
        while self.at_keyword("and") {
            self.pos += 1;
            left = Expr::And(Box::new(left), Box::new(self.unary()?));
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.at_keyword("not") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.compare()
    }

    fn compare(&mut self) -> Result<Expr, ExprError> {
        let left = self.primary()?;
        if let Some(Token {
            kind: TokKind::Op(op),
            ..
        }) = self.peek().cloned()
        {
            self.pos += 1;
            let right = self.primary()?;
            return Ok(Expr::Compare(op, Box::new(left), Box::new(right)));
        }
        Ok(left)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let end = self.end_offset();
        let Some(tok) = self.next() else {
            return Err(ExprError::Parse {
                position: end,
                reason: "unexpected end of input".into(),
            });
        };
        match tok.kind {
            TokKind::Number(n) => Ok(Expr::Literal(number_value(n))),
            TokKind::Str(s) => Ok(Expr::Literal(Value::String(s))),
            TokKind::LParen => {
                let inner = self.or()?;
                self.expect(TokKind::RParen)?;
                Ok(inner)
            }
            TokKind::Ident(name) => match name.as_str() {
                "true" => Ok(Expr::Literal(Value::Bool(true))),
                "false" => Ok(Expr::Literal(Value::Bool(false))),
                "null" => Ok(Expr::Literal(Value::Null)),
                "and" | "or" | "not" => Err(ExprError::Parse {
                    position: tok.offset,
                    reason: format!("unexpected keyword `{name}`"),
                }),
                "len" | "has" | "contains"
                    if matches!(
                        self.peek(),
                        Some(Token {
                            kind: TokKind::LParen,
                            ..
                        })
                    ) =>
                {
                    self.call(&name, tok.offset)
                }
                _ => self.path(name),
            },
            other => Err(ExprError::Parse {
                position: tok.offset,
                reason: format!("unexpected {other}"),
            }),
        }
    }

    fn call(&mut self, name: &str, offset: usize) -> Result<Expr, ExprError> {
        self.expect(TokKind::LParen)?;
        let mut args = vec![self.or()?];
        while matches!(
            self.peek(),
            Some(Token {
                kind: TokKind::Comma,
                ..
            })
        ) {
            self.pos += 1;
            args.push(self.or()?);
        }
        self.expect(TokKind::RParen)?;
        let (func, arity) = match name {
            "len" => (Func::Len, 1),
            "has" => (Func::Has, 1),
            _ => (Func::Contains, 2),
        };
        if args.len() != arity {
            return Err(ExprError::Parse {
                position: offset,
                reason: format!("{name}() takes {arity} argument(s), got {}", args.len()),
            });
        }
        if func == Func::Has && !matches!(args[0], Expr::Path(_)) {
            return Err(ExprError::Parse {
                position: offset,
                reason: "has() takes a key path".into(),
            });
        }
        Ok(Expr::Call(func, args))
    }

    fn path(&mut self, first: String) -> Result<Expr, ExprError> {
        let mut segments = vec![first];
        while matches!(
            self.peek(),
            Some(Token {
                kind: TokKind::Dot,
                ..
            })
        ) {
            self.pos += 1;
            match self.next() {
                Some(Token {
                    kind: TokKind::Ident(seg),
                    ..
                }) if !KEYWORDS.contains(&seg.as_str()) => segments.push(seg),
                Some(tok) => {
                    return Err(ExprError::Parse {
                        position: tok.offset,
                        reason: format!("expected field name, found {}", tok.kind),
                    })
                }
                None => {
                    return Err(ExprError::Parse {
                        position: self.end_offset(),
                        reason: "expected field name after `.`".into(),
                    })
                }
            }
        }
        Ok(Expr::Path(segments))
    }
}

fn number_value(n: f64) -> Value {
    if n.fract() == 0.0 && n.abs() < 9.0e15 {
        Value::from(n as i64)
    } else {
        serde_json::Number::from_f64(n)
            .map(Value::Number)
            .unwrap_or(Value::Null)
    }
}
