//! Text format for device models (`twinmodel 1`).
//!
//! A model file has a version header, a `device` line, and brace-delimited
//! sections: `properties`, `constraints`, `states`, `transitions`, `api`.
//! One declaration per line inside a section; `#` starts a comment.
//! Sections may appear in any order; names are resolved after the whole
//! file is read, so transitions can reference operations declared later.

use std::collections::BTreeSet;

use crate::model::expr::{type_check, BinOp, Expr, Ty, TypeEnv};
use crate::model::value::{Literal, PropertyType};
use crate::model::{
    builtin_binding_type, Action, Constraint, DeviceModel, EndpointDef, FieldDef, PropertyDef,
    State, StateMachine, Transition,
};
use crate::time::{self, VirtualTime};
use crate::wire::{OutcomeClass, TICK};

/// A parse or resolution failure, with the source position of the
/// offending token or declaration.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl ParseError {
    fn new(line: u32, col: u32, message: impl Into<String>) -> ParseError {
        ParseError {
            line,
            col,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Duration(u64),
    Str(String),
    Arrow,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Colon,
    Dot,
    Bang,
    Assign,
    EqEq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Newline,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Int(i) => format!("'{i}'"),
            Tok::Float(f) => format!("'{f}'"),
            Tok::Duration(ms) => format!("'{}'", time::format_duration_ms(*ms)),
            Tok::Str(s) => format!("\"{s}\""),
            Tok::Arrow => "'->'".into(),
            Tok::LBrace => "'{'".into(),
            Tok::RBrace => "'}'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Colon => "':'".into(),
            Tok::Dot => "'.'".into(),
            Tok::Bang => "'!'".into(),
            Tok::Assign => "'='".into(),
            Tok::EqEq => "'=='".into(),
            Tok::Ne => "'!='".into(),
            Tok::Lt => "'<'".into(),
            Tok::Le => "'<='".into(),
            Tok::Gt => "'>'".into(),
            Tok::Ge => "'>='".into(),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Percent => "'%'".into(),
            Tok::Newline => "end of line".into(),
            Tok::Eof => "end of file".into(),
        }
    }
}

struct Lexed {
    tok: Tok,
    line: u32,
    col: u32,
}

fn lex(text: &str) -> Result<Vec<Lexed>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line: u32 = 1;
    let mut col: u32 = 1;

    macro_rules! push {
        ($tok:expr, $l:expr, $c:expr) => {
            out.push(Lexed {
                tok: $tok,
                line: $l,
                col: $c,
            })
        };
    }

    while let Some(&c) = chars.peek() {
        let (l, co) = (line, col);
        match c {
            '\n' => {
                chars.next();
                push!(Tok::Newline, l, co);
                line += 1;
                col = 1;
            }
            ' ' | '\t' | '\r' => {
                chars.next();
                col += 1;
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            '"' => {
                chars.next();
                col += 1;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some('"') => {
                            col += 1;
                            break;
                        }
                        Some('\\') => {
                            col += 1;
                            match chars.next() {
                                Some('"') => {
                                    s.push('"');
                                    col += 1;
                                }
                                Some('\\') => {
                                    s.push('\\');
                                    col += 1;
                                }
                                Some('n') => {
                                    s.push('\n');
                                    col += 1;
                                }
                                other => {
                                    return Err(ParseError::new(
                                        line,
                                        col,
                                        format!("invalid escape {other:?} in string"),
                                    ))
                                }
                            }
                        }
                        Some('\n') | None => {
                            return Err(ParseError::new(l, co, "unterminated string"))
                        }
                        Some(c) => {
                            s.push(c);
                            col += 1;
                        }
                    }
                }
                push!(Tok::Str(s), l, co);
            }
            c if c.is_ascii_digit() => {
                let mut num = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() {
                        num.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let mut is_float = false;
                if chars.peek() == Some(&'.') {
                    // Look ahead: a digit must follow for this to be a float.
                    let mut clone = chars.clone();
                    clone.next();
                    if clone.peek().is_some_and(|c| c.is_ascii_digit()) {
                        is_float = true;
                        num.push('.');
                        chars.next();
                        col += 1;
                        while let Some(&c) = chars.peek() {
                            if c.is_ascii_digit() {
                                num.push(c);
                                chars.next();
                                col += 1;
                            } else {
                                break;
                            }
                        }
                    }
                }
                // A trailing unit makes an integer a duration literal.
                let mut unit = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphabetic() {
                        unit.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                if !unit.is_empty() {
                    if is_float {
                        return Err(ParseError::new(l, co, "durations must be integers"));
                    }
                    let ms = time::parse_duration_ms(&format!("{num}{unit}")).ok_or_else(
                        || ParseError::new(l, co, format!("invalid duration unit '{unit}'")),
                    )?;
                    push!(Tok::Duration(ms), l, co);
                } else if is_float {
                    let f: f64 = num
                        .parse()
                        .map_err(|_| ParseError::new(l, co, "invalid float literal"))?;
                    push!(Tok::Float(f), l, co);
                } else {
                    let i: i64 = num
                        .parse()
                        .map_err(|_| ParseError::new(l, co, "integer literal out of range"))?;
                    push!(Tok::Int(i), l, co);
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        s.push(c);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                push!(Tok::Ident(s), l, co);
            }
            _ => {
                chars.next();
                col += 1;
                let tok = match c {
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    ':' => Tok::Colon,
                    '.' => Tok::Dot,
                    '+' => Tok::Plus,
                    '*' => Tok::Star,
                    '/' => Tok::Slash,
                    '%' => Tok::Percent,
                    '-' => {
                        if chars.peek() == Some(&'>') {
                            chars.next();
                            col += 1;
                            Tok::Arrow
                        } else {
                            Tok::Minus
                        }
                    }
                    '!' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Ne
                        } else {
                            Tok::Bang
                        }
                    }
                    '=' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::EqEq
                        } else {
                            Tok::Assign
                        }
                    }
                    '<' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Le
                        } else {
                            Tok::Lt
                        }
                    }
                    '>' => {
                        if chars.peek() == Some(&'=') {
                            chars.next();
                            col += 1;
                            Tok::Ge
                        } else {
                            Tok::Gt
                        }
                    }
                    other => {
                        return Err(ParseError::new(
                            l,
                            co,
                            format!("unexpected character '{other}'"),
                        ))
                    }
                };
                push!(tok, l, co);
            }
        }
    }
    out.push(Lexed {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

/// Words that cannot name properties, states, fields, or operations.
const RESERVED: [&str; 27] = [
    "and", "or", "not", "implies", "in", "true", "false", "now", "req", "do", "when", "on",
    "respond", "notify", "message", "unit", "initial", "operation", "request", "response",
    "device", "version", "properties", "constraints", "states", "transitions", "tick",
];

struct Parser {
    toks: Vec<Lexed>,
    pos: usize,
}

/// Declarations annotated with their source position, used to point
/// resolution errors at the right line.
struct Spanned<T> {
    v: T,
    line: u32,
    col: u32,
}

struct RawModel {
    name: String,
    version: String,
    properties: Vec<Spanned<PropertyDef>>,
    constraints: Vec<Spanned<Constraint>>,
    states: Vec<Spanned<State>>,
    initials: Vec<Spanned<String>>,
    transitions: Vec<Spanned<Transition>>,
    api: Vec<Spanned<EndpointDef>>,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn here(&self) -> (u32, u32) {
        (self.toks[self.pos].line, self.toks[self.pos].col)
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError::new(line, col, message)
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.err(format!(
                "expected {}, found {}",
                tok.describe(),
                self.peek().describe()
            )))
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => Err(self.err(format!("expected identifier, found {}", other.describe()))),
        }
    }

    fn expect_name(&mut self, what: &str) -> Result<String, ParseError> {
        let (line, col) = self.here();
        let name = self.expect_ident()?;
        if RESERVED.contains(&name.as_str()) {
            return Err(ParseError::new(
                line,
                col,
                format!("'{name}' is a reserved word and cannot name a {what}"),
            ));
        }
        Ok(name)
    }

    fn expect_string(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.bump();
                Ok(s)
            }
            other => Err(self.err(format!("expected string, found {}", other.describe()))),
        }
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{kw}', found {}", self.peek().describe())))
        }
    }

    fn skip_newlines(&mut self) {
        while *self.peek() == Tok::Newline {
            self.bump();
        }
    }

    fn end_of_line(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Newline => {
                self.skip_newlines();
                Ok(())
            }
            Tok::Eof | Tok::RBrace => Ok(()),
            other => Err(self.err(format!(
                "expected end of line, found {}",
                other.describe()
            ))),
        }
    }

    fn parse_file(&mut self) -> Result<RawModel, ParseError> {
        self.skip_newlines();
        self.expect_kw("twinmodel")?;
        match self.bump() {
            Tok::Int(1) => {}
            other => {
                return Err(self.err(format!(
                    "unsupported twinmodel version {}",
                    other.describe()
                )))
            }
        }
        self.end_of_line()?;
        self.skip_newlines();

        self.expect_kw("device")?;
        let name = self.expect_name("device")?;
        self.expect_kw("version")?;
        let version = self.expect_string()?;
        self.end_of_line()?;

        let mut raw = RawModel {
            name,
            version,
            properties: Vec::new(),
            constraints: Vec::new(),
            states: Vec::new(),
            initials: Vec::new(),
            transitions: Vec::new(),
            api: Vec::new(),
        };

        let mut seen = BTreeSet::new();
        loop {
            self.skip_newlines();
            if *self.peek() == Tok::Eof {
                break;
            }
            let (line, col) = self.here();
            let section = self.expect_ident()?;
            if !seen.insert(section.clone()) {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("section '{section}' appears twice"),
                ));
            }
            self.expect(Tok::LBrace)?;
            self.skip_newlines();
            match section.as_str() {
                "properties" => self.parse_properties(&mut raw)?,
                "constraints" => self.parse_constraints(&mut raw)?,
                "states" => self.parse_states(&mut raw)?,
                "transitions" => self.parse_transitions(&mut raw)?,
                "api" => self.parse_api(&mut raw)?,
                other => {
                    return Err(ParseError::new(
                        line,
                        col,
                        format!("unknown section '{other}'"),
                    ))
                }
            }
            self.expect(Tok::RBrace)?;
            self.end_of_line()?;
        }
        Ok(raw)
    }

    fn parse_properties(&mut self, raw: &mut RawModel) -> Result<(), ParseError> {
        while *self.peek() != Tok::RBrace {
            let (line, col) = self.here();
            let name = self.expect_name("property")?;
            self.expect(Tok::Colon)?;
            let ty = self.parse_type()?;
            let default = if *self.peek() == Tok::Assign {
                self.bump();
                Some(self.parse_literal(true)?)
            } else {
                None
            };
            let unit = if self.eat_kw("unit") {
                Some(self.expect_string()?)
            } else {
                None
            };
            self.end_of_line()?;
            raw.properties.push(Spanned {
                v: PropertyDef {
                    name,
                    ty,
                    unit,
                    default,
                },
                line,
                col,
            });
        }
        Ok(())
    }

    fn parse_type(&mut self) -> Result<PropertyType, ParseError> {
        let (line, col) = self.here();
        let name = self.expect_ident()?;
        match name.as_str() {
            "int" => Ok(PropertyType::Int),
            "float" => Ok(PropertyType::Float),
            "bool" => Ok(PropertyType::Bool),
            "string" => Ok(PropertyType::Str),
            "datetime" => Ok(PropertyType::Datetime),
            "duration" => Ok(PropertyType::Duration),
            "enum" => {
                self.expect(Tok::LParen)?;
                let mut domain = vec![self.expect_ident()?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    domain.push(self.expect_ident()?);
                }
                self.expect(Tok::RParen)?;
                Ok(PropertyType::Enum(domain))
            }
            other => Err(ParseError::new(
                line,
                col,
                format!("unknown type '{other}'"),
            )),
        }
    }

    fn parse_literal(&mut self, allow_bare_ident: bool) -> Result<Literal, ParseError> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Ok(Literal::Int(i))
            }
            Tok::Float(f) => {
                self.bump();
                Ok(Literal::Float(f))
            }
            Tok::Duration(ms) => {
                self.bump();
                Ok(Literal::Duration(ms))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Literal::Str(s))
            }
            Tok::Minus => {
                self.bump();
                match self.peek().clone() {
                    Tok::Int(i) => {
                        self.bump();
                        Ok(Literal::Int(-i))
                    }
                    Tok::Float(f) => {
                        self.bump();
                        Ok(Literal::Float(-f))
                    }
                    other => Err(self.err(format!(
                        "expected number after '-', found {}",
                        other.describe()
                    ))),
                }
            }
            Tok::Ident(s) if s == "true" => {
                self.bump();
                Ok(Literal::Bool(true))
            }
            Tok::Ident(s) if s == "false" => {
                self.bump();
                Ok(Literal::Bool(false))
            }
            Tok::Ident(s) if allow_bare_ident && !RESERVED.contains(&s.as_str()) => {
                self.bump();
                Ok(Literal::Str(s))
            }
            other => Err(self.err(format!("expected literal, found {}", other.describe()))),
        }
    }

    fn parse_constraints(&mut self, raw: &mut RawModel) -> Result<(), ParseError> {
        while *self.peek() != Tok::RBrace {
            let (line, col) = self.here();
            let id = self.expect_name("constraint")?;
            self.expect(Tok::Colon)?;
            let expr = self.parse_expr()?;
            let message = if self.eat_kw("message") {
                self.expect_string()?
            } else {
                format!("constraint '{id}' violated")
            };
            self.end_of_line()?;
            raw.constraints.push(Spanned {
                v: Constraint { id, expr, message },
                line,
                col,
            });
        }
        Ok(())
    }

    fn parse_states(&mut self, raw: &mut RawModel) -> Result<(), ParseError> {
        while *self.peek() != Tok::RBrace {
            let (line, col) = self.here();
            let initial = self.eat_kw("initial");
            let name = self.expect_name("state")?;
            let entry = if self.eat_kw("do") {
                self.parse_actions()?
            } else {
                Vec::new()
            };
            self.end_of_line()?;
            if initial {
                raw.initials.push(Spanned {
                    v: name.clone(),
                    line,
                    col,
                });
            }
            raw.states.push(Spanned {
                v: State { name, entry },
                line,
                col,
            });
        }
        Ok(())
    }

    fn parse_actions(&mut self) -> Result<Vec<Action>, ParseError> {
        let mut actions = vec![self.parse_action()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            actions.push(self.parse_action()?);
        }
        Ok(actions)
    }

    fn parse_action(&mut self) -> Result<Action, ParseError> {
        let (line, col) = self.here();
        if self.at_kw("plan") {
            self.bump();
            self.expect(Tok::Dot)?;
            let verb = self.expect_ident()?;
            return match verb.as_str() {
                "load" => Ok(Action::PlanLoad),
                "dispense" => Ok(Action::PlanDispense),
                "confirm" => Ok(Action::PlanConfirm),
                "miss" => Ok(Action::PlanMiss),
                "clear" => Ok(Action::PlanClear),
                other => Err(ParseError::new(
                    line,
                    col,
                    format!("unknown plan verb 'plan.{other}'"),
                )),
            };
        }
        let prop = self.expect_ident()?;
        self.expect(Tok::Assign)?;
        let expr = self.parse_expr()?;
        Ok(Action::Assign { prop, expr })
    }

    fn parse_transitions(&mut self, raw: &mut RawModel) -> Result<(), ParseError> {
        while *self.peek() != Tok::RBrace {
            let (line, col) = self.here();
            let source = self.expect_ident()?;
            self.expect(Tok::Arrow)?;
            let target = self.expect_ident()?;
            self.expect_kw("on")?;
            let trigger = self.expect_ident()?;
            let guard = if self.eat_kw("when") {
                Some(self.parse_expr()?)
            } else {
                None
            };
            let actions = if self.eat_kw("do") {
                self.parse_actions()?
            } else {
                Vec::new()
            };
            let mut notify = Vec::new();
            if self.eat_kw("notify") {
                notify.push(self.expect_ident()?);
                while *self.peek() == Tok::Comma {
                    self.bump();
                    notify.push(self.expect_ident()?);
                }
            }
            self.expect_kw("respond")?;
            let (sline, scol) = self.here();
            let status = self.expect_ident()?;
            let respond = match status.as_str() {
                "accepted" => OutcomeClass::Accepted,
                "rejected" => OutcomeClass::RejectedInState,
                "dispensed" => OutcomeClass::Dispensed,
                "missed" => OutcomeClass::MissedNotify,
                "error" => OutcomeClass::Error,
                other => {
                    return Err(ParseError::new(
                        sline,
                        scol,
                        format!(
                            "unknown response status '{other}' (expected accepted, rejected, \
                             dispensed, missed, or error)"
                        ),
                    ))
                }
            };
            self.end_of_line()?;
            raw.transitions.push(Spanned {
                v: Transition {
                    source,
                    target,
                    trigger,
                    guard,
                    actions,
                    notify,
                    respond,
                },
                line,
                col,
            });
        }
        Ok(())
    }

    fn parse_api(&mut self, raw: &mut RawModel) -> Result<(), ParseError> {
        while *self.peek() != Tok::RBrace {
            let (line, col) = self.here();
            self.expect_kw("operation")?;
            // `tick` may be declared (to give the timer response fields);
            // every other reserved word is rejected.
            let operation = if self.at_kw(TICK) {
                self.bump();
                TICK.to_string()
            } else {
                self.expect_name("operation")?
            };
            self.expect(Tok::LBrace)?;
            self.skip_newlines();

            self.expect_kw("request")?;
            self.expect(Tok::LBrace)?;
            self.skip_newlines();
            let mut request = Vec::new();
            if *self.peek() != Tok::RBrace {
                loop {
                    let name = self.expect_name("request field")?;
                    self.expect(Tok::Colon)?;
                    let ty = self.parse_type()?;
                    request.push(FieldDef { name, ty });
                    self.skip_newlines();
                    if *self.peek() == Tok::Comma {
                        self.bump();
                        self.skip_newlines();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RBrace)?;
            self.skip_newlines();

            self.expect_kw("response")?;
            self.expect(Tok::LBrace)?;
            self.skip_newlines();
            let mut response = Vec::new();
            if *self.peek() != Tok::RBrace {
                loop {
                    response.push(self.expect_ident()?);
                    self.skip_newlines();
                    if *self.peek() == Tok::Comma {
                        self.bump();
                        self.skip_newlines();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RBrace)?;
            self.skip_newlines();
            self.expect(Tok::RBrace)?;
            self.end_of_line()?;

            raw.api.push(Spanned {
                v: EndpointDef {
                    operation,
                    request,
                    response,
                },
                line,
                col,
            });
        }
        Ok(())
    }

    // Expression grammar, lowest precedence first:
    //   implies < or < and < comparison/in < additive < multiplicative < unary
    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.parse_or()?;
        if self.eat_kw("implies") {
            let rhs = self.parse_expr()?;
            return Ok(Expr::Binary(BinOp::Implies, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_and()?;
        while self.eat_kw("or") {
            let rhs = self.parse_and()?;
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_comparison()?;
        while self.eat_kw("and") {
            let rhs = self.parse_comparison()?;
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_comparison(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.parse_additive()?;
        let op = match self.peek() {
            Tok::EqEq => Some(BinOp::Eq),
            Tok::Ne => Some(BinOp::Ne),
            Tok::Lt => Some(BinOp::Lt),
            Tok::Le => Some(BinOp::Le),
            Tok::Gt => Some(BinOp::Gt),
            Tok::Ge => Some(BinOp::Ge),
            Tok::Ident(s) if s == "in" => {
                self.bump();
                self.expect(Tok::LBrace)?;
                let mut set = vec![self.parse_literal(true)?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    set.push(self.parse_literal(true)?);
                }
                self.expect(Tok::RBrace)?;
                return Ok(Expr::In(Box::new(lhs), set));
            }
            _ => None,
        };
        if let Some(op) = op {
            self.bump();
            let rhs = self.parse_additive()?;
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_multiplicative()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                Tok::Percent => BinOp::Rem,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Bang || self.at_kw("not") {
            self.bump();
            return Ok(Expr::Not(Box::new(self.parse_unary()?)));
        }
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.parse_unary()?)));
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let e = self.parse_expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Int(_) | Tok::Float(_) | Tok::Str(_) | Tok::Duration(_) => {
                Ok(Expr::Lit(self.parse_literal(false)?))
            }
            Tok::Ident(s) => match s.as_str() {
                "true" | "false" => Ok(Expr::Lit(self.parse_literal(false)?)),
                "now" => {
                    self.bump();
                    Ok(Expr::Now)
                }
                "req" => {
                    self.bump();
                    self.expect(Tok::Dot)?;
                    let field = self.expect_ident()?;
                    Ok(Expr::ReqField(field))
                }
                _ => {
                    self.bump();
                    Ok(Expr::Name(s))
                }
            },
            other => Err(self.err(format!(
                "expected expression, found {}",
                other.describe()
            ))),
        }
    }
}

struct ResolveEnv<'a> {
    properties: &'a [PropertyDef],
    req_fields: Option<&'a [FieldDef]>,
    properties_only: bool,
}

impl TypeEnv for ResolveEnv<'_> {
    fn name_type(&self, name: &str) -> Option<Ty> {
        if let Some(p) = self.properties.iter().find(|p| p.name == name) {
            return Some(Ty::of(&p.ty));
        }
        if self.properties_only {
            return None;
        }
        builtin_binding_type(name).map(|t| Ty::of(&t))
    }

    fn req_field_type(&self, name: &str) -> Option<Ty> {
        self.req_fields
            .and_then(|fs| fs.iter().find(|f| f.name == name))
            .map(|f| Ty::of(&f.ty))
    }

    fn clock_available(&self) -> bool {
        !self.properties_only
    }
}

/// Coerces string defaults into datetimes/durations where the property
/// type asks for one.
fn coerce_default(ty: &PropertyType, lit: Literal) -> Literal {
    match (ty, &lit) {
        (PropertyType::Datetime, Literal::Str(s)) => match VirtualTime::parse(s) {
            Some(t) => Literal::Datetime(t),
            None => lit,
        },
        (PropertyType::Duration, Literal::Str(s)) => match time::parse_duration_ms(s) {
            Some(ms) => Literal::Duration(ms),
            None => lit,
        },
        _ => lit,
    }
}

fn resolve(raw: RawModel) -> Result<DeviceModel, ParseError> {
    // Properties: uniqueness and default conformance.
    let mut properties = Vec::new();
    let mut names = BTreeSet::new();
    for sp in raw.properties {
        let mut p = sp.v;
        if !names.insert(p.name.clone()) {
            return Err(ParseError::new(
                sp.line,
                sp.col,
                format!("duplicate property '{}'", p.name),
            ));
        }
        p.default = p.default.map(|d| coerce_default(&p.ty, d));
        if let Some(default) = &p.default {
            if !default.conforms_to(&p.ty) {
                return Err(ParseError::new(
                    sp.line,
                    sp.col,
                    format!(
                        "default for '{}' does not match its type {}",
                        p.name,
                        p.ty.name()
                    ),
                ));
            }
        }
        properties.push(p);
    }

    // API: uniqueness; field checks; response names resolved below once
    // properties are final.
    let mut api = Vec::new();
    let mut ops = BTreeSet::new();
    for sp in &raw.api {
        let e = &sp.v;
        if !ops.insert(e.operation.clone()) {
            return Err(ParseError::new(
                sp.line,
                sp.col,
                format!("duplicate operation '{}'", e.operation),
            ));
        }
        if e.operation == TICK && !e.request.is_empty() {
            return Err(ParseError::new(
                sp.line,
                sp.col,
                format!("'{TICK}' cannot declare request fields"),
            ));
        }
        let mut fields = BTreeSet::new();
        for f in &e.request {
            if !fields.insert(f.name.clone()) {
                return Err(ParseError::new(
                    sp.line,
                    sp.col,
                    format!(
                        "duplicate request field '{}' in operation '{}'",
                        f.name, e.operation
                    ),
                ));
            }
        }
        for r in &e.response {
            let known = properties.iter().any(|p| p.name == *r)
                || builtin_binding_type(r).is_some();
            if !known {
                return Err(ParseError::new(
                    sp.line,
                    sp.col,
                    format!(
                        "response field '{}' of operation '{}' is neither a property nor a binding",
                        r, e.operation
                    ),
                ));
            }
        }
        api.push(e.clone());
    }

    // Constraints: closed over properties, boolean-typed.
    let mut constraints = Vec::new();
    let mut ids = BTreeSet::new();
    for sp in raw.constraints {
        let mut c = sp.v;
        if !ids.insert(c.id.clone()) {
            return Err(ParseError::new(
                sp.line,
                sp.col,
                format!("duplicate constraint '{}'", c.id),
            ));
        }
        let env = ResolveEnv {
            properties: &properties,
            req_fields: None,
            properties_only: true,
        };
        match type_check(&mut c.expr, &env) {
            Ok(Ty::Bool) => {}
            Ok(_) => {
                return Err(ParseError::new(
                    sp.line,
                    sp.col,
                    format!("constraint '{}' is not a boolean expression", c.id),
                ))
            }
            Err(e) => {
                return Err(ParseError::new(
                    sp.line,
                    sp.col,
                    format!("constraint '{}': {}", c.id, e),
                ))
            }
        }
        constraints.push(c);
    }

    // States.
    let mut states = Vec::new();
    let mut state_names = BTreeSet::new();
    for sp in raw.states {
        let mut s = sp.v;
        if !state_names.insert(s.name.clone()) {
            return Err(ParseError::new(
                sp.line,
                sp.col,
                format!("duplicate state '{}'", s.name),
            ));
        }
        for a in &mut s.entry {
            resolve_action(a, &properties, None, sp.line, sp.col)?;
        }
        states.push(s);
    }
    if raw.initials.is_empty() {
        return Err(ParseError::new(1, 1, "no initial state declared"));
    }
    if raw.initials.len() > 1 {
        let sp = &raw.initials[1];
        return Err(ParseError::new(
            sp.line,
            sp.col,
            "more than one initial state declared",
        ));
    }
    let initial = raw.initials.into_iter().next().unwrap().v;

    // Transitions.
    let mut transitions = Vec::new();
    for sp in raw.transitions {
        let mut t = sp.v;
        for endpoint in [&t.source, &t.target] {
            if !state_names.contains(endpoint) {
                return Err(ParseError::new(
                    sp.line,
                    sp.col,
                    format!("transition references undeclared state '{endpoint}'"),
                ));
            }
        }
        let req_fields: Vec<FieldDef> = if t.trigger == TICK {
            Vec::new()
        } else {
            match api.iter().find(|e| e.operation == t.trigger) {
                Some(e) => e.request.clone(),
                None => {
                    return Err(ParseError::new(
                        sp.line,
                        sp.col,
                        format!("trigger '{}' is not a declared operation", t.trigger),
                    ))
                }
            }
        };
        if let Some(guard) = &mut t.guard {
            let env = ResolveEnv {
                properties: &properties,
                req_fields: Some(&req_fields),
                properties_only: false,
            };
            match type_check(guard, &env) {
                Ok(Ty::Bool) => {}
                Ok(_) => {
                    return Err(ParseError::new(
                        sp.line,
                        sp.col,
                        "guard is not a boolean expression".to_string(),
                    ))
                }
                Err(e) => {
                    return Err(ParseError::new(sp.line, sp.col, format!("guard: {e}")))
                }
            }
        }
        for a in &mut t.actions {
            resolve_action(a, &properties, Some(&req_fields), sp.line, sp.col)?;
        }
        transitions.push(t);
    }

    Ok(DeviceModel {
        name: raw.name,
        version: raw.version,
        properties,
        constraints,
        behavior: StateMachine {
            states,
            initial,
            transitions,
        },
        api,
    })
}

fn resolve_action(
    action: &mut Action,
    properties: &[PropertyDef],
    req_fields: Option<&[FieldDef]>,
    line: u32,
    col: u32,
) -> Result<(), ParseError> {
    if let Action::Assign { prop, expr } = action {
        let Some(p) = properties.iter().find(|p| p.name == *prop) else {
            return Err(ParseError::new(
                line,
                col,
                format!("assignment targets undeclared property '{prop}'"),
            ));
        };
        let env = ResolveEnv {
            properties,
            req_fields: req_fields.or(Some(&[])),
            properties_only: false,
        };
        let ty = type_check(expr, &env)
            .map_err(|e| ParseError::new(line, col, format!("assignment to '{prop}': {e}")))?;
        let expected = Ty::of(&p.ty);
        let ok = match (&expected, &ty) {
            (Ty::Float, Ty::Int) => true,
            (Ty::Enum(_), Ty::Str) | (Ty::Enum(_), Ty::Enum(_)) | (Ty::Str, Ty::Enum(_)) => true,
            _ => expected == ty,
        };
        if !ok {
            return Err(ParseError::new(
                line,
                col,
                format!("assignment to '{prop}' has mismatched type"),
            ));
        }
    }
    Ok(())
}

/// Parses and fully resolves a model file.
pub fn parse_model(text: &str) -> Result<DeviceModel, ParseError> {
    let toks = lex(text)?;
    let mut parser = Parser { toks, pos: 0 };
    let raw = parser.parse_file()?;
    resolve(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_model_parses() {
        let m = parse_model(
            "twinmodel 1\n\
             device lamp version \"1.0.0\"\n\
             properties {\n  brightness: int = 0\n}\n\
             states {\n  initial Off\n}\n",
        )
        .unwrap();
        assert_eq!(m.name, "lamp");
        assert_eq!(m.properties.len(), 1);
        assert_eq!(m.behavior.initial, "Off");
        assert!(m.behavior.transitions.is_empty());
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_model("twinmodel 1\ndevice x version \"1\"\nproperties {\n  : int\n}\n")
            .unwrap_err();
        assert_eq!(err.line, 4);
        assert!(err.message.contains("identifier"));
    }

    #[test]
    fn dangling_state_is_reported_by_name() {
        let err = parse_model(
            "twinmodel 1\n\
             device x version \"1\"\n\
             states {\n  initial A\n}\n\
             transitions {\n  A -> Ghost on tick respond accepted\n}\n",
        )
        .unwrap_err();
        assert!(err.message.contains("Ghost"), "{}", err.message);
        assert_eq!(err.line, 7);
    }

    #[test]
    fn duplicate_property_is_an_error() {
        let err = parse_model(
            "twinmodel 1\n\
             device x version \"1\"\n\
             properties {\n  a: int\n  a: bool\n}\n\
             states {\n  initial S\n}\n",
        )
        .unwrap_err();
        assert!(err.message.contains("duplicate property 'a'"));
        assert_eq!(err.line, 5);
    }

    #[test]
    fn expression_type_errors_are_parse_errors() {
        let err = parse_model(
            "twinmodel 1\n\
             device x version \"1\"\n\
             properties {\n  a: int\n}\n\
             constraints {\n  c1: a + true message \"x\"\n}\n\
             states {\n  initial S\n}\n",
        )
        .unwrap_err();
        assert!(err.message.contains("c1"), "{}", err.message);
    }

    #[test]
    fn enum_literals_resolve_in_expressions() {
        let m = parse_model(
            "twinmodel 1\n\
             device x version \"1\"\n\
             properties {\n  mode: enum(eco, fast) = eco\n}\n\
             constraints {\n  m: mode in {eco, fast}\n  n: mode == eco\n}\n\
             states {\n  initial S\n}\n",
        )
        .unwrap();
        assert_eq!(m.constraints.len(), 2);
        // Bare `eco` resolved to a string literal.
        match &m.constraints[1].expr {
            Expr::Binary(BinOp::Eq, _, rhs) => {
                assert_eq!(**rhs, Expr::Lit(Literal::Str("eco".into())))
            }
            other => panic!("unexpected shape {other:?}"),
        }
    }
}
