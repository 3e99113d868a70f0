//! The model formula mini-language.
//!
//! A formula has a quantile part and an optional variance part separated by
//! `|`:
//!
//! ```text
//! formula  := IDENT "~" side [ "|" side ]
//! side     := item { "+" item } [ "-" "1" ]
//! item     := "1" | "f" ":" IDENT | smooth | IDENT
//! smooth   := "s" "(" IDENT { "," option } ")"
//! option   := "k" "=" INT | "bs" "=" STRING | "by" "=" IDENT | "degree" "=" INT
//! ```
//!
//! Bare identifiers are linear terms, `f:name` is a factor, and `s(...)` is a
//! penalized smooth with basis `"ps"` (default), `"cc"` (cyclic) or `"ad"`
//! (adaptive). The variance part feeds the preliminary location-scale fit;
//! when it is absent the learning rate is constant across observations.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_DEGREE: usize = 3;

/// A syntax or validation error with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("formula error at position {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

impl ParseError {
    fn new(pos: usize, message: impl Into<String>) -> Self {
        Self { pos, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasisType {
    /// Cubic P-spline: B-spline basis with a second-order difference penalty.
    PS,
    /// Cyclic P-spline, periodic over the covariate range.
    CC,
    /// Adaptive P-spline with several locally weighted penalties.
    AD,
}

impl BasisType {
    pub fn code(self) -> &'static str {
        match self {
            BasisType::PS => "ps",
            BasisType::CC => "cc",
            BasisType::AD => "ad",
        }
    }

    pub fn min_k(self) -> usize {
        match self {
            BasisType::PS => 3,
            BasisType::CC => 4,
            BasisType::AD => 10,
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        match code {
            "ps" => Some(BasisType::PS),
            "cc" => Some(BasisType::CC),
            "ad" => Some(BasisType::AD),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub variable: String,
    pub by: Option<String>,
    pub basis: BasisType,
    pub k: usize,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Linear { variable: String },
    Factor { variable: String },
    Smooth(SmoothTerm),
}

impl Term {
    pub fn variable(&self) -> &str {
        match self {
            Term::Linear { variable } | Term::Factor { variable } => variable,
            Term::Smooth(s) => &s.variable,
        }
    }

    /// Identifying name, e.g. `x`, `f:dow`, `s(x)` or `s(p, by=q)`.
    pub fn name(&self) -> String {
        match self {
            Term::Linear { variable } => variable.clone(),
            Term::Factor { variable } => format!("f:{variable}"),
            Term::Smooth(s) => match &s.by {
                Some(by) => format!("s({}, by={})", s.variable, by),
                None => format!("s({})", s.variable),
            },
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Smooth(s) => {
                write!(f, "s({}", s.variable)?;
                if s.k != DEFAULT_K {
                    write!(f, ", k={}", s.k)?;
                }
                if s.basis != BasisType::PS {
                    write!(f, ", bs=\"{}\"", s.basis.code())?;
                }
                if let Some(by) = &s.by {
                    write!(f, ", by={by}")?;
                }
                if s.degree != DEFAULT_DEGREE {
                    write!(f, ", degree={}", s.degree)?;
                }
                write!(f, ")")
            }
            other => f.write_str(&other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub quantile_terms: Vec<Term>,
    pub variance_terms: Vec<Term>,
    pub has_intercept: bool,
}

impl ModelSpec {
    /// Every column name the model reads, response included.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        out.insert(self.response.clone());
        for t in self.quantile_terms.iter().chain(&self.variance_terms) {
            out.insert(t.variable().to_string());
            if let Term::Smooth(SmoothTerm { by: Some(by), .. }) = t {
                out.insert(by.clone());
            }
        }
        out
    }

    pub fn has_variance_model(&self) -> bool {
        !self.variance_terms.is_empty()
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        if self.quantile_terms.is_empty() {
            write!(f, "{}", if self.has_intercept { "1" } else { "-1" })?;
        } else {
            let parts: Vec<String> = self.quantile_terms.iter().map(Term::to_string).collect();
            write!(f, "{}", parts.join(" + "))?;
            if !self.has_intercept {
                write!(f, " - 1")?;
            }
        }
        if !self.variance_terms.is_empty() {
            let parts: Vec<String> = self.variance_terms.iter().map(Term::to_string).collect();
            write!(f, " | {}", parts.join(" + "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Str(String),
    Tilde,
    Plus,
    Minus,
    Pipe,
    LParen,
    RParen,
    Comma,
    Eq,
    Colon,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Str(s) => format!("string \"{s}\""),
            Tok::Tilde => "`~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Pipe => "`|`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Colon => "`:`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            '~' => Tok::Tilde,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '|' => Tok::Pipe,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            '=' => Tok::Eq,
            ':' => Tok::Colon,
            '"' | '\'' => {
                let quote = bytes[i];
                let mut j = i + 1;
                while j < bytes.len() && bytes[j] != quote {
                    j += 1;
                }
                if j == bytes.len() {
                    return Err(ParseError::new(start, "unterminated string literal"));
                }
                let s = text[i + 1..j].to_string();
                i = j + 1;
                out.push((start, Tok::Str(s)));
                continue;
            }
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b'_') {
                    return Err(ParseError::new(start, "identifiers must not start with a digit"));
                }
                let v = text[i..j]
                    .parse::<u64>()
                    .map_err(|_| ParseError::new(start, "integer literal out of range"))?;
                i = j;
                out.push((start, Tok::Int(v)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                let mut j = i;
                while j < bytes.len()
                    && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_' || bytes[j] == b'.')
                {
                    j += 1;
                }
                let s = text[i..j].to_string();
                i = j;
                out.push((start, Tok::Ident(s)));
                continue;
            }
            other => return Err(ParseError::new(start, format!("unexpected character `{other}`"))),
        };
        i += 1;
        out.push((start, tok));
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<usize, ParseError> {
        let (pos, tok) = self.bump();
        if tok == want {
            Ok(pos)
        } else {
            Err(ParseError::new(pos, format!("expected {}, found {}", want.describe(), tok.describe())))
        }
    }

    fn ident(&mut self) -> Result<(usize, String), ParseError> {
        match self.bump() {
            (pos, Tok::Ident(s)) => Ok((pos, s)),
            (pos, tok) => Err(ParseError::new(pos, format!("expected identifier, found {}", tok.describe()))),
        }
    }

    fn formula(&mut self) -> Result<ModelSpec, ParseError> {
        let (_, response) = self.ident()?;
        self.expect(Tok::Tilde)?;
        let (quantile_terms, has_intercept) = self.side(true)?;
        let variance_terms = if *self.peek() == Tok::Pipe {
            self.bump();
            let (terms, _) = self.side(false)?;
            terms
        } else {
            Vec::new()
        };
        match self.bump() {
            (_, Tok::End) => {}
            (pos, tok) => return Err(ParseError::new(pos, format!("unexpected {}", tok.describe()))),
        }
        Ok(ModelSpec { response, quantile_terms, variance_terms, has_intercept })
    }

    fn side(&mut self, quantile: bool) -> Result<(Vec<Term>, bool), ParseError> {
        let mut terms: Vec<(usize, Term)> = Vec::new();
        let mut has_intercept = true;
        loop {
            if *self.peek() == Tok::Minus {
                let pos = self.pos();
                self.bump();
                match self.bump() {
                    (_, Tok::Int(1)) => {}
                    (p, tok) => {
                        return Err(ParseError::new(p, format!("expected `1` after `-`, found {}", tok.describe())))
                    }
                }
                if !quantile {
                    return Err(ParseError::new(pos, "the variance model always has an intercept"));
                }
                has_intercept = false;
                break;
            }
            let pos = self.pos();
            if let Some(term) = self.item()? {
                terms.push((pos, term));
            }
            if *self.peek() == Tok::Plus {
                self.bump();
            } else {
                if *self.peek() == Tok::Minus {
                    continue;
                }
                break;
            }
        }
        validate_side(&terms)?;
        Ok((terms.into_iter().map(|(_, t)| t).collect(), has_intercept))
    }

    /// `None` for the explicit intercept `1`.
    fn item(&mut self) -> Result<Option<Term>, ParseError> {
        let (pos, tok) = self.bump();
        match tok {
            Tok::Int(1) => Ok(None),
            Tok::Ident(name) => match self.peek() {
                Tok::Colon if name == "f" => {
                    self.bump();
                    let (_, variable) = self.ident()?;
                    Ok(Some(Term::Factor { variable }))
                }
                Tok::LParen => match name.as_str() {
                    "s" => self.smooth().map(Some),
                    "te" | "ti" | "t2" => Err(ParseError::new(
                        pos,
                        format!("unsupported smooth `{name}`: tensor-product smooths are not available"),
                    )),
                    other => Err(ParseError::new(pos, format!("unknown function `{other}`"))),
                },
                _ => Ok(Some(Term::Linear { variable: name })),
            },
            other => Err(ParseError::new(pos, format!("expected a term, found {}", other.describe()))),
        }
    }

    fn smooth(&mut self) -> Result<Term, ParseError> {
        self.expect(Tok::LParen)?;
        let (_, variable) = self.ident()?;
        let mut k = None;
        let mut basis = None;
        let mut by = None;
        let mut degree = None;
        let mut basis_pos = 0;
        let mut k_pos = 0;
        while *self.peek() == Tok::Comma {
            self.bump();
            let (opt_pos, opt) = self.ident()?;
            self.expect(Tok::Eq)?;
            let dup = || ParseError::new(opt_pos, format!("duplicate option `{opt}`"));
            match opt.as_str() {
                "k" => {
                    if k.is_some() {
                        return Err(dup());
                    }
                    k_pos = opt_pos;
                    k = Some(self.int()?);
                }
                "degree" => {
                    if degree.is_some() {
                        return Err(dup());
                    }
                    degree = Some(self.int()?);
                }
                "bs" => {
                    if basis.is_some() {
                        return Err(dup());
                    }
                    basis_pos = self.pos();
                    let code = match self.bump() {
                        (_, Tok::Str(s)) => s,
                        (p, tok) => {
                            return Err(ParseError::new(p, format!("expected basis string, found {}", tok.describe())))
                        }
                    };
                    basis = Some(BasisType::from_code(&code).ok_or_else(|| {
                        ParseError::new(basis_pos, format!("unknown basis code \"{code}\" (expected ps, cc or ad)"))
                    })?);
                }
                "by" => {
                    if by.is_some() {
                        return Err(dup());
                    }
                    by = Some(self.ident()?.1);
                }
                other => return Err(ParseError::new(opt_pos, format!("unknown smooth option `{other}`"))),
            }
        }
        self.expect(Tok::RParen)?;
        let basis = basis.unwrap_or(BasisType::PS);
        let k = k.unwrap_or(DEFAULT_K);
        let degree = degree.unwrap_or(DEFAULT_DEGREE);
        let min_k = basis.min_k().max(degree + 1);
        if k < min_k {
            let pos = if k_pos > 0 { k_pos } else { basis_pos };
            return Err(ParseError::new(
                pos,
                format!("k={k} is below the minimum {min_k} for basis \"{}\"", basis.code()),
            ));
        }
        Ok(Term::Smooth(SmoothTerm { variable, by, basis, k, degree }))
    }

    fn int(&mut self) -> Result<usize, ParseError> {
        match self.bump() {
            (_, Tok::Int(v)) => Ok(v as usize),
            (p, tok) => Err(ParseError::new(p, format!("expected integer, found {}", tok.describe()))),
        }
    }
}

fn validate_side(terms: &[(usize, Term)]) -> Result<(), ParseError> {
    let mut names = BTreeSet::new();
    for (pos, t) in terms {
        if !names.insert(t.name()) {
            return Err(ParseError::new(*pos, format!("duplicate term `{}`", t.name())));
        }
    }
    for (pos, t) in terms {
        if let Term::Linear { variable } = t {
            let clash = terms.iter().any(|(_, o)| matches!(o, Term::Smooth(s) if s.variable == *variable && s.by.is_none()));
            if clash {
                return Err(ParseError::new(
                    *pos,
                    format!("`{variable}` appears both as a linear and as a smooth term"),
                ));
            }
        }
    }
    Ok(())
}

/// Parse a formula string into a [`ModelSpec`].
///
/// ```
/// use quantgam::formula::{parse_formula, Term, BasisType};
///
/// let spec = parse_formula(r#"accel ~ s(times, k=20, bs="ad") | s(times)"#).unwrap();
/// assert_eq!(spec.response, "accel");
/// match &spec.quantile_terms[0] {
///     Term::Smooth(s) => assert_eq!((s.k, s.basis), (20, BasisType::AD)),
///     _ => unreachable!(),
/// }
/// assert_eq!(spec.variance_terms.len(), 1);
/// ```
pub fn parse_formula(text: &str) -> Result<ModelSpec, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::new(0, "empty formula"));
    }
    let toks = lex(text)?;
    Parser { toks, at: 0 }.formula()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smooth(t: &Term) -> &SmoothTerm {
        match t {
            Term::Smooth(s) => s,
            other => panic!("expected smooth, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_with_variance_model() {
        let spec = parse_formula("accel ~ s(times, k=20, bs=\"ad\") | s(times)").unwrap();
        assert_eq!(spec.quantile_terms.len(), 1);
        let q = smooth(&spec.quantile_terms[0]);
        assert_eq!((q.basis, q.k, q.degree), (BasisType::AD, 20, 3));
        let v = smooth(&spec.variance_terms[0]);
        assert_eq!((v.basis, v.k), (BasisType::PS, 10));
        assert!(spec.has_intercept);
    }

    #[test]
    fn intercept_only() {
        let spec = parse_formula("y ~ 1").unwrap();
        assert!(spec.quantile_terms.is_empty());
        assert!(spec.variance_terms.is_empty());
        assert!(spec.has_intercept);
    }

    #[test]
    fn electricity_style_formula() {
        let spec = parse_formula(
            "dem ~ f:dow + dem48 + s(tod, k=6) + s(temp) + s(doy, bs=\"cc\") | s(doy, bs=\"cc\")",
        )
        .unwrap();
        let q = &spec.quantile_terms;
        assert_eq!(q.len(), 5);
        assert_eq!(q[0], Term::Factor { variable: "dow".into() });
        assert_eq!(q[1], Term::Linear { variable: "dem48".into() });
        assert_eq!(smooth(&q[2]).k, 6);
        assert_eq!(smooth(&q[4]).basis, BasisType::CC);
        assert_eq!(smooth(&spec.variance_terms[0]).basis, BasisType::CC);
    }

    #[test]
    fn by_and_no_intercept() {
        let spec = parse_formula("y ~ s(p, by=q) + x - 1").unwrap();
        assert!(!spec.has_intercept);
        assert_eq!(smooth(&spec.quantile_terms[0]).by.as_deref(), Some("q"));
        assert_eq!(spec.variables().into_iter().collect::<Vec<_>>(), vec!["p", "q", "x", "y"]);
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_formula("y ~ s(x, bs=\"tp\")").unwrap_err();
        assert_eq!(e.pos, 12);
        assert!(e.message.contains("unknown basis"));

        let e = parse_formula("y ~ s(x, k=2)").unwrap_err();
        assert!(e.message.contains("below the minimum"), "{e}");
        let e = parse_formula("y ~ s(x, k=8, bs=\"ad\")").unwrap_err();
        assert!(e.message.contains("below the minimum"));
        let e = parse_formula("y ~ s(x, k=3, bs=\"cc\")").unwrap_err();
        assert!(e.message.contains("below the minimum"));

        let e = parse_formula("y ~ s(x, k=5, k=6)").unwrap_err();
        assert!(e.message.contains("duplicate option"));
        assert_eq!(e.pos, 14);

        let e = parse_formula("y ~ x +").unwrap_err();
        assert_eq!(e.pos, 7);

        let e = parse_formula("y ~ te(x, z)").unwrap_err();
        assert!(e.message.contains("unsupported"));

        assert!(parse_formula("").is_err());
        assert!(parse_formula("~ x").is_err());
        assert!(parse_formula("y ~ x + x").unwrap_err().message.contains("duplicate term"));
        assert!(parse_formula("y ~ x + s(x)").unwrap_err().message.contains("both"));
        assert!(parse_formula("y ~ x | z - 1").is_err());
        assert!(parse_formula("y ~ x ) ").is_err());
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,5}".prop_filter("reserved", |s| s != "f" && s != "s" && s != "te")
    }

    fn term() -> impl Strategy<Value = Term> {
        prop_oneof![
            ident().prop_map(|variable| Term::Linear { variable }),
            ident().prop_map(|variable| Term::Factor { variable }),
            (ident(), proptest::option::of(ident()), 0usize..3, 10usize..25).prop_map(|(variable, by, b, k)| {
                let basis = [BasisType::PS, BasisType::CC, BasisType::AD][b];
                Term::Smooth(SmoothTerm { variable, by, basis, k, degree: 3 })
            }),
        ]
    }

    fn side() -> impl Strategy<Value = Vec<Term>> {
        proptest::collection::vec(term(), 0..5).prop_map(|terms| {
            let mut seen = BTreeSet::new();
            let mut vars = BTreeSet::new();
            terms
                .into_iter()
                .filter(|t| vars.insert(t.variable().to_string()) && seen.insert(t.name()))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn render_reparses_to_same_spec(
            response in ident(),
            q in side(),
            v in side(),
            has_intercept in any::<bool>(),
        ) {
            let spec = ModelSpec { response, quantile_terms: q, variance_terms: v, has_intercept };
            let text = spec.render();
            let back = parse_formula(&text).unwrap();
            prop_assert_eq!(&back, &spec);
            prop_assert_eq!(parse_formula(&text).unwrap(), back);
        }
    }
}
