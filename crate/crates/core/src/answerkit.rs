//! Final-answer extraction and mathematical equivalence of answer strings.
//!
//! Answers are pulled from the first brace-balanced `\boxed{...}` group of a
//! solution and parsed into exact rational arithmetic. The supported grammar
//! is deliberately small: integers, decimals, `a/b`, `+ - * /`, `\cdot`,
//! `\times`, `\div`, unary minus, integer powers (`^2`, `^{-3}`), parentheses
//! and `\frac{a}{b}` (also `\dfrac`, `\tfrac`, and the `\frac12` shorthand).
//! Anything else becomes an opaque string leaf compared by exact (trimmed)
//! string equality.
//!
//! Parsing and evaluation run under a deterministic step budget; running out
//! of budget degrades to the string comparison, the same as a parse failure.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Default per-pair step budget for [`MathEquivalence`].
pub const DEFAULT_STEP_BUDGET: u64 = 20_000;

const MAX_DEPTH: usize = 64;
const MAX_EXPONENT: i64 = 4096;
const MAX_RESULT_BITS: u64 = 1 << 15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedAnswer {
    pub raw: String,
    pub found: bool,
}

impl ExtractedAnswer {
    fn missing() -> Self {
        Self { raw: String::new(), found: false }
    }
}

/// Content of the first `\boxed{...}` group, brace-balanced. Escaped braces
/// (`\{`, `\}`) do not count toward nesting. An unterminated group yields
/// `found == false`.
pub fn extract_boxed(text: &str) -> ExtractedAnswer {
    const OPEN: &str = "\\boxed{";
    let Some(start) = text.find(OPEN) else {
        return ExtractedAnswer::missing();
    };
    let body = start + OPEN.len();
    let bytes = text.as_bytes();
    let mut depth = 1usize;
    let mut i = body;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                i += 2;
                continue;
            }
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return ExtractedAnswer { raw: text[body..i].to_string(), found: true };
                }
            }
            _ => {}
        }
        i += 1;
    }
    ExtractedAnswer::missing()
}

/// Expression tree over exact rationals.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(BigRational),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CanonicalExpr {
    Numeric { expr: Expr, value: BigRational },
    /// Whitespace-trimmed input that did not fit the grammar.
    Opaque(String),
}

impl CanonicalExpr {
    pub fn value(&self) -> Option<&BigRational> {
        match self {
            CanonicalExpr::Numeric { value, .. } => Some(value),
            CanonicalExpr::Opaque(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseFailure {
    Syntax,
    DivisionByZero,
    BudgetExhausted,
}

/// Strips surrounding `$`, `\left`/`\right` and all whitespace.
pub fn normalize(raw: &str) -> String {
    let mut s = raw.trim();
    while let Some(inner) = s.strip_prefix('$').and_then(|t| t.strip_suffix('$')) {
        s = inner.trim();
    }
    s.replace("\\left", "").replace("\\right", "").chars().filter(|c| !c.is_whitespace()).collect()
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    steps: u64,
    budget: u64,
    depth: usize,
}

type PResult<T> = Result<T, ParseFailure>;

impl<'a> Parser<'a> {
    fn charge(&mut self, n: u64) -> PResult<()> {
        self.steps = self.steps.saturating_add(n);
        if self.steps > self.budget {
            Err(ParseFailure::BudgetExhausted)
        } else {
            Ok(())
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// Reads `\name` at the cursor without consuming it.
    fn peek_command(&self) -> Option<&'a str> {
        if self.peek() != Some(b'\\') {
            return None;
        }
        let start = self.pos + 1;
        let mut end = start;
        while end < self.src.len() && self.src[end].is_ascii_alphabetic() {
            end += 1;
        }
        std::str::from_utf8(&self.src[start..end]).ok()
    }

    fn eat_command(&mut self, names: &[&str]) -> bool {
        match self.peek_command() {
            Some(c) if names.contains(&c) => {
                self.pos += 1 + c.len();
                true
            }
            _ => false,
        }
    }

    fn enter(&mut self) -> PResult<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ParseFailure::Syntax);
        }
        self.charge(1)
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                break;
            }
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            self.charge(1)?;
            if self.eat(b'*') || self.eat_command(&["cdot", "times"]) {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') || self.eat_command(&["div"]) {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                break;
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        self.enter()?;
        let out = if self.eat(b'-') {
            Expr::Neg(Box::new(self.unary()?))
        } else if self.eat(b'+') {
            self.unary()?
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(out)
    }

    fn power(&mut self) -> PResult<Expr> {
        let base = self.atom()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        let exponent = self.single_or_group()?;
        if self.peek() == Some(b'^') {
            return Err(ParseFailure::Syntax);
        }
        let e = self.evaluate(&exponent)?;
        if !e.is_integer() {
            return Err(ParseFailure::Syntax);
        }
        let e = e.to_integer().to_i64().filter(|v| v.abs() <= MAX_EXPONENT).ok_or(ParseFailure::Syntax)?;
        Ok(Expr::Pow(Box::new(base), e))
    }

    /// `{expr}` or a single digit (LaTeX argument shorthand).
    fn single_or_group(&mut self) -> PResult<Expr> {
        if self.eat(b'{') {
            let e = self.expr()?;
            if !self.eat(b'}') {
                return Err(ParseFailure::Syntax);
            }
            return Ok(e);
        }
        match self.peek() {
            Some(d) if d.is_ascii_digit() => {
                self.pos += 1;
                Ok(Expr::Num(BigRational::from_integer(BigInt::from(d - b'0'))))
            }
            _ => Err(ParseFailure::Syntax),
        }
    }

    fn atom(&mut self) -> PResult<Expr> {
        self.charge(1)?;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(ParseFailure::Syntax);
                }
                Ok(e)
            }
            Some(b'{') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b'}') {
                    return Err(ParseFailure::Syntax);
                }
                Ok(e)
            }
            Some(b'\\') => {
                if self.eat_command(&["frac", "dfrac", "tfrac"]) {
                    let num = self.single_or_group()?;
                    let den = self.single_or_group()?;
                    Ok(Expr::Div(Box::new(num), Box::new(den)))
                } else {
                    Err(ParseFailure::Syntax)
                }
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            _ => Err(ParseFailure::Syntax),
        }
    }

    fn number(&mut self) -> PResult<Expr> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let int_part = &self.src[start..self.pos];
        let mut frac_part: &[u8] = &[];
        if self.eat(b'.') {
            let fs = self.pos;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
            frac_part = &self.src[fs..self.pos];
        }
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(ParseFailure::Syntax);
        }
        self.charge(1 + (int_part.len() + frac_part.len()) as u64 / 8)?;
        let digits: Vec<u8> = int_part.iter().chain(frac_part).copied().collect();
        let mantissa = BigInt::parse_bytes(&digits, 10).ok_or(ParseFailure::Syntax)?;
        let scale = num_traits::pow(BigInt::from(10u8), frac_part.len());
        Ok(Expr::Num(BigRational::new(mantissa, scale)))
    }

    fn evaluate(&mut self, e: &Expr) -> PResult<BigRational> {
        fn bits(r: &BigRational) -> u64 {
            r.numer().bits() + r.denom().bits()
        }
        self.charge(1)?;
        Ok(match e {
            Expr::Num(v) => v.clone(),
            Expr::Neg(a) => -self.evaluate(a)?,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let (x, y) = (self.evaluate(a)?, self.evaluate(b)?);
                self.charge(1 + (bits(&x) + bits(&y)) / 64)?;
                match e {
                    Expr::Add(..) => x + y,
                    Expr::Sub(..) => x - y,
                    Expr::Mul(..) => x * y,
                    _ => {
                        if y.is_zero() {
                            return Err(ParseFailure::DivisionByZero);
                        }
                        x / y
                    }
                }
            }
            Expr::Pow(a, n) => {
                let base = self.evaluate(a)?;
                if base.is_zero() && *n < 0 {
                    return Err(ParseFailure::DivisionByZero);
                }
                let projected = bits(&base).saturating_mul(n.unsigned_abs());
                if projected > MAX_RESULT_BITS {
                    return Err(ParseFailure::BudgetExhausted);
                }
                self.charge(1 + projected / 16)?;
                let p = num_traits::pow(base.abs(), n.unsigned_abs() as usize);
                let p = if base.is_negative() && n % 2 != 0 { -p } else { p };
                if *n < 0 {
                    p.recip()
                } else {
                    p
                }
            }
        })
    }
}

/// Parses under `budget` steps, returning the tree, its value and the steps
/// used.
pub fn parse_with_budget(raw: &str, budget: u64) -> Result<(Expr, BigRational, u64), ParseFailure> {
    let norm = normalize(raw);
    if !norm.is_ascii() || norm.is_empty() {
        return Err(ParseFailure::Syntax);
    }
    let mut p = Parser { src: norm.as_bytes(), pos: 0, steps: 0, budget, depth: 0 };
    p.charge(norm.len() as u64 / 16)?;
    let expr = p.expr()?;
    if p.pos != p.src.len() {
        return Err(ParseFailure::Syntax);
    }
    let value = p.evaluate(&expr)?;
    Ok((expr, value, p.steps))
}

/// Total: anything outside the grammar becomes an opaque leaf.
pub fn parse_answer(raw: &str) -> CanonicalExpr {
    match parse_with_budget(raw, DEFAULT_STEP_BUDGET) {
        Ok((expr, value, _)) => CanonicalExpr::Numeric { expr, value },
        Err(_) => CanonicalExpr::Opaque(raw.trim().to_string()),
    }
}

/// An equivalence relation on answer strings used for voting and grading.
pub trait AnswerEquivalence: Send + Sync {
    fn equivalent(&self, a: &str, b: &str) -> bool;
}

/// Exact rational equality, with string fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MathEquivalence {
    pub step_budget: u64,
}

impl Default for MathEquivalence {
    fn default() -> Self {
        Self { step_budget: DEFAULT_STEP_BUDGET }
    }
}

impl MathEquivalence {
    pub fn new(step_budget: u64) -> Self {
        Self { step_budget }
    }
}

impl AnswerEquivalence for MathEquivalence {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        let (ta, tb) = (a.trim(), b.trim());
        if ta == tb {
            return true;
        }
        let Ok((_, va, used)) = parse_with_budget(ta, self.step_budget) else {
            return false;
        };
        match parse_with_budget(tb, self.step_budget.saturating_sub(used)) {
            Ok((_, vb, _)) => va == vb,
            Err(_) => false,
        }
    }
}

/// Plain string equality; the naive voter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExactMatch;

impl AnswerEquivalence for ExactMatch {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        a == b
    }
}

/// `equivalent` with the default budget.
pub fn equivalent(a: &str, b: &str) -> bool {
    MathEquivalence::default().equivalent(a, b)
}

/// Renders `value` in plain `a/b` (or integer) form.
pub fn render_plain(value: &BigRational) -> String {
    if value.is_integer() {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

/// Renders `value` as `\frac{a}{b}` (integers stay plain).
pub fn render_frac(value: &BigRational) -> String {
    if value.is_integer() {
        return value.numer().to_string();
    }
    let sign = if value.is_negative() { "-" } else { "" };
    format!("{sign}\\frac{{{}}}{{{}}}", value.numer().abs(), value.denom())
}

/// Renders `value` as a terminating decimal if its reduced denominator has
/// only factors 2 and 5.
pub fn render_decimal(value: &BigRational) -> Option<String> {
    let mut den = value.denom().clone();
    let (two, five) = (BigInt::from(2u8), BigInt::from(5u8));
    let mut places = 0usize;
    let (mut twos, mut fives) = (0usize, 0usize);
    while (&den % &two).is_zero() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return None;
    }
    places = places.max(twos).max(fives);
    let scaled = value * BigRational::from_integer(num_traits::pow(BigInt::from(10u8), places));
    let digits = scaled.to_integer();
    if places == 0 {
        return Some(digits.to_string());
    }
    let neg = digits.is_negative();
    let mut s = digits.abs().to_string();
    if s.len() <= places {
        s = "0".repeat(places - s.len() + 1) + &s;
    }
    let (int, frac) = s.split_at(s.len() - places);
    Some(format!("{}{int}.{frac}", if neg { "-" } else { "" }))
}
