//! Arithmetic question generator and an exact rational evaluator for the
//! same question format.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

pub const QUESTION_PREFIX: &str = "Calculate ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub const ALL: [ArithOp; 4] = [Self::Add, Self::Sub, Self::Mul, Self::Div];

    fn apply(self, a: &BigRational, b: &BigRational) -> Option<BigRational> {
        Some(match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Div if b.is_zero() => return None,
            Self::Div => a / b,
        })
    }

    fn symbol(self) -> char {
        match self {
            Self::Add => '+',
            Self::Sub => '-',
            Self::Mul => '*',
            Self::Div => '/',
        }
    }

    fn from_char(c: char) -> Option<Self> {
        match c {
            '+' => Some(Self::Add),
            '-' | '\u{2212}' => Some(Self::Sub),
            '*' | '\u{d7}' => Some(Self::Mul),
            '/' | '\u{f7}' => Some(Self::Div),
            _ => None,
        }
    }

    /// Parses a set of operator symbols such as `"+-*/"`, ignoring commas
    /// and whitespace.
    pub fn parse_set(s: &str) -> Result<Vec<ArithOp>, AnalysisError> {
        let mut ops = Vec::new();
        for c in s.chars().filter(|c| !c.is_whitespace() && *c != ',') {
            let op = Self::from_char(c).ok_or_else(|| AnalysisError::UnknownOp(c.to_string()))?;
            if !ops.contains(&op) {
                ops.push(op);
            }
        }
        ops.sort();
        Ok(ops)
    }
}

impl fmt::Display for ArithOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl FromStr for ArithOp {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.trim().chars();
        match (it.next().and_then(Self::from_char), it.next()) {
            (Some(op), None) => Ok(op),
            _ => Err(AnalysisError::UnknownOp(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    /// `"Calculate {a} {op} {b}."`, without the line break.
    pub question: String,
    pub answer: String,
}

impl QaPair {
    /// The text a model is asked to continue.
    pub fn prompt(&self) -> String {
        format!("{}\n", self.question)
    }

    /// The pair as it appears in a training corpus.
    pub fn corpus_text(&self) -> String {
        format!("{}\n{}\n", self.question, self.answer)
    }
}

/// An exact value plus whether it was written with a decimal point, which
/// selects the answer style.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluated {
    pub value: BigRational,
    pub decimal_operands: bool,
}

impl Evaluated {
    pub fn render(&self) -> String {
        render_answer(&self.value, self.decimal_operands)
    }
}

/// Integer when integral; decimal when the operands were decimal and the
/// expansion terminates; reduced fraction `p/q` otherwise.
pub fn render_answer(value: &BigRational, decimal_style: bool) -> String {
    if value.is_integer() {
        return value.numer().to_string();
    }
    if decimal_style {
        if let Some(s) = render_decimal(value) {
            return s;
        }
    }
    format!("{}/{}", value.numer(), value.denom())
}

/// Exact decimal expansion, or `None` when it does not terminate.
pub fn render_decimal(value: &BigRational) -> Option<String> {
    let mut den = value.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let (mut twos, mut fives) = (0usize, 0usize);
    while den.is_even() {
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
    let places = twos.max(fives);
    let scaled = value.numer() * num_traits::pow(BigInt::from(10), places) / value.denom();
    let mut digits = scaled.abs().to_string();
    if digits.len() <= places {
        digits = format!("{}{}", "0".repeat(places + 1 - digits.len()), digits);
    }
    let (int, frac) = digits.split_at(digits.len() - places);
    let sign = if scaled.is_negative() { "-" } else { "" };
    Some(if places == 0 {
        format!("{sign}{int}")
    } else {
        format!("{sign}{int}.{frac}")
    })
}

/// Evaluates a question such as `"Calculate -5*39/(-130) - (-20)/(-8)."`
/// (the prefix, trailing period and line break are optional).
pub fn evaluate_question(question: &str) -> Result<Evaluated, AnalysisError> {
    let q = question.trim_end_matches(['\n', '\r']);
    let q = q.strip_prefix(QUESTION_PREFIX).unwrap_or(q);
    let q = q.strip_suffix('.').unwrap_or(q);
    evaluate_expression(q)
}

/// Evaluates `+ - * /`, parentheses, unary minus and decimal literals
/// with exact rationals.
pub fn evaluate_expression(expr: &str) -> Result<Evaluated, AnalysisError> {
    let mut p = Parser {
        src: expr,
        chars: expr.char_indices().collect(),
        pos: 0,
        decimal: false,
    };
    let value = p.expr()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(Evaluated {
        value,
        decimal_operands: p.decimal,
    })
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    decimal: bool,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> AnalysisError {
        let at = self.chars.get(self.pos).map_or(self.src.len(), |c| c.0);
        AnalysisError::Parse {
            input: self.src.to_string(),
            message: format!("{message} at byte {at}"),
        }
    }

    fn skip_ws(&mut self) {
        while self
            .chars
            .get(self.pos)
            .is_some_and(|c| c.1.is_whitespace())
        {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).map(|c| c.1)
    }

    fn binary(
        &mut self,
        ops: &[ArithOp],
        next: fn(&mut Self) -> Result<BigRational, AnalysisError>,
    ) -> Result<BigRational, AnalysisError> {
        let mut acc = next(self)?;
        while let Some(op) = self
            .peek()
            .and_then(ArithOp::from_char)
            .filter(|o| ops.contains(o))
        {
            self.pos += 1;
            let rhs = next(self)?;
            acc = op.apply(&acc, &rhs).ok_or(AnalysisError::DivisionByZero)?;
        }
        Ok(acc)
    }

    fn expr(&mut self) -> Result<BigRational, AnalysisError> {
        self.binary(&[ArithOp::Add, ArithOp::Sub], Self::term)
    }

    fn term(&mut self) -> Result<BigRational, AnalysisError> {
        self.binary(&[ArithOp::Mul, ArithOp::Div], Self::unary)
    }

    fn unary(&mut self) -> Result<BigRational, AnalysisError> {
        match self.peek() {
            Some('-' | '\u{2212}') => {
                self.pos += 1;
                Ok(-self.unary()?)
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<BigRational, AnalysisError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.error("expected ')'"));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            _ => Err(self.error("expected a number")),
        }
    }

    fn number(&mut self) -> Result<BigRational, AnalysisError> {
        let mut int = String::new();
        let mut frac = String::new();
        while let Some(&(_, c)) = self.chars.get(self.pos).filter(|c| c.1.is_ascii_digit()) {
            int.push(c);
            self.pos += 1;
        }
        let has_digit_after =
            |p: &Self| p.chars.get(p.pos + 1).is_some_and(|c| c.1.is_ascii_digit());
        if self.chars.get(self.pos).is_some_and(|c| c.1 == '.') && has_digit_after(self) {
            self.pos += 1;
            self.decimal = true;
            while let Some(&(_, c)) = self.chars.get(self.pos).filter(|c| c.1.is_ascii_digit()) {
                frac.push(c);
                self.pos += 1;
            }
        }
        let mantissa: BigInt = format!("{int}{frac}").parse().expect("digits");
        let scale = num_traits::pow(BigInt::from(10), frac.len());
        Ok(BigRational::new(mantissa, scale))
    }
}

struct Operand {
    value: BigRational,
    text: String,
}

fn gen_operand(rng: &mut ChaCha8Rng) -> Operand {
    let negative = rng.gen_bool(0.25);
    let value = if rng.gen_bool(0.6) {
        let digits = rng.gen_range(1..=4u32);
        BigRational::from_integer(BigInt::from(rng.gen_range(0..10i64.pow(digits))))
    } else {
        let places = rng.gen_range(1..=2usize);
        let mantissa = rng.gen_range(1..10_000i64);
        BigRational::new(
            BigInt::from(mantissa),
            num_traits::pow(BigInt::from(10), places),
        )
    };
    let value = if negative { -value } else { value };
    let text = render_decimal(&value).expect("operands are decimal");
    Operand { value, text }
}

/// `n` questions of the form `Calculate {a} {op} {b}.` with exact answers.
/// A negative right operand is parenthesized. Deterministic per seed.
pub fn gen_arithmetic_qa(
    n: usize,
    rng_seed: u64,
    ops: &[ArithOp],
) -> Result<Vec<QaPair>, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::Empty("n must be at least 1"));
    }
    if ops.is_empty() {
        return Err(AnalysisError::Empty("at least one operator is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let op = ops[rng.gen_range(0..ops.len())];
        let a = gen_operand(&mut rng);
        let b = gen_operand(&mut rng);
        let Some(value) = op.apply(&a.value, &b.value) else {
            continue;
        };
        let decimal = a.text.contains('.') || b.text.contains('.');
        let rhs = if b.value.is_negative() {
            format!("({})", b.text)
        } else {
            b.text
        };
        out.push(QaPair {
            question: format!("{QUESTION_PREFIX}{} {op} {rhs}.", a.text),
            answer: render_answer(&value, decimal),
        });
    }
    Ok(out)
}

/// Replaces the trailing `.` of `question` with `replacement`.
pub fn perturb_last_token(question: &str, replacement: &str) -> Result<String, AnalysisError> {
    match question.strip_suffix('.') {
        Some(head) => Ok(format!("{head}{replacement}")),
        None => Err(AnalysisError::NoTerminator(question.to_string())),
    }
}

pub fn write_qa_jsonl(pairs: &[QaPair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("serializable") + "\n")
        .collect()
}

pub fn read_qa_jsonl(text: &str) -> Result<Vec<QaPair>, AnalysisError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AnalysisError::Jsonl {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
