//! Coefficient expression language.
//!
//! Problems declared in config files give their drift, diffusion and cost
//! entries as small arithmetic expressions over the state `x1..xN`, the
//! martingale integrand `z1..zd` and the control components `u1..uk`:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | variable | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func   := abs | sqrt | exp | min | max
//! ```
//!
//! `-x1^2` parses as `-(x1^2)` and `^` is right associative.

use std::fmt;

use crate::error::ExprError;

/// Which argument family a variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    State,
    Noise,
    Control,
}

impl VarKind {
    fn prefix(self) -> char {
        match self {
            VarKind::State => 'x',
            VarKind::Noise => 'z',
            VarKind::Control => 'u',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Sqrt,
    Exp,
    Min,
    Max,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            Func::Abs | Func::Sqrt | Func::Exp => n == 1,
            Func::Min | Func::Max => n >= 2,
        }
    }
}

/// Parsed coefficient expression. Variable indices are zero based.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(VarKind, usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Argument values an expression is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn add(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Add, Box::new(self), Box::new(rhs))
    }

    pub fn mul(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Mul, Box::new(self), Box::new(rhs))
    }

    /// Substitutes `z = 0`, giving the `z`-free part of a cost.
    pub fn at_zero_noise(&self) -> Expr {
        match self {
            Expr::Var(VarKind::Noise, _) => Expr::Num(0.0),
            Expr::Num(_) | Expr::Var(..) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.at_zero_noise())),
            Expr::Bin(op, a, b) => {
                Expr::Bin(*op, Box::new(a.at_zero_noise()), Box::new(b.at_zero_noise()))
            }
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(Expr::at_zero_noise).collect()),
        }
    }

    pub fn eval(&self, env: &Env<'_>) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(kind, i) => match kind {
                VarKind::State => env.x[*i],
                VarKind::Noise => env.z[*i],
                VarKind::Control => env.u[*i],
            },
            Expr::Neg(a) => -a.eval(env),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(env), b.eval(env));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(f, args) => match f {
                Func::Abs => args[0].eval(env).abs(),
                Func::Sqrt => args[0].eval(env).sqrt(),
                Func::Exp => args[0].eval(env).exp(),
                Func::Min => args.iter().map(|a| a.eval(env)).fold(f64::INFINITY, f64::min),
                Func::Max => args.iter().map(|a| a.eval(env)).fold(f64::NEG_INFINITY, f64::max),
            },
        }
    }

    /// Largest one-based index used for each variable family, `(x, z, u)`.
    pub fn max_indices(&self) -> (usize, usize, usize) {
        let mut acc = (0, 0, 0);
        self.visit_vars(&mut |kind, i| {
            let slot = match kind {
                VarKind::State => &mut acc.0,
                VarKind::Noise => &mut acc.1,
                VarKind::Control => &mut acc.2,
            };
            *slot = (*slot).max(i + 1);
        });
        acc
    }

    pub fn uses(&self, kind: VarKind) -> bool {
        let mut found = false;
        self.visit_vars(&mut |k, _| found |= k == kind);
        found
    }

    fn visit_vars(&self, f: &mut dyn FnMut(VarKind, usize)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(k, i) => f(*k, *i),
            Expr::Neg(a) => a.visit_vars(f),
            Expr::Bin(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit_vars(f)),
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
                write!(f, "(-{:?})", -v)
            }
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(k, i) => write!(f, "{}{}", k.prefix(), i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
    text: String,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                message: format!("malformed number '{text}'"),
            })?;
            out.push(Token { tok: Tok::Num(v), pos: start, text: text.to_string() });
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let text = &src[start..i];
            out.push(Token { tok: Tok::Ident(text.to_string()), pos: start, text: text.to_string() });
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    return Err(ExprError::Syntax {
                        pos: start,
                        message: format!("unexpected character '{c}'"),
                    })
                }
            };
            i += c.len_utf8();
            out.push(Token { tok, pos: start, text: c.to_string() });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.at)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.toks.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn unexpected(&self) -> ExprError {
        match self.peek() {
            Some(t) => ExprError::Syntax { pos: t.pos, message: format!("unexpected token '{}'", t.text) },
            None => ExprError::Syntax { pos: self.end, message: "unexpected end of input".into() },
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().map(|t| t.tok.clone()) {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek().map(|t| t.tok.clone()) {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Some(Tok::Op('-')) = self.peek().map(|t| &t.tok) {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek().map(|t| &t.tok) {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.unexpected());
        };
        match tok.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::lookup(&name) {
                    match self.peek().map(|t| &t.tok) {
                        Some(Tok::LParen) => {
                            self.bump();
                        }
                        _ => return Err(self.unexpected()),
                    }
                    let mut args = vec![self.expr()?];
                    while let Some(Tok::Comma) = self.peek().map(|t| &t.tok) {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect_rparen()?;
                    if !func.arity_ok(args.len()) {
                        return Err(ExprError::Syntax {
                            pos: tok.pos,
                            message: format!("wrong number of arguments to {name}"),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                parse_var(&name)
                    .map(|(k, i)| Expr::Var(k, i))
                    .ok_or(ExprError::UndefinedVariable { name, pos: tok.pos })
            }
            _ => Err(self.unexpected()),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        match self.peek().map(|t| &t.tok) {
            Some(Tok::RParen) => {
                self.bump();
                Ok(())
            }
            _ => Err(self.unexpected()),
        }
    }
}

fn parse_var(name: &str) -> Option<(VarKind, usize)> {
    let mut chars = name.chars();
    let kind = match chars.next()? {
        'x' => VarKind::State,
        'z' => VarKind::Noise,
        'u' => VarKind::Control,
        _ => return None,
    };
    let rest = chars.as_str();
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
        return None;
    }
    let idx: usize = rest.parse().ok()?;
    Some((kind, idx - 1))
}

/// Parses one coefficient expression.
pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, at: 0, end: src.len() };
    let e = p.expr()?;
    if p.at < p.toks.len() {
        return Err(p.unexpected());
    }
    Ok(e)
}

/// Parses and checks that every variable index fits the declared dimensions.
pub fn parse_checked(src: &str, state_dim: usize, noise_dim: usize, control_dim: usize) -> Result<Expr, ExprError> {
    let e = parse(src)?;
    let (nx, nz, nu) = e.max_indices();
    for (kind, used, declared) in [
        (VarKind::State, nx, state_dim),
        (VarKind::Noise, nz, noise_dim),
        (VarKind::Control, nu, control_dim),
    ] {
        if used > declared {
            return Err(ExprError::DimensionMismatch {
                variable: format!("{}{}", kind.prefix(), used),
                declared,
            });
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, x: &[f64]) -> f64 {
        parse(src).unwrap().eval(&Env { x, z: &[0.5], u: &[2.0] })
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", &[0.0]), 7.0);
        assert_eq!(ev("-x1^2", &[3.0]), -9.0);
        assert_eq!(ev("2^3^2", &[0.0]), 512.0);
        assert_eq!(ev("(1 + 2) * 3", &[0.0]), 9.0);
        assert_eq!(ev("8 / 4 / 2", &[0.0]), 1.0);
        assert_eq!(ev("-u1*x1", &[0.8]), -1.6);
        assert_eq!(ev("max(x1, z1, -1)", &[0.1]), 0.5);
        assert_eq!(ev("abs(-3) + min(1, 2)", &[0.0]), 4.0);
        assert_eq!(ev("1.5e-1 * 10", &[0.0]), 1.5);
        assert!((ev("sqrt(1 + z1^2) - 1", &[0.0]) - (1.25f64.sqrt() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn syntax_error_points_at_token() {
        match parse("x1 + * 2") {
            Err(ExprError::Syntax { pos, message }) => {
                assert_eq!(pos, 5);
                assert!(message.contains("'*'"), "{message}");
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(matches!(parse("(x1"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("x1 x1"), Err(ExprError::Syntax { pos: 3, .. })));
        assert!(matches!(parse("abs(1, 2)"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse(""), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("2 $ 3"), Err(ExprError::Syntax { pos: 2, .. })));
    }

    #[test]
    fn undefined_and_mismatched_variables() {
        assert!(matches!(parse("y1 + 1"), Err(ExprError::UndefinedVariable { .. })));
        assert!(matches!(parse("x0"), Err(ExprError::UndefinedVariable { .. })));
        assert!(matches!(
            parse_checked("x2 + z1", 1, 1, 0),
            Err(ExprError::DimensionMismatch { declared: 1, .. })
        ));
        assert!(parse_checked("x1 * z1 + u1", 1, 1, 1).is_ok());
    }

    #[test]
    fn zero_noise_substitution() {
        let e = parse("x1^2 - 2*abs(z1)").unwrap();
        let e0 = e.at_zero_noise();
        assert!(!e0.uses(VarKind::Noise));
        assert_eq!(e0.eval(&Env { x: &[3.0], z: &[], u: &[] }), 9.0);
    }

    fn arb_expr() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            (0u32..100).prop_map(|v| format!("{}", v as f64 / 4.0)),
            (1usize..3).prop_map(|i| format!("x{i}")),
            Just("z1".to_string()),
            Just("u1".to_string()),
        ];
        leaf.prop_recursive(4, 32, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), prop_oneof![Just("+"), Just("-"), Just("*"), Just("/"), Just("^")])
                    .prop_map(|(a, b, op)| format!("{a} {op} {b}")),
                inner.clone().prop_map(|a| format!("-{a}")),
                inner.clone().prop_map(|a| format!("({a})")),
                inner.clone().prop_map(|a| format!("abs({a})")),
                (inner.clone(), inner).prop_map(|(a, b)| format!("max({a}, {b})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_is_stable(src in arb_expr()) {
            let once = parse(&src).unwrap();
            let twice = parse(&once.to_string()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
