//! Recursive-descent parser for the map expression language.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := unary ('^' factor)?
//! unary  := '-'? atom
//! atom   := number | 'x' | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers that are not followed by `(` are named parameters, resolved
//! at evaluation time. `pi` is a predefined constant.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
    Mod,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "mod" => Func::Mod,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Mod => "mod",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Mod | Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Num(f64),
    Var,
    Param(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn eval(&self, x: f64, params: &BTreeMap<String, f64>) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var => x,
            Expr::Param(name) => match params.get(name) {
                Some(v) => *v,
                None if name == "pi" => std::f64::consts::PI,
                None => return Err(Error::UnboundParameter(name.clone())),
            },
            Expr::Neg(a) => -a.eval(x, params)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval(x, params)?;
                let b = b.eval(x, params)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, params)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Sqrt => a.sqrt(),
                    Func::Mod => {
                        let b = args[1].eval(x, params)?;
                        a - b * (a / b).floor()
                    }
                    Func::Min => a.min(args[1].eval(x, params)?),
                    Func::Max => a.max(args[1].eval(x, params)?),
                }
            }
        })
    }

    /// Names of all parameters referenced by the tree, excluding `pi`.
    pub fn parameters(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_params(&self, out: &mut Vec<String>) {
        match self {
            Expr::Param(n) if n != "pi" => out.push(n.clone()),
            Expr::Neg(a) => a.collect_params(out),
            Expr::Bin(_, a, b) => {
                a.collect_params(out);
                b.collect_params(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_params(out)),
            _ => {}
        }
    }

    fn fmt_atom(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(_) | Expr::Var | Expr::Param(_) | Expr::Call(..) => write!(f, "{self}"),
            _ => write!(f, "({self})"),
        }
    }
}

/// Fully parenthesized rendering that reparses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var => f.write_str("x"),
            Expr::Param(n) => f.write_str(n),
            Expr::Neg(a) => {
                f.write_str("-")?;
                a.fmt_atom(f)
            }
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                a.fmt_atom(f)?;
                write!(f, " {sym} ")?;
                b.fmt_atom(f)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Returns the token and its 0-based start offset.
    fn next(&mut self) -> Result<(Tok, usize)> {
        self.skip_ws();
        let start = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == b'.' {
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
                let mut p = self.pos + 1;
                if p < self.src.len() && matches!(self.src[p], b'+' | b'-') {
                    p += 1;
                }
                if p < self.src.len() && self.src[p].is_ascii_digit() {
                    while p < self.src.len() && self.src[p].is_ascii_digit() {
                        p += 1;
                    }
                    self.pos = p;
                }
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
            let v: f64 = text.parse().map_err(|_| Error::Syntax {
                column: start + 1,
                message: format!("malformed number `{text}`"),
            })?;
            return Ok((Tok::Num(v), start));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
            return Ok((Tok::Ident(text.to_string()), start));
        }
        if b"+-*/^(),".contains(&c) {
            self.pos += 1;
            return Ok((Tok::Sym(c as char), start));
        }
        let ch = std::str::from_utf8(&self.src[start..])
            .ok()
            .and_then(|s| s.chars().next())
            .unwrap_or('?');
        Err(Error::Syntax { column: start + 1, message: format!("unexpected character `{ch}`") })
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    at: usize,
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<()> {
        let (tok, at) = self.lexer.next()?;
        self.tok = tok;
        self.at = at;
        Ok(())
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax { column: self.at + 1, message: message.into() })
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.tok == Tok::Sym(c) {
            self.bump()
        } else {
            self.error(format!("expected `{c}`, found {}", describe(&self.tok)))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.tok {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.unary()?;
        if self.tok == Tok::Sym('^') {
            self.bump()?;
            let exp = self.factor()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.tok == Tok::Sym('-') {
            self.bump()?;
            return Ok(Expr::Neg(Box::new(self.atom()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::Ident(name) => {
                let at = self.at;
                self.bump()?;
                if self.tok != Tok::Sym('(') {
                    return Ok(if name == "x" { Expr::Var } else { Expr::Param(name) });
                }
                let func = Func::from_name(&name)
                    .ok_or(Error::UnknownIdentifier { name: name.clone(), column: at + 1 })?;
                self.bump()?;
                let mut args = vec![self.expr()?];
                while self.tok == Tok::Sym(',') {
                    self.bump()?;
                    args.push(self.expr()?);
                }
                self.expect(')')?;
                if args.len() != func.arity() {
                    return Err(Error::Syntax {
                        column: at + 1,
                        message: format!(
                            "`{name}` takes {} argument(s), got {}",
                            func.arity(),
                            args.len()
                        ),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            Tok::Sym('(') => {
                self.bump()?;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            other => self.error(format!("expected a number, `x`, a name or `(`, found {}", describe(&other))),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(n) => format!("`{n}`"),
        Tok::Sym(c) => format!("`{c}`"),
        Tok::End => "end of input".to_string(),
    }
}

pub fn parse(text: &str) -> Result<Expr> {
    if text.trim().is_empty() {
        return Err(Error::Syntax { column: 1, message: "empty expression".into() });
    }
    let mut p = Parser { lexer: Lexer { src: text.as_bytes(), pos: 0 }, tok: Tok::End, at: 0 };
    p.bump()?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return p.error(format!("unexpected {}", describe(&p.tok)));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn precedence_and_associativity() {
        let p = no_params();
        assert_eq!(parse("1+2*3").unwrap().eval(0.0, &p).unwrap(), 7.0);
        assert_eq!(parse("2^3^2").unwrap().eval(0.0, &p).unwrap(), 512.0);
        assert_eq!(parse("8/4/2").unwrap().eval(0.0, &p).unwrap(), 1.0);
        assert_eq!(parse("1-2-3").unwrap().eval(0.0, &p).unwrap(), -4.0);
        // unary minus binds tighter than '^'
        assert_eq!(parse("-x^2").unwrap().eval(3.0, &p).unwrap(), 9.0);
        assert_eq!(parse("2*-x").unwrap().eval(3.0, &p).unwrap(), -6.0);
        assert_eq!(parse("1.5e1").unwrap().eval(0.0, &p).unwrap(), 15.0);
    }

    #[test]
    fn syntax_errors_carry_columns() {
        assert!(matches!(parse("sin(x"), Err(Error::Syntax { column: 6, .. })));
        assert!(matches!(parse("1 +"), Err(Error::Syntax { column: 4, .. })));
        assert!(matches!(parse("x $ 2"), Err(Error::Syntax { column: 3, .. })));
        assert!(matches!(parse("(x"), Err(Error::Syntax { column: 3, .. })));
        assert!(matches!(parse("x)"), Err(Error::Syntax { column: 2, .. })));
        assert!(matches!(parse("--x"), Err(Error::Syntax { column: 2, .. })));
        assert!(matches!(parse("mod(x)"), Err(Error::Syntax { column: 1, .. })));
        assert!(matches!(parse(""), Err(Error::Syntax { .. })));
    }

    #[test]
    fn unknown_function_is_reported() {
        match parse("2*tan(x)") {
            Err(Error::UnknownIdentifier { name, column }) => {
                assert_eq!(name, "tan");
                assert_eq!(column, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_parameter_fails_at_evaluation() {
        let e = parse("r*x").unwrap();
        assert_eq!(e.parameters(), vec!["r".to_string()]);
        assert_eq!(e.eval(0.5, &no_params()), Err(Error::UnboundParameter("r".into())));
        let mut p = no_params();
        p.insert("r".into(), 3.0);
        assert_eq!(e.eval(0.5, &p).unwrap(), 1.5);
        assert!((parse("sin(pi/2)").unwrap().eval(0.0, &no_params()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn functions_evaluate() {
        let p = no_params();
        let cases = [
            ("abs(-2)", 2.0),
            ("sqrt(16)", 4.0),
            ("exp(0)", 1.0),
            ("cos(0)", 1.0),
            ("min(2, 3)", 2.0),
            ("max(2, 3)", 3.0),
            ("mod(-0.25, 1)", 0.75),
        ];
        for (s, want) in cases {
            assert_eq!(parse(s).unwrap().eval(0.0, &p).unwrap(), want, "{s}");
        }
    }

    const CORPUS: &[&str] = &[
        "4*x*(1-x)",
        "mod(x+0.3, 1)",
        "mod(2*x, 1)",
        "1-abs(1-2*x)",
        "-x^2+1",
        "-(x+1)",
        "min(max(x, 0.1), 0.9)",
        "r*x*(1-x)",
        "0.5 + 0.4*sin(2*pi*x)",
        "x^0.5",
        "exp(-x)/(1+x)",
        "2^3^x",
        "1.25e-3*x",
    ];

    #[test]
    fn pretty_print_round_trip_on_corpus() {
        for s in CORPUS {
            let e = parse(s).unwrap();
            let printed = e.to_string();
            assert_eq!(parse(&printed).unwrap(), e, "{s} -> {printed}");
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            Just(Expr::Var),
            "[a-w][a-z0-9_]{0,3}".prop_map(Expr::Param),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                inner.clone().prop_map(|a| Expr::Call(Func::Sin, vec![a])),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Mod, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn printed_trees_reparse_identically(e in arb_expr()) {
            let printed = e.to_string();
            prop_assert_eq!(parse(&printed).unwrap(), e);
        }
    }
}
