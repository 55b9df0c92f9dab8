//! Restricted arithmetic expressions used by model documents.
//!
//! Expressions range over the Euclidean variable `zeta[i]` and the time `t`.
//! Supported syntax: numeric literals, `+ - * / ^`, unary `-` and `!`,
//! comparisons (`< <= > >= == !=`, yielding 1 or 0), `&&`, `||`, the
//! constant `pi`, and the functions `exp ln log sqrt abs sin cos tan tanh
//! floor ceil min max`.
//!
//! Expressions are parsed once into a tree and constant-folded; evaluation
//! does no allocation.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Tan,
    Tanh,
    Floor,
    Ceil,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "exp" => (Func::Exp, 1),
            "ln" | "log" => (Func::Ln, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "tan" => (Func::Tan, 1),
            "tanh" => (Func::Tanh, 1),
            "floor" => (Func::Floor, 1),
            "ceil" => (Func::Ceil, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Zeta(usize),
    Time,
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

fn truth(v: bool) -> f64 {
    if v {
        1.0
    } else {
        0.0
    }
}

impl Node {
    fn eval(&self, zeta: &[f64], t: f64) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Zeta(i) => zeta[*i],
            Node::Time => t,
            Node::Unary(op, a) => {
                let a = a.eval(zeta, t);
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Not => truth(a == 0.0),
                }
            }
            Node::Binary(op, a, b) => {
                let a = a.eval(zeta, t);
                let b = b.eval(zeta, t);
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => a / b,
                    BinaryOp::Pow => a.powf(b),
                    BinaryOp::Lt => truth(a < b),
                    BinaryOp::Le => truth(a <= b),
                    BinaryOp::Gt => truth(a > b),
                    BinaryOp::Ge => truth(a >= b),
                    BinaryOp::Eq => truth(a == b),
                    BinaryOp::Ne => truth(a != b),
                    BinaryOp::And => truth(a != 0.0 && b != 0.0),
                    BinaryOp::Or => truth(a != 0.0 || b != 0.0),
                }
            }
            Node::Call(f, args) => {
                let a = args[0].eval(zeta, t);
                match f {
                    Func::Exp => a.exp(),
                    Func::Ln => a.ln(),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Tanh => a.tanh(),
                    Func::Floor => a.floor(),
                    Func::Ceil => a.ceil(),
                    Func::Min => a.min(args[1].eval(zeta, t)),
                    Func::Max => a.max(args[1].eval(zeta, t)),
                }
            }
        }
    }

    fn fold(self) -> Node {
        match self {
            Node::Unary(op, a) => {
                let a = a.fold();
                let node = Node::Unary(op, Box::new(a));
                node.try_const()
            }
            Node::Binary(op, a, b) => {
                let node = Node::Binary(op, Box::new(a.fold()), Box::new(b.fold()));
                node.try_const()
            }
            Node::Call(f, args) => {
                let node = Node::Call(f, args.into_iter().map(Node::fold).collect());
                node.try_const()
            }
            leaf => leaf,
        }
    }

    fn is_const(&self) -> bool {
        matches!(self, Node::Const(_))
    }

    fn try_const(self) -> Node {
        let all_const = match &self {
            Node::Unary(_, a) => a.is_const(),
            Node::Binary(_, a, b) => a.is_const() && b.is_const(),
            Node::Call(_, args) => args.iter().all(Node::is_const),
            _ => false,
        };
        if all_const {
            Node::Const(self.eval(&[], 0.0))
        } else {
            self
        }
    }
}

/// A compiled expression over `zeta[0..dim]` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    /// Parses `source`, rejecting `zeta[i]` with `i >= dim`.
    pub fn parse(source: &str, dim: usize) -> Result<Expr, String> {
        let tokens = tokenize(source)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            dim,
        };
        let root = parser.or()?;
        if parser.pos != parser.tokens.len() {
            return Err(format!(
                "unexpected trailing input {:?} in `{source}`",
                parser.tokens[parser.pos]
            ));
        }
        Ok(Expr {
            source: source.to_string(),
            root: root.fold(),
        })
    }

    pub fn constant(value: f64) -> Expr {
        Expr {
            source: format!("{value}"),
            root: Node::Const(value),
        }
    }

    #[inline]
    pub fn eval(&self, zeta: &[f64], t: f64) -> f64 {
        self.root.eval(zeta, t)
    }

    /// Value of the expression when it depends on no variable.
    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<Token>, String> {
    const OPS: [&str; 17] = [
        "<=", ">=", "==", "!=", "&&", "||", "+", "-", "*", "/", "^", "<", ">", "!", "(", ")", ",",
    ];
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| format!("bad number `{text}` in `{src}`"))?;
            out.push(Token::Num(v));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token::Ident(src[start..i].to_string()));
            continue;
        }
        if c == '[' {
            out.push(Token::LBracket);
            i += 1;
            continue;
        }
        if c == ']' {
            out.push(Token::RBracket);
            i += 1;
            continue;
        }
        let rest = &src[i..];
        match OPS.iter().find(|op| rest.starts_with(**op)) {
            Some(&"(") => out.push(Token::LParen),
            Some(&")") => out.push(Token::RParen),
            Some(&",") => out.push(Token::Comma),
            Some(op) => out.push(Token::Op(op)),
            None => return Err(format!("unexpected character `{c}` in `{src}`")),
        }
        i += out_len(out.last());
    }
    Ok(out)
}

fn out_len(tok: Option<&Token>) -> usize {
    match tok {
        Some(Token::Op(op)) => op.len(),
        _ => 1,
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat_op(&mut self, ops: &[&'static str]) -> Option<&'static str> {
        if let Some(Token::Op(op)) = self.peek() {
            if let Some(found) = ops.iter().find(|o| *o == op) {
                self.pos += 1;
                return Some(found);
            }
        }
        None
    }

    fn expect(&mut self, tok: Token) -> Result<(), String> {
        match self.next() {
            Some(t) if t == tok => Ok(()),
            other => Err(format!("expected {tok:?}, found {other:?}")),
        }
    }

    fn or(&mut self) -> Result<Node, String> {
        let mut lhs = self.and()?;
        while self.eat_op(&["||"]).is_some() {
            let rhs = self.and()?;
            lhs = Node::Binary(BinaryOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Node, String> {
        let mut lhs = self.cmp()?;
        while self.eat_op(&["&&"]).is_some() {
            let rhs = self.cmp()?;
            lhs = Node::Binary(BinaryOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn cmp(&mut self) -> Result<Node, String> {
        let lhs = self.add()?;
        let op = match self.eat_op(&["<=", ">=", "==", "!=", "<", ">"]) {
            Some("<=") => BinaryOp::Le,
            Some(">=") => BinaryOp::Ge,
            Some("==") => BinaryOp::Eq,
            Some("!=") => BinaryOp::Ne,
            Some("<") => BinaryOp::Lt,
            Some(">") => BinaryOp::Gt,
            _ => return Ok(lhs),
        };
        let rhs = self.add()?;
        Ok(Node::Binary(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add(&mut self) -> Result<Node, String> {
        let mut lhs = self.mul()?;
        while let Some(op) = self.eat_op(&["+", "-"]) {
            let rhs = self.mul()?;
            let op = if op == "+" {
                BinaryOp::Add
            } else {
                BinaryOp::Sub
            };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Node, String> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&["*", "/"]) {
            let rhs = self.unary()?;
            let op = if op == "*" {
                BinaryOp::Mul
            } else {
                BinaryOp::Div
            };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, String> {
        match self.eat_op(&["-", "!"]) {
            Some("-") => Ok(Node::Unary(UnaryOp::Neg, Box::new(self.unary()?))),
            Some(_) => Ok(Node::Unary(UnaryOp::Not, Box::new(self.unary()?))),
            None => self.pow(),
        }
    }

    fn pow(&mut self) -> Result<Node, String> {
        let base = self.atom()?;
        if self.eat_op(&["^"]).is_some() {
            let exp = self.unary()?;
            return Ok(Node::Binary(BinaryOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, String> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Node::Const(v)),
            Some(Token::LParen) => {
                let inner = self.or()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Some(Token::Ident(name)) => match name.as_str() {
                "t" => Ok(Node::Time),
                "pi" => Ok(Node::Const(std::f64::consts::PI)),
                "zeta" => {
                    self.expect(Token::LBracket)?;
                    let idx = match self.next() {
                        Some(Token::Num(v)) if v >= 0.0 && v.fract() == 0.0 => v as usize,
                        other => return Err(format!("bad zeta index {other:?}")),
                    };
                    self.expect(Token::RBracket)?;
                    if idx >= self.dim {
                        return Err(format!(
                            "zeta[{idx}] out of range for dimension {}",
                            self.dim
                        ));
                    }
                    Ok(Node::Zeta(idx))
                }
                _ => {
                    let (func, arity) = Func::lookup(&name)
                        .ok_or_else(|| format!("unknown identifier `{name}`"))?;
                    self.expect(Token::LParen)?;
                    let mut args = vec![self.or()?];
                    while self.peek() == Some(&Token::Comma) {
                        self.pos += 1;
                        args.push(self.or()?);
                    }
                    self.expect(Token::RParen)?;
                    if args.len() != arity {
                        return Err(format!(
                            "`{name}` takes {arity} argument(s), got {}",
                            args.len()
                        ));
                    }
                    Ok(Node::Call(func, args))
                }
            },
            other => Err(format!("unexpected token {other:?}")),
        }
    }
}
