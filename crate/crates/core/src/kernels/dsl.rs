//! Text form of kernel expressions.
//!
//! ```text
//! expr  := ident '(' [arg (',' arg)*] ')'
//! arg   := number | string | expr
//! ```
//!
//! `#` starts a comment running to the end of the line. Matrices are written inline as
//! 9 (rotation, `diag` matrix) or 3 (anisotropic scales) numbers in row-major order:
//!
//! ```text
//! sum(
//!   gauss(100, 100),
//!   anisotropic(1, 0, 0, 0, 1, 0, 0, 0, 1,  10, 1, 1,  gauss(1, 50)),
//!   diag(1, 1, 1, 1, 1, 1, 1, 1, 1, kconst(25)),   # bias kernel
//! )
//! ```
//!
//! Kernel nodes: `gauss(s, sigma)`, `multiscale(s, sigma, levels)`, `diag(A.., l)`,
//! `scalar(l)`, `zero()`, `ones()`, `sum(k, ...)`, `product(k, k)`, `scale(c, k)`,
//! `anisotropic(R.., S.., k)`, `localize(w, k)`, `spatially_varying(region(w, k), ...)`,
//! `empirical("fields.json")`, `posterior(k, "landmarks.csv", noise_variance)`.
//! Scalar kernels: `kgauss(sigma)`, `kconst(c)`. Weight functions: `one()`,
//! `step(nx, ny, nz, offset)`, `logistic(nx, ny, nz, offset, width)`, `complement(w)`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use super::{default_partition_check_points, EmpiricalKernel, KernelExpr, ScalarKernel, WeightFn};
use crate::geometry::{io, Vector};
use crate::regression::PosteriorKernel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarAst {
    Gauss(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightAst {
    One,
    Step { normal: [f64; 3], offset: f64 },
    Logistic { normal: [f64; 3], offset: f64, width: f64 },
    Complement(Box<WeightAst>),
}

/// Parsed kernel expression. Dataset references are kept as paths until [`KernelAst::compile`].
#[derive(Debug, Clone, PartialEq)]
pub enum KernelAst {
    Gauss { s: f64, sigma: f64 },
    Multiscale { s: f64, sigma: f64, levels: usize },
    Diag { a: [f64; 9], inner: ScalarAst },
    Scalar(ScalarAst),
    Zero,
    Ones,
    Sum(Vec<KernelAst>),
    Product(Box<KernelAst>, Box<KernelAst>),
    Scale { c: f64, inner: Box<KernelAst> },
    Anisotropic { r: [f64; 9], s: [f64; 3], inner: Box<KernelAst> },
    Localize { weight: WeightAst, inner: Box<KernelAst> },
    SpatiallyVarying(Vec<(WeightAst, KernelAst)>),
    Empirical { path: String },
    Posterior { inner: Box<KernelAst>, landmarks: String, noise: f64 },
}

/// Parses kernel DSL text.
pub fn parse_kernel(text: &str) -> Result<KernelAst> {
    let mut p = Parser::new(text);
    let call = p.call()?;
    p.skip_trivia();
    if p.peek().is_some() {
        return Err(p.error_here("unexpected text after the expression"));
    }
    kernel_from(&call)
}

/// Reads and parses a `.kdsl` file.
pub fn read_kernel_file(path: &Path) -> Result<KernelAst> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kernel(&text)
}

// ---------------------------------------------------------------- lexing and raw parsing

#[derive(Debug, Clone, Copy)]
struct Pos {
    line: usize,
    column: usize,
}

#[derive(Debug)]
enum Arg {
    Number(f64, Pos),
    Str(String, Pos),
    Call(Call),
}

impl Arg {
    fn pos(&self) -> Pos {
        match self {
            Arg::Number(_, p) | Arg::Str(_, p) => *p,
            Arg::Call(c) => c.pos,
        }
    }
}

#[derive(Debug)]
struct Call {
    name: String,
    pos: Pos,
    args: Vec<Arg>,
}

struct Parser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

fn syntax(pos: Pos, message: impl Into<String>) -> Error {
    Error::Syntax {
        line: pos.line,
        column: pos.column,
        message: message.into(),
    }
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            chars: text.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            column: self.column,
        }
    }

    fn error_here(&self, message: impl Into<String>) -> Error {
        syntax(self.pos(), message)
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek() {
            if c == '#' {
                while let Some(c) = self.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
            } else if c.is_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn expect(&mut self, want: char) -> Result<()> {
        self.skip_trivia();
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => Err(self.error_here(format!("expected '{want}', found '{c}'"))),
            None => Err(self.error_here(format!("expected '{want}', found end of input"))),
        }
    }

    fn call(&mut self) -> Result<Call> {
        self.skip_trivia();
        let pos = self.pos();
        let mut name = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                name.push(c);
                self.bump();
            } else {
                break;
            }
        }
        if name.is_empty() || !name.starts_with(|c: char| c.is_ascii_alphabetic()) {
            return Err(match self.peek() {
                Some(c) => syntax(pos, format!("expected a kernel name, found '{c}'")),
                None => syntax(pos, "expected a kernel name, found end of input"),
            });
        }
        self.expect('(')?;
        let mut args = Vec::new();
        self.skip_trivia();
        if self.peek() == Some(')') {
            self.bump();
            return Ok(Call { name, pos, args });
        }
        loop {
            args.push(self.arg()?);
            self.skip_trivia();
            match self.peek() {
                Some(',') => {
                    self.bump();
                    self.skip_trivia();
                    // Trailing comma before the closing parenthesis.
                    if self.peek() == Some(')') {
                        self.bump();
                        break;
                    }
                }
                Some(')') => {
                    self.bump();
                    break;
                }
                Some(c) => return Err(self.error_here(format!("expected ',' or ')', found '{c}'"))),
                None => return Err(self.error_here("expected ')', found end of input")),
            }
        }
        Ok(Call { name, pos, args })
    }

    fn arg(&mut self) -> Result<Arg> {
        self.skip_trivia();
        let pos = self.pos();
        match self.peek() {
            Some('"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        Some('"') => break,
                        Some('\\') => match self.bump() {
                            Some(c @ ('"' | '\\')) => s.push(c),
                            Some('n') => s.push('\n'),
                            _ => return Err(self.error_here("invalid escape in string")),
                        },
                        Some(c) => s.push(c),
                        None => return Err(syntax(pos, "unterminated string")),
                    }
                }
                Ok(Arg::Str(s, pos))
            }
            Some(c) if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut s = String::new();
                while let Some(c) = self.peek() {
                    let exponent_sign = (c == '-' || c == '+') && matches!(s.chars().last(), Some('e' | 'E'));
                    if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exponent_sign || s.is_empty() {
                        s.push(c);
                        self.bump();
                    } else {
                        break;
                    }
                }
                let v: f64 = s.parse().map_err(|_| syntax(pos, format!("invalid number '{s}'")))?;
                if !v.is_finite() {
                    return Err(syntax(pos, format!("number '{s}' is not finite")));
                }
                Ok(Arg::Number(v, pos))
            }
            Some(c) if c.is_ascii_alphabetic() => Ok(Arg::Call(self.call()?)),
            Some(c) => Err(self.error_here(format!("expected a number, string or expression, found '{c}'"))),
            None => Err(self.error_here("expected an argument, found end of input")),
        }
    }
}

// ---------------------------------------------------------------- typed conversion

fn arity(call: &Call, n: usize) -> Result<()> {
    if call.args.len() == n {
        Ok(())
    } else {
        Err(syntax(
            call.pos,
            format!("{} takes {n} argument(s), got {}", call.name, call.args.len()),
        ))
    }
}

fn number(arg: &Arg) -> Result<f64> {
    match arg {
        Arg::Number(v, _) => Ok(*v),
        other => Err(syntax(other.pos(), "expected a number")),
    }
}

fn positive(arg: &Arg, what: &str) -> Result<f64> {
    let v = number(arg)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(syntax(arg.pos(), format!("{what} must be positive, got {v}")))
    }
}

fn string(arg: &Arg) -> Result<String> {
    match arg {
        Arg::Str(s, _) => Ok(s.clone()),
        other => Err(syntax(other.pos(), "expected a quoted path")),
    }
}

fn sub_call(arg: &Arg) -> Result<&Call> {
    match arg {
        Arg::Call(c) => Ok(c),
        other => Err(syntax(other.pos(), "expected an expression")),
    }
}

fn numbers<const N: usize>(args: &[Arg]) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    for (o, a) in out.iter_mut().zip(args) {
        *o = number(a)?;
    }
    Ok(out)
}

fn scalar_from(arg: &Arg) -> Result<ScalarAst> {
    let call = sub_call(arg)?;
    match call.name.as_str() {
        "kgauss" => {
            arity(call, 1)?;
            Ok(ScalarAst::Gauss(positive(&call.args[0], "kgauss sigma")?))
        }
        "kconst" => {
            arity(call, 1)?;
            Ok(ScalarAst::Const(positive(&call.args[0], "kconst c")?))
        }
        other => Err(syntax(call.pos, format!("unknown scalar kernel '{other}' (expected kgauss or kconst)"))),
    }
}

fn weight_from(arg: &Arg) -> Result<WeightAst> {
    let call = sub_call(arg)?;
    match call.name.as_str() {
        "one" => {
            arity(call, 0)?;
            Ok(WeightAst::One)
        }
        "step" => {
            arity(call, 4)?;
            let v: [f64; 4] = numbers(&call.args)?;
            Ok(WeightAst::Step {
                normal: [v[0], v[1], v[2]],
                offset: v[3],
            })
        }
        "logistic" => {
            arity(call, 5)?;
            let v: [f64; 4] = numbers(&call.args[..4])?;
            Ok(WeightAst::Logistic {
                normal: [v[0], v[1], v[2]],
                offset: v[3],
                width: positive(&call.args[4], "logistic width")?,
            })
        }
        "complement" => {
            arity(call, 1)?;
            Ok(WeightAst::Complement(Box::new(weight_from(&call.args[0])?)))
        }
        other => Err(syntax(
            call.pos,
            format!("unknown weight function '{other}' (expected one, step, logistic or complement)"),
        )),
    }
}

fn kernel_arg(arg: &Arg) -> Result<KernelAst> {
    kernel_from(sub_call(arg)?)
}

fn kernel_from(call: &Call) -> Result<KernelAst> {
    let args = &call.args;
    let ast = match call.name.as_str() {
        "gauss" => {
            arity(call, 2)?;
            KernelAst::Gauss {
                s: positive(&args[0], "gauss s")?,
                sigma: positive(&args[1], "gauss sigma")?,
            }
        }
        "multiscale" => {
            arity(call, 3)?;
            let levels = positive(&args[2], "multiscale levels")?;
            if levels.fract() != 0.0 {
                return Err(syntax(args[2].pos(), "multiscale levels must be an integer"));
            }
            KernelAst::Multiscale {
                s: positive(&args[0], "multiscale s")?,
                sigma: positive(&args[1], "multiscale sigma")?,
                levels: levels as usize,
            }
        }
        "diag" => {
            arity(call, 10)?;
            let a: [f64; 9] = numbers(&args[..9])?;
            super::validate_diag_matrix(&Matrix3::from_row_slice(&a)).map_err(|e| syntax(call.pos, e.to_string()))?;
            KernelAst::Diag {
                a,
                inner: scalar_from(&args[9])?,
            }
        }
        "scalar" => {
            arity(call, 1)?;
            KernelAst::Scalar(scalar_from(&args[0])?)
        }
        "zero" => {
            arity(call, 0)?;
            KernelAst::Zero
        }
        "ones" => {
            arity(call, 0)?;
            KernelAst::Ones
        }
        "sum" => {
            if args.is_empty() {
                return Err(syntax(call.pos, "sum takes at least one argument"));
            }
            KernelAst::Sum(args.iter().map(kernel_arg).collect::<Result<_>>()?)
        }
        "product" => {
            arity(call, 2)?;
            KernelAst::Product(Box::new(kernel_arg(&args[0])?), Box::new(kernel_arg(&args[1])?))
        }
        "scale" => {
            arity(call, 2)?;
            KernelAst::Scale {
                c: positive(&args[0], "scale factor")?,
                inner: Box::new(kernel_arg(&args[1])?),
            }
        }
        "anisotropic" => {
            arity(call, 13)?;
            let r: [f64; 9] = numbers(&args[..9])?;
            super::validate_rotation(&Matrix3::from_row_slice(&r)).map_err(|e| syntax(call.pos, e.to_string()))?;
            let mut s = [0.0; 3];
            for (k, a) in args[9..12].iter().enumerate() {
                s[k] = positive(a, "anisotropic scale")?;
            }
            KernelAst::Anisotropic {
                r,
                s,
                inner: Box::new(kernel_arg(&args[12])?),
            }
        }
        "localize" => {
            arity(call, 2)?;
            KernelAst::Localize {
                weight: weight_from(&args[0])?,
                inner: Box::new(kernel_arg(&args[1])?),
            }
        }
        "spatially_varying" => {
            if args.is_empty() {
                return Err(syntax(call.pos, "spatially_varying takes at least one region"));
            }
            let mut regions = Vec::with_capacity(args.len());
            for a in args {
                let region = sub_call(a)?;
                if region.name != "region" {
                    return Err(syntax(region.pos, "spatially_varying arguments must be region(weight, kernel)"));
                }
                arity(region, 2)?;
                regions.push((weight_from(&region.args[0])?, kernel_arg(&region.args[1])?));
            }
            KernelAst::SpatiallyVarying(regions)
        }
        "empirical" => {
            arity(call, 1)?;
            KernelAst::Empirical { path: string(&args[0])? }
        }
        "posterior" => {
            arity(call, 3)?;
            let noise = number(&args[2])?;
            if noise < 0.0 {
                return Err(syntax(args[2].pos(), "posterior noise variance must be non-negative"));
            }
            KernelAst::Posterior {
                inner: Box::new(kernel_arg(&args[0])?),
                landmarks: string(&args[1])?,
                noise,
            }
        }
        other => return Err(syntax(call.pos, format!("unknown kernel '{other}'"))),
    };
    Ok(ast)
}

// ---------------------------------------------------------------- printing

fn write_list(f: &mut fmt::Formatter<'_>, items: &[f64]) -> fmt::Result {
    for (k, v) in items.iter().enumerate() {
        if k > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{v}")?;
    }
    Ok(())
}

fn write_str(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    write!(f, "\"")?;
    for c in s.chars() {
        match c {
            '"' => write!(f, "\\\"")?,
            '\\' => write!(f, "\\\\")?,
            '\n' => write!(f, "\\n")?,
            c => write!(f, "{c}")?,
        }
    }
    write!(f, "\"")
}

impl fmt::Display for ScalarAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarAst::Gauss(s) => write!(f, "kgauss({s})"),
            ScalarAst::Const(c) => write!(f, "kconst({c})"),
        }
    }
}

impl fmt::Display for WeightAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightAst::One => write!(f, "one()"),
            WeightAst::Step { normal, offset } => {
                write!(f, "step(")?;
                write_list(f, normal)?;
                write!(f, ", {offset})")
            }
            WeightAst::Logistic { normal, offset, width } => {
                write!(f, "logistic(")?;
                write_list(f, normal)?;
                write!(f, ", {offset}, {width})")
            }
            WeightAst::Complement(w) => write!(f, "complement({w})"),
        }
    }
}

/// Canonical single-line form; parsing it gives back the same AST.
impl fmt::Display for KernelAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelAst::Gauss { s, sigma } => write!(f, "gauss({s}, {sigma})"),
            KernelAst::Multiscale { s, sigma, levels } => write!(f, "multiscale({s}, {sigma}, {levels})"),
            KernelAst::Diag { a, inner } => {
                write!(f, "diag(")?;
                write_list(f, a)?;
                write!(f, ", {inner})")
            }
            KernelAst::Scalar(inner) => write!(f, "scalar({inner})"),
            KernelAst::Zero => write!(f, "zero()"),
            KernelAst::Ones => write!(f, "ones()"),
            KernelAst::Sum(terms) => {
                write!(f, "sum(")?;
                for (k, t) in terms.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            KernelAst::Product(a, b) => write!(f, "product({a}, {b})"),
            KernelAst::Scale { c, inner } => write!(f, "scale({c}, {inner})"),
            KernelAst::Anisotropic { r, s, inner } => {
                write!(f, "anisotropic(")?;
                write_list(f, r)?;
                write!(f, ", ")?;
                write_list(f, s)?;
                write!(f, ", {inner})")
            }
            KernelAst::Localize { weight, inner } => write!(f, "localize({weight}, {inner})"),
            KernelAst::SpatiallyVarying(regions) => {
                write!(f, "spatially_varying(")?;
                for (k, (w, kern)) in regions.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "region({w}, {kern})")?;
                }
                write!(f, ")")
            }
            KernelAst::Empirical { path } => {
                write!(f, "empirical(")?;
                write_str(f, path)?;
                write!(f, ")")
            }
            KernelAst::Posterior { inner, landmarks, noise } => {
                write!(f, "posterior({inner}, ")?;
                write_str(f, landmarks)?;
                write!(f, ", {noise})")
            }
        }
    }
}

// ---------------------------------------------------------------- compilation

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl ScalarAst {
    pub fn compile(&self) -> Result<ScalarKernel> {
        match *self {
            ScalarAst::Gauss(s) => ScalarKernel::gaussian(s),
            ScalarAst::Const(c) => ScalarKernel::constant(c),
        }
    }
}

impl WeightAst {
    pub fn compile(&self) -> Result<WeightFn> {
        match self {
            WeightAst::One => Ok(WeightFn::One),
            WeightAst::Step { normal, offset } => WeightFn::step(Vector::from(*normal), *offset),
            WeightAst::Logistic { normal, offset, width } => WeightFn::logistic(Vector::from(*normal), *offset, *width),
            WeightAst::Complement(w) => Ok(WeightFn::complement(w.compile()?)),
        }
    }
}

impl KernelAst {
    /// Builds the kernel; relative dataset paths are resolved against `base_dir`.
    pub fn compile(&self, base_dir: &Path) -> Result<KernelExpr> {
        match self {
            KernelAst::Gauss { s, sigma } => KernelExpr::gauss(*s, *sigma),
            KernelAst::Multiscale { s, sigma, levels } => KernelExpr::multiscale(*s, *sigma, *levels),
            KernelAst::Diag { a, inner } => KernelExpr::diag(Matrix3::from_row_slice(a), inner.compile()?),
            KernelAst::Scalar(inner) => Ok(KernelExpr::scalar(inner.compile()?)),
            KernelAst::Zero => KernelExpr::diag(Matrix3::zeros(), ScalarKernel::constant(1.0)?),
            KernelAst::Ones => KernelExpr::diag(Matrix3::repeat(1.0), ScalarKernel::constant(1.0)?),
            KernelAst::Sum(terms) => {
                KernelExpr::sum(terms.iter().map(|t| t.compile(base_dir)).collect::<Result<_>>()?)
            }
            KernelAst::Product(a, b) => KernelExpr::product(a.compile(base_dir)?, b.compile(base_dir)?),
            KernelAst::Scale { c, inner } => KernelExpr::scale(*c, inner.compile(base_dir)?),
            KernelAst::Anisotropic { r, s, inner } => KernelExpr::anisotropic(
                Matrix3::from_row_slice(r),
                Vector3::from(*s),
                inner.compile(base_dir)?,
            ),
            KernelAst::Localize { weight, inner } => Ok(KernelExpr::localize(weight.compile()?, inner.compile(base_dir)?)),
            KernelAst::SpatiallyVarying(regions) => {
                let compiled = regions
                    .iter()
                    .map(|(w, k)| Ok((w.compile()?, k.compile(base_dir)?)))
                    .collect::<Result<Vec<_>>>()?;
                KernelExpr::spatially_varying(compiled, &default_partition_check_points())
            }
            KernelAst::Empirical { path } => {
                let kernel = EmpiricalKernel::load(&resolve(base_dir, path))?;
                Ok(KernelExpr::empirical(Arc::new(kernel)))
            }
            KernelAst::Posterior { inner, landmarks, noise } => {
                let prior = inner.compile(base_dir)?;
                let points = io::read_landmarks(&resolve(base_dir, landmarks))?
                    .into_iter()
                    .map(|l| l.point)
                    .collect();
                let kernel = PosteriorKernel::new(prior, points, *noise)?;
                Ok(KernelExpr::posterior(Arc::new(kernel)))
            }
        }
    }

    /// Copy with every dataset path made absolute (relative to `base_dir`), so the text can
    /// be stored and compiled from anywhere.
    pub fn absolutize(&self, base_dir: &Path) -> KernelAst {
        let abs = |p: &str| {
            let r = resolve(base_dir, p);
            std::path::absolute(&r).unwrap_or(r).to_string_lossy().into_owned()
        };
        match self {
            KernelAst::Sum(terms) => KernelAst::Sum(terms.iter().map(|t| t.absolutize(base_dir)).collect()),
            KernelAst::Product(a, b) => {
                KernelAst::Product(Box::new(a.absolutize(base_dir)), Box::new(b.absolutize(base_dir)))
            }
            KernelAst::Scale { c, inner } => KernelAst::Scale {
                c: *c,
                inner: Box::new(inner.absolutize(base_dir)),
            },
            KernelAst::Anisotropic { r, s, inner } => KernelAst::Anisotropic {
                r: *r,
                s: *s,
                inner: Box::new(inner.absolutize(base_dir)),
            },
            KernelAst::Localize { weight, inner } => KernelAst::Localize {
                weight: weight.clone(),
                inner: Box::new(inner.absolutize(base_dir)),
            },
            KernelAst::SpatiallyVarying(regions) => KernelAst::SpatiallyVarying(
                regions.iter().map(|(w, k)| (w.clone(), k.absolutize(base_dir))).collect(),
            ),
            KernelAst::Empirical { path } => KernelAst::Empirical { path: abs(path) },
            KernelAst::Posterior { inner, landmarks, noise } => KernelAst::Posterior {
                inner: Box::new(inner.absolutize(base_dir)),
                landmarks: abs(landmarks),
                noise: *noise,
            },
            leaf => leaf.clone(),
        }
    }
}
