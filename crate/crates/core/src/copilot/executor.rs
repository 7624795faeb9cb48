//! Code execution for the Calculator role.
//!
//! [`SubprocessExecutor`] pipes the program into an external interpreter.
//! [`ArithmeticExecutor`] is a hermetic stand-in that evaluates one
//! arithmetic expression, optionally wrapped in `print(...)`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecLimits {
    #[serde(with = "secs")]
    pub wall_time: Duration,
    pub output_bytes: usize,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            wall_time: Duration::from_secs(5),
            output_bytes: 16 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("no code to run")]
    EmptyCode,
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("interpreter exited with {code:?}: {stderr}")]
    NonZeroExit { code: Option<i32>, stderr: String },
    #[error("program printed nothing")]
    EmptyOutput,
    #[error("cannot start interpreter: {0}")]
    Spawn(String),
    #[error("not a single arithmetic expression: {0}")]
    Unsupported(String),
    #[error("evaluation error: {0}")]
    Runtime(String),
}

pub trait CodeExecutor: Send + Sync {
    /// Run `code` and return its standard output, trimmed.
    fn execute(&self, code: &str, limits: &ExecLimits) -> Result<String, ExecError>;
}

fn cap_output(mut s: String, max: usize) -> String {
    if s.len() > max {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        s.truncate(end);
    }
    s
}

fn finish(stdout: String, limits: &ExecLimits) -> Result<String, ExecError> {
    let out = cap_output(stdout, limits.output_bytes).trim().to_owned();
    if out.is_empty() {
        Err(ExecError::EmptyOutput)
    } else {
        Ok(out)
    }
}

/// External interpreter fed through stdin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessExecutor {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl SubprocessExecutor {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    /// `python3` found on `PATH`, if any.
    pub fn python() -> Option<Self> {
        find_on_path("python3").map(Self::new)
    }
}

pub fn find_on_path(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join(name))
        .find(|p| is_executable(p))
}

fn is_executable(p: &Path) -> bool {
    p.is_file()
}

fn drain<R: Read + Send + 'static>(mut r: R, cap: usize) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        kept
    })
}

impl CodeExecutor for SubprocessExecutor {
    fn execute(&self, code: &str, limits: &ExecLimits) -> Result<String, ExecError> {
        if code.trim().is_empty() {
            return Err(ExecError::EmptyCode);
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExecError::Spawn(format!("{}: {e}", self.program.display())))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let code = code.to_owned();
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(code.as_bytes());
        });
        let out = drain(child.stdout.take().expect("piped stdout"), limits.output_bytes);
        let err = drain(child.stderr.take().expect("piped stderr"), 4096);

        let deadline = Instant::now() + limits.wall_time;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(ExecError::Timeout(limits.wall_time));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(ExecError::Spawn(e.to_string())),
            }
        };
        let _ = writer.join();
        let stdout = String::from_utf8_lossy(&out.join().unwrap_or_default()).into_owned();
        let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
        if !status.success() {
            return Err(ExecError::NonZeroExit {
                code: status.code(),
                stderr: stderr.trim().to_owned(),
            });
        }
        finish(stdout, limits)
    }
}

/// Single-expression arithmetic evaluator with Python-like number
/// semantics: integers stay integers under `+ - * // % **`, `/` yields a
/// float.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticExecutor;

impl CodeExecutor for ArithmeticExecutor {
    fn execute(&self, code: &str, limits: &ExecLimits) -> Result<String, ExecError> {
        let lines: Vec<&str> = code
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let expr = match lines.as_slice() {
            [] => return Err(ExecError::EmptyCode),
            [one] => *one,
            _ => return Err(ExecError::Unsupported("more than one statement".into())),
        };
        let expr = match expr.strip_prefix("print(").and_then(|r| r.strip_suffix(')')) {
            Some(inner) => inner,
            None => expr,
        };
        let value = eval_expr(expr)?;
        finish(value.to_string(), limits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Num {
    Int(i128),
    Float(f64),
}

impl Num {
    fn as_f64(self) -> f64 {
        match self {
            Num::Int(i) => i as f64,
            Num::Float(f) => f,
        }
    }
}

impl std::fmt::Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Num::Int(i) => write!(f, "{i}"),
            Num::Float(x) if x.is_finite() => write!(f, "{x:?}"),
            Num::Float(x) if x.is_nan() => f.write_str("nan"),
            Num::Float(x) => f.write_str(if *x > 0.0 { "inf" } else { "-inf" }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(Num),
    Op(&'static str),
    LParen,
    RParen,
}

fn tokenize(s: &str) -> Result<Vec<Tok>, ExecError> {
    let bytes = s.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            '*' if bytes.get(i + 1) == Some(&b'*') => {
                toks.push(Tok::Op("**"));
                i += 2;
            }
            '/' if bytes.get(i + 1) == Some(&b'/') => {
                toks.push(Tok::Op("//"));
                i += 2;
            }
            '+' => {
                toks.push(Tok::Op("+"));
                i += 1;
            }
            '-' => {
                toks.push(Tok::Op("-"));
                i += 1;
            }
            '*' => {
                toks.push(Tok::Op("*"));
                i += 1;
            }
            '/' => {
                toks.push(Tok::Op("/"));
                i += 1;
            }
            '%' => {
                toks.push(Tok::Op("%"));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit() || bytes[i] == b'.' || bytes[i] == b'_')
                {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    i += 1;
                    if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                        i += 1;
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let lit: String = s[start..i].chars().filter(|&c| c != '_').collect();
                let is_float = lit.contains(['.', 'e', 'E']);
                let num = if is_float {
                    lit.parse::<f64>().map(Num::Float).ok()
                } else {
                    lit.parse::<i128>().map(Num::Int).ok()
                };
                toks.push(Tok::Num(num.ok_or_else(|| {
                    ExecError::Unsupported(format!("bad number literal `{lit}`"))
                })?));
            }
            other => {
                return Err(ExecError::Unsupported(format!(
                    "unexpected character `{other}`"
                )))
            }
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    // sum := term (('+'|'-') term)*
    fn sum(&mut self) -> Result<Num, ExecError> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(op @ ("+" | "-"))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = binary(op, acc, rhs)?;
        }
        Ok(acc)
    }

    // term := unary (('*'|'/'|'//'|'%') unary)*
    fn term(&mut self) -> Result<Num, ExecError> {
        let mut acc = self.unary()?;
        while let Some(Tok::Op(op @ ("*" | "/" | "//" | "%"))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            acc = binary(op, acc, rhs)?;
        }
        Ok(acc)
    }

    // unary := ('-'|'+') unary | power
    fn unary(&mut self) -> Result<Num, ExecError> {
        match self.peek() {
            Some(Tok::Op("-")) => {
                self.pos += 1;
                Ok(match self.unary()? {
                    Num::Int(i) => Num::Int(-i),
                    Num::Float(f) => Num::Float(-f),
                })
            }
            Some(Tok::Op("+")) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    // power := atom ('**' unary)?   (right associative)
    fn power(&mut self) -> Result<Num, ExecError> {
        let base = self.atom()?;
        if let Some(Tok::Op("**")) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return binary("**", base, exp);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Num, ExecError> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(n),
            Some(Tok::LParen) => {
                let v = self.sum()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(v),
                    _ => Err(ExecError::Unsupported("unbalanced parentheses".into())),
                }
            }
            other => Err(ExecError::Unsupported(format!("unexpected token {other:?}"))),
        }
    }
}

fn overflow() -> ExecError {
    ExecError::Runtime("integer overflow".into())
}

fn binary(op: &str, a: Num, b: Num) -> Result<Num, ExecError> {
    use Num::{Float, Int};
    let zero_div = || ExecError::Runtime("division by zero".into());
    Ok(match (op, a, b) {
        ("+", Int(x), Int(y)) => Int(x.checked_add(y).ok_or_else(overflow)?),
        ("-", Int(x), Int(y)) => Int(x.checked_sub(y).ok_or_else(overflow)?),
        ("*", Int(x), Int(y)) => Int(x.checked_mul(y).ok_or_else(overflow)?),
        ("//", Int(_), Int(0)) | ("%", Int(_), Int(0)) => return Err(zero_div()),
        ("//", Int(x), Int(y)) => Int(x.div_euclid(y) - i128::from(y < 0 && x.rem_euclid(y) != 0)),
        ("%", Int(x), Int(y)) => {
            let r = x % y;
            Int(if r != 0 && ((r < 0) != (y < 0)) { r + y } else { r })
        }
        ("**", Int(x), Int(y)) if y >= 0 => {
            let e = u32::try_from(y).map_err(|_| overflow())?;
            Int(x.checked_pow(e).ok_or_else(overflow)?)
        }
        (op, a, b) => {
            let (x, y) = (a.as_f64(), b.as_f64());
            match op {
                "+" => Float(x + y),
                "-" => Float(x - y),
                "*" => Float(x * y),
                "/" | "//" | "%" if y == 0.0 => return Err(zero_div()),
                "/" => Float(x / y),
                "//" => Float((x / y).floor()),
                "%" => Float(x - y * (x / y).floor()),
                "**" => Float(x.powf(y)),
                _ => unreachable!("operator set is closed"),
            }
        }
    })
}

fn eval_expr(s: &str) -> Result<Num, ExecError> {
    let toks = tokenize(s)?;
    if toks.is_empty() {
        return Err(ExecError::EmptyCode);
    }
    let mut p = Parser { toks, pos: 0 };
    let v = p.sum()?;
    if p.pos != p.toks.len() {
        return Err(ExecError::Unsupported("trailing tokens".into()));
    }
    Ok(v)
}
