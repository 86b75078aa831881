//! Line-oriented text format shared by every persisted model.
//!
//! A file opens with a `NAME v1` header. After that each record is a line
//! of whitespace-separated tokens. Reals are written with 17 significant
//! digits so that reading them back reproduces the original bits.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
#[error("model format error at line {line}: {msg}")]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

/// 17 significant digits, round-trip exact for finite `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Default)]
pub struct TextWriter {
    buf: String,
}

impl TextWriter {
    pub fn new(header: &str) -> Self {
        let mut w = TextWriter::default();
        w.line(header);
        w
    }

    pub fn line(&mut self, s: &str) {
        self.buf.push_str(s);
        self.buf.push('\n');
    }

    pub fn field<T: std::fmt::Display>(&mut self, key: &str, v: T) {
        let _ = writeln!(self.buf, "{key} {v}");
    }

    pub fn real(&mut self, key: &str, v: f64) {
        let _ = writeln!(self.buf, "{key} {}", fmt_real(v));
    }

    pub fn reals(&mut self, values: &[f64]) {
        let joined: Vec<String> = values.iter().map(|&v| fmt_real(v)).collect();
        self.line(&joined.join(" "));
    }

    pub fn vector(&mut self, key: &str, values: &[f64]) {
        let _ = writeln!(self.buf, "vector {key} {}", values.len());
        self.reals(values);
    }

    pub fn matrix(&mut self, key: &str, m: &Matrix) {
        let _ = writeln!(self.buf, "matrix {key} {} {}", m.rows(), m.cols());
        for i in 0..m.rows() {
            self.reals(m.row(i));
        }
    }

    /// Appends another writer's output verbatim (nested model blocks).
    pub fn embed(&mut self, other: &str) {
        self.buf.push_str(other);
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub struct TextReader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> TextReader<'a> {
    pub fn new(text: &'a str) -> Self {
        TextReader {
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    pub fn err(&self, msg: impl Into<String>) -> FormatError {
        FormatError {
            line: self.pos,
            msg: msg.into(),
        }
    }

    pub fn next_line(&mut self) -> Result<&'a str, FormatError> {
        while self.pos < self.lines.len() {
            let l = self.lines[self.pos];
            self.pos += 1;
            if !l.trim().is_empty() {
                return Ok(l);
            }
        }
        Err(FormatError {
            line: self.pos,
            msg: "unexpected end of file".into(),
        })
    }

    pub fn peek_line(&self) -> Option<&'a str> {
        self.lines[self.pos..]
            .iter()
            .copied()
            .find(|l| !l.trim().is_empty())
    }

    pub fn expect_header(&mut self, header: &str) -> Result<(), FormatError> {
        let l = self.next_line()?;
        if l.trim() != header {
            return Err(self.err(format!("expected header `{header}`, found `{}`", l.trim())));
        }
        Ok(())
    }

    /// Reads `key <value>`.
    pub fn field<T: FromStr>(&mut self, key: &str) -> Result<T, FormatError> {
        let l = self.next_line()?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        let rest: Vec<&str> = toks.collect();
        rest.join(" ")
            .parse()
            .map_err(|_| self.err(format!("bad value for `{key}`")))
    }

    /// Reads `key` followed by all remaining tokens on that line.
    pub fn tokens(&mut self, key: &str) -> Result<Vec<&'a str>, FormatError> {
        let l = self.next_line()?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(toks.collect())
    }

    pub fn reals(&mut self, expected: usize) -> Result<Vec<f64>, FormatError> {
        if expected == 0 {
            return Ok(Vec::new());
        }
        let l = self.next_line()?;
        let vals = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| self.err("unparsable real"))?;
        if vals.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(self.err("non-finite value"));
        }
        Ok(vals)
    }

    pub fn vector(&mut self, key: &str) -> Result<Vec<f64>, FormatError> {
        let toks = self.tokens("vector")?;
        if toks.len() != 2 || toks[0] != key {
            return Err(self.err(format!("expected `vector {key} <len>`")));
        }
        let n: usize = toks[1].parse().map_err(|_| self.err("bad vector length"))?;
        self.reals(n)
    }

    pub fn matrix(&mut self, key: &str) -> Result<Matrix, FormatError> {
        let toks = self.tokens("matrix")?;
        if toks.len() != 3 || toks[0] != key {
            return Err(self.err(format!("expected `matrix {key} <rows> <cols>`")));
        }
        let rows: usize = toks[1].parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = toks[2].parse().map_err(|_| self.err("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.reals(cols)?);
        }
        Matrix::from_vec(rows, cols, data).map_err(|e| self.err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn reals_round_trip_bit_exact(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
            let back: f64 = fmt_real(v).parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn matrix_block_round_trip() {
        let m = Matrix::from_rows(&[&[1.0 / 3.0, -2.5e-300], &[7.0, 0.1]]);
        let mut w = TextWriter::new("TEST v1");
        w.matrix("m", &m);
        w.vector("v", &[1.0, 2.0]);
        let text = w.finish();
        let mut r = TextReader::new(&text);
        r.expect_header("TEST v1").unwrap();
        assert_eq!(r.matrix("m").unwrap(), m);
        assert_eq!(r.vector("v").unwrap(), vec![1.0, 2.0]);
        assert!(r.next_line().is_err());
    }

    #[test]
    fn wrong_header_is_reported() {
        let mut r = TextReader::new("PCA v1\n");
        assert!(r.expect_header("WPCA2D v1").is_err());
    }
}
