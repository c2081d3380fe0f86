//! Whitespace-token reading and writing shared by every text file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Iterates over whitespace-separated tokens, remembering line numbers for
/// error messages.
pub(crate) struct TokenReader<'a> {
    source_name: String,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    current: Option<(usize, std::str::SplitWhitespace<'a>)>,
    last_line: usize,
}

impl<'a> TokenReader<'a> {
    pub fn new(source_name: impl Into<String>, text: &'a str) -> Self {
        TokenReader {
            source_name: source_name.into(),
            lines: text.lines().enumerate(),
            current: None,
            last_line: 0,
        }
    }

    pub fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source_name.clone(),
            line,
            message: message.into(),
        }
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn next_token(&mut self) -> Option<(&'a str, usize)> {
        loop {
            if let Some((line, tokens)) = &mut self.current {
                if let Some(tok) = tokens.next() {
                    self.last_line = *line;
                    return Some((tok, *line));
                }
            }
            let (idx, line) = self.lines.next()?;
            self.current = Some((idx + 1, line.split_whitespace()));
        }
    }

    fn expect_token(&mut self, what: &str) -> Result<(&'a str, usize)> {
        let last = self.last_line;
        self.next_token().ok_or_else(|| {
            self.error(
                last.max(1),
                format!("unexpected end of input, expected {what}"),
            )
        })
    }

    pub fn expect_word(&mut self, word: &str) -> Result<()> {
        let (tok, line) = self.expect_token(word)?;
        if tok == word {
            Ok(())
        } else {
            Err(self.error(line, format!("expected `{word}`, found `{tok}`")))
        }
    }

    pub fn expect_string(&mut self, what: &str) -> Result<&'a str> {
        Ok(self.expect_token(what)?.0)
    }

    pub fn expect_usize(&mut self, what: &str) -> Result<usize> {
        let (tok, line) = self.expect_token(what)?;
        tok.parse().map_err(|_| {
            self.error(
                line,
                format!("expected {what} (non-negative integer), found `{tok}`"),
            )
        })
    }

    /// Reads a float, rejecting NaN and infinities.
    pub fn expect_finite(&mut self, what: &str, row: usize, col: usize) -> Result<f64> {
        let (tok, line) = self.expect_token(what)?;
        let v: f64 = tok
            .parse()
            .map_err(|_| self.error(line, format!("expected {what} (number), found `{tok}`")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: format!("{} line {line}", self.source_name),
                row,
                col,
            })
        }
    }

    pub fn expect_end(&mut self) -> Result<()> {
        match self.next_token() {
            None => Ok(()),
            Some((tok, line)) => {
                Err(self.error(line, format!("unexpected trailing token `{tok}`")))
            }
        }
    }

    /// Reads `rows * cols` finite values in row-major order.
    pub fn read_matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.expect_finite("matrix entry", r, c)?;
            }
        }
        Ok(m)
    }

    /// Reads a `rows cols` header followed by the matrix body.
    pub fn read_sized_matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.expect_usize("row count")?;
        let cols = self.expect_usize("column count")?;
        self.read_matrix(rows, cols)
    }
}

/// Appends the matrix body, one row per line. `{}` on `f64` prints the
/// shortest representation that parses back to the same bits.
pub(crate) fn push_matrix_body(out: &mut String, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        push_row(out, m.row(r).iter().copied());
    }
}

pub(crate) fn push_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v}").expect("writing to a String cannot fail");
    }
    out.push('\n');
}

pub(crate) fn push_sized_matrix(out: &mut String, m: &DMatrix<f64>) {
    writeln!(out, "{} {}", m.nrows(), m.ncols()).expect("writing to a String cannot fail");
    push_matrix_body(out, m);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_track_lines() {
        let mut r = TokenReader::new("t", "a b\n\n  c\n");
        assert_eq!(r.next_token(), Some(("a", 1)));
        assert_eq!(r.next_token(), Some(("b", 1)));
        assert_eq!(r.next_token(), Some(("c", 3)));
        assert_eq!(r.next_token(), None);
    }

    #[test]
    fn matrix_text_is_bit_exact() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -1e-300, 1.0 / 3.0, 12345.678]);
        let mut s = String::new();
        push_sized_matrix(&mut s, &m);
        let mut r = TokenReader::new("t", &s);
        let back = r.read_sized_matrix().unwrap();
        r.expect_end().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_number_reports_line() {
        let mut r = TokenReader::new("feat.txt", "1 2\n0.5 x\n");
        match r.read_sized_matrix() {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
