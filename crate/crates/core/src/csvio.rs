//! Minimal numeric CSV reading/writing shared by the exported tables.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Formats a value with 17 significant digits so every `f64` round-trips.
#[inline]
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_row<W: Write>(w: &mut W, fields: &[String]) -> Result<()> {
    writeln!(w, "{}", fields.join(","))?;
    Ok(())
}

/// A parsed CSV table: header names and rows of raw fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(line) => split(&line?),
            None => return Err(Error::Parse("empty CSV".into())),
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields = split(&line);
            if fields.len() != header.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, header has {}",
                    i + 1,
                    fields.len(),
                    header.len()
                )));
            }
            rows.push(fields);
        }
        Ok(Self { header, rows })
    }

    pub fn expect_header(&self, expected: &[&str]) -> Result<()> {
        if self.header.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::Parse(format!(
                "expected header {:?}, found {:?}",
                expected, self.header
            )));
        }
        Ok(())
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        parse_f64(&self.rows[row][col])
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

fn split(line: &str) -> Vec<String> {
    line.trim_end_matches('\r').split(',').map(|f| f.trim().to_string()).collect()
}
