//! Self-describing columnar text files.
//!
//! Layout: any number of `# key=value` metadata lines, one header line of
//! whitespace-separated column names, then one row of numbers per line.

use std::io::{BufRead, Write};

use crate::error::{AgmError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Columnar {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Columnar {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Columnar {
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(AgmError::Shape(format!(
                "row has {} values, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "{}", self.columns.join(" "))?;
        let mut line = String::new();
        for row in &self.rows {
            line.clear();
            for (i, &x) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&fmt_num(x));
            }
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut out = Columnar::default();
        let mut have_header = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    out.meta.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            if !have_header {
                out.columns = trimmed.split_whitespace().map(str::to_string).collect();
                have_header = true;
                continue;
            }
            let row = trimmed
                .split_whitespace()
                .map(|tok| {
                    parse_num(tok).ok_or_else(|| AgmError::Parse {
                        line: i + 1,
                        msg: format!("not a number: {tok:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != out.columns.len() {
                return Err(AgmError::Parse {
                    line: i + 1,
                    msg: format!("expected {} values, found {}", out.columns.len(), row.len()),
                });
            }
            out.rows.push(row);
        }
        if !have_header {
            return Err(AgmError::Parse {
                line: 0,
                msg: "missing header row".into(),
            });
        }
        Ok(out)
    }
}

/// Shortest round-trip representation, switching to exponent form for very
/// large or small magnitudes.
pub fn fmt_num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e7).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn parse_num(tok: &str) -> Option<f64> {
    match tok {
        "NaN" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}
