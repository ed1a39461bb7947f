//! CSV helpers shared by every exporter.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 9 significant digits, `%.9g` style.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    // rounding can bump the exponent (e.g. 9.999999999 -> 10.0000000)
    let sci = format!("{:.8e}", v);
    let (mantissa, e) = sci.split_once('e').expect("exponent");
    let e: i32 = e.parse().expect("exponent digits");
    let exp = if e != exp { e } else { exp };
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        trim_zeros(s)
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Accumulates CSV text with a fixed header.
#[derive(Clone, Debug)]
pub struct CsvTable {
    text: String,
    columns: usize,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    /// A table without a header line.
    pub fn headerless(columns: usize) -> Self {
        Self {
            text: String::new(),
            columns,
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        debug_assert_eq!(cells.len(), self.columns, "csv row width");
        let mut first = true;
        for c in cells {
            if !first {
                self.text.push(',');
            }
            first = false;
            let c = c.as_ref();
            if c.contains(',') || c.contains('"') || c.contains('\n') {
                let _ = write!(self.text, "\"{}\"", c.replace('"', "\"\""));
            } else {
                self.text.push_str(c);
            }
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, &self.text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9() {
        assert_eq!(fmt_sig9(2.5), "2.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_sig9(-1.5e-7), "-1.5e-07");
        assert_eq!(fmt_sig9(9.9999999999), "10");
        assert_eq!(fmt_sig9(0.0), "0");
    }

    #[test]
    fn quoting() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.row(&["x,y", "z"]);
        assert_eq!(t.as_str(), "a,b\n\"x,y\",z\n");
    }
}
