//! Block spans.
//!
//! Blocks are numbered `1..=B` internally: the output of block `k` is the
//! residual stream after the `k`-th transformer block. A span `(s, e)` uses
//! the output of block `s` to stand in for the output of block `e`, so
//! blocks `s+1..=e` are bypassed.
//!
//! The textual form `"s:e"` uses 0-based block numbers (the first block is
//! `0`), so `"3:4"` is the span `(4, 5)` here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub s: usize,
    pub e: usize,
}

impl Span {
    /// 1-based span; requires `1 <= s < e`.
    pub fn new(s: usize, e: usize) -> Result<Self> {
        if s < 1 || s >= e {
            return Err(Error::Argument(format!("invalid span ({s}, {e}): need 1 <= s < e")));
        }
        Ok(Self { s, e })
    }

    /// Span from 0-based block numbers.
    pub fn from_zero_based(s: usize, e: usize) -> Result<Self> {
        Self::new(s + 1, e + 1)
    }

    pub fn check_blocks(&self, num_blocks: usize) -> Result<()> {
        if self.e > num_blocks {
            return Err(Error::Argument(format!(
                "span {} ends past the last block ({num_blocks} blocks)",
                self
            )));
        }
        Ok(())
    }

    /// 0-based indices of the bypassed blocks.
    pub fn skipped_blocks(&self) -> std::ops::Range<usize> {
        self.s..self.e
    }

    pub fn len(&self) -> usize {
        self.e - self.s
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !(self.e < other.s || other.e < self.s)
    }

    /// `"s:e"` in 0-based block numbers.
    pub fn zero_based(&self) -> String {
        format!("{}:{}", self.s - 1, self.e - 1)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.s, self.e)
    }
}

impl FromStr for Span {
    type Err = Error;

    /// Parses the 0-based `"s:e"` form.
    fn from_str(text: &str) -> Result<Self> {
        let (a, b) = text
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("span {text:?} must look like s:e")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("span {text:?}: {v:?} is not a block number")))
        };
        Span::from_zero_based(parse(a)?, parse(b)?)
    }
}

/// Parses a comma-separated span list and checks that spans are strictly
/// ordered and non-overlapping (`e_i < s_j`).
pub fn parse_span_list(text: &str) -> Result<Vec<Span>> {
    let spans = text
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Span>>>()?;
    check_disjoint(&spans)?;
    Ok(spans)
}

/// Spans must be sorted with `e_i < s_j` for `i < j`.
pub fn check_disjoint(spans: &[Span]) -> Result<()> {
    for w in spans.windows(2) {
        if w[0].e >= w[1].s {
            return Err(Error::Plan(format!(
                "spans {} and {} overlap or are out of order",
                w[0].zero_based(),
                w[1].zero_based()
            )));
        }
    }
    Ok(())
}
