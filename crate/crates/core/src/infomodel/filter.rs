//! Search filters: a subset of the LDAP filter grammar.
//!
//! ```text
//! filter  := "(" body ")"
//! body    := "&" filter+ | "|" filter+ | "!" filter | attr "=" pattern
//! ```
//!
//! A pattern of a single `*` tests for attribute presence; any other
//! pattern is matched against each value case-insensitively, with `*`
//! as a multi-character wildcard.

use thiserror::Error;

use super::Entry;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("filter parse error at byte {offset}: {message}")]
pub struct FilterError {
    /// 1-based byte offset.
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Filter {
    And(Vec<Filter>),
    Or(Vec<Filter>),
    Not(Box<Filter>),
    Eq { attr: String, pattern: String },
    Present(String),
}

impl Filter {
    /// Matches every entry.
    pub fn all() -> Filter {
        Filter::Present("objectclass".to_string())
    }

    pub fn eval(&self, entry: &Entry) -> bool {
        match self {
            Filter::And(fs) => fs.iter().all(|f| f.eval(entry)),
            Filter::Or(fs) => fs.iter().any(|f| f.eval(entry)),
            Filter::Not(f) => !f.eval(entry),
            Filter::Present(attr) => entry.attrs.get(attr).is_some_and(|vs| !vs.is_empty()),
            Filter::Eq { attr, pattern } => entry
                .attrs
                .get(attr)
                .is_some_and(|vs| vs.iter().any(|v| wildcard_match(pattern, v))),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Filter::And(fs) => format!("(&{})", fs.iter().map(Filter::to_text).collect::<String>()),
            Filter::Or(fs) => format!("(|{})", fs.iter().map(Filter::to_text).collect::<String>()),
            Filter::Not(f) => format!("(!{})", f.to_text()),
            Filter::Eq { attr, pattern } => format!("({attr}={pattern})"),
            Filter::Present(attr) => format!("({attr}=*)"),
        }
    }
}

/// Case-insensitive match with `*` wildcards: the pattern is split on
/// stars, the first segment anchors the start, the last anchors the end
/// and the middle segments are located greedily left to right.
pub fn wildcard_match(pattern: &str, value: &str) -> bool {
    let pattern = pattern.to_lowercase();
    let value = value.to_lowercase();
    if !pattern.contains('*') {
        return pattern == value;
    }
    let segments: Vec<&str> = pattern.split('*').collect();
    let (first, rest) = segments.split_first().expect("split is never empty");
    let mut remaining = match value.strip_prefix(first) {
        Some(r) => r,
        None => return false,
    };
    let (last, middle) = rest.split_last().expect("pattern contains a star");
    for seg in middle {
        if seg.is_empty() {
            continue;
        }
        match remaining.find(seg) {
            Some(i) => remaining = &remaining[i + seg.len()..],
            None => return false,
        }
    }
    if last.is_empty() {
        true
    } else {
        remaining.ends_with(last) && remaining.len() >= last.len()
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, FilterError> {
        Err(FilterError {
            offset: self.pos + 1,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> Result<(), FilterError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {:?}", b as char))
        }
    }

    fn filter(&mut self) -> Result<Filter, FilterError> {
        self.expect(b'(')?;
        let node = match self.peek() {
            Some(b'&') => {
                self.pos += 1;
                Filter::And(self.subfilters()?)
            }
            Some(b'|') => {
                self.pos += 1;
                Filter::Or(self.subfilters()?)
            }
            Some(b'!') => {
                self.pos += 1;
                Filter::Not(Box::new(self.filter()?))
            }
            Some(_) => self.comparison()?,
            None => return self.err("unexpected end of filter"),
        };
        self.expect(b')')?;
        Ok(node)
    }

    fn subfilters(&mut self) -> Result<Vec<Filter>, FilterError> {
        let mut list = Vec::new();
        while self.peek() == Some(b'(') {
            list.push(self.filter()?);
        }
        if list.is_empty() {
            return self.err("expected at least one subfilter");
        }
        Ok(list)
    }

    fn comparison(&mut self) -> Result<Filter, FilterError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|b| b.is_ascii_alphanumeric() || b == b'-')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected an attribute name");
        }
        let attr = std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("attribute bytes are ASCII")
            .to_lowercase();
        self.expect(b'=')?;
        let vstart = self.pos;
        while self.peek().is_some_and(|b| b != b')') {
            self.pos += 1;
        }
        let pattern = std::str::from_utf8(&self.bytes[vstart..self.pos])
            .map_err(|_| FilterError {
                offset: vstart + 1,
                message: "pattern is not UTF-8".into(),
            })?
            .to_string();
        if pattern == "*" {
            Ok(Filter::Present(attr))
        } else {
            Ok(Filter::Eq { attr, pattern })
        }
    }
}

pub fn parse_filter(text: &str) -> Result<Filter, FilterError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
    };
    let f = p.filter()?;
    if p.pos != p.bytes.len() {
        return p.err("trailing bytes after filter");
    }
    Ok(f)
}
