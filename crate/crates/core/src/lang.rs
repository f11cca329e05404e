//! Language identifiers and translation directions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Short language code such as `en`; no whitespace, `-`, or `:`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Lang(String);

impl Lang {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || code.chars().any(|c| c.is_whitespace() || c == '-' || c == ':' || c == ',') {
            return Err(Error::config(format!("invalid language code `{code}`")));
        }
        Ok(Lang(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Lang {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Lang::new(s)
    }
}

impl From<Lang> for String {
    fn from(l: Lang) -> String {
        l.0
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Lang::new(s)
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses a comma- or whitespace-separated language list.
pub fn parse_langs(s: &str) -> Result<Vec<Lang>> {
    s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(Lang::new).collect()
}

/// Ordered `(source, target)` pair, written `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub src: Lang,
    pub tgt: Lang,
}

impl Direction {
    pub fn new(src: Lang, tgt: Lang) -> Self {
        Direction { src, tgt }
    }

    pub fn is_mono(&self) -> bool {
        self.src == self.tgt
    }

    pub fn reversed(&self) -> Self {
        Direction::new(self.tgt.clone(), self.src.clone())
    }

    pub fn pair(&self) -> LangPair {
        LangPair::new(self.src.clone(), self.tgt.clone())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s.split_once('-').ok_or_else(|| Error::config(format!("direction `{s}` is not of the form src-tgt")))?;
        Ok(Direction::new(Lang::new(a)?, Lang::new(b)?))
    }
}

/// Unordered language pair, stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LangPair {
    a: Lang,
    b: Lang,
}

impl LangPair {
    pub fn new(x: Lang, y: Lang) -> Self {
        if x <= y {
            LangPair { a: x, b: y }
        } else {
            LangPair { a: y, b: x }
        }
    }

    pub fn first(&self) -> &Lang {
        &self.a
    }

    pub fn second(&self) -> &Lang {
        &self.b
    }

    pub fn contains(&self, l: &Lang) -> bool {
        &self.a == l || &self.b == l
    }

    /// Both directions of the pair, `a-b` first.
    pub fn directions(&self) -> [Direction; 2] {
        [Direction::new(self.a.clone(), self.b.clone()), Direction::new(self.b.clone(), self.a.clone())]
    }
}

impl fmt::Display for LangPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

/// All unordered pairs of `langs`, in lexicographic order.
pub fn all_pairs(langs: &[Lang]) -> Vec<LangPair> {
    let mut sorted = langs.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut out = Vec::new();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            out.push(LangPair::new(sorted[i].clone(), sorted[j].clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsing_and_display() {
        let d: Direction = "de-fr".parse().unwrap();
        assert_eq!(d.to_string(), "de-fr");
        assert_eq!(d.reversed().to_string(), "fr-de");
        assert!("defr".parse::<Direction>().is_err());
        assert!(Lang::new("d e").is_err());
        assert_eq!(parse_langs("de, en fr").unwrap().len(), 3);
        let p = LangPair::new(Lang::new("fr").unwrap(), Lang::new("de").unwrap());
        assert_eq!(p.to_string(), "de-fr");
    }
}
