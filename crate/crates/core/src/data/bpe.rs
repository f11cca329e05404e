//! Greedy byte-pair merges over whitespace words, for real-text input.

use std::collections::HashMap;

use crate::error::{Error, Result};

const END: &str = "</w>";

/// Ordered merge list learned from a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bpe {
    merges: Vec<(String, String)>,
}

fn symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = s.last_mut() {
        last.push_str(END);
    }
    s
}

impl Bpe {
    /// Learns up to `num_merges` merges, picking the most frequent pair (ties lexicographic).
    pub fn learn<'a>(lines: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Self {
        let mut words: HashMap<Vec<String>, usize> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                *words.entry(symbols(w)).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((&p[0], &p[1])).or_default() += c;
                }
            }
            let Some(best) = pairs
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()))
            else {
                break;
            };
            for (w, _) in &mut words {
                *w = merge_pair(w, &best);
            }
            merges.push(best);
        }
        Bpe { merges }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut s = symbols(word);
        for m in &self.merges {
            if s.len() < 2 {
                break;
            }
            s = merge_pair(&s, m);
        }
        s
    }

    /// Segments a line; subwords not ending a word carry a trailing `@@`.
    pub fn encode(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| {
                self.encode_word(w).into_iter().map(|p| match p.strip_suffix(END) {
                    Some(base) => base.to_string(),
                    None => format!("{p}@@"),
                })
            })
            .collect()
    }

    pub fn decode(tokens: &[String]) -> String {
        let mut out = String::new();
        for t in tokens {
            match t.strip_suffix("@@") {
                Some(base) => out.push_str(base),
                None => {
                    out.push_str(t);
                    out.push(' ');
                }
            }
        }
        out.trim_end().to_string()
    }

    pub fn to_text(&self) -> String {
        self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let merges = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| match l.split_whitespace().collect::<Vec<_>>().as_slice() {
                [a, b] => Ok((a.to_string(), b.to_string())),
                _ => Err(Error::config(format!("merge line {} must hold two symbols", i + 1))),
            })
            .collect::<Result<_>>()?;
        Ok(Bpe { merges })
    }
}

fn merge_pair(word: &[String], (a, b): &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && &word[i] == a && &word[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}
