use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Tier;

use super::RunManifest;

/// Mean BLEU per direction over the runs of one model kind.
struct Column {
    label: String,
    runs: usize,
    bleu: BTreeMap<String, f64>,
}

fn kind_rank(kind: &str) -> usize {
    match kind {
        "single" => 0,
        "1-1" => 1,
        "m2" => 2,
        _ => 3,
    }
}

fn columns(manifests: &[RunManifest]) -> (Vec<String>, Vec<Column>) {
    let mut rows: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(usize, String), Vec<&RunManifest>> = BTreeMap::new();
    for m in manifests {
        for e in &m.matrix {
            let d = e.direction.to_string();
            if !rows.contains(&d) {
                rows.push(d);
            }
        }
        groups.entry((kind_rank(&m.kind), m.kind.clone())).or_default().push(m);
    }
    let cols = groups
        .into_iter()
        .map(|((_, kind), runs)| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for m in &runs {
                for e in &m.matrix {
                    let s = sums.entry(e.direction.to_string()).or_default();
                    s.0 += e.bleu;
                    s.1 += 1;
                }
            }
            Column { label: kind, runs: runs.len(), bleu: sums.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect() }
        })
        .collect();
    (rows, cols)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

struct Table<'a> {
    cols: &'a [Column],
    baseline: Option<usize>,
    out: String,
}

impl<'a> Table<'a> {
    fn new(cols: &'a [Column], first: &str) -> Self {
        let baseline = if cols.len() > 1 { cols.iter().position(|c| c.label == "single") } else { None };
        let mut out = format!("{first:<12}");
        for c in cols {
            let head = if c.runs > 1 { format!("{} (n={})", c.label, c.runs) } else { c.label.clone() };
            write!(out, "{head:>18}").unwrap();
        }
        out.push('\n');
        Table { cols, baseline, out }
    }

    fn row(&mut self, label: &str, values: &[Option<f64>]) {
        write!(self.out, "{label:<12}").unwrap();
        let base = self.baseline.and_then(|b| values[b]);
        for (i, v) in values.iter().enumerate() {
            let cell = match (v, self.baseline) {
                (None, _) => "-".to_string(),
                (Some(v), Some(b)) if b != i => match base {
                    Some(s) => format!("{v:.2} ({:+.2})", v - s),
                    None => format!("{v:.2} (-)"),
                },
                (Some(v), _) => format!("{v:.2}"),
            };
            write!(self.out, "{cell:>18}").unwrap();
        }
        self.out.push('\n');
    }

    fn direction_values(&self, d: &str) -> Vec<Option<f64>> {
        self.cols.iter().map(|c| c.bleu.get(d).copied()).collect()
    }

    fn average_values(&self, dirs: &[&String]) -> Vec<Option<f64>> {
        self.cols.iter().map(|c| mean(&dirs.iter().filter_map(|d| c.bleu.get(*d).copied()).collect::<Vec<_>>())).collect()
    }
}

/// Directions as rows, one column per model kind; non-Single cells carry the delta to Single.
pub fn report(manifests: &[RunManifest]) -> String {
    let (rows, cols) = columns(manifests);
    let mut t = Table::new(&cols, "direction");
    for d in &rows {
        let v = t.direction_values(d);
        t.row(d, &v);
    }
    let all: Vec<&String> = rows.iter().collect();
    let avg = t.average_values(&all);
    t.row("Avg", &avg);
    t.out
}

/// Rows grouped by data tier, each group followed by its average.
pub fn tier_report(manifests: &[RunManifest]) -> String {
    let tiers: BTreeMap<String, Tier> = manifests.iter().find(|m| !m.tiers.is_empty()).map(|m| m.tiers.clone()).unwrap_or_default();
    if tiers.is_empty() {
        return report(manifests);
    }
    let (rows, cols) = columns(manifests);
    let mut t = Table::new(&cols, "direction");
    for tier in [Tier::High, Tier::Medium, Tier::Low] {
        let group: Vec<&String> = rows.iter().filter(|d| tiers.get(*d) == Some(&tier)).collect();
        if group.is_empty() {
            continue;
        }
        for d in &group {
            let v = t.direction_values(d);
            t.row(d, &v);
        }
        let avg = t.average_values(&group);
        t.row(&format!("{tier} avg"), &avg);
    }
    let all: Vec<&String> = rows.iter().collect();
    let avg = t.average_values(&all);
    t.row("Avg", &avg);
    t.out
}
