//! Machine-readable result blocks.

use std::fmt;

use crate::metrics::{RetrievalReport, RECALL_KS};

/// A labelled list of `key=value` pairs, printed between `#result` and `#end`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub entries: Vec<(String, String)>,
}

impl Block {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Adds `<dir>_r1 .. <dir>_mnr` with four decimals.
    pub fn push_report(&mut self, r: &RetrievalReport) {
        let d = r.direction.short();
        for k in RECALL_KS {
            self.push(format!("{d}_r{k}"), format!("{:.4}", r.recall(k)));
        }
        self.push(format!("{d}_mdr"), format!("{:.4}", r.mdr));
        self.push(format!("{d}_mnr"), format!("{:.4}", r.mnr));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "#result {}", self.label)?;
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        writeln!(f, "#end")
    }
}

/// Extracts every block from command output; other lines are ignored.
pub fn parse_blocks(text: &str) -> Vec<Block> {
    let mut out = Vec::new();
    let mut current: Option<Block> = None;
    for line in text.lines() {
        if let Some(label) = line.strip_prefix("#result") {
            current = Some(Block::new(label.trim()));
        } else if line == "#end" {
            out.extend(current.take());
        } else if let Some(b) = current.as_mut() {
            if let Some((k, v)) = line.split_once('=') {
                b.push(k, v);
            }
        }
    }
    out
}
