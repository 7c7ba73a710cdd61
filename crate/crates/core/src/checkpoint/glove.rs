// SPDX-License-Identifier: MIT OR Apache-2.0

//! GloVe-style word embedding tables (`word v1 ... vd`, one entry per line).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Word vectors in file order. Files are assumed frequency ordered, so
/// `frequency_order[..n]` are the `n` most frequent words.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f32>>,
    frequency_order: Vec<String>,
    warnings: Vec<String>,
}

impl EmbeddingTable {
    /// Builds a table from `(word, vector)` pairs; duplicate words keep the first vector.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut table = Self {
            dim: 0,
            entries: HashMap::new(),
            frequency_order: Vec::new(),
            warnings: Vec::new(),
        };
        for (word, vector) in entries {
            if table.frequency_order.is_empty() {
                table.dim = vector.len();
            }
            if vector.len() != table.dim {
                return Err(Error::Dimension(format!(
                    "`{word}` has {} values, expected {}",
                    vector.len(),
                    table.dim
                )));
            }
            table.push(word, vector);
        }
        if table.frequency_order.is_empty() {
            return Err(Error::InvalidArgument("embedding table is empty".into()));
        }
        Ok(table)
    }

    fn push(&mut self, word: String, vector: Vec<f32>) {
        if self.entries.contains_key(&word) {
            let msg = format!("duplicate word `{word}`; keeping the first occurrence");
            log::warn!("{msg}");
            self.warnings.push(msg);
            return;
        }
        self.frequency_order.push(word.clone());
        self.entries.insert(word, vector);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frequency_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequency_order.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn frequency_order(&self) -> &[String] {
        &self.frequency_order
    }

    /// The `n` most frequent words (fewer if the table is smaller).
    pub fn most_frequent(&self, n: usize) -> &[String] {
        &self.frequency_order[..n.min(self.len())]
    }

    /// Warnings raised while loading (duplicate words).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Writes the table back out in file order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for word in &self.frequency_order {
            out.push_str(word);
            for v in &self.entries[word] {
                write!(out, " {v}").expect("write to string");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parses a GloVe text file. The first entry fixes the dimension; blank lines are skipped.
pub fn load_glove(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable {
        dim: 0,
        entries: HashMap::new(),
        frequency_order: Vec::new(),
        warnings: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let vector = fields
            .map(|f| {
                f.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, i + 1, format!("unparseable value `{f}`")))
            })
            .collect::<Result<Vec<f32>>>()?;
        if table.frequency_order.is_empty() {
            if vector.is_empty() {
                return Err(Error::parse(path, i + 1, "entry has no vector values"));
            }
            table.dim = vector.len();
        } else if vector.len() != table.dim {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {} values, found {}", table.dim, vector.len()),
            ));
        }
        table.push(word.to_string(), vector);
    }
    if table.is_empty() {
        return Err(Error::parse(path, 0, "empty embedding file"));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("glove.txt");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn parses_simple_file() {
        let (_d, p) = write("the 1 0 0 0\nof 0 1 0 0\nand 0 0 1 0.5\n");
        let t = load_glove(&p).unwrap();
        assert_eq!((t.len(), t.dim()), (3, 4));
        assert_eq!(t.frequency_order(), &["the", "of", "and"]);
        assert_eq!(t.get("and").unwrap(), &[0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn inconsistent_dimension_is_an_error() {
        let (_d, p) = write("the 1 0 0 0\nof 0 1 0\n");
        assert!(matches!(load_glove(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_and_garbage_files_fail() {
        let (_d, p) = write("\n\n");
        assert!(load_glove(&p).is_err());
        let (_d, p) = write("the 1 x\n");
        assert!(load_glove(&p).is_err());
    }

    #[test]
    fn duplicates_keep_first_and_warn() {
        let (_d, p) = write("a 1 2\nb 3 4\na 5 6\n");
        let t = load_glove(&p).unwrap();
        // reference rule: first occurrence wins, order of first appearance kept
        assert_eq!(t.get("a").unwrap(), &[1.0, 2.0]);
        assert_eq!(t.frequency_order(), &["a", "b"]);
        assert_eq!(t.warnings().len(), 1);
    }

    #[test]
    fn save_and_reload() {
        let t = EmbeddingTable::from_entries(vec![
            ("x".to_string(), vec![0.25, -1.5]),
            ("y".to_string(), vec![1e-7, 3.0]),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.txt");
        t.save(&p).unwrap();
        assert_eq!(load_glove(&p).unwrap(), t);
    }
}
