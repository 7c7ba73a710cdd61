// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis word lists: instruction verbs, general (control) verbs and an
//! optional restricted vocabulary for concept projection.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Default instruction-verb list shipped with the crate.
pub const DEFAULT_INSTRUCTION_VERBS: &str = include_str!("../../data/instruction_verbs.txt");

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordListSet {
    pub instruction_verbs: Vec<String>,
    pub general_verbs: Vec<String>,
    pub restricted_vocab: Option<Vec<String>>,
}

/// Parses word-list text: one word per line, `#` starts a comment line,
/// blank lines ignored. Words are lowercased and deduplicated in order.
pub fn parse_word_list(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

/// Loads a word list file; an empty list is an error.
pub fn load_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words = parse_word_list(&text);
    if words.is_empty() {
        return Err(Error::parse(path, 0, "word list is empty"));
    }
    Ok(words)
}

pub fn default_instruction_verbs() -> Vec<String> {
    parse_word_list(DEFAULT_INSTRUCTION_VERBS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rules() {
        let words = parse_word_list("# header\nWrite\n\n  create \nwrite\n#x\nlist\n");
        assert_eq!(words, vec!["write", "create", "list"]);
    }

    #[test]
    fn default_list_has_45_verbs() {
        let verbs = default_instruction_verbs();
        assert_eq!(verbs.len(), 45);
        assert!(verbs.contains(&"write".to_string()));
        assert!(verbs.contains(&"classify".to_string()));
    }

    #[test]
    fn empty_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        std::fs::write(&p, "# nothing\n").unwrap();
        assert!(load_word_list(&p).is_err());
    }
}
