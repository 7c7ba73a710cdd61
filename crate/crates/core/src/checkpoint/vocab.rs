// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary and greedy longest-match tokenizer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Token index into the vocabulary.
pub type TokenId = usize;

pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";

/// Ordered token list; line `i` of the vocabulary file is token id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    max_token_chars: usize,
}

/// A token together with the character span it covers in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: TokenId,
    pub start: usize,
    pub end: usize,
}

impl Vocabulary {
    /// Builds a vocabulary. The first two tokens must be `<unk>` and `<bos>`.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != BOS_TOKEN {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with `{UNK_TOKEN}` and `{BOS_TOKEN}`"
            )));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidArgument(format!("empty token at id {id}")));
            }
            if id_of.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{tok}`")));
            }
        }
        let max_token_chars = tokens[2..].iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(Self {
            tokens,
            id_of,
            max_token_chars,
        })
    }

    /// Reads one token per line. `\n`, `\t`, `\r` and `\\` escapes denote
    /// the corresponding characters so whitespace tokens survive the format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        let tokens = lines
            .into_iter()
            .enumerate()
            .map(|(i, line)| unescape(line).map_err(|m| Error::parse(path, i + 1, m)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&escape(t));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn bos_id(&self) -> TokenId {
        1
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.tokenize_spans(text).into_iter().map(|s| s.id).collect()
    }

    /// Greedy longest match, left to right. Characters no token covers map
    /// to `<unk>` one at a time. Spans are in characters, not bytes.
    pub fn tokenize_spans(&self, text: &str) -> Vec<TokenSpan> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let byte_at = |ci: usize| chars.get(ci).map_or(text.len(), |&(b, _)| b);
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let longest = self.max_token_chars.min(chars.len() - pos);
            let hit = (1..=longest).rev().find_map(|len| {
                let piece = &text[byte_at(pos)..byte_at(pos + len)];
                // special tokens are never matched from raw text
                self.id(piece).filter(|&id| id > 1).map(|id| (id, len))
            });
            let (id, len) = hit.unwrap_or((self.unk_id(), 1));
            out.push(TokenSpan {
                id,
                start: pos,
                end: pos + len,
            });
            pos += len;
        }
        out
    }

    /// Concatenates token strings; out-of-range ids render as `<unk>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect()
    }
}

fn unescape(line: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(line.len());
    let mut it = line.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}
