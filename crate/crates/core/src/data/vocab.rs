use std::path::Path;

use super::font::GLYPHS;
use crate::model::tokens::{TokenSequence, BOS, EOS, PAD, SPECIAL_COUNT, UNK};
use crate::{Error, Result};

/// Character substituted for unknown tokens by [`Vocabulary::detokenize`].
pub const UNKNOWN_PLACEHOLDER: char = '\u{FFFD}';

/// Dense character vocabulary: `<pad>`, `<bos>`, `<eos>`, `<unk>`, then characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Default for Vocabulary {
    /// Space followed by every glyph of the bitmap font.
    fn default() -> Self {
        let chars = std::iter::once(' ')
            .chain(GLYPHS.iter().map(|(c, _)| *c))
            .collect();
        Self { chars }
    }
}

impl Vocabulary {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(Error::Config(format!(
                    "duplicate vocabulary character {c:?}"
                )));
            }
            if c == '\t' || c == '\n' || c == '\r' {
                return Err(Error::Config(
                    "vocabulary may not contain tabs or newlines".into(),
                ));
            }
        }
        Ok(Self { chars })
    }

    /// Total number of token ids including the four specials.
    pub fn len(&self) -> usize {
        self.chars.len() + SPECIAL_COUNT
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Characters that are not whitespace; transcripts draw from these.
    pub fn printable(&self) -> Vec<char> {
        self.chars
            .iter()
            .copied()
            .filter(|c| !c.is_whitespace())
            .collect()
    }

    pub fn id_of(&self, ch: char) -> usize {
        self.chars
            .iter()
            .position(|&c| c == ch)
            .map_or(UNK, |i| i + SPECIAL_COUNT)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIAL_COUNT)
            .and_then(|i| self.chars.get(i).copied())
    }

    /// `<bos>`, one id per character (unknown → `<unk>`), `<eos>`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.chars().count() + 2);
        ids.push(BOS);
        ids.extend(text.chars().map(|c| self.id_of(c)));
        ids.push(EOS);
        TokenSequence::new(ids)
    }

    /// Drops specials; `<unk>` becomes [`UNKNOWN_PLACEHOLDER`].
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD | BOS | EOS => None,
                UNK => Some(UNKNOWN_PLACEHOLDER),
                _ => Some(self.char_of(id).unwrap_or(UNKNOWN_PLACEHOLDER)),
            })
            .collect()
    }

    /// One line per id: `<pad>`, `<bos>`, `<eos>`, `<unk>`, then `U+XXXX`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("<pad>\n<bos>\n<eos>\n<unk>\n");
        for c in &self.chars {
            out.push_str(&format!("U+{:04X}\n", *c as u32));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_COUNT
            || lines[..SPECIAL_COUNT] != ["<pad>", "<bos>", "<eos>", "<unk>"]
        {
            return Err(Error::Manifest(
                "vocabulary must start with the four special tokens".into(),
            ));
        }
        let chars = lines[SPECIAL_COUNT..]
            .iter()
            .map(|l| {
                l.strip_prefix("U+")
                    .and_then(|hex| u32::from_str_radix(hex, 16).ok())
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Manifest(format!("bad vocabulary line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_chars(chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
