//! Token ids and sequences shared by the model and the vocabulary.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_COUNT: usize = 4;

/// A decoding target: `<bos>`, content ids, `<eos>`, then optional `<pad>`s.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Teacher-forcing input: every id except the last.
    pub fn decoder_input(&self) -> &[usize] {
        &self.ids[..self.ids.len().saturating_sub(1)]
    }

    /// Next-token targets aligned with [`TokenSequence::decoder_input`].
    pub fn targets(&self) -> &[usize] {
        self.ids.get(1..).unwrap_or(&[])
    }

    /// Content ids with `<bos>`, `<eos>` and `<pad>` removed.
    pub fn content(&self) -> Vec<usize> {
        self.ids
            .iter()
            .copied()
            .filter(|&id| !matches!(id, PAD | BOS | EOS))
            .collect()
    }

    pub fn padded_to(mut self, len: usize) -> Self {
        if self.ids.len() < len {
            self.ids.resize(len, PAD);
        }
        self
    }
}
