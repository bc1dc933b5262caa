//! Deterministic synthetic text-line corpus.

pub mod corpus;
pub mod font;
pub mod pgm;
pub mod render;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

pub use corpus::{
    build_corpus, build_pretrain_corpus, Corpus, CorpusSpec, DatasetManifest, Record,
};
pub use render::{render_line, GrayImage};
pub use vocab::Vocabulary;

/// Visual style of a rendered line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Style {
    Printed,
    Handwritten,
    Scene,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Printed, Style::Handwritten, Style::Scene];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Printed => "printed",
            Style::Handwritten => "handwritten",
            Style::Scene => "scene",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| crate::Error::Manifest(format!("unknown style `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(crate::Error::Manifest(format!("unknown split `{s}`"))),
        }
    }
}
