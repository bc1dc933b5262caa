//! Corpus generation, manifests and on-disk layout.
//!
//! A corpus directory holds:
//!
//! - `manifest.tsv`: one record per line, `path⟨TAB⟩transcript⟨TAB⟩style⟨TAB⟩split`
//! - `images/NNNNNN.pgm`: one 8-bit binary graymap per record
//! - `vocab.txt`: the vocabulary, see [`Vocabulary::to_text`]
//! - `corpus.meta`: `key=value` lines with the generation settings and statistics
//!
//! Record `i < lines` has style `style_mix[i % style_mix.len()]`; the first
//! `round(0.9 · lines)` ids are train and the rest val, so per-style train
//! counts differ by at most one. Test records take ids `lines..lines + test_lines`
//! and are generated from their own seed stream; a test transcript that repeats
//! a train or val transcript is redrawn.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::render::{render_line, GrayImage};
use super::{pgm, Split, Style, Vocabulary};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

const TEST_STREAM: u64 = 0x7E57_7E57;
const RENDER_STREAM: u64 = 0x008E_4DE8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub lines: usize,
    pub test_lines: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Line capacity in characters; fixes the image width.
    pub max_chars: usize,
    pub style_mix: Vec<Style>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            lines: 300,
            test_lines: 60,
            min_len: 3,
            max_len: 10,
            max_chars: 10,
            style_mix: Style::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.lines < 10 {
            return Err(Error::Config(format!(
                "a corpus needs at least 10 lines, got {}",
                self.lines
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > self.max_chars {
            return Err(Error::Config(format!(
                "need 1 ≤ min_len ({}) ≤ max_len ({}) ≤ max_chars ({})",
                self.min_len, self.max_len, self.max_chars
            )));
        }
        if self.style_mix.is_empty() {
            return Err(Error::Config("style mix is empty".into()));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (9 * self.lines + 5) / 10
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: usize,
    /// Image path relative to the corpus directory.
    pub path: String,
    pub transcript: String,
    pub style: Style,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
}

/// A manifest plus its rendered images, `images[i]` belonging to `records[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
}

fn random_transcript(
    rng: &mut SplitMix64,
    alphabet: &[char],
    min_len: usize,
    max_len: usize,
) -> String {
    let len = rng.range_inclusive(min_len as i64, max_len as i64) as usize;
    let mut out = String::with_capacity(len);
    let mut prev_space = true;
    for i in 0..len {
        let interior = i > 0 && i + 1 < len;
        if interior && !prev_space && rng.below(6) == 0 {
            out.push(' ');
            prev_space = true;
        } else {
            out.push(alphabet[rng.below(alphabet.len() as u64) as usize]);
            prev_space = false;
        }
    }
    out
}

fn image_path(id: usize) -> String {
    format!("images/{id:06}.pgm")
}

fn generate(spec: &CorpusSpec, vocab: &Vocabulary, styles: &[Style]) -> Result<Corpus> {
    spec.validate()?;
    let alphabet = vocab.printable();
    if alphabet.is_empty() {
        return Err(Error::Config(
            "vocabulary has no printable characters".into(),
        ));
    }
    let train = spec.train_count();
    let mut records = Vec::with_capacity(spec.lines + spec.test_lines);
    let mut images = Vec::with_capacity(spec.lines + spec.test_lines);
    let mut seen = HashSet::new();
    for id in 0..spec.lines {
        let mut rng = SplitMix64::new(derive_seed(spec.seed, id as u64));
        let transcript = random_transcript(&mut rng, &alphabet, spec.min_len, spec.max_len);
        let style = styles[id % styles.len()];
        let render_seed = derive_seed(spec.seed ^ RENDER_STREAM, id as u64);
        images.push(render_line(
            &transcript,
            style,
            render_seed,
            spec.max_chars,
        )?);
        seen.insert(transcript.clone());
        records.push(Record {
            id,
            path: image_path(id),
            transcript,
            style,
            split: if id < train { Split::Train } else { Split::Val },
        });
    }
    let test_seed = derive_seed(spec.seed, TEST_STREAM);
    for k in 0..spec.test_lines {
        let id = spec.lines + k;
        let mut rng = SplitMix64::new(derive_seed(test_seed, k as u64));
        let transcript = loop {
            let t = random_transcript(&mut rng, &alphabet, spec.min_len, spec.max_len);
            if !seen.contains(&t) {
                break t;
            }
        };
        let style = styles[k % styles.len()];
        let render_seed = derive_seed(test_seed ^ RENDER_STREAM, k as u64);
        images.push(render_line(
            &transcript,
            style,
            render_seed,
            spec.max_chars,
        )?);
        records.push(Record {
            id,
            path: image_path(id),
            transcript,
            style,
            split: Split::Test,
        });
    }
    Ok(Corpus {
        manifest: DatasetManifest {
            records,
            spec: CorpusSpec {
                style_mix: styles.to_vec(),
                ..spec.clone()
            },
            vocab: vocab.clone(),
        },
        images,
    })
}

/// Mixed corpus over `spec.style_mix`, which must include all three styles.
pub fn build_corpus(spec: &CorpusSpec, vocab: &Vocabulary) -> Result<Corpus> {
    for style in Style::ALL {
        if !spec.style_mix.contains(&style) {
            return Err(Error::Config(format!(
                "style mix must cover printed, handwritten and scene; `{style}` is missing"
            )));
        }
    }
    generate(spec, vocab, &spec.style_mix)
}

/// Printed-only corpus used to create the shared base checkpoint.
pub fn build_pretrain_corpus(spec: &CorpusSpec, vocab: &Vocabulary) -> Result<Corpus> {
    generate(spec, vocab, &[Style::Printed])
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// `(split, style) → count`.
    pub fn counts(&self) -> BTreeMap<(Split, Style), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry((r.split, r.style)).or_default() += 1;
        }
        counts
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.path, r.transcript, r.style, r.split
            );
        }
        out
    }

    pub fn meta_text(&self) -> String {
        let s = &self.spec;
        let styles: Vec<&str> = s.style_mix.iter().map(|st| st.as_str()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", s.seed);
        let _ = writeln!(out, "lines={}", s.lines);
        let _ = writeln!(out, "test_lines={}", s.test_lines);
        let _ = writeln!(out, "min_len={}", s.min_len);
        let _ = writeln!(out, "max_len={}", s.max_len);
        let _ = writeln!(out, "max_chars={}", s.max_chars);
        let _ = writeln!(out, "styles={}", styles.join(","));
        for ((split, style), n) in self.counts() {
            let _ = writeln!(out, "count.{split}.{style}={n}");
        }
        let chars: usize = self
            .records
            .iter()
            .map(|r| r.transcript.chars().count())
            .sum();
        let _ = writeln!(out, "total_chars={chars}");
        out
    }

    fn parse_records(tsv: &str) -> Result<Vec<Record>> {
        tsv.lines()
            .enumerate()
            .map(|(i, line)| {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 4 {
                    return Err(Error::Manifest(format!(
                        "manifest line {} has {} fields, expected 4",
                        i + 1,
                        fields.len()
                    )));
                }
                let id = fields[0]
                    .strip_prefix("images/")
                    .and_then(|p| p.strip_suffix(".pgm"))
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| Error::Manifest(format!("bad image path `{}`", fields[0])))?;
                Ok(Record {
                    id,
                    path: fields[0].to_owned(),
                    transcript: fields[1].to_owned(),
                    style: fields[2].parse()?,
                    split: fields[3].parse()?,
                })
            })
            .collect()
    }

    fn parse_meta(text: &str) -> Result<CorpusSpec> {
        let kv = crate::harness::config::parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Manifest(format!("corpus.meta lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Manifest(format!("corpus.meta `{k}` is not a number")))
        };
        Ok(CorpusSpec {
            lines: num("lines")?,
            test_lines: num("test_lines")?,
            min_len: num("min_len")?,
            max_len: num("max_len")?,
            max_chars: num("max_chars")?,
            style_mix: get("styles")?
                .split(',')
                .map(str::parse)
                .collect::<Result<_>>()?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Manifest("corpus.meta `seed` is not a number".into()))?,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let records = Self::parse_records(&read("manifest.tsv")?)?;
        let spec = Self::parse_meta(&read("corpus.meta")?)?;
        let vocab = Vocabulary::from_text(&read("vocab.txt")?)?;
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.id) {
                return Err(Error::Manifest(format!("record id {} appears twice", r.id)));
            }
        }
        Ok(Self {
            records,
            spec,
            vocab,
        })
    }

    pub fn load_image(&self, dir: &Path, record: &Record) -> Result<GrayImage> {
        pgm::read(&dir.join(&record.path))
    }
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for (record, image) in self.manifest.records.iter().zip(&self.images) {
            pgm::write(&dir.join(&record.path), image)?;
        }
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write("manifest.tsv", self.manifest.to_tsv())?;
        write("vocab.txt", self.manifest.vocab.to_text())?;
        write("corpus.meta", self.manifest.meta_text())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let images = manifest
            .records
            .iter()
            .map(|r| manifest.load_image(dir, r))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, images })
    }
}
