//! Checkpoint container.
//!
//! ```text
//! ocr-peft checkpoint 1
//! key=value header lines (model.*, strategy.*, adapter.*, vocab, meta.*)
//! <empty line>
//! u64 tensor count
//! per tensor: u32 name length, name bytes, u32 rows, u32 cols,
//!             u8 trainable flag, rows·cols f64 values
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in parameter
//! order, so save followed by load reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::config::ModelConfig;
use super::inject::{AdapterOptions, StrategyPair};
use super::network::OcrModel;
use crate::data::Vocabulary;
use crate::harness::config::parse_key_values;
use crate::{Error, Result};

const MAGIC: &str = "ocr-peft checkpoint 1";

/// A model with the vocabulary it was trained for and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: OcrModel,
    pub vocab: Vocabulary,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: OcrModel, vocab: Vocabulary) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Compatibility(format!(
                "model has {} output classes but the vocabulary has {} tokens",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            model,
            vocab,
            meta: BTreeMap::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.model.config();
        let mut head = String::new();
        let _ = writeln!(head, "{MAGIC}");
        for (k, v) in [
            ("channels", c.channels),
            ("image_height", c.image_height),
            ("image_width", c.image_width),
            ("patch_size", c.patch_size),
            ("embed_dim", c.embed_dim),
            ("head_count", c.head_count),
            ("encoder_layers", c.encoder_layers),
            ("decoder_layers", c.decoder_layers),
            ("ffn_dim", c.ffn_dim),
            ("vocab_size", c.vocab_size),
            ("max_decode_len", c.max_decode_len),
        ] {
            let _ = writeln!(head, "model.{k}={v}");
        }
        let _ = writeln!(head, "model.activation={}", c.activation);
        if let Some((pair, o)) = self.model.strategy() {
            let _ = writeln!(head, "strategy.encoder={}", pair.encoder);
            let _ = writeln!(head, "strategy.decoder={}", pair.decoder);
            let _ = writeln!(head, "adapter.rank={}", o.rank);
            let _ = writeln!(head, "adapter.scale={}", o.scale);
            let _ = writeln!(
                head,
                "adapter.magnitude_trainable={}",
                o.magnitude_trainable
            );
            let _ = writeln!(
                head,
                "adapter.output_projection={}",
                o.adapt_output_projection
            );
            let _ = writeln!(head, "adapter.seed={}", o.seed);
        }
        let codes: Vec<String> = self
            .vocab
            .chars()
            .iter()
            .map(|&ch| format!("{:04X}", ch as u32))
            .collect();
        let _ = writeln!(head, "vocab={}", codes.join(" "));
        for (k, v) in &self.meta {
            let _ = writeln!(head, "meta.{k}={v}");
        }
        head.push('\n');

        let mut out = head.into_bytes();
        let params = self.model.params();
        out.extend((params.len() as u64).to_le_bytes());
        for (_, p) in params.iter() {
            out.extend((p.name.len() as u32).to_le_bytes());
            out.extend(p.name.as_bytes());
            out.extend((p.value.nrows() as u32).to_le_bytes());
            out.extend((p.value.ncols() as u32).to_le_bytes());
            out.push(u8::from(p.trainable));
            for v in p.value.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..split + 1])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let (magic, rest) = head.split_once('\n').unwrap_or((head, ""));
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("unrecognized header `{magic}`")));
        }
        let kv = parse_key_values(rest)?;
        let text = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
        };
        let parsed = |k: &str| -> Result<usize> {
            text(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("header `{k}` is not a count")))
        };
        let config = ModelConfig {
            channels: parsed("model.channels")?,
            image_height: parsed("model.image_height")?,
            image_width: parsed("model.image_width")?,
            patch_size: parsed("model.patch_size")?,
            embed_dim: parsed("model.embed_dim")?,
            head_count: parsed("model.head_count")?,
            encoder_layers: parsed("model.encoder_layers")?,
            decoder_layers: parsed("model.decoder_layers")?,
            ffn_dim: parsed("model.ffn_dim")?,
            vocab_size: parsed("model.vocab_size")?,
            max_decode_len: parsed("model.max_decode_len")?,
            activation: text("model.activation")?.parse()?,
        };
        let chars = text("vocab")?
            .split_whitespace()
            .map(|h| {
                u32::from_str_radix(h, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Checkpoint(format!("bad vocabulary code `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_chars(chars)?;

        let mut model = OcrModel::new(config, 0)?;
        if kv.contains_key("strategy.encoder") {
            let pair = StrategyPair::new(
                text("strategy.encoder")?.parse()?,
                text("strategy.decoder")?.parse()?,
            );
            let flag = |k: &str| -> Result<bool> {
                text(k)?
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("header `{k}` is not a boolean")))
            };
            let options = AdapterOptions {
                rank: parsed("adapter.rank")?,
                scale: text("adapter.scale")?.parse().map_err(|_| {
                    Error::Checkpoint("header `adapter.scale` is not a number".into())
                })?,
                magnitude_trainable: flag("adapter.magnitude_trainable")?,
                adapt_output_projection: flag("adapter.output_projection")?,
                seed: text("adapter.seed")?.parse().map_err(|_| {
                    Error::Checkpoint("header `adapter.seed` is not a number".into())
                })?,
            };
            model.inject(pair, options)?;
        }
        let meta = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();

        let mut r = Reader {
            bytes: &bytes[split + 2..],
        };
        let count = r.u64()? as usize;
        if count != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, architecture has {}",
                model.params().len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(Error::Checkpoint(format!("bad trainable flag {other}"))),
            };
            let values = r
                .take(rows * cols * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let id = model
                .params()
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let p = model.params_mut().get_mut(id);
            if p.value.dim() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` is {rows}×{cols}, architecture expects {:?}",
                    p.value.dim()
                )));
            }
            p.value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            p.trainable = trainable;
            seen[id.index()] = true;
        }
        if !r.bytes.is_empty() {
            return Err(Error::Checkpoint(
                "trailing bytes after the last tensor".into(),
            ));
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Checkpoint("duplicate tensor names".into()));
        }
        let mut ck = Checkpoint::new(model, vocab)?;
        ck.meta = meta;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("file ends inside a tensor".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
