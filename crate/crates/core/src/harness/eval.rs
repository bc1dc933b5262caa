//! Greedy transcription and corpus metrics.

use super::train::{check_vocab, prepare_samples, Sample};
use crate::data::{Corpus, Split, Vocabulary};
use crate::metrics::{corpus_report, MetricsReport, ScoredPair};
use crate::model::{Checkpoint, OcrModel};
use crate::Result;

/// Greedy transcriptions of `samples`, in order.
pub fn transcribe(
    model: &OcrModel,
    vocab: &Vocabulary,
    samples: &[Sample],
) -> Result<Vec<ScoredPair>> {
    let eff = model.materialize()?;
    let max_len = model.config().max_decode_len;
    samples
        .iter()
        .map(|s| {
            let g = model.generate_with(&eff, &s.patches, max_len)?;
            Ok(ScoredPair::new(
                s.style.as_str(),
                s.transcript.clone(),
                vocab.detokenize(g.sequence.ids()),
            ))
        })
        .collect()
}

pub fn evaluate_samples(
    model: &OcrModel,
    vocab: &Vocabulary,
    samples: &[Sample],
) -> Result<MetricsReport> {
    corpus_report(&transcribe(model, vocab, samples)?)
}

/// Per-style and mixed metrics of a checkpoint on one split.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus, split: Split) -> Result<MetricsReport> {
    check_vocab(checkpoint, &corpus.manifest.vocab)?;
    let samples = prepare_samples(corpus, split, &checkpoint.model)?;
    evaluate_samples(&checkpoint.model, &checkpoint.vocab, &samples)
}
