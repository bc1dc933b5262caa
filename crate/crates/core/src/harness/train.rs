//! Mini-batch training with best-validation retention.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::adamw::{adamw_step, AdamWState};
use super::config::TrainConfig;
use super::eval::evaluate_samples;
use crate::data::{Corpus, Split, Style, Vocabulary};
use crate::model::{Checkpoint, Grads, OcrModel, TokenSequence};
use crate::rng::{derive_seed, SplitMix64};
use crate::table::Table;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// A prepared example: encoder patches plus the target token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patches: Array2<f64>,
    pub tokens: TokenSequence,
    pub transcript: String,
    pub style: Style,
}

/// Patches and tokenizes every record of `split`, in manifest order.
pub fn prepare_samples(corpus: &Corpus, split: Split, model: &OcrModel) -> Result<Vec<Sample>> {
    let vocab = &corpus.manifest.vocab;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Compatibility(format!(
            "corpus vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    corpus
        .manifest
        .records
        .iter()
        .zip(&corpus.images)
        .filter(|(r, _)| r.split == split)
        .map(|(r, img)| {
            let tokens = vocab.tokenize(&r.transcript);
            if tokens.len() > model.config().decoder_positions() + 1 {
                return Err(Error::Compatibility(format!(
                    "transcript `{}` exceeds the decoder length {}",
                    r.transcript,
                    model.config().max_decode_len
                )));
            }
            Ok(Sample {
                patches: model.patches_of(img.to_tensor().view())?,
                tokens,
                transcript: r.transcript.clone(),
                style: r.style,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    /// Epoch whose parameters were kept (1-based), if any epoch finished.
    pub best_epoch: Option<usize>,
    /// Why training stopped early; the model holds the last good parameters.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["epoch", "train_loss", "val_cer"]);
        for e in &self.epochs {
            t.push_row([
                e.epoch.to_string(),
                format!("{:.6}", e.train_loss),
                e.val_cer
                    .map_or_else(|| "-".to_string(), |c| format!("{c:.6}")),
            ]);
        }
        t
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "steps={} best_epoch=", self.steps);
        match self.best_epoch {
            Some(e) => {
                let _ = write!(out, "{e}");
            }
            None => out.push('-'),
        }
        if let Some(reason) = &self.aborted {
            let _ = write!(out, " aborted={reason}");
        }
        out
    }
}

/// Trains `model` in place and leaves it at the best-validation parameters.
///
/// Each epoch visits the training samples in a fresh seeded order; a step
/// averages per-sample mean token losses over the batch. Parameters that are
/// not trainable are checked bitwise before and after. A non-finite loss or
/// gradient stops training with the last good parameters restored.
pub fn train(
    model: &mut OcrModel,
    train: &[Sample],
    val: &[Sample],
    vocab: &Vocabulary,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &OcrModel) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let frozen_before = model.params().fingerprint(|p| !p.trainable);
    let mut adam = config.adamw;
    adam.lr = config.learning_rate();
    let mut state = AdamWState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        steps: 0,
        best_epoch: None,
        aborted: None,
    };
    let mut best: Option<(f64, OcrModel)> = None;

    'epochs: for epoch in 1..=config.epochs {
        let mut rng = SplitMix64::new(derive_seed(config.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let last_good = model.params().clone();
            let step = batch_step(model, train, chunk, &mut state, &adam);
            match step {
                Ok(loss) => {
                    loss_sum += loss * chunk.len() as f64;
                    loss_count += chunk.len();
                    outcome.steps += 1;
                }
                Err(e) if e.is_numerical() => {
                    *model.params_mut() = last_good;
                    outcome.aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val_cer = if val.is_empty() {
            None
        } else {
            Some(evaluate_samples(model, vocab, val)?.mixed.cer)
        };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / loss_count as f64,
            val_cer,
        };
        on_epoch(&log, model)?;
        let improved = match (&best, val_cer) {
            (None, _) => true,
            (Some((b, _)), Some(c)) => c < *b,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((val_cer.unwrap_or(f64::INFINITY), model.clone()));
            outcome.best_epoch = Some(epoch);
        }
        outcome.epochs.push(log);
    }
    if outcome.aborted.is_none() {
        if let Some((_, m)) = best {
            *model = m;
        }
    } else {
        outcome.best_epoch = None;
    }
    if model.params().fingerprint(|p| !p.trainable) != frozen_before {
        return Err(Error::State(
            "a frozen tensor changed during training".into(),
        ));
    }
    Ok(outcome)
}

fn batch_step(
    model: &mut OcrModel,
    samples: &[Sample],
    chunk: &[usize],
    state: &mut AdamWState,
    adam: &super::adamw::AdamWConfig,
) -> Result<f64> {
    let eff = model.materialize()?;
    let mut grads = Grads::new(model.params().len());
    let w = 1.0 / chunk.len() as f64;
    let mut loss = 0.0;
    for &i in chunk {
        let s = &samples[i];
        loss += w * model.accumulate_grads(&eff, &s.patches, &s.tokens, w, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            param: "loss".into(),
        });
    }
    model.finish_grads(&eff, &mut grads);
    adamw_step(model.params_mut(), &grads, state, adam)?;
    Ok(loss)
}

/// Random initialization followed by full training of every tensor.
pub fn pretrain(
    corpus: &Corpus,
    model_config: crate::model::ModelConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainOutcome)> {
    let mut model = OcrModel::new(model_config, config.seed)?;
    let train_set = prepare_samples(corpus, Split::Train, &model)?;
    let val_set = prepare_samples(corpus, Split::Val, &model)?;
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &corpus.manifest.vocab,
        config,
        |_, _| Ok(()),
    )?;
    let mut ck = Checkpoint::new(model, corpus.manifest.vocab.clone())?;
    ck.meta.insert("stage".into(), "pretrain".into());
    Ok((ck, outcome))
}

/// Injects `config.strategy` into a copy of the base model and trains it.
pub fn fine_tune(
    base: &Checkpoint,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainOutcome)> {
    check_vocab(base, &corpus.manifest.vocab)?;
    if base.model.strategy().is_some() {
        return Err(Error::Setup(
            "the base checkpoint already carries a strategy".into(),
        ));
    }
    let mut model = base.model.clone();
    model.inject(config.strategy, config.adapter)?;
    let train_set = prepare_samples(corpus, Split::Train, &model)?;
    let val_set = prepare_samples(corpus, Split::Val, &model)?;
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &corpus.manifest.vocab,
        config,
        |_, _| Ok(()),
    )?;
    let mut ck = Checkpoint::new(model, corpus.manifest.vocab.clone())?;
    ck.meta.insert("stage".into(), "fine-tune".into());
    Ok((ck, outcome))
}

pub(crate) fn check_vocab(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if &ck.vocab != vocab {
        return Err(Error::Compatibility(
            "checkpoint and corpus vocabularies differ".into(),
        ));
    }
    Ok(())
}
