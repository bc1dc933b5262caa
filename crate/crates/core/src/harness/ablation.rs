//! The encoder/decoder strategy grid.

use std::path::Path;

use super::config::TrainConfig;
use super::eval::evaluate;
use super::train::fine_tune;
use crate::data::{Corpus, Split};
use crate::model::{Checkpoint, Strategy, StrategyPair};
use crate::table::Table;
use crate::{Error, Result};

/// The eleven grid rows: decoder-only, encoder-only, then both components.
pub fn ablation_grid() -> [StrategyPair; 11] {
    use Strategy::{Dora, Frozen, FullFineTune as Ft, Lora};
    [
        StrategyPair::new(Frozen, Lora),
        StrategyPair::new(Frozen, Dora),
        StrategyPair::new(Frozen, Ft),
        StrategyPair::new(Lora, Frozen),
        StrategyPair::new(Dora, Frozen),
        StrategyPair::new(Ft, Frozen),
        StrategyPair::new(Lora, Lora),
        StrategyPair::new(Dora, Dora),
        StrategyPair::new(Lora, Dora),
        StrategyPair::new(Dora, Lora),
        StrategyPair::new(Ft, Ft),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: StrategyPair,
    /// Mixed-split CER on the test records.
    pub cer: f64,
    /// Mixed-split word F1 on the test records.
    pub f1: f64,
    pub trainable: usize,
    pub total: usize,
    pub steps: u64,
}

impl AblationRow {
    /// `DLoRA` for DoRA encoder with LoRA decoder, empty otherwise.
    pub fn name(&self) -> &'static str {
        if self.strategy == StrategyPair::dlora() {
            "DLoRA"
        } else {
            ""
        }
    }
}

/// Trains every grid row from `base` with the same budget and seed and
/// scores it on the test split.
pub fn run_ablation(
    base: &Checkpoint,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ablation_grid()
        .into_iter()
        .map(|strategy| {
            let row_config = TrainConfig {
                strategy,
                ..config.clone()
            };
            let (ck, outcome) = fine_tune(base, corpus, &row_config)?;
            let report = evaluate(&ck, corpus, Split::Test)?;
            let counts = ck.model.count_parameters();
            Ok(AblationRow {
                strategy,
                cer: report.mixed.cer,
                f1: report.mixed.f1,
                trainable: counts.trainable,
                total: counts.total,
                steps: outcome.steps,
            })
        })
        .collect()
}

/// Loads the shared base checkpoint; a missing file is a setup error.
pub fn load_base(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Setup(format!(
            "base checkpoint {} does not exist; run pretrain first",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// CER and F1 in percent, as in the usual ablation layout.
pub fn ablation_table(rows: &[AblationRow]) -> Table {
    let mut t = Table::new([
        "Encoder",
        "Decoder",
        "Name",
        "CER",
        "F1",
        "Trainable",
        "Steps",
    ]);
    for r in rows {
        t.push_row([
            r.strategy.encoder.label().to_string(),
            r.strategy.decoder.label().to_string(),
            if r.name().is_empty() {
                "-".into()
            } else {
                r.name().to_string()
            },
            format!("{:.2}", 100.0 * r.cer),
            format!("{:.2}", 100.0 * r.f1),
            r.trainable.to_string(),
            r.steps.to_string(),
        ]);
    }
    t
}
