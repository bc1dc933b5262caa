use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ocr_peft::data::{build_corpus, build_pretrain_corpus, Corpus, CorpusSpec, Split, Vocabulary};
use ocr_peft::harness::{
    ablation_table, evaluate, load_base, prepare_samples, run_ablation, train, RunConfig,
    TrainConfig, TrainOutcome,
};
use ocr_peft::model::{Checkpoint, OcrModel, Strategy};
use ocr_peft::table::Table;
use ocr_peft::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ocr-peft",
    version,
    about = "Parameter-efficient fine-tuning lab for a small OCR transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Aligned,
    Tsv,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        lines: usize,
        #[arg(long, default_value_t = 60)]
        test_lines: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 10)]
        max_len: usize,
        #[arg(long, default_value_t = 10)]
        max_chars: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Printed lines only, for building the base checkpoint.
        #[arg(long)]
        pretrain: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train a freshly initialized model on every tensor.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log as a tab-separated table.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a base checkpoint with a strategy pair.
    Train {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        decoder: Option<String>,
        /// Adapter rank; overrides the config file.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-style and mixed metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "aligned")]
        format: Format,
    },
    /// Fold every adapter into a dense checkpoint.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable and total parameter counts.
    CountParams {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "aligned")]
        format: Format,
    },
    /// Train and score the eleven-row strategy grid from one base checkpoint.
    Ablate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Adapter rank; overrides the config file.
        #[arg(long)]
        rank: Option<usize>,
        /// Where to write the grid as a tab-separated table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "aligned")]
        format: Format,
    },
    /// Re-render a tab-separated table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "aligned")]
        format: Format,
    },
}

fn render(table: &Table, format: Format) -> String {
    match format {
        Format::Aligned => table.to_aligned(),
        Format::Tsv => table.to_delimited('\t'),
        Format::Csv => table.to_delimited(','),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply_rank(cfg: &mut RunConfig, rank: Option<usize>) {
    if let Some(r) = rank {
        cfg.train.adapter.rank = r;
        cfg.rank_given = true;
    }
}

fn finish_training(outcome: &TrainOutcome, log: Option<&Path>) -> Result<()> {
    let table = outcome.to_table();
    print!("{}", table.to_aligned());
    println!("{}", outcome.summary());
    if let Some(path) = log {
        write_file(path, &table.to_delimited('\t'))?;
    }
    Ok(())
}

fn snapshot_hook<'a>(
    every: usize,
    out: &'a Path,
    vocab: &'a Vocabulary,
) -> impl FnMut(&ocr_peft::harness::EpochLog, &OcrModel) -> Result<()> + 'a {
    move |log, model| {
        if every > 0 && log.epoch % every == 0 {
            let path = PathBuf::from(format!("{}.epoch{}", out.display(), log.epoch));
            Checkpoint::new(model.clone(), vocab.clone())?.save(&path)?;
        }
        Ok(())
    }
}

fn run_training(
    mut model: OcrModel,
    corpus: &Corpus,
    config: &TrainConfig,
    out: &Path,
    log: Option<&Path>,
    stage: &str,
) -> Result<()> {
    let vocab = &corpus.manifest.vocab;
    let train_set = prepare_samples(corpus, Split::Train, &model)?;
    let val_set = prepare_samples(corpus, Split::Val, &model)?;
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        vocab,
        config,
        snapshot_hook(config.checkpoint_every, out, vocab),
    )?;
    let mut ck = Checkpoint::new(model, vocab.clone())?;
    ck.meta.insert("stage".into(), stage.into());
    ck.save(out)?;
    finish_training(&outcome, log)?;
    if let Some(reason) = outcome.aborted {
        return Err(Error::Divergence { param: reason });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            lines,
            test_lines,
            min_len,
            max_len,
            max_chars,
            seed,
            pretrain,
            vocab,
        } => {
            let vocab =
                vocab.map_or_else(|| Ok(Vocabulary::default()), |p| Vocabulary::load(&p))?;
            let spec = CorpusSpec {
                lines,
                test_lines,
                min_len,
                max_len,
                max_chars,
                seed,
                ..CorpusSpec::default()
            };
            let corpus = if pretrain {
                build_pretrain_corpus(&spec, &vocab)?
            } else {
                build_corpus(&spec, &vocab)?
            };
            corpus.write(&out)?;
            print!("{}", corpus.manifest.meta_text());
        }
        Command::Pretrain {
            data,
            config,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = Corpus::load(&data)?;
            let model = OcrModel::new(cfg.model.clone(), cfg.train.seed)?;
            let train_cfg = TrainConfig {
                strategy: ocr_peft::model::StrategyPair::new(
                    Strategy::FullFineTune,
                    Strategy::FullFineTune,
                ),
                ..cfg.train
            };
            run_training(model, &corpus, &train_cfg, &out, log.as_deref(), "pretrain")?;
        }
        Command::Train {
            base,
            data,
            config,
            encoder,
            decoder,
            rank,
            out,
            log,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_rank(&mut cfg, rank);
            if let Some(s) = encoder {
                cfg.train.strategy.encoder = s.parse()?;
            }
            if let Some(s) = decoder {
                cfg.train.strategy.decoder = s.parse()?;
            }
            cfg.require_rank(false)?;
            let base = load_base(&base)?;
            let corpus = Corpus::load(&data)?;
            if base.vocab != corpus.manifest.vocab {
                return Err(Error::Compatibility(
                    "checkpoint and corpus vocabularies differ".into(),
                ));
            }
            let mut model = base.model;
            let inventory = model.inject(cfg.train.strategy, cfg.train.adapter)?;
            println!(
                "strategy {}: {} LoRA sites, {} DoRA sites",
                cfg.train.strategy,
                inventory.lora.len(),
                inventory.dora.len()
            );
            run_training(
                model,
                &corpus,
                &cfg.train,
                &out,
                log.as_deref(),
                "fine-tune",
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            format,
        } => {
            let split: Split = split
                .parse()
                .map_err(|_| Error::Config(format!("unknown split `{split}`")))?;
            let ck = Checkpoint::load(&checkpoint)?;
            let corpus = Corpus::load(&data)?;
            let report = evaluate(&ck, &corpus, split)?;
            print!("{}", render(&report.to_table(), format));
        }
        Command::Merge { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut merged = Checkpoint::new(ck.model.merged()?, ck.vocab.clone())?;
            merged.meta = ck.meta.clone();
            merged.meta.insert("merged".into(), "true".into());
            merged.save(&out)?;
        }
        Command::CountParams { checkpoint, format } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let counts = ck.model.count_parameters();
            let mut table = Table::new(["strategy", "trainable", "total", "ratio_percent"]);
            table.push_row([
                ck.model
                    .strategy()
                    .map_or_else(|| "dense".to_string(), |(p, _)| p.to_string()),
                counts.trainable.to_string(),
                counts.total.to_string(),
                format!("{:.4}", counts.ratio_percent),
            ]);
            print!("{}", render(&table, format));
        }
        Command::Ablate {
            base,
            data,
            config,
            rank,
            out,
            format,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_rank(&mut cfg, rank);
            cfg.require_rank(true)?;
            let base = load_base(&base)?;
            let corpus = Corpus::load(&data)?;
            let rows = run_ablation(&base, &corpus, &cfg.train)?;
            let table = ablation_table(&rows);
            if let Some(path) = out {
                write_file(&path, &table.to_delimited('\t'))?;
            }
            print!("{}", render(&table, format));
        }
        Command::Report { input, format } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let table = Table::parse_delimited(&text, '\t')?;
            print!("{}", render(&table, format));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
