//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{gradient_errors, perturb_adapters, randn, random_patches, random_tokens};
use ndarray::{Array1, Array2};
use ocr_peft::adapters::{dora_compose, lora_delta_of, DoraState, LowRankPair};
use ocr_peft::data::{build_corpus, build_pretrain_corpus, Corpus, CorpusSpec, Split};
use ocr_peft::harness::{
    ablation_grid, ablation_table, adamw_step, evaluate, fine_tune, prepare_samples, pretrain,
    run_ablation, AblationRow, AdamWConfig, AdamWState, RunConfig,
};
use ocr_peft::metrics::{cer, corpus_report, edit_distance, f1_line, wer_and_accuracy, ScoredPair};
use ocr_peft::model::{
    AdapterOptions, Checkpoint, ModelConfig, OcrModel, Strategy, StrategyPair, TokenSequence,
};
use ocr_peft::rng::SplitMix64;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> std::result::Result<(), String> {
    ensure(elapsed < budget, || {
        format!(
            "took {:.1}s, budget {:.0}s",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        )
    })
}

/// `max|a − n| / max(max|a|, max|n|)`; zero when both are zero.
fn max_relative(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(
    value: &Array2<f64>,
    h: f64,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut probe = value.clone();
    let mut out = Array2::zeros(value.raw_dim());
    for ((r, c), slot) in out.indexed_iter_mut() {
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    out
}

fn weighted_sum(weight: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
    (weight * upstream).sum()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(11);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let configs = 24;
    for _ in 0..configs {
        let m = 2 + rng.below(11) as usize;
        let n = 2 + rng.below(11) as usize;
        let r = 1 + rng.below(m.min(n) as u64) as usize;
        let scale = 0.5 + 1.5 * rng.random::<f64>();
        let base = randn(m, n, &mut rng);
        let b = randn(m, r, &mut rng) * 0.5;
        let a = randn(r, n, &mut rng) * 0.5;
        let upstream = randn(m, n, &mut rng);
        let mut magnitude = ocr_peft::adapters::column_norms(base.view());
        magnitude.mapv_inplace(|u| u * (1.0 + 0.3 * rng.random::<f64>()));

        let pair =
            LowRankPair::from_factors(b.clone(), a.clone(), scale).map_err(|e| e.to_string())?;
        let dora = DoraState::from_parts(base.clone(), magnitude.clone(), pair.clone(), true)
            .map_err(|e| e.to_string())?;
        let g = dora.gradients(upstream.view()).map_err(|e| e.to_string())?;
        let loss = |b: &Array2<f64>, a: &Array2<f64>, u: &Array1<f64>| {
            let fwd = dora_compose(base.view(), u.view(), b.view(), a.view(), scale).unwrap();
            weighted_sum(&fwd.weight, &upstream)
        };
        let num_a = central_difference(&a, h, |a| loss(&b, a, &magnitude));
        let num_b = central_difference(&b, h, |b| loss(b, &a, &magnitude));
        let u2 = magnitude.clone().insert_axis(ndarray::Axis(0));
        let num_u = central_difference(&u2, h, |u| loss(&b, &a, &u.row(0).to_owned()));
        let grad_u = g
            .grad_magnitude
            .ok_or("trainable magnitude produced no gradient")?
            .insert_axis(ndarray::Axis(0));
        worst = worst
            .max(max_relative(&g.grad_a, &num_a))
            .max(max_relative(&g.grad_b, &num_b))
            .max(max_relative(&grad_u, &num_u));

        let lg = pair.gradients(upstream.view()).map_err(|e| e.to_string())?;
        let lora_loss = |b: &Array2<f64>, a: &Array2<f64>| {
            weighted_sum(
                &(&base + &lora_delta_of(b.view(), a.view(), scale)),
                &upstream,
            )
        };
        let num_a = central_difference(&a, h, |a| lora_loss(&b, a));
        let num_b = central_difference(&b, h, |b| lora_loss(b, &a));
        worst = worst
            .max(max_relative(&lg.grad_a, &num_a))
            .max(max_relative(&lg.grad_b, &num_b));
    }
    ensure(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "{configs} configs, max relative error {worst:.2e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::default();
    let base = OcrModel::new(config.clone(), 21).map_err(|e| e.to_string())?;
    let inputs: Vec<(Array2<f64>, TokenSequence)> = (0..10)
        .map(|i| {
            (
                random_patches(&config, 100 + i),
                random_tokens(&config, 6, 200 + i),
            )
        })
        .collect();
    let reference: Vec<Array2<f64>> = inputs
        .iter()
        .map(|(p, t)| base.logits(p, t).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for pair in ablation_grid() {
        let mut model = base.clone();
        let options = AdapterOptions {
            rank: 4,
            magnitude_trainable: true,
            adapt_output_projection: true,
            seed: 5,
            ..AdapterOptions::default()
        };
        model.inject(pair, options).map_err(|e| e.to_string())?;
        for ((p, t), expected) in inputs.iter().zip(&reference) {
            let got = model.logits(p, t).map_err(|e| e.to_string())?;
            let diff = (&got - expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(diff);
        }
    }
    ensure(worst <= 1e-12, || format!("max logit difference {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "11 strategies x 10 images, max |Δlogit| {worst:.1e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn same_generations(
    model: &OcrModel,
    patches: &[Array2<f64>],
) -> std::result::Result<usize, String> {
    let merged = model.merged().map_err(|e| e.to_string())?;
    let max_len = model.config().max_decode_len;
    let mut tokens = 0;
    for (i, p) in patches.iter().enumerate() {
        let a = model.generate(p, max_len).map_err(|e| e.to_string())?;
        let b = merged.generate(p, max_len).map_err(|e| e.to_string())?;
        ensure(a.sequence == b.sequence, || {
            format!("sample {i}: {:?} vs {:?}", a.sequence, b.sequence)
        })?;
        tokens += a.sequence.len();
    }
    Ok(tokens)
}

fn criterion_3(trained: &Checkpoint, corpus: &Corpus) -> Outcome {
    let start = Instant::now();
    let samples =
        prepare_samples(corpus, Split::Test, &trained.model).map_err(|e| e.to_string())?;
    let patches: Vec<Array2<f64>> = samples.iter().take(50).map(|s| s.patches.clone()).collect();
    ensure(patches.len() == 50, || {
        format!("only {} test samples", patches.len())
    })?;
    let trained_tokens = same_generations(&trained.model, &patches)?;

    let config = ModelConfig::default();
    let mut random = OcrModel::new(config.clone(), 31).map_err(|e| e.to_string())?;
    let options = AdapterOptions {
        rank: 4,
        magnitude_trainable: true,
        adapt_output_projection: true,
        seed: 3,
        ..AdapterOptions::default()
    };
    random
        .inject(StrategyPair::dlora(), options)
        .map_err(|e| e.to_string())?;
    perturb_adapters(&mut random, 32);
    let random_patches: Vec<Array2<f64>> =
        (0..50).map(|i| random_patches(&config, 300 + i)).collect();
    let perturbed_tokens = same_generations(&random, &random_patches)?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "trained DLoRA 50/50 identical ({trained_tokens} tokens), perturbed adapters 50/50 identical ({perturbed_tokens} tokens), {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

/// Levenshtein distance by exhaustive recursion over the three edit moves,
/// memoized on suffix positions.
fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&d) = memo.get(&(a.len(), b.len())) {
            return d;
        }
        let replace = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let delete = go(&a[1..], b, memo) + 1;
        let insert = go(a, &b[1..], memo) + 1;
        let d = replace.min(delete).min(insert);
        memo.insert((a.len(), b.len()), d);
        d
    }
    go(a, b, &mut HashMap::new())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(41);
    let alphabet = b"abcd";
    for i in 0..1000 {
        let draw = |rng: &mut SplitMix64| -> Vec<u8> {
            let len = rng.below(13) as usize;
            (0..len).map(|_| alphabet[rng.below(4) as usize]).collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let dp = edit_distance(&a, &b).distance();
        let oracle = recursive_distance(&a, &b);
        ensure(dp == oracle, || {
            format!("pair {i}: dp {dp} vs oracle {oracle}")
        })?;
    }
    let e = edit_distance(b"abc", b"abc");
    ensure(
        (e.substitutions, e.insertions, e.deletions) == (0, 0, 0),
        || "abc/abc".into(),
    )?;
    let e = edit_distance(b"abc", b"");
    ensure(e.deletions == 3 && e.distance() == 3, || "abc/empty".into())?;
    ensure(edit_distance(b"kitten", b"sitting").distance() == 3, || {
        "kitten/sitting".into()
    })?;

    let exact = |got: f64, want: f64, what: &str| {
        ensure(got == want, || format!("{what}: {got} != {want}"))
    };
    let c = |r: &str, p: &str| cer(r, p).map_err(|e| e.to_string());
    exact(c("hello", "hello")?, 0.0, "cer hello")?;
    exact(c("abc", "axc")?, 1.0 / 3.0, "cer abc/axc")?;
    exact(c("Abc", "abc")?, 1.0 / 3.0, "cer Abc/abc")?;
    ensure(cer("", "x").is_err(), || "empty reference accepted".into())?;

    let w = |r: &str, p: &str| wer_and_accuracy(r, p).map_err(|e| e.to_string());
    let s = w("the cat", "the cat")?;
    exact(s.wer, 0.0, "wer identical")?;
    exact(s.word_accuracy, 1.0, "acc identical")?;
    let s = w("the cat sat", "the cat")?;
    exact(s.wer, 1.0 / 3.0, "wer the cat sat")?;
    exact(s.word_accuracy, 1.0 - 1.0 / 3.0, "acc the cat sat")?;
    exact(w("The cat", "the cat")?.wer, 0.0, "wer case folding")?;

    let f = f1_line("the cat", "the cat sat");
    exact(f.precision, 2.0 / 3.0, "precision")?;
    exact(f.recall, 1.0, "recall")?;
    exact(f.f1, 0.8, "f1")?;
    exact(f1_line("a b c", "c b a").f1, 1.0, "f1 multiset")?;
    exact(f1_line("a b", "c d").f1, 0.0, "f1 disjoint")?;

    let report = corpus_report(&[
        ScoredPair::new("printed", "abcd", "abcd"),
        ScoredPair::new("scene", "abcd", "abxy"),
    ])
    .map_err(|e| e.to_string())?;
    exact(report.mixed.cer, 0.25, "mixed cer")?;

    // WAR + WER = 1 over random word pairs, including WER > 1.
    let vocab = ["a", "b", "c", "dd", "e"];
    for _ in 0..1000 {
        let line = |rng: &mut SplitMix64, min: u64| {
            let n = min + rng.below(8);
            (0..n)
                .map(|_| vocab[rng.below(5) as usize])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let r = line(&mut rng, 1);
        let p = line(&mut rng, 0);
        let s = w(&r, &p)?;
        ensure(s.wer + s.word_accuracy == 1.0, || {
            format!("{r:?}/{p:?}: {} + {}", s.wer, s.word_accuracy)
        })?;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "1000 oracle pairs, unit examples exact, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

/// Trainable count from the configuration alone: dense tensors of every
/// fine-tuned component plus `r·(m+n)` per adapted site and `n` per
/// trainable magnitude.
fn closed_form_trainable(
    config: &ModelConfig,
    pair: StrategyPair,
    options: &AdapterOptions,
) -> usize {
    let d = config.embed_dim;
    let f = config.ffn_dim;
    let v = config.vocab_size;
    let attention = 4 * (d * d + d);
    let norm = 2 * d;
    let ffn = d * f + f + f * d + d;
    let encoder_dense = d * config.patch_dim()
        + d
        + config.patch_count() * d
        + config.encoder_layers * (attention + 2 * norm + ffn);
    let decoder_dense = v * d
        + (config.max_decode_len + 1) * d
        + config.decoder_layers * (2 * attention + 3 * norm + ffn)
        + v * d
        + v;
    let adapter = |strategy: Strategy, m: usize, n: usize| match strategy {
        Strategy::Lora => options.rank * (m + n),
        Strategy::Dora => options.rank * (m + n) + if options.magnitude_trainable { n } else { 0 },
        _ => 0,
    };
    let mut total = 0;
    match pair.encoder {
        Strategy::FullFineTune => total += encoder_dense,
        s => total += 3 * config.encoder_layers * adapter(s, d, d),
    }
    match pair.decoder {
        Strategy::FullFineTune => total += decoder_dense,
        s => {
            total += 8 * config.decoder_layers * adapter(s, d, d);
            if options.adapt_output_projection {
                total += adapter(s, v, d);
            }
        }
    }
    total
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(51);
    let grid = ablation_grid();
    for i in 0..5 {
        let heads = [1, 2, 4][rng.below(3) as usize];
        let config = ModelConfig {
            embed_dim: heads * (4 + 4 * rng.below(4) as usize),
            head_count: heads,
            encoder_layers: 1 + rng.below(3) as usize,
            decoder_layers: 1 + rng.below(3) as usize,
            ffn_dim: 16 + 16 * rng.below(4) as usize,
            max_decode_len: 6 + rng.below(8) as usize,
            ..ModelConfig::small()
        };
        let pair = grid[rng.below(grid.len() as u64) as usize];
        let options = AdapterOptions {
            rank: 1 + rng.below(4) as usize,
            magnitude_trainable: rng.below(2) == 1,
            adapt_output_projection: rng.below(2) == 1,
            seed: i,
            ..AdapterOptions::default()
        };
        let mut model = OcrModel::new(config.clone(), i).map_err(|e| e.to_string())?;
        model.inject(pair, options).map_err(|e| e.to_string())?;
        let counted = model.count_parameters().trainable;
        let expected = closed_form_trainable(&config, pair, &options);
        ensure(counted == expected, || {
            format!("config {i} ({pair}): counted {counted}, closed form {expected}")
        })?;
    }
    let config = ModelConfig::small();
    let base = OcrModel::new(config.clone(), 0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for pair in grid {
        if pair.encoder == Strategy::FullFineTune || pair.decoder == Strategy::FullFineTune {
            continue;
        }
        let mut model = base.clone();
        let options = AdapterOptions {
            magnitude_trainable: true,
            ..AdapterOptions::default()
        };
        model.inject(pair, options).map_err(|e| e.to_string())?;
        let counts = model.count_parameters();
        ensure(counts.ratio_percent < 10.0, || {
            format!("{pair}: ratio {:.3}%", counts.ratio_percent)
        })?;
        worst = worst.max(counts.ratio_percent);
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "5 random configs match the closed form, largest PEFT ratio {worst:.3}%, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::tiny();
    let mut worst = 0.0f64;
    let mut tensors = 0;
    let mut cases: Vec<Option<StrategyPair>> = vec![None];
    cases.extend(ablation_grid().into_iter().map(Some));
    for (i, pair) in cases.into_iter().enumerate() {
        let seed = 60 + i as u64;
        let mut model = OcrModel::new(config.clone(), seed).map_err(|e| e.to_string())?;
        if let Some(pair) = pair {
            let options = AdapterOptions {
                rank: 2,
                scale: 0.5,
                magnitude_trainable: true,
                adapt_output_projection: true,
                seed,
            };
            model.inject(pair, options).map_err(|e| e.to_string())?;
            perturb_adapters(&mut model, seed + 100);
        }
        let patches = random_patches(&config, seed + 1);
        let tokens = random_tokens(&config, 3, seed + 2);
        for (name, rel) in gradient_errors(&model, &patches, &tokens, 1e-5) {
            ensure(rel < 1e-4, || {
                format!("{pair:?}: {name} relative error {rel:e}")
            })?;
            worst = worst.max(rel);
            tensors += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "dense + 11 strategies, {tensors} tensors, max relative error {worst:.2e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

/// Steps until the batch loss drops below 0.1, or an error after 500.
fn overfit_single_batch() -> std::result::Result<(usize, f64), String> {
    let config = ModelConfig::tiny();
    let mut model = OcrModel::new(config.clone(), 71).map_err(|e| e.to_string())?;
    let batch: Vec<(Array2<f64>, TokenSequence)> = (0..4)
        .map(|i| {
            (
                random_patches(&config, 710 + i),
                random_tokens(&config, 4, 720 + i),
            )
        })
        .collect();
    let refs: Vec<(&Array2<f64>, &TokenSequence)> = batch.iter().map(|(p, t)| (p, t)).collect();
    let cfg = AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::default();
    let mut loss = f64::INFINITY;
    for step in 1..=500 {
        let (l, grads) = model.batch_grads(&refs).map_err(|e| e.to_string())?;
        loss = l;
        if loss < 0.1 {
            return Ok((step - 1, loss));
        }
        adamw_step(model.params_mut(), &grads, &mut state, &cfg).map_err(|e| e.to_string())?;
    }
    let (final_loss, _) = model.batch_grads(&refs).map_err(|e| e.to_string())?;
    if final_loss < 0.1 {
        return Ok((500, final_loss));
    }
    Err(format!("loss {loss:.4} after 500 steps"))
}

const PRETRAIN_CONFIG: &str = "\
strategy.encoder=full_ft
strategy.decoder=full_ft
lr=0.002
epochs=12
batch=16
seed=1
";

const FINE_TUNE_CONFIG: &str = "\
strategy.encoder=dora
strategy.decoder=lora
rank=8
lr=0.005
epochs=20
batch=16
seed=1
magnitude_trainable=true
";

const ABLATION_CONFIG: &str = "\
rank=8
lr.peft=0.005
lr.full=0.001
epochs=4
batch=16
seed=1
magnitude_trainable=true
";

struct Pipeline {
    dir: tempfile::TempDir,
    dlora: Checkpoint,
    mixed: Corpus,
    mixed_cer: f64,
    report: String,
    toy_run: Duration,
    ablation: Vec<AblationRow>,
    ablation_time: Duration,
}

fn write(path: &Path, text: &str) -> std::result::Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn corpus_spec(lines: usize, test_lines: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        lines,
        test_lines,
        seed,
        ..CorpusSpec::default()
    }
}

/// Pretrain on printed lines, fine-tune DLoRA on the mixed corpus, evaluate,
/// then run the strategy grid. Every artifact is written under a fresh
/// temporary directory.
fn run_pipeline() -> std::result::Result<Pipeline, String> {
    let err = |e: ocr_peft::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let vocab = ocr_peft::data::Vocabulary::default();

    let start = Instant::now();
    let pre = build_pretrain_corpus(&corpus_spec(2000, 100, 1), &vocab).map_err(err)?;
    pre.write(&root.join("pre")).map_err(err)?;
    let pre_cfg = RunConfig::parse(PRETRAIN_CONFIG).map_err(err)?;
    let (base, log) = pretrain(&pre, pre_cfg.model, &pre_cfg.train).map_err(err)?;
    ensure(log.aborted.is_none(), || {
        format!("pretraining diverged: {:?}", log.aborted)
    })?;
    base.save(&root.join("base.ckpt")).map_err(err)?;
    write(
        &root.join("pretrain.log.tsv"),
        &log.to_table().to_delimited('\t'),
    )?;

    let mixed = build_corpus(&corpus_spec(1500, 300, 2), &vocab).map_err(err)?;
    mixed.write(&root.join("mix")).map_err(err)?;
    let ft_cfg = RunConfig::parse(FINE_TUNE_CONFIG).map_err(err)?;
    let (dlora, log) = fine_tune(&base, &mixed, &ft_cfg.train).map_err(err)?;
    ensure(log.aborted.is_none(), || {
        format!("fine-tuning diverged: {:?}", log.aborted)
    })?;
    dlora.save(&root.join("dlora.ckpt")).map_err(err)?;
    write(
        &root.join("fine_tune.log.tsv"),
        &log.to_table().to_delimited('\t'),
    )?;
    let report = evaluate(&dlora, &mixed, Split::Test).map_err(err)?;
    let report_text = report.to_table().to_delimited('\t');
    write(&root.join("eval.tsv"), &report_text)?;
    let toy_run = start.elapsed();

    let start = Instant::now();
    let abl = build_corpus(&corpus_spec(450, 90, 3), &vocab).map_err(err)?;
    abl.write(&root.join("abl")).map_err(err)?;
    let abl_cfg = RunConfig::parse(ABLATION_CONFIG).map_err(err)?;
    let rows = run_ablation(&base, &abl, &abl_cfg.train).map_err(err)?;
    write(
        &root.join("ablation.tsv"),
        &ablation_table(&rows).to_delimited('\t'),
    )?;
    let ablation_time = start.elapsed();

    Ok(Pipeline {
        dir,
        mixed_cer: report.mixed.cer,
        report: report.to_table().to_aligned(),
        dlora,
        mixed,
        toy_run,
        ablation: rows,
        ablation_time,
    })
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let start = Instant::now();
    let (steps, loss) = overfit_single_batch()?;
    let overfit = start.elapsed();
    ensure(p.mixed_cer < 0.15, || {
        format!(
            "held-out mixed CER {:.2}%\n{}",
            100.0 * p.mixed_cer,
            p.report
        )
    })?;
    within(overfit + p.toy_run, Duration::from_secs(20 * 60))?;
    Ok(format!(
        "overfit loss {loss:.4} after {steps} steps; DLoRA held-out mixed CER {:.2}%; {:.0}s total",
        100.0 * p.mixed_cer,
        (overfit + p.toy_run).as_secs_f64()
    ))
}

fn criterion_8(a: &Pipeline, b: &Pipeline) -> Outcome {
    let rows = &a.ablation;
    let grid = ablation_grid();
    ensure(rows.len() == 11, || format!("{} rows", rows.len()))?;
    for (row, pair) in rows.iter().zip(grid) {
        ensure(row.strategy == pair, || {
            format!("row {} where {pair} expected", row.strategy)
        })?;
    }
    let dlora: Vec<_> = rows.iter().filter(|r| r.name() == "DLoRA").collect();
    ensure(
        dlora.len() == 1 && dlora[0].strategy == StrategyPair::dlora(),
        || "DLoRA row missing".into(),
    )?;
    ensure(rows.iter().all(|r| r.steps == rows[0].steps), || {
        "unequal step budgets".into()
    })?;
    let ta = fs::read(a.dir.path().join("ablation.tsv")).map_err(|e| e.to_string())?;
    let tb = fs::read(b.dir.path().join("ablation.tsv")).map_err(|e| e.to_string())?;
    ensure(ta == tb, || "ablation tables differ between runs".into())?;
    let slowest = a.ablation_time.max(b.ablation_time);
    within(slowest, Duration::from_secs(3600))?;
    Ok(format!(
        "11 rows in grid order, {} steps each, byte-identical across runs, {:.0}s per grid",
        rows[0].steps,
        slowest.as_secs_f64()
    ))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_9(a: &Pipeline, b: &Pipeline) -> Outcome {
    let fa = files_under(a.dir.path());
    let fb = files_under(b.dir.path());
    ensure(fa == fb, || "runs produced different file sets".into())?;
    for f in &fa {
        let x = fs::read(a.dir.path().join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.dir.path().join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{} differs", f.display()))?;
    }
    let expected = [
        "manifest.tsv",
        "pretrain.log.tsv",
        "fine_tune.log.tsv",
        "eval.tsv",
        "ablation.tsv",
        "dlora.ckpt",
    ];
    for name in expected {
        ensure(fa.iter().any(|f| f.ends_with(name)), || {
            format!("{name} was not written")
        })?;
    }
    Ok(format!(
        "{} files byte-identical across two seeded runs",
        fa.len()
    ))
}

fn run(name: &str, results: &mut Vec<(String, Outcome)>, f: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    match &outcome {
        Ok(detail) => eprintln!("  {name}: {detail}"),
        Err(msg) => eprintln!("  {name}: {msg}"),
    }
    results.push((name.to_string(), outcome));
}

fn main() {
    let mut results = Vec::new();
    run("1 DoRA gradient fidelity", &mut results, criterion_1);
    run("2 adapter-init transparency", &mut results, criterion_2);
    run("4 metric oracles", &mut results, criterion_4);
    run("5 parameter accounting", &mut results, criterion_5);
    run("6 end-to-end gradient check", &mut results, criterion_6);

    let pipeline = |label: &str| {
        let start = Instant::now();
        let p = run_pipeline();
        eprintln!(
            "  pipeline run {label}: {:.0}s",
            start.elapsed().as_secs_f64()
        );
        p
    };
    let first = pipeline("A");
    let second = pipeline("B");
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            run("3 merge equivalence", &mut results, || {
                criterion_3(&a.dlora, &a.mixed)
            });
            run("7 training sanity", &mut results, || criterion_7(a));
            run("8 ablation grid", &mut results, || criterion_8(a, b));
            run("9 determinism", &mut results, || criterion_9(a, b));
        }
        _ => {
            let msg = first
                .as_ref()
                .err()
                .or(second.as_ref().err())
                .cloned()
                .unwrap_or_default();
            for name in [
                "3 merge equivalence",
                "7 training sanity",
                "8 ablation grid",
                "9 determinism",
            ] {
                results.push((name.to_string(), Err(format!("pipeline failed: {msg}"))));
            }
        }
    }

    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut failed = 0;
    println!();
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name}: {msg}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
