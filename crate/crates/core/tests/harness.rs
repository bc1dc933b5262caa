use ndarray::{array, Array2};
use ocr_peft::data::{build_corpus, CorpusSpec, Split, Vocabulary};
use ocr_peft::harness::{
    ablation_grid, adamw_step, evaluate, evaluate_samples, prepare_samples, train, AdamWConfig,
    AdamWState, TrainConfig,
};
use ocr_peft::model::{
    AdapterOptions, Checkpoint, Component, Grads, ModelConfig, OcrModel, ParamKind, ParamStore,
    Strategy, StrategyPair,
};

/// Scalar AdamW written out step by step.
fn reference_adamw(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: i32,
    c: &AdamWConfig,
) {
    for i in 0..p.len() {
        p[i] -= c.lr * c.weight_decay * p[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let m_hat = m[i] / (1.0 - c.beta1.powi(t));
        let v_hat = v[i] / (1.0 - c.beta2.powi(t));
        p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

#[test]
fn adamw_matches_a_scalar_reference_on_a_quadratic() {
    let target = array![[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]];
    let curvature = array![[1.0, 2.0, 0.5], [4.0, 1.0, 3.0]];
    let start = array![[0.3, 0.1, -0.7], [2.0, 1.5, 0.2]];
    let cfg = AdamWConfig {
        lr: 0.05,
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let grad = |p: &Array2<f64>| &curvature * &(p - &target);

    let mut store = ParamStore::default();
    let id = store.add("w", start.clone(), Component::Decoder, ParamKind::Base);
    let mut state = AdamWState::default();
    let mut p: Vec<f64> = start.iter().copied().collect();
    let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=10 {
        let g = grad(&store.get(id).value);
        let mut grads = Grads::new(1);
        grads.set(id, g.clone());
        adamw_step(&mut store, &grads, &mut state, &cfg).unwrap();
        let g_ref: Vec<f64> = {
            let pa = Array2::from_shape_vec((2, 3), p.clone()).unwrap();
            grad(&pa).iter().copied().collect()
        };
        reference_adamw(&mut p, &g_ref, &mut m, &mut v, t, &cfg);
        for (a, b) in store.get(id).value.iter().zip(&p) {
            assert!((a - b).abs() < 1e-10, "step {t}: {a} vs {b}");
        }
    }
    assert_eq!(state.step, 10);
}

fn toy_corpus(lines: usize, seed: u64) -> ocr_peft::data::Corpus {
    let spec = CorpusSpec {
        lines,
        test_lines: 6,
        min_len: 3,
        max_len: 6,
        seed,
        ..CorpusSpec::default()
    };
    build_corpus(&spec, &Vocabulary::default()).unwrap()
}

fn toy_config(strategy: StrategyPair, epochs: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        adapter: AdapterOptions {
            rank: 2,
            magnitude_trainable: true,
            ..AdapterOptions::default()
        },
        lr: Some(3e-3),
        epochs,
        batch: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn peft_training_leaves_frozen_tensors_bitwise_unchanged() {
    let corpus = toy_corpus(12, 1);
    let mut model = OcrModel::new(ModelConfig::small(), 2).unwrap();
    let config = toy_config(StrategyPair::dlora(), 2);
    model.inject(config.strategy, config.adapter).unwrap();
    let frozen = model.params().fingerprint(|p| !p.trainable);
    let adapters = model.params().fingerprint(|p| p.kind == ParamKind::Adapter);
    let train_set = prepare_samples(&corpus, Split::Train, &model).unwrap();
    let outcome = train(
        &mut model,
        &train_set,
        &[],
        &corpus.manifest.vocab,
        &config,
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(outcome.steps, 6);
    assert_eq!(model.params().fingerprint(|p| !p.trainable), frozen);
    assert_ne!(
        model.params().fingerprint(|p| p.kind == ParamKind::Adapter),
        adapters
    );
}

#[test]
fn the_same_seed_gives_identical_logs_and_weights() {
    let corpus = toy_corpus(12, 4);
    let run = || {
        let mut model = OcrModel::new(ModelConfig::small(), 5).unwrap();
        let config = toy_config(StrategyPair::new(Strategy::Lora, Strategy::Dora), 3);
        model.inject(config.strategy, config.adapter).unwrap();
        let train_set = prepare_samples(&corpus, Split::Train, &model).unwrap();
        let val_set = prepare_samples(&corpus, Split::Val, &model).unwrap();
        let outcome = train(
            &mut model,
            &train_set,
            &val_set,
            &corpus.manifest.vocab,
            &config,
            |_, _| Ok(()),
        )
        .unwrap();
        let bytes = Checkpoint::new(model, corpus.manifest.vocab.clone())
            .unwrap()
            .to_bytes();
        (outcome.to_table().to_delimited('\t'), bytes)
    };
    assert_eq!(run(), run());
}

#[test]
fn a_memorized_corpus_is_transcribed_exactly() {
    let corpus = toy_corpus(10, 6);
    let mut model = OcrModel::new(ModelConfig::small(), 7).unwrap();
    let config = toy_config(
        StrategyPair::new(Strategy::FullFineTune, Strategy::FullFineTune),
        150,
    );
    let train_set = prepare_samples(&corpus, Split::Train, &model).unwrap();
    train(
        &mut model,
        &train_set,
        &[],
        &corpus.manifest.vocab,
        &config,
        |_, _| Ok(()),
    )
    .unwrap();
    let report = evaluate_samples(&model, &corpus.manifest.vocab, &train_set).unwrap();
    assert_eq!(report.mixed.cer, 0.0);
    assert_eq!(report.mixed.f1, 1.0);
}

#[test]
fn reports_have_one_row_per_style_plus_mixed_and_ignore_order() {
    let corpus = toy_corpus(12, 8);
    let ck = Checkpoint::new(
        OcrModel::new(ModelConfig::small(), 9).unwrap(),
        corpus.manifest.vocab.clone(),
    )
    .unwrap();
    let report = evaluate(&ck, &corpus, Split::Test).unwrap();
    assert_eq!(report.rows().count(), 4);
    assert_eq!(report.to_table().to_delimited('\t').lines().count(), 5);

    let mut reversed = corpus.clone();
    reversed.manifest.records.reverse();
    reversed.images.reverse();
    let again = evaluate(&ck, &reversed, Split::Test).unwrap();
    assert_eq!(report.mixed, again.mixed);
    assert_eq!(report.subsets, again.subsets);
}

#[test]
fn peft_rows_train_a_small_fraction_of_full_fine_tuning() {
    let base = OcrModel::new(ModelConfig::small(), 0).unwrap();
    let count = |pair| {
        let mut m = base.clone();
        m.inject(pair, AdapterOptions::default()).unwrap();
        m.count_parameters().trainable
    };
    let full = count(StrategyPair::new(
        Strategy::FullFineTune,
        Strategy::FullFineTune,
    ));
    for pair in ablation_grid() {
        if pair.encoder == Strategy::FullFineTune || pair.decoder == Strategy::FullFineTune {
            continue;
        }
        let trainable = count(pair);
        assert!(10 * trainable < full, "{pair}: {trainable} of {full}");
    }
}
