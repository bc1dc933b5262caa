mod common;

use common::{perturb_adapters, random_patches, random_tokens};
use ndarray::{Array2, Axis};
use ocr_peft::harness::{ablation_grid, adamw_step, AdamWConfig, AdamWState};
use ocr_peft::model::{AdapterOptions, ModelConfig, OcrModel, ParamKind, StrategyPair, EOS};
use proptest::prelude::*;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn zero_param(model: &mut OcrModel, name: &str) {
    let id = model.params().find(name).unwrap();
    model.params_mut().get_mut(id).value.fill(0.0);
}

fn options(seed: u64) -> AdapterOptions {
    AdapterOptions {
        rank: 2,
        magnitude_trainable: true,
        adapt_output_projection: true,
        seed,
        ..AdapterOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn changing_a_later_token_leaves_earlier_logits_alone(seed in 0u64..1000, pos in 1usize..5, id in 0usize..6) {
        let config = ModelConfig::tiny();
        let model = OcrModel::new(config.clone(), seed).unwrap();
        let memory = model.encode(&random_patches(&config, seed + 1)).unwrap();
        let tokens = random_tokens(&config, 4, seed + 2);
        let ids = tokens.decoder_input().to_vec();
        let mut changed = ids.clone();
        changed[pos] = id;
        let a = model.decode(&ids, &memory).unwrap();
        let b = model.decode(&changed, &memory).unwrap();
        for t in 0..pos {
            for v in 0..a.ncols() {
                prop_assert_eq!(a[[t, v]], b[[t, v]]);
            }
        }
    }

    #[test]
    fn encoder_without_positions_is_permutation_equivariant(seed in 0u64..1000, rotate in 1usize..4) {
        let config = ModelConfig::tiny();
        let mut model = OcrModel::new(config.clone(), seed).unwrap();
        zero_param(&mut model, "enc.pos");
        let patches = random_patches(&config, seed + 1);
        let n = patches.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i + rotate) % n).collect();
        let permuted = patches.select(Axis(0), &perm);
        let out = model.encode(&patches).unwrap().select(Axis(0), &perm);
        let out_permuted = model.encode(&permuted).unwrap();
        prop_assert!(max_abs_diff(&out, &out_permuted) < 1e-12);
    }

    #[test]
    fn output_distributions_sum_to_one(seed in 0u64..1000) {
        let config = ModelConfig::tiny();
        let model = OcrModel::new(config.clone(), seed).unwrap();
        let logits = model
            .logits(&random_patches(&config, seed + 1), &random_tokens(&config, 4, seed + 2))
            .unwrap();
        for row in logits.rows() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_output_has_one_row_per_patch() {
    let config = ModelConfig::small();
    let model = OcrModel::new(config.clone(), 1).unwrap();
    let memory = model.encode(&random_patches(&config, 2)).unwrap();
    assert_eq!(memory.dim(), (config.patch_count(), config.embed_dim));
}

#[test]
fn fresh_adapters_reproduce_base_logits_for_every_strategy() {
    let config = ModelConfig::tiny();
    let base = OcrModel::new(config.clone(), 3).unwrap();
    let patches = random_patches(&config, 4);
    let tokens = random_tokens(&config, 5, 5);
    let expected = base.logits(&patches, &tokens).unwrap();
    for pair in ablation_grid() {
        let mut model = base.clone();
        model.inject(pair, options(6)).unwrap();
        let got = model.logits(&patches, &tokens).unwrap();
        assert!(max_abs_diff(&got, &expected) <= 1e-12, "{pair}");
    }
}

#[test]
fn merged_model_generates_the_same_tokens() {
    let config = ModelConfig::tiny();
    for (i, pair) in ablation_grid().into_iter().enumerate() {
        if !pair.uses_adapter() {
            continue;
        }
        let seed = 10 + i as u64;
        let mut model = OcrModel::new(config.clone(), seed).unwrap();
        model.inject(pair, options(seed)).unwrap();
        perturb_adapters(&mut model, seed + 1);
        let merged = model.merged().unwrap();
        assert!(merged.strategy().is_none());
        for j in 0..5 {
            let patches = random_patches(&config, 100 * seed + j);
            let a = model.generate(&patches, config.max_decode_len).unwrap();
            let b = merged.generate(&patches, config.max_decode_len).unwrap();
            assert_eq!(a, b, "{pair}");
        }
    }
}

#[test]
fn without_cross_attention_values_the_image_is_ignored() {
    let config = ModelConfig::tiny();
    let mut model = OcrModel::new(config.clone(), 7).unwrap();
    for l in 0..config.decoder_layers {
        zero_param(&mut model, &format!("dec.{l}.cross.v.w"));
        zero_param(&mut model, &format!("dec.{l}.cross.v.b"));
    }
    let tokens = random_tokens(&config, 4, 8);
    let a = model.logits(&random_patches(&config, 9), &tokens).unwrap();
    let b = model.logits(&random_patches(&config, 10), &tokens).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-12);

    let ids = tokens.decoder_input();
    let zero = Array2::zeros((config.patch_count(), config.embed_dim));
    let from_zero = model.decode(ids, &zero).unwrap();
    assert!(max_abs_diff(&a, &from_zero) < 1e-12);
}

fn force_output(model: &mut OcrModel, token: usize) {
    zero_param(model, "dec.out.w");
    let id = model.params().find("dec.out.b").unwrap();
    let bias = &mut model.params_mut().get_mut(id).value;
    bias.fill(0.0);
    bias[[0, token]] = 50.0;
}

#[test]
fn forced_token_repeats_until_max_len() {
    let config = ModelConfig::tiny();
    let mut model = OcrModel::new(config.clone(), 11).unwrap();
    force_output(&mut model, 5);
    let g = model.generate(&random_patches(&config, 12), 4).unwrap();
    assert!(g.truncated);
    assert_eq!(g.sequence.ids(), &[1, 5, 5, 5, 5]);

    let g = model.generate(&random_patches(&config, 12), 1000).unwrap();
    assert_eq!(g.sequence.len(), config.max_decode_len + 1);
}

#[test]
fn forced_eos_gives_an_empty_transcript() {
    let config = ModelConfig::tiny();
    let mut model = OcrModel::new(config.clone(), 13).unwrap();
    force_output(&mut model, EOS);
    let g = model
        .generate(&random_patches(&config, 14), config.max_decode_len)
        .unwrap();
    assert!(!g.truncated);
    assert!(g.sequence.content().is_empty());
}

#[test]
fn overfit_model_reproduces_its_training_sample() {
    let config = ModelConfig::tiny();
    let mut model = OcrModel::new(config.clone(), 15).unwrap();
    let patches = random_patches(&config, 16);
    let tokens = random_tokens(&config, 4, 17);
    let cfg = AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::default();
    for _ in 0..300 {
        let (_, grads) = model.batch_grads(&[(&patches, &tokens)]).unwrap();
        adamw_step(model.params_mut(), &grads, &mut state, &cfg).unwrap();
    }
    let g = model.generate(&patches, config.max_decode_len).unwrap();
    assert_eq!(g.sequence, tokens);
}

/// Sums tensor sizes over the whole parameter store.
fn traversal_counts(model: &OcrModel) -> (usize, usize) {
    let mut trainable = 0;
    let mut total = 0;
    for (_, p) in model.params().iter() {
        total += p.value.len();
        if p.trainable {
            trainable += p.value.len();
        }
    }
    (trainable, total)
}

#[test]
fn adapter_counts_follow_the_site_formula() {
    let config = ModelConfig::small();
    let d = config.embed_dim;
    let r = 2;
    for pair in ablation_grid() {
        let mut model = OcrModel::new(config.clone(), 0).unwrap();
        let inventory = model.inject(pair, options(0)).unwrap();
        let counts = model.count_parameters();
        assert_eq!(
            (counts.trainable, counts.total),
            traversal_counts(&model),
            "{pair}"
        );
        if !pair.uses_adapter() {
            continue;
        }
        let adapter_total: usize = model
            .params()
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Adapter && p.trainable)
            .map(|(_, p)| p.value.len())
            .sum();
        let sites = inventory.lora.len() + inventory.dora.len();
        let out_site = usize::from(
            inventory
                .lora
                .iter()
                .chain(&inventory.dora)
                .any(|s| s == "dec.out"),
        );
        let v = config.vocab_size;
        let expected =
            (sites - out_site) * r * (d + d) + out_site * r * (v + d) + inventory.dora.len() * d;
        assert_eq!(adapter_total, expected, "{pair}");
    }
    let mut dlora = OcrModel::new(config, 0).unwrap();
    dlora
        .inject(StrategyPair::dlora(), AdapterOptions::default())
        .unwrap();
    assert!(dlora.count_parameters().ratio_percent < 5.0);
}
