#![allow(dead_code)]

use ndarray::{Array2, Array3};
use ocr_peft::model::{ModelConfig, OcrModel, ParamKind, TokenSequence, BOS, EOS};
use ocr_peft::rng::SplitMix64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rows: usize, cols: usize, rng: &mut SplitMix64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn random_patches(config: &ModelConfig, seed: u64) -> Array2<f64> {
    let mut rng = SplitMix64::new(seed);
    let img = Array3::from_shape_simple_fn(
        (config.channels, config.image_height, config.image_width),
        || rng.random::<f64>(),
    );
    ocr_peft::model::patchify(img.view(), config.patch_size).unwrap()
}

/// `<bos>`, `len` random content ids, `<eos>`.
pub fn random_tokens(config: &ModelConfig, len: usize, seed: u64) -> TokenSequence {
    let mut rng = SplitMix64::new(seed);
    let mut ids = vec![BOS];
    ids.extend((0..len).map(|_| 4 + rng.below((config.vocab_size - 4) as u64) as usize));
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Moves every adapter tensor away from its initialization so gradient
/// checks exercise nonzero low-rank updates and magnitudes.
pub fn perturb_adapters(model: &mut OcrModel, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for (_, p) in model.params_mut().iter_mut() {
        if p.kind != ParamKind::Adapter {
            continue;
        }
        let (r, c) = p.value.dim();
        let noise = randn(r, c, &mut rng);
        if p.name.ends_with("magnitude") {
            p.value
                .zip_mut_with(&noise, |m, n| *m *= 1.0 + 0.2 * n.tanh());
        } else {
            p.value.zip_mut_with(&noise, |v, n| *v += 0.3 * n);
        }
    }
}

/// Per trainable tensor: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`
/// with central differences of step `h`. The floor covers tensors whose true
/// gradient is zero, such as key biases (softmax is shift invariant).
pub fn gradient_errors(
    model: &OcrModel,
    patches: &Array2<f64>,
    tokens: &TokenSequence,
    h: f64,
) -> Vec<(String, f64)> {
    let (_, grads) = model.batch_grads(&[(patches, tokens)]).unwrap();
    let mut out = Vec::new();
    let mut probe = model.clone();
    for (id, p) in model.params().iter() {
        if !p.trainable {
            assert!(
                grads.get(id).is_none(),
                "frozen tensor {} has a gradient",
                p.name
            );
            continue;
        }
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(p.value.raw_dim()));
        let mut numeric = Array2::<f64>::zeros(p.value.raw_dim());
        for idx in 0..p.value.len() {
            let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
            let orig = p.value[[r, c]];
            probe.params_mut().get_mut(id).value[[r, c]] = orig + h;
            let up = probe.loss(patches, tokens).unwrap();
            probe.params_mut().get_mut(id).value[[r, c]] = orig - h;
            let down = probe.loss(patches, tokens).unwrap();
            probe.params_mut().get_mut(id).value[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(numeric.mapv(|v| v * v).sum().sqrt());
        let rel = diff / scale.max(1e-6);
        out.push((p.name.clone(), rel));
    }
    out
}
