//! Stateless building blocks: patching, softmax, normalization, attention and loss.
//!
//! Sequences are `T × D` matrices with one row per position. Linear maps use
//! the `y = x Wᵀ + b` convention so a weight is stored `out × in`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};

use super::config::Activation;
use super::tokens::PAD;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits a `C × H × W` image into `(H/P)·(W/P)` patches, row-major over the
/// patch grid. Each patch is flattened channel-major, then row, then column.
pub fn patchify(image: ArrayView3<'_, f64>, patch: usize) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {patch}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for py in 0..gh {
        for px in 0..gw {
            let mut row = out.row_mut(py * gw + px);
            let mut k = 0;
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        row[k] = image[[ch, py * patch + y, px * patch + x]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: ArrayView2<'_, f64>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Array3<f64>> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {height}×{width} is not divisible into {patch}-pixel patches"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    if patches.dim() != (gh * gw, channels * patch * patch) {
        return Err(Error::Shape(format!(
            "{:?} patches do not tile a {channels}×{height}×{width} image",
            patches.dim()
        )));
    }
    let mut image = Array3::zeros((channels, height, width));
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut k = 0;
            for ch in 0..channels {
                for y in 0..patch {
                    for x in 0..patch {
                        image[[ch, py * patch + y, px * patch + x]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Row-wise softmax with max subtraction. `-inf` entries get probability 0.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn linear(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: Option<ArrayView1<'_, f64>>,
) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row layer normalization with gain `gamma` and shift `beta`.
pub fn layer_norm(
    x: &Array2<f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *s;
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, NormCache { xhat, inv_std })
}

/// `∂L/∂x` of [`layer_norm`]; `gamma`/`beta` gradients go to the optional sinks.
pub fn layer_norm_backward(
    cache: &NormCache,
    gamma: ArrayView1<'_, f64>,
    dy: &Array2<f64>,
    dgamma: Option<&mut Array2<f64>>,
    dbeta: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    if let Some(dg) = dgamma {
        let mut row = dg.row_mut(0);
        row += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    if let Some(db) = dbeta {
        let mut row = db.row_mut(0);
        row += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * &gamma;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xh) / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &x| *g = s * (*g - mean_g - x * mean_gx));
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activate(kind: Activation, pre: &Array2<f64>) -> Array2<f64> {
    match kind {
        Activation::Relu => pre.mapv(|v| v.max(0.0)),
        Activation::Swish => pre.mapv(|v| v * sigmoid(v)),
    }
}

/// Multiplies `grad` in place by the activation derivative at `pre`.
pub fn activate_backward(kind: Activation, pre: &Array2<f64>, grad: &mut Array2<f64>) {
    match kind {
        Activation::Relu => Zip::from(grad).and(pre).for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        }),
        Activation::Swish => Zip::from(grad).and(pre).for_each(|g, &p| {
            let sg = sigmoid(p);
            *g *= sg * (1.0 + p * (1.0 - sg));
        }),
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// `true` marks a usable key; applies to every query.
    KeyPadding(Vec<bool>),
}

impl Mask {
    fn allows(&self, query: usize, key: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => key <= query,
            Mask::KeyPadding(valid) => valid[key],
        }
    }

    fn validate(&self, tq: usize, tk: usize) -> Result<()> {
        match self {
            Mask::None => Ok(()),
            Mask::Causal if tq > tk => Err(Error::Shape(format!(
                "causal mask needs at least as many keys ({tk}) as queries ({tq})"
            ))),
            Mask::Causal => Ok(()),
            Mask::KeyPadding(valid) if valid.len() != tk => Err(Error::Shape(format!(
                "padding mask has {} entries for {tk} keys",
                valid.len()
            ))),
            Mask::KeyPadding(valid) if !valid.iter().any(|&v| v) => {
                Err(Error::Shape("padding mask hides every key".into()))
            }
            Mask::KeyPadding(_) => Ok(()),
        }
    }
}

/// Borrowed projection weights of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: Option<ArrayView1<'a, f64>>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: Option<ArrayView1<'a, f64>>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: Option<ArrayView1<'a, f64>>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: Option<ArrayView1<'a, f64>>,
    pub heads: usize,
}

/// Owned weights for standalone use of [`multi_head_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn params(&self) -> AttentionParams<'_> {
        AttentionParams {
            wq: self.wq.view(),
            bq: Some(self.bq.view()),
            wk: self.wk.view(),
            bk: Some(self.bk.view()),
            wv: self.wv.view(),
            bv: Some(self.bv.view()),
            wo: self.wo.view(),
            bo: Some(self.bo.view()),
            heads: self.heads,
        }
    }
}

/// Forward values of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub xq: Array2<f64>,
    pub xk: Array2<f64>,
    pub xv: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention weights per head, `Tq × Tk`.
    pub probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the fusion projection.
    pub heads: Array2<f64>,
}

/// Multi-head scaled dot-product attention fused by `W_o`.
///
/// Per head `h`: `softmax(Q_h K_hᵀ / √d_k) V_h` with masked entries set to
/// zero weight; heads are concatenated in order and projected by `W_o`.
pub fn attention_forward(
    xq: &Array2<f64>,
    xk: &Array2<f64>,
    xv: &Array2<f64>,
    p: &AttentionParams<'_>,
    mask: &Mask,
) -> Result<(Array2<f64>, AttentionCache)> {
    let d = p.wq.nrows();
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::Shape(format!(
            "dimension {d} is not divisible into {} heads",
            p.heads
        )));
    }
    let model_dim = p.wq.ncols();
    if xq.ncols() != model_dim || xk.ncols() != p.wk.ncols() || xv.ncols() != p.wv.ncols() {
        return Err(Error::Shape(format!(
            "attention inputs have widths {}, {}, {} but projections expect {}, {}, {}",
            xq.ncols(),
            xk.ncols(),
            xv.ncols(),
            model_dim,
            p.wk.ncols(),
            p.wv.ncols()
        )));
    }
    if xk.nrows() != xv.nrows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            xk.nrows(),
            xv.nrows()
        )));
    }
    let (tq, tk) = (xq.nrows(), xk.nrows());
    mask.validate(tq, tk)?;
    let dk = d / p.heads;
    let temperature = 1.0 / (dk as f64).sqrt();

    let q = linear(xq.view(), p.wq, p.bq);
    let k = linear(xk.view(), p.wk, p.bk);
    let v = linear(xv.view(), p.wv, p.bv);
    let mut heads = Array2::zeros((tq, d));
    let mut probs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * temperature);
        if *mask != Mask::None {
            for ((i, j), x) in scores.indexed_iter_mut() {
                if !mask.allows(i, j) {
                    *x = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut scores);
        heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = linear(heads.view(), p.wo, p.bo);
    Ok((
        out,
        AttentionCache {
            xq: xq.clone(),
            xk: xk.clone(),
            xv: xv.clone(),
            q,
            k,
            v,
            probs,
            heads,
        },
    ))
}

/// Attention over explicit query, key and value sequences.
pub fn multi_head_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    weights: &AttentionWeights,
    mask: &Mask,
) -> Result<Array2<f64>> {
    attention_forward(queries, keys, values, &weights.params(), mask).map(|(out, _)| out)
}

/// Gradients flowing out of an attention block.
pub struct AttentionInputGrads {
    pub dxq: Array2<f64>,
    pub dxk: Array2<f64>,
    pub dxv: Array2<f64>,
    /// `∂L/∂Q`, `∂L/∂K`, `∂L/∂V` after the projections.
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    pub dv: Array2<f64>,
    /// `∂L/∂(concatenated heads)`.
    pub dheads: Array2<f64>,
}

/// Backward of [`attention_forward`] down to the projected `Q`, `K`, `V` and
/// the block inputs. Weight gradients are left to the caller, which has the
/// cached inputs and the returned projection gradients.
pub fn attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams<'_>,
    dout: &Array2<f64>,
) -> AttentionInputGrads {
    let d = p.wq.nrows();
    let dk_width = d / p.heads;
    let temperature = 1.0 / (dk_width as f64).sqrt();
    let dheads = dout.dot(&p.wo);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dk_width..(h + 1) * dk_width];
        let dhead = dheads.slice(cols);
        let dprobs = dhead.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dhead));
        // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
        let mut dscores = dprobs;
        for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let dot = drow.dot(&prow);
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|g, &pr| *g = pr * (*g - dot) * temperature);
        }
        dq.slice_mut(cols)
            .assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols)
            .assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    AttentionInputGrads {
        dxq: dq.dot(&p.wq),
        dxk: dk.dot(&p.wk),
        dxv: dv.dot(&p.wv),
        dq,
        dk,
        dv,
        dheads,
    }
}

/// Mean over non-`<pad>` positions of `−log softmax(logits)[target]`, and its
/// gradient with respect to the logits.
pub fn nll_loss_with_grad(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (t, vocab) = logits.dim();
    if targets.len() != t {
        return Err(Error::Shape(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    let counted = targets.iter().filter(|&&id| id != PAD).count();
    if counted == 0 {
        return Err(Error::EmptyLoss);
    }
    let norm = 1.0 / counted as f64;
    let mut grad = Array2::zeros((t, vocab));
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        if target == PAD {
            continue;
        }
        if target >= vocab {
            return Err(Error::Vocabulary {
                id: target,
                vocab_size: vocab,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[target];
        let mut g = grad.row_mut(i);
        Zip::from(&mut g)
            .and(&row)
            .for_each(|g, &v| *g = (v - log_z).exp() * norm);
        g[target] -= norm;
    }
    Ok((total * norm, grad))
}

pub fn nll_loss(logits: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    nll_loss_with_grad(logits, targets).map(|(loss, _)| loss)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
