//! The encoder-decoder network, its forward passes and the matching backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::inject::{AdapterOptions, StrategyPair};
use super::ops::{
    activate, activate_backward, argmax, attention_backward, attention_forward, layer_norm,
    layer_norm_backward, linear, nll_loss_with_grad, patchify, AttentionCache, AttentionParams,
    Mask, NormCache,
};
use super::params::{Component, Grads, ParamId, ParamKind, ParamStore};
use super::tokens::{TokenSequence, BOS, EOS};
use crate::adapters::{
    dora_compose, dora_direction_grad, lora_delta_of, low_rank_factor_grads, DoraForward,
};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// What wraps a weight site.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteAdapter {
    Plain,
    /// `W = W0 + s B A`.
    Lora {
        a: ParamId,
        b: ParamId,
        scale: f64,
    },
    /// `W = m ⊙ (W0 + s B A) / ‖W0 + s B A‖_c`.
    Dora {
        a: ParamId,
        b: ParamId,
        magnitude: ParamId,
        scale: f64,
    },
}

/// A linear map `y = x Wᵀ + b` whose weight may carry an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: SiteAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Site,
    pub k: Site,
    pub v: Site,
    pub o: Site,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Site,
    pub down: Site,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross_attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

/// Post-norm ViT-style encoder with an autoregressive character decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) patch_embed: Site,
    pub(crate) enc_pos: ParamId,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) tok_emb: ParamId,
    pub(crate) dec_pos: ParamId,
    pub(crate) decoder: Vec<DecoderLayer>,
    pub(crate) output: Site,
    pub(crate) strategy: Option<(StrategyPair, AdapterOptions)>,
}

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// `<bos>`, the generated ids, and `<eos>` when one was produced.
    pub sequence: TokenSequence,
    /// True when `max_len` was reached without `<eos>`.
    pub truncated: bool,
}

struct Builder {
    params: ParamStore,
    rng: SplitMix64,
    component: Component,
}

impl Builder {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || {
            std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        self.params
            .add(name, value, self.component, ParamKind::Base)
    }

    fn constant(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.params.add(
            name,
            Array2::from_elem((1, cols), v),
            self.component,
            ParamKind::Base,
        )
    }

    fn site(&mut self, name: &str, out: usize, inp: usize, bias: bool) -> Site {
        let weight = self.normal(format!("{name}.w"), out, inp, 1.0 / (inp as f64).sqrt());
        let bias = bias.then(|| self.constant(format!("{name}.b"), out, 0.0));
        Site {
            name: name.to_string(),
            weight,
            bias,
            adapter: SiteAdapter::Plain,
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.site(&format!("{prefix}.q"), d, d, true),
            k: self.site(&format!("{prefix}.k"), d, d, true),
            v: self.site(&format!("{prefix}.v"), d, d, true),
            o: self.site(&format!("{prefix}.o"), d, d, true),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{prefix}.gamma"), d, 1.0),
            beta: self.constant(format!("{prefix}.beta"), d, 0.0),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.site(&format!("{prefix}.up"), hidden, d, true),
            down: self.site(&format!("{prefix}.down"), d, hidden, true),
        }
    }
}

/// Effective weights for one parameter snapshot, plus which tensors need gradients.
///
/// Adapted sites are composed once here so a batch of forward and backward
/// passes share the same dense matrices.
#[derive(Debug, Clone)]
pub struct Effective {
    lora: Vec<Option<Array2<f64>>>,
    dora: Vec<Option<DoraForward>>,
    wants: Vec<bool>,
    encoder_wants: bool,
}

impl Effective {
    fn weight<'a>(&'a self, params: &'a ParamStore, id: ParamId) -> ArrayView2<'a, f64> {
        if let Some(w) = &self.lora[id.0] {
            w.view()
        } else if let Some(d) = &self.dora[id.0] {
            d.weight.view()
        } else {
            params.get(id).value.view()
        }
    }

    fn wants(&self, id: ParamId) -> bool {
        self.wants[id.0]
    }
}

struct EncoderLayerCache {
    attn: AttentionCache,
    norm1: NormCache,
    h1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    norm2: NormCache,
}

struct EncoderCache {
    patches: Array2<f64>,
    layers: Vec<EncoderLayerCache>,
}

struct DecoderLayerCache {
    self_attn: AttentionCache,
    norm1: NormCache,
    cross_attn: AttentionCache,
    norm2: NormCache,
    x2: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    norm3: NormCache,
}

struct DecoderCache {
    ids: Vec<usize>,
    layers: Vec<DecoderLayerCache>,
    last: Array2<f64>,
}

impl OcrModel {
    /// Randomly initialized model: weights `N(0, 1/fan_in)`, zero biases,
    /// unit norm gains, small embeddings.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut b = Builder {
            params: ParamStore::default(),
            rng: SplitMix64::new(seed),
            component: Component::Encoder,
        };
        let patch_embed = b.site("enc.patch", d, config.patch_dim(), true);
        let enc_pos = b.normal("enc.pos".into(), config.patch_count(), d, 0.3);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer {
                attn: b.attention(&format!("enc.{l}.attn"), d),
                norm1: b.norm(&format!("enc.{l}.norm1"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
                norm2: b.norm(&format!("enc.{l}.norm2"), d),
            })
            .collect();
        b.component = Component::Decoder;
        let tok_emb = b.normal("dec.tok".into(), config.vocab_size, d, 0.5);
        let dec_pos = b.normal("dec.pos".into(), config.decoder_positions(), d, 0.3);
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer {
                self_attn: b.attention(&format!("dec.{l}.self"), d),
                norm1: b.norm(&format!("dec.{l}.norm1"), d),
                cross_attn: b.attention(&format!("dec.{l}.cross"), d),
                norm2: b.norm(&format!("dec.{l}.norm2"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
                norm3: b.norm(&format!("dec.{l}.norm3"), d),
            })
            .collect();
        let output = b.site("dec.out", config.vocab_size, d, true);
        Ok(Self {
            config,
            params: b.params,
            patch_embed,
            enc_pos,
            encoder,
            tok_emb,
            dec_pos,
            decoder,
            output,
            strategy: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn strategy(&self) -> Option<&(StrategyPair, AdapterOptions)> {
        self.strategy.as_ref()
    }

    pub fn output_site(&self) -> &Site {
        &self.output
    }

    /// Every weight site in construction order.
    pub fn sites(&self) -> Vec<&Site> {
        let mut out = vec![&self.patch_embed];
        for layer in &self.encoder {
            out.extend(attention_sites(&layer.attn));
            out.extend([&layer.ffn.up, &layer.ffn.down]);
        }
        for layer in &self.decoder {
            out.extend(attention_sites(&layer.self_attn));
            out.extend(attention_sites(&layer.cross_attn));
            out.extend([&layer.ffn.up, &layer.ffn.down]);
        }
        out.push(&self.output);
        out
    }

    pub(crate) fn sites_mut(&mut self) -> Vec<(Component, &mut Site)> {
        let mut out = vec![(Component::Encoder, &mut self.patch_embed)];
        for layer in &mut self.encoder {
            let a = &mut layer.attn;
            for s in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                out.push((Component::Encoder, s));
            }
            out.push((Component::Encoder, &mut layer.ffn.up));
            out.push((Component::Encoder, &mut layer.ffn.down));
        }
        for layer in &mut self.decoder {
            let (sa, ca) = (&mut layer.self_attn, &mut layer.cross_attn);
            for s in [&mut sa.q, &mut sa.k, &mut sa.v, &mut sa.o] {
                out.push((Component::Decoder, s));
            }
            for s in [&mut ca.q, &mut ca.k, &mut ca.v, &mut ca.o] {
                out.push((Component::Decoder, s));
            }
            out.push((Component::Decoder, &mut layer.ffn.up));
            out.push((Component::Decoder, &mut layer.ffn.down));
        }
        out.push((Component::Decoder, &mut self.output));
        out
    }

    /// Composes every adapted site into a dense weight.
    pub fn materialize(&self) -> Result<Effective> {
        let n = self.params.len();
        let mut lora = vec![None; n];
        let mut dora = vec![None; n];
        let mut wants: Vec<bool> = self.params.iter().map(|(_, p)| p.trainable).collect();
        for site in self.sites() {
            let base = self.params.get(site.weight).value.view();
            match site.adapter {
                SiteAdapter::Plain => {}
                SiteAdapter::Lora { a, b, scale } => {
                    let (pa, pb) = (self.params.get(a), self.params.get(b));
                    let mut w = base.to_owned();
                    if pb.value.iter().any(|&v| v != 0.0) {
                        w += &lora_delta_of(pb.value.view(), pa.value.view(), scale);
                    }
                    lora[site.weight.0] = Some(w);
                    wants[site.weight.0] |= pa.trainable || pb.trainable;
                }
                SiteAdapter::Dora {
                    a,
                    b,
                    magnitude,
                    scale,
                } => {
                    let (pa, pb, pm) = (
                        self.params.get(a),
                        self.params.get(b),
                        self.params.get(magnitude),
                    );
                    let fwd = dora_compose(
                        base,
                        pm.value.row(0),
                        pb.value.view(),
                        pa.value.view(),
                        scale,
                    )?;
                    dora[site.weight.0] = Some(fwd);
                    wants[site.weight.0] |= pa.trainable || pb.trainable || pm.trainable;
                }
            }
        }
        let encoder_wants = self
            .params
            .iter()
            .any(|(id, p)| p.component == Component::Encoder && wants[id.0]);
        Ok(Effective {
            lora,
            dora,
            wants,
            encoder_wants,
        })
    }

    fn check_patches(&self, patches: &Array2<f64>) -> Result<()> {
        let want = (self.config.patch_count(), self.config.patch_dim());
        if patches.dim() != want {
            return Err(Error::Shape(format!(
                "expected {want:?} patches, got {:?}",
                patches.dim()
            )));
        }
        Ok(())
    }

    /// Patches a `C × H × W` image for [`OcrModel::encode`].
    pub fn patches_of(&self, image: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let c = &self.config;
        if image.dim() != (c.channels, c.image_height, c.image_width) {
            return Err(Error::Shape(format!(
                "image is {:?}, model expects {:?}",
                image.dim(),
                (c.channels, c.image_height, c.image_width)
            )));
        }
        patchify(image, c.patch_size)
    }

    fn site_linear(&self, eff: &Effective, site: &Site, x: &Array2<f64>) -> Array2<f64> {
        let b = site.bias.map(|b| self.params.get(b).value.row(0));
        linear(x.view(), eff.weight(&self.params, site.weight), b)
    }

    fn attention_params<'a>(&'a self, eff: &'a Effective, at: &Attention) -> AttentionParams<'a> {
        let bias = |s: &Site| s.bias.map(|b| self.params.get(b).value.row(0));
        AttentionParams {
            wq: eff.weight(&self.params, at.q.weight),
            bq: bias(&at.q),
            wk: eff.weight(&self.params, at.k.weight),
            bk: bias(&at.k),
            wv: eff.weight(&self.params, at.v.weight),
            bv: bias(&at.v),
            wo: eff.weight(&self.params, at.o.weight),
            bo: bias(&at.o),
            heads: self.config.head_count,
        }
    }

    fn norm(&self, n: &Norm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        layer_norm(
            x,
            self.params.get(n.gamma).value.row(0),
            self.params.get(n.beta).value.row(0),
        )
    }

    fn encode_cached(
        &self,
        eff: &Effective,
        patches: &Array2<f64>,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        self.check_patches(patches)?;
        let mut h = self.site_linear(eff, &self.patch_embed, patches);
        h += &self.params.get(self.enc_pos).value;
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let p = self.attention_params(eff, &layer.attn);
            let (a, attn) = attention_forward(&h, &h, &h, &p, &Mask::None)?;
            let (h1, norm1) = self.norm(&layer.norm1, &(h + a));
            let ffn_pre = self.site_linear(eff, &layer.ffn.up, &h1);
            let ffn_act = activate(self.config.activation, &ffn_pre);
            let f = self.site_linear(eff, &layer.ffn.down, &ffn_act);
            let (h2, norm2) = self.norm(&layer.norm2, &(&h1 + &f));
            layers.push(EncoderLayerCache {
                attn,
                norm1,
                h1,
                ffn_pre,
                ffn_act,
                norm2,
            });
            h = h2;
        }
        Ok((
            h,
            EncoderCache {
                patches: patches.clone(),
                layers,
            },
        ))
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if ids.is_empty() || ids.len() > self.config.decoder_positions() {
            return Err(Error::Shape(format!(
                "decoder input of length {} is outside 1..={}",
                ids.len(),
                self.config.decoder_positions()
            )));
        }
        Ok(())
    }

    fn decode_cached(
        &self,
        eff: &Effective,
        ids: &[usize],
        memory: &Array2<f64>,
    ) -> Result<(Array2<f64>, DecoderCache)> {
        self.check_tokens(ids)?;
        if memory.ncols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "memory width {} does not match embed_dim {}",
                memory.ncols(),
                self.config.embed_dim
            )));
        }
        let t = ids.len();
        let emb = &self.params.get(self.tok_emb).value;
        let mut x = self
            .params
            .get(self.dec_pos)
            .value
            .slice(s![..t, ..])
            .to_owned();
        for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
            row += &emb.row(id);
        }
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let p = self.attention_params(eff, &layer.self_attn);
            let (a, self_attn) = attention_forward(&x, &x, &x, &p, &Mask::Causal)?;
            let (x1, norm1) = self.norm(&layer.norm1, &(x + a));
            let p = self.attention_params(eff, &layer.cross_attn);
            let (c, cross_attn) = attention_forward(&x1, memory, memory, &p, &Mask::None)?;
            let (x2, norm2) = self.norm(&layer.norm2, &(x1 + c));
            let ffn_pre = self.site_linear(eff, &layer.ffn.up, &x2);
            let ffn_act = activate(self.config.activation, &ffn_pre);
            let f = self.site_linear(eff, &layer.ffn.down, &ffn_act);
            let (x3, norm3) = self.norm(&layer.norm3, &(&x2 + &f));
            layers.push(DecoderLayerCache {
                self_attn,
                norm1,
                cross_attn,
                norm2,
                x2,
                ffn_pre,
                ffn_act,
                norm3,
            });
            x = x3;
        }
        let logits = self.site_linear(eff, &self.output, &x);
        Ok((
            logits,
            DecoderCache {
                ids: ids.to_vec(),
                layers,
                last: x,
            },
        ))
    }

    /// Encoder memory (`N × D`) for one patch sequence.
    pub fn encode_with(&self, eff: &Effective, patches: &Array2<f64>) -> Result<Array2<f64>> {
        self.encode_cached(eff, patches).map(|(m, _)| m)
    }

    /// Vocabulary logits (`T × V`) for a decoder input given encoder memory.
    pub fn decode_with(
        &self,
        eff: &Effective,
        ids: &[usize],
        memory: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.decode_cached(eff, ids, memory).map(|(l, _)| l)
    }

    pub fn encode(&self, patches: &Array2<f64>) -> Result<Array2<f64>> {
        self.encode_with(&self.materialize()?, patches)
    }

    pub fn decode(&self, ids: &[usize], memory: &Array2<f64>) -> Result<Array2<f64>> {
        self.decode_with(&self.materialize()?, ids, memory)
    }

    /// Teacher-forced logits for a full target sequence.
    pub fn logits(&self, patches: &Array2<f64>, tokens: &TokenSequence) -> Result<Array2<f64>> {
        let eff = self.materialize()?;
        let memory = self.encode_with(&eff, patches)?;
        self.decode_with(&eff, tokens.decoder_input(), &memory)
    }

    pub fn loss(&self, patches: &Array2<f64>, tokens: &TokenSequence) -> Result<f64> {
        let logits = self.logits(patches, tokens)?;
        super::ops::nll_loss(&logits, tokens.targets())
    }

    /// Greedy decoding from `<bos>`; `max_len` is capped at `max_decode_len`.
    pub fn generate_with(
        &self,
        eff: &Effective,
        patches: &Array2<f64>,
        max_len: usize,
    ) -> Result<Generation> {
        let memory = self.encode_with(eff, patches)?;
        let max_len = max_len.min(self.config.max_decode_len);
        let mut ids = vec![BOS];
        while ids.len() <= max_len {
            let logits = self.decode_with(eff, &ids, &memory)?;
            let next = argmax(logits.row(ids.len() - 1));
            ids.push(next);
            if next == EOS {
                return Ok(Generation {
                    sequence: TokenSequence::new(ids),
                    truncated: false,
                });
            }
        }
        Ok(Generation {
            sequence: TokenSequence::new(ids),
            truncated: true,
        })
    }

    pub fn generate(&self, patches: &Array2<f64>, max_len: usize) -> Result<Generation> {
        self.generate_with(&self.materialize()?, patches, max_len)
    }

    /// Adds `weight · ∂loss/∂θ` for one sample to `grads` and returns the loss.
    ///
    /// Adapted sites receive the gradient of their effective weight in the
    /// base-weight slot; [`OcrModel::finish_grads`] turns those into factor
    /// and magnitude gradients once per batch.
    pub fn accumulate_grads(
        &self,
        eff: &Effective,
        patches: &Array2<f64>,
        tokens: &TokenSequence,
        weight: f64,
        grads: &mut Grads,
    ) -> Result<f64> {
        let (memory, enc_cache) = self.encode_cached(eff, patches)?;
        let (logits, dec_cache) = self.decode_cached(eff, tokens.decoder_input(), &memory)?;
        let (loss, mut dlogits) = nll_loss_with_grad(&logits, tokens.targets())?;
        if weight != 1.0 {
            dlogits.mapv_inplace(|v| v * weight);
        }
        let dmemory = self.decoder_backward(eff, &dec_cache, &memory, &dlogits, grads);
        if eff.encoder_wants {
            self.encoder_backward(eff, &enc_cache, dmemory, grads);
        }
        Ok(loss)
    }

    /// Converts effective-weight gradients of adapted sites into gradients of
    /// their trainable tensors and drops slots of frozen tensors.
    pub fn finish_grads(&self, eff: &Effective, grads: &mut Grads) {
        for site in self.sites() {
            let Some(g) = grads.take(site.weight) else {
                continue;
            };
            let base_trainable = self.params.get(site.weight).trainable;
            match site.adapter {
                SiteAdapter::Plain => {
                    if base_trainable {
                        grads.set(site.weight, g);
                    }
                }
                SiteAdapter::Lora { a, b, scale } => {
                    let (pa, pb) = (self.params.get(a), self.params.get(b));
                    let (ga, gb) =
                        low_rank_factor_grads(pb.value.view(), pa.value.view(), scale, g.view());
                    if pa.trainable {
                        add_grad(grads, a, ga);
                    }
                    if pb.trainable {
                        add_grad(grads, b, gb);
                    }
                    if base_trainable {
                        grads.set(site.weight, g);
                    }
                }
                SiteAdapter::Dora {
                    a,
                    b,
                    magnitude,
                    scale,
                } => {
                    let fwd = eff.dora[site.weight.0]
                        .as_ref()
                        .expect("dora site was materialized");
                    let (pa, pb) = (self.params.get(a), self.params.get(b));
                    if self.params.get(magnitude).trainable {
                        let mut gm = Array2::zeros((1, g.ncols()));
                        for (row, dir) in g.rows().into_iter().zip(fwd.unit_direction.rows()) {
                            let mut acc = gm.row_mut(0);
                            acc.scaled_add(1.0, &(&row * &dir));
                        }
                        add_grad(grads, magnitude, gm);
                    }
                    let dv = dora_direction_grad(fwd, g.view());
                    let (ga, gb) =
                        low_rank_factor_grads(pb.value.view(), pa.value.view(), scale, dv.view());
                    if pa.trainable {
                        add_grad(grads, a, ga);
                    }
                    if pb.trainable {
                        add_grad(grads, b, gb);
                    }
                    if base_trainable {
                        grads.set(site.weight, dv);
                    }
                }
            }
        }
    }

    /// Loss and full parameter gradients for a batch, each sample weighted equally.
    pub fn batch_grads(&self, batch: &[(&Array2<f64>, &TokenSequence)]) -> Result<(f64, Grads)> {
        let eff = self.materialize()?;
        let mut grads = Grads::new(self.params.len());
        let w = 1.0 / batch.len().max(1) as f64;
        let mut total = 0.0;
        for (patches, tokens) in batch {
            total += w * self.accumulate_grads(&eff, patches, tokens, w, &mut grads)?;
        }
        self.finish_grads(&eff, &mut grads);
        Ok((total, grads))
    }

    fn linear_backward(
        &self,
        eff: &Effective,
        site: &Site,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        self.linear_param_grads(eff, site, x, dy, grads);
        dy.dot(&eff.weight(&self.params, site.weight))
    }

    fn linear_param_grads(
        &self,
        eff: &Effective,
        site: &Site,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut Grads,
    ) {
        if eff.wants(site.weight) {
            let slot = grads.slot(site.weight, (dy.ncols(), x.ncols()));
            general_mat_mul(1.0, &dy.t(), x, 1.0, slot);
        }
        if let Some(b) = site.bias {
            if eff.wants(b) {
                let mut row = grads.slot(b, (1, dy.ncols())).row_mut(0);
                row += &dy.sum_axis(Axis(0));
            }
        }
    }

    /// Returns `(∂/∂queries, ∂/∂keys + ∂/∂values)` for an attention block.
    fn attention_backward(
        &self,
        eff: &Effective,
        at: &Attention,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        grads: &mut Grads,
    ) -> (Array2<f64>, Array2<f64>) {
        let p = self.attention_params(eff, at);
        let g = attention_backward(cache, &p, dout);
        self.linear_param_grads(eff, &at.o, &cache.heads, dout, grads);
        self.linear_param_grads(eff, &at.q, &cache.xq, &g.dq, grads);
        self.linear_param_grads(eff, &at.k, &cache.xk, &g.dk, grads);
        self.linear_param_grads(eff, &at.v, &cache.xv, &g.dv, grads);
        (g.dxq, g.dxk + &g.dxv)
    }

    fn norm_backward(
        &self,
        eff: &Effective,
        n: &Norm,
        cache: &NormCache,
        dy: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let d = dy.ncols();
        let gamma = self.params.get(n.gamma).value.row(0);
        let mut dg = eff
            .wants(n.gamma)
            .then(|| grads.take(n.gamma).unwrap_or_else(|| Array2::zeros((1, d))));
        let mut db = eff
            .wants(n.beta)
            .then(|| grads.take(n.beta).unwrap_or_else(|| Array2::zeros((1, d))));
        let dx = layer_norm_backward(cache, gamma, dy, dg.as_mut(), db.as_mut());
        if let Some(dg) = dg {
            grads.set(n.gamma, dg);
        }
        if let Some(db) = db {
            grads.set(n.beta, db);
        }
        dx
    }

    fn ffn_backward(
        &self,
        eff: &Effective,
        ffn: &FeedForward,
        input: &Array2<f64>,
        pre: &Array2<f64>,
        act: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let mut dact = self.linear_backward(eff, &ffn.down, act, dy, grads);
        activate_backward(self.config.activation, pre, &mut dact);
        self.linear_backward(eff, &ffn.up, input, &dact, grads)
    }

    fn decoder_backward(
        &self,
        eff: &Effective,
        cache: &DecoderCache,
        memory: &Array2<f64>,
        dlogits: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let mut dx = self.linear_backward(eff, &self.output, &cache.last, dlogits, grads);
        let mut dmemory = Array2::zeros(memory.raw_dim());
        for (layer, lc) in self.decoder.iter().zip(&cache.layers).rev() {
            let dr3 = self.norm_backward(eff, &layer.norm3, &lc.norm3, &dx, grads);
            let dx2 = &dr3
                + &self.ffn_backward(
                    eff,
                    &layer.ffn,
                    &lc.x2,
                    &lc.ffn_pre,
                    &lc.ffn_act,
                    &dr3,
                    grads,
                );
            let dr2 = self.norm_backward(eff, &layer.norm2, &lc.norm2, &dx2, grads);
            let (dq, dkv) =
                self.attention_backward(eff, &layer.cross_attn, &lc.cross_attn, &dr2, grads);
            dmemory += &dkv;
            let dx1 = dr2 + dq;
            let dr1 = self.norm_backward(eff, &layer.norm1, &lc.norm1, &dx1, grads);
            let (dq, dkv) =
                self.attention_backward(eff, &layer.self_attn, &lc.self_attn, &dr1, grads);
            dx = dr1 + dq + dkv;
        }
        let t = cache.ids.len();
        if eff.wants(self.dec_pos) {
            let shape = self.params.get(self.dec_pos).value.dim();
            let mut rows = grads.slot(self.dec_pos, shape).slice_mut(s![..t, ..]);
            rows += &dx;
        }
        if eff.wants(self.tok_emb) {
            let shape = self.params.get(self.tok_emb).value.dim();
            let slot = grads.slot(self.tok_emb, shape);
            for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
                let mut target = slot.row_mut(id);
                target += &row;
            }
        }
        dmemory
    }

    fn encoder_backward(
        &self,
        eff: &Effective,
        cache: &EncoderCache,
        dmemory: Array2<f64>,
        grads: &mut Grads,
    ) {
        let mut dh = dmemory;
        for (layer, lc) in self.encoder.iter().zip(&cache.layers).rev() {
            let dr2 = self.norm_backward(eff, &layer.norm2, &lc.norm2, &dh, grads);
            let dh1 = &dr2
                + &self.ffn_backward(
                    eff,
                    &layer.ffn,
                    &lc.h1,
                    &lc.ffn_pre,
                    &lc.ffn_act,
                    &dr2,
                    grads,
                );
            let dr1 = self.norm_backward(eff, &layer.norm1, &lc.norm1, &dh1, grads);
            let (dq, dkv) = self.attention_backward(eff, &layer.attn, &lc.attn, &dr1, grads);
            dh = dr1 + dq + dkv;
        }
        if eff.wants(self.enc_pos) {
            let shape = self.params.get(self.enc_pos).value.dim();
            *grads.slot(self.enc_pos, shape) += &dh;
        }
        self.linear_param_grads(eff, &self.patch_embed, &cache.patches, &dh, grads);
    }
}

fn attention_sites(at: &Attention) -> [&Site; 4] {
    [&at.q, &at.k, &at.v, &at.o]
}

fn add_grad(grads: &mut Grads, id: ParamId, g: Array2<f64>) {
    match grads.take(id) {
        Some(mut acc) => {
            acc += &g;
            grads.set(id, acc);
        }
        None => grads.set(id, g),
    }
}
