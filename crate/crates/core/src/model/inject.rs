//! Per-component fine-tuning strategies, adapter injection, parameter counts and merging.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::network::{OcrModel, SiteAdapter};
use super::params::{Component, ParamKind};
use crate::adapters::{column_norms, dora_compose, lora_delta_of, LowRankPair};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// How one component (encoder or decoder) is fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    FullFineTune,
    Frozen,
    Lora,
    Dora,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FullFineTune,
        Strategy::Frozen,
        Strategy::Lora,
        Strategy::Dora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FullFineTune => "full_ft",
            Strategy::Frozen => "frozen",
            Strategy::Lora => "lora",
            Strategy::Dora => "dora",
        }
    }

    /// Column label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::FullFineTune => "Fine-Tune",
            Strategy::Frozen => "-",
            Strategy::Lora => "LoRA",
            Strategy::Dora => "DoRA",
        }
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Strategy::Lora | Strategy::Dora)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected full_ft, frozen, lora or dora)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StrategyPair {
    pub encoder: Strategy,
    pub decoder: Strategy,
}

impl StrategyPair {
    pub fn new(encoder: Strategy, decoder: Strategy) -> Self {
        Self { encoder, decoder }
    }

    /// DoRA on the encoder, LoRA on the decoder.
    pub fn dlora() -> Self {
        Self::new(Strategy::Dora, Strategy::Lora)
    }

    pub fn uses_adapter(self) -> bool {
        self.encoder.is_adapter() || self.decoder.is_adapter()
    }

    pub fn for_component(self, component: Component) -> Strategy {
        match component {
            Component::Encoder => self.encoder,
            Component::Decoder => self.decoder,
        }
    }
}

impl fmt::Display for StrategyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.encoder, self.decoder)
    }
}

/// Adapter hyperparameters shared by every wrapped site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterOptions {
    pub rank: usize,
    /// The `s` in `W0 + s B A`.
    pub scale: f64,
    pub magnitude_trainable: bool,
    /// Also wrap the vocabulary projection when the decoder uses an adapter.
    pub adapt_output_projection: bool,
    pub seed: u64,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        Self {
            rank: 2,
            scale: 1.0,
            magnitude_trainable: false,
            adapt_output_projection: false,
            seed: 0,
        }
    }
}

/// Names of the sites wrapped by each adapter kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiteInventory {
    pub lora: Vec<String>,
    pub dora: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
    pub ratio_percent: f64,
}

/// Whether `name` is one of the sites an adapter strategy wraps.
fn is_target(component: Component, name: &str, options: &AdapterOptions) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or("");
    match component {
        Component::Encoder => name.contains(".attn.") && matches!(leaf, "q" | "k" | "v"),
        Component::Decoder => {
            ((name.contains(".self.") || name.contains(".cross."))
                && matches!(leaf, "q" | "k" | "v" | "o"))
                || (name == "dec.out" && options.adapt_output_projection)
        }
    }
}

impl OcrModel {
    /// Applies a strategy to each component.
    ///
    /// `full_ft` leaves the component trainable, `frozen` freezes it, and the
    /// adapter strategies freeze its base tensors and wrap its attention
    /// projections.
    /// On error the model is left unchanged.
    pub fn inject(&mut self, pair: StrategyPair, options: AdapterOptions) -> Result<SiteInventory> {
        let mut work = self.clone();
        let inventory = work.inject_in_place(pair, options)?;
        *self = work;
        Ok(inventory)
    }

    fn inject_in_place(
        &mut self,
        pair: StrategyPair,
        options: AdapterOptions,
    ) -> Result<SiteInventory> {
        if self.strategy.is_some() {
            return Err(Error::State("adapters were already injected".into()));
        }
        if pair.uses_adapter() && (options.scale == 0.0 || !options.scale.is_finite()) {
            return Err(Error::Config(format!(
                "adapter scale must be finite and nonzero, got {}",
                options.scale
            )));
        }
        for (_, p) in self.params.iter_mut() {
            p.trainable = pair.for_component(p.component) == Strategy::FullFineTune;
        }
        let mut inventory = SiteInventory::default();
        let mut planned = Vec::new();
        for (index, (component, site)) in self.sites_mut().into_iter().enumerate() {
            let strategy = pair.for_component(component);
            if strategy.is_adapter() && is_target(component, &site.name, &options) {
                planned.push((index, component, strategy, site.name.clone(), site.weight));
            }
        }
        let mut adapters = Vec::with_capacity(planned.len());
        for (index, component, strategy, name, weight) in planned {
            let base = self.params.get(weight).value.clone();
            let (m, n) = base.dim();
            let pair = LowRankPair::init(
                m,
                n,
                options.rank,
                options.scale,
                derive_seed(options.seed, index as u64),
            )?;
            let a = self.params.add(
                format!("{name}.lora_a"),
                pair.a().clone(),
                component,
                ParamKind::Adapter,
            );
            let b = self.params.add(
                format!("{name}.lora_b"),
                pair.b().clone(),
                component,
                ParamKind::Adapter,
            );
            let adapter = if strategy == Strategy::Dora {
                let norms = column_norms(base.view());
                if let Some(column) = norms.iter().position(|&v| !(v > 0.0)) {
                    return Err(Error::DegenerateWeight { column });
                }
                let magnitude = self.params.add(
                    format!("{name}.magnitude"),
                    norms.insert_axis(ndarray::Axis(0)),
                    component,
                    ParamKind::Adapter,
                );
                self.params.get_mut(magnitude).trainable = options.magnitude_trainable;
                inventory.dora.push(name);
                SiteAdapter::Dora {
                    a,
                    b,
                    magnitude,
                    scale: options.scale,
                }
            } else {
                inventory.lora.push(name);
                SiteAdapter::Lora {
                    a,
                    b,
                    scale: options.scale,
                }
            };
            adapters.push((index, adapter));
        }
        let mut sites = self.sites_mut();
        for (index, adapter) in adapters {
            sites[index].1.adapter = adapter;
        }
        self.strategy = Some((pair, options));
        Ok(inventory)
    }

    /// Exact counts over every stored tensor.
    pub fn count_parameters(&self) -> ParamCounts {
        let (mut trainable, mut total) = (0, 0);
        for (_, p) in self.params.iter() {
            total += p.value.len();
            if p.trainable {
                trainable += p.value.len();
            }
        }
        ParamCounts {
            trainable,
            total,
            ratio_percent: if total == 0 {
                0.0
            } else {
                100.0 * trainable as f64 / total as f64
            },
        }
    }

    /// A dense model whose site weights are the composed adapter weights.
    pub fn merged(&self) -> Result<OcrModel> {
        let has_adapter = self.sites().iter().any(|s| s.adapter != SiteAdapter::Plain);
        if !has_adapter {
            return Err(Error::State("model has no adapters to merge".into()));
        }
        let mut merged = OcrModel::new(self.config.clone(), 0)?;
        for (_, p) in merged.params.iter_mut() {
            let id = self
                .params
                .find(&p.name)
                .ok_or_else(|| Error::State(format!("missing tensor `{}`", p.name)))?;
            let src = self.params.get(id);
            p.value = src.value.clone();
            p.trainable = src.trainable;
        }
        for site in self.sites() {
            let weight: Array2<f64> = match site.adapter {
                SiteAdapter::Plain => continue,
                SiteAdapter::Lora { a, b, scale } => {
                    let base = &self.params.get(site.weight).value;
                    let (pa, pb) = (self.params.get(a), self.params.get(b));
                    let mut w = base.clone();
                    if pb.value.iter().any(|&v| v != 0.0) {
                        w += &lora_delta_of(pb.value.view(), pa.value.view(), scale);
                    }
                    w
                }
                SiteAdapter::Dora {
                    a,
                    b,
                    magnitude,
                    scale,
                } => {
                    dora_compose(
                        self.params.get(site.weight).value.view(),
                        self.params.get(magnitude).value.row(0),
                        self.params.get(b).value.view(),
                        self.params.get(a).value.view(),
                        scale,
                    )?
                    .weight
                }
            };
            let id = merged
                .params
                .find(&format!("{}.w", site.name))
                .expect("merged model has the same sites");
            merged.params.get_mut(id).value = weight;
        }
        Ok(merged)
    }
}
