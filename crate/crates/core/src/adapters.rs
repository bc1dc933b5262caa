//! LoRA and DoRA weight parameterizations.
//!
//! Shapes follow the `y = W x` convention: a wrapped weight is `m × n`
//! (`m` outputs, `n` inputs), `B` is `m × r`, `A` is `r × n`.
//!
//! - LoRA: `W = W0 + s · B A`
//! - DoRA: `W = u ⊙ V' / ‖V'‖_c` with `V' = W0 + s · B A`, where `‖·‖_c` is the
//!   vector of column norms and `u ⊙ M` scales column `j` of `M` by `u[j]`.
//!   `u` starts as `‖W0‖_c`, so a fresh adapter reproduces `W0` exactly.
//!
//! The free functions ([`lora_delta_of`], [`dora_compose`], [`dora_backward`])
//! work on borrowed views and are what the model calls per training step; the
//! owned [`LowRankPair`] / [`DoraState`] types wrap them for standalone use.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::rng::SplitMix64;
use crate::{Error, Result};

/// LoRA factors `B` (`m × r`) and `A` (`r × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    a: Array2<f64>,
    b: Array2<f64>,
    rank: usize,
    scale: f64,
    merged: bool,
}

impl LowRankPair {
    /// `B = 0`, `A ~ N(0, 1/r)` from a seeded generator.
    pub fn init(m: usize, n: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        check_rank(m, n, rank)?;
        let mut rng = SplitMix64::new(seed);
        let std = 1.0 / (rank as f64).sqrt();
        let a = Array2::from_shape_simple_fn((rank, n), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        Ok(Self {
            a,
            b: Array2::zeros((m, rank)),
            rank,
            scale,
            merged: false,
        })
    }

    pub fn from_factors(b: Array2<f64>, a: Array2<f64>, scale: f64) -> Result<Self> {
        let (m, rank) = b.dim();
        let (ra, n) = a.dim();
        if ra != rank {
            return Err(Error::Shape(format!(
                "B is {m}×{rank} but A is {ra}×{n}; inner dimensions differ"
            )));
        }
        check_rank(m, n, rank)?;
        Ok(Self {
            a,
            b,
            rank,
            scale,
            merged: false,
        })
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Array2<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Array2<f64> {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `(m, n)` of the weight this pair adapts.
    pub fn target_dim(&self) -> (usize, usize) {
        (self.b.nrows(), self.a.ncols())
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `s · B A`.
    pub fn delta(&self) -> Array2<f64> {
        lora_delta_of(self.b.view(), self.a.view(), self.scale)
    }

    pub fn trainable_count(&self) -> usize {
        let (m, n) = self.target_dim();
        self.rank * (m + n)
    }

    /// Gradients of `A` and `B` given `∂L/∂W` for `W = W0 + s B A`.
    pub fn gradients(&self, upstream: ArrayView2<'_, f64>) -> Result<AdapterGradients> {
        check_upstream(self.target_dim(), upstream)?;
        let (grad_a, grad_b) =
            low_rank_factor_grads(self.b.view(), self.a.view(), self.scale, upstream);
        Ok(AdapterGradients {
            grad_a,
            grad_b,
            grad_magnitude: None,
        })
    }
}

/// A DoRA-wrapped weight: frozen base, per-column magnitude and a LoRA
/// update of the direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DoraState {
    base: Array2<f64>,
    magnitude: Array1<f64>,
    delta: LowRankPair,
    magnitude_trainable: bool,
    merged: bool,
}

impl DoraState {
    pub fn init(
        base: Array2<f64>,
        rank: usize,
        seed: u64,
        magnitude_trainable: bool,
    ) -> Result<Self> {
        Self::init_scaled(base, rank, 1.0, seed, magnitude_trainable)
    }

    pub fn init_scaled(
        base: Array2<f64>,
        rank: usize,
        scale: f64,
        seed: u64,
        magnitude_trainable: bool,
    ) -> Result<Self> {
        let (m, n) = base.dim();
        let magnitude = column_norms(base.view());
        if let Some(column) = magnitude.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::DegenerateWeight { column });
        }
        let delta = LowRankPair::init(m, n, rank, scale, seed)?;
        Ok(Self {
            base,
            magnitude,
            delta,
            magnitude_trainable,
            merged: false,
        })
    }

    pub fn from_parts(
        base: Array2<f64>,
        magnitude: Array1<f64>,
        delta: LowRankPair,
        magnitude_trainable: bool,
    ) -> Result<Self> {
        if delta.target_dim() != base.dim() || magnitude.len() != base.ncols() {
            return Err(Error::Shape(format!(
                "DoRA parts disagree: base {:?}, magnitude {}, delta {:?}",
                base.dim(),
                magnitude.len(),
                delta.target_dim()
            )));
        }
        if let Some(column) = magnitude.iter().position(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::DegenerateWeight { column });
        }
        Ok(Self {
            base,
            magnitude,
            delta,
            magnitude_trainable,
            merged: false,
        })
    }

    pub fn base(&self) -> &Array2<f64> {
        &self.base
    }

    pub fn magnitude(&self) -> &Array1<f64> {
        &self.magnitude
    }

    pub fn magnitude_mut(&mut self) -> &mut Array1<f64> {
        &mut self.magnitude
    }

    pub fn delta(&self) -> &LowRankPair {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut LowRankPair {
        &mut self.delta
    }

    pub fn magnitude_trainable(&self) -> bool {
        self.magnitude_trainable
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn effective_weight(&self) -> Result<Array2<f64>> {
        Ok(self.compose()?.weight)
    }

    fn compose(&self) -> Result<DoraForward> {
        dora_compose(
            self.base.view(),
            self.magnitude.view(),
            self.delta.b.view(),
            self.delta.a.view(),
            self.delta.scale,
        )
    }

    pub fn gradients(&self, upstream: ArrayView2<'_, f64>) -> Result<AdapterGradients> {
        check_upstream(self.base.dim(), upstream)?;
        let forward = self.compose()?;
        Ok(dora_backward(
            &forward,
            self.delta.b.view(),
            self.delta.a.view(),
            self.delta.scale,
            upstream,
            self.magnitude_trainable,
        ))
    }

    pub fn trainable_count(&self) -> usize {
        self.delta.trainable_count()
            + if self.magnitude_trainable {
                self.magnitude.len()
            } else {
                0
            }
    }
}

/// Gradients for one adapter; shapes mirror the adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_magnitude: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LowRankPair),
    Dora(DoraState),
}

impl Adapter {
    pub fn is_merged(&self) -> bool {
        match self {
            Adapter::Lora(p) => p.merged,
            Adapter::Dora(d) => d.merged,
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            Adapter::Lora(p) => p.trainable_count(),
            Adapter::Dora(d) => d.trainable_count(),
        }
    }
}

/// Collapses `adapter` onto `base` and marks the adapter consumed.
///
/// For DoRA the passed `base` plays the role of `W0` in the direction
/// `W0 + s B A`; it must have the adapter's shape.
pub fn merge_adapter(base: &Array2<f64>, adapter: &mut Adapter) -> Result<Array2<f64>> {
    if adapter.is_merged() {
        return Err(Error::State("adapter has already been merged".into()));
    }
    let merged = match adapter {
        Adapter::Lora(pair) => {
            if pair.target_dim() != base.dim() {
                return Err(Error::Shape(format!(
                    "LoRA adapter targets {:?} but base is {:?}",
                    pair.target_dim(),
                    base.dim()
                )));
            }
            adapted_direction(base.view(), pair.b.view(), pair.a.view(), pair.scale)
        }
        Adapter::Dora(state) => {
            if state.base.dim() != base.dim() {
                return Err(Error::Shape(format!(
                    "DoRA adapter targets {:?} but base is {:?}",
                    state.base.dim(),
                    base.dim()
                )));
            }
            dora_compose(
                base.view(),
                state.magnitude.view(),
                state.delta.b.view(),
                state.delta.a.view(),
                state.delta.scale,
            )?
            .weight
        }
    };
    match adapter {
        Adapter::Lora(p) => p.merged = true,
        Adapter::Dora(d) => d.merged = true,
    }
    Ok(merged)
}

/// Euclidean norm of every column.
pub fn column_norms(w: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut sums = Array1::<f64>::zeros(w.ncols());
    for row in w.axis_iter(Axis(0)) {
        Zip::from(&mut sums).and(&row).for_each(|s, &x| *s += x * x);
    }
    sums.mapv_inplace(f64::sqrt);
    sums
}

/// `s · B A`.
pub fn lora_delta_of(b: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let mut delta = b.dot(&a);
    if scale != 1.0 {
        delta.mapv_inplace(|v| v * scale);
    }
    delta
}

/// `W0 + s · B A`, returning `W0` untouched (bitwise) while `B` is all zero.
pub fn adapted_direction(
    base: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    scale: f64,
) -> Array2<f64> {
    let mut out = base.to_owned();
    if scale != 0.0 && b.iter().any(|&v| v != 0.0) {
        out += &lora_delta_of(b, a, scale);
    }
    out
}

/// Forward values of a DoRA composition, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DoraForward {
    /// `u ⊙ V'/‖V'‖_c`.
    pub weight: Array2<f64>,
    /// `V' / ‖V'‖_c`.
    pub unit_direction: Array2<f64>,
    /// `‖V'‖_c`.
    pub direction_norms: Array1<f64>,
    /// `u / ‖V'‖_c`.
    pub column_gain: Array1<f64>,
}

pub fn dora_compose(
    base: ArrayView2<'_, f64>,
    magnitude: ArrayView1<'_, f64>,
    b: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    scale: f64,
) -> Result<DoraForward> {
    if magnitude.len() != base.ncols() {
        return Err(Error::Shape(format!(
            "magnitude has {} entries for a weight with {} columns",
            magnitude.len(),
            base.ncols()
        )));
    }
    let direction = adapted_direction(base, b, a, scale);
    let norms = column_norms(direction.view());
    if let Some(column) = norms.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NormalizationSingularity { column });
    }
    // When u[j] == ‖V'_j‖ bitwise the gain is exactly 1 and W_j == V'_j.
    let gain = Zip::from(&magnitude)
        .and(&norms)
        .map_collect(|&u, &norm| u / norm);
    let mut weight = direction.clone();
    weight
        .axis_iter_mut(Axis(0))
        .for_each(|mut row| row *= &gain);
    let mut unit_direction = direction;
    unit_direction
        .axis_iter_mut(Axis(0))
        .for_each(|mut row| row /= &norms);
    Ok(DoraForward {
        weight,
        unit_direction,
        direction_norms: norms,
        column_gain: gain,
    })
}

/// Backpropagates `∂L/∂W` through a DoRA composition.
///
/// Per column `j`, with `v̂_j = V'_j / ‖V'_j‖`:
///
/// ```text
/// ∂L/∂V'_j = (u_j / ‖V'_j‖) (I − v̂_j v̂_jᵀ) ∂L/∂W_j
/// ∂L/∂u_j  = v̂_jᵀ ∂L/∂W_j
/// ∇_A = s Bᵀ ∂L/∂V',   ∇_B = s ∂L/∂V' Aᵀ
/// ```
pub fn dora_backward(
    forward: &DoraForward,
    b: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    scale: f64,
    upstream: ArrayView2<'_, f64>,
    want_magnitude: bool,
) -> AdapterGradients {
    let direction_grad = dora_direction_grad(forward, upstream);
    let (grad_a, grad_b) = low_rank_factor_grads(b, a, scale, direction_grad.view());
    let grad_magnitude = want_magnitude.then(|| {
        let mut g = Array1::<f64>::zeros(upstream.ncols());
        Zip::from(upstream.rows())
            .and(forward.unit_direction.rows())
            .for_each(|up, dir| {
                Zip::from(&mut g)
                    .and(&up)
                    .and(&dir)
                    .for_each(|g, &u, &d| *g += u * d);
            });
        g
    });
    AdapterGradients {
        grad_a,
        grad_b,
        grad_magnitude,
    }
}

/// `∂L/∂V'` for a DoRA composition.
pub fn dora_direction_grad(forward: &DoraForward, upstream: ArrayView2<'_, f64>) -> Array2<f64> {
    let unit = &forward.unit_direction;
    // projection[j] = v̂_jᵀ g_j
    let mut projection = Array1::<f64>::zeros(upstream.ncols());
    Zip::from(upstream.rows())
        .and(unit.rows())
        .for_each(|up, dir| {
            Zip::from(&mut projection)
                .and(&up)
                .and(&dir)
                .for_each(|p, &u, &d| *p += u * d);
        });
    let mut out = Array2::<f64>::zeros(upstream.raw_dim());
    Zip::from(out.rows_mut())
        .and(upstream.rows())
        .and(unit.rows())
        .for_each(|mut o, up, dir| {
            Zip::from(&mut o)
                .and(&up)
                .and(&dir)
                .and(&projection)
                .and(&forward.column_gain)
                .for_each(|o, &u, &d, &p, &c| *o = c * (u - d * p));
        });
    out
}

/// `(s Bᵀ G, s G Aᵀ)` for `W = W0 + s B A` and `G = ∂L/∂W`.
pub fn low_rank_factor_grads(
    b: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    scale: f64,
    upstream: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut grad_a = b.t().dot(&upstream);
    let mut grad_b = upstream.dot(&a.t());
    if scale != 1.0 {
        grad_a.mapv_inplace(|v| v * scale);
        grad_b.mapv_inplace(|v| v * scale);
    }
    (grad_a, grad_b)
}

fn check_rank(m: usize, n: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > m.min(n) {
        return Err(Error::Config(format!(
            "rank {rank} is outside [1, min(m, n)] for a {m}×{n} weight"
        )));
    }
    Ok(())
}

fn check_upstream(dim: (usize, usize), upstream: ArrayView2<'_, f64>) -> Result<()> {
    if upstream.dim() != dim {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?} but the adapted weight is {:?}",
            upstream.dim(),
            dim
        )));
    }
    Ok(())
}
