//! One-layer transformer with one-hot embeddings, uniform causal attention
//! and a Euclidean layer-norm.
//!
//! For a prefix `z_1..z_t` the residual at position `t` is
//!
//! ```text
//! v = e_{z_t} + p_t + (1/t) Σ_s W (e_{z_s} + p_s)
//! ```
//!
//! and the logits are the unembedding coordinates of `v / ‖v‖`. Predicted
//! probabilities are `softmax(β · logits)`.

mod population;
mod structured;
mod train;

pub use population::{population_loss_and_grad, population_loss_and_grad_mc, McEstimate, PopulationEstimate};
pub use structured::{build_structured_w, fit_structured, BlockReport, StructuredCoeffs, StructuredFit};
pub use train::{minibatch_sgd_train, sequential_training, SequentialIterates, SgdConfig, Snapshot};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::datagen::WorldSpec;
use crate::error::{Error, Result};

/// Default cap on `N` for exact population enumeration.
pub const DEFAULT_MAX_ENUMERATION_N: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneHotConfig {
    pub n: usize,
    /// Softmax inverse temperature applied to the normalized logits.
    pub beta: f64,
    /// When false the `p_t` terms are dropped from both the residual and the
    /// attended inputs.
    pub positional: bool,
    pub max_enumeration_n: usize,
}

impl OneHotConfig {
    /// `β = √d` with positional embeddings.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be positive"));
        }
        Ok(OneHotConfig {
            n,
            beta: ((4 * n + 3) as f64).sqrt(),
            positional: true,
            max_enumeration_n: DEFAULT_MAX_ENUMERATION_N,
        })
    }

    /// Plain Euclidean normalization (`β = 1`) without positional
    /// embeddings; the variant used for the three-step gradient analysis.
    pub fn euclidean_without_positions(n: usize) -> Result<Self> {
        Ok(OneHotConfig {
            beta: 1.0,
            positional: false,
            ..Self::new(n)?
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid("beta", format!("{beta} must be positive and finite")));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn with_max_enumeration_n(mut self, limit: usize) -> Self {
        self.max_enumeration_n = limit;
        self
    }

    pub fn layout(&self) -> Layout {
        Layout { n: self.n }
    }

    pub fn d(&self) -> usize {
        4 * self.n + 3
    }

    pub(crate) fn check_world(&self, world: &WorldSpec) -> Result<()> {
        if world.n_subjects != self.n || world.n_attributes != self.n {
            return Err(Error::invalid(
                "world",
                format!(
                    "toy model with N = {} needs {0} subjects and {0} attributes, got {} and {}",
                    self.n, world.n_subjects, world.n_attributes
                ),
            ));
        }
        if !world.is_bijective() {
            return Err(Error::NonBijective("toy worlds need a bijective g".into()));
        }
        Ok(())
    }
}

/// Index layout of the `d = 4N + 3` dimensional residual stream.
///
/// Tokens `z ∈ 0..2N` are subjects (`z < N`) or attributes (`z ≥ N`).
/// `e_z` lives at index `z`, `p_t` (t = 1..=3) at `2N + t - 1`, and the
/// unembedding coordinate `u_z` at `2N + 3 + z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn d(&self) -> usize {
        4 * self.n + 3
    }

    pub fn vocab(&self) -> usize {
        2 * self.n
    }

    pub fn e(&self, token: usize) -> usize {
        debug_assert!(token < 2 * self.n);
        token
    }

    pub fn p(&self, position: usize) -> usize {
        debug_assert!((1..=3).contains(&position));
        2 * self.n + position - 1
    }

    pub fn u(&self, token: usize) -> usize {
        debug_assert!(token < 2 * self.n);
        2 * self.n + 3 + token
    }

    /// Named index ranges, used by matrix export sidecars.
    pub fn named_ranges(&self) -> Vec<(&'static str, usize, usize)> {
        let n = self.n;
        vec![
            ("e_subject", 0, n),
            ("e_attribute", n, 2 * n),
            ("positional", 2 * n, 2 * n + 3),
            ("u_subject", 2 * n + 3, 3 * n + 3),
            ("u_attribute", 3 * n + 3, 4 * n + 3),
        ]
    }
}

/// Dense `d × d` value matrix, indexed `[row, column]` so that `W e_j` is
/// column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix(pub Array2<f64>);

impl ValueMatrix {
    pub fn zeros(d: usize) -> Self {
        ValueMatrix(Array2::zeros((d, d)))
    }

    pub fn d(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ToyForward {
    pub pre_norm: Array1<f64>,
    pub post_norm: Array1<f64>,
    pub norm: f64,
    /// `2N` unembedding coordinates of the post-norm residual (before β).
    pub logits: Array1<f64>,
}

impl ToyForward {
    pub fn probabilities(&self, beta: f64) -> Array1<f64> {
        softmax_scaled(&self.logits, beta)
    }
}

/// Sparse attended input `Σ_s (e_{z_s} + p_s)` as sorted `(column, count)`.
pub(crate) fn attended_columns(config: &OneHotConfig, prefix: &[usize]) -> Vec<(usize, f64)> {
    let layout = config.layout();
    let mut cols: Vec<(usize, f64)> = Vec::with_capacity(2 * prefix.len());
    let mut push = |c: usize| match cols.iter_mut().find(|(j, _)| *j == c) {
        Some((_, k)) => *k += 1.0,
        None => cols.push((c, 1.0)),
    };
    for (s, &z) in prefix.iter().enumerate() {
        push(layout.e(z));
        if config.positional {
            push(layout.p(s + 1));
        }
    }
    cols.sort_by_key(|&(j, _)| j);
    cols
}

/// Pre-norm residual at the last position of `prefix`.
///
/// Each coordinate of `W h` is accumulated over columns in ascending order,
/// so coordinates fed by the same multiset of entries are bitwise equal.
pub(crate) fn residual(config: &OneHotConfig, w: &ValueMatrix, prefix: &[usize]) -> (Array1<f64>, Vec<(usize, f64)>) {
    let layout = config.layout();
    let t = prefix.len();
    let cols = attended_columns(config, prefix);
    let mut attn = Array1::<f64>::zeros(layout.d());
    for &(j, count) in &cols {
        let col = w.0.column(j);
        if count == 1.0 {
            attn += &col;
        } else {
            attn.scaled_add(count, &col);
        }
    }
    let mut v = attn / t as f64;
    v[layout.e(prefix[t - 1])] += 1.0;
    if config.positional {
        v[layout.p(t)] += 1.0;
    }
    (v, cols)
}

pub(crate) fn check_prefix(config: &OneHotConfig, prefix: &[usize]) -> Result<()> {
    if prefix.is_empty() || prefix.len() > 3 {
        return Err(Error::invalid("prefix", format!("length {} not in 1..=3", prefix.len())));
    }
    if let Some(&bad) = prefix.iter().find(|&&z| z >= 2 * config.n) {
        return Err(Error::invalid("prefix", format!("token {bad} outside 0..{}", 2 * config.n)));
    }
    Ok(())
}

pub fn forward_logits(config: &OneHotConfig, w: &ValueMatrix, prefix: &[usize]) -> Result<ToyForward> {
    check_prefix(config, prefix)?;
    if w.d() != config.d() {
        return Err(Error::invalid("W", format!("is {}×{}, expected d = {}", w.d(), w.d(), config.d())));
    }
    let (pre_norm, _) = residual(config, w, prefix);
    let norm = pre_norm.dot(&pre_norm).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateNorm(format!("prefix {prefix:?}")));
    }
    let post_norm = &pre_norm / norm;
    let layout = config.layout();
    let logits = Array1::from_iter((0..layout.vocab()).map(|z| post_norm[layout.u(z)]));
    Ok(ToyForward {
        pre_norm,
        post_norm,
        norm,
        logits,
    })
}

/// `softmax(β · logits)`, max-shifted.
pub fn softmax_scaled(logits: &Array1<f64>, beta: f64) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|l| (beta * (l - max)).exp());
    let total = p.sum();
    p /= total;
    p
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A toy model bundled for probing: one layer, sites at token `y` and `x'`.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: OneHotConfig,
    pub w: ValueMatrix,
}

impl crate::probes::ProbedModel for ToyModel {
    fn n_layers(&self) -> usize {
        1
    }

    fn vocab_size(&self) -> usize {
        2 * self.config.n
    }

    fn hidden(&self, sequences: &[[usize; 4]], site: crate::probes::ProbeSite) -> Result<Array2<f64>> {
        if site.layer != 0 {
            return Err(Error::invalid("site.layer", "the toy model has a single layer"));
        }
        let end = site.position.index() + 1;
        let mut out = Array2::zeros((sequences.len(), self.config.d()));
        for (row, seq) in out.rows_mut().into_iter().zip(sequences) {
            let fwd = forward_logits(&self.config, &self.w, &seq[..end])?;
            let v = match site.stage {
                crate::probes::Stage::PreNorm => fwd.pre_norm,
                crate::probes::Stage::PostNorm => fwd.post_norm,
            };
            v.assign_to(row);
        }
        Ok(out)
    }

    fn next_token_probs(&self, sequences: &[[usize; 4]], position: usize) -> Result<Array2<f64>> {
        if position > 2 {
            return Err(Error::invalid("position", format!("{position} has no next token")));
        }
        let mut out = Array2::zeros((sequences.len(), 2 * self.config.n));
        for (row, seq) in out.rows_mut().into_iter().zip(sequences) {
            let fwd = forward_logits(&self.config, &self.w, &seq[..=position])?;
            fwd.probabilities(self.config.beta).assign_to(row);
        }
        Ok(out)
    }
}
