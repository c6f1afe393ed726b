//! Attention-only transformer with dense embeddings, trained end to end.
//!
//! Row-vector convention throughout: a batch of `B` sequences is a
//! `(4B) × d` matrix, row `4b + t` holding position `t` of sequence `b`.
//!
//! ```text
//! X⁰ = E[tokens] + P
//! Xᵏ = RMSNorm(Xᵏ⁻¹ + softmax_causal(Q Kᵀ/√d) V W_O),  Q,K,V = Xᵏ⁻¹ W_{Q,K,V}
//! logits = Xˡ W_out + b_out
//! RMSNorm(v) = √d · v / √(‖v‖² + d·ε)
//! ```

use ndarray::{s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{make_balanced_probe_set, sample_batch, WorldSpec};
use crate::error::{check_probability, Error, Result};
use crate::probes::{
    detect_onset_index, false_sequence_confidence, fit_logistic_probe, memorization_rate, ActivationSet,
    ProbeSettings, ProbeSite, ProbedModel, Stage, TokenPosition,
};
use crate::rng::{self, Stream};

pub const SEQ_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_subjects: usize,
    pub n_attributes: usize,
    pub rho: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_batches: usize,
    /// Metric and checkpoint cadence in batches.
    pub metric_every: usize,
    /// Size of the held-out balanced evaluation set.
    pub eval_size: usize,
    pub seed: u64,
    pub embeddings_trainable: bool,
    pub norm_epsilon: f64,
    pub init_std: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    #[serde(default)]
    pub probe: ProbeSettings,
}

impl DenseConfig {
    /// Reduced setting: one layer, d = 64, 128 subjects and attributes.
    pub fn ci() -> Self {
        DenseConfig {
            layers: 1,
            d_model: 64,
            n_subjects: 128,
            n_attributes: 128,
            rho: 0.95,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 128,
            total_batches: 20_000,
            metric_every: 250,
            eval_size: 1024,
            seed: 0,
            embeddings_trainable: true,
            norm_epsilon: 1e-6,
            init_std: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            probe: ProbeSettings::default(),
        }
    }

    /// Full setting: one layer, d = 256, 512 subjects and attributes.
    pub fn full() -> Self {
        DenseConfig {
            d_model: 256,
            n_subjects: 512,
            n_attributes: 512,
            rho: 0.99,
            total_batches: 50_000,
            metric_every: 500,
            eval_size: 4096,
            ..Self::ci()
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_subjects + self.n_attributes
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("n_subjects", self.n_subjects),
            ("n_attributes", self.n_attributes),
            ("batch_size", self.batch_size),
            ("metric_every", self.metric_every),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        check_probability("rho", self.rho)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if self.eval_size < 8 || !self.eval_size.is_multiple_of(2) {
            return Err(Error::invalid("eval_size", "must be even and at least 8"));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::invalid("norm_epsilon", "must be positive"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid("init_std", "must be finite and non-negative"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon", "must be positive"));
        }
        self.probe.validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => Error::InvalidParameter {
                name: format!("probe.{name}"),
                reason,
            },
            other => other,
        })
    }

    pub fn world(&self) -> Result<WorldSpec> {
        WorldSpec::random(self.n_subjects, self.n_attributes, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// Token embeddings, `V × d`.
    pub embed: Array2<f64>,
    /// Positional embeddings, `4 × d`.
    pub pos: Array2<f64>,
    pub layers: Vec<AttentionParams>,
    /// Output projection, `d × V`.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl DenseParams {
    pub fn zeros(layers: usize, d: usize, vocab: usize) -> Self {
        let sq = || Array2::zeros((d, d));
        DenseParams {
            embed: Array2::zeros((vocab, d)),
            pos: Array2::zeros((SEQ_LEN, d)),
            layers: (0..layers)
                .map(|_| AttentionParams {
                    w_q: sq(),
                    w_k: sq(),
                    w_v: sq(),
                    w_o: sq(),
                })
                .collect(),
            w_out: Array2::zeros((d, vocab)),
            b_out: Array1::zeros(vocab),
        }
    }

    /// I.i.d. `N(0, init_std²)` for every matrix, zero output bias.
    pub fn init(config: &DenseConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config.layers, config.d_model, config.vocab_size());
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid("init_std", e.to_string()))?;
        let mut rng = rng::stream(config.seed, Stream::Init);
        for (name, mut t) in params.tensors_mut() {
            if name != "b_out" {
                t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        Ok(params)
    }

    pub fn d_model(&self) -> usize {
        self.embed.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("embed".to_string(), self.embed.view().into_dyn())];
        out.push(("pos".into(), self.pos.view().into_dyn()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_q"), l.w_q.view().into_dyn()));
            out.push((format!("layer{i}.w_k"), l.w_k.view().into_dyn()));
            out.push((format!("layer{i}.w_v"), l.w_v.view().into_dyn()));
            out.push((format!("layer{i}.w_o"), l.w_o.view().into_dyn()));
        }
        out.push(("w_out".into(), self.w_out.view().into_dyn()));
        out.push(("b_out".into(), self.b_out.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![("embed".to_string(), self.embed.view_mut().into_dyn())];
        out.push(("pos".into(), self.pos.view_mut().into_dyn()));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_q"), l.w_q.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_k"), l.w_k.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_v"), l.w_v.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_o"), l.w_o.view_mut().into_dyn()));
        }
        out.push(("w_out".into(), self.w_out.view_mut().into_dyn()));
        out.push(("b_out".into(), self.b_out.view_mut().into_dyn()));
        out
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layers.len(), self.d_model(), self.vocab_size())
    }
}

/// Cached intermediates of one layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights, `B × 4 × 4`, row = query position.
    pub attention: Array3<f64>,
    mixed: Array2<f64>,
    pub pre_norm: Array2<f64>,
    /// Per-row `√d / √(‖v‖² + dε)`.
    scale: Array1<f64>,
    /// Per-row `‖v‖² + dε`.
    denom: Array1<f64>,
    pub post_norm: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseForward {
    /// `B × 4 × V`.
    pub logits: Array3<f64>,
    pub layers: Vec<LayerCache>,
    tokens: Vec<usize>,
}

impl DenseForward {
    pub fn batch_size(&self) -> usize {
        self.logits.dim().0
    }

    /// Residual rows at one position, `B × d`.
    pub fn site(&self, layer: usize, position: usize, stage: Stage) -> Array2<f64> {
        let m = match stage {
            Stage::PreNorm => &self.layers[layer].pre_norm,
            Stage::PostNorm => &self.layers[layer].post_norm,
        };
        m.slice(s![position..;SEQ_LEN, ..]).to_owned()
    }

    /// Softmax over the vocabulary at one position, `B × V`.
    pub fn probs_at(&self, position: usize) -> Array2<f64> {
        let mut p = self.logits.index_axis(Axis(1), position).to_owned();
        for mut row in p.rows_mut() {
            softmax_inplace(row.as_slice_mut().expect("contiguous"));
        }
        p
    }
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn flatten_tokens(sequences: &[[usize; 4]], vocab: usize) -> Result<Vec<usize>> {
    if sequences.is_empty() {
        return Err(Error::Empty("batch has no sequences".into()));
    }
    let tokens: Vec<usize> = sequences.iter().flatten().copied().collect();
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::invalid("tokens", format!("token {bad} outside vocabulary of {vocab}")));
    }
    Ok(tokens)
}

pub fn dense_forward(params: &DenseParams, sequences: &[[usize; 4]], norm_epsilon: f64) -> Result<DenseForward> {
    let vocab = params.vocab_size();
    let tokens = flatten_tokens(sequences, vocab)?;
    let b = sequences.len();
    let d = params.d_model();
    let rows = b * SEQ_LEN;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let sqrt_d = (d as f64).sqrt();

    let mut x = Array2::<f64>::zeros((rows, d));
    for (r, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&params.embed.row(tok));
        row += &params.pos.row(r % SEQ_LEN);
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let q = x.dot(&lp.w_q);
        let k = x.dot(&lp.w_k);
        let v = x.dot(&lp.w_v);
        let mut attention = Array3::<f64>::zeros((b, SEQ_LEN, SEQ_LEN));
        let mut mixed = Array2::<f64>::zeros((rows, d));
        for seq in 0..b {
            let base = seq * SEQ_LEN;
            for i in 0..SEQ_LEN {
                let qi = q.row(base + i);
                let mut w = [0.0; SEQ_LEN];
                for (j, wj) in w.iter_mut().enumerate().take(i + 1) {
                    *wj = qi.dot(&k.row(base + j)) * inv_sqrt_d;
                }
                softmax_inplace(&mut w[..=i]);
                let mut out = mixed.row_mut(base + i);
                for j in 0..=i {
                    attention[[seq, i, j]] = w[j];
                    out.scaled_add(w[j], &v.row(base + j));
                }
            }
        }
        let pre_norm = &x + &mixed.dot(&lp.w_o);
        let mut scale = Array1::<f64>::zeros(rows);
        let mut denom = Array1::<f64>::zeros(rows);
        let mut post_norm = pre_norm.clone();
        for r in 0..rows {
            let row = pre_norm.row(r);
            denom[r] = row.dot(&row) + d as f64 * norm_epsilon;
            scale[r] = sqrt_d / denom[r].sqrt();
            post_norm.row_mut(r).mapv_inplace(|v| v * scale[r]);
        }
        let next = post_norm.clone();
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, next),
            q,
            k,
            v,
            attention,
            mixed,
            pre_norm,
            scale,
            denom,
            post_norm,
        });
    }

    let logits = (x.dot(&params.w_out) + &params.b_out)
        .into_shape_with_order((b, SEQ_LEN, vocab))
        .expect("row-major reshape");
    Ok(DenseForward { logits, layers, tokens })
}

/// Mean next-token cross-entropy over positions 1..3 and the gradient of
/// every parameter tensor.
pub fn dense_loss_and_grads(
    params: &DenseParams,
    sequences: &[[usize; 4]],
    norm_epsilon: f64,
) -> Result<(f64, DenseParams)> {
    let fwd = dense_forward(params, sequences, norm_epsilon)?;
    let (loss, grads) = backward(params, &fwd)?;
    Ok((loss, grads))
}

fn backward(params: &DenseParams, fwd: &DenseForward) -> Result<(f64, DenseParams)> {
    let b = fwd.batch_size();
    let d = params.d_model();
    let vocab = params.vocab_size();
    let rows = b * SEQ_LEN;
    let count = (b * (SEQ_LEN - 1)) as f64;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // dℓ/dlogits = (softmax − onehot)/count at positions 0..2.
    let mut loss = 0.0;
    let mut dlogits = Array2::<f64>::zeros((rows, vocab));
    for seq in 0..b {
        for t in 0..SEQ_LEN - 1 {
            let r = seq * SEQ_LEN + t;
            let target = fwd.tokens[r + 1];
            let mut row = dlogits.row_mut(r);
            row.assign(&fwd.logits.slice(s![seq, t, ..]));
            let slice = row.as_slice_mut().expect("contiguous");
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + slice.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss -= slice[target] - lse;
            for v in slice.iter_mut() {
                *v = (*v - lse).exp() / count;
            }
            slice[target] -= 1.0 / count;
        }
    }
    loss /= count;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            step: 0,
        });
    }

    let mut grads = params.zeros_like();
    let last = fwd.layers.last().map(|c| &c.post_norm);
    let x_final = match last {
        Some(x) => x.clone(),
        None => embed_input(params, &fwd.tokens),
    };
    grads.w_out = x_final.t().dot(&dlogits);
    grads.b_out = dlogits.sum_axis(Axis(0));
    let mut dx = dlogits.dot(&params.w_out.t());

    for (li, (lp, cache)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        // RMSNorm: dv = s·(dy − v (v·dy)/(‖v‖² + dε))
        let mut dpre = Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            let v = cache.pre_norm.row(r);
            let dy = dx.row(r);
            let coef = v.dot(&dy) / cache.denom[r];
            let mut out = dpre.row_mut(r);
            out.assign(&dy);
            out.scaled_add(-coef, &v);
            out.mapv_inplace(|e| e * cache.scale[r]);
        }
        let g = &mut grads.layers[li];
        g.w_o = cache.mixed.t().dot(&dpre);
        let dmixed = dpre.dot(&lp.w_o.t());

        let mut dq = Array2::<f64>::zeros((rows, d));
        let mut dk = Array2::<f64>::zeros((rows, d));
        let mut dv = Array2::<f64>::zeros((rows, d));
        for seq in 0..b {
            let base = seq * SEQ_LEN;
            for i in 0..SEQ_LEN {
                let dh = dmixed.row(base + i);
                let mut dp = [0.0; SEQ_LEN];
                let mut dot = 0.0;
                for j in 0..=i {
                    let p = cache.attention[[seq, i, j]];
                    dp[j] = dh.dot(&cache.v.row(base + j));
                    dot += dp[j] * p;
                    dv.row_mut(base + j).scaled_add(p, &dh);
                }
                for j in 0..=i {
                    let ds = cache.attention[[seq, i, j]] * (dp[j] - dot) * inv_sqrt_d;
                    if ds != 0.0 {
                        dq.row_mut(base + i).scaled_add(ds, &cache.k.row(base + j));
                        dk.row_mut(base + j).scaled_add(ds, &cache.q.row(base + i));
                    }
                }
            }
        }
        g.w_q = cache.input.t().dot(&dq);
        g.w_k = cache.input.t().dot(&dk);
        g.w_v = cache.input.t().dot(&dv);
        dx = dpre + dq.dot(&lp.w_q.t()) + dk.dot(&lp.w_k.t()) + dv.dot(&lp.w_v.t());
    }

    for (r, &tok) in fwd.tokens.iter().enumerate() {
        let row = dx.row(r);
        grads.embed.row_mut(tok).scaled_add(1.0, &row);
        grads.pos.row_mut(r % SEQ_LEN).scaled_add(1.0, &row);
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            what: format!("gradient of {name}"),
            step: 0,
        });
    }
    Ok((loss, grads))
}

fn embed_input(params: &DenseParams, tokens: &[usize]) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((tokens.len(), params.d_model()));
    for (r, &tok) in tokens.iter().enumerate() {
        x.row_mut(r).assign(&(&params.embed.row(tok) + &params.pos.row(r % SEQ_LEN)));
    }
    x
}

/// Adam with weight decay decoupled from the moment estimates:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: DenseParams,
    v: DenseParams,
    step: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamW {
    pub fn new(params: &DenseParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One update; tensors whose name is in `frozen` are left untouched.
    pub fn update(&mut self, params: &mut DenseParams, grads: &DenseParams, lr: f64, weight_decay: f64, frozen: &[&str]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let iter = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in iter {
            if frozen.contains(&name.as_str()) {
                continue;
            }
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            });
        }
    }
}

/// Dense model bundled with its normalization epsilon for probing.
#[derive(Debug, Clone, Copy)]
pub struct DenseModel<'a> {
    pub params: &'a DenseParams,
    pub norm_epsilon: f64,
}

impl ProbedModel for DenseModel<'_> {
    fn n_layers(&self) -> usize {
        self.params.layers.len()
    }

    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn hidden(&self, sequences: &[[usize; 4]], site: ProbeSite) -> Result<Array2<f64>> {
        if site.layer >= self.n_layers() {
            return Err(Error::invalid("site.layer", format!("layer {} out of range", site.layer)));
        }
        let fwd = dense_forward(self.params, sequences, self.norm_epsilon)?;
        Ok(fwd.site(site.layer, site.position.index(), site.stage))
    }

    fn next_token_probs(&self, sequences: &[[usize; 4]], position: usize) -> Result<Array2<f64>> {
        if position >= SEQ_LEN - 1 {
            return Err(Error::invalid("position", format!("{position} has no next token")));
        }
        Ok(dense_forward(self.params, sequences, self.norm_epsilon)?.probs_at(position))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Next-token loss on a held-out ρ-distributed batch.
    pub lm_loss: f64,
    pub memorization: f64,
    pub p_true_on_false: f64,
    pub entropy_false: f64,
    /// Probe AUC per site, in the order of [`TrainTrace::sites`].
    pub auc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub sites: Vec<ProbeSite>,
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn steps(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.step).collect()
    }

    pub fn auc_series(&self, site: ProbeSite) -> Option<Vec<f64>> {
        let idx = self.sites.iter().position(|s| *s == site)?;
        Some(self.rows.iter().map(|r| r.auc[idx]).collect())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let f: fn(&TraceRow) -> f64 = match name {
            "lm_loss" => |r| r.lm_loss,
            "memorization" => |r| r.memorization,
            "p_true_on_false" => |r| r.p_true_on_false,
            "entropy_false" => |r| r.entropy_false,
            _ => return None,
        };
        Some(self.rows.iter().map(f).collect())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "lm_loss", "memorization", "p_true_on_false", "entropy_false"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.sites.iter().map(|s| format!("auc_{}", s.label())));
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![
                r.step.to_string(),
                r.lm_loss.to_string(),
                r.memorization.to_string(),
                r.p_true_on_false.to_string(),
                r.entropy_false.to_string(),
            ];
            fields.extend(r.auc.iter().map(|a| a.to_string()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Thresholds for ordering the two phases of a training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnsetCriteria {
    pub memorization: f64,
    pub auc: f64,
    pub persistence: usize,
}

impl Default for OnsetCriteria {
    fn default() -> Self {
        OnsetCriteria {
            memorization: 0.99,
            auc: 0.9,
            persistence: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    /// Probe site whose AUC defines the second phase.
    pub site: String,
    pub memorization_onset: Option<usize>,
    pub auc_onset: Option<usize>,
    /// Mean `p_true_on_false` over the `persistence` checkpoints starting at
    /// each onset.
    pub p_true_on_false_at_memorization: Option<f64>,
    pub p_true_on_false_at_auc: Option<f64>,
    /// Relative decrease between the two windows.
    pub p_true_on_false_drop: Option<f64>,
}

impl PhaseSummary {
    pub fn ordered(&self) -> bool {
        matches!((self.memorization_onset, self.auc_onset), (Some(m), Some(a)) if m < a)
    }
}

impl TrainTrace {
    /// Main site: last layer, post-norm, token x′.
    pub fn main_site(&self) -> Option<ProbeSite> {
        let last = self.sites.iter().map(|s| s.layer).max()?;
        Some(ProbeSite::new(last, TokenPosition::XPrime, Stage::PostNorm))
    }

    pub fn phase_summary(&self, criteria: &OnsetCriteria) -> Result<PhaseSummary> {
        let site = self.main_site().ok_or_else(|| Error::Empty("trace has no probe sites".into()))?;
        let auc = self
            .auc_series(site)
            .ok_or_else(|| Error::Empty(format!("trace lacks site {}", site.label())))?;
        let memorization = self.column("memorization").expect("known column");
        let ptf = self.column("p_true_on_false").expect("known column");
        let persistence = criteria.persistence.max(1);
        let mem_idx = detect_onset_index(&memorization, criteria.memorization, persistence);
        let auc_idx = detect_onset_index(&auc, criteria.auc, persistence);
        let window = |i: usize| ptf[i..(i + persistence).min(ptf.len())].iter().sum::<f64>() / persistence as f64;
        let before = mem_idx.map(window);
        let after = auc_idx.map(window);
        let drop = match (before, after) {
            (Some(b), Some(a)) if b > 0.0 => Some(1.0 - a / b),
            _ => None,
        };
        let steps = self.steps();
        Ok(PhaseSummary {
            site: site.label(),
            memorization_onset: mem_idx.map(|i| steps[i]),
            auc_onset: auc_idx.map(|i| steps[i]),
            p_true_on_false_at_memorization: before,
            p_true_on_false_at_auc: after,
            p_true_on_false_drop: drop,
        })
    }
}

/// Held-out sets reused at every checkpoint.
struct EvalSets {
    sequences: Vec<[usize; 4]>,
    labels: Vec<bool>,
    lm_batch: Vec<[usize; 4]>,
}

fn evaluate(
    config: &DenseConfig,
    world: &WorldSpec,
    params: &DenseParams,
    eval: &EvalSets,
    sites: &[ProbeSite],
    step: usize,
) -> Result<TraceRow> {
    let fwd = dense_forward(params, &eval.sequences, config.norm_epsilon)?;
    let (lm_loss, _) = {
        let lm = dense_forward(params, &eval.lm_batch, config.norm_epsilon)?;
        (cross_entropy(&lm), ())
    };
    let p0 = fwd.probs_at(0);
    let p2 = fwd.probs_at(2);
    let pick = |want: bool| -> Vec<usize> { (0..eval.labels.len()).filter(|&i| eval.labels[i] == want).collect() };
    let (ti, fi) = (pick(true), pick(false));
    let seqs = |ids: &[usize]| -> Vec<[usize; 4]> { ids.iter().map(|&i| eval.sequences[i]).collect() };
    let memorization = memorization_rate(
        world,
        &seqs(&ti),
        &p0.select(Axis(0), &ti),
        &p2.select(Axis(0), &ti),
    )?;
    let (p_true_on_false, entropy_false) = false_sequence_confidence(world, &seqs(&fi), &p2.select(Axis(0), &fi))?;

    let mut auc = Vec::with_capacity(sites.len());
    for &site in sites {
        let data = ActivationSet::new(
            fwd.site(site.layer, site.position.index(), site.stage),
            eval.labels.clone(),
            format!("dense@{step}"),
            site,
        )?;
        auc.push(fit_logistic_probe(&data, &config.probe)?.1.auc);
    }
    Ok(TraceRow {
        step,
        lm_loss,
        memorization,
        p_true_on_false,
        entropy_false,
        auc,
    })
}

fn cross_entropy(fwd: &DenseForward) -> f64 {
    let b = fwd.batch_size();
    let mut total = 0.0;
    for seq in 0..b {
        for t in 0..SEQ_LEN - 1 {
            let row = fwd.logits.slice(s![seq, t, ..]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[fwd.tokens[seq * SEQ_LEN + t + 1]];
        }
    }
    total / (b * (SEQ_LEN - 1)) as f64
}

#[derive(Debug, Clone)]
pub struct DenseRun {
    pub world: WorldSpec,
    pub trace: TrainTrace,
    pub params: DenseParams,
}

pub fn dense_train(config: &DenseConfig) -> Result<DenseRun> {
    dense_train_with(config, |_, _| Ok(()))
}

/// Trains from a fresh initialization on freshly sampled batches, evaluating
/// at step 0, every `metric_every` batches and at the end. `on_checkpoint`
/// sees the parameters at each evaluation.
pub fn dense_train_with<F>(config: &DenseConfig, mut on_checkpoint: F) -> Result<DenseRun>
where
    F: FnMut(&TraceRow, &DenseParams) -> Result<()>,
{
    config.validate()?;
    let world = config.world()?;
    let mut params = DenseParams::init(config)?;
    let mut adam = AdamW::new(&params, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let frozen: &[&str] = if config.embeddings_trainable { &[] } else { &["embed"] };

    let balanced = make_balanced_probe_set(&world, config.eval_size, config.seed)?;
    let mut eval_rng = rng::stream(config.seed, Stream::Eval);
    let lm_batch = sample_batch(&world, config.rho, config.eval_size, &mut eval_rng)?
        .iter()
        .map(|e| e.tokens())
        .collect();
    let eval = EvalSets {
        sequences: balanced.sequences(),
        labels: balanced.labels(),
        lm_batch,
    };
    let sites = ProbeSite::all(config.layers);
    let mut trace = TrainTrace {
        sites: sites.clone(),
        rows: Vec::new(),
    };

    let row = evaluate(config, &world, &params, &eval, &sites, 0)?;
    on_checkpoint(&row, &params)?;
    trace.rows.push(row);

    let mut train_rng = rng::stream(config.seed, Stream::Train);
    for step in 1..=config.total_batches {
        let batch: Vec<[usize; 4]> = sample_batch(&world, config.rho, config.batch_size, &mut train_rng)?
            .iter()
            .map(|e| e.tokens())
            .collect();
        let (_, grads) = dense_loss_and_grads(&params, &batch, config.norm_epsilon).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            other => other,
        })?;
        adam.update(&mut params, &grads, config.lr, config.weight_decay, frozen);
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite { what: name, step });
        }
        if step % config.metric_every == 0 || step == config.total_batches {
            let row = evaluate(config, &world, &params, &eval, &sites, step)?;
            on_checkpoint(&row, &params)?;
            trace.rows.push(row);
        }
    }
    Ok(DenseRun { world, trace, params })
}

/// `E · W_V · W_O · Eᵀ` for every layer: entry `(i, j)` is what attending to
/// token `i` writes along the embedding of token `j`.
pub fn vo_kernel(params: &DenseParams) -> Vec<Array2<f64>> {
    params
        .layers
        .iter()
        .map(|l| params.embed.dot(&l.w_v).dot(&l.w_o).dot(&params.embed.t()))
        .collect()
}

/// Sub-sampled kernel ordered `[x_1..x_k, g(x_1)..g(x_k)]` for the first `k`
/// subjects; the lower-left `k × k` block holds rows `g(x_i)`, columns `x_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedKernel {
    pub tokens: Vec<usize>,
    pub matrix: Array2<f64>,
}

impl SortedKernel {
    pub fn lower_left(&self) -> Array2<f64> {
        let k = self.tokens.len() / 2;
        self.matrix.slice(s![k.., ..k]).to_owned()
    }
}

pub fn sorted_kernel_view(kernel: &Array2<f64>, world: &WorldSpec, k: usize) -> Result<SortedKernel> {
    if k == 0 || k > world.n_subjects {
        return Err(Error::invalid("k", format!("{k} not in 1..={}", world.n_subjects)));
    }
    let mut tokens: Vec<usize> = (0..k).collect();
    tokens.extend((0..k).map(|x| world.truth_token(x)));
    let matrix = kernel.select(Axis(0), &tokens).select(Axis(1), &tokens);
    Ok(SortedKernel { tokens, matrix })
}

/// Diagonal mean, off-diagonal mean and off-diagonal standard deviation of a
/// square block.
pub fn diagonal_contrast(block: &Array2<f64>) -> (f64, f64, f64) {
    let k = block.nrows();
    let diag = block.diag().mean().unwrap_or(0.0);
    let off: Vec<f64> = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| block[[i, j]])
        .collect();
    if off.is_empty() {
        return (diag, 0.0, 0.0);
    }
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    let var = off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / off.len() as f64;
    (diag, mean, var.sqrt())
}

/// Attention map averaged over `sequences`, one `4 × 4` matrix per layer.
pub fn mean_attention(params: &DenseParams, sequences: &[[usize; 4]], norm_epsilon: f64) -> Result<Vec<Array2<f64>>> {
    let fwd = dense_forward(params, sequences, norm_epsilon)?;
    Ok(fwd
        .layers
        .iter()
        .map(|c| c.attention.mean_axis(Axis(0)).expect("non-empty batch"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_with_truth;
    use rand::Rng as _;

    fn small_config() -> DenseConfig {
        DenseConfig {
            layers: 1,
            d_model: 8,
            n_subjects: 6,
            n_attributes: 6,
            init_std: 0.3,
            eval_size: 32,
            total_batches: 0,
            metric_every: 10,
            batch_size: 8,
            ..DenseConfig::ci()
        }
    }

    fn random_sequences(world: &WorldSpec, n: usize, seed: u64) -> Vec<[usize; 4]> {
        let mut rng = rng::stream(seed, Stream::Custom(7));
        (0..n)
            .map(|_| {
                let t = rng.random_bool(0.5);
                sample_with_truth(world, t, &mut rng).tokens()
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_attention_and_bias_logits() {
        let mut params = DenseParams::zeros(1, 8, 12);
        params.b_out = Array1::from_iter((0..12).map(|i| i as f64 * 0.1));
        params.embed.fill(0.5);
        let fwd = dense_forward(&params, &[[0, 6, 1, 7]], 1e-6).unwrap();
        for i in 0..SEQ_LEN {
            for j in 0..SEQ_LEN {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((fwd.layers[0].attention[[0, i, j]] - want).abs() < 1e-15);
            }
            for v in 0..12 {
                assert_eq!(fwd.logits[[0, i, v]], params.b_out[v]);
            }
        }
    }

    #[test]
    fn shapes_and_unit_rms() {
        let config = small_config();
        let params = DenseParams::init(&config).unwrap();
        let world = config.world().unwrap();
        let batch = random_sequences(&world, 2, 1);
        let fwd = dense_forward(&params, &batch, 1e-6).unwrap();
        assert_eq!(fwd.logits.dim(), (2, 4, 12));
        let cache = &fwd.layers[0];
        for (row, pre) in cache.post_norm.rows().into_iter().zip(cache.pre_norm.rows()) {
            let rms = (row.dot(&row) / 8.0).sqrt();
            let bound = (8.0 * 1e-6f64).sqrt() / pre.dot(&pre).sqrt();
            assert!((rms - 1.0).abs() <= bound, "{rms}");
        }
        let fwd = dense_forward(&params, &batch, 1e-15).unwrap();
        for row in fwd.layers[0].post_norm.rows() {
            assert!(((row.dot(&row) / 8.0).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let config = DenseConfig {
            layers: 2,
            ..small_config()
        };
        let params = DenseParams::init(&config).unwrap();
        let a = dense_forward(&params, &[[0, 6, 1, 7]], 1e-6).unwrap();
        let b = dense_forward(&params, &[[0, 6, 3, 7]], 1e-6).unwrap();
        for t in 0..2 {
            for v in 0..12 {
                assert_eq!(a.logits[[0, t, v]].to_bits(), b.logits[[0, t, v]].to_bits());
            }
        }
        assert_ne!(a.logits[[0, 2, 0]], b.logits[[0, 2, 0]]);
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let params = DenseParams::zeros(1, 4, 12);
        assert!(dense_forward(&params, &[[0, 1, 2, 12]], 1e-6).is_err());
        assert!(dense_forward(&params, &[], 1e-6).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for layers in [1, 2] {
            let config = DenseConfig {
                layers,
                ..small_config()
            };
            let params = DenseParams::init(&config).unwrap();
            let world = config.world().unwrap();
            let batch = random_sequences(&world, 3, 2);
            let (_, grads) = dense_loss_and_grads(&params, &batch, 1e-6).unwrap();
            let h = 1e-4;
            let mut worst = 0.0f64;
            for ((name, g), idx) in grads.tensors().into_iter().zip(0..) {
                let mut rng = rng::stream(idx, Stream::Custom(8));
                for _ in 0..12 {
                    let flat = rng.random_range(0..g.len());
                    let analytic = *g.iter().nth(flat).unwrap();
                    let perturbed = |delta: f64| {
                        let mut p = params.clone();
                        let mut tensors = p.tensors_mut();
                        *tensors[idx as usize].1.iter_mut().nth(flat).unwrap() += delta;
                        drop(tensors);
                        dense_loss_and_grads(&p, &batch, 1e-6).unwrap().0
                    };
                    let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(err <= 1e-4, "{name}[{flat}]: {analytic} vs {numeric}");
                    worst = worst.max(err);
                }
            }
            assert!(worst <= 1e-4);
        }
    }

    #[test]
    fn initial_loss_near_log_vocab() {
        let config = DenseConfig {
            d_model: 32,
            n_subjects: 40,
            n_attributes: 40,
            init_std: 0.02,
            ..small_config()
        };
        let params = DenseParams::init(&config).unwrap();
        let mut rng = rng::stream(3, Stream::Custom(9));
        let batch: Vec<[usize; 4]> = (0..256)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..80)))
            .collect();
        let (loss, _) = dense_loss_and_grads(&params, &batch, 1e-6).unwrap();
        let log_v = 80f64.ln();
        assert!((loss - log_v).abs() <= 0.15 * log_v, "{loss} vs {log_v}");
    }

    #[test]
    fn zero_decay_is_plain_adam() {
        let config = small_config();
        let world = config.world().unwrap();
        let mut params = DenseParams::init(&config).unwrap();
        let mut reference = params.clone();
        let mut adam = AdamW::new(&params, 0.9, 0.999, 1e-8);
        let (mut m, mut v) = (params.zeros_like(), params.zeros_like());
        for step in 1..=5 {
            let batch = random_sequences(&world, 4, step);
            let (_, g) = dense_loss_and_grads(&params, &batch, 1e-6).unwrap();
            adam.update(&mut params, &g, 1e-2, 0.0, &[]);

            let (_, g) = dense_loss_and_grads(&reference, &batch, 1e-6).unwrap();
            let iter = reference
                .tensors_mut()
                .into_iter()
                .zip(g.tensors())
                .zip(m.tensors_mut())
                .zip(v.tensors_mut());
            for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in iter {
                for (((p, g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = 0.9 * *m + (1.0 - 0.9) * g;
                    *v = 0.999 * *v + (1.0 - 0.999) * g * g;
                    let mh = *m / (1.0 - 0.9f64.powi(step as i32));
                    let vh = *v / (1.0 - 0.999f64.powi(step as i32));
                    *p -= 1e-2 * (mh / (vh.sqrt() + 1e-8));
                }
            }
        }
        assert_eq!(params, reference);
    }

    #[test]
    fn frozen_embeddings_stay_fixed() {
        let config = DenseConfig {
            embeddings_trainable: false,
            total_batches: 3,
            ..small_config()
        };
        let run = dense_train(&config).unwrap();
        let init = DenseParams::init(&config).unwrap();
        assert_eq!(run.params.embed, init.embed);
        assert_ne!(run.params.w_out, init.w_out);
    }

    #[test]
    fn one_hot_embeddings_expose_value_output_block() {
        let config = DenseConfig {
            d_model: 12,
            ..small_config()
        };
        let mut params = DenseParams::init(&config).unwrap();
        params.embed = Array2::eye(12);
        let kernel = &vo_kernel(&params)[0];
        let vo = params.layers[0].w_v.dot(&params.layers[0].w_o);
        assert_eq!(kernel.dim(), (12, 12));
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(kernel[[i, j]], vo[[i, j]]);
            }
        }
        let world = config.world().unwrap();
        let view = sorted_kernel_view(kernel, &world, 3).unwrap();
        assert_eq!(view.lower_left()[[1, 2]], kernel[[world.truth_token(1), 2]]);
    }

    #[test]
    fn training_is_deterministic() {
        let config = DenseConfig {
            total_batches: 20,
            metric_every: 10,
            ..small_config()
        };
        let a = dense_train(&config).unwrap();
        let b = dense_train(&config).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.trace.steps(), vec![0, 10, 20]);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn invalid_config_names_field() {
        let config = DenseConfig {
            rho: 1.5,
            ..small_config()
        };
        match config.validate() {
            Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "rho"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phase_summary_on_synthetic_trace() {
        let sites = ProbeSite::all(1);
        let main = sites.iter().position(|s| s.label() == "l1_x_prime_post").unwrap();
        let mem = [0.1, 0.995, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let auc = [0.5, 0.5, 0.6, 0.95, 0.97, 0.99, 0.99, 0.99];
        let ptf = [0.9, 0.9, 0.9, 0.9, 0.4, 0.3, 0.2, 0.2];
        let rows = (0..8)
            .map(|i| {
                let mut a = vec![0.5; sites.len()];
                a[main] = auc[i];
                TraceRow {
                    step: i * 100,
                    lm_loss: 1.0,
                    memorization: mem[i],
                    p_true_on_false: ptf[i],
                    entropy_false: 0.0,
                    auc: a,
                }
            })
            .collect();
        let trace = TrainTrace { sites, rows };
        let s = trace.phase_summary(&OnsetCriteria::default()).unwrap();
        assert_eq!(s.site, "l1_x_prime_post");
        assert_eq!((s.memorization_onset, s.auc_onset), (Some(100), Some(300)));
        assert!(s.ordered());
        assert!((s.p_true_on_false_at_memorization.unwrap() - 0.9).abs() < 1e-12);
        assert!((s.p_true_on_false_at_auc.unwrap() - 1.6 / 3.0).abs() < 1e-12);
        assert!((s.p_true_on_false_drop.unwrap() - (1.0 - 1.6 / 2.7)).abs() < 1e-12);
    }
}
