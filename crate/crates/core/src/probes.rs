//! Linear probes and analysis instruments: logistic truth classifiers, AUC,
//! PCA by power iteration, phase metrics and onset detection.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::WorldSpec;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Token position of a probe site, in the `x y x' y'` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPosition {
    Y,
    XPrime,
}

impl TokenPosition {
    /// Zero-based index into the sequence.
    pub fn index(self) -> usize {
        match self {
            TokenPosition::Y => 1,
            TokenPosition::XPrime => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenPosition::Y => "y",
            TokenPosition::XPrime => "x_prime",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreNorm,
    PostNorm,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PreNorm => "pre",
            Stage::PostNorm => "post",
        }
    }
}

/// A residual-stream site: zero-based layer, token position and stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeSite {
    pub layer: usize,
    pub position: TokenPosition,
    pub stage: Stage,
}

impl ProbeSite {
    pub fn new(layer: usize, position: TokenPosition, stage: Stage) -> Self {
        ProbeSite { layer, position, stage }
    }

    /// Every layer × {y, x'} × {pre, post}.
    pub fn all(layers: usize) -> Vec<ProbeSite> {
        let mut sites = Vec::with_capacity(4 * layers);
        for layer in 0..layers {
            for position in [TokenPosition::Y, TokenPosition::XPrime] {
                for stage in [Stage::PreNorm, Stage::PostNorm] {
                    sites.push(ProbeSite::new(layer, position, stage));
                }
            }
        }
        sites
    }

    /// Column-friendly label, layers counted from 1: `l1_x_prime_post`.
    pub fn label(&self) -> String {
        format!("l{}_{}_{}", self.layer + 1, self.position.name(), self.stage.name())
    }
}

/// A model whose residual stream can be read at any probe site.
pub trait ProbedModel {
    fn n_layers(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Residual vectors at `site`, one row per sequence.
    fn hidden(&self, sequences: &[[usize; 4]], site: ProbeSite) -> Result<Array2<f64>>;

    /// Next-token distributions read at zero-based `position`, one row per
    /// sequence.
    fn next_token_probs(&self, sequences: &[[usize; 4]], position: usize) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet {
    pub matrix: Array2<f64>,
    pub labels: Vec<bool>,
    pub model_id: String,
    pub site: ProbeSite,
}

impl ActivationSet {
    pub fn new(matrix: Array2<f64>, labels: Vec<bool>, model_id: impl Into<String>, site: ProbeSite) -> Result<Self> {
        if matrix.nrows() != labels.len() {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for {} rows", labels.len(), matrix.nrows()),
            ));
        }
        Ok(ActivationSet {
            matrix,
            labels,
            model_id: model_id.into(),
            site,
        })
    }
}

pub fn collect_activations(
    model: &dyn ProbedModel,
    model_id: &str,
    sequences: &[[usize; 4]],
    labels: &[bool],
    site: ProbeSite,
) -> Result<ActivationSet> {
    if site.layer >= model.n_layers() {
        return Err(Error::invalid(
            "site.layer",
            format!("layer {} of a {}-layer model", site.layer, model.n_layers()),
        ));
    }
    let matrix = model.hidden(sequences, site)?;
    ActivationSet::new(matrix, labels.to_vec(), model_id, site)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            l2: 1e-3,
            max_iters: 5000,
            tol: 1e-7,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

impl ProbeSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("l2", "must be finite and non-negative"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol", "must be non-negative"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Logistic classifier on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl LogisticProbe {
    /// Logits `w·(x − μ)/σ + b`, one per row.
    pub fn scores(&self, x: &Array2<f64>) -> Array1<f64> {
        let z = (x - &self.mean) / &self.scale;
        z.dot(&self.weights) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub auc: f64,
    pub accuracy: f64,
    pub weight_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub train_ids: Vec<usize>,
    pub eval_ids: Vec<usize>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stratified split: each class is shuffled and cut at `train_fraction`.
fn stratified_split(labels: &[bool], settings: &ProbeSettings) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(settings.split_seed, Stream::Split);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        ids.shuffle(&mut rng);
        let cut = ((ids.len() as f64) * settings.train_fraction).round() as usize;
        let cut = cut.clamp(1, ids.len() - 1);
        train.extend_from_slice(&ids[..cut]);
        eval.extend_from_slice(&ids[cut..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

/// Fits an L2-regularized logistic probe by full-batch gradient descent on a
/// stratified train split and reports AUC/accuracy on the held-out split.
pub fn fit_logistic_probe(data: &ActivationSet, settings: &ProbeSettings) -> Result<(LogisticProbe, ProbeReport)> {
    settings.validate()?;
    let n_true = data.labels.iter().filter(|&&l| l).count();
    let n_false = data.labels.len() - n_true;
    if n_true < 2 || n_false < 2 {
        return Err(Error::SingleClass(format!(
            "need ≥ 2 samples per class, got {n_true} true / {n_false} false"
        )));
    }
    let (train_ids, eval_ids) = stratified_split(&data.labels, settings);
    let x_train = data.matrix.select(Axis(0), &train_ids);
    let y_train: Array1<f64> = train_ids.iter().map(|&i| f64::from(u8::from(data.labels[i]))).collect();

    let mean = x_train.mean_axis(Axis(0)).expect("non-empty train split");
    let scale = x_train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (&x_train - &mean) / &scale;
    let n = z.nrows() as f64;

    // Step size 1/L with L bounding the Hessian: λ_max(ZᵀZ/n)/4 + l2.
    let gram = z.t().dot(&z) / n;
    let lipschitz = 0.25 * top_eigenvalue(&gram) * 1.01 + settings.l2 + 1e-12;
    let step = 1.0 / lipschitz;

    let features = z.ncols();
    let mut w = Array1::<f64>::zeros(features);
    let mut b = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.max_iters {
        let logits = z.dot(&w) + b;
        let resid: Array1<f64> = logits.iter().zip(&y_train).map(|(&l, &y)| sigmoid(l) - y).collect();
        let gw = z.t().dot(&resid) / n + &w * settings.l2;
        let gb = resid.sum() / n;
        let gnorm = (gw.dot(&gw) + gb * gb).sqrt();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite {
                what: "probe gradient".into(),
                step: iterations,
            });
        }
        if gnorm <= settings.tol {
            converged = true;
            break;
        }
        w.scaled_add(-step, &gw);
        b -= step * gb;
        iterations += 1;
    }

    let probe = LogisticProbe {
        weights: w,
        bias: b,
        mean,
        scale,
    };
    let x_eval = data.matrix.select(Axis(0), &eval_ids);
    let scores = probe.scores(&x_eval);
    let labels: Vec<bool> = eval_ids.iter().map(|&i| data.labels[i]).collect();
    let correct = scores.iter().zip(&labels).filter(|(&s, &l)| (s > 0.0) == l).count();
    let report = ProbeReport {
        auc: auc(scores.as_slice().expect("contiguous"), &labels)?,
        accuracy: correct as f64 / labels.len() as f64,
        weight_norm: probe.weights.dot(&probe.weights).sqrt(),
        iterations,
        converged,
        train_ids,
        eval_ids,
    };
    Ok((probe, report))
}

fn top_eigenvalue(sym: &Array2<f64>) -> f64 {
    let n = sym.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let next = sym.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&next);
        v = next / norm;
    }
    // The Rayleigh quotient from below; the trace caps any overshoot.
    lambda.max(sym.diag().iter().cloned().fold(0.0, f64::max)).min(sym.diag().sum())
}

/// Mann–Whitney AUC: probability a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("labels", "length differs from scores"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            what: "auc scores".into(),
            step: 0,
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `k × features`, orthonormal rows.
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// `samples × k` projections of the centered data.
    pub projections: Array2<f64>,
}

const PCA_MAX_ITERS: usize = 100_000;

/// Top-`k` principal components by power iteration with deflation. Each
/// component iterates until successive Rayleigh quotients differ by at most
/// `tol`.
pub fn pca_topk(x: &Array2<f64>, k: usize, tol: f64) -> Result<Pca> {
    let (n, f) = x.dim();
    if k == 0 || k > n.min(f) {
        return Err(Error::invalid("k", format!("{k} not in 1..={}", n.min(f))));
    }
    if n < 2 {
        return Err(Error::invalid("x", "need at least two samples"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let total = cov.diag().sum();

    let mut components = Array2::<f64>::zeros((k, f));
    let mut eigenvalues = Vec::with_capacity(k);
    for c in 0..k {
        // Deterministic start: the column of largest norm, nudged so it is
        // never orthogonal to the top eigenvector by construction.
        let col = (0..f)
            .max_by(|&a, &b| {
                let na = cov.column(a).dot(&cov.column(a));
                let nb = cov.column(b).dot(&cov.column(b));
                na.total_cmp(&nb)
            })
            .expect("f > 0");
        let mut v: Array1<f64> = cov.column(col).to_owned() + Array1::from_shape_fn(f, |i| 1e-3 / (1.0 + i as f64));
        orthogonalize(&mut v, &components, c);
        normalize(&mut v);
        let mut lambda = v.dot(&cov.dot(&v));
        for _ in 0..PCA_MAX_ITERS {
            let mut next = cov.dot(&v);
            orthogonalize(&mut next, &components, c);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let next_lambda = next.dot(&cov.dot(&next));
            v = next;
            let done = (next_lambda - lambda).abs() <= tol;
            lambda = next_lambda;
            if done {
                break;
            }
        }
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().cloned().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if pivot < 0.0 {
            v.mapv_inplace(|e| -e);
        }
        for i in 0..f {
            for j in 0..f {
                cov[[i, j]] -= lambda * v[i] * v[j];
            }
        }
        components.row_mut(c).assign(&v);
        eigenvalues.push(lambda);
    }
    let explained_ratio = eigenvalues
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    let projections = centered.dot(&components.t());
    Ok(Pca {
        components,
        eigenvalues,
        explained_ratio,
        projections,
    })
}

fn orthogonalize(v: &mut Array1<f64>, basis: &Array2<f64>, rows: usize) {
    for r in 0..rows {
        let b = basis.row(r);
        let proj = v.dot(&b);
        v.scaled_add(-proj, &b);
    }
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        *v /= norm;
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub memorization: f64,
    pub p_true_on_false: f64,
    pub entropy_false: f64,
    pub auc_y: f64,
    pub auc_x_prime: f64,
}

/// Fraction of true sequences whose argmax prediction is `g(x)` after `x`
/// and `g(x')` after `x'`.
pub fn memorization_rate(
    world: &WorldSpec,
    sequences: &[[usize; 4]],
    probs_after_x: &Array2<f64>,
    probs_after_x_prime: &Array2<f64>,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Empty("memorization needs true sequences".into()));
    }
    let argmax = |row: ndarray::ArrayView1<f64>| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    };
    let hits = sequences
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            argmax(probs_after_x.row(*i)) == world.truth_token(s[0])
                && argmax(probs_after_x_prime.row(*i)) == world.truth_token(s[2])
        })
        .count();
    Ok(hits as f64 / sequences.len() as f64)
}

/// Mean probability of `g(x')` and mean predictive entropy (nats) after `x'`
/// on false sequences.
pub fn false_sequence_confidence(
    world: &WorldSpec,
    sequences: &[[usize; 4]],
    probs_after_x_prime: &Array2<f64>,
) -> Result<(f64, f64)> {
    if sequences.is_empty() {
        return Err(Error::Empty("confidence needs false sequences".into()));
    }
    let m = sequences.len() as f64;
    let mut p_true = 0.0;
    let mut entropy = 0.0;
    for (i, s) in sequences.iter().enumerate() {
        let row = probs_after_x_prime.row(i);
        p_true += row[world.truth_token(s[2])];
        entropy -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok((p_true / m, entropy / m))
}

/// Phase metrics on a balanced evaluation set; probe AUCs are read from the
/// last layer after normalization.
pub fn phase_metrics(
    model: &dyn ProbedModel,
    world: &WorldSpec,
    sequences: &[[usize; 4]],
    labels: &[bool],
    settings: &ProbeSettings,
) -> Result<PhaseMetrics> {
    if sequences.len() != labels.len() {
        return Err(Error::invalid("labels", "length differs from sequences"));
    }
    let split = |want: bool| -> Vec<[usize; 4]> {
        sequences
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(s, _)| *s)
            .collect()
    };
    let (trues, falses) = (split(true), split(false));
    let memorization = memorization_rate(
        world,
        &trues,
        &model.next_token_probs(&trues, 0)?,
        &model.next_token_probs(&trues, 2)?,
    )?;
    let (p_true_on_false, entropy_false) =
        false_sequence_confidence(world, &falses, &model.next_token_probs(&falses, 2)?)?;
    let last = model.n_layers() - 1;
    let mut aucs = [0.0; 2];
    for (slot, position) in aucs.iter_mut().zip([TokenPosition::Y, TokenPosition::XPrime]) {
        let site = ProbeSite::new(last, position, Stage::PostNorm);
        let data = collect_activations(model, "phase", sequences, labels, site)?;
        *slot = fit_logistic_probe(&data, settings)?.1.auc;
    }
    Ok(PhaseMetrics {
        memorization,
        p_true_on_false,
        entropy_false,
        auc_y: aucs[0],
        auc_x_prime: aucs[1],
    })
}

/// Index of the first checkpoint where `values` reaches `threshold` and
/// stays there for `persistence` consecutive checkpoints (counting itself).
pub fn detect_onset_index(values: &[f64], threshold: f64, persistence: usize) -> Option<usize> {
    let persistence = persistence.max(1);
    (0..values.len())
        .find(|&i| i + persistence <= values.len() && values[i..i + persistence].iter().all(|&v| v >= threshold))
}

/// Step of the onset, see [`detect_onset_index`].
pub fn detect_onset(steps: &[usize], values: &[f64], threshold: f64, persistence: usize) -> Option<usize> {
    detect_onset_index(values, threshold, persistence).map(|i| steps[i])
}
