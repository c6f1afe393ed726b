//! Executable checks of the closed-form claims about the structured toy model.
//!
//! Each checker enumerates the relevant inputs through the real forward pass
//! of [`crate::toy`] and compares against the closed form, returning a
//! machine-readable [`TheoremReport`].

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use ndarray::Array1;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::WorldSpec;
use crate::error::{check_probability, Error, Result};
use crate::rng::{self, Stream};
use crate::toy::{build_structured_w, forward_logits, OneHotConfig, StructuredCoeffs, ValueMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub claim: String,
    pub parameters: BTreeMap<String, f64>,
    pub bound: f64,
    pub empirical: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<String>,
}

impl TheoremReport {
    fn new(claim: &str, parameters: &[(&str, f64)], bound: f64, empirical: f64, pass: bool) -> Self {
        TheoremReport {
            claim: claim.to_string(),
            parameters: parameters.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            bound,
            empirical,
            pass,
            counterexample: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Token position a separator reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparatorPosition {
    /// The first attribute, position 2.
    Y,
    /// The second subject, position 3.
    XPrime,
}

impl SeparatorPosition {
    pub fn index(self) -> usize {
        match self {
            SeparatorPosition::Y => 2,
            SeparatorPosition::XPrime => 3,
        }
    }
}

/// Linear truth classifier on post-norm residuals: true iff `⟨w, v⟩ > bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorSpec {
    pub direction: Vec<f64>,
    pub bias: f64,
    pub token_position: SeparatorPosition,
}

impl SeparatorSpec {
    pub fn score(&self, v: &Array1<f64>) -> f64 {
        self.direction.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() - self.bias
    }
}

fn check_positive(coeffs: &StructuredCoeffs) -> Result<()> {
    if !coeffs.all_positive() {
        return Err(Error::invalid("coeffs", "all seven structured coefficients must be positive"));
    }
    Ok(())
}

/// `ζ(x, y) = W(e_x + e_y)` for the structured `W`, in the toy layout, and
/// `‖ζ(x, y)‖² − ‖ζ(x, g(x))‖²`.
pub fn zeta_norm_gap(
    config: &OneHotConfig,
    coeffs: &StructuredCoeffs,
    world: &WorldSpec,
    x: usize,
    y: usize,
) -> Result<(Array1<f64>, f64)> {
    let inv = world.inverse()?;
    if !world.is_subject(x) || !world.is_attribute(y) {
        return Err(Error::invalid("(x, y)", format!("({x}, {y}) is not a subject/attribute pair")));
    }
    let layout = config.layout();
    let zeta = |y: usize| {
        let mut z = Array1::<f64>::zeros(layout.d());
        z[layout.e(x)] -= coeffs.alpha1;
        z[layout.e(inv[y - world.n_subjects])] += coeffs.alpha2;
        z[layout.u(world.truth_token(x))] += coeffs.beta1;
        z[layout.u(y)] -= coeffs.beta2;
        z
    };
    let z = zeta(y);
    let z_true = zeta(world.truth_token(x));
    let gap = z.dot(&z) - z_true.dot(&z_true);
    Ok((z, gap))
}

/// Sharpening bound `(β₁ − max(0, β₁ − β₂)) / (3√(c + (β₁ − β₂ + γ̄)² + (β₁ + γ̄)²))`
/// with `c = 2 + (γ̄²(2N − 2) + 2α₁² + β₁²)/9`.
pub fn sharpening_bound(n: usize, coeffs: &StructuredCoeffs, gamma_bar: f64) -> f64 {
    let (b1, b2) = (coeffs.beta1, coeffs.beta2);
    let c = 2.0 + (gamma_bar * gamma_bar * (2.0 * n as f64 - 2.0) + 2.0 * coeffs.alpha1.powi(2) + b1 * b1) / 9.0;
    let denom = 3.0 * (c + (b1 - b2 + gamma_bar).powi(2) + (b1 + gamma_bar).powi(2)).sqrt();
    (b1 - (b1 - b2).max(0.0)) / denom
}

fn top_gap(logits: &Array1<f64>, target: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .fold(f64::NEG_INFINITY, |m, (_, &l)| m.max(l));
    logits[target] - other
}

/// Exhaustive check of the sharpening claim over prefixes with `x ≠ x'`:
/// true prefixes `(x, g(x), x')` keep a top-logit gap at least the bound, and
/// false prefixes with `y ∉ {g(x), g(x')}` tie `g(x)` with `g(x')` exactly.
///
/// `gamma_bar` overrides the net positional coefficient used in the bound;
/// by default it is `γ₁ − γ₂ + γ₃`.
pub fn sharpening_check(
    config: &OneHotConfig,
    coeffs: &StructuredCoeffs,
    world: &WorldSpec,
    gamma_bar: Option<f64>,
) -> Result<TheoremReport> {
    check_positive(coeffs)?;
    let w = build_structured_w(config, coeffs, world)?;
    let gamma_bar = gamma_bar.unwrap_or_else(|| coeffs.gamma_bar());
    let bound = sharpening_bound(config.n, coeffs, gamma_bar);
    let n = config.n;

    let mut min_true = f64::INFINITY;
    let mut worst_true = (0, 0);
    let mut max_false = 0.0f64;
    let mut worst_false = None;
    for x in 0..n {
        for xp in (0..n).filter(|&xp| xp != x) {
            let target = world.truth_token(xp);
            let out = forward_logits(config, &w, &[x, world.truth_token(x), xp])?;
            let gap = top_gap(&out.logits, target);
            if gap < min_true {
                min_true = gap;
                worst_true = (x, xp);
            }
            for a in 0..n {
                let y = world.attribute_token(a);
                if y == world.truth_token(x) || y == target {
                    continue;
                }
                let out = forward_logits(config, &w, &[x, y, xp])?;
                let gap = top_gap(&out.logits, target);
                if gap.abs() > max_false {
                    max_false = gap.abs();
                    worst_false = Some((x, y, xp));
                }
            }
        }
    }
    let pass = min_true >= bound && max_false == 0.0;
    let mut report = TheoremReport::new(
        "sharpening",
        &[
            ("n", n as f64),
            ("alpha1", coeffs.alpha1),
            ("alpha2", coeffs.alpha2),
            ("beta1", coeffs.beta1),
            ("beta2", coeffs.beta2),
            ("gamma_bar", gamma_bar),
            ("false_gap_max_abs", max_false),
        ],
        bound,
        min_true,
        pass,
    );
    if min_true < bound {
        report.counterexample = Some(format!("true prefix x={}, x'={}", worst_true.0, worst_true.1));
    } else if let Some((x, y, xp)) = worst_false {
        report.counterexample = Some(format!("false prefix ({x}, {y}, {xp}) has nonzero gap"));
    }
    Ok(report)
}

/// Closed-form separation margin at token `y` for symmetric coefficients,
/// `(1/(2√2))(1 − 1/√(1 + α² + β²))`.
///
/// `alpha` and `beta` are the coefficients carried by the attention output
/// at position 2, i.e. the value-matrix coefficients halved by the uniform
/// average over two tokens.
pub fn symmetric_margin_y(alpha: f64, beta: f64) -> f64 {
    (1.0 - 1.0 / (1.0 + alpha * alpha + beta * beta).sqrt()) / (2.0 * SQRT_2)
}

/// Closed-form x′-token expression `s / (9√(4 + 8s/9 + s²/27))`, `s = α² + β²`,
/// i.e. `(‖v_F‖² − ‖v_T‖²) / (2‖v_T‖‖v_F‖)` for `‖v_T‖² = 2 + s/9` and
/// `‖v_F‖² = 2 + s/3`. Reported alongside the measured margin.
pub fn x_prime_margin_closed_form(alpha: f64, beta: f64) -> f64 {
    let s = alpha * alpha + beta * beta;
    s / (9.0 * (4.0 + 8.0 * s / 9.0 + s * s / 27.0).sqrt())
}

/// Representative true and false prefixes (no token collisions) for a
/// position, over the identity world.
fn generic_prefixes(n: usize, position: SeparatorPosition) -> (Vec<usize>, Vec<usize>) {
    match position {
        SeparatorPosition::Y => (vec![0, n], vec![0, n + 1]),
        SeparatorPosition::XPrime => (vec![0, n, 1], vec![0, n + 2, 1]),
    }
}

/// Norm-based truth separator: reads the positional coordinate `p_t` of the
/// post-norm residual, which equals `1/‖v‖`. The bias sits halfway between
/// the true and false values, so the returned margin is half their gap.
pub fn truth_separator(
    config: &OneHotConfig,
    coeffs: &StructuredCoeffs,
    position: SeparatorPosition,
) -> Result<(SeparatorSpec, f64)> {
    if coeffs.alpha1 * coeffs.alpha2 + coeffs.beta1 * coeffs.beta2 == 0.0 {
        return Err(Error::NoSeparation);
    }
    if !config.positional {
        return Err(Error::invalid("config.positional", "the separator reads a positional coordinate"));
    }
    let n = config.n;
    if n < 3 {
        return Err(Error::invalid("n", "need N ≥ 3 for collision-free representatives"));
    }
    let world = WorldSpec::identity(n)?;
    let w = build_structured_w(config, coeffs, &world)?;
    let (true_prefix, false_prefix) = generic_prefixes(n, position);
    let inv_true = 1.0 / forward_logits(config, &w, &true_prefix)?.norm;
    let inv_false = 1.0 / forward_logits(config, &w, &false_prefix)?.norm;
    if inv_true == inv_false {
        return Err(Error::NoSeparation);
    }
    let sign = if inv_true > inv_false { 1.0 } else { -1.0 };
    let mut direction = vec![0.0; config.d()];
    direction[config.layout().p(position.index())] = sign;
    let spec = SeparatorSpec {
        direction,
        bias: sign * 0.5 * (inv_true + inv_false),
        token_position: position,
    };
    Ok((spec, 0.5 * (inv_true - inv_false).abs()))
}

/// Enumerates every sample at the separator's position and classifies the
/// post-norm residual. At token `y` that is all `N²` pairs `(x, y)`; at token
/// `x'` it is all `N³` prefixes `(x, y, x')` with `x ≠ x'` and `y ≠ g(x')`.
/// `empirical` is the smallest signed margin; pass iff every sign is right.
pub fn separation_check(
    config: &OneHotConfig,
    coeffs: &StructuredCoeffs,
    world: &WorldSpec,
    position: SeparatorPosition,
) -> Result<TheoremReport> {
    let (sep, margin) = truth_separator(config, coeffs, position)?;
    let w = build_structured_w(config, coeffs, world)?;
    let n = config.n;
    let mut min_signed = f64::INFINITY;
    let mut wrong = 0usize;
    let mut total = 0usize;
    let mut counterexample = None;
    let mut visit = |prefix: &[usize], truth: bool| -> Result<()> {
        let out = forward_logits(config, &w, prefix)?;
        let s = sep.score(&out.post_norm);
        let signed = if truth { s } else { -s };
        total += 1;
        if signed <= 0.0 {
            wrong += 1;
            counterexample.get_or_insert_with(|| format!("{prefix:?}"));
        }
        min_signed = min_signed.min(signed);
        Ok(())
    };
    for x in 0..n {
        for a in 0..n {
            let y = world.attribute_token(a);
            let truth = y == world.truth_token(x);
            match position {
                SeparatorPosition::Y => visit(&[x, y], truth)?,
                SeparatorPosition::XPrime => {
                    for xp in (0..n).filter(|&xp| xp != x && world.truth_token(xp) != y) {
                        visit(&[x, y, xp], truth)?;
                    }
                }
            }
        }
    }
    let claim = match position {
        SeparatorPosition::Y => "linear_separation_y",
        SeparatorPosition::XPrime => "linear_separation_x_prime",
    };
    let mut report = TheoremReport::new(
        claim,
        &[
            ("n", n as f64),
            ("samples", total as f64),
            ("misclassified", wrong as f64),
            ("bias", sep.bias),
        ],
        margin,
        min_signed,
        wrong == 0,
    );
    report.counterexample = counterexample;
    Ok(report)
}

/// `v_F(x_i, g(x_j)) + v_F(x_j, g(x_i)) − v_T(x_i) − v_T(x_j)` of pre-norm
/// residuals at token `y`. Identically zero: any affine functional that puts
/// both true samples on one side puts at least one false sample there too.
pub fn midpoint_witness(
    config: &OneHotConfig,
    coeffs: &StructuredCoeffs,
    world: &WorldSpec,
    xi: usize,
    xj: usize,
) -> Result<Array1<f64>> {
    let w = build_structured_w(config, coeffs, world)?;
    midpoint_witness_with(config, &w, world, xi, xj)
}

pub(crate) fn midpoint_witness_with(
    config: &OneHotConfig,
    w: &ValueMatrix,
    world: &WorldSpec,
    xi: usize,
    xj: usize,
) -> Result<Array1<f64>> {
    let pre = |x: usize, y: usize| forward_logits(config, w, &[x, y]).map(|o| o.pre_norm);
    let (gi, gj) = (world.truth_token(xi), world.truth_token(xj));
    Ok(pre(xi, gj)? + pre(xj, gi)? - pre(xi, gi)? - pre(xj, gj)?)
}

/// True when `(w, b)` fails to put both true samples at or above `b` and
/// both false samples strictly below it.
pub fn separator_fails(w: &Array1<f64>, b: f64, trues: [&Array1<f64>; 2], falses: [&Array1<f64>; 2]) -> bool {
    let ok_true = trues.iter().all(|v| w.dot(*v) - b >= 0.0);
    let ok_false = falses.iter().all(|v| w.dot(*v) - b < 0.0);
    !(ok_true && ok_false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyGap {
    pub loss_without_truth: f64,
    pub loss_with_truth: f64,
    pub delta: f64,
}

fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Binary entropy in nats.
pub fn binary_entropy(rho: f64) -> f64 {
    -xlogx(rho) - xlogx(1.0 - rho)
}

/// Optimal cross-entropy for `y'` without and with access to the truth bit,
/// in nats, and their difference.
pub fn entropy_gap(rho: f64, n_attributes: f64) -> Result<EntropyGap> {
    check_probability("rho", rho)?;
    if !(n_attributes >= 2.0) {
        return Err(Error::invalid("n_attributes", "need at least two attributes"));
    }
    let beta = (1.0 - rho) / n_attributes;
    let alpha = rho + beta;
    let without = -xlogx(alpha) - (n_attributes - 1.0) * xlogx(beta);
    let with = (1.0 - rho) * n_attributes.ln();
    Ok(EntropyGap {
        loss_without_truth: without,
        loss_with_truth: with,
        delta: without - with,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KqWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

/// Coefficients of the key–query gradient at `W_KQ = 0` on true sequences,
/// `−∇L = (1/3) Σ_t w_t (p_t − p̄) p_3ᵀ`, under the prediction model that puts
/// `(1 − ε)/2` on each of `g(x), g(x')` when `x ≠ x'`, `1 − ε` on `g(x)` when
/// `x = x'`, and spreads the remaining `ε` uniformly over the other tokens.
pub fn kq_gradient_weights(beta: f64, n: usize, eps: f64) -> Result<KqWeights> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("eps", format!("{eps} is outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::invalid("n", "need N ≥ 2"));
    }
    let nf = n as f64;
    let w1 = beta / nf - beta * (1.0 - eps) / nf - beta * (nf * nf - nf) / (nf * nf) * (1.0 - eps) / 2.0;
    // p̂(x | x, x'): residual mass on a token outside the predicted set.
    let p_self = (1.0 / nf) * eps / (2.0 * nf - 1.0) + ((nf - 1.0) / nf) * eps / (2.0 * nf - 2.0);
    let w2 = beta * p_self;
    let p_target = (1.0 / nf) * (1.0 - eps) + ((nf - 1.0) / nf) * (1.0 - eps) / 2.0;
    let w3 = beta * (1.0 - p_target);
    Ok(KqWeights { w1, w2, w3 })
}

/// Attention-collapse check: `w₃ − w₁` and `w₃ − w₂` both at least
/// `β/2 − Cβ/N` with `C = 1`, and `w₃ ≥ β/2`.
pub fn kq_gradient_check(beta: f64, n: usize, eps: f64) -> Result<TheoremReport> {
    let k = kq_gradient_weights(beta, n, eps)?;
    let nf = n as f64;
    let bound = beta / 2.0 - beta / nf;
    let gap = (k.w3 - k.w1).min(k.w3 - k.w2);
    let pass = gap >= bound && k.w3 >= beta / 2.0;
    Ok(TheoremReport::new(
        "kq_gradient_weights",
        &[
            ("beta", beta),
            ("n", nf),
            ("eps", eps),
            ("w1", k.w1),
            ("w2", k.w2),
            ("w3", k.w3),
        ],
        bound,
        gap,
        pass,
    ))
}

/// Parameters of the default theorem suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub n: usize,
    pub seed: u64,
    pub draws: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        SuiteParams {
            n: 20,
            seed: 0,
            draws: 100,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

fn random_coeffs(rng: &mut rng::Rng) -> StructuredCoeffs {
    let mut draw = || rng.random_range(0.1..3.0);
    StructuredCoeffs {
        alpha1: draw(),
        alpha2: draw(),
        beta1: draw(),
        beta2: draw(),
        gamma1: draw(),
        gamma2: draw(),
        gamma3: draw(),
    }
}

/// ζ identity over random positive coefficient draws.
pub fn zeta_identity_check(params: &SuiteParams) -> Result<TheoremReport> {
    let config = OneHotConfig::new(params.n)?;
    let world = WorldSpec::toy(params.n, params.seed)?;
    let mut rng = rng::stream(params.seed, Stream::Custom(11));
    let mut worst = 0.0f64;
    for _ in 0..params.draws {
        let c = random_coeffs(&mut rng);
        let x = rng.random_range(0..params.n);
        let y = loop {
            let y = world.attribute_token(rng.random_range(0..params.n));
            if y != world.truth_token(x) || params.n == 1 {
                break y;
            }
        };
        let (_, gap) = zeta_norm_gap(&config, &c, &world, x, y)?;
        let expected = 2.0 * c.alpha1 * c.alpha2 + 2.0 * c.beta1 * c.beta2;
        worst = worst.max((gap - expected).abs() / expected.max(1.0));
    }
    Ok(TheoremReport::new(
        "zeta_identity",
        &[("draws", params.draws as f64), ("n", params.n as f64)],
        1e-12,
        worst,
        worst <= 1e-12,
    ))
}

/// Pre-norm midpoint identity over random coefficients and subject pairs.
pub fn midpoint_check(params: &SuiteParams) -> Result<TheoremReport> {
    let config = OneHotConfig::new(params.n)?;
    let world = WorldSpec::toy(params.n, params.seed)?;
    let mut rng = rng::stream(params.seed, Stream::Custom(12));
    let mut worst = 0.0f64;
    for _ in 0..params.draws {
        let c = random_coeffs(&mut rng);
        let xi = rng.random_range(0..params.n);
        let xj = rng.random_range(0..params.n);
        let r = midpoint_witness(&config, &c, &world, xi, xj)?;
        worst = worst.max(r.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    Ok(TheoremReport::new(
        "midpoint_witness",
        &[("draws", params.draws as f64), ("n", params.n as f64)],
        1e-12,
        worst,
        worst <= 1e-12,
    ))
}

/// Entropy incentive: the closed form at `(ρ, |A|) = (0.5, 2)`, the large-|A|
/// limit `H₂(0.5) = ln 2`, monotonicity in `|A|` and the maximizer over a
/// 99-point `ρ` grid.
pub fn entropy_check() -> Result<TheoremReport> {
    let small = entropy_gap(0.5, 2.0)?;
    let large = entropy_gap(0.5, 1e6)?;
    let limit_err = (large.delta - std::f64::consts::LN_2).abs();
    let monotone = [2.0, 4.0, 16.0, 256.0, 4096.0, 1e6]
        .windows(2)
        .all(|w| entropy_gap(0.3, w[0]).unwrap().delta <= entropy_gap(0.3, w[1]).unwrap().delta);
    let grid: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
    let argmax = grid
        .iter()
        .cloned()
        .max_by(|a, b| entropy_gap(*a, 1e6).unwrap().delta.total_cmp(&entropy_gap(*b, 1e6).unwrap().delta))
        .unwrap();
    let pass = (small.delta - 0.215_762).abs() <= 1e-6 && limit_err <= 1e-3 && monotone && (argmax - 0.5).abs() <= 0.05;
    Ok(TheoremReport::new(
        "entropy_gap",
        &[
            ("delta_rho_half_a2", small.delta),
            ("delta_rho_half_a1e6", large.delta),
            ("limit_error", limit_err),
            ("monotone_in_a", f64::from(u8::from(monotone))),
            ("grid_argmax_rho", argmax),
        ],
        0.215_762,
        small.delta,
        pass,
    ))
}

/// Linear separation after normalization at token `y`: measured margin must
/// equal the closed form to 1e-9 and every pair must be classified
/// correctly; token `x'` must separate too.
///
/// Here `alpha`/`beta` are the coefficients as they appear in the residual
/// at token `y`, after the uniform average over two attended tokens; the
/// value matrix therefore carries `2α`, `2β`.
pub fn separation_suite_check(params: &SuiteParams) -> Result<TheoremReport> {
    let config = OneHotConfig::new(params.n)?;
    let world = WorldSpec::toy(params.n, params.seed)?;
    let coeffs = StructuredCoeffs::symmetric(2.0 * params.alpha, 2.0 * params.beta, 0.0);
    let y = separation_check(&config, &coeffs, &world, SeparatorPosition::Y)?;
    let xp = separation_check(&config, &coeffs, &world, SeparatorPosition::XPrime)?;
    let closed = symmetric_margin_y(params.alpha, params.beta);
    let pass = y.pass && xp.pass && (y.empirical - closed).abs() <= 1e-9;
    let mut report = TheoremReport::new(
        "linear_separation",
        &[
            ("n", params.n as f64),
            ("alpha", params.alpha),
            ("beta", params.beta),
            ("misclassified_y", y.parameters["misclassified"]),
            ("misclassified_x_prime", xp.parameters["misclassified"]),
            ("margin_x_prime", xp.empirical),
        ],
        closed,
        y.empirical,
        pass,
    );
    report.counterexample = y.counterexample.or(xp.counterexample);
    Ok(report)
}

/// The six claim reports emitted by `verify`.
pub fn run_suite(params: &SuiteParams) -> Result<Vec<TheoremReport>> {
    let config = OneHotConfig::new(params.n)?;
    let world = WorldSpec::toy(params.n, params.seed)?;
    // Positive positional coefficients with zero net contribution.
    let symmetric = StructuredCoeffs {
        gamma1: 0.5,
        gamma2: 1.0,
        gamma3: 0.5,
        ..StructuredCoeffs::symmetric(params.alpha, params.beta, 0.0)
    };
    Ok(vec![
        zeta_identity_check(params)?,
        sharpening_check(&config, &symmetric, &world, None)?,
        separation_suite_check(params)?,
        midpoint_check(params)?,
        entropy_check()?,
        kq_gradient_check(5.0, 1000, 0.01)?,
    ])
}
