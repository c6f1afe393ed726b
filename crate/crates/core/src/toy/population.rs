//! Exact population loss and gradient of the toy model.
//!
//! The data distribution is enumerated prefix by prefix: each distinct prefix
//! `z_{1:t}` carries its probability and the conditional distribution `q` of
//! the next token, so the expected cross-entropy is `Σ P(prefix) · H(q, p̂)`.
//! The gradient with respect to `W` uses the layer-norm projector
//!
//! ```text
//! ∂L/∂v = (I − θθᵀ) Uᵀ β (p̂ − q) / ‖v‖,   θ = v / ‖v‖
//! ∂L/∂W = ∂L/∂v ⊗ (1/t) Σ_s (e_{z_s} + p_s)
//! ```

use ndarray::{Array1, Array2};
use super::{residual, OneHotConfig, ValueMatrix};
use crate::datagen::{sample_example, WorldSpec};
use crate::error::{check_probability, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct PopulationEstimate {
    pub loss: f64,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct McEstimate {
    pub loss: f64,
    pub loss_stderr: f64,
    pub grad: Array2<f64>,
    pub samples: usize,
}

pub(crate) struct Accumulator<'a> {
    config: &'a OneHotConfig,
    w: &'a ValueMatrix,
    grad: Array2<f64>,
    loss: f64,
    dv: Array1<f64>,
}

impl<'a> Accumulator<'a> {
    pub(crate) fn new(config: &'a OneHotConfig, w: &'a ValueMatrix) -> Self {
        let d = config.d();
        Accumulator {
            config,
            w,
            grad: Array2::zeros((d, d)),
            loss: 0.0,
            dv: Array1::zeros(d),
        }
    }

    /// Adds `weight · H(q, p̂(prefix))` and its gradient; returns the
    /// cross-entropy of this prefix.
    pub(crate) fn add(&mut self, prefix: &[usize], weight: f64, q: &[f64]) -> Result<f64> {
        let layout = self.config.layout();
        let beta = self.config.beta;
        let t = prefix.len() as f64;
        let (v, cols) = residual(self.config, self.w, prefix);
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateNorm(format!("prefix {prefix:?}")));
        }
        let vocab = layout.vocab();
        let u0 = layout.u(0);
        let scores: Vec<f64> = (0..vocab).map(|k| beta * v[u0 + k] / norm).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();

        let mut ce = 0.0;
        let mut proj = 0.0;
        self.dv.fill(0.0);
        for k in 0..vocab {
            let log_p = scores[k] - lse;
            if q[k] > 0.0 {
                ce -= q[k] * log_p;
            }
            let dlogit = beta * (log_p.exp() - q[k]);
            proj += v[u0 + k] / norm * dlogit;
            self.dv[u0 + k] = dlogit / norm;
        }
        // dv = (Uᵀ dℓ − θ (θ·Uᵀdℓ)) / ‖v‖
        self.dv.scaled_add(-proj / (norm * norm), &v);

        self.loss += weight * ce;
        for (j, count) in cols {
            let mut col = self.grad.column_mut(j);
            col.scaled_add(weight * count / t, &self.dv);
        }
        Ok(ce)
    }

    pub(crate) fn finish(self) -> (f64, Array2<f64>) {
        (self.loss, self.grad)
    }
}

fn check_position(t: usize) -> Result<()> {
    if !(1..=3).contains(&t) {
        return Err(Error::invalid("t", format!("position {t} not in 1..=3")));
    }
    Ok(())
}

/// Exact `L_t(W)` and `∇L_t(W)` by enumeration over the data distribution.
pub fn population_loss_and_grad(
    config: &OneHotConfig,
    w: &ValueMatrix,
    world: &WorldSpec,
    rho: f64,
    t: usize,
) -> Result<PopulationEstimate> {
    check_position(t)?;
    check_probability("rho", rho)?;
    config.check_world(world)?;
    let n = config.n;
    if n > config.max_enumeration_n {
        return Err(Error::EnumerationTooLarge {
            n,
            limit: config.max_enumeration_n,
        });
    }
    let nf = n as f64;
    let vocab = 2 * n;
    let mut acc = Accumulator::new(config, w);
    let mut q = vec![0.0; vocab];
    let false_mass = (1.0 - rho) / nf;

    match t {
        1 => {
            for x in 0..n {
                q.fill(0.0);
                q[n..].fill(false_mass);
                q[world.truth_token(x)] += rho;
                acc.add(&[x], 1.0 / nf, &q)?;
            }
        }
        2 => {
            q.fill(0.0);
            q[..n].fill(1.0 / nf);
            for x in 0..n {
                for y in n..vocab {
                    let p_y = if y == world.truth_token(x) { rho } else { 0.0 } + false_mass;
                    if p_y > 0.0 {
                        acc.add(&[x, y], p_y / nf, &q)?;
                    }
                }
            }
        }
        _ => {
            for x in 0..n {
                for y in n..vocab {
                    let true_mass = if y == world.truth_token(x) { rho } else { 0.0 };
                    let p_y = true_mass + false_mass;
                    if p_y == 0.0 {
                        continue;
                    }
                    let posterior = true_mass / p_y;
                    for xp in 0..n {
                        q.fill(0.0);
                        q[n..].fill((1.0 - posterior) / nf);
                        q[world.truth_token(xp)] += posterior;
                        acc.add(&[x, y, xp], p_y / (nf * nf), &q)?;
                    }
                }
            }
        }
    }
    Ok(PopulationEstimate {
        loss: acc.loss,
        grad: acc.grad,
    })
}

/// Monte-Carlo estimate of `L_t` and `∇L_t` from `samples` draws.
pub fn population_loss_and_grad_mc(
    config: &OneHotConfig,
    w: &ValueMatrix,
    world: &WorldSpec,
    rho: f64,
    t: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    check_position(t)?;
    config.check_world(world)?;
    if samples < 2 {
        return Err(Error::invalid("samples", "need at least two samples"));
    }
    let mut acc = Accumulator::new(config, w);
    let mut q = vec![0.0; 2 * config.n];
    let weight = 1.0 / samples as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let tokens = sample_example(world, rho, rng)?.tokens();
        q.fill(0.0);
        q[tokens[t]] = 1.0;
        let ce = acc.add(&tokens[..t], weight, &q)?;
        sum += ce;
        sum_sq += ce * ce;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0);
    Ok(McEstimate {
        loss: acc.loss,
        loss_stderr: (var / m).sqrt(),
        grad: acc.grad,
        samples,
    })
}

/// Draws a uniformly random matrix with entries in `[-scale, scale]`.
#[cfg(test)]
pub(crate) fn random_matrix(d: usize, scale: f64, rng: &mut Rng) -> ValueMatrix {
    use rand::Rng as _;
    ValueMatrix(Array2::from_shape_fn((d, d), |_| rng.random_range(-scale..=scale)))
}
