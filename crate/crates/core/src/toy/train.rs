use serde::{Deserialize, Serialize};

use super::population::Accumulator;
use super::{population_loss_and_grad, OneHotConfig, ValueMatrix};
use crate::datagen::{sample_batch, WorldSpec};
use crate::error::{check_probability, Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct SequentialIterates {
    pub w1: ValueMatrix,
    pub w2: ValueMatrix,
    pub w3: ValueMatrix,
}

/// Two full-gradient steps on `L₁` followed by one on `L₃`, from `W₀ = 0`
/// with step size `eta` (default `N / ρ`).
pub fn sequential_training(
    config: &OneHotConfig,
    world: &WorldSpec,
    rho: f64,
    eta: Option<f64>,
) -> Result<SequentialIterates> {
    check_probability("rho", rho)?;
    if config.positional {
        return Err(Error::invalid(
            "config.positional",
            "sequential training runs on the variant without positional embeddings",
        ));
    }
    if rho == 0.0 && eta.is_none() {
        return Err(Error::invalid("rho", "default step size N/ρ needs ρ > 0"));
    }
    let eta = eta.unwrap_or(config.n as f64 / rho);
    let step = |w: &ValueMatrix, t: usize| -> Result<ValueMatrix> {
        let est = population_loss_and_grad(config, w, world, rho, t)?;
        let mut next = w.clone();
        next.0.scaled_add(-eta, &est.grad);
        Ok(next)
    };
    let w0 = ValueMatrix::zeros(config.d());
    let w1 = step(&w0, 1)?;
    let w2 = step(&w1, 1)?;
    let w3 = step(&w2, 3)?;
    Ok(SequentialIterates { w1, w2, w3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub snapshot_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub loss: f64,
    pub w: ValueMatrix,
}

/// Minibatch SGD on the value matrix only, from zero initialization.
///
/// The per-sequence loss is the sum of the three next-token cross-entropies,
/// averaged over the batch. Snapshots are taken at step 0, every
/// `snapshot_every` steps and after the last step; `loss` is the batch loss
/// of the step that produced the snapshot (NaN at step 0).
pub fn minibatch_sgd_train(config: &OneHotConfig, world: &WorldSpec, sgd: &SgdConfig) -> Result<Vec<Snapshot>> {
    check_probability("rho", sgd.rho)?;
    config.check_world(world)?;
    if sgd.batch_size == 0 || sgd.snapshot_every == 0 {
        return Err(Error::invalid("batch_size/snapshot_every", "must be positive"));
    }
    let mut rng = rng::stream(sgd.seed, Stream::Train);
    let mut w = ValueMatrix::zeros(config.d());
    let mut snapshots = vec![Snapshot {
        step: 0,
        loss: f64::NAN,
        w: w.clone(),
    }];
    let vocab = 2 * config.n;
    let mut q = vec![0.0; vocab];
    let weight = 1.0 / sgd.batch_size as f64;
    for step in 1..=sgd.steps {
        let batch = sample_batch(world, sgd.rho, sgd.batch_size, &mut rng)?;
        let mut acc = Accumulator::new(config, &w);
        for example in &batch {
            let tokens = example.tokens();
            for t in 1..=3 {
                q.fill(0.0);
                q[tokens[t]] = 1.0;
                acc.add(&tokens[..t], weight, &q).map_err(|_| Error::ToyDiverged {
                    step,
                    snapshot: Box::new(w.clone()),
                })?;
            }
        }
        let (loss, grad) = acc.finish();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::ToyDiverged {
                step,
                snapshot: Box::new(w),
            });
        }
        w.0.scaled_add(-sgd.lr, &grad);
        if step % sgd.snapshot_every == 0 || step == sgd.steps {
            snapshots.push(Snapshot {
                step,
                loss,
                w: w.clone(),
            });
        }
    }
    Ok(snapshots)
}
