use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{OneHotConfig, ValueMatrix};
use crate::datagen::WorldSpec;
use crate::error::Result;

/// Coefficients of the idealized block form of `W`:
///
/// ```text
/// W e_x = -α₁ e_x + β₁ u_{g(x)}
/// W e_y =  α₂ e_{g⁻¹(y)} - β₂ u_y
/// W p_1 =  γ₁ (Σ u_y - Σ u_x)
/// W p_2 = -γ₂ (Σ u_y - Σ u_x)
/// W p_3 =  γ₃ (Σ u_y - Σ u_x)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructuredCoeffs {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl StructuredCoeffs {
    /// `α₁ = α₂ = α`, `β₁ = β₂ = β`, all γ equal to `gamma`.
    pub fn symmetric(alpha: f64, beta: f64, gamma: f64) -> Self {
        StructuredCoeffs {
            alpha1: alpha,
            alpha2: alpha,
            beta1: beta,
            beta2: beta,
            gamma1: gamma,
            gamma2: gamma,
            gamma3: gamma,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.alpha1, self.alpha2, self.beta1, self.beta2, self.gamma1, self.gamma2, self.gamma3,
        ]
    }

    pub fn all_positive(&self) -> bool {
        self.as_array().iter().all(|&c| c > 0.0)
    }

    /// Net positional coefficient seen by a token attending to positions 1..3.
    pub fn gamma_bar(&self) -> f64 {
        self.gamma1 - self.gamma2 + self.gamma3
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let [a1, a2, b1, b2, g1, g2, g3] = self.as_array().map(|c| c * factor);
        StructuredCoeffs {
            alpha1: a1,
            alpha2: a2,
            beta1: b1,
            beta2: b2,
            gamma1: g1,
            gamma2: g2,
            gamma3: g3,
        }
    }
}

pub fn build_structured_w(config: &OneHotConfig, coeffs: &StructuredCoeffs, world: &WorldSpec) -> Result<ValueMatrix> {
    config.check_world(world)?;
    let layout = config.layout();
    let n = config.n;
    let inv = world.inverse()?;
    let mut w = Array2::<f64>::zeros((layout.d(), layout.d()));
    for x in 0..n {
        let gx = world.truth_token(x);
        w[[layout.e(x), layout.e(x)]] = -coeffs.alpha1;
        w[[layout.u(gx), layout.e(x)]] = coeffs.beta1;
    }
    for a in 0..n {
        let y = world.attribute_token(a);
        w[[layout.e(inv[a]), layout.e(y)]] = coeffs.alpha2;
        w[[layout.u(y), layout.e(y)]] = -coeffs.beta2;
    }
    for (t, gamma) in [(1, coeffs.gamma1), (2, -coeffs.gamma2), (3, coeffs.gamma3)] {
        for z in 0..2 * n {
            let sign = if z >= n { 1.0 } else { -1.0 };
            w[[layout.u(z), layout.p(t)]] = sign * gamma;
        }
    }
    Ok(ValueMatrix(w))
}

/// Per-block means of a value matrix, signed as they appear in `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    /// Mean of `W[u_{g(x)}, e_x]`.
    pub ex_to_ugx: f64,
    /// Mean of the diagonal `W[e_x, e_x]` (negative identity when learned).
    pub ex_to_ex: f64,
    /// Mean of `W[u_y, e_y]`.
    pub ey_to_uy: f64,
    /// Mean of `W[e_{g⁻¹(y)}, e_y]`.
    pub ey_to_eginv: f64,
    /// Mean of `W[u_z, p_t]·sign(z)` with sign +1 on attributes, -1 on subjects.
    pub positional: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredFit {
    pub coeffs: StructuredCoeffs,
    /// Frobenius norm of `W - build_structured_w(coeffs)`.
    pub residual: f64,
    /// Largest absolute entry of that difference.
    pub residual_max: f64,
    pub blocks: BlockReport,
    pub positive: bool,
}

/// Least-squares projection onto the structured family. Each coefficient
/// owns a disjoint set of entries, so its estimate is the signed mean over
/// those entries.
pub fn fit_structured(config: &OneHotConfig, w: &ValueMatrix, world: &WorldSpec) -> Result<StructuredFit> {
    config.check_world(world)?;
    let layout = config.layout();
    let n = config.n;
    let nf = n as f64;
    let inv = world.inverse()?;

    let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / nf;
    let ex_to_ugx = mean(&|x| w.0[[layout.u(world.truth_token(x)), layout.e(x)]]);
    let ex_to_ex = mean(&|x| w.0[[layout.e(x), layout.e(x)]]);
    let ey_to_uy = mean(&|a| {
        let y = world.attribute_token(a);
        w.0[[layout.u(y), layout.e(y)]]
    });
    let ey_to_eginv = mean(&|a| w.0[[layout.e(inv[a]), layout.e(world.attribute_token(a))]]);
    let mut positional = [0.0; 3];
    for (t, slot) in positional.iter_mut().enumerate() {
        *slot = (0..2 * n)
            .map(|z| {
                let sign = if z >= n { 1.0 } else { -1.0 };
                sign * w.0[[layout.u(z), layout.p(t + 1)]]
            })
            .sum::<f64>()
            / (2.0 * nf);
    }

    let coeffs = StructuredCoeffs {
        alpha1: -ex_to_ex,
        alpha2: ey_to_eginv,
        beta1: ex_to_ugx,
        beta2: -ey_to_uy,
        gamma1: positional[0],
        gamma2: -positional[1],
        gamma3: positional[2],
    };
    let rebuilt = build_structured_w(config, &coeffs, world)?;
    let diff = &w.0 - &rebuilt.0;
    let residual = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let residual_max = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(StructuredFit {
        coeffs,
        residual,
        residual_max,
        blocks: BlockReport {
            ex_to_ugx,
            ex_to_ex,
            ey_to_uy,
            ey_to_eginv,
            positional,
        },
        positive: coeffs.all_positive(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::forward_logits;

    fn generic() -> StructuredCoeffs {
        StructuredCoeffs {
            alpha1: 0.7,
            alpha2: 1.3,
            beta1: 0.9,
            beta2: 1.1,
            gamma1: 0.2,
            gamma2: 0.35,
            gamma3: 0.15,
        }
    }

    #[test]
    fn zero_coefficients_give_zero_matrix() {
        let config = OneHotConfig::new(6).unwrap();
        let world = WorldSpec::toy(6, 1).unwrap();
        let w = build_structured_w(&config, &StructuredCoeffs::default(), &world).unwrap();
        assert!(w.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_alpha1_is_negative_identity_on_subjects() {
        let config = OneHotConfig::new(6).unwrap();
        let world = WorldSpec::toy(6, 1).unwrap();
        let coeffs = StructuredCoeffs {
            alpha1: 1.0,
            ..Default::default()
        };
        let w = build_structured_w(&config, &coeffs, &world).unwrap();
        for i in 0..config.d() {
            for j in 0..config.d() {
                let expected = if i == j && j < 6 { -1.0 } else { 0.0 };
                assert_eq!(w.0[[i, j]], expected);
            }
        }
    }

    #[test]
    fn attribute_columns_match_definition() {
        let config = OneHotConfig::new(8).unwrap();
        let world = WorldSpec::toy(8, 2).unwrap();
        let c = generic();
        let w = build_structured_w(&config, &c, &world).unwrap();
        let layout = config.layout();
        let inv = world.inverse().unwrap();
        for a in 0..8 {
            let y = world.attribute_token(a);
            let mut expected = ndarray::Array1::<f64>::zeros(config.d());
            expected[layout.e(inv[a])] = c.alpha2;
            expected[layout.u(y)] = -c.beta2;
            assert_eq!(w.0.column(layout.e(y)), expected);
        }
    }

    #[test]
    fn fit_recovers_coefficients() {
        let config = OneHotConfig::new(7).unwrap();
        let world = WorldSpec::toy(7, 3).unwrap();
        let c = generic();
        let w = build_structured_w(&config, &c, &world).unwrap();
        let fit = fit_structured(&config, &w, &world).unwrap();
        for (got, want) in fit.coeffs.as_array().iter().zip(c.as_array()) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(fit.residual < 1e-15);
        assert!(fit.positive);
    }

    #[test]
    fn sharpened_argmax_and_false_tie() {
        let config = OneHotConfig::new(10).unwrap();
        let world = WorldSpec::toy(10, 4).unwrap();
        let w = build_structured_w(&config, &generic(), &world).unwrap();
        let (x, xp) = (2, 5);
        let out = forward_logits(&config, &w, &[x, world.truth_token(x), xp]).unwrap();
        assert_eq!(super::super::argmax(&out.logits), world.truth_token(xp));

        let y = (0..10)
            .map(|a| world.attribute_token(a))
            .find(|&y| y != world.truth_token(x) && y != world.truth_token(xp))
            .unwrap();
        let out = forward_logits(&config, &w, &[x, y, xp]).unwrap();
        assert_eq!(out.logits[world.truth_token(x)], out.logits[world.truth_token(xp)]);
    }

    #[test]
    fn non_bijective_world_rejected() {
        let config = OneHotConfig::new(3).unwrap();
        let world = WorldSpec::new(3, 3, vec![0, 0, 2], 0).unwrap();
        assert!(build_structured_w(&config, &generic(), &world).is_err());
    }
}
