//! Variance–invariance–covariance regularised loss with analytic gradients.
//!
//! For two `n × d` embedding batches `Z` and `Z'`:
//!
//! * invariance: mean of `(Z − Z')²` over all entries;
//! * variance: for each batch, the mean over dimensions of
//!   `max(0, γ − √(Var_j + ε))` with the unbiased per-dimension variance,
//!   averaged over the two batches;
//! * covariance: for each batch, the sum of squared off-diagonal entries of
//!   the unbiased covariance matrix divided by `d`, averaged over the two
//!   batches;
//! * total: `λ·invariance + μ·variance + φ·covariance`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VicRegConfig {
    /// Invariance weight λ.
    pub lambda_inv: f64,
    /// Variance weight μ.
    pub mu_var: f64,
    /// Covariance weight φ.
    pub phi_cov: f64,
    /// Target standard deviation γ.
    pub gamma: f64,
    /// Variance stabiliser ε.
    pub epsilon: f64,
}

impl Default for VicRegConfig {
    fn default() -> Self {
        Self {
            lambda_inv: 10.0,
            mu_var: 10.0,
            phi_cov: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
        }
    }
}

impl VicRegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_inv", self.lambda_inv), ("mu_var", self.mu_var), ("phi_cov", self.phi_cov)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be a finite non-negative weight, got {v}")));
            }
        }
        if !(self.gamma > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::validation("VICReg gamma and epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.invariance, self.variance, self.covariance]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss value plus its gradients with respect to both embedding batches.
#[derive(Debug, Clone)]
pub struct LossWithGrad {
    pub loss: LossBreakdown,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

pub fn vicreg_loss(z_a: &Array2<f64>, z_b: &Array2<f64>, cfg: &VicRegConfig) -> Result<LossBreakdown> {
    Ok(vicreg_loss_with_grad(z_a, z_b, cfg)?.loss)
}

struct Branch {
    variance: f64,
    covariance: f64,
    grad_variance: Array2<f64>,
    grad_covariance: Array2<f64>,
}

fn branch(x: &Array2<f64>, cfg: &VicRegConfig) -> Branch {
    let (n, d) = x.dim();
    let nm1 = (n - 1) as f64;
    let mean = x.mean_axis(Axis(0)).expect("n ≥ 2");
    let xc = x - &mean;
    let var: Array1<f64> = xc.map_axis(Axis(0), |col| col.dot(&col) / nm1);
    let std = var.mapv(|v| (v + cfg.epsilon).sqrt());

    let hinge = std.mapv(|s| (cfg.gamma - s).max(0.0));
    let variance = hinge.sum() / d as f64;
    // d/dx_ij of mean_j max(0, γ − s_j) = −[s_j < γ]·(x_ij − m_j) / (d·(n−1)·s_j)
    let coef = Array1::from_iter(
        std.iter()
            .map(|&s| if s < cfg.gamma { -1.0 / (d as f64 * nm1 * s) } else { 0.0 }),
    );
    let grad_variance = &xc * &coef;

    let mut cov = xc.t().dot(&xc) / nm1;
    cov.diag_mut().fill(0.0);
    let covariance = cov.iter().map(|c| c * c).sum::<f64>() / d as f64;
    // Columns of xc sum to zero, so the centring step adds no term.
    let grad_covariance = xc.dot(&cov) * (4.0 / (d as f64 * nm1));

    Branch {
        variance,
        covariance,
        grad_variance,
        grad_covariance,
    }
}

pub fn vicreg_loss_with_grad(z_a: &Array2<f64>, z_b: &Array2<f64>, cfg: &VicRegConfig) -> Result<LossWithGrad> {
    let (n, d) = z_a.dim();
    if z_b.dim() != (n, d) {
        return Err(Error::validation(format!(
            "embedding batches differ in shape: {:?} vs {:?}",
            z_a.dim(),
            z_b.dim()
        )));
    }
    if n < 2 {
        return Err(Error::validation(format!(
            "VICReg needs at least 2 samples per batch for the variance term, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::validation("embeddings must have at least one dimension"));
    }

    let diff = z_a - z_b;
    let count = (n * d) as f64;
    let invariance = diff.iter().map(|v| v * v).sum::<f64>() / count;
    let grad_inv = &diff * (2.0 / count);

    let a = branch(z_a, cfg);
    let b = branch(z_b, cfg);
    let variance = 0.5 * (a.variance + b.variance);
    let covariance = 0.5 * (a.covariance + b.covariance);
    let total = cfg.lambda_inv * invariance + cfg.mu_var * variance + cfg.phi_cov * covariance;

    let side = |g_var: Array2<f64>, g_cov: Array2<f64>, sign: f64| {
        &grad_inv * (sign * cfg.lambda_inv) + g_var * (0.5 * cfg.mu_var) + g_cov * (0.5 * cfg.phi_cov)
    };
    Ok(LossWithGrad {
        loss: LossBreakdown {
            total,
            invariance,
            variance,
            covariance,
        },
        grad_a: side(a.grad_variance, a.grad_covariance, 1.0),
        grad_b: side(b.grad_variance, b.grad_covariance, -1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seed::rng(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identical_views_have_zero_invariance() {
        let z = random_batch(8, 5, 1);
        assert_eq!(vicreg_loss(&z, &z, &Default::default()).unwrap().invariance, 0.0);
    }

    #[test]
    fn hand_worked_two_by_two_batch() {
        let z = array![[1.0, 0.0], [-1.0, 0.0]];
        let cfg = VicRegConfig::default();
        let l = vicreg_loss(&z, &z, &cfg).unwrap();
        assert!((l.variance - 0.495).abs() < 1e-12, "{l:?}");
        assert_eq!(l.covariance, 0.0);
        assert_eq!(l.invariance, 0.0);
        assert!((l.total - 10.0 * 0.495).abs() < 1e-12);
    }

    #[test]
    fn constant_batch_variance_term() {
        let z = Array2::from_elem((6, 4), 3.5);
        let cfg = VicRegConfig::default();
        let l = vicreg_loss(&z, &z, &cfg).unwrap();
        assert!((l.variance - (cfg.gamma - cfg.epsilon.sqrt())).abs() < 1e-9);
        assert_eq!(l.covariance, 0.0);
    }

    #[test]
    fn single_row_is_rejected() {
        let z = Array2::zeros((1, 3));
        assert!(matches!(vicreg_loss(&z, &z, &Default::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(vicreg_loss(&Array2::zeros((3, 3)), &Array2::zeros((3, 2)), &Default::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn components_nonnegative_and_recompose(seed in any::<u64>(), l in 0.0f64..20.0, m in 0.0f64..20.0, p in 0.0f64..5.0) {
            let a = random_batch(7, 6, seed);
            let b = random_batch(7, 6, seed.wrapping_add(1));
            let cfg = VicRegConfig { lambda_inv: l, mu_var: m, phi_cov: p, ..Default::default() };
            let r = vicreg_loss(&a, &b, &cfg).unwrap();
            prop_assert!(r.invariance >= 0.0 && r.variance >= 0.0 && r.covariance >= 0.0);
            let recomposed = l * r.invariance + m * r.variance + p * r.covariance;
            prop_assert!((r.total - recomposed).abs() <= 1e-6 * r.total.abs().max(1e-12));
        }

        #[test]
        fn symmetric_in_arguments(seed in any::<u64>()) {
            let a = random_batch(5, 4, seed);
            let b = random_batch(5, 4, !seed);
            let cfg = VicRegConfig::default();
            let ab = vicreg_loss(&a, &b, &cfg).unwrap();
            let ba = vicreg_loss(&b, &a, &cfg).unwrap();
            prop_assert!((ab.total - ba.total).abs() < 1e-9);
            prop_assert!((ab.variance - ba.variance).abs() < 1e-9);
            prop_assert!((ab.covariance - ba.covariance).abs() < 1e-9);
        }

        #[test]
        fn invariant_under_joint_row_permutation(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = random_batch(9, 3, seed);
            let b = random_batch(9, 3, seed ^ 77);
            let mut order: Vec<usize> = (0..9).collect();
            order.shuffle(&mut crate::seed::rng(seed));
            let pa = a.select(Axis(0), &order);
            let pb = b.select(Axis(0), &order);
            let cfg = VicRegConfig::default();
            let x = vicreg_loss(&a, &b, &cfg).unwrap();
            let y = vicreg_loss(&pa, &pb, &cfg).unwrap();
            prop_assert!((x.invariance - y.invariance).abs() < 1e-9);
            prop_assert!((x.variance - y.variance).abs() < 1e-9);
            prop_assert!((x.covariance - y.covariance).abs() < 1e-9);
        }

        #[test]
        fn single_column_has_no_covariance(seed in any::<u64>()) {
            let a = random_batch(6, 1, seed);
            let b = random_batch(6, 1, seed ^ 1);
            prop_assert_eq!(vicreg_loss(&a, &b, &Default::default()).unwrap().covariance, 0.0);
        }
    }
}
