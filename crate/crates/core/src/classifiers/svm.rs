//! One-vs-rest soft-margin SVMs with a radial-basis kernel, trained by
//! sequential minimal optimisation with second-order working-set selection.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::blob::Blob;
use super::{check_labels, check_query, FewShotClassifier, SupportSet};
use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// Box constraint.
    pub c: f64,
    /// Kernel inverse width; `None` uses `1 / (d · Var(X))` over the support.
    pub gamma: Option<f64>,
    /// KKT violation tolerance for stopping.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tolerance: 1e-3,
            max_iterations: 10_000_000,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::validation("svm.c must be positive"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::validation("svm.gamma must be positive"));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("svm.tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SvmModel {
    config: SvmConfig,
    gamma: f64,
    class_count: usize,
    support: Array2<f64>,
    /// Classes with a fitted binary machine, ascending.
    classes: Vec<usize>,
    /// `y_t α_t` per support row (rows) and machine (columns).
    dual_coef: Array2<f64>,
    rho: Vec<f64>,
}

fn squared_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r))
}

fn rbf_kernel(a: &Array2<f64>, b: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let na = squared_norms(a);
    let nb = squared_norms(b);
    let mut k = a.dot(&b.t());
    for ((i, j), v) in k.indexed_iter_mut() {
        let d2 = (na[i] + nb[j] - 2.0 * *v).max(0.0);
        *v = (-gamma * d2).exp();
    }
    k
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    converged: bool,
}

/// Solves `min ½ αᵀQα − eᵀα` s.t. `0 ≤ α ≤ C`, `yᵀα = 0`, with
/// `Q_ij = y_i y_j K_ij`.
fn smo(k: &Array2<f64>, y: &[f64], c: f64, tolerance: f64, max_iterations: usize) -> Solution {
    let m = y.len();
    let mut alpha = vec![0.0; m];
    let mut grad = vec![-1.0; m];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let in_up = |t: usize, a: &[f64]| (y[t] > 0.0 && !upper(a[t])) || (y[t] < 0.0 && !lower(a[t]));
    let in_low = |t: usize, a: &[f64]| (y[t] > 0.0 && !lower(a[t])) || (y[t] < 0.0 && !upper(a[t]));

    let mut converged = false;
    for _ in 0..max_iterations {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..m {
            if in_up(t, &alpha) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            for t in 0..m {
                if !in_low(t, &alpha) {
                    continue;
                }
                let yg = y[t] * grad[t];
                gmax2 = gmax2.max(yg);
                let diff = gmax + yg;
                if diff > 0.0 {
                    let mut quad = k[[i, i]] + k[[t, t]] - 2.0 * k[[i, t]];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -diff * diff / quad;
                    if obj <= best {
                        best = obj;
                        j = t;
                    }
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax + gmax2 < tolerance {
            converged = true;
            break;
        }

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = k[[i, i]] + k[[j, j]] - 2.0 * k[[i, j]];
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..m {
            grad[t] += y[t] * (y[i] * k[[t, i]] * di + y[j] * k[[t, j]] * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut free_sum) = (0usize, 0.0);
    for t in 0..m {
        let yg = y[t] * grad[t];
        let at_upper = upper(alpha[t]);
        let at_lower = lower(alpha[t]);
        if at_upper || at_lower {
            if (at_upper && y[t] < 0.0) || (at_lower && y[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { 0.5 * (ub + lb) };
    Solution { alpha, rho, converged }
}

pub fn svm_fit(support: &SupportSet, class_count: usize, config: &SvmConfig) -> Result<SvmModel> {
    check_labels(support, class_count)?;
    config.validate()?;
    let classes = support.classes();
    if classes.len() < 2 {
        return Err(Error::validation("SVM needs at least two classes in the support set"));
    }
    let x = support.features.mapv(f64::from);
    let gamma = match config.gamma {
        Some(g) => g,
        None => {
            let var = x.var(0.0);
            if var > 0.0 {
                1.0 / (x.ncols() as f64 * var)
            } else {
                1.0
            }
        }
    };
    let k = rbf_kernel(&x, &x, gamma);
    let machines: Vec<(Vec<f64>, f64)> = classes
        .par_iter()
        .map(|&c| {
            let y: Vec<f64> = support.labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let sol = smo(&k, &y, config.c, config.tolerance, config.max_iterations);
            if !sol.converged {
                log::warn!("SVM for class {c} stopped at the iteration limit before converging");
            }
            let coef = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).collect();
            (coef, sol.rho)
        })
        .collect();
    let mut dual_coef = Array2::zeros((x.nrows(), classes.len()));
    let mut rho = Vec::with_capacity(classes.len());
    for (col, (coef, r)) in machines.into_iter().enumerate() {
        dual_coef.column_mut(col).assign(&Array1::from(coef));
        rho.push(r);
    }
    Ok(SvmModel {
        config: config.clone(),
        gamma,
        class_count,
        support: x,
        classes,
        dual_coef,
        rho,
    })
}

pub fn svm_predict(model: &SvmModel, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
    check_query(&query, model.support.ncols())?;
    let decisions = model.decision_function(query);
    Ok(decisions
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            model.classes[best]
        })
        .collect())
}

impl SvmModel {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Decision values, one column per fitted class.
    pub fn decision_function(&self, query: ArrayView2<'_, f32>) -> Array2<f64> {
        let q = query.mapv(f64::from);
        let mut d = rbf_kernel(&q, &self.support, self.gamma).dot(&self.dual_coef);
        for mut row in d.outer_iter_mut() {
            for (v, r) in row.iter_mut().zip(&self.rho) {
                *v -= r;
            }
        }
        d
    }

    pub(crate) fn to_blob(&self) -> Blob {
        let mut b = Blob::new(json!({
            "kind": "svm",
            "config": self.config,
            "gamma": self.gamma,
            "class_count": self.class_count,
            "classes": self.classes,
            "rho": self.rho,
        }));
        b.insert("support", self.support.clone().into_dyn());
        b.insert("dual_coef", self.dual_coef.clone().into_dyn());
        b
    }

    pub(crate) fn from_blob(b: &Blob) -> Result<Self> {
        let bad = |what: &str| Error::format("svm blob", format!("missing {what}"));
        let config: SvmConfig = serde_json::from_value(b.meta["config"].clone()).map_err(|_| bad("config"))?;
        let classes: Vec<usize> = serde_json::from_value(b.meta["classes"].clone()).map_err(|_| bad("classes"))?;
        let rho: Vec<f64> = serde_json::from_value(b.meta["rho"].clone()).map_err(|_| bad("rho"))?;
        let dual_coef = b.matrix("dual_coef")?;
        if dual_coef.ncols() != classes.len() || rho.len() != classes.len() {
            return Err(Error::format("svm blob", "machine count mismatch"));
        }
        Ok(Self {
            config,
            gamma: b.meta["gamma"].as_f64().ok_or_else(|| bad("gamma"))?,
            class_count: b.meta["class_count"].as_u64().ok_or_else(|| bad("class_count"))? as usize,
            support: b.matrix("support")?,
            classes,
            dual_coef,
            rho,
        })
    }
}

impl FewShotClassifier for SvmModel {
    type Config = SvmConfig;

    fn fit(support: &SupportSet, class_count: usize, config: &SvmConfig, _seed: u64) -> Result<Self> {
        svm_fit(support, class_count, config)
    }

    fn predict(&self, query: ArrayView2<'_, f32>) -> Result<Vec<usize>> {
        svm_predict(self, query)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::testutil::blobs;
    use ndarray::array;

    fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
        pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
    }

    #[test]
    fn separated_clusters_on_the_first_axis() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let jitter = i as f32 * 0.05;
            rows.extend([10.0 + jitter, jitter, -jitter]);
            labels.push(0);
            rows.extend([-10.0 - jitter, -jitter, jitter]);
            labels.push(1);
        }
        let s = SupportSet::originals(Array2::from_shape_vec((20, 3), rows).unwrap(), labels.clone()).unwrap();
        let m = svm_fit(&s, 2, &SvmConfig::default()).unwrap();
        assert_eq!(svm_predict(&m, s.features.view()).unwrap(), labels);
        let held_out = array![[9.5, 0.3, 0.1], [-10.4, 0.2, -0.2], [11.0, -0.1, 0.0]];
        assert_eq!(svm_predict(&m, held_out.view()).unwrap(), [0, 1, 0]);
    }

    #[test]
    fn three_gaussian_blobs() {
        let train = blobs(3, 20, 10, 0.1, 10.0, 4);
        let test = blobs(3, 100, 10, 0.1, 10.0, 4);
        let m = svm_fit(&train, 3, &SvmConfig::default()).unwrap();
        let acc = accuracy(&svm_predict(&m, test.features.view()).unwrap(), &test.labels);
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn single_class_is_rejected() {
        let s = SupportSet::originals(array![[0.0], [1.0]], vec![1, 1]).unwrap();
        assert!(matches!(svm_fit(&s, 2, &SvmConfig::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn solver_satisfies_the_equality_constraint_and_box() {
        let s = blobs(2, 15, 4, 1.0, 1.0, 8);
        let x = s.features.mapv(f64::from);
        let k = rbf_kernel(&x, &x, 0.5);
        let y: Vec<f64> = s.labels.iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect();
        let sol = smo(&k, &y, 1.0, 1e-6, 100_000);
        assert!(sol.converged);
        let balance: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        assert!(balance.abs() < 1e-9);
        assert!(sol.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn deterministic_refit() {
        let s = blobs(4, 6, 5, 0.5, 2.0, 2);
        let a = svm_fit(&s, 4, &SvmConfig::default()).unwrap();
        let b = svm_fit(&s, 4, &SvmConfig::default()).unwrap();
        assert_eq!(a.decision_function(s.features.view()), b.decision_function(s.features.view()));
    }
}
