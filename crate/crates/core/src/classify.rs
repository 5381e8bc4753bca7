//! Linear, nearest-class-mean and Mahalanobis classifiers, plus the
//! incremental accuracy metrics.

use std::collections::BTreeMap;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::calib::{shrink_normalize, PrototypeStore};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{Model, Split};
use crate::replay::extract_chunked;
use crate::tensor::Tensor;
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Ncm,
    Mahalanobis,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Linear => "linear",
            ClassifierKind::Ncm => "ncm",
            ClassifierKind::Mahalanobis => "mahalanobis",
        }
    }
}

/// Index of the smallest score; ties go to the lowest class id.
fn argmin_by_class(scores: &[(ClassId, f64)]) -> ClassId {
    let mut best = scores[0];
    for &(c, s) in &scores[1..] {
        if s < best.1 || (s == best.1 && c < best.0) {
            best = (c, s);
        }
    }
    best.0
}

/// Argmax of all-class logits.
pub fn predict_linear(model: &Model, feats: &Tensor) -> Result<Vec<ClassId>> {
    let logits = model.head.logits(feats, Split::All)?;
    let classes = model.head.classes();
    Ok((0..logits.rows())
        .map(|i| {
            let scores: Vec<(ClassId, f64)> = classes.iter().zip(logits.row(i)).map(|(&c, &v)| (c, -v)).collect();
            argmin_by_class(&scores)
        })
        .collect())
}

/// Nearest prototype in Euclidean distance.
pub fn predict_ncm(means: &BTreeMap<ClassId, Vector>, feats: &Tensor) -> Result<Vec<ClassId>> {
    if means.is_empty() {
        return Err(Error::contract("NCM needs at least one prototype"));
    }
    let d = feats.cols();
    if means.values().any(|m| m.len() != d) {
        return Err(Error::dim("prototype dim does not match features"));
    }
    Ok((0..feats.rows())
        .map(|i| {
            let x = feats.row(i);
            let scores: Vec<(ClassId, f64)> = means
                .iter()
                .map(|(&c, mu)| (c, x.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum()))
                .collect();
            argmin_by_class(&scores)
        })
        .collect())
}

/// Shrunk, normalized per-class covariances with their Cholesky factors.
pub struct Mahalanobis {
    classes: Vec<(ClassId, Vector, Cholesky<f64, nalgebra::Dyn>)>,
}

impl Mahalanobis {
    pub fn new(store: &PrototypeStore, gamma1: f64, gamma2: f64) -> Result<Self> {
        Self::from_parts(
            store
                .iter()
                .map(|(c, e)| Ok((c, e.mean.clone(), shrink_normalize(&e.cov.dense(), gamma1, gamma2)?)))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Uses the given matrices as the final covariances, with no shrinkage.
    pub fn from_parts(parts: Vec<(ClassId, Vector, Matrix)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::contract("Mahalanobis needs at least one class"));
        }
        let classes = parts
            .into_iter()
            .map(|(c, mu, sigma)| {
                let chol = Cholesky::new(sigma)
                    .ok_or_else(|| Error::Numeric(format!("covariance of class {c} is not positive definite")))?;
                Ok((c, mu, chol))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mahalanobis { classes })
    }

    /// Squared distances `(x − μ)ᵀ Σ⁻¹ (x − μ)` for one feature row.
    pub fn distances(&self, x: &[f64]) -> Result<Vec<(ClassId, f64)>> {
        self.classes
            .iter()
            .map(|(c, mu, chol)| {
                if mu.len() != x.len() {
                    return Err(Error::dim("feature dim does not match prototypes"));
                }
                let diff = Vector::from_iterator(x.len(), x.iter().zip(mu.iter()).map(|(a, b)| a - b));
                // ‖L⁻¹ diff‖² with Σ = L Lᵀ.
                let z = chol
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .ok_or_else(|| Error::Numeric(format!("triangular solve failed for class {c}")))?;
                Ok((*c, z.norm_squared()))
            })
            .collect()
    }

    pub fn predict(&self, feats: &Tensor) -> Result<Vec<ClassId>> {
        (0..feats.rows())
            .map(|i| Ok(argmin_by_class(&self.distances(feats.row(i))?)))
            .collect()
    }
}

/// Runs `kind` on raw inputs.
pub fn predict(
    kind: ClassifierKind,
    model: &Model,
    store: &PrototypeStore,
    gamma: (f64, f64),
    x: &Tensor,
) -> Result<Vec<ClassId>> {
    let feats = extract_chunked(&model.extractor, x)?;
    match kind {
        ClassifierKind::Linear => predict_linear(model, &feats),
        ClassifierKind::Ncm => predict_ncm(&store.means(), &feats),
        ClassifierKind::Mahalanobis => Mahalanobis::new(store, gamma.0, gamma.1)?.predict(&feats),
    }
}

pub fn accuracy(preds: &[ClassId], labels: &[ClassId]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Accuracy restricted to samples whose label lies in each group.
pub fn group_accuracies(preds: &[ClassId], labels: &[ClassId], groups: &[Vec<ClassId>]) -> Result<Vec<f64>> {
    groups
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| g.contains(&labels[i])).collect();
            if idx.is_empty() {
                return Err(Error::contract(format!("no evaluation samples for group {j}")));
            }
            Ok(idx.iter().filter(|&&i| preds[i] == labels[i]).count() as f64 / idx.len() as f64)
        })
        .collect()
}

/// Accuracy matrix `a[k][j]` (task `k`, group `j ≤ k`) and its summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: Vec<Vec<f64>>,
    pub per_task: Vec<f64>,
    pub a_inc: f64,
    pub a_last: f64,
}

/// `A_k` is the mean of row `k`, `A_inc` the mean of all `A_k`,
/// `A_last = A_K`.
pub fn metrics(a: &[Vec<f64>], tasks: usize) -> Result<EvalResult> {
    if tasks == 0 || a.len() != tasks {
        return Err(Error::contract(format!("accuracy matrix has {} rows, expected {tasks}", a.len())));
    }
    for (k, row) in a.iter().enumerate() {
        if row.len() != k + 1 {
            return Err(Error::contract(format!("row {k} has {} entries, expected {}", row.len(), k + 1)));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("row {k} has an accuracy outside [0, 1]")));
        }
    }
    let per_task: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let a_inc = per_task.iter().sum::<f64>() / tasks as f64;
    Ok(EvalResult {
        accuracy: a.to_vec(),
        a_last: per_task[tasks - 1],
        per_task,
        a_inc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{ClassEntry, CovRepr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(rng: &mut impl Rng, n: usize, d: usize, span: f64) -> Tensor {
        Tensor::from_rows(&(0..n).map(|_| (0..d).map(|_| rng.random_range(-span..span)).collect()).collect::<Vec<_>>()).unwrap()
    }

    fn spd(rng: &mut impl Rng, d: usize) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + Matrix::identity(d, d) * 0.2
    }

    #[test]
    fn metrics_examples() {
        let r = metrics(&[vec![0.8], vec![0.6, 0.4]], 2).unwrap();
        assert_eq!(r.per_task, vec![0.8, 0.5]);
        assert!((r.a_inc - 0.65).abs() < 1e-12);
        assert_eq!(r.a_last, 0.5);
        let ones = metrics(&[vec![1.0], vec![1.0, 1.0], vec![1.0; 3]], 3).unwrap();
        assert_eq!((ones.a_inc, ones.a_last), (1.0, 1.0));
        assert!(matches!(metrics(&[vec![0.8], vec![0.6]], 2), Err(Error::Contract(_))));
        assert!(metrics(&[vec![0.8]], 2).is_err());
    }

    #[test]
    fn metrics_permutation_equivariant_within_row() {
        let a = metrics(&[vec![0.9], vec![0.2, 0.7], vec![0.1, 0.5, 0.3]], 3).unwrap();
        let b = metrics(&[vec![0.9], vec![0.7, 0.2], vec![0.3, 0.1, 0.5]], 3).unwrap();
        assert!((a.a_inc - b.a_inc).abs() < 1e-15 && a.a_last == b.a_last);
    }

    #[test]
    fn mahalanobis_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let parts: Vec<(ClassId, Vector, Matrix)> = (0..3)
            .map(|c| (c, Vector::from_fn(2, |_, _| rng.random_range(-3.0..3.0)), spd(&mut rng, 2)))
            .collect();
        let m = Mahalanobis::from_parts(parts.clone()).unwrap();
        let x = rows(&mut rng, 100, 2, 4.0);
        let got = m.predict(&x).unwrap();
        for i in 0..100 {
            let xi = Vector::from_row_slice(x.row(i));
            let mut best = (usize::MAX, f64::INFINITY);
            for (c, mu, s) in &parts {
                let diff = &xi - mu;
                let d = (diff.transpose() * s.clone().try_inverse().unwrap() * &diff)[0];
                if d < best.1 {
                    best = (*c, d);
                }
            }
            assert_eq!(got[i], best.0);
        }
    }

    #[test]
    fn identity_covariance_equals_ncm_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let means: BTreeMap<ClassId, Vector> = (0..5).map(|c| (c * 3, Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0)))).collect();
        let x = rows(&mut rng, 200, 4, 3.0);
        let eye: Vec<_> = means.iter().map(|(c, m)| (*c, m.clone(), Matrix::identity(4, 4))).collect();
        let scaled: Vec<_> = means.iter().map(|(c, m)| (*c, m.clone(), Matrix::identity(4, 4) * 7.5)).collect();
        let ncm = predict_ncm(&means, &x).unwrap();
        assert_eq!(Mahalanobis::from_parts(eye).unwrap().predict(&x).unwrap(), ncm);
        assert_eq!(Mahalanobis::from_parts(scaled).unwrap().predict(&x).unwrap(), ncm);
        // Global rescaling of arbitrary covariances.
        let arb: Vec<_> = means.iter().map(|(c, m)| (*c, m.clone(), spd(&mut rng, 4))).collect();
        let big: Vec<_> = arb.iter().map(|(c, m, s)| (*c, m.clone(), s * 3.0)).collect();
        assert_eq!(
            Mahalanobis::from_parts(arb).unwrap().predict(&x).unwrap(),
            Mahalanobis::from_parts(big).unwrap().predict(&x).unwrap()
        );
    }

    #[test]
    fn zero_distance_and_ties() {
        let means: BTreeMap<ClassId, Vector> = [(4, Vector::from_vec(vec![1.0, 0.0])), (2, Vector::from_vec(vec![-1.0, 0.0]))].into();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(predict_ncm(&means, &x).unwrap(), vec![4, 2]);
        let parts = means.iter().map(|(c, m)| (*c, m.clone(), Matrix::identity(2, 2))).collect();
        assert_eq!(Mahalanobis::from_parts(parts).unwrap().predict(&x).unwrap(), vec![4, 2]);
    }

    #[test]
    fn singular_covariance_names_class() {
        let mut store = PrototypeStore::new();
        let entry = |m: Matrix| ClassEntry {
            mean: Vector::zeros(2),
            cov: CovRepr::Full(m),
            created_task: 0,
            calibrated_task: 0,
        };
        store.insert(0, entry(Matrix::identity(2, 2))).unwrap();
        // Perfectly correlated: normalizes to [[1,1],[1,1]] with no shrinkage.
        store.insert(7, entry(Matrix::from_element(2, 2, 1.0))).unwrap();
        let err = Mahalanobis::new(&store, 0.0, 0.0).err().unwrap();
        assert!(err.to_string().contains("class 7"), "{err}");
        assert!(Mahalanobis::new(&store, 1.0, 0.0).is_ok());
    }

    #[test]
    fn group_accuracy_by_task() {
        let preds = vec![0, 1, 2, 2, 3];
        let labels = vec![0, 1, 2, 3, 3];
        let acc = group_accuracies(&preds, &labels, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(acc, vec![1.0, 2.0 / 3.0]);
        assert!(group_accuracies(&preds, &labels, &[vec![9]]).is_err());
    }
}
