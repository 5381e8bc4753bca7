//! Gaussian-cluster classification data.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator settings. Each class is `N(mean_c, A_c A_cᵀ)` with `mean_c` on a
/// sphere of radius `radius` and `A_c` a random well-conditioned factor
/// scaled by `cluster_std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub radius: f64,
    pub cluster_std: f64,
    /// Anisotropy of the class covariance, in `[0, 1]`; 0 gives isotropic
    /// clusters.
    pub anisotropy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            input_dim: 32,
            radius: 4.0,
            cluster_std: 1.0,
            anisotropy: 0.5,
            n_train: 120,
            n_val: 30,
            n_test: 60,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input_dim == 0 {
            return Err(Error::config("synthetic data needs classes and input_dim > 0"));
        }
        if self.n_train < 2 || self.n_test == 0 {
            return Err(Error::config("synthetic data needs n_train >= 2 and n_test >= 1"));
        }
        if !(self.radius > 0.0) || !(self.cluster_std > 0.0) || !(0.0..=1.0).contains(&self.anisotropy) {
            return Err(Error::config("bad synthetic radius/std/anisotropy"));
        }
        Ok(())
    }
}

/// True generating parameters of one class.
#[derive(Clone, Debug)]
pub struct ClassModel {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` factor `A` with covariance `A Aᵀ`.
    pub factor: Vec<f64>,
}

impl ClassModel {
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.mean.len();
        let a = &self.factor;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
            }
        }
        cov
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d)
            .map(|i| self.mean[i] + (0..d).map(|k| self.factor[i * d + k] * z[k]).sum::<f64>())
            .collect()
    }
}

/// Draws the class models for `spec`.
pub fn class_models(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<ClassModel> {
    let d = spec.input_dim;
    (0..spec.classes)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let mean = dir.iter().map(|v| spec.radius * v / norm).collect();
            // A = std * ((1 - a) I + a G / sqrt(d))
            let iso = 1.0 - spec.anisotropy;
            let mut factor = vec![0.0; d * d];
            for i in 0..d {
                for k in 0..d {
                    let g: f64 = StandardNormal.sample(rng);
                    let eye = if i == k { iso } else { 0.0 };
                    factor[i * d + k] = spec.cluster_std * (eye + spec.anisotropy * g / (d as f64).sqrt());
                }
            }
            ClassModel { mean, factor }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Bayes-optimal linear rule for equal priors with a shared covariance:
    /// LDA with the true means and the average true covariance.
    #[test]
    fn well_separated_clusters_are_linearly_separable() {
        let spec = SyntheticSpec {
            classes: 4,
            input_dim: 16,
            radius: 8.0,
            cluster_std: 1.0,
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = class_models(&spec, &mut rng);
        let d = spec.input_dim;
        let mut pooled = DMatrix::zeros(d, d);
        for m in &models {
            pooled += DMatrix::from_row_slice(d, d, &m.covariance());
        }
        pooled /= models.len() as f64;
        let inv = pooled.cholesky().expect("spd").inverse();
        let means: Vec<DVector<f64>> = models.iter().map(|m| DVector::from_vec(m.mean.clone())).collect();
        let mut correct = 0;
        let mut total = 0;
        for (c, m) in models.iter().enumerate() {
            for _ in 0..500 {
                let x = DVector::from_vec(m.sample(&mut rng));
                let scores: Vec<f64> = means
                    .iter()
                    .map(|mu| (mu.transpose() * &inv * &x)[0] - 0.5 * (mu.transpose() * &inv * mu)[0])
                    .collect();
                let pred = (0..scores.len())
                    .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                    .unwrap();
                correct += usize::from(pred == c);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn covariance_is_symmetric_positive_definite() {
        let spec = SyntheticSpec {
            classes: 1,
            input_dim: 6,
            ..SyntheticSpec::default()
        };
        let m = &class_models(&spec, &mut ChaCha8Rng::seed_from_u64(1))[0];
        let cov = DMatrix::from_row_slice(6, 6, &m.covariance());
        assert!((&cov - cov.transpose()).amax() < 1e-12);
        assert!(cov.cholesky().is_some());
        let norm: f64 = m.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - spec.radius).abs() < 1e-9);
    }
}
