//! Drift compensation after each task: drift samples, transfer fit,
//! prototype/covariance calibration, shrinkage, and low-rank storage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify;
use crate::data::{LabeledSet, SplitTag};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, to_matrix, Matrix, Vector};
use crate::model::Extractor;
use crate::replay::{adversarial_attack, extract_chunked, AttackConfig, StepNorm};
use crate::tensor::Tensor;
use crate::ClassId;

/// Shrinkage search space; `γ₁ = γ₂` for every entry.
pub const GAMMA_GRID: [f64; 17] = [
    1.0, 3.0, 8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0, 72.0, 80.0, 88.0, 96.0, 104.0, 112.0, 120.0,
];

pub const STORE_FORMAT: &str = "apr-prototypes";
pub const STORE_VERSION: u32 = 1;

/// Fit one transfer matrix per class, or one per task from all classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScope {
    #[default]
    PerClass,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdcConfig {
    pub magnitude: f64,
    pub iterations: usize,
    /// Nearest new-task samples attacked per class.
    pub candidates: usize,
    pub step: StepNorm,
    pub transfer_lr: f64,
    pub transfer_epochs: usize,
    pub scope: TransferScope,
}

impl Default for AdcConfig {
    fn default() -> Self {
        AdcConfig {
            magnitude: 6.32,
            iterations: 9,
            candidates: 400,
            step: StepNorm::Squared,
            transfer_lr: 1e-4,
            transfer_epochs: 64,
            scope: TransferScope::PerClass,
        }
    }
}

impl AdcConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack().validate()?;
        if self.candidates == 0 {
            return Err(Error::config("adc candidates must be > 0"));
        }
        if !(self.transfer_lr > 0.0) {
            return Err(Error::config("transfer_lr must be > 0"));
        }
        Ok(())
    }

    fn attack(&self) -> AttackConfig {
        AttackConfig {
            alpha: self.magnitude,
            n_attack: self.iterations,
            noise: false,
            step: self.step,
        }
    }
}

/// Attacks the `cfg.candidates` new-task samples whose frozen features are
/// nearest to `mu` toward `mu`.
pub fn generate_drift_samples(f_old: &Extractor, data: &LabeledSet, mu: &Vector, cfg: &AdcConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = data.len();
    let take = if cfg.candidates > n {
        warn!("ADC asked for {} candidates, only {n} samples available", cfg.candidates);
        n
    } else {
        cfg.candidates
    };
    let feats = extract_chunked(f_old, &data.samples)?;
    if feats.cols() != mu.len() {
        return Err(Error::dim("prototype does not match feature dim"));
    }
    let dist: Vec<f64> = (0..n)
        .map(|i| feats.row(i).iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order.truncate(take);
    let x = data.samples.select_rows(&order)?;
    let targets = crate::linalg::repeat_rows(mu, take);
    // Noise is off, so the attack draws nothing from this generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    adversarial_attack(f_old, &x, &targets, &cfg.attack(), 0.0, &mut rng)
}

/// Full-batch gradient descent from `W = I` on
/// `(1/m) Σᵢ ‖newᵢ − W oldᵢ‖²`; also returns `mean(new) − mean(old)`.
pub fn fit_transfer_matrix(old: &Tensor, new: &Tensor, lr: f64, epochs: usize) -> Result<(Matrix, Vector)> {
    if old.shape() != new.shape() || old.shape().len() != 2 || old.rows() == 0 {
        return Err(Error::contract(format!(
            "transfer fit needs paired non-empty rows, got {:?} and {:?}",
            old.shape(),
            new.shape()
        )));
    }
    let o = to_matrix(old);
    let n = to_matrix(new);
    let m = o.nrows() as f64;
    let d = o.ncols();
    let mut w = Matrix::identity(d, d);
    // ∇ = (2/m) (W Oᵀ − Nᵀ) O; the Gram matrices are fixed across epochs.
    let oto = o.transpose() * &o;
    let nto = n.transpose() * &o;
    // Gradient descent on this quadratic is stable iff lr < 2 / λmax(2 OᵀO / m).
    let lambda_max = (&oto * (2.0 / m)).symmetric_eigenvalues().max();
    if epochs > 0 && lr * lambda_max >= 2.0 {
        return Err(Error::Numeric(format!(
            "transfer fit unstable: lr {lr} with curvature {lambda_max:.3e} needs lr < {:.3e}",
            2.0 / lambda_max
        )));
    }
    for _ in 0..epochs {
        let grad = (&w * &oto - &nto) * (2.0 / m);
        w -= grad * lr;
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("transfer matrix diverged; lower transfer_lr".into()));
    }
    let delta = (n.row_mean() - o.row_mean()).transpose();
    Ok((w, delta))
}

pub fn transfer_mse(old: &Tensor, new: &Tensor, w: &Matrix) -> f64 {
    let o = to_matrix(old);
    let n = to_matrix(new);
    let r = n - o * w.transpose();
    r.norm_squared() / r.nrows() as f64
}

/// Covariance as stored: full, or truncated SVD factors.
#[derive(Clone, Debug, PartialEq)]
pub enum CovRepr {
    Full(Matrix),
    Svd { u: Matrix, s: Matrix, v: Matrix },
}

impl CovRepr {
    pub fn dense(&self) -> Matrix {
        match self {
            CovRepr::Full(m) => m.clone(),
            CovRepr::Svd { u, s, v } => recompose(u, s, v),
        }
    }

    /// Stored scalars: `d²` or `2kd + k²`.
    pub fn scalar_count(&self) -> usize {
        match self {
            CovRepr::Full(m) => m.len(),
            CovRepr::Svd { u, s, v } => u.len() + s.len() + v.len(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            CovRepr::Full(_) => None,
            CovRepr::Svd { s, .. } => Some(s.nrows()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub mean: Vector,
    pub cov: CovRepr,
    pub created_task: usize,
    pub calibrated_task: usize,
}

/// `μ' = μ + δ`, `Σ' = sym(W Σ Wᵀ)`. Low-rank entries are recomposed,
/// transformed, and truncated back to their rank.
pub fn calibrate(entry: &ClassEntry, w: &Matrix, delta: &Vector, task: usize) -> Result<ClassEntry> {
    let d = entry.mean.len();
    if w.shape() != (d, d) || delta.len() != d {
        return Err(Error::dim(format!("transfer {:?} / delta {} for dim {d}", w.shape(), delta.len())));
    }
    let sigma = symmetrize(&(w * entry.cov.dense() * w.transpose()));
    if sigma.iter().chain(delta.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "calibrate" });
    }
    let cov = match entry.cov.rank() {
        None => CovRepr::Full(sigma),
        Some(k) => {
            let (u, s, v) = decompose(&sigma, k)?;
            CovRepr::Svd { u, s, v }
        }
    };
    Ok(ClassEntry {
        mean: &entry.mean + delta,
        cov,
        created_task: entry.created_task,
        calibrated_task: task,
    })
}

/// `Σ + γ₁V₁I + γ₂V₂I`, then scaled to unit diagonal. `V₁` is the mean
/// diagonal entry, `V₂` the mean off-diagonal entry.
pub fn shrink_normalize(sigma: &Matrix, gamma1: f64, gamma2: f64) -> Result<Matrix> {
    let d = sigma.nrows();
    if sigma.ncols() != d || d == 0 {
        return Err(Error::dim("shrinkage needs a square non-empty matrix"));
    }
    let trace = sigma.trace();
    let v1 = trace / d as f64;
    let v2 = if d > 1 {
        (sigma.sum() - trace) / (d * (d - 1)) as f64
    } else {
        0.0
    };
    let mut s = sigma.clone();
    for i in 0..d {
        s[(i, i)] += gamma1 * v1 + gamma2 * v2;
    }
    let diag: Vec<f64> = (0..d).map(|i| s[(i, i)]).collect();
    if let Some(i) = diag.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Numeric(format!(
            "shrunk covariance has diagonal {} at {i}; increase shrinkage",
            diag[i]
        )));
    }
    let inv_sqrt: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();
    for i in 0..d {
        s[(i, i)] = 1.0;
        for j in i + 1..d {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]) * inv_sqrt[i] * inv_sqrt[j];
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Rank-`k` truncated SVD: `U` is `d x k`, `S` is `k x k`, `V` is `k x d`.
pub fn decompose(sigma: &Matrix, k: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let d = sigma.nrows();
    if k == 0 || k > d {
        return Err(Error::config(format!("svd rank {k} outside 1..={d}")));
    }
    let svd = sigma.clone().svd(true, true);
    let u_full = svd.u.ok_or_else(|| Error::Numeric("SVD produced no U".into()))?;
    let vt_full = svd.v_t.ok_or_else(|| Error::Numeric("SVD produced no Vᵀ".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    order.truncate(k);
    let u = Matrix::from_fn(d, k, |i, j| u_full[(i, order[j])]);
    let s = Matrix::from_fn(k, k, |i, j| if i == j { svd.singular_values[order[i]] } else { 0.0 });
    let v = Matrix::from_fn(k, d, |i, j| vt_full[(order[i], j)]);
    Ok((u, s, v))
}

pub fn recompose(u: &Matrix, s: &Matrix, v: &Matrix) -> Matrix {
    u * s * v
}

/// Per-class means and covariances, keyed by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeStore {
    entries: BTreeMap<ClassId, ClassEntry>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: ClassId, entry: ClassEntry) -> Result<()> {
        let d = entry.mean.len();
        let dense_dim = match &entry.cov {
            CovRepr::Full(m) => m.shape(),
            CovRepr::Svd { u, v, .. } => (u.nrows(), v.ncols()),
        };
        if dense_dim != (d, d) {
            return Err(Error::dim(format!("class {class}: covariance {dense_dim:?} for mean dim {d}")));
        }
        if let Some(other) = self.entries.values().next() {
            if other.mean.len() != d {
                return Err(Error::dim("store entries must share one feature dim"));
            }
        }
        self.entries.insert(class, entry);
        Ok(())
    }

    /// Adds full-covariance entries from `(mean, covariance)` statistics.
    pub fn insert_stats(&mut self, stats: BTreeMap<ClassId, (Vector, Matrix)>, task: usize) -> Result<()> {
        for (c, (mean, cov)) in stats {
            self.insert(
                c,
                ClassEntry {
                    mean,
                    cov: CovRepr::Full(cov),
                    created_task: task,
                    calibrated_task: task,
                },
            )?;
        }
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassEntry> {
        self.entries.get(&class)
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &ClassEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.mean.len())
    }

    pub fn means(&self) -> BTreeMap<ClassId, Vector> {
        self.entries.iter().map(|(c, e)| (*c, e.mean.clone())).collect()
    }

    pub fn dense_covariances(&self) -> BTreeMap<ClassId, Matrix> {
        self.entries.iter().map(|(c, e)| (*c, e.cov.dense())).collect()
    }

    /// Converts every full covariance to rank `k` (no-op for entries
    /// already at that rank).
    pub fn compress(&mut self, k: usize) -> Result<()> {
        for entry in self.entries.values_mut() {
            if entry.cov.rank() == Some(k) {
                continue;
            }
            let (u, s, v) = decompose(&entry.cov.dense(), k)?;
            entry.cov = CovRepr::Svd { u, s, v };
        }
        Ok(())
    }

    pub fn covariance_scalars(&self) -> usize {
        self.entries.values().map(|e| e.cov.scalar_count()).sum()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let record = StoreRecord {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            classes: self.entries.iter().map(|(c, e)| EntryRecord::from_entry(*c, e)).collect(),
        };
        fs::write(path, serde_json::to_vec(&record)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<PrototypeStore> {
        let record: StoreRecord = serde_json::from_slice(&fs::read(path)?)?;
        if record.format != STORE_FORMAT || record.version != STORE_VERSION {
            return Err(Error::Decode(format!("unsupported store {} v{}", record.format, record.version)));
        }
        let mut store = PrototypeStore::new();
        for e in record.classes {
            let class = e.class;
            store.insert(class, e.into_entry()?)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from_matrix(m: &Matrix) -> Self {
        MatrixRecord {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<Matrix> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Decode("matrix payload length mismatch".into()));
        }
        Ok(Matrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    class: ClassId,
    mean: Vec<f64>,
    /// `full` or `svd-<k>`.
    repr: String,
    matrices: Vec<MatrixRecord>,
    created_task: usize,
    calibrated_task: usize,
}

impl EntryRecord {
    fn from_entry(class: ClassId, e: &ClassEntry) -> Self {
        let (repr, matrices) = match &e.cov {
            CovRepr::Full(m) => ("full".to_string(), vec![MatrixRecord::from_matrix(m)]),
            CovRepr::Svd { u, s, v } => (
                format!("svd-{}", s.nrows()),
                [u, s, v].into_iter().map(MatrixRecord::from_matrix).collect(),
            ),
        };
        EntryRecord {
            class,
            mean: e.mean.as_slice().to_vec(),
            repr,
            matrices,
            created_task: e.created_task,
            calibrated_task: e.calibrated_task,
        }
    }

    fn into_entry(self) -> Result<ClassEntry> {
        let mut mats = self
            .matrices
            .into_iter()
            .map(MatrixRecord::into_matrix)
            .collect::<Result<Vec<_>>>()?;
        let cov = match (self.repr.as_str(), mats.len()) {
            ("full", 1) => CovRepr::Full(mats.remove(0)),
            (tag, 3) if tag.starts_with("svd-") => {
                let v = mats.pop().expect("3");
                let s = mats.pop().expect("3");
                let u = mats.pop().expect("3");
                if tag[4..].parse::<usize>().ok() != Some(s.nrows()) {
                    return Err(Error::Decode(format!("class {}: tag {tag} vs rank {}", self.class, s.nrows())));
                }
                CovRepr::Svd { u, s, v }
            }
            (tag, n) => return Err(Error::Decode(format!("class {}: bad repr {tag} with {n} matrices", self.class))),
        };
        Ok(ClassEntry {
            mean: Vector::from_vec(self.mean),
            cov,
            created_task: self.created_task,
            calibrated_task: self.calibrated_task,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    format: String,
    version: u32,
    classes: Vec<EntryRecord>,
}

/// Picks `γ` (with `γ₁ = γ₂ = γ`) maximising Mahalanobis accuracy on the
/// validation split. Ties go to the smaller `γ`. Returns `(γ, accuracy)`.
pub fn tune_shrinkage(store: &PrototypeStore, f: &Extractor, val: &LabeledSet, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::config("empty shrinkage grid"));
    }
    if val.split != SplitTag::Val {
        return Err(Error::contract(format!("shrinkage tuning got a {:?} split", val.split)));
    }
    if val.is_empty() {
        return Err(Error::contract("validation split is empty"));
    }
    let feats = extract_chunked(f, &val.samples)?;
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for g in grid {
        let maha = classify::Mahalanobis::new(store, g, g)?;
        let preds = maha.predict(&feats)?;
        let acc = classify::accuracy(&preds, &val.labels);
        if best.is_none_or(|(_, a)| acc > a) {
            best = Some((g, acc));
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut impl Rng) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + Matrix::identity(d, d) * 0.1
    }

    fn entry(mean: Vec<f64>, cov: Matrix) -> ClassEntry {
        ClassEntry {
            mean: Vector::from_vec(mean),
            cov: CovRepr::Full(cov),
            created_task: 0,
            calibrated_task: 0,
        }
    }

    #[test]
    fn shrink_examples() {
        let two = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let out = shrink_normalize(&two, 1.0, 1.0).unwrap();
        let expect = Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        assert!((out - expect).amax() < 1e-12);
        for g in [0.0, 1.0, 7.5] {
            let eye = shrink_normalize(&Matrix::identity(4, 4), g, 3.0).unwrap();
            assert_eq!(eye, Matrix::identity(4, 4));
        }
        let neg = Matrix::from_row_slice(2, 2, &[0.0, -5.0, -5.0, 0.0]);
        assert!(matches!(shrink_normalize(&neg, 0.0, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn shrink_output_is_symmetric_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = shrink_normalize(&random_spd(6, &mut rng), 3.0, 3.0).unwrap();
            assert!((0..6).all(|i| s[(i, i)] == 1.0));
            assert_eq!(s, s.transpose());
        }
    }

    #[test]
    fn decompose_examples() {
        let diag = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 2.0, 1.0]));
        let (u, s, v) = decompose(&diag, 2).unwrap();
        assert_eq!((u.shape(), s.shape(), v.shape()), ((3, 2), (2, 2), (2, 3)));
        let back = recompose(&u, &s, &v);
        let expect = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 2.0, 0.0]));
        assert!((back - expect).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spd = random_spd(7, &mut rng);
        let (u, s, v) = decompose(&spd, 7).unwrap();
        assert!((recompose(&u, &s, &v) - &spd).norm() / spd.norm() < 1e-9);
        assert!(matches!(decompose(&spd, 0), Err(Error::Config(_))));
        assert!(matches!(decompose(&spd, 8), Err(Error::Config(_))));
    }

    #[test]
    fn svd_sizes_at_full_scale() {
        let (d, k) = (512usize, 8usize);
        let stored = 2 * k * d + k * k;
        assert_eq!(stored, 8256);
        assert!((100.0 * stored as f64 / (d * d) as f64 - 3.1).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn eckart_young_bound(seed in any::<u64>(), d in 2usize..9, kf in 0.0f64..1.0) {
            let k = 1 + ((d - 1) as f64 * kf) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spd = random_spd(d, &mut rng);
            let (u, s, v) = decompose(&spd, k).unwrap();
            let err = (recompose(&u, &s, &v) - &spd).norm();
            let mut sv: Vec<f64> = spd.clone().svd(false, false).singular_values.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            let bound = if k < d { sv[k] * ((d - k) as f64).sqrt() } else { 0.0 };
            prop_assert!(err <= bound + 1e-9, "err {} bound {}", err, bound);
            prop_assert_eq!(u.len() + s.len() + v.len(), 2 * k * d + k * k);
        }

        #[test]
        fn calibration_preserves_symmetry_and_psd(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = entry(vec![0.0; 5], random_spd(5, &mut rng));
            let w = Matrix::from_fn(5, 5, |_, _| rng.random_range(-2.0..2.0));
            let out = calibrate(&e, &w, &Vector::zeros(5), 1).unwrap().cov.dense();
            prop_assert_eq!(&out, &out.transpose());
            let scale = out.amax().max(1.0);
            prop_assert!(out.symmetric_eigen().eigenvalues.iter().all(|&l| l >= -1e-10 * scale));
        }
    }

    #[test]
    fn calibrate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = random_spd(4, &mut rng);
        let e = entry(vec![1.0, 2.0, 3.0, 4.0], sigma.clone());
        let same = calibrate(&e, &Matrix::identity(4, 4), &Vector::zeros(4), 0).unwrap();
        assert_eq!(same, e);
        let delta = Vector::from_vec(vec![0.5, 0.0, -1.0, 2.0]);
        let twice = calibrate(&e, &(Matrix::identity(4, 4) * 2.0), &delta, 3).unwrap();
        assert!((twice.cov.dense() - &sigma * 4.0).amax() < 1e-12);
        assert_eq!(twice.mean, &e.mean + &delta);
        assert_eq!(twice.calibrated_task, 3);
        // Triple product written out by index.
        let w = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let got = calibrate(&e, &w, &Vector::zeros(4), 1).unwrap().cov.dense();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += w[(i, a)] * sigma[(a, b)] * w[(j, b)];
                    }
                }
                assert!((got[(i, j)] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transfer_fit_fixed_point_and_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let old = Tensor::from_rows(&rows).unwrap();
        let (w, delta) = fit_transfer_matrix(&old, &old, 1e-4, 64).unwrap();
        assert!((w - Matrix::identity(4, 4)).norm() <= 1e-6);
        assert!(delta.amax() < 1e-15);

        let a = Matrix::identity(4, 4) + Matrix::from_fn(4, 4, |_, _| rng.random_range(-0.3..0.3));
        let new = crate::linalg::from_matrix(&(to_matrix(&old) * a.transpose()));
        let initial = transfer_mse(&old, &new, &Matrix::identity(4, 4));
        let (w, _) = fit_transfer_matrix(&old, &new, 0.5, 3000).unwrap();
        assert!(transfer_mse(&old, &new, &w) <= 1e-4 * initial);
        // Closed-form least squares agrees.
        let o = to_matrix(&old);
        let ls = (o.transpose() * &o).try_inverse().unwrap() * o.transpose() * to_matrix(&new);
        assert!((ls.transpose() - &w).amax() < 1e-6);
        assert!(matches!(
            fit_transfer_matrix(&old, &Tensor::zeros(&[3, 4]), 0.1, 1),
            Err(Error::Contract(_))
        ));
        // Far-flung rows raise the curvature past what lr 0.5 can handle.
        let big = crate::linalg::from_matrix(&(to_matrix(&old) * 40.0));
        let err = fit_transfer_matrix(&big, &big, 0.5, 10).unwrap_err();
        assert!(err.to_string().contains("unstable"), "{err}");
    }

    #[test]
    fn drift_samples_move_toward_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Extractor::identity(3);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let data = LabeledSet::new(Tensor::from_rows(&rows).unwrap(), vec![5; 30], SplitTag::Train).unwrap();
        let mu = Vector::from_vec(vec![1.0, 1.0, 1.0]);
        let cfg = AdcConfig {
            magnitude: 0.3,
            iterations: 3,
            candidates: 10,
            step: StepNorm::Unit,
            ..AdcConfig::default()
        };
        let out = generate_drift_samples(&f, &data, &mu, &cfg).unwrap();
        assert_eq!(out.shape(), &[10, 3]);
        let mean_dist = |t: &Tensor| {
            (0..t.rows())
                .map(|i| t.row(i).iter().zip(mu.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / t.rows() as f64
        };
        let pre = {
            let feats = data.samples.clone();
            let mut d: Vec<(f64, usize)> = (0..30)
                .map(|i| (feats.row(i).iter().zip(mu.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            data.samples.select_rows(&d[..10].iter().map(|p| p.1).collect::<Vec<_>>()).unwrap()
        };
        assert!(mean_dist(&out) < mean_dist(&pre));

        let fixed = LabeledSet::new(Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(), vec![5], SplitTag::Train).unwrap();
        let same = generate_drift_samples(&f, &fixed, &mu, &cfg).unwrap();
        assert_eq!(same.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn store_round_trip_and_compress() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = PrototypeStore::new();
        for c in [3, 1, 8] {
            store.insert(c, entry((0..5).map(|_| rng.random_range(-1.0..1.0)).collect(), random_spd(5, &mut rng))).unwrap();
        }
        assert_eq!(store.classes(), vec![1, 3, 8]);
        assert_eq!(store.covariance_scalars(), 75);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        store.save_json(&p).unwrap();
        assert_eq!(PrototypeStore::load_json(&p).unwrap(), store);
        store.compress(2).unwrap();
        assert_eq!(store.covariance_scalars(), 3 * (2 * 2 * 5 + 4));
        store.save_json(&p).unwrap();
        assert_eq!(PrototypeStore::load_json(&p).unwrap(), store);
        assert!(store.insert(9, entry(vec![0.0; 2], Matrix::identity(2, 2))).is_err());
    }

    #[test]
    fn tuning_picks_smallest_gamma_on_flat_accuracy() {
        let mut store = PrototypeStore::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            let mut mean = vec![0.0; 3];
            mean[c] = 20.0;
            store.insert(c, entry(mean.clone(), Matrix::identity(3, 3))).unwrap();
            rows.push(mean);
            labels.push(c);
        }
        let val = LabeledSet::new(Tensor::from_rows(&rows).unwrap(), labels, SplitTag::Val).unwrap();
        let f = Extractor::identity(3);
        assert_eq!(tune_shrinkage(&store, &f, &val, &GAMMA_GRID).unwrap(), (1.0, 1.0));
        assert_eq!(tune_shrinkage(&store, &f, &val, &[40.0]).unwrap().0, 40.0);
        assert!(matches!(tune_shrinkage(&store, &f, &val, &[]), Err(Error::Config(_))));
        let test = LabeledSet { split: SplitTag::Test, ..val };
        assert!(tune_shrinkage(&store, &f, &test, &GAMMA_GRID).is_err());
    }
}
