//! Pseudo-replay: candidate selection before a task and the targeted attack
//! that turns candidates into old-class stand-ins during training.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AugFamily, AugPolicy, LabeledSet};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::Extractor;
use crate::tensor::{Tape, Tensor};
use crate::ClassId;

/// Gradient rows below this norm are left unperturbed.
pub const GRAD_EPS: f64 = 1e-12;

/// Rows pushed through the extractor at once when scoring candidates.
const SCORE_CHUNK: usize = 256;

/// Indices into the current task's training set plus the recorded policy
/// for each, for one old class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCandidates {
    pub indices: Vec<u32>,
    pub policies: Vec<AugPolicy>,
}

/// Candidate indices and policies for every old class. Holds no samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    entries: BTreeMap<ClassId, ClassCandidates>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: ClassId, entry: ClassCandidates) -> Result<()> {
        if entry.indices.len() != entry.policies.len() {
            return Err(Error::contract(format!(
                "class {class}: {} indices vs {} policies",
                entry.indices.len(),
                entry.policies.len()
            )));
        }
        self.entries.insert(class, entry);
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassCandidates> {
        self.entries.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &ClassCandidates)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Per class: `u32 class, u32 k, k x u32 index, k policy records`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (&class, e) in &self.entries {
            let class = u32::try_from(class).map_err(|_| Error::config("class id exceeds u32"))?;
            out.extend_from_slice(&class.to_le_bytes());
            out.extend_from_slice(&(e.indices.len() as u32).to_le_bytes());
            for i in &e.indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
            for p in &e.policies {
                p.encode(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<CandidateSet> {
        let mut set = CandidateSet::new();
        let mut pos = 0;
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Decode("truncated candidate record".into()))
        };
        while pos < bytes.len() {
            let class = word(pos)? as ClassId;
            let k = word(pos + 4)? as usize;
            pos += 8;
            let indices = (0..k).map(|j| word(pos + 4 * j)).collect::<Result<Vec<_>>>()?;
            pos += 4 * k;
            let mut policies = Vec::with_capacity(k);
            for _ in 0..k {
                let (p, used) = AugPolicy::decode(&bytes[pos..])?;
                policies.push(p);
                pos += used;
            }
            if set.entries.contains_key(&class) {
                return Err(Error::Decode(format!("class {class} appears twice")));
            }
            set.insert(class, ClassCandidates { indices, policies })?;
        }
        Ok(set)
    }

    /// Serialized size implied by the storage accounting for `classes` old
    /// classes with `k` candidates drawn from `family`.
    pub fn accounted_len(classes: usize, k: usize, family: &AugFamily) -> usize {
        classes * (8 + k * 4 + k * family.bytes_per_policy())
    }
}

/// Picks `k` samples per class from a `[class][sample]` distance table.
///
/// Without a cap each class independently takes its `k` nearest samples
/// (ties go to the lower sample index). With a cap, all `(sample, class)`
/// pairs are visited in ascending distance and assigned greedily, skipping
/// samples that already serve `cap` classes and classes that already have
/// `k` samples. Returned indices are in assignment order.
pub fn select_by_distance(distances: &[Vec<f64>], k: usize, cap: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let m = distances.len();
    let n = distances.first().map_or(0, Vec::len);
    if distances.iter().any(|row| row.len() != n) {
        return Err(Error::dim("ragged distance table"));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds the {n} available samples")));
    }
    let Some(cap) = cap else {
        return Ok(distances
            .iter()
            .map(|row| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
                idx.truncate(k);
                idx
            })
            .collect());
    };
    if cap == 0 || k * m > n * cap {
        return Err(Error::config(format!(
            "cap infeasible: {m} classes x k = {k} needs {} assignments, \
             {n} samples x cap {cap} allow {}",
            k * m,
            n * cap
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..m).flat_map(|c| (0..n).map(move |i| (c, i))).collect();
    pairs.sort_by(|&(c1, i1), &(c2, i2)| {
        distances[c1][i1]
            .total_cmp(&distances[c2][i2])
            .then(i1.cmp(&i2))
            .then(c1.cmp(&c2))
    });
    let mut per_sample = vec![0usize; n];
    let mut chosen: Vec<Vec<usize>> = vec![Vec::with_capacity(k); m];
    let mut done = 0;
    for (c, i) in pairs {
        if chosen[c].len() == k || per_sample[i] == cap {
            continue;
        }
        chosen[c].push(i);
        per_sample[i] += 1;
        if chosen[c].len() == k {
            done += 1;
            if done == m {
                break;
            }
        }
    }
    if let Some(c) = chosen.iter().position(|v| v.len() < k) {
        return Err(Error::config(format!(
            "cap {cap} exhausted before class slot {c} reached k = {k}"
        )));
    }
    Ok(chosen)
}

/// Draws one policy per sample of `data`, scores every augmented sample
/// against each prototype with the frozen extractor, and keeps the nearest
/// `k` per class.
pub fn sample_candidates(
    f_old: &Extractor,
    data: &LabeledSet,
    prototypes: &[(ClassId, Vector)],
    k: usize,
    cap: Option<usize>,
    family: &AugFamily,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    let n = data.len();
    let dim = data.dim();
    let policies: Vec<AugPolicy> = (0..n).map(|_| family.sample_policy(dim, rng)).collect();
    let mut augmented = Vec::with_capacity(n * dim);
    for (i, p) in policies.iter().enumerate() {
        augmented.extend(family.apply_policy(data.samples.row(i), p)?);
    }
    let augmented = Tensor::new(vec![n, dim], augmented)?;
    let feats = extract_chunked(f_old, &augmented)?;
    let distances: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|(_, mu)| {
            (0..n)
                .map(|i| {
                    feats
                        .row(i)
                        .iter()
                        .zip(mu.iter())
                        .map(|(f, m)| (f - m) * (f - m))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let chosen = select_by_distance(&distances, k, cap)?;
    let mut set = CandidateSet::new();
    for ((class, _), rows) in prototypes.iter().zip(chosen) {
        set.insert(
            *class,
            ClassCandidates {
                indices: rows.iter().map(|&i| i as u32).collect(),
                policies: rows.iter().map(|&i| policies[i].clone()).collect(),
            },
        )?;
    }
    Ok(set)
}

pub(crate) fn extract_chunked(f: &Extractor, x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if n <= SCORE_CHUNK {
        return f.extract(x);
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(SCORE_CHUNK) {
        let rows: Vec<usize> = (start..(start + SCORE_CHUNK).min(n)).collect();
        parts.push(f.extract(&x.select_rows(&rows)?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Prototype-noise magnitude `sqrt(sum_c tr(Σ_c) / d)`, summed over classes.
pub fn noise_magnitude<'a>(covariances: impl IntoIterator<Item = &'a Matrix>, d: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for cov in covariances {
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::dim(format!(
                "covariance {}x{} for feature dim {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        total += cov.trace() / d as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("noise magnitude needs at least one covariance"));
    }
    if total < 0.0 {
        return Err(Error::Numeric(format!("negative total trace {total}")));
    }
    Ok(total.sqrt())
}

/// Denominator of the attack step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepNorm {
    /// `α ∇ / ‖∇‖²`
    #[default]
    Squared,
    /// `α ∇ / ‖∇‖`
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub alpha: f64,
    pub n_attack: usize,
    /// Perturb each target with `r · N(0, I)` every iteration.
    pub noise: bool,
    pub step: StepNorm,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha: 64.0,
            n_attack: 4,
            noise: true,
            step: StepNorm::Squared,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("attack alpha must be > 0, got {}", self.alpha)));
        }
        if self.n_attack == 0 {
            return Err(Error::config("n_attack must be at least 1"));
        }
        Ok(())
    }
}

/// Moves each row of `x` so that `f_old(x)` approaches its target row,
/// `x ← x − α ∇ₓL / ‖∇ₓL‖²` with `L = ‖f_old(x) − target‖²`, repeated
/// `n_attack` times. No clipping. The result carries no tape.
pub fn adversarial_attack(
    f_old: &Extractor,
    x: &Tensor,
    targets: &Tensor,
    cfg: &AttackConfig,
    r: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let (b, dim) = x.as_matrix("adversarial_attack")?;
    let d = f_old.feature_dim();
    if targets.shape() != [b, d] {
        return Err(Error::dim(format!(
            "targets {:?} for batch {b} and feature dim {d}",
            targets.shape()
        )));
    }
    let mut current = x.clone().into_data();
    for _ in 0..cfg.n_attack {
        let target = if cfg.noise {
            let noisy = targets
                .data()
                .iter()
                .map(|&t| {
                    let e: f64 = StandardNormal.sample(rng);
                    t + r * e
                })
                .collect();
            Tensor::new(vec![b, d], noisy)?
        } else {
            targets.clone()
        };
        let grad = attack_gradient(f_old, Tensor::from_parts(vec![b, dim], current.clone()), target)?;
        for (row, g) in current.chunks_mut(dim).zip(grad.data().chunks(dim)) {
            let sq: f64 = g.iter().map(|v| v * v).sum();
            if sq.sqrt() < GRAD_EPS {
                continue;
            }
            let denom = match cfg.step {
                StepNorm::Squared => sq,
                StepNorm::Unit => sq.sqrt(),
            };
            for (xv, gv) in row.iter_mut().zip(g) {
                *xv -= cfg.alpha * gv / denom;
            }
        }
    }
    Tensor::new(vec![b, dim], current).map_err(|_| Error::NonFinite { op: "adversarial_attack" })
}

/// `∇ₓ Σᵢ ‖f(xᵢ) − tᵢ‖²`; row `i` of the result is sample `i`'s gradient.
fn attack_gradient(f: &Extractor, x: Tensor, target: Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = f.bind(&tape, false);
    let xv = tape.leaf(x);
    let diff = bound.forward(xv)?.sub(&tape.constant(target))?;
    let loss = diff.mul(&diff)?.sum()?;
    let (_, mut g) = tape.value_and_grad(loss, &[xv])?;
    Ok(g.remove(0))
}

/// Euclidean distance from each feature row to its target row.
pub fn feature_distances(f: &Extractor, x: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    let feats = extract_chunked(f, x)?;
    if feats.shape() != targets.shape() {
        return Err(Error::dim("targets do not match feature batch"));
    }
    Ok((0..feats.rows())
        .map(|i| {
            feats
                .row(i)
                .iter()
                .zip(targets.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use crate::model::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_magnitude_examples() {
        let eye = Matrix::identity(3, 3);
        let four = [eye.clone(), eye.clone(), eye.clone(), eye];
        assert!((noise_magnitude(&four, 3).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(noise_magnitude(&[Matrix::zeros(2, 2)], 2).unwrap(), 0.0);
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0]));
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 2.0]));
        assert!((noise_magnitude(&[a, b], 2).unwrap() - 2.0).abs() < 1e-12);
        let none: [Matrix; 0] = [];
        assert!(matches!(noise_magnitude(&none, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn one_step_identity_attack() {
        let f = Extractor::identity(2);
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mu = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let cfg = AttackConfig {
            alpha: 1.0,
            n_attack: 1,
            noise: false,
            step: StepNorm::Squared,
        };
        let out = adversarial_attack(&f, &x, &mu, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0]);
    }

    #[test]
    fn stationary_point_is_fixed() {
        let f = Extractor::identity(3);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let cfg = AttackConfig {
            noise: false,
            ..AttackConfig::default()
        };
        let out = adversarial_attack(&f, &x, &x, &cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn unit_step_variant() {
        let f = Extractor::identity(2);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let mu = Tensor::zeros(&[1, 2]);
        let cfg = AttackConfig {
            alpha: 1.0,
            n_attack: 1,
            noise: false,
            step: StepNorm::Unit,
        };
        let out = adversarial_attack(&f, &x, &mu, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((out.get(0, 0) - 2.4).abs() < 1e-12 && (out.get(0, 1) - 3.2).abs() < 1e-12);
    }

    #[test]
    fn attack_rejects_bad_config() {
        let f = Extractor::identity(2);
        let x = Tensor::zeros(&[1, 2]);
        let bad = AttackConfig {
            alpha: 0.0,
            ..AttackConfig::default()
        };
        assert!(adversarial_attack(&f, &x, &x, &bad, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn attack_is_deterministic_and_leaves_model_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Extractor::mlp(&[6, 16, 4], Activation::Relu, &mut rng).unwrap();
        let before = format!("{f:?}");
        let x = Tensor::from_rows(&(0..8).map(|i| vec![i as f64 * 0.1; 6]).collect::<Vec<_>>()).unwrap();
        let t = Tensor::full(&[8, 4], 0.3);
        let cfg = AttackConfig {
            alpha: 0.5,
            noise: false,
            ..AttackConfig::default()
        };
        let a = adversarial_attack(&f, &x, &t, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = adversarial_attack(&f, &x, &t, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, format!("{f:?}"));
    }

    #[test]
    fn squared_step_lowers_loss_by_alpha_to_first_order() {
        // ΔL ≈ -∇L·(α∇L/‖∇L‖²) = -α for small α.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Extractor::mlp(&[5, 8, 3], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor::from_rows(&(0..6).map(|i| vec![0.2 + i as f64 * 0.1; 5]).collect::<Vec<_>>()).unwrap();
        let t = Tensor::full(&[6, 3], 0.7);
        let alpha = 1e-5;
        let cfg = AttackConfig {
            alpha,
            n_attack: 1,
            noise: false,
            step: StepNorm::Squared,
        };
        let out = adversarial_attack(&f, &x, &t, &cfg, 0.0, &mut rng).unwrap();
        let before = feature_distances(&f, &x, &t).unwrap();
        let after = feature_distances(&f, &out, &t).unwrap();
        for (a, b) in after.iter().zip(&before) {
            let drop = b * b - a * a;
            assert!((drop - alpha).abs() < 1e-2 * alpha, "drop {drop}");
        }
    }

    #[test]
    fn brute_force_selection_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..5.0)).collect();
        let picked = select_by_distance(std::slice::from_ref(&row), 3, None).unwrap();
        let mut oracle: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<usize> = oracle[..3].iter().map(|p| p.1).collect();
        assert_eq!(picked[0], expect);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let d = vec![vec![1.0, 0.5, 0.5, 2.0]];
        assert_eq!(select_by_distance(&d, 2, None).unwrap()[0], vec![1, 2]);
    }

    #[test]
    fn selection_errors() {
        let d = vec![vec![0.0; 3]; 2];
        assert!(matches!(select_by_distance(&d, 4, None), Err(Error::Config(_))));
        // 2 classes x k=3 needs 6 assignments, 3 samples x cap 1 give 3.
        let err = select_by_distance(&d, 3, Some(1)).unwrap_err();
        assert!(err.to_string().contains("cap"));
    }

    #[test]
    fn capped_greedy_assignment() {
        // Sample 0 is nearest to both classes; with cap 1 class 1 must fall back.
        let d = vec![vec![0.1, 0.5, 0.9], vec![0.2, 0.8, 0.3]];
        let free = select_by_distance(&d, 1, None).unwrap();
        assert_eq!(free, vec![vec![0], vec![0]]);
        let capped = select_by_distance(&d, 1, Some(1)).unwrap();
        assert_eq!(capped, vec![vec![0], vec![2]]);
        for cap in [Some(2), Some(3)] {
            let sel = select_by_distance(&d, 2, cap).unwrap();
            let mut uses = [0; 3];
            sel.iter().flatten().for_each(|&i| uses[i] += 1);
            assert!(uses.iter().all(|&u| u <= cap.unwrap()));
            assert!(sel.iter().all(|v| v.len() == 2));
        }
    }

    #[test]
    fn zero_distance_sample_ranks_first() {
        let f = Extractor::identity(2);
        let x = Tensor::from_rows(&[vec![3.0, 3.0], vec![1.0, 2.0], vec![0.0, 5.0]]).unwrap();
        let data = LabeledSet::new(x, vec![9, 9, 9], SplitTag::Train).unwrap();
        let mu = Vector::from_vec(vec![1.0, 2.0]);
        let set = sample_candidates(
            &f,
            &data,
            &[(4, mu)],
            2,
            None,
            &AugFamily::disabled(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(set.get(4).unwrap().indices[0], 1);
    }

    #[test]
    fn candidate_set_serialization_matches_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fam = AugFamily::default();
        let mut set = CandidateSet::new();
        for c in [2, 7, 11] {
            let indices: Vec<u32> = (0..5).map(|_| rng.random_range(0..100)).collect();
            let policies = (0..5).map(|_| fam.sample_policy(16, &mut rng)).collect();
            set.insert(c, ClassCandidates { indices, policies }).unwrap();
        }
        let bytes = set.encode().unwrap();
        assert_eq!(bytes.len(), CandidateSet::accounted_len(3, 5, &fam));
        assert_eq!(CandidateSet::decode(&bytes).unwrap(), set);
        assert!(CandidateSet::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
