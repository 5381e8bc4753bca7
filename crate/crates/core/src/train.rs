//! Local CE / KD losses, the SGD loop for one task, and class statistics.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugFamily, LabeledSet};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{Extractor, Model, ModelState, Split};
use crate::replay::{adversarial_attack, AttackConfig, CandidateSet};
use crate::tensor::{Tape, Tensor, Var};
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_kd: f64,
    pub kd_temperature: f64,
    pub ce_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_kd: 10.0,
            kd_temperature: 2.0,
            ce_temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd >= 0.0) || !self.lambda_kd.is_finite() {
            return Err(Error::config("lambda_kd must be a finite value >= 0"));
        }
        if !(self.kd_temperature > 0.0) || !(self.ce_temperature > 0.0) {
            return Err(Error::config("loss temperatures must be > 0"));
        }
        Ok(())
    }
}

/// SGD settings for one phase (initial task or incremental tasks).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub initial: PhaseConfig,
    pub incremental: PhaseConfig,
    /// Pseudo-replay batch size.
    pub batch_apr: usize,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            initial: PhaseConfig {
                lr: 0.1,
                weight_decay: 5e-4,
                epochs: 100,
                batch_size: 64,
            },
            incremental: PhaseConfig {
                lr: 0.01,
                weight_decay: 2e-4,
                epochs: 100,
                batch_size: 32,
            },
            batch_apr: 64,
            momentum: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("initial", &self.initial), ("incremental", &self.incremental)] {
            if !(p.lr >= 0.0) || !(p.weight_decay >= 0.0) || p.batch_size == 0 {
                return Err(Error::config(format!(
                    "{name} phase needs lr >= 0, weight_decay >= 0 and batch_size > 0"
                )));
            }
        }
        if self.batch_apr == 0 {
            return Err(Error::config("batch_apr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 over `epochs`, evaluated at `epoch`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

/// Mean cross-entropy of `logits / temperature` against relative labels.
pub fn local_ce_loss<'t>(logits: Var<'t>, labels: &[usize], temperature: f64) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::contract(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::contract(format!("label {y} outside {c} new classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let tape = logits.tape();
    let mask = tape.constant(Tensor::new(vec![b, c], onehot)?);
    logits
        .scale(1.0 / temperature)?
        .log_softmax()?
        .mul(&mask)?
        .sum()?
        .scale(-1.0 / b as f64)
}

/// `T² · mean_i KL(softmax(prev_i / T) ‖ softmax(cur_i / T))` with `prev`
/// treated as a constant.
pub fn local_kd_loss<'t>(cur: Var<'t>, prev: &Tensor, temperature: f64) -> Result<Var<'t>> {
    if cur.shape() != prev.shape() {
        return Err(Error::contract(format!(
            "KD column mismatch: current {:?} vs previous {:?}",
            cur.shape(),
            prev.shape()
        )));
    }
    let b = prev.rows();
    let cols = prev.cols();
    let mut p = Vec::with_capacity(prev.len());
    let mut entropy_term = 0.0;
    for row in prev.data().chunks(cols) {
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let mut probs = vec![0.0; cols];
        crate::tensor::kernels::softmax_row(&scaled, &mut probs);
        for &q in &probs {
            if q > 0.0 {
                entropy_term += q * q.ln();
            }
        }
        p.extend(probs);
    }
    let tape = cur.tape();
    let p = tape.constant(Tensor::new(vec![b, cols], p)?);
    let cross = cur.scale(1.0 / temperature)?.log_softmax()?.mul(&p)?.sum()?;
    let t2 = temperature * temperature;
    tape.constant(Tensor::scalar(entropy_term))
        .sub(&cross)?
        .scale(t2 / b as f64)
}

/// Per-step loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// One epoch's averaged losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// Builds the combined loss on a fresh tape and returns it with the
/// gradient for every parameter in [`Model::parameters_mut`] order.
///
/// `x_new` feeds both CE (new columns) and KD; `x_replay` feeds KD only.
pub fn loss_and_grad(
    model: &Model,
    frozen: Option<&Model>,
    x_new: &Tensor,
    y_rel: &[usize],
    x_replay: Option<&Tensor>,
    cfg: &LossConfig,
) -> Result<(StepLoss, Vec<Tensor>)> {
    let tape = Tape::new();
    let ext = model.extractor.bind(&tape, true);
    let head = model.head.bind(&tape, true);
    let mut params = ext.params();
    params.push(head.weights());

    let b_new = x_new.rows();
    let use_kd = frozen.is_some() && cfg.lambda_kd > 0.0;
    let x_all = match (use_kd, x_replay) {
        (true, Some(r)) if r.rows() > 0 => Tensor::concat_rows(&[x_new, r])?,
        _ => x_new.clone(),
    };
    let feats = ext.forward(tape.constant(x_all.clone()))?;
    let new_feats = if x_all.rows() == b_new {
        feats
    } else {
        feats.select_rows(&(0..b_new).collect::<Vec<_>>())?
    };
    let ce = local_ce_loss(head.logits(new_feats, Split::NewOnly)?, y_rel, cfg.ce_temperature)?;
    let mut total = ce;
    let mut kd_value = 0.0;
    if let (true, Some(prev)) = (use_kd, frozen) {
        let prev_logits = prev.head.logits(&prev.extractor.extract(&x_all)?, Split::All)?;
        let cur = head.logits(feats, Split::OldOnly)?;
        let kd = local_kd_loss(cur, &prev_logits, cfg.kd_temperature)?;
        kd_value = kd.value().item()?;
        total = total.add(&kd.scale(cfg.lambda_kd)?)?;
    }
    let ce_value = ce.value().item()?;
    let (total_value, grads) = tape.value_and_grad(total, &params)?;
    Ok((
        StepLoss {
            ce: ce_value,
            kd: kd_value,
            total: total_value,
        },
        grads,
    ))
}

/// `p ← p − lr (g + wd p)`, with optional heavy-ball momentum.
fn sgd_step(model: &mut Model, grads: &[Tensor], velocity: &mut Vec<Tensor>, lr: f64, wd: f64, momentum: f64) -> Result<()> {
    let mut params = model.parameters_mut();
    if params.len() != grads.len() {
        return Err(Error::contract("gradient count does not match parameters"));
    }
    if velocity.is_empty() {
        *velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let mut step = g.clone();
        step.add_scaled(wd, p)?;
        if momentum > 0.0 {
            let mut nv = v.map(|x| x * momentum);
            nv.add_scaled(1.0, &step)?;
            *v = nv.clone();
            step = nv;
        }
        p.add_scaled(-lr, &step)?;
    }
    Ok(())
}

/// Everything the replay branch of one task needs.
pub struct ReplayPlan<'a> {
    pub candidates: &'a CandidateSet,
    /// Attack targets per old class.
    pub prototypes: &'a BTreeMap<ClassId, Vector>,
    pub family: &'a AugFamily,
    /// `None` replays candidates without perturbation.
    pub attack: Option<AttackConfig>,
    pub noise_r: f64,
}

/// Round-robin over classes; each class walks its own shuffled candidate
/// order and reshuffles when exhausted.
struct ReplaySampler {
    classes: Vec<ClassId>,
    orders: BTreeMap<ClassId, (Vec<usize>, usize)>,
    cursor: usize,
}

impl ReplaySampler {
    fn new(candidates: &CandidateSet) -> Self {
        let orders = candidates
            .iter()
            .map(|(c, e)| (c, ((0..e.indices.len()).collect(), usize::MAX)))
            .collect();
        ReplaySampler {
            classes: candidates.classes().collect(),
            orders,
            cursor: 0,
        }
    }

    fn next_batch(&mut self, size: usize, rng: &mut impl Rng) -> Vec<(ClassId, usize)> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let class = self.classes[self.cursor % self.classes.len()];
            self.cursor += 1;
            let (order, pos) = self.orders.get_mut(&class).expect("sampler class");
            if *pos >= order.len() {
                order.shuffle(rng);
                *pos = 0;
            }
            out.push((class, order[*pos]));
            *pos += 1;
        }
        out
    }
}

fn replay_batch(
    plan: &ReplayPlan<'_>,
    frozen: &Extractor,
    data: &LabeledSet,
    picks: &[(ClassId, usize)],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let dim = data.dim();
    let d = frozen.feature_dim();
    let mut xs = Vec::with_capacity(picks.len() * dim);
    let mut targets = Vec::with_capacity(picks.len() * d);
    for &(class, j) in picks {
        let entry = plan.candidates.get(class).expect("sampler only yields stored classes");
        let row = entry.indices[j] as usize;
        xs.extend(plan.family.apply_policy(data.samples.row(row), &entry.policies[j])?);
        let mu = plan
            .prototypes
            .get(&class)
            .ok_or_else(|| Error::contract(format!("no prototype for old class {class}")))?;
        targets.extend(mu.iter());
    }
    let x = Tensor::new(vec![picks.len(), dim], xs)?;
    match &plan.attack {
        Some(cfg) => {
            let t = Tensor::new(vec![picks.len(), d], targets)?;
            adversarial_attack(frozen, &x, &t, cfg, plan.noise_r, rng)
        }
        None => Ok(x),
    }
}

/// Trains `state.current` on `data` for one task.
///
/// At task 0 this is plain CE over every class. Afterwards CE covers the
/// newest class group on `data` only, and KD against the frozen model covers
/// the old columns on the joint batch of new-task and replayed samples.
pub fn run_task(
    state: &mut ModelState,
    data: &LabeledSet,
    replay: Option<&ReplayPlan<'_>>,
    loss: &LossConfig,
    optim: &OptimConfig,
    rng: &mut impl Rng,
    mut log: impl FnMut(&EpochLog),
) -> Result<()> {
    loss.validate()?;
    optim.validate()?;
    let phase = if state.task() == 0 { optim.initial } else { optim.incremental };
    let frozen = state.frozen().cloned();
    let head = &state.current.head;
    let new_cols = head.split_columns(Split::NewOnly)?;
    let rel: BTreeMap<ClassId, usize> = new_cols
        .iter()
        .enumerate()
        .map(|(r, &col)| (head.classes()[col], r))
        .collect();
    let y_rel = data
        .labels
        .iter()
        .map(|y| {
            rel.get(y)
                .copied()
                .ok_or_else(|| Error::contract(format!("label {y} is not a class of the current task")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sampler = None;
    if let (Some(plan), Some(prev)) = (replay, frozen.as_ref()) {
        for c in prev.head.classes() {
            if plan.candidates.get(*c).is_none_or(|e| e.indices.is_empty()) {
                return Err(Error::contract(format!("no candidates for old class {c}")));
            }
        }
        if !plan.candidates.is_empty() {
            sampler = Some(ReplaySampler::new(plan.candidates));
        }
    }

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = Vec::new();
    for epoch in 0..phase.epochs {
        let lr = cosine_lr(phase.lr, epoch, phase.epochs);
        order.shuffle(rng);
        let mut sums = StepLoss::default();
        let mut steps = 0;
        for chunk in order.chunks(phase.batch_size) {
            let x = data.samples.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| y_rel[i]).collect();
            let x_replay = match (&mut sampler, replay, frozen.as_ref()) {
                (Some(s), Some(plan), Some(prev)) if loss.lambda_kd > 0.0 => {
                    let picks = s.next_batch(optim.batch_apr, rng);
                    Some(replay_batch(plan, &prev.extractor, data, &picks, rng)?)
                }
                _ => None,
            };
            let (step, grads) = loss_and_grad(&state.current, frozen.as_ref(), &x, &y, x_replay.as_ref(), loss)?;
            sgd_step(&mut state.current, &grads, &mut velocity, lr, phase.weight_decay, optim.momentum)?;
            sums.ce += step.ce;
            sums.kd += step.kd;
            sums.total += step.total;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        log(&EpochLog {
            epoch,
            lr,
            ce: sums.ce / k,
            kd: sums.kd / k,
            total: sums.total / k,
        });
    }
    Ok(())
}

/// Feature mean and unbiased covariance per requested class.
pub fn compute_class_stats(
    f: &Extractor,
    data: &LabeledSet,
    classes: &[ClassId],
) -> Result<BTreeMap<ClassId, (Vector, Matrix)>> {
    let by_class = data.indices_by_class();
    let mut out = BTreeMap::new();
    for &c in classes {
        let rows = by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        if rows.len() < 2 {
            return Err(Error::Stats(format!("class {c} has {} samples, need 2", rows.len())));
        }
        let feats = crate::replay::extract_chunked(f, &data.samples.select_rows(rows)?)?;
        out.insert(c, mean_and_covariance(&feats));
    }
    Ok(out)
}

pub(crate) fn mean_and_covariance(feats: &Tensor) -> (Vector, Matrix) {
    let m = crate::linalg::to_matrix(feats);
    let n = m.nrows() as f64;
    let mean: Vector = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = crate::linalg::symmetrize(&(centered.transpose() * &centered / (n - 1.0)));
    (mean, cov)
}
