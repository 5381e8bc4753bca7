//! Task streams: disjoint class groups with train/val/test splits.

pub mod augment;
pub mod io;
pub mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{AugFamily, AugPolicy, Transform, TransformRecord};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Samples with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub samples: Tensor,
    pub labels: Vec<ClassId>,
    pub split: SplitTag,
}

impl LabeledSet {
    pub fn new(samples: Tensor, labels: Vec<ClassId>, split: SplitTag) -> Result<Self> {
        if samples.shape().len() != 2 || samples.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for samples of shape {:?}",
                labels.len(),
                samples.shape()
            )));
        }
        Ok(LabeledSet {
            samples,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Row indices per class, in ascending row order.
    pub fn indices_by_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.labels.iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    pub fn subset(&self, rows: &[usize]) -> Result<LabeledSet> {
        let samples = self.samples.select_rows(rows)?;
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        LabeledSet::new(samples, labels, self.split)
    }

    /// Rows whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[ClassId]) -> Result<LabeledSet> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        if rows.is_empty() {
            return Err(Error::contract(format!("no samples for classes {classes:?}")));
        }
        self.subset(&rows)
    }

    pub fn concat(parts: &[&LabeledSet]) -> Result<LabeledSet> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let samples: Vec<&Tensor> = parts.iter().map(|p| &p.samples).collect();
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        LabeledSet::new(Tensor::concat_rows(&samples)?, labels, first.split)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Every task gets `total / T` classes.
    #[default]
    Cold,
    /// Half the classes up front, the rest split over `T - 1` tasks.
    Warm,
}

/// Class-group sizes for `total` classes over `tasks` tasks.
pub fn group_sizes(total: usize, tasks: usize, mode: StartMode) -> Result<Vec<usize>> {
    if tasks == 0 || total == 0 {
        return Err(Error::config("need at least one task and one class"));
    }
    match mode {
        StartMode::Cold => {
            if total % tasks != 0 {
                return Err(Error::config(format!(
                    "cold start: {total} classes not divisible into {tasks} tasks"
                )));
            }
            Ok(vec![total / tasks; tasks])
        }
        StartMode::Warm => {
            if tasks < 2 {
                return Err(Error::config("warm start needs at least two tasks"));
            }
            if total % 2 != 0 || (total / 2) % (tasks - 1) != 0 {
                return Err(Error::config(format!(
                    "warm start: {total} classes cannot be split as half + {} equal groups",
                    tasks - 1
                )));
            }
            let mut sizes = vec![total / 2];
            sizes.extend(std::iter::repeat_n(total / 2 / (tasks - 1), tasks - 1));
            Ok(sizes)
        }
    }
}

/// One task's classes and data.
#[derive(Clone, Debug)]
pub struct TaskData {
    /// Sorted class ids of this group.
    pub classes: Vec<ClassId>,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub mode: StartMode,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn class_groups(&self) -> Vec<Vec<ClassId>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }

    /// Splits pre-loaded train/test data into tasks. `n_val` rows per class
    /// are carved off the end of each class's training rows.
    pub fn from_sets(
        train: &LabeledSet,
        test: &LabeledSet,
        tasks: usize,
        mode: StartMode,
        class_seed: u64,
        n_val: usize,
    ) -> Result<TaskStream> {
        let train_by_class = train.indices_by_class();
        let test_by_class = test.indices_by_class();
        let classes: Vec<ClassId> = train_by_class.keys().copied().collect();
        let order = shuffled_groups(&classes, tasks, mode, class_seed)?;
        let mut out = Vec::with_capacity(order.len());
        for group in order {
            let mut tr = Vec::new();
            let mut va = Vec::new();
            let mut te = Vec::new();
            for c in &group {
                let rows = &train_by_class[c];
                if rows.len() < n_val + 2 {
                    return Err(Error::config(format!(
                        "class {c} has {} training rows, need {} (val {n_val} + 2)",
                        rows.len(),
                        n_val + 2
                    )));
                }
                let cut = rows.len() - n_val;
                tr.extend_from_slice(&rows[..cut]);
                va.extend_from_slice(&rows[cut..]);
                let test_rows = test_by_class
                    .get(c)
                    .ok_or_else(|| Error::config(format!("class {c} has no test rows")))?;
                te.extend_from_slice(test_rows);
            }
            let mut train_set = train.subset(&tr)?;
            train_set.split = SplitTag::Train;
            let val_set = if va.is_empty() {
                // No validation data requested; fall back to the training rows.
                LabeledSet { split: SplitTag::Val, ..train_set.clone() }
            } else {
                let mut v = train.subset(&va)?;
                v.split = SplitTag::Val;
                v
            };
            let mut test_set = test.subset(&te)?;
            test_set.split = SplitTag::Test;
            out.push(TaskData {
                classes: group,
                train: train_set,
                val: val_set,
                test: test_set,
            });
        }
        Ok(TaskStream { mode, tasks: out })
    }
}

/// Shuffles the class list with `class_seed` and cuts it into groups.
fn shuffled_groups(classes: &[ClassId], tasks: usize, mode: StartMode, class_seed: u64) -> Result<Vec<Vec<ClassId>>> {
    let sizes = group_sizes(classes.len(), tasks, mode)?;
    let mut order = classes.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed));
    let mut groups = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        let mut g = order[start..start + s].to_vec();
        g.sort_unstable();
        groups.push(g);
        start += s;
    }
    Ok(groups)
}

/// Configuration for [`make_task_stream`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub synthetic: SyntheticSpec,
    pub tasks: usize,
    pub mode: StartMode,
    pub class_seed: u64,
    pub seed: u64,
}

/// Generates a synthetic stream. Deterministic in `(seed, class_seed)`.
pub fn make_task_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    let spec = &cfg.synthetic;
    spec.validate()?;
    group_sizes(spec.classes, cfg.tasks, cfg.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let models = synthetic::class_models(spec, &mut rng);
    let (train, test) = sample_sets(spec, &models, &mut rng)?;
    TaskStream::from_sets(&train, &test, cfg.tasks, cfg.mode, cfg.class_seed, spec.n_val)
}

fn sample_sets(
    spec: &SyntheticSpec,
    models: &[synthetic::ClassModel],
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledSet, LabeledSet)> {
    let per_train = spec.n_train + spec.n_val;
    let mut train = Vec::with_capacity(models.len() * per_train * spec.input_dim);
    let mut train_labels = Vec::new();
    let mut test = Vec::new();
    let mut test_labels = Vec::new();
    for (c, m) in models.iter().enumerate() {
        for _ in 0..per_train {
            train.extend(m.sample(rng));
            train_labels.push(c);
        }
        for _ in 0..spec.n_test {
            test.extend(m.sample(rng));
            test_labels.push(c);
        }
    }
    let d = spec.input_dim;
    Ok((
        LabeledSet::new(Tensor::new(vec![train_labels.len(), d], train)?, train_labels, SplitTag::Train)?,
        LabeledSet::new(Tensor::new(vec![test_labels.len(), d], test)?, test_labels, SplitTag::Test)?,
    ))
}
