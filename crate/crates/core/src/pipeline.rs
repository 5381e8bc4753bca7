//! Run configuration and the end-to-end driver over a task stream.
//!
//! A run directory holds `config.json` (resolved config), `seeds.json`,
//! `metrics.csv` (`stage,task,epoch,key,value`, deterministic), `summary.json`,
//! `run.json` (wall time and caller metadata) and, optionally, per-task
//! checkpoints under `task_<t>/`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{
    calibrate, fit_transfer_matrix, generate_drift_samples, transfer_mse, tune_shrinkage, AdcConfig, PrototypeStore,
    TransferScope, GAMMA_GRID,
};
use crate::classify::{self, metrics, ClassifierKind, EvalResult};
use crate::data::{io, make_task_stream, AugFamily, LabeledSet, SplitTag, StartMode, StreamConfig, SyntheticSpec, TaskStream};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{Activation, ClassifierHead, Extractor, HeadMode, Model, ModelState, DEFAULT_HEAD_INIT_STD};
use crate::replay::{
    adversarial_attack, extract_chunked, feature_distances, noise_magnitude, sample_candidates, AttackConfig, CandidateSet,
};
use crate::storage::CovMode;
use crate::tensor::Tensor;
use crate::train::{compute_class_stats, run_task, LossConfig, OptimConfig, ReplayPlan};
use crate::ClassId;

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// CSV (`.csv`) or APRD binary (anything else) files.
    Files { train: PathBuf, test: PathBuf, n_val: usize },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub head: HeadMode,
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![256, 128],
            feature_dim: 32,
            activation: Activation::Relu,
            head: HeadMode::default(),
            head_init_std: DEFAULT_HEAD_INIT_STD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub enabled: bool,
    /// Candidates per old class.
    pub k: usize,
    /// Max old classes one sample may serve; 0 disables the cap.
    pub cap: usize,
    /// Off replays candidates unperturbed.
    pub attack_enabled: bool,
    pub attack: AttackConfig,
    pub family: AugFamily,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            enabled: true,
            k: 60,
            cap: 4,
            attack_enabled: true,
            attack: AttackConfig::default(),
            family: AugFamily::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub enabled: bool,
    pub adc: AdcConfig,
    pub cov_mode: CovMode,
    pub gamma_grid: Vec<f64>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            enabled: true,
            adc: AdcConfig::default(),
            cov_mode: CovMode::Full,
            gamma_grid: GAMMA_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub data: DataSource,
    pub tasks: usize,
    pub start: StartMode,
    pub class_seed: u64,
    /// Seeds the synthetic generator only.
    pub data_seed: u64,
    /// Seeds initialization, batching, policies, and attack noise.
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub replay: ReplayConfig,
    pub calib: CalibConfig,
    pub classifiers: Vec<ClassifierKind>,
    pub checkpoints: bool,
    /// Used by callers that do not pass an explicit directory.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "apr".into(),
            data: DataSource::default(),
            tasks: 5,
            start: StartMode::Cold,
            class_seed: 1993,
            data_seed: 7,
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            replay: ReplayConfig::default(),
            calib: CalibConfig::default(),
            classifiers: vec![ClassifierKind::Linear, ClassifierKind::Ncm, ClassifierKind::Mahalanobis],
            checkpoints: true,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::config("tasks must be >= 1"));
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Files { train, test, .. } => {
                for p in [train, test] {
                    if !p.is_file() {
                        return Err(Error::config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::config("model widths must be > 0"));
        }
        if let HeadMode::Cosine { scale } = self.model.head {
            if !(scale > 0.0) {
                return Err(Error::config("cosine scale must be > 0"));
            }
        }
        self.optim.validate()?;
        self.loss.validate()?;
        self.replay.family.validate()?;
        self.replay.attack.validate()?;
        if self.replay.enabled && self.replay.k == 0 {
            return Err(Error::config("replay.k must be > 0"));
        }
        if self.calib.enabled {
            self.calib.adc.validate()?;
        }
        self.calib.cov_mode.scalars(self.model.feature_dim)?;
        if self.calib.gamma_grid.is_empty() || self.calib.gamma_grid.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::config("gamma_grid must be non-empty and >= 0"));
        }
        if self.classifiers.is_empty() {
            return Err(Error::config("at least one classifier is required"));
        }
        Ok(())
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.model.hidden);
        w.push(self.model.feature_dim);
        w
    }
}

/// Median feature-to-prototype distance of one replay batch before and
/// after the attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackProbe {
    pub task: usize,
    pub median_before: f64,
    pub median_after: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub results: BTreeMap<ClassifierKind, EvalResult>,
    /// Tuned `γ` per task (when Mahalanobis is evaluated).
    pub gammas: Vec<f64>,
    pub probes: Vec<AttackProbe>,
    pub state: ModelState,
    pub store: PrototypeStore,
    pub wall_seconds: f64,
}

impl RunOutcome {
    pub fn a_last(&self, kind: ClassifierKind) -> Option<f64> {
        self.results.get(&kind).map(|r| r.a_last)
    }

    pub fn a_inc(&self, kind: ClassifierKind) -> Option<f64> {
        self.results.get(&kind).map(|r| r.a_inc)
    }
}

struct MetricsLog {
    path: PathBuf,
    pending: Vec<String>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let mut f = File::create(&path)?;
        writeln!(f, "stage,task,epoch,key,value")?;
        Ok(MetricsLog { path, pending: Vec::new() })
    }

    fn row(&mut self, stage: &str, task: usize, epoch: Option<usize>, key: &str, value: f64) {
        let epoch = epoch.map(|e| e.to_string()).unwrap_or_default();
        self.pending.push(format!("{stage},{task},{epoch},{key},{value}"));
    }

    /// Appends buffered rows; called at each task boundary.
    fn flush(&mut self) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        for line in self.pending.drain(..) {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

pub fn load_stream(cfg: &RunConfig) -> Result<TaskStream> {
    match &cfg.data {
        DataSource::Synthetic(spec) => make_task_stream(&StreamConfig {
            synthetic: spec.clone(),
            tasks: cfg.tasks,
            mode: cfg.start,
            class_seed: cfg.class_seed,
            seed: cfg.data_seed,
        }),
        DataSource::Files { train, test, n_val } => {
            let read = |p: &Path, tag| {
                if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    io::read_csv(p, tag)
                } else {
                    io::read_binary(p, tag)
                }
            };
            let tr = read(train, SplitTag::Train)?;
            let te = read(test, SplitTag::Test)?;
            TaskStream::from_sets(&tr, &te, cfg.tasks, cfg.start, cfg.class_seed, *n_val)
        }
    }
}

/// Runs every task of `cfg` and writes the run directory `out`.
pub fn run_benchmark(cfg: &RunConfig, out: &Path, meta: &BTreeMap<String, String>) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    fs::write(
        out.join("seeds.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "class_seed": cfg.class_seed,
            "data_seed": cfg.data_seed,
            "seed": cfg.seed,
        }))?,
    )?;
    let mut log = MetricsLog::create(out.join("metrics.csv"))?;

    let stream = load_stream(cfg).map_err(|e| e.in_stage("data"))?;
    let groups = stream.class_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let extractor = Extractor::mlp(&cfg.widths(stream.input_dim()), cfg.model.activation, &mut rng)?;
    let head = ClassifierHead::new(cfg.model.feature_dim, &groups[0], cfg.model.head, cfg.model.head_init_std, &mut rng)?;
    let mut state = ModelState::new(Model { extractor, head });
    let mut store = PrototypeStore::new();
    let mut acc: BTreeMap<ClassifierKind, Vec<Vec<f64>>> = BTreeMap::new();
    let mut gammas = Vec::new();
    let mut probes = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        info!("task {t}: classes {:?}", task.classes);
        if t > 0 {
            state = state.advance(&task.classes, cfg.model.head_init_std, &mut rng)?;
        }
        let frozen_sum = state.frozen().map(Model::checksum);

        // Candidate sampling and the per-task replay plan.
        let mut candidates = CandidateSet::new();
        let prototypes = store.means();
        let mut noise_r = 0.0;
        let replay_on = t > 0 && cfg.replay.enabled && cfg.loss.lambda_kd > 0.0;
        if replay_on {
            let f_old = &state.frozen().expect("t > 0").extractor;
            let protos: Vec<(ClassId, Vector)> = prototypes.iter().map(|(c, m)| (*c, m.clone())).collect();
            candidates = sample_candidates(
                f_old,
                &task.train,
                &protos,
                cfg.replay.k,
                (cfg.replay.cap > 0).then_some(cfg.replay.cap),
                &cfg.replay.family,
                &mut rng,
            )
            .map_err(|e| e.in_stage("candidates"))?;
            if cfg.replay.attack.noise {
                let covs = store.dense_covariances();
                noise_r = noise_magnitude(covs.values(), cfg.model.feature_dim)?;
            }
            log.row("candidates", t, None, "noise_r", noise_r);
            if cfg.replay.attack_enabled {
                let probe = attack_probe(cfg, f_old, &task.train, &candidates, &prototypes, noise_r, t, &mut probe_rng)
                    .map_err(|e| e.in_stage("attack"))?;
                log.row("attack", t, None, "median_before", probe.median_before);
                log.row("attack", t, None, "median_after", probe.median_after);
                probes.push(probe);
            }
        }
        let plan = ReplayPlan {
            candidates: &candidates,
            prototypes: &prototypes,
            family: &cfg.replay.family,
            attack: cfg.replay.attack_enabled.then_some(cfg.replay.attack),
            noise_r,
        };

        let mut epoch_rows = Vec::new();
        run_task(
            &mut state,
            &task.train,
            replay_on.then_some(&plan),
            &cfg.loss,
            &cfg.optim,
            &mut rng,
            |e| epoch_rows.push(e.clone()),
        )
        .map_err(|e| e.in_stage(if t == 0 { "initial training" } else { "training" }))?;
        for e in &epoch_rows {
            log.row("train", t, Some(e.epoch), "lr", e.lr);
            log.row("train", t, Some(e.epoch), "ce", e.ce);
            log.row("train", t, Some(e.epoch), "kd", e.kd);
            log.row("train", t, Some(e.epoch), "loss", e.total);
        }
        if let (Some(before), Some(frozen)) = (frozen_sum, state.frozen()) {
            if frozen.checksum() != before {
                return Err(Error::contract(format!("frozen model changed during task {t}")));
            }
        }

        if t > 0 && cfg.calib.enabled {
            calibrate_store(cfg, &state, &task.train, &mut store, t, &mut log).map_err(|e| e.in_stage("calibration"))?;
        }

        let stats = compute_class_stats(&state.current.extractor, &task.train, &task.classes)
            .map_err(|e| e.in_stage("class statistics"))?;
        store.insert_stats(stats, t)?;
        if let CovMode::Svd { k } = cfg.calib.cov_mode {
            store.compress(k)?;
        }

        // Evaluation over every group seen so far.
        let seen = &stream.tasks[..=t];
        let gamma = if cfg.classifiers.contains(&ClassifierKind::Mahalanobis) {
            let val_parts: Vec<&LabeledSet> = seen.iter().map(|s| &s.val).collect();
            let val = LabeledSet::concat(&val_parts)?;
            let (g, val_acc) = tune_shrinkage(&store, &state.current.extractor, &val, &cfg.calib.gamma_grid)
                .map_err(|e| e.in_stage("shrinkage tuning"))?;
            log.row("tune", t, None, "gamma", g);
            log.row("tune", t, None, "val_accuracy", val_acc);
            gammas.push(g);
            g
        } else {
            0.0
        };
        let test_parts: Vec<&LabeledSet> = seen.iter().map(|s| &s.test).collect();
        let test = LabeledSet::concat(&test_parts)?;
        let feats = extract_chunked(&state.current.extractor, &test.samples)?;
        for &kind in &cfg.classifiers {
            let preds = match kind {
                ClassifierKind::Linear => classify::predict_linear(&state.current, &feats),
                ClassifierKind::Ncm => classify::predict_ncm(&store.means(), &feats),
                ClassifierKind::Mahalanobis => classify::Mahalanobis::new(&store, gamma, gamma)?.predict(&feats),
            }
            .map_err(|e| e.in_stage("evaluation"))?;
            let row = classify::group_accuracies(&preds, &test.labels, &groups[..=t])?;
            for (j, a) in row.iter().enumerate() {
                log.row("eval", t, None, &format!("{}/group{j}", kind.name()), *a);
            }
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            log.row("eval", t, None, &format!("{}/a_k", kind.name()), mean);
            acc.entry(kind).or_default().push(row);
        }

        if cfg.checkpoints {
            let dir = out.join(format!("task_{t}"));
            fs::create_dir_all(&dir)?;
            state.save_json(&dir.join("model.json"))?;
            store.save_json(&dir.join("store.json"))?;
            if !candidates.is_empty() {
                fs::write(dir.join("candidates.bin"), candidates.encode()?)?;
            }
        }
        log.flush()?;
    }

    let mut results = BTreeMap::new();
    for (kind, a) in acc {
        let r = metrics(&a, stream.len())?;
        log.row("summary", stream.len() - 1, None, &format!("{}/a_inc", kind.name()), r.a_inc);
        log.row("summary", stream.len() - 1, None, &format!("{}/a_last", kind.name()), r.a_last);
        results.insert(kind, r);
    }
    log.flush()?;
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&results)?)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let mut run_meta: BTreeMap<String, serde_json::Value> =
        meta.iter().map(|(k, v)| (k.clone(), serde_json::Value::from(v.as_str()))).collect();
    run_meta.insert("wall_seconds".into(), wall_seconds.into());
    run_meta.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
    fs::write(out.join("run.json"), serde_json::to_vec_pretty(&run_meta)?)?;
    Ok(RunOutcome {
        results,
        gammas,
        probes,
        state,
        store,
        wall_seconds,
    })
}

/// One round-robin batch of candidates (first candidate of each class,
/// then the second, ...), attacked as in training.
#[allow(clippy::too_many_arguments)]
fn attack_probe(
    cfg: &RunConfig,
    f_old: &Extractor,
    data: &LabeledSet,
    candidates: &CandidateSet,
    prototypes: &BTreeMap<ClassId, Vector>,
    noise_r: f64,
    task: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AttackProbe> {
    let size = cfg.optim.batch_apr;
    let mut xs = Vec::new();
    let mut targets = Vec::new();
    let mut j = 0;
    'outer: loop {
        let mut any = false;
        for (c, e) in candidates.iter() {
            if j < e.indices.len() {
                any = true;
                xs.push(cfg.replay.family.apply_policy(data.samples.row(e.indices[j] as usize), &e.policies[j])?);
                targets.push(prototypes[&c].as_slice().to_vec());
                if xs.len() == size {
                    break 'outer;
                }
            }
        }
        if !any {
            break;
        }
        j += 1;
    }
    let x = Tensor::from_rows(&xs)?;
    let t = Tensor::from_rows(&targets)?;
    // Measured against the clean prototypes, so target noise is off here.
    let attack = AttackConfig {
        noise: false,
        ..cfg.replay.attack
    };
    let before = feature_distances(f_old, &x, &t)?;
    let adv = adversarial_attack(f_old, &x, &t, &attack, noise_r, rng)?;
    let after = feature_distances(f_old, &adv, &t)?;
    Ok(AttackProbe {
        task,
        median_before: median(before),
        median_after: median(after),
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Drift samples, transfer fit and calibration for every stored class.
fn calibrate_store(
    cfg: &RunConfig,
    state: &ModelState,
    data: &LabeledSet,
    store: &mut PrototypeStore,
    task: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    let f_old = &state.frozen().ok_or_else(|| Error::contract("calibration needs a frozen model"))?.extractor;
    let f_new = &state.current.extractor;
    let adc = &cfg.calib.adc;
    let mut pairs: BTreeMap<ClassId, (Tensor, Tensor)> = BTreeMap::new();
    for (c, entry) in store.iter() {
        let drift = generate_drift_samples(f_old, data, &entry.mean, adc)?;
        pairs.insert(c, (extract_chunked(f_old, &drift)?, extract_chunked(f_new, &drift)?));
    }
    let shared: Option<Matrix> = match adc.scope {
        TransferScope::PerClass => None,
        TransferScope::Shared => {
            let olds: Vec<&Tensor> = pairs.values().map(|p| &p.0).collect();
            let news: Vec<&Tensor> = pairs.values().map(|p| &p.1).collect();
            let (o, n) = (Tensor::concat_rows(&olds)?, Tensor::concat_rows(&news)?);
            let (w, _) = fit_transfer_matrix(&o, &n, adc.transfer_lr, adc.transfer_epochs)?;
            Some(w)
        }
    };
    let d = cfg.model.feature_dim;
    let (mut init_sum, mut final_sum) = (0.0, 0.0);
    let mut updated = Vec::new();
    for (c, (old, new)) in &pairs {
        let (w, delta) = match &shared {
            Some(w) => {
                let (_, delta) = fit_transfer_matrix(old, new, adc.transfer_lr, 0)?;
                (w.clone(), delta)
            }
            None => fit_transfer_matrix(old, new, adc.transfer_lr, adc.transfer_epochs)?,
        };
        init_sum += transfer_mse(old, new, &Matrix::identity(d, d));
        final_sum += transfer_mse(old, new, &w);
        let entry = store.get(*c).expect("class from store");
        updated.push((*c, calibrate(entry, &w, &delta, task)?));
    }
    for (c, e) in updated {
        store.insert(c, e)?;
    }
    let n = pairs.len().max(1) as f64;
    log.row("calibration", task, None, "transfer_mse_identity", init_sum / n);
    log.row("calibration", task, None, "transfer_mse_fitted", final_sum / n);
    Ok(())
}
