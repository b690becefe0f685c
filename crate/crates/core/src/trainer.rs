//! Pre-training and fine-tuning loops, Adam, and the downstream head.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::Linear;
use crate::evalx::{metric, MetricKind};
use crate::losses::{LossConfig, LossReport};
use crate::model::{derive_seed, prepare, Draws, ModelConfig, MvcibModel, Prepared};
use crate::molio::Molecule;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Matrix, Tensor, TensorError};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const METRICS_HEADER: &str = "epoch,l_skl,l_jsmi,l_2d,l_3d,l_2d_to_3d,l_3d_to_2d,total";

/// First and second moment estimates of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update with decoupled weight decay; `t` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    t: u64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: (1, params.len()),
            rhs: (1, grads.len()),
        }
        .into());
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * params[i]);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`]; frozen blocks are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            t: 0,
            states: store
                .ids()
                .map(|id| AdamState::new(store.get(id).data.len()))
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            if !trainable(store.name(id)) {
                continue;
            }
            let state = &mut self.states[id.0];
            adam_step(
                &mut store.get_mut(id).data,
                g,
                state,
                self.lr,
                self.weight_decay,
                self.t,
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 200,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Sets a field from flat `key = value` text. The model's init seed follows `seed`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {k}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.model.init_seed = self.seed;
            }
            "alpha" => self.loss.alpha = num(key, value)?,
            "beta" => self.loss.beta = num(key, value)?,
            "sigma_noise" => self.loss.sigma_noise = num(key, value)?,
            "pair_norm" => self.loss.pair_norm = value.parse().map_err(Error::Config)?,
            "cutoff_3d" => self.model.cutoff = num(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got '{line}'")))?;
            self.set(k.trim(), v.trim().trim_matches('"'))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "batch_size = {}\nepochs = {}\nlr = {}\nweight_decay = {}\nseed = {}\nalpha = {}\nbeta = {}\nsigma_noise = {}\npair_norm = {}\n",
            self.batch_size,
            self.epochs,
            self.lr,
            self.weight_decay,
            self.seed,
            self.loss.alpha,
            self.loss.beta,
            self.loss.sigma_noise,
            self.loss.pair_norm
        );
        for line in self.model.to_meta().lines() {
            let (k, v) = line.split_once('=').expect("meta lines are key=value");
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Splits `0..n` into consecutive batches; a trailing batch of one joins its predecessor.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() >= 2 && out.last().map_or(false, |r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

pub fn metrics_row(epoch: usize, r: &LossReport) -> String {
    format!(
        "{epoch},{},{},{},{},{},{},{}",
        r.l_skl, r.l_jsmi, r.l_2d, r.l_3d, r.l_2d_to_3d, r.l_3d_to_2d, r.total
    )
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MvcibModel,
    pub best: MvcibModel,
    pub best_epoch: Option<usize>,
    /// One report per epoch, epochs numbered from 1.
    pub history: Vec<LossReport>,
    pub metrics_csv: String,
}

/// Prepares every molecule, attaching synthetic geometry where coordinates are absent.
pub fn prepare_all(mols: &[Molecule], cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    mols.iter().map(|m| prepare(m, cfg)).collect()
}

pub fn pretrain(mols: &[Molecule], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let preps = prepare_all(mols, &cfg.model)?;
    pretrain_prepared(&preps, cfg, |_, _| {})
}

/// Runs the objective over the prepared set; `on_epoch` sees each epoch's averaged report.
pub fn pretrain_prepared(
    preps: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if preps.len() < 2 {
        return Err(Error::BatchTooSmall(preps.len()));
    }
    let mut model = MvcibModel::new(cfg.model.clone())?;
    let mut best = model.clone();
    let mut best_total = f64::INFINITY;
    let mut best_epoch = None;
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut csv = format!("{METRICS_HEADER}\n");
    let latent = cfg.model.latent;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..preps.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            epoch as u64,
            u64::MAX,
        )));
        let mut sums = [0.0f64; 6];
        let mut count = 0usize;
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let idx = &order[range];
            let draws: Vec<Draws> = idx
                .iter()
                .map(|&i| {
                    Draws::sample(
                        &preps[i],
                        latent,
                        cfg.loss.sigma_noise,
                        derive_seed(cfg.seed, epoch as u64, i as u64),
                    )
                })
                .collect();
            let batch: Vec<(&Prepared, &Draws)> =
                idx.iter().map(|&i| &preps[i]).zip(&draws).collect();
            let p = model.store.bind_all();
            let (loss, r) = model
                .batch_objective(&p, &batch, &cfg.loss)
                .map_err(|e| match e {
                    Error::NonFiniteLoss(term) => Error::NonFiniteLoss(format!(
                        "{term} at epoch {epoch}, batch [{}]",
                        idx.iter()
                            .map(|&i| preps[i].id.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )),
                    other => other,
                })?;
            let grads = p.grads(&loss.backward()?);
            adam.step(&mut model.store, &grads, |_| true)?;
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                r.l_skl,
                r.l_jsmi,
                r.l_2d,
                r.l_3d,
                r.l_2d_to_3d,
                r.l_3d_to_2d,
            ]) {
                *s += w * v;
            }
            count += idx.len();
        }
        model.trained_epochs = epoch;
        let m = sums.map(|s| s / count as f64);
        let report = LossReport::compose(m[0], m[1], m[2], m[3], m[4], m[5], &cfg.loss);
        csv.push_str(&metrics_row(epoch, &report));
        csv.push('\n');
        on_epoch(epoch, &report);
        if report.total < best_total {
            best_total = report.total;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        history.push(report);
    }
    Ok(PretrainOutcome {
        model,
        best,
        best_epoch,
        history,
        metrics_csv: csv,
    })
}

impl PretrainOutcome {
    /// Writes `final.ckpt`, `best.ckpt`, `metrics.csv` and `config.txt` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("final.ckpt"), self.model.checkpoint_bytes())?;
        std::fs::write(dir.join("best.ckpt"), self.best.checkpoint_bytes())?;
        std::fs::write(dir.join("metrics.csv"), &self.metrics_csv)?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Binary multi-label classification.
    Classification,
    Regression,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(Task::Classification),
            "reg" => Ok(Task::Regression),
            _ => Err(format!("task must be cls or reg, got {s}")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "cls",
            Task::Regression => "reg",
        })
    }
}

/// Linear map from the concatenated latent means to task outputs, on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamHead {
    pub task: Task,
    pub n_tasks: usize,
    pub input: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub store: ParamStore,
    pub linear: Linear,
}

impl DownstreamHead {
    pub fn new(task: Task, input: usize, n_tasks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "head", input, n_tasks, true, &mut rng);
        DownstreamHead {
            task,
            n_tasks,
            input,
            shift: vec![0.0; input],
            scale: vec![1.0; input],
            store,
            linear,
        }
    }

    /// Sets the input standardization from training embeddings.
    pub fn fit_standardizer(&mut self, xs: &[Vec<f64>]) {
        let n = xs.len().max(1) as f64;
        for j in 0..self.input {
            let mean = xs.iter().map(|x| x[j]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            self.shift[j] = mean;
            self.scale[j] = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let shift = Tensor::new(1, self.input, self.shift.iter().map(|v| -v).collect())?;
        let scale = Tensor::new(1, self.input, self.scale.clone())?;
        let ones = Tensor::new(x.rows(), 1, vec![1.0; x.rows()])?;
        Ok(x.add_row(&shift)?.mul(&ones.matmul(&scale)?)?)
    }

    /// Raw outputs (logits for classification) for a batch of embeddings.
    pub fn logits(&self, p: &crate::params::Bound, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input {
            return Err(Error::LabelMismatch(format!(
                "head expects {} inputs, got {}",
                self.input,
                x.cols()
            )));
        }
        self.linear.forward(p, &self.standardize(x)?)
    }

    /// Probabilities for classification, values for regression.
    pub fn predict(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(1, embedding.len(), embedding.to_vec())?;
        let y = self.logits(&self.store.bind_frozen(), &x)?;
        Ok(match self.task {
            Task::Classification => y.data().iter().map(|&v| sigmoid(v)).collect(),
            Task::Regression => y.data().to_vec(),
        })
    }

    /// Masked loss over `rows` of `targets`; NaN targets are missing.
    fn loss(&self, logits: &Tensor, targets: &[Vec<f64>]) -> Result<Tensor> {
        let mut mask = Vec::with_capacity(logits.len());
        let mut y = Vec::with_capacity(logits.len());
        for t in targets {
            for &v in t {
                mask.push(if v.is_nan() { 0.0 } else { 1.0 });
                y.push(if v.is_nan() { 0.0 } else { v });
            }
        }
        let observed: f64 = mask.iter().sum();
        let mask = Tensor::new(logits.rows(), logits.cols(), mask)?;
        let y = Tensor::new(logits.rows(), logits.cols(), y)?;
        let per = match self.task {
            Task::Classification => logits.softplus().sub(&logits.mul(&y)?)?,
            Task::Regression => logits.sub(&y)?.square(),
        };
        Ok(per.mul(&mask)?.sum().scale(1.0 / observed.max(1.0)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = format!(
            "task={}\nn_tasks={}\ninput={}\nshift={}\nscale={}\n",
            self.task,
            self.n_tasks,
            self.input,
            join(&self.shift),
            join(&self.scale)
        );
        self.store.to_bytes(&meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParamStore::from_bytes(bytes)?;
        let mut kv = std::collections::HashMap::new();
        for line in meta.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("head metadata lacks {k}")))
        };
        let task: Task = get("task")?.parse().map_err(Error::Config)?;
        let n_tasks: usize = get("n_tasks")?
            .parse()
            .map_err(|_| Error::Config("bad n_tasks".into()))?;
        let input: usize = get("input")?
            .parse()
            .map_err(|_| Error::Config("bad input".into()))?;
        let mut head = DownstreamHead::new(task, input, n_tasks, 0);
        head.store.assign_from(&store)?;
        head.shift = split(&get("shift")?, input)?;
        head.scale = split(&get("scale")?, input)?;
        Ok(head)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split(s: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad number '{t}'")))
        })
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::Config(format!(
            "expected {n} values, got {}",
            v.len()
        )));
    }
    Ok(v)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train/validation/test fractions.
    pub split: (f64, f64, f64),
    /// Also update encoder parameters instead of a linear probe.
    pub unfreeze: bool,
    pub encoder_lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::Classification,
            epochs: 200,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
            split: (0.6, 0.2, 0.2),
            unfreeze: false,
            encoder_lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random split by the given fractions.
pub fn random_split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = fractions.0 + fractions.1 + fractions.2;
    let n_train = ((fractions.0 / total) * n as f64).round() as usize;
    let n_valid = (((fractions.1 / total) * n as f64).round() as usize).min(n - n_train);
    Split {
        train: idx[..n_train].to_vec(),
        valid: idx[n_train..n_train + n_valid].to_vec(),
        test: idx[n_train + n_valid..].to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: DownstreamHead,
    pub model: MvcibModel,
    pub split: Split,
    pub metric_kind: MetricKind,
    pub valid_metric: f64,
    pub test_metric: f64,
}

/// Task metric averaged over label columns that are evaluable on `rows`.
pub fn task_metric(
    task: Task,
    preds: &[Vec<f64>],
    labels: &[Vec<f64>],
    rows: &[usize],
) -> Result<(MetricKind, f64)> {
    let kind = match task {
        Task::Classification => MetricKind::RocAuc,
        Task::Regression => MetricKind::Rmse,
    };
    let n_tasks = labels.first().map_or(0, Vec::len);
    let mut vals = Vec::new();
    for t in 0..n_tasks {
        let (p, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|&&r| !labels[r][t].is_nan())
            .map(|&r| (preds[r][t], labels[r][t]))
            .unzip();
        if p.is_empty() {
            continue;
        }
        match metric(&p, &y, kind) {
            Ok(v) => vals.push(v),
            Err(Error::DegenerateLabels) => continue,
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    Ok((kind, vals.iter().sum::<f64>() / vals.len() as f64))
}

fn check_labels(task: Task, labels: &[Vec<f64>], n: usize) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::LabelMismatch(format!(
            "{} molecules but {} label rows",
            n,
            labels.len()
        )));
    }
    let k = labels.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::LabelMismatch("no label columns".into()));
    }
    for (i, row) in labels.iter().enumerate() {
        if row.len() != k {
            return Err(Error::LabelMismatch(format!(
                "row {i} has {} labels, expected {k}",
                row.len()
            )));
        }
        if task == Task::Classification
            && row.iter().any(|&v| !(v.is_nan() || v == 0.0 || v == 1.0))
        {
            return Err(Error::LabelMismatch(format!(
                "row {i} has a non-binary class label"
            )));
        }
    }
    Ok(k)
}

/// Pairs molecules with labels by id; every molecule needs a label row.
pub fn align_labels(ids: &[&str], labels: &[(String, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
    let map: std::collections::HashMap<&str, &Vec<f64>> =
        labels.iter().map(|(id, v)| (id.as_str(), v)).collect();
    ids.iter()
        .map(|id| {
            map.get(id)
                .map(|v| (*v).clone())
                .ok_or_else(|| Error::LabelMismatch(format!("no labels for molecule '{id}'")))
        })
        .collect()
}

/// Trains a downstream head on the train split and reports validation/test metrics.
/// The head state with the best validation metric is kept.
pub fn finetune(
    model: &MvcibModel,
    preps: &[Prepared],
    labels: &[Vec<f64>],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let n_tasks = check_labels(cfg.task, labels, preps.len())?;
    let split = random_split(preps.len(), cfg.split, cfg.seed);
    if split.train.is_empty() {
        return Err(Error::LabelMismatch("empty training split".into()));
    }
    let mut model = model.clone();
    let input = 2 * model.config.latent;
    let mut head = DownstreamHead::new(cfg.task, input, n_tasks, derive_seed(cfg.seed, 1, 0));
    let embed_all = |m: &MvcibModel| -> Result<Vec<Vec<f64>>> {
        let p = m.store.bind_frozen();
        preps.iter().map(|prep| m.embed(&p, prep)).collect()
    };
    let mut embeds = embed_all(&model)?;
    head.fit_standardizer(
        &split
            .train
            .iter()
            .map(|&i| embeds[i].clone())
            .collect::<Vec<_>>(),
    );
    let mut head_opt = Adam::new(&head.store, cfg.lr, cfg.weight_decay);
    let mut enc_opt = Adam::new(&model.store, cfg.encoder_lr, 0.0);
    let eval_rows = if split.valid.is_empty() {
        &split.train
    } else {
        &split.valid
    };
    let mut best: Option<(f64, DownstreamHead, MvcibModel)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let hp = head.store.bind_all();
            let targets: Vec<Vec<f64>> = chunk.iter().map(|&i| labels[i].clone()).collect();
            if cfg.unfreeze {
                let mp = model.store.bind_all();
                let rows: Vec<Tensor> = chunk
                    .iter()
                    .map(|&i| {
                        let out = model.eval_forward(&mp, &preps[i])?;
                        Ok(Tensor::concat_cols(&[out.p2d.mean, out.p3d.mean])?)
                    })
                    .collect::<Result<_>>()?;
                let x = Tensor::concat_rows(&rows)?;
                let loss = head.loss(&head.logits(&hp, &x)?, &targets)?;
                let g = loss.backward()?;
                head_opt.step(&mut head.store, &hp.grads(&g), |_| true)?;
                enc_opt.step(&mut model.store, &mp.grads(&g), |_| true)?;
            } else {
                let x = Matrix::from_rows(
                    &chunk.iter().map(|&i| embeds[i].clone()).collect::<Vec<_>>(),
                )?;
                let loss = head.loss(&head.logits(&hp, &Tensor::constant(&x))?, &targets)?;
                let g = loss.backward()?;
                head_opt.step(&mut head.store, &hp.grads(&g), |_| true)?;
            }
        }
        if cfg.unfreeze {
            embeds = embed_all(&model)?;
        }
        let preds = predict_all(&head, &embeds)?;
        let score = match task_metric(cfg.task, &preds, labels, eval_rows) {
            Ok((kind, v)) => {
                if kind.higher_is_better() {
                    v
                } else {
                    -v
                }
            }
            Err(Error::DegenerateLabels) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        if best.as_ref().map_or(true, |b| score > b.0) {
            best = Some((score, head.clone(), model.clone()));
        }
    }
    if let Some((_, h, m)) = best {
        head = h;
        model = m;
        embeds = embed_all(&model)?;
    }
    let preds = predict_all(&head, &embeds)?;
    let eval = |rows: &[usize]| -> Result<f64> {
        match task_metric(cfg.task, &preds, labels, rows) {
            Ok((_, v)) => Ok(v),
            Err(Error::DegenerateLabels) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    };
    let metric_kind = match cfg.task {
        Task::Classification => MetricKind::RocAuc,
        Task::Regression => MetricKind::Rmse,
    };
    Ok(FinetuneOutcome {
        valid_metric: eval(&split.valid)?,
        test_metric: eval(&split.test)?,
        head,
        model,
        split,
        metric_kind,
    })
}

pub fn predict_all(head: &DownstreamHead, embeds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    embeds.iter().map(|e| head.predict(e)).collect()
}
