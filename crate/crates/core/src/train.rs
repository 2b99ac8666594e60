//! Run configs, training loops, evaluation and checkpoint conversion for the
//! three demos.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape};
use crate::error::{Error, Result};
use crate::geometry::{enumerate_hyperoctahedral, GroupElement};
use crate::io::{self, apply_arch_key, parse_bool, parse_key_values, parse_value, Checkpoint, Dataset, Tensor};
use crate::network::model::build_baseline_with_width;
use crate::network::{
    build_backbone, build_baseline, Arch, ArchConfig, FieldStack, HeadKind, Model, NormMode, NormState, NUM_CLASSES,
};
use crate::scalar::Real;
use crate::tasks::{self, stack_images, yolo_loss, ClassifyEval, DetectEval, RegisterEval, YoloConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Register,
    Detect,
}

impl Task {
    pub fn name(self) -> &'static str {
        self.head().name()
    }

    pub fn head(self) -> HeadKind {
        match self {
            Task::Classify => HeadKind::Classify,
            Task::Register => HeadKind::Register,
            Task::Detect => HeadKind::Detect,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<HeadKind>()? {
            HeadKind::Classify => Task::Classify,
            HeadKind::Register => Task::Register,
            HeadKind::Detect => Task::Detect,
        })
    }
}

/// Learning rate over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// half-cosine from `lr` down to zero over the configured epochs
    Cosine,
}

impl Schedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!(
                "lr_schedule must be constant or cosine, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got `{other}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything a train or eval run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub arch: ArchConfig,
    pub baseline: bool,
    pub precision: Precision,
    pub lr: f64,
    pub lr_schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub size: usize,
    /// test data uses `data_seed + 1`
    pub data_seed: u64,
    /// expected cells per 32×32 area
    pub density: f64,
    pub threshold: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// evaluate every group view each epoch for the worst-case metrics
    pub view_metrics: bool,
}

impl RunConfig {
    pub const RUN_KEYS: [&'static str; 16] = [
        "task",
        "lr_schedule",
        "baseline",
        "precision",
        "lr",
        "epochs",
        "batch_size",
        "train_n",
        "test_n",
        "size",
        "data_seed",
        "density",
        "threshold",
        "lambda_coord",
        "lambda_noobj",
        "view_metrics",
    ];

    pub fn keys() -> Vec<&'static str> {
        ArchConfig::KEYS.iter().chain(&Self::RUN_KEYS).copied().collect()
    }

    /// Desk-scale defaults for each demo.
    pub fn preset(task: Task) -> Self {
        let yolo = YoloConfig::default();
        let base = Self {
            task,
            arch: ArchConfig {
                head: task.head(),
                ..ArchConfig::default()
            },
            baseline: false,
            precision: Precision::F32,
            lr: 3e-3,
            lr_schedule: Schedule::Cosine,
            epochs: 10,
            batch_size: 8,
            train_n: 300,
            test_n: 60,
            size: 16,
            data_seed: 1,
            density: 2.0,
            threshold: 0.3,
            lambda_coord: yolo.lambda_coord,
            lambda_noobj: yolo.lambda_noobj,
            view_metrics: true,
        };
        match task {
            Task::Classify => Self {
                arch: ArchConfig {
                    layers: 4,
                    base_scalars: 4,
                    base_vectors: 2,
                    base_matrices: 2,
                    ..base.arch.clone()
                },
                epochs: 80,
                train_n: 800,
                test_n: 150,
                ..base
            },
            Task::Register => Self {
                arch: ArchConfig {
                    dim: 3,
                    layers: 4,
                    base_scalars: 2,
                    base_vectors: 2,
                    base_matrices: 1,
                    ..base.arch.clone()
                },
                size: 9,
                epochs: 40,
                train_n: 600,
                test_n: 20,
                ..base
            },
            Task::Detect => Self {
                arch: ArchConfig {
                    layers: 6,
                    base_scalars: 4,
                    base_vectors: 2,
                    base_matrices: 2,
                    ..base.arch.clone()
                },
                size: 32,
                epochs: 60,
                train_n: 800,
                test_n: 50,
                batch_size: 4,
                ..base
            },
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task = {}\n", self.task);
        s.push_str(&self.arch.to_text());
        s.push_str(&format!(
            "baseline = {}\nprecision = {}\nlr = {:e}\nlr_schedule = {}\nepochs = {}\nbatch_size = {}\ntrain_n = {}\ntest_n = {}\n\
             size = {}\ndata_seed = {}\ndensity = {}\nthreshold = {}\nlambda_coord = {}\nlambda_noobj = {}\n\
             view_metrics = {}\n",
            self.baseline,
            self.precision,
            self.lr,
            self.lr_schedule,
            self.epochs,
            self.batch_size,
            self.train_n,
            self.test_n,
            self.size,
            self.data_seed,
            self.density,
            self.threshold,
            self.lambda_coord,
            self.lambda_noobj,
            self.view_metrics
        ));
        s
    }

    /// Starts from the preset of the config's `task` (or `fallback`) and
    /// applies every key.
    pub fn from_text(text: &str, fallback: Option<Task>) -> Result<Self> {
        let pairs = parse_key_values(text, &Self::keys())?;
        let task = match pairs.iter().find(|(k, _)| k == "task") {
            Some((_, v)) => v.parse()?,
            None => fallback.ok_or_else(|| Error::Config("config names no `task`".into()))?,
        };
        if let Some(f) = fallback {
            if f != task {
                return Err(Error::Config(format!("config is for task {task}, not {f}")));
            }
        }
        let mut cfg = Self::preset(task);
        for (k, v) in &pairs {
            if apply_arch_key(&mut cfg.arch, k, v)? {
                continue;
            }
            match k.as_str() {
                "task" => {}
                "baseline" => cfg.baseline = parse_bool(k, v)?,
                "precision" => cfg.precision = v.parse()?,
                "lr" => cfg.lr = parse_value(k, v)?,
                "lr_schedule" => cfg.lr_schedule = v.parse()?,
                "epochs" => cfg.epochs = parse_value(k, v)?,
                "batch_size" => cfg.batch_size = parse_value(k, v)?,
                "train_n" => cfg.train_n = parse_value(k, v)?,
                "test_n" => cfg.test_n = parse_value(k, v)?,
                "size" => cfg.size = parse_value(k, v)?,
                "data_seed" => cfg.data_seed = parse_value(k, v)?,
                "density" => cfg.density = parse_value(k, v)?,
                "threshold" => cfg.threshold = parse_value(k, v)?,
                "lambda_coord" => cfg.lambda_coord = parse_value(k, v)?,
                "lambda_noobj" => cfg.lambda_noobj = parse_value(k, v)?,
                "view_metrics" => cfg.view_metrics = parse_bool(k, v)?,
                _ => return Err(Error::UnknownConfigKey(k.clone())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.head != self.task.head() {
            return Err(Error::Config(format!(
                "head {} does not fit task {}",
                self.arch.head, self.task
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.task != Task::Register && self.arch.dim != 2 {
            return Err(Error::Config(format!("the {} demo is 2D", self.task)));
        }
        if self.task == Task::Detect && !self.size.is_multiple_of(self.stride()) {
            return Err(Error::Config(format!(
                "detect images of size {} are not a multiple of the stride {}",
                self.size,
                self.stride()
            )));
        }
        self.arch.validate()
    }

    /// Total downsampling factor of the backbone.
    pub fn stride(&self) -> usize {
        1 << (0..self.arch.layers).filter(|&k| self.arch.downsample_after(k)).count()
    }

    pub fn yolo(&self) -> YoloConfig {
        YoloConfig {
            stride: self.stride(),
            lambda_coord: self.lambda_coord,
            lambda_noobj: self.lambda_noobj,
            ..YoloConfig::default()
        }
    }

    pub fn group(&self) -> Vec<GroupElement> {
        enumerate_hyperoctahedral(self.arch.dim)
    }

    pub fn grid(&self) -> Vec<usize> {
        vec![self.size; self.arch.dim]
    }

    pub fn generate(&self, seed: u64, n: usize) -> Result<Dataset> {
        Ok(match self.task {
            Task::Classify => Dataset::Classify(tasks::gen_classification(seed, n, self.size, self.arch.dim)?),
            Task::Register => Dataset::Register(tasks::gen_registration(seed, n, self.size, self.arch.dim)?),
            Task::Detect => Dataset::Detect(tasks::gen_cells(seed, n, self.size, self.density)?),
        })
    }

    pub fn train_data(&self) -> Result<Dataset> {
        self.generate(self.data_seed, self.train_n)
    }

    pub fn test_data(&self) -> Result<Dataset> {
        self.generate(self.data_seed.wrapping_add(1), self.test_n)
    }

    pub fn build_model<T: Real>(&self) -> Result<Model<T>> {
        if self.baseline {
            build_baseline(&self.arch)
        } else {
            build_backbone(&self.arch)
        }
    }
}

pub fn read_config(path: impl AsRef<Path>, fallback: Option<Task>) -> Result<RunConfig> {
    RunConfig::from_text(&io::read_text(path)?, fallback)
}

/// Metrics of one evaluation, as named columns.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Classify(ClassifyEval),
    Register(RegisterEval),
    Detect(DetectEval),
}

impl EvalReport {
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        match self {
            EvalReport::Classify(e) => vec![
                ("accuracy", e.accuracy),
                ("worst_case_accuracy", e.worst_case_accuracy),
                ("auc", e.auc),
                ("test_loss", e.mean_loss),
                ("max_view_deviation", e.max_view_deviation),
            ],
            EvalReport::Register(e) => vec![
                ("mse", e.mse),
                ("worst_case_mse", e.worst_case_mse),
                ("orientation_consistency", e.orientation_consistency),
                ("label_equivariance", e.label_equivariance),
            ],
            EvalReport::Detect(e) => vec![
                ("mean_iou", e.mean_iou),
                ("worst_case_mean_iou", e.worst_case_mean_iou),
                ("detections", e.detections as f64),
                ("false_positives", e.false_positives as f64),
                ("max_center_deviation", e.max_center_deviation),
                ("max_form_deviation", e.max_form_deviation),
                ("count_mismatches", e.count_mismatches as f64),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.columns().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// `name = value` lines.
    pub fn block(&self) -> String {
        self.columns().iter().map(|(n, v)| format!("{n} = {v}\n")).collect()
    }
}

/// Evaluates in 64-bit regardless of the training precision.
pub fn evaluate<T: Real>(model: &Model<T>, cfg: &RunConfig, data: &Dataset, views: bool) -> Result<EvalReport> {
    let m64: Model<f64> = model.cast();
    let group = if views { cfg.group() } else { Vec::new() };
    let chunk = 8;
    Ok(match data {
        Dataset::Classify(d) => EvalReport::Classify(tasks::evaluate_classification(&m64, d, &group, chunk)?),
        Dataset::Register(d) => EvalReport::Register(tasks::evaluate_registration(&m64, d, &group, chunk)?),
        Dataset::Detect(d) => EvalReport::Detect(tasks::evaluate_detection(
            &m64,
            d,
            cfg.threshold,
            &cfg.yolo(),
            &group,
            chunk,
        )?),
    })
}

/// Model, optimizer and step counter.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub cfg: RunConfig,
    pub step: u64,
    pub epoch: usize,
    adam: AdamState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::from_model(cfg, cfg.build_model()?))
    }

    pub fn from_model(cfg: &RunConfig, model: Model<T>) -> Self {
        let lens: Vec<usize> = model.params().iter().map(Vec::len).collect();
        Self {
            adam: AdamState::new(&lens, T::lit(cfg.lr)),
            model,
            cfg: cfg.clone(),
            step: 0,
            epoch: 0,
        }
    }

    /// One optimizer step on the given samples; returns the batch loss.
    pub fn train_batch(&mut self, data: &Dataset, idx: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let (input, target) = batch_input::<T>(data, idx)?;
        let trace = self.model.record(&mut tape, &input, NormMode::Train)?;
        let loss = match target {
            Target::Labels(labels) => tape.cross_entropy(trace.output, &labels, NUM_CLASSES)?,
            Target::Values(v) => tape.mse(trace.output, &v)?,
            Target::Cells(cells) => {
                let out = self.model.output_stack(&tape, &trace)?;
                let (l, grad) = yolo_loss(&out, &cells, &self.cfg.yolo())?;
                tape.precomputed_loss(trace.output, T::lit(l.total), grad)?
            }
        };
        let value = tape.value(loss)?[0].as_f64();
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<T>> = trace
            .params
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| grads.wrt(v, p.len()))
            .collect::<Result<_>>()?;
        self.adam.step(self.model.params_mut(), &g)?;
        self.model.update_norms(&trace.stats);
        self.step += 1;
        Ok(value)
    }

    /// One pass over `data` in a seeded shuffled order; returns the mean
    /// batch loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        self.adam.lr = T::lit(self.cfg.lr * self.cfg.lr_schedule.factor(self.epoch, self.cfg.epochs));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.arch.seed ^ 0x5eed_0000);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            // a batch of one has no batch statistics
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            total += self.train_batch(data, chunk)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        model_checkpoint(&self.model, self.step)
    }
}

enum Target<T> {
    Labels(Vec<usize>),
    Values(Vec<T>),
    Cells(Vec<Vec<tasks::Ellipse>>),
}

fn batch_input<T: Real>(data: &Dataset, idx: &[usize]) -> Result<(FieldStack<T>, Target<T>)> {
    Ok(match data {
        Dataset::Classify(d) => {
            let images: Vec<_> = idx.iter().map(|&i| d[i].image.clone()).collect();
            (
                stack_images(&images)?,
                Target::Labels(idx.iter().map(|&i| d[i].label).collect()),
            )
        }
        Dataset::Register(d) => {
            let images: Vec<_> = idx.iter().map(|&i| d[i].volume.clone()).collect();
            let v = idx.iter().flat_map(|&i| d[i].label.to_vec()).map(T::lit).collect();
            (stack_images(&images)?, Target::Values(v))
        }
        Dataset::Detect(d) => {
            let images: Vec<_> = idx.iter().map(|&i| d[i].image.clone()).collect();
            (
                stack_images(&images)?,
                Target::Cells(idx.iter().map(|&i| d[i].cells.clone()).collect()),
            )
        }
    })
}

/// Parameters as `<name>` blobs and norm state as `norm<k>.mean` /
/// `norm<k>.var`, stored in the model's precision.
pub fn model_checkpoint<T: Real>(model: &Model<T>, step: u64) -> Result<Checkpoint> {
    let mut blobs = Vec::new();
    for (name, p) in model.param_names().iter().zip(model.params()) {
        blobs.push((name.clone(), Tensor::from_real(0, vec![p.len()], p)?));
    }
    for (k, n) in model.norms().iter().enumerate() {
        blobs.push((
            format!("norm{k}.mean"),
            Tensor::from_real(0, vec![n.mean.len()], &n.mean)?,
        ));
        blobs.push((format!("norm{k}.var"), Tensor::from_real(0, vec![n.var.len()], &n.var)?));
    }
    Ok(Checkpoint {
        config: io::arch_to_text(model.config(), model.arch()),
        step,
        seed: model.config().seed,
        blobs,
    })
}

pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Model<T>> {
    let (cfg, arch) = io::arch_from_text(&ck.config)?;
    let mut model: Model<T> = match arch {
        Arch::Equivariant => build_backbone(&cfg)?,
        Arch::Baseline { width } => build_baseline_with_width(&cfg, width)?,
    };
    let params = model
        .param_names()
        .iter()
        .map(|n| Ok(ck.blob(n)?.to_real::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let norms = (0..model.norms().len())
        .map(|k| {
            let mut st = model.norms()[k].clone();
            st.mean = ck.blob(&format!("norm{k}.mean"))?.to_real();
            st.var = ck.blob(&format!("norm{k}.var"))?.to_real();
            Ok(st)
        })
        .collect::<Result<Vec<NormState<T>>>>()?;
    let expected = model.param_names().len() + 2 * model.norms().len();
    if ck.blobs.len() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} blobs, the model needs {expected}",
            ck.blobs.len()
        )));
    }
    model.load_state(params, norms)?;
    Ok(model)
}

/// Checks that a checkpoint was written for the architecture in `cfg`.
pub fn check_checkpoint_matches(ck: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let (arch_cfg, arch) = io::arch_from_text(&ck.config)?;
    if arch_cfg != cfg.arch {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint architecture differs from the config:\n{}",
            arch_cfg.to_text()
        )));
    }
    if matches!(arch, Arch::Baseline { .. }) != cfg.baseline {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint is {} but the config asks for {}",
            if cfg.baseline { "equivariant" } else { "a baseline" },
            if cfg.baseline {
                "a baseline"
            } else {
                "the equivariant model"
            }
        )));
    }
    Ok(())
}

/// Per-epoch metrics CSV: `epoch,step,train_loss,<eval columns>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, step: u64, train_loss: f64, report: &EvalReport) {
        if self.header.is_empty() {
            self.header = ["epoch", "step", "train_loss"].iter().map(|s| s.to_string()).collect();
            self.header.extend(report.columns().iter().map(|(n, _)| n.to_string()));
        }
        let mut row = vec![epoch.to_string(), step.to_string(), train_loss.to_string()];
        row.extend(report.columns().iter().map(|(_, v)| v.to_string()));
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Trains for `cfg.epochs` epochs, evaluating on the test set after each.
/// `on_epoch` sees the trainer and the latest report (e.g. to checkpoint).
pub fn run_training<T: Real>(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&Trainer<T>, &EvalReport) -> Result<()>,
) -> Result<(Trainer<T>, MetricsLog)> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut log = MetricsLog::default();
    for _ in 0..cfg.epochs {
        let loss = trainer.train_epoch(train)?;
        let report = evaluate(&trainer.model, cfg, test, cfg.view_metrics)?;
        log::info!(
            "{} epoch {}: loss {loss:.5} {:?}",
            cfg.task,
            trainer.epoch,
            report.columns()
        );
        log.push(trainer.epoch, trainer.step, loss, &report);
        on_epoch(&trainer, &report)?;
    }
    Ok((trainer, log))
}
