//! AdamW, the one-cycle schedule, gradient clipping, the epoch loop and evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{GradStore, ParamStore};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::{Dataset, EpochPlan};
use crate::error::{Error, Result};
use crate::mixing::MixVariant;
use crate::model::{Model, Variant};
use crate::nn::Mode;
use crate::tensor::{Element, Tensor4};

pub const METRICS_HEADER: &str = "epoch,loss,train_acc,test_acc,lr,seconds";

/// Adam with decoupled weight decay.
///
/// Each step first shrinks decaying weights by `lr * weight_decay * w`, then applies the
/// bias-corrected Adam update. Parameters registered without decay (biases, norm affine)
/// skip the shrink.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor4<T>>,
    v: Vec<Tensor4<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor4<T>> = params.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor4<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor4<T>] {
        &self.v
    }

    /// Replaces the moment buffers and step counter (checkpoint restore).
    pub fn set_state(&mut self, step: u64, m: Vec<Tensor4<T>>, v: Vec<Tensor4<T>>) -> Result<()> {
        let fits = |bufs: &[Tensor4<T>]| {
            bufs.len() == self.m.len() && bufs.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Shape("optimizer state does not mirror the parameter shapes".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (id, g) in grads.iter() {
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter '{}' at flat index {pos}",
                    params.get(id).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let shrink = lr * self.weight_decay;
        for (id, p) in params.iter_mut() {
            let g = grads.param(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                let mut wi = w.as_f64();
                if p.decay {
                    wi -= shrink * wi;
                }
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::from_f64_lossy(mi);
                v[i] = T::from_f64_lossy(vi);
                wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                *w = T::from_f64_lossy(wi);
            }
        }
        Ok(())
    }
}

/// Cosine one-cycle learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr() / self.final_div_factor
    }

    /// Step at which the rate peaks.
    pub fn peak_step(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Contract(format!(
                "schedule step {step} outside [0, {})",
                self.total_steps
            )));
        }
        let cosine = |start: f64, end: f64, pct: f64| start + (end - start) * (1.0 - (std::f64::consts::PI * pct).cos()) / 2.0;
        let peak = self.peak_step();
        if step < peak {
            return Ok(cosine(self.initial_lr(), self.max_lr, step as f64 / peak as f64));
        }
        let tail = self.total_steps - 1 - peak;
        if tail == 0 {
            return Ok(self.max_lr);
        }
        Ok(cosine(self.max_lr, self.final_lr(), (step - peak) as f64 / tail as f64))
    }

    fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) || self.total_steps == 0 {
            return Err(Error::Config(format!(
                "schedule needs max_lr > 0 and at least one step (got {} and {})",
                self.max_lr, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || !(self.div_factor > 0.0) || !(self.final_div_factor > 0.0) {
            return Err(Error::Config("schedule fractions/factors out of range".into()));
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut GradStore<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be > 0, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = T::from_f64_lossy(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `(correct predictions, summed cross-entropy)` for a logits block of `(n, classes, 1, 1)`.
pub fn score_logits<T: Element>(logits: &Tensor4<T>, labels: &[usize]) -> (usize, f64) {
    let classes = logits.shape().c;
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if argmax(row) == label {
            correct += 1;
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[label].as_f64();
    }
    (correct, loss)
}

/// Top-1 accuracy and mean loss in eval mode.
pub fn evaluate<T: Element>(model: &mut Model<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let plan = EpochPlan::sequential(data.len(), batch_size)?;
    let mut correct = 0;
    let mut loss = 0.0;
    for batch in plan.batches::<T>(data) {
        let batch = batch?;
        let logits = model.predict(&batch.images, Mode::Eval)?;
        let (c, l) = score_logits(&logits, &batch.labels);
        correct += c;
        loss += l;
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
    pub augment: bool,
    /// Seeds every epoch's shuffle and flips.
    pub data_seed: u64,
    /// Write elapsed seconds into the metrics CSV; when off the column is 0 so runs
    /// are byte-comparable.
    pub log_wall_time: bool,
    /// Return after this many completed epochs while keeping the schedule planned for
    /// `epochs`; a later run resumes from `last.spmx`.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 512,
            eval_batch_size: 500,
            max_lr: 0.05,
            weight_decay: 0.005,
            clip: Some(1.0),
            augment: true,
            data_seed: 0,
            log_wall_time: true,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size.max(1))
    }

    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        let mut z = self.data_seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        z = (z ^ (z >> 32)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z ^ (z >> 29)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{:.8},{:.3}",
            self.epoch,
            self.loss,
            self.train_acc,
            self.test_acc.map_or(String::new(), |a| format!("{a:.6}")),
            self.lr,
            self.seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad metrics row '{line}'"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            loss: num(f[1])?,
            train_acc: num(f[2])?,
            test_acc: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            lr: num(f[4])?,
            seconds: num(f[5])?,
        })
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub metrics: String,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            metrics: "metrics.csv".into(),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.spmx")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.spmx")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_acc: f64,
    pub steps: u64,
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in history {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, row: &EpochMetrics) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(path, e))
}

/// Describes which channel segments each block updates.
pub fn segment_schedule<T: Element>(model: &Model<T>) -> Vec<String> {
    let rotating = matches!(model.config.variant, Variant::Split(MixVariant::I | MixVariant::II));
    if !rotating {
        return Vec::new();
    }
    model
        .mixers()
        .enumerate()
        .filter_map(|(l, m)| {
            let m = m?;
            let ranges: Vec<String> = m
                .plan
                .active
                .iter()
                .map(|&r| format!("[{}, {})", m.plan.ranges[r].start, m.plan.ranges[r].end))
                .collect();
            Some(format!("block {l}: mixes channels {}", ranges.join(" then ")))
        })
        .collect()
}

/// Runs the epoch loop, optionally resuming from a checkpoint's training state.
///
/// With `out` set, writes the metrics CSV after every epoch plus `last.spmx` and, on a
/// new best accuracy (test if given, else train), `best.spmx`.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&OutputPaths>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train_set.classes() != model.config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            train_set.classes(),
            model.config.classes
        )));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size.max(1));
    let schedule = OneCycle::new(cfg.max_lr, cfg.total_steps(train_set.len()));
    schedule.validate()?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut state = TrainState::default();
    if let Some(ck) = resume {
        ck.restore_into(model)?;
        ck.restore_optimizer(&model.params, &mut opt)?;
        state = ck.state.clone();
        if state.total_steps != schedule.total_steps as u64 {
            return Err(Error::Config(format!(
                "checkpoint was trained for {} total steps, this run plans {}",
                state.total_steps, schedule.total_steps
            )));
        }
    }
    state.total_steps = schedule.total_steps as u64;
    for line in segment_schedule(model) {
        log::info!("{line}");
    }
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        write_metrics(&o.metrics_path(), &state.history)?;
    }

    let started = Instant::now();
    let end = cfg.stop_after.map_or(cfg.epochs, |n| n.min(cfg.epochs));
    for epoch in state.epoch..end {
        let plan = EpochPlan::shuffled(train_set.len(), cfg.batch_size, cfg.epoch_seed(epoch), cfg.augment)?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut lr = 0.0;
        for batch in plan.batches::<f32>(train_set) {
            let batch = batch?;
            let (loss, mut grads, logits) = model.loss_and_grads(&batch.images, &batch.labels, Mode::Train)?;
            if !loss.is_finite() {
                let hint = out.map_or(String::new(), |o| format!("; last good checkpoint: {}", o.last().display()));
                return Err(Error::Numerical(format!(
                    "loss became {loss} at epoch {} step {}{hint}",
                    epoch + 1,
                    opt.step_count()
                )));
            }
            if let Some(max_norm) = cfg.clip {
                clip_grad_norm(&mut grads, max_norm)?;
            }
            lr = schedule.lr(opt.step_count() as usize)?;
            opt.step(&mut model.params, &grads, lr)?;
            loss_sum += loss as f64 * batch.labels.len() as f64;
            correct += score_logits(&logits, &batch.labels).0;
        }
        debug_assert_eq!(opt.step_count() as usize, (epoch + 1) * steps_per_epoch);
        let test_acc = match test_set {
            Some(t) => Some(evaluate(model, t, cfg.eval_batch_size)?.0),
            None => None,
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            lr,
            seconds: if cfg.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!("{}", row.csv_row());
        let acc = row.test_acc.unwrap_or(row.train_acc);
        let improved = state.history.is_empty() || acc > state.best_acc;
        if improved {
            state.best_acc = acc;
        }
        state.epoch = epoch + 1;
        state.history.push(row.clone());
        if let Some(o) = out {
            append_metrics(&o.metrics_path(), &row)?;
            let ck = Checkpoint::capture(model, Some(&opt), &state);
            if improved {
                ck.save(&o.best())?;
            }
            ck.save(&o.last())?;
        }
    }
    Ok(TrainOutcome {
        history: state.history,
        best_acc: state.best_acc,
        steps: opt.step_count(),
    })
}
