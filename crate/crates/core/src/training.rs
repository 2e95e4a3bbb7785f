//! Minibatch SGD with weight decay, inverted dropout, random cropping and an
//! exponentially decaying learning rate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{accuracies, predict};
use crate::model::{save_checkpoint, Model};
use crate::objective::{bptt, BpttOptions, GradientBundle, TargetLabels};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// `epoch_0000.ckpt`, `epoch_0001.ckpt`, ...
    Every,
    /// `best.ckpt`, rewritten whenever validation joint accuracy improves.
    #[default]
    Best,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Fractional learning-rate decrease per epoch.
    pub lr_decay: f64,
    /// L2 penalty on kernels and weights (never on biases).
    pub weight_decay: f64,
    /// Dropout probability on fully-connected activations.
    pub dropout: f64,
    /// Pixels removed from height and width by cropping.
    pub crop_margin: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Black frames after each video.
    pub delay: usize,
    pub seed: u64,
    pub checkpoints: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_decay: 0.06,
            weight_decay: 0.0005,
            dropout: 0.5,
            crop_margin: 10,
            epochs: 50,
            batch_size: 8,
            delay: 5,
            seed: 0,
            checkpoints: CheckpointPolicy::Best,
        }
    }
}

impl TrainConfig {
    /// Checks rates and that `frame_dims` (`[C, H, W]`) leave a crop.
    pub fn validate(&self, frame_dims: Option<[usize; 3]>) -> Result<()> {
        let rates = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("weight_decay", self.weight_decay),
            ("dropout", self.dropout),
        ];
        for (name, v) in rates {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("training.{name} = {v} is outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size must be positive"));
        }
        if let Some([_, h, w]) = frame_dims {
            if self.crop_margin >= h || self.crop_margin >= w {
                return Err(Error::config(format!(
                    "training.crop_margin = {} does not fit {h}×{w} frames",
                    self.crop_margin
                )));
            }
        }
        Ok(())
    }
}

pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * (1.0 - decay).powi(epoch as i32)
}

/// `θ ← θ − lr·(g + wd·θ)`, with `wd = 0` for bias tensors.
pub fn sgd_update(model: &mut Model, grads: &GradientBundle, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.tensors().len() != model.params().len() {
        return Err(Error::shape("gradient bundle does not match the model"));
    }
    let info = model.param_info().to_vec();
    for ((p, g), info) in model.params_mut().iter_mut().zip(grads.tensors()).zip(&info) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of {} has the wrong shape", info.name)));
        }
        let wd = if info.is_bias { 0.0 } else { weight_decay };
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * (d + wd * *x);
        }
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("update of {}", info.name)));
        }
    }
    Ok(())
}

fn crop_at(frames: &[Tensor], margin: usize, oy: usize, ox: usize) -> Result<Vec<Tensor>> {
    frames
        .iter()
        .map(|f| {
            let (c, h, w) = f.dims3()?;
            if h <= margin || w <= margin {
                return Err(Error::shape(format!(
                    "a {h}×{w} frame cannot lose {margin} pixels per side"
                )));
            }
            let (nh, nw) = (h - margin, w - margin);
            let mut out = Vec::with_capacity(c * nh * nw);
            for ch in 0..c {
                for y in 0..nh {
                    let row = (ch * h + y + oy) * w + ox;
                    out.extend_from_slice(&f.data()[row..row + nw]);
                }
            }
            Tensor::from_vec(&[c, nh, nw], out)
        })
        .collect()
}

/// Crops every frame of a video at one offset drawn uniformly from
/// `[0, margin]²`.
pub fn random_crop(frames: &[Tensor], margin: usize, rng: &mut SeededRng) -> Result<Vec<Tensor>> {
    if margin == 0 {
        return crop_at(frames, 0, 0, 0);
    }
    let oy = rng.inclusive(0, margin);
    let ox = rng.inclusive(0, margin);
    crop_at(frames, margin, oy, ox)
}

/// Deterministic crop used for evaluation.
pub fn center_crop(frames: &[Tensor], margin: usize) -> Result<Vec<Tensor>> {
    crop_at(frames, margin, margin / 2, margin / 2)
}

/// Multipliers of inverted dropout: 0 with probability `p`, else `1/(1−p)`.
pub fn dropout_mask(n: usize, p: f64, rng: &mut SeededRng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect()
}

pub fn dropout_apply(activations: &[f64], p: f64, rng: &mut SeededRng, training: bool) -> Vec<f64> {
    if !training || p == 0.0 {
        return activations.to_vec();
    }
    dropout_mask(activations.len(), p, rng)
        .iter()
        .zip(activations)
        .map(|(m, a)| m * a)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean delay-window loss per training video.
    pub train_loss: f64,
    /// Validation accuracy per head, percent.
    pub val_heads: Option<Vec<f64>>,
    pub val_joint: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub heads: usize,
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(heads: usize) -> Self {
        TrainLog {
            heads,
            rows: Vec::new(),
        }
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("epoch,lr,train_loss");
        for k in 0..self.heads {
            write!(h, ",val_acc_head_{k}").unwrap();
        }
        h.push_str(",val_acc_joint,seconds");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{}", r.epoch, r.lr, r.train_loss).unwrap();
            for k in 0..self.heads {
                match &r.val_heads {
                    Some(v) => write!(out, ",{}", v[k]).unwrap(),
                    None => out.push(','),
                }
            }
            match r.val_joint {
                Some(j) => write!(out, ",{j}").unwrap(),
                None => out.push(','),
            }
            writeln!(out, ",{}", r.seconds).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty log"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || cols[..3] != ["epoch", "lr", "train_loss"] {
            return Err(Error::format(path, "not a training log header"));
        }
        let heads = cols.len() - 5;
        let mut log = TrainLog::new(heads);
        if log.csv_header() != header {
            return Err(Error::format(path, "not a training log header"));
        }
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("bad row {}", i + 1));
            if f.len() != cols.len() {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let heads_v = f[3..3 + heads].iter().map(|s| opt(s)).collect::<Result<Vec<_>>>()?;
            log.rows.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                val_heads: heads_v.into_iter().collect(),
                val_joint: opt(f[3 + heads])?,
                seconds: num(f[4 + heads])?,
            });
        }
        Ok(log)
    }

    pub fn loss_column(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
}

/// Stateful training loop, one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer<'a> {
    model: Model,
    config: TrainConfig,
    train: &'a Dataset,
    val: Option<&'a Dataset>,
    rng: SeededRng,
    log: TrainLog,
    /// Validation predictions per epoch: `[epoch][sample][head]`.
    val_predictions: Vec<Vec<Vec<usize>>>,
    checkpoint_dir: Option<PathBuf>,
    best_joint: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        train: &'a Dataset,
        val: Option<&'a Dataset>,
        config: TrainConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        config.validate(train.frame_dims())?;
        let heads = train.head_sizes();
        if heads != model.spec().heads {
            return Err(Error::config(format!(
                "dataset heads {heads:?} do not match model heads {:?}",
                model.spec().heads
            )));
        }
        if let Some([c, h, w]) = train.frame_dims() {
            let want = model.spec().input.dims();
            let got = [c, h - config.crop_margin, w - config.crop_margin];
            if got != want {
                return Err(Error::config(format!(
                    "frames {c}×{h}×{w} cropped by {} give {got:?}, the model takes {want:?}",
                    config.crop_margin
                )));
            }
        }
        Ok(Trainer {
            rng: SeededRng::new(config.seed),
            log: TrainLog::new(heads.len()),
            model,
            config,
            train,
            val,
            val_predictions: Vec::new(),
            checkpoint_dir: None,
            best_joint: None,
        })
    }

    /// Directory for checkpoints (created on first write).
    pub fn with_checkpoints(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn val_predictions(&self) -> &[Vec<Vec<usize>>] {
        &self.val_predictions
    }

    pub fn epochs_done(&self) -> usize {
        self.log.rows.len()
    }

    pub fn into_parts(self) -> (Model, TrainLog, Vec<Vec<Vec<usize>>>) {
        (self.model, self.log, self.val_predictions)
    }

    /// One pass over the shuffled training set. On a non-finite loss or
    /// update the parameters from the start of the epoch are restored.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let start = Instant::now();
        let snapshot = self.model.params().to_vec();
        match self.epoch_body() {
            Ok(loss) => self.finish_epoch(loss, start),
            Err(e) => {
                self.model.set_params(snapshot)?;
                Err(e)
            }
        }
    }

    fn epoch_body(&mut self) -> Result<f64> {
        let epoch = self.log.rows.len();
        let cfg = &self.config;
        let lr = lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch);
        let sizes = self.model.spec().heads.clone();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradientBundle::zeros_for(&self.model);
            for &i in batch {
                let sample = &self.train.samples[i];
                let frames = random_crop(&sample.frames, cfg.crop_margin, &mut self.rng)?;
                let targets = TargetLabels::new(sample.labels.clone(), &sizes)?;
                let opts = BpttOptions {
                    delay: cfg.delay,
                    loss_scale: 1.0,
                    dropout: Some((cfg.dropout, &mut self.rng)),
                };
                let (e, g) = bptt(&self.model, &frames, &targets, opts)
                    .map_err(|err| in_sample(err, &sample.id))?;
                total += e;
                grads.add_assign(&g)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_update(&mut self.model, &grads, lr, cfg.weight_decay)?;
        }
        Ok(total / self.train.len() as f64)
    }

    fn finish_epoch(&mut self, train_loss: f64, start: Instant) -> Result<&EpochRecord> {
        let epoch = self.log.rows.len();
        let (val_heads, val_joint) = match self.val {
            Some(val) => {
                let preds = predict(&self.model, val, self.config.delay, self.config.crop_margin)?;
                let labels: Vec<Vec<usize>> = val.samples.iter().map(|s| s.labels.clone()).collect();
                let acc = accuracies(&preds, &labels)?;
                self.val_predictions.push(preds);
                (Some(acc.per_head), Some(acc.joint))
            }
            None => (None, None),
        };
        if let Some(dir) = &self.checkpoint_dir {
            let write = match self.config.checkpoints {
                CheckpointPolicy::Every => Some(format!("epoch_{epoch:04}.ckpt")),
                CheckpointPolicy::Best => {
                    let score = val_joint.unwrap_or(-train_loss);
                    let better = self.best_joint.is_none_or(|b| score > b);
                    better.then(|| {
                        self.best_joint = Some(score);
                        "best.ckpt".to_string()
                    })
                }
                CheckpointPolicy::Off => None,
            };
            if let Some(name) = write {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&self.model, &dir.join(name))?;
            }
        }
        let record = EpochRecord {
            epoch,
            lr: lr_at_epoch(self.config.lr0, self.config.lr_decay, epoch),
            train_loss,
            val_heads,
            val_joint,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.5}, val joint {}",
            record.train_loss,
            record.val_joint.map_or("-".into(), |j| format!("{j:.2}%"))
        );
        self.log.rows.push(record);
        Ok(self.log.rows.last().unwrap())
    }

    /// Runs the remaining configured epochs.
    pub fn run(&mut self) -> Result<()> {
        while self.log.rows.len() < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

fn in_sample(err: Error, id: &str) -> Error {
    match err {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (sample {id})")),
        other => other,
    }
}

/// Trains for `config.epochs` epochs and returns the final model and log.
pub fn train(
    model: Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainLog)> {
    let mut t = Trainer::new(model, train_set, val, config.clone())?;
    if let Some(d) = checkpoint_dir {
        t = t.with_checkpoints(d);
    }
    t.run()?;
    let (m, log, _) = t.into_parts();
    Ok((m, log))
}
