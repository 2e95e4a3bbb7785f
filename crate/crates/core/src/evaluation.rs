//! Leave-one-subject-out cross-validation, delay-window readout and
//! accuracy reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, ModelSpec};
use crate::tensor::SeededRng;
use crate::training::{center_crop, TrainConfig, TrainLog, Trainer};

/// How predictions are read out of the delay window.
pub const DECISION_RULE: &str = "argmax of the mean softmax over the delay window, lowest index on ties";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out: usize,
    /// Sample indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// One fold per subject, holding out all of that subject's videos.
pub fn losocv_splits(dataset: &Dataset) -> Result<FoldPlan> {
    let subjects = dataset.subjects();
    if subjects.len() < 2 {
        return Err(Error::config(format!(
            "cross-validation needs at least 2 subjects, the dataset has {}",
            subjects.len()
        )));
    }
    let folds = subjects
        .into_iter()
        .map(|s| {
            let (test, train) = (0..dataset.len()).partition(|&i| dataset.samples[i].subject == s);
            Fold {
                held_out: s,
                train,
                test,
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Per head, argmax of the mean softmax over steps `frames..frames+delay`.
pub fn classify(trace: &ForwardTrace, frames: usize, delay: usize) -> Result<Vec<usize>> {
    if delay == 0 {
        return Err(Error::config("classification needs a delay window of at least one step"));
    }
    if trace.len() < frames + delay {
        return Err(Error::shape(format!(
            "trace has {} steps, the window ends at {}",
            trace.len(),
            frames + delay
        )));
    }
    let window = &trace.outputs[frames..frames + delay];
    let heads = window[0].len();
    Ok((0..heads)
        .map(|h| {
            let n = window[0][h].len();
            let mean: Vec<f64> = (0..n)
                .map(|k| window.iter().map(|step| step[h][k]).sum::<f64>() / delay as f64)
                .collect();
            argmax(&mean)
        })
        .collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted categories for every sample, frames center-cropped by `margin`.
pub fn predict(model: &Model, dataset: &Dataset, delay: usize, margin: usize) -> Result<Vec<Vec<usize>>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let frames = center_crop(&s.frames, margin)?;
            let trace = model.forward_sequence(&frames, delay, None)?;
            classify(&trace, frames.len(), delay)
        })
        .collect()
}

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub per_head: Vec<f64>,
    /// Fraction of samples with every head correct.
    pub joint: f64,
}

pub fn accuracies(predictions: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<Accuracy> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} samples",
            predictions.len(),
            labels.len()
        )));
    }
    let heads = labels[0].len();
    let mut hits = vec![0usize; heads];
    let mut joint = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        if p.len() != heads || l.len() != heads {
            return Err(Error::shape("head count differs between samples"));
        }
        let mut all = true;
        for h in 0..heads {
            if p[h] == l[h] {
                hits[h] += 1;
            } else {
                all = false;
            }
        }
        joint += all as usize;
    }
    let n = labels.len() as f64;
    Ok(Accuracy {
        per_head: hits.iter().map(|&c| 100.0 * c as f64 / n).collect(),
        joint: 100.0 * joint as f64 / n,
    })
}

/// `[head][true][predicted]` counts.
pub fn confusion_matrices(
    predictions: &[Vec<usize>],
    labels: &[Vec<usize>],
    head_sizes: &[usize],
) -> Vec<Vec<Vec<usize>>> {
    let mut m: Vec<Vec<Vec<usize>>> = head_sizes.iter().map(|&n| vec![vec![0; n]; n]).collect();
    for (p, l) in predictions.iter().zip(labels) {
        for h in 0..head_sizes.len() {
            m[h][l[h]][p[h]] += 1;
        }
    }
    m
}

/// Epoch with the best validation joint accuracy, earliest on ties.
pub fn select_best_epoch(log: &TrainLog) -> Result<usize> {
    select_best_epoch_across(std::slice::from_ref(log))
}

/// Best epoch by joint accuracy averaged over several logs (one per fold).
pub fn select_best_epoch_across(logs: &[TrainLog]) -> Result<usize> {
    let epochs = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
    if epochs == 0 {
        return Err(Error::config("no epochs logged"));
    }
    let mut best: Option<(usize, f64)> = None;
    for e in 0..epochs {
        let mut sum = 0.0;
        for log in logs {
            sum += log.rows[e]
                .val_joint
                .ok_or_else(|| Error::config(format!("epoch {e} has no validation accuracy")))?;
        }
        let mean = sum / logs.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((e, mean));
        }
    }
    Ok(best.unwrap().0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out_subject: Option<usize>,
    pub samples: usize,
    pub head_accuracy: Vec<f64>,
    pub joint_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub heads: Vec<String>,
    pub decision_rule: String,
    pub chosen_epoch: Option<usize>,
    /// Percent, unweighted mean over folds.
    pub head_accuracy: Vec<f64>,
    pub joint_accuracy: f64,
    /// `[head][true][predicted]`, summed over folds.
    pub confusion: Vec<Vec<Vec<usize>>>,
    pub folds: Vec<FoldReport>,
}

impl EvalReport {
    /// Averages fold reports (each subject counts once) and sums confusions.
    pub fn aggregate(
        model: &str,
        heads: Vec<String>,
        chosen_epoch: Option<usize>,
        folds: Vec<FoldReport>,
        confusion: Vec<Vec<Vec<usize>>>,
    ) -> Result<EvalReport> {
        if folds.is_empty() {
            return Err(Error::config("no folds to aggregate"));
        }
        let k = folds.len() as f64;
        let head_accuracy = (0..heads.len())
            .map(|h| folds.iter().map(|f| f.head_accuracy[h]).sum::<f64>() / k)
            .collect();
        let joint_accuracy = folds.iter().map(|f| f.joint_accuracy).sum::<f64>() / k;
        let report = EvalReport {
            model: model.to_string(),
            heads,
            decision_rule: DECISION_RULE.to_string(),
            chosen_epoch,
            head_accuracy,
            joint_accuracy,
            confusion,
            folds,
        };
        report.check()?;
        Ok(report)
    }

    /// Joint accuracy can never beat the weakest head.
    pub fn check(&self) -> Result<()> {
        let parts = std::iter::once((&self.head_accuracy, self.joint_accuracy))
            .chain(self.folds.iter().map(|f| (&f.head_accuracy, f.joint_accuracy)));
        for (heads, joint) in parts {
            let min = heads.iter().copied().fold(f64::INFINITY, f64::min);
            if joint > min + 1e-9 || !joint.is_finite() {
                return Err(Error::NonFinite(format!(
                    "joint accuracy {joint} exceeds head accuracy {min}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "model: {}", self.model).unwrap();
        if let Some(e) = self.chosen_epoch {
            writeln!(out, "epoch: {e}").unwrap();
        }
        writeln!(out, "rule:  {}", self.decision_rule).unwrap();
        let mut header = format!("{:<10}", "fold");
        for h in &self.heads {
            write!(header, " {h:>10}").unwrap();
        }
        write!(header, " {:>10}", "joint").unwrap();
        writeln!(out, "{header}").unwrap();
        let row = |name: String, heads: &[f64], joint: f64| {
            let mut r = format!("{name:<10}");
            for a in heads {
                write!(r, " {a:>10.2}").unwrap();
            }
            write!(r, " {joint:>10.2}").unwrap();
            r
        };
        for f in &self.folds {
            let name = f
                .held_out_subject
                .map_or("all".to_string(), |s| format!("subject {s}"));
            writeln!(out, "{}", row(name, &f.head_accuracy, f.joint_accuracy)).unwrap();
        }
        writeln!(out, "{}", row("mean".into(), &self.head_accuracy, self.joint_accuracy)).unwrap();
        out
    }

    pub fn write(&self, json: &Path, table: Option<&Path>) -> Result<()> {
        fs::write(json, self.to_json()).map_err(|e| Error::io(json, e))?;
        if let Some(t) = table {
            fs::write(t, self.text_table()).map_err(|e| Error::io(t, e))?;
        }
        Ok(())
    }
}

/// Scores one trained model on a whole dataset.
pub fn evaluate_model(model: &Model, dataset: &Dataset, delay: usize, margin: usize) -> Result<EvalReport> {
    let preds = predict(model, dataset, delay, margin)?;
    let labels: Vec<Vec<usize>> = dataset.samples.iter().map(|s| s.labels.clone()).collect();
    let acc = accuracies(&preds, &labels)?;
    let fold = FoldReport {
        held_out_subject: None,
        samples: dataset.len(),
        head_accuracy: acc.per_head,
        joint_accuracy: acc.joint,
    };
    EvalReport::aggregate(
        &model.spec().kind.to_string(),
        dataset.heads.iter().map(|h| h.name.clone()).collect(),
        None,
        vec![fold],
        confusion_matrices(&preds, &labels, &dataset.head_sizes()),
    )
}

/// Outcome of [`run_losocv`].
#[derive(Clone, Debug)]
pub struct LosocvRun {
    pub report: EvalReport,
    /// Training log per fold, in fold order.
    pub logs: Vec<TrainLog>,
}

/// Trains one model per fold from `seed`, validating on the held-out
/// subject every epoch, then reports all folds at the epoch with the best
/// mean joint accuracy.
///
/// With `out_dir`, each fold writes `fold_<subject>/train_log.csv`, its
/// checkpoints and `report.json`; the aggregate goes to `report.json` and
/// `report.txt`.
pub fn run_losocv(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<LosocvRun> {
    let plan = losocv_splits(dataset)?;
    let mut logs = Vec::with_capacity(plan.folds.len());
    let mut fold_preds = Vec::with_capacity(plan.folds.len());
    for (k, fold) in plan.folds.iter().enumerate() {
        let train_set = dataset.subset(&fold.train);
        let test_set = dataset.subset(&fold.test);
        let model = Model::build(spec.clone(), &mut SeededRng::new(seed).fork(k as u64))?;
        let mut trainer = Trainer::new(model, &train_set, Some(&test_set), config.clone())?;
        let fold_dir = out_dir.map(|d| d.join(format!("fold_{}", fold.held_out)));
        if let Some(d) = &fold_dir {
            trainer = trainer.with_checkpoints(d);
        }
        trainer.run()?;
        info!(
            "fold {} (subject {}) done, last joint {:?}",
            k,
            fold.held_out,
            trainer.log().rows.last().and_then(|r| r.val_joint)
        );
        let (_, log, preds) = trainer.into_parts();
        if let Some(d) = &fold_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            log.write_csv(&d.join("train_log.csv"))?;
        }
        logs.push(log);
        fold_preds.push(preds);
    }

    let epoch = select_best_epoch_across(&logs)?;
    let sizes = dataset.head_sizes();
    let names: Vec<String> = dataset.heads.iter().map(|h| h.name.clone()).collect();
    let mut confusion: Vec<Vec<Vec<usize>>> = sizes.iter().map(|&n| vec![vec![0; n]; n]).collect();
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (fold, preds) in plan.folds.iter().zip(&fold_preds) {
        let labels: Vec<Vec<usize>> = fold.test.iter().map(|&i| dataset.samples[i].labels.clone()).collect();
        let acc = accuracies(&preds[epoch], &labels)?;
        for (total, m) in confusion.iter_mut().zip(confusion_matrices(&preds[epoch], &labels, &sizes)) {
            for (tr, mr) in total.iter_mut().zip(m) {
                for (t, v) in tr.iter_mut().zip(mr) {
                    *t += v;
                }
            }
        }
        let report = FoldReport {
            held_out_subject: Some(fold.held_out),
            samples: fold.test.len(),
            head_accuracy: acc.per_head,
            joint_accuracy: acc.joint,
        };
        if let Some(d) = out_dir {
            let p = d.join(format!("fold_{}", fold.held_out)).join("report.json");
            let mut text = serde_json::to_string_pretty(&report).expect("fold report serializes");
            text.push('\n');
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        folds.push(report);
    }
    let report = EvalReport::aggregate(&spec.kind.to_string(), names, Some(epoch), folds, confusion)?;
    if let Some(d) = out_dir {
        report.write(&d.join("report.json"), Some(&d.join("report.txt")))?;
    }
    Ok(LosocvRun { report, logs })
}
