//! Confusion-matrix metrics and the three validation protocols:
//!
//! - MSS: every modality available, one confusion matrix over the split.
//! - System-level MISS: one row per nonempty modality subset (15 for four
//!   modalities) plus an unweighted mean row.
//! - Sensor-level MISS: one row per named corruption condition (all
//!   modalities present, every sample corrupted) plus a mean row.
//!
//! Metrics follow the usual conventions: IoU = TP/(TP+FP+FN), F1 is the
//! harmonic mean of precision and recall, per-class Acc is recall, and
//! classes absent from both ground truth and prediction are excluded from
//! the means. Any 0/0 within a defined class reads as 0.
//!
//! Evaluation is pure: samples are processed in parallel but confusion
//! counts are integers, so merged results are bit-identical regardless of
//! scheduling.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::mff::{fuse, subset_label, FuseConfig, Modality, ModalityBundle, NUM_MODALITIES};
use crate::segnet::{argmax_classes, encode, seg_head, upsample_labels, ModelParams};
use crate::synthdata::{corrupt, Condition, Dataset, SceneSample};
use crate::tensor::Tape;

/// K×K counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> ConfusionMatrix {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Adds one prediction/ground-truth pair; pixels whose ground truth is
    /// `ignore` are excluded.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if g == ignore {
                continue;
            }
            if (g as usize) >= self.k {
                return Err(Error::data(format!(
                    "ground-truth label {} at pixel {} exceeds {} classes",
                    g, i, self.k
                )));
            }
            if (p as usize) >= self.k {
                return Err(Error::data(format!(
                    "predicted label {} at pixel {} exceeds {} classes",
                    p, i, self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, k: usize, ignore: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub miou: f64,
    pub mf1: f64,
    pub macc: f64,
    pub overall_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Only classes with at least one ground-truth or predicted pixel.
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub means: MeanMetrics,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let k = cm.num_classes();
    let mut per_class = BTreeMap::new();
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for other in 0..k {
            if other != c {
                fp += cm.get(other, c) as f64;
                fn_ += cm.get(c, other) as f64;
            }
        }
        if tp + fp + fn_ == 0.0 {
            continue; // absent from both gt and prediction: excluded
        }
        let iou = ratio(tp, tp + fp + fn_);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        per_class.insert(c, ClassMetrics { iou, f1, acc: recall });
    }
    let n = per_class.len() as f64;
    let mut miou = 0.0;
    let mut mf1 = 0.0;
    let mut macc = 0.0;
    for m in per_class.values() {
        miou += m.iou;
        mf1 += m.f1;
        macc += m.acc;
    }
    let trace: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    let means = MeanMetrics {
        miou: ratio(miou, n),
        mf1: ratio(mf1, n),
        macc: ratio(macc, n),
        overall_acc: ratio(trace as f64, cm.total() as f64),
    };
    Metrics { per_class, means }
}

/// Full-resolution prediction for one sample using only `subset`.
pub fn predict(
    params: &ModelParams,
    sample: &SceneSample,
    subset: &[Modality],
    fuse_cfg: &FuseConfig,
) -> Result<LabelMap> {
    if subset.is_empty() {
        return Err(Error::eval("cannot predict from an empty modality subset"));
    }
    let tape = Tape::new();
    let mut pairs = Vec::with_capacity(subset.len());
    for m in Modality::ALL {
        if subset.contains(&m) {
            pairs.push((m, encode(&tape, sample.raster(m), &params.enc)?));
        }
    }
    let bundle = ModalityBundle::from_pairs(pairs)?;
    let (f_ma, _) = fuse(&tape, &bundle, fuse_cfg)?;
    let logits = seg_head(&tape, &f_ma, &params.head)?;
    let low = argmax_classes(&logits)?;
    Ok(upsample_labels(&low, params.dims().patch))
}

/// One confusion matrix over a set of samples for a fixed subset. Samples
/// evaluate in parallel; integer counts make the merge order irrelevant.
pub fn eval_subset_cm(
    params: &ModelParams,
    samples: &[SceneSample],
    subset: &[Modality],
    fuse_cfg: &FuseConfig,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let failures: Mutex<Vec<Error>> = Mutex::new(Vec::new());
    let partials: Mutex<Vec<ConfusionMatrix>> = Mutex::new(Vec::new());
    let workers = crate::par::workers_for(samples.len());
    std::thread::scope(|scope| {
        for w in 0..workers {
            let failures = &failures;
            let partials = &partials;
            scope.spawn(move || {
                let mut local = ConfusionMatrix::new(num_classes);
                for i in (w..samples.len()).step_by(workers) {
                    let result = predict(params, &samples[i], subset, fuse_cfg)
                        .and_then(|pred| local.accumulate(&pred, &samples[i].y, IGNORE_LABEL));
                    if let Err(e) = result {
                        failures.lock().unwrap().push(e);
                        return;
                    }
                }
                partials.lock().unwrap().push(local);
            });
        }
    });
    if let Some(e) = failures.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for partial in partials.into_inner().unwrap() {
        cm.merge(&partial)?;
    }
    Ok(cm)
}

/// One row of a MISS table. For system-level MISS `subset` is the modality
/// set (e.g. "RD"); for sensor-level MISS it carries the condition label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissRow {
    pub subset: String,
    pub miou: f64,
    pub f1: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub means: MeanMetrics,
    pub miss_table: Vec<MissRow>,
    pub mean_row: Option<MissRow>,
}

impl EvalReport {
    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::eval(format!("report serialization failed: {}", e)))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    /// CSV mirror of the table: `subset,miou,f1,acc` rows plus `mean`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("subset,miou,f1,acc\n");
        for row in &self.miss_table {
            out.push_str(&format!("{},{},{},{}\n", row.subset, row.miou, row.f1, row.acc));
        }
        if let Some(mean) = &self.mean_row {
            out.push_str(&format!("{},{},{},{}\n", mean.subset, mean.miou, mean.f1, mean.acc));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn load_val_samples(dataset: &Dataset) -> Result<Vec<SceneSample>> {
    if dataset.manifest.val_count == 0 {
        return Err(Error::eval("dataset has no validation samples"));
    }
    (0..dataset.manifest.val_count).map(|i| dataset.load_val(i)).collect()
}

fn check_model(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    if params.dims().classes != dataset.manifest.num_classes {
        return Err(Error::eval(format!(
            "model predicts {} classes but the dataset has {}",
            params.dims().classes,
            dataset.manifest.num_classes
        )));
    }
    Ok(())
}

fn subset_from_mask(mask: usize) -> Vec<Modality> {
    Modality::ALL
        .into_iter()
        .filter(|m| mask & (1 << m.index()) != 0)
        .collect()
}

fn row_from_metrics(label: String, m: &Metrics) -> MissRow {
    MissRow { subset: label, miou: m.means.miou, f1: m.means.mf1, acc: m.means.macc }
}

fn mean_of_rows(rows: &[MissRow]) -> MissRow {
    let n = rows.len() as f64;
    MissRow {
        subset: "mean".to_string(),
        miou: rows.iter().map(|r| r.miou).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        acc: rows.iter().map(|r| r.acc).sum::<f64>() / n,
    }
}

/// Evaluates one explicit modality subset over the validation split.
pub fn eval_subset(
    params: &ModelParams,
    dataset: &Dataset,
    subset: &[Modality],
    fuse_cfg: &FuseConfig,
) -> Result<EvalReport> {
    check_model(params, dataset)?;
    let samples = load_val_samples(dataset)?;
    let cm = eval_subset_cm(params, &samples, subset, fuse_cfg, dataset.manifest.num_classes)?;
    let m = metrics(&cm);
    Ok(EvalReport {
        per_class: m.per_class.clone(),
        means: m.means,
        miss_table: vec![row_from_metrics(subset_label(subset), &m)],
        mean_row: None,
    })
}

/// MSS protocol: all four modalities on every sample.
pub fn eval_mss(params: &ModelParams, dataset: &Dataset, fuse_cfg: &FuseConfig) -> Result<EvalReport> {
    check_model(params, dataset)?;
    let samples = load_val_samples(dataset)?;
    let cm = eval_subset_cm(params, &samples, &Modality::ALL, fuse_cfg, dataset.manifest.num_classes)?;
    let m = metrics(&cm);
    Ok(EvalReport {
        per_class: m.per_class.clone(),
        means: m.means,
        miss_table: Vec::new(),
        mean_row: None,
    })
}

/// System-level MISS: all 15 nonempty subsets of {R,D,E,L}, one row each,
/// plus the unweighted mean row. The report's per-class block comes from
/// the full subset, whose row is computed by the same code path as MSS.
pub fn eval_miss_system(
    params: &ModelParams,
    dataset: &Dataset,
    fuse_cfg: &FuseConfig,
) -> Result<EvalReport> {
    check_model(params, dataset)?;
    let samples = load_val_samples(dataset)?;
    let k = dataset.manifest.num_classes;
    let mut rows = Vec::with_capacity((1 << NUM_MODALITIES) - 1);
    let mut full_metrics = None;
    for mask in 1..(1usize << NUM_MODALITIES) {
        let subset = subset_from_mask(mask);
        let cm = eval_subset_cm(params, &samples, &subset, fuse_cfg, k)?;
        let m = metrics(&cm);
        rows.push(row_from_metrics(subset_label(&subset), &m));
        if subset.len() == NUM_MODALITIES {
            full_metrics = Some(m);
        }
    }
    let full = full_metrics.expect("the full subset is one of the masks");
    Ok(EvalReport {
        per_class: full.per_class.clone(),
        means: full.means,
        mean_row: Some(mean_of_rows(&rows)),
        miss_table: rows,
    })
}

/// Sensor-level MISS: for each condition, corrupt every sample (all
/// modalities present) and evaluate; one row per condition plus the mean
/// row. The report's per-class block is left empty — the row-level numbers
/// are the product here — and `means` averages over the condition rows.
pub fn eval_miss_sensor(
    params: &ModelParams,
    dataset: &Dataset,
    conditions: &[Condition],
    fuse_cfg: &FuseConfig,
) -> Result<EvalReport> {
    check_model(params, dataset)?;
    if conditions.is_empty() {
        return Err(Error::domain("sensor-level MISS needs at least one condition"));
    }
    let samples = load_val_samples(dataset)?;
    let k = dataset.manifest.num_classes;
    let mut rows = Vec::with_capacity(conditions.len());
    let mut overall_sum = 0.0;
    for cond in conditions {
        let corrupted: Vec<SceneSample> =
            samples.iter().map(|s| corrupt(s, cond)).collect::<Result<Vec<_>>>()?;
        let cm = eval_subset_cm(params, &corrupted, &Modality::ALL, fuse_cfg, k)?;
        let m = metrics(&cm);
        overall_sum += m.means.overall_acc;
        rows.push(row_from_metrics(cond.label(), &m));
    }
    let mean = mean_of_rows(&rows);
    Ok(EvalReport {
        per_class: BTreeMap::new(),
        means: MeanMetrics {
            miou: mean.miou,
            mf1: mean.f1,
            macc: mean.acc,
            overall_acc: overall_sum / rows.len() as f64,
        },
        mean_row: Some(mean),
        miss_table: rows,
    })
}
