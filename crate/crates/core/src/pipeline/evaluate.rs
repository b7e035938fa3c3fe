use serde::{Deserialize, Serialize};

use super::predict;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::metrics::{CaseMetrics, SegmentationResult};
use crate::segnet::NetworkParams;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dice: f64,
    pub jaccard: f64,
    /// Over cases with a defined surface only; `None` when there are none.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Per-case metrics plus mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub cases: Vec<CaseMetrics>,
    pub mean: MetricsSummary,
    pub std: MetricsSummary,
    pub failed_surface: usize,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

impl MetricsTable {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no cases to summarize".into()));
        }
        let column = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> { cases.iter().filter_map(f).collect() };
        let (dm, ds) = mean_std(&column(&|c| Some(c.dice))).unwrap();
        let (jm, js) = mean_std(&column(&|c| Some(c.jaccard))).unwrap();
        let asd = mean_std(&column(&|c| c.asd));
        let hd = mean_std(&column(&|c| c.hd95));
        let failed_surface = cases.iter().filter(|c| c.asd.is_none()).count();
        Ok(MetricsTable {
            mean: MetricsSummary { dice: dm, jaccard: jm, asd: asd.map(|a| a.0), hd95: hd.map(|h| h.0) },
            std: MetricsSummary { dice: ds, jaccard: js, asd: asd.map(|a| a.1), hd95: hd.map(|h| h.1) },
            failed_surface,
            cases,
        })
    }
}

/// Score given predictions against each sample's label.
pub fn evaluate_predictions(samples: &[VolumeSample], predictions: Vec<Vec<u8>>) -> Result<MetricsTable> {
    if samples.len() != predictions.len() {
        return Err(Error::InvalidArgument("one prediction per sample required".into()));
    }
    let cases = samples
        .iter()
        .zip(predictions)
        .map(|(s, pred)| {
            let truth = s.label.clone().ok_or_else(|| Error::InvalidArgument(format!("test sample {} has no label", s.id)))?;
            let r = SegmentationResult::new(pred, truth, s.shape())?;
            Ok(CaseMetrics::compute(&s.id, &r))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsTable::from_cases(cases)
}

/// Sliding-window argmax on every test sample, scored against its label.
pub fn evaluate(params: &NetworkParams, test: &[VolumeSample], crop: [usize; 3], stride: [usize; 3]) -> Result<MetricsTable> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let preds = test.iter().map(|s| predict(params, &s.volume, crop, stride)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(test, preds)
}
