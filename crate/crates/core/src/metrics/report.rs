use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{local_metrics, mse, psnr_from_mse, ssim, PairMetric, UnitGrid};
use crate::data::{ImageGrid, SliceKey};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "patient_id",
    "slice",
    "mse",
    "psnr",
    "ssim",
    "local_mse",
    "local_psnr",
    "local_ssim",
    "masked_mse",
    "lpips",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub patient_id: String,
    pub slice: usize,
    pub mse: f64,
    /// `None` stands for an infinite PSNR (identical images).
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub local_mse: f64,
    pub local_psnr: Option<f64>,
    pub local_ssim: f64,
    pub masked_mse: f64,
    /// Value of the optional external metric.
    pub lpips: Option<f64>,
}

/// Mean and population standard deviation over the finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Values left out of the aggregate (infinite PSNR).
    pub excluded: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let (mut kept, mut excluded) = (Vec::new(), 0);
        for v in values {
            match v {
                Some(v) if v.is_finite() => kept.push(v),
                _ => excluded += 1,
            }
        }
        let n = kept.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                excluded,
            };
        }
        let mean = kept.iter().sum::<f64>() / n as f64;
        let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
            excluded,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by descending local SSIM, ties by key.
    pub rows: Vec<SliceMetrics>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub context: serde_json::Value,
}

/// One ground-truth test item.
pub struct EvalItem<'a> {
    pub key: SliceKey,
    pub truth: &'a ImageGrid,
    pub gtv: &'a ImageGrid,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn slice_metrics(item: &EvalItem, generated: &ImageGrid, external: Option<&dyn PairMetric>) -> Result<SliceMetrics> {
    let a = UnitGrid::from_image(generated);
    let b = UnitGrid::from_image(item.truth);
    let global_mse = mse(&a, &b)?;
    let local = local_metrics(&a, &b, item.gtv)?;
    Ok(SliceMetrics {
        patient_id: item.key.patient_id.clone(),
        slice: item.key.slice,
        mse: global_mse,
        psnr: finite(psnr_from_mse(global_mse, 1.0)),
        ssim: ssim(&a, &b)?,
        local_mse: local.mse,
        local_psnr: finite(local.psnr),
        local_ssim: local.ssim,
        masked_mse: local.masked_mse,
        lpips: external.map(|m| m.compute(generated, item.truth)).transpose()?,
    })
}

/// Scores every test item against its generated slice. Every item needs a
/// generated slice under the same key.
pub fn evaluate(
    items: &[EvalItem],
    generated: &HashMap<SliceKey, ImageGrid>,
    external: Option<&dyn PairMetric>,
    context: serde_json::Value,
) -> Result<MetricReport> {
    let missing: Vec<String> = items
        .iter()
        .filter(|it| !generated.contains_key(&it.key))
        .map(|it| it.key.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let mut rows = items
        .iter()
        .map(|it| slice_metrics(it, &generated[&it.key], external))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.local_ssim
            .total_cmp(&a.local_ssim)
            .then_with(|| a.patient_id.cmp(&b.patient_id))
            .then_with(|| a.slice.cmp(&b.slice))
    });
    let mut aggregates = BTreeMap::new();
    aggregates.insert("mse".into(), Aggregate::of(rows.iter().map(|r| Some(r.mse))));
    aggregates.insert("psnr".into(), Aggregate::of(rows.iter().map(|r| r.psnr)));
    aggregates.insert("ssim".into(), Aggregate::of(rows.iter().map(|r| Some(r.ssim))));
    aggregates.insert("local_mse".into(), Aggregate::of(rows.iter().map(|r| Some(r.local_mse))));
    aggregates.insert("local_psnr".into(), Aggregate::of(rows.iter().map(|r| r.local_psnr)));
    aggregates.insert("local_ssim".into(), Aggregate::of(rows.iter().map(|r| Some(r.local_ssim))));
    aggregates.insert("masked_mse".into(), Aggregate::of(rows.iter().map(|r| Some(r.masked_mse))));
    if external.is_some() {
        aggregates.insert("lpips".into(), Aggregate::of(rows.iter().map(|r| r.lpips)));
    }
    Ok(MetricReport {
        rows,
        aggregates,
        context,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => v.to_string(),
        None => "inf".into(),
    }
}

impl MetricReport {
    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.get(metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.patient_id.clone(),
                r.slice.to_string(),
                r.mse.to_string(),
                fmt_opt(r.psnr),
                r.ssim.to_string(),
                r.local_mse.to_string(),
                fmt_opt(r.local_psnr),
                r.local_ssim.to_string(),
                r.masked_mse.to_string(),
                r.lpips.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
