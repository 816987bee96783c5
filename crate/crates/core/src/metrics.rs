//! Image quality metrics and aggregation of episode logs.

use std::collections::HashSet;

use ndarray::ArrayD;
use serde::Serialize;

use crate::agent::EpisodeLog;
use crate::error::{check_shape, Error, Result};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_GCNR_BINS: usize = 64;
/// Peak-to-peak range of intensities in `[-1, 1]`.
pub const DYNAMIC_RANGE: f64 = 2.0;

pub fn psnr(x: &ArrayD<f64>, reference: &ArrayD<f64>, peak: f64) -> Result<f64> {
    check_shape(reference.shape(), x.shape())?;
    if !(peak > 0.0) {
        return Err(Error::invalid("peak must be positive"));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty images"));
    }
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Two disjoint, nonempty pixel index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPair {
    region_a: Vec<usize>,
    region_b: Vec<usize>,
}

impl RegionPair {
    pub fn new(region_a: Vec<usize>, region_b: Vec<usize>) -> Result<Self> {
        if region_a.is_empty() || region_b.is_empty() {
            return Err(Error::invalid("regions must be nonempty"));
        }
        let a: HashSet<_> = region_a.iter().collect();
        if region_b.iter().any(|i| a.contains(i)) {
            return Err(Error::invalid("regions overlap"));
        }
        Ok(Self { region_a, region_b })
    }

    /// Pixels of a flat label map carrying `code_a` and `code_b`.
    pub fn from_labels(labels: &[u8], code_a: u8, code_b: u8) -> Result<Self> {
        let pick = |c: u8| labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        Self::new(pick(code_a), pick(code_b))
    }

    pub fn gcnr(&self, frame: &[f64], bins: usize) -> Result<f64> {
        let take = |idx: &[usize]| -> Result<Vec<f64>> {
            idx.iter()
                .map(|&i| frame.get(i).copied().ok_or_else(|| Error::invalid(format!("pixel {i} outside the frame"))))
                .collect()
        };
        gcnr(&take(&self.region_a)?, &take(&self.region_b)?, bins)
    }
}

/// `1 - sum_b min(h_a(b), h_b(b))` with normalized histograms on the pooled range.
pub fn gcnr(values_a: &[f64], values_b: &[f64], bins: usize) -> Result<f64> {
    if values_a.is_empty() || values_b.is_empty() {
        return Err(Error::invalid("gCNR needs two nonempty regions"));
    }
    if bins < 2 {
        return Err(Error::invalid("gCNR needs at least 2 bins"));
    }
    let all = values_a.iter().chain(values_b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("gCNR inputs must be finite"));
    }
    if hi == lo {
        return Ok(0.0);
    }
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in v {
            let b = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1.0;
        }
        let n = v.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (hist(values_a), hist(values_b));
    let overlap: f64 = ha.iter().zip(&hb).map(|(a, b)| a.min(*b)).sum();
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub gcnr_mean: Option<f64>,
    pub gcnr_std: Option<f64>,
    pub gcnr_rel_mean: Option<f64>,
    pub perception_ms_mean: f64,
    pub action_ms_mean: f64,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

/// Per `(policy, K)` statistics over every frame of every log, in order of
/// first appearance.
pub fn episode_report(logs: &[EpisodeLog]) -> Result<Vec<SummaryRow>> {
    let rows: Vec<_> = logs.iter().flat_map(|l| l.rows.iter()).collect();
    if rows.is_empty() {
        return Err(Error::invalid("no log rows to summarize"));
    }
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in &rows {
        let key = (r.policy.clone(), r.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let summary = keys
        .into_iter()
        .map(|(policy, k)| {
            let group: Vec<_> = rows.iter().filter(|r| r.policy == policy && r.k == k).collect();
            let psnr: Vec<f64> = group.iter().map(|r| r.psnr_db).collect();
            let gc: Vec<f64> = group.iter().filter_map(|r| r.gcnr).collect();
            let rel: Vec<f64> = group
                .iter()
                .filter_map(|r| match (r.gcnr, r.gcnr_truth) {
                    (Some(g), Some(t)) if t > 0.0 => Some(g / t),
                    _ => None,
                })
                .collect();
            let (psnr_mean, psnr_std) = mean_std(&psnr).expect("nonempty group");
            let g = mean_std(&gc);
            let n = group.len() as f64;
            SummaryRow {
                policy,
                k,
                psnr_mean,
                psnr_std,
                gcnr_mean: g.map(|g| g.0),
                gcnr_std: g.map(|g| g.1),
                gcnr_rel_mean: mean_std(&rel).map(|r| r.0),
                perception_ms_mean: group.iter().map(|r| r.perception_ms).sum::<f64>() / n,
                action_ms_mean: group.iter().map(|r| r.action_ms).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(summary)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
