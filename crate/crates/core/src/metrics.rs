//! Segmentation metrics, healthy reconstruction error and the permutation test.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::ArrayView3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VolumeTensor;
use crate::error::{ensure_same_shape, Error, Result};
use crate::tensor::BinaryVolume;

/// Significance level used when reporting comparisons.
pub const ALPHA: f64 = 0.05;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// `2|P ∩ G| / (|P| + |G|)`, and 1 when both are empty.
pub fn dice(pred: &BinaryVolume, gt: &BinaryVolume) -> Result<f64> {
    ensure_same_shape(gt.shape(), pred.shape())?;
    let mut both = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        both += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Step-wise area under the precision-recall curve (average precision):
/// `sum_k (R_k - R_{k-1}) P_k` over distinct score thresholds in descending
/// order. Returns `None` when `gt` has no positives.
pub fn auprc(scores: ArrayView3<f32>, gt: &BinaryVolume) -> Result<Option<f64>> {
    ensure_same_shape(gt.shape(), scores.shape())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::param("non-finite anomaly score"));
    }
    let mut pairs: Vec<(f32, bool)> = scores.iter().copied().zip(gt.iter().copied()).collect();
    let positives = pairs.iter().filter(|(_, g)| *g).count();
    if positives == 0 {
        return Ok(None);
    }
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            tp += pairs[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(Some(ap))
}

/// Mean `|x0 - x_rec|` over brain-mask voxels and all channels.
pub fn l1_healthy(x0: &VolumeTensor, x_rec: &VolumeTensor, brain_mask: &BinaryVolume) -> Result<f64> {
    ensure_same_shape(x0.values.shape(), x_rec.values.shape())?;
    ensure_same_shape(&x0.values.shape()[1..], brain_mask.shape())?;
    let voxels = brain_mask.iter().filter(|m| **m).count();
    if voxels == 0 {
        return Err(Error::param("empty brain mask"));
    }
    let mut sum = 0.0f64;
    for (a, b) in x0.values.outer_iter().zip(x_rec.values.outer_iter()) {
        for ((x, y), m) in a.iter().zip(b.iter()).zip(brain_mask.iter()) {
            if *m {
                sum += (*x as f64 - *y as f64).abs();
            }
        }
    }
    Ok(sum / (voxels * x0.channels()) as f64)
}

/// Per-sample scores keyed by sample identifier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub ids: Vec<String>,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(Error::param("one identifier per score required"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("scores must be finite"));
        }
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return Err(Error::param("score identifiers must be unique"));
        }
        Ok(Self { ids, values })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::new((0..values.len()).map(|i| i.to_string()).collect(), values)
    }

    pub fn push(&mut self, id: impl Into<String>, value: f64) -> Result<()> {
        let id = id.into();
        if !value.is_finite() || self.ids.contains(&id) {
            return Err(Error::param(format!("invalid or duplicate score for {id}")));
        }
        self.ids.push(id);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64).sqrt()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One-sided pooled permutation test of `mean(a) - mean(b)`. The p-value is
/// the fraction of label shuffles whose statistic is at least the observed one.
pub fn permutation_test(a: &ScoreVector, b: &ScoreVector, n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm < 1 {
        return Err(Error::param("need at least one permutation"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("permutation test needs two nonempty groups"));
    }
    let observed = mean(&a.values) - mean(&b.values);
    // Absorbs summation-order rounding so that relabelings with the same
    // statistic count as equal.
    let tolerance = 1e-12 * a.values.iter().chain(&b.values).fold(1.0f64, |m, v| m.max(v.abs()));
    let mut pooled: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_a = a.len();
    let mut count = 0usize;
    for _ in 0..n_perm {
        pooled.shuffle(&mut rng);
        let stat = mean(&pooled[..n_a]) - mean(&pooled[n_a..]);
        if stat >= observed - tolerance {
            count += 1;
        }
    }
    Ok(count as f64 / n_perm as f64)
}

/// Aggregate evaluation results plus per-sample vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub l1_healthy_mean: f64,
    pub threshold: f64,
    pub dice: ScoreVector,
    pub auprc: ScoreVector,
    pub l1_healthy: ScoreVector,
    /// Test subjects whose ground truth was empty (excluded from AUPRC).
    #[serde(default)]
    pub flagged: Vec<String>,
}

impl EvalReport {
    pub fn new(
        threshold: f64,
        dice: ScoreVector,
        auprc: ScoreVector,
        l1_healthy: ScoreVector,
        flagged: Vec<String>,
    ) -> Self {
        Self {
            dice_mean: dice.mean(),
            dice_std: dice.std(),
            auprc_mean: auprc.mean(),
            auprc_std: auprc.std(),
            l1_healthy_mean: l1_healthy.mean(),
            threshold,
            dice,
            auprc,
            l1_healthy,
            flagged,
        }
    }

    /// Table-style summary: percentages with two decimals, l1 in units of 1e-3.
    pub fn summary(&self) -> String {
        let l1 = if self.l1_healthy.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.2}", 1e3 * self.l1_healthy_mean)
        };
        format!(
            "DICE [%] {:.2} ± {:.2} | AUPRC [%] {:.2} ± {:.2} | l1 (1e-3) {l1} | threshold {:.6}",
            100.0 * self.dice_mean,
            100.0 * self.dice_std,
            100.0 * self.auprc_mean,
            100.0 * self.auprc_std,
            self.threshold
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per sample and metric: `metric,sample,value`.
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("metric,sample,value\n");
        for (name, scores) in [("dice", &self.dice), ("auprc", &self.auprc), ("l1_healthy", &self.l1_healthy)] {
            for (id, v) in scores.ids.iter().zip(&scores.values) {
                let _ = writeln!(out, "{name},{id},{v:.6}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    #[test]
    fn dice_counting_example() {
        let mut pred = Array3::from_elem((1, 1, 10), false);
        let mut gt = pred.clone();
        for i in 0..4 {
            pred[[0, 0, i]] = true;
        }
        for i in 1..7 {
            gt[[0, 0, i]] = true;
        }
        assert!((dice(&pred, &gt).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice(&gt, &gt).unwrap(), 1.0);
        let empty = Array3::from_elem((1, 1, 10), false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let disjoint = gt.mapv(|g| !g) & pred.mapv(|p| !p);
        assert_eq!(dice(&disjoint, &gt).unwrap(), 0.0);
        assert!(dice(&empty, &Array3::from_elem((1, 2, 10), false)).is_err());
    }

    #[test]
    fn auprc_edge_cases() {
        let gt = Array3::from_shape_fn((2, 2, 2), |(z, y, _)| z == 0 && y == 0);
        let perfect = gt.mapv(|g| g as u8 as f32);
        assert_eq!(auprc(perfect.view(), &gt).unwrap(), Some(1.0));
        let constant = Array3::from_elem((2, 2, 2), 0.3f32);
        assert!((auprc(constant.view(), &gt).unwrap().unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(auprc(constant.view(), &Array3::from_elem((2, 2, 2), false)).unwrap(), None);
    }

    #[test]
    fn auprc_invariant_under_monotone_transform() {
        let scores = Array3::from_shape_fn((2, 4, 4), |(z, y, x)| ((z * 7 + y * 3 + x * 5) % 11) as f32 / 11.0);
        let gt = Array3::from_shape_fn((2, 4, 4), |(z, y, x)| (z + y * x) % 3 == 0);
        let a = auprc(scores.view(), &gt).unwrap().unwrap();
        let b = auprc(scores.mapv(|s| (3.0 * s).exp()).view(), &gt).unwrap().unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn l1_examples() {
        let values = Array4::from_shape_fn((1, 2, 4, 4), |(_, z, y, x)| (z + y + x) as f32 * 0.1);
        let x0 = VolumeTensor::from_values(values.clone(), "a");
        let shifted = VolumeTensor::from_values(values.mapv(|v| v + 0.01), "a");
        let mask = Array3::from_elem((2, 4, 4), true);
        assert_eq!(l1_healthy(&x0, &x0, &mask).unwrap(), 0.0);
        assert!((l1_healthy(&x0, &shifted, &mask).unwrap() - 0.01).abs() < 1e-6);
        assert!(l1_healthy(&x0, &x0, &Array3::from_elem((2, 4, 4), false)).is_err());
    }

    #[test]
    fn permutation_symmetry_and_determinism() {
        let a = ScoreVector::from_values(vec![0.4, 0.5, 0.6, 0.7]).unwrap();
        let p = permutation_test(&a, &a, 2000, 3).unwrap();
        assert!(p >= 0.5);
        assert_eq!(p, permutation_test(&a, &a, 2000, 3).unwrap());
        assert!(permutation_test(&a, &a, 0, 3).is_err());
    }

    #[test]
    fn score_vector_validation() {
        assert!(ScoreVector::new(vec!["a".into(), "a".into()], vec![1.0, 2.0]).is_err());
        assert!(ScoreVector::new(vec!["a".into()], vec![f64::NAN]).is_err());
        let s = ScoreVector::from_values(vec![1.0, 3.0]).unwrap();
        assert_eq!(s.mean(), 2.0);
        assert_eq!(s.std(), 1.0);
    }

    #[test]
    fn report_formatting() {
        let dice = ScoreVector::from_values(vec![0.49, 0.5]).unwrap();
        let report = EvalReport::new(0.1, dice.clone(), dice, ScoreVector::from_values(vec![0.002]).unwrap(), vec![]);
        assert!(report.summary().starts_with("DICE [%] 49.50 ± 0.50"));
        assert!(report.per_sample_csv().contains("dice,0,0.490000"));
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
