//! Saliency evaluation: MAE, precision/recall, PR curves, and the
//! adaptive-threshold F-measure, plus macro-averaged dataset reports.
//!
//! Conventions, pinned so results reproduce bit-for-bit: predictions binarize
//! strictly (`P > t`); precision is 1 when nothing is predicted and recall is
//! 1 when the ground truth is empty; the adaptive threshold is
//! `min(1, 2 * mean(P))` with beta^2 = 0.3; PR curves sample 256 uniform
//! thresholds in [0, 1]; dataset metrics are per-image means.

use serde::{Deserialize, Serialize};

use crate::error::{CosalError, Result};
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

pub const PR_CURVE_POINTS: usize = 256;
const BETA_SQUARED: f64 = 0.3;

fn check_pair<F: Real>(op: &str, p: &Tensor<F>, y: &Tensor<F>) -> Result<()> {
    if !p.same_shape(y) {
        return Err(CosalError::shape_mismatch(op, p.shape(), y.shape()));
    }
    if p.is_empty() {
        return Err(CosalError::InvalidArgument(format!("{op}: empty maps")));
    }
    if p.data().iter().any(|&v| !(v >= F::zero() && v <= F::one())) {
        return Err(CosalError::InvalidArgument(format!(
            "{op}: prediction values must lie in [0, 1]"
        )));
    }
    if y.data().iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(CosalError::InvalidArgument(format!(
            "{op}: ground truth must be binary"
        )));
    }
    Ok(())
}

/// Mean absolute pixel error.
pub fn mae<F: Real>(p: &Tensor<F>, y: &Tensor<F>) -> Result<F> {
    check_pair("mae", p, y)?;
    let sum = p
        .data()
        .iter()
        .zip(y.data())
        .fold(F::zero(), |acc, (a, b)| acc + (*a - *b).abs());
    Ok(sum / real(p.len() as f64))
}

/// Precision and recall of the binarization `P > t`.
pub fn pr_at_threshold<F: Real>(p: &Tensor<F>, y: &Tensor<F>, t: F) -> Result<(F, F)> {
    check_pair("pr_at_threshold", p, y)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (pv, yv) in p.data().iter().zip(y.data()) {
        let pred = *pv > t;
        let truth = *yv == F::one();
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        F::one()
    } else {
        real::<F>(tp as f64) / real((tp + fp) as f64)
    };
    let recall = if tp + fn_ == 0 {
        F::one()
    } else {
        real::<F>(tp as f64) / real((tp + fn_) as f64)
    };
    Ok((precision, recall))
}

/// F-measure at the adaptive threshold `min(1, 2 * mean(P))`.
pub fn f_measure_adaptive<F: Real>(p: &Tensor<F>, y: &Tensor<F>) -> Result<F> {
    check_pair("f_measure_adaptive", p, y)?;
    let mean = p.data().iter().fold(F::zero(), |a, b| a + *b) / real(p.len() as f64);
    let t = (mean + mean).min(F::one());
    let (precision, recall) = pr_at_threshold(p, y, t)?;
    let b2 = real::<F>(BETA_SQUARED);
    let denom = b2 * precision + recall;
    if denom == F::zero() {
        return Ok(F::zero());
    }
    Ok((F::one() + b2) * precision * recall / denom)
}

/// The 256 PR-curve thresholds: `k / 255` for `k = 0..=255`.
pub fn pr_thresholds<F: Real>() -> Vec<F> {
    (0..PR_CURVE_POINTS)
        .map(|k| real(k as f64 / (PR_CURVE_POINTS - 1) as f64))
        .collect()
}

/// Macro-averaged metrics over aligned (prediction, ground truth) pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// (threshold, precision, recall), thresholds strictly increasing.
    pub pr_curve: Vec<(f64, f64, f64)>,
}

impl EvalReport {
    /// Line-oriented table for terminal output.
    pub fn render_text(&self) -> String {
        format!(
            "metric      value\nmae         {:.6}\nprecision   {:.6}\nrecall      {:.6}\nf_measure   {:.6}\n",
            self.mae, self.precision, self.recall, self.f_measure
        )
    }

    /// The PR curve as CSV with a header row.
    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for (t, p, r) in &self.pr_curve {
            out.push_str(&format!("{t:.8},{p:.8},{r:.8}\n"));
        }
        out
    }
}

pub fn evaluate_dataset<F: Real>(
    predictions: &[Tensor<F>],
    ground_truths: &[Tensor<F>],
) -> Result<EvalReport> {
    if predictions.len() != ground_truths.len() {
        return Err(CosalError::InvalidArgument(format!(
            "evaluate_dataset: {} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CosalError::InvalidArgument(
            "evaluate_dataset: empty dataset".into(),
        ));
    }
    let n = predictions.len() as f64;
    let thresholds = pr_thresholds::<F>();
    let mut sum_mae = 0.0;
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut sum_f = 0.0;
    let mut curve = vec![(0.0f64, 0.0f64, 0.0f64); thresholds.len()];
    for (p, y) in predictions.iter().zip(ground_truths) {
        sum_mae += mae(p, y)?.to_f64().expect("finite");
        let (ap, ar) = {
            let mean = p.data().iter().fold(F::zero(), |a, b| a + *b) / real(p.len() as f64);
            let t = (mean + mean).min(F::one());
            pr_at_threshold(p, y, t)?
        };
        sum_p += ap.to_f64().expect("finite");
        sum_r += ar.to_f64().expect("finite");
        sum_f += f_measure_adaptive(p, y)?.to_f64().expect("finite");
        for (k, &t) in thresholds.iter().enumerate() {
            let (cp, cr) = pr_at_threshold(p, y, t)?;
            curve[k].1 += cp.to_f64().expect("finite");
            curve[k].2 += cr.to_f64().expect("finite");
        }
    }
    for (k, &t) in thresholds.iter().enumerate() {
        curve[k].0 = t.to_f64().expect("finite");
        curve[k].1 /= n;
        curve[k].2 /= n;
    }
    Ok(EvalReport {
        mae: sum_mae / n,
        precision: sum_p / n,
        recall: sum_r / n,
        f_measure: sum_f / n,
        pr_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn mae_of_identical_maps_is_zero() {
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn mae_of_uniform_half_is_half() {
        let p = Tensor::filled(&[3, 3], 0.5);
        let y = t(&[3, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(mae(&p, &y).unwrap(), 0.5);
    }

    #[test]
    fn mae_complement_symmetry() {
        let p = t(&[2, 2], &[0.25, 0.5, 0.75, 1.0]);
        let y = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let pc = p.map(|v| 1.0 - v);
        let yc = y.map(|v| 1.0 - v);
        assert!((mae(&p, &y).unwrap() - mae(&pc, &yc).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn perfect_binary_prediction_scores_one_one() {
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (p, r) = pr_at_threshold(&y, &y, 0.5).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn inverted_prediction_scores_zero_zero() {
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let p = y.map(|v| 1.0 - v);
        assert_eq!(pr_at_threshold(&p, &y, 0.5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn empty_prediction_and_empty_truth_conventions() {
        let y = t(&[1, 2], &[1.0, 0.0]);
        let p = Tensor::filled(&[1, 2], 0.2);
        // t = 0.9: nothing predicted
        assert_eq!(pr_at_threshold(&p, &y, 0.9).unwrap(), (1.0, 0.0));
        // empty ground truth: recall 1
        let y0 = Tensor::zeros(&[1, 2]);
        assert_eq!(pr_at_threshold(&p, &y0, 0.9).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn recall_never_increases_with_threshold() {
        let p = t(&[2, 4], &[0.1, 0.3, 0.5, 0.7, 0.9, 0.2, 0.6, 0.8]);
        let y = t(&[2, 4], &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let mut last = f64::INFINITY;
        for t in pr_thresholds::<f64>() {
            let (_, r) = pr_at_threshold(&p, &y, t).unwrap();
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn adaptive_f_is_one_on_sparse_perfect_prediction() {
        // mean < 0.5 so the adaptive threshold separates the binary values
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(f_measure_adaptive(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn adaptive_f_of_all_zero_prediction_is_zero() {
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let p = Tensor::zeros(&[2, 2]);
        assert_eq!(f_measure_adaptive(&p, &y).unwrap(), 0.0);
    }

    #[test]
    fn thresholds_are_strictly_increasing_and_span_unit_interval() {
        let ts = pr_thresholds::<f64>();
        assert_eq!(ts.len(), 256);
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 1.0);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_image_dataset_equals_per_image_metrics() {
        let p = t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]);
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let report = evaluate_dataset(&[p.clone()], &[y.clone()]).unwrap();
        assert_eq!(report.mae, mae(&p, &y).unwrap());
        assert_eq!(report.f_measure, f_measure_adaptive(&p, &y).unwrap());
        assert_eq!(report.pr_curve.len(), 256);
    }

    #[test]
    fn duplicated_image_leaves_averages_unchanged() {
        let p = t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]);
        let y = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let once = evaluate_dataset(&[p.clone()], &[y.clone()]).unwrap();
        let twice = evaluate_dataset(&[p.clone(), p], &[y.clone(), y]).unwrap();
        assert_eq!(once.mae, twice.mae);
        assert_eq!(once.f_measure, twice.f_measure);
        assert_eq!(once.pr_curve, twice.pr_curve);
    }

    #[test]
    fn two_image_macro_average_by_hand() {
        let p1 = t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]);
        let y1 = t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]);
        let p2 = t(&[1, 4], &[0.0, 0.0, 0.0, 0.0]);
        let y2 = t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]);
        let report = evaluate_dataset(&[p1, p2], &[y1, y2]).unwrap();
        // image 1: mae 0; image 2: mae 0.25
        assert_eq!(report.mae, 0.125);
        // image 1: sparse perfect map, F 1; image 2: empty prediction, F 0
        assert_eq!(report.f_measure, 0.5);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let p = Tensor::<f64>::filled(&[1, 1], 0.5);
        let y = Tensor::<f64>::zeros(&[1, 1]);
        assert!(evaluate_dataset(&[p], &[y.clone(), y]).is_err());
    }

    #[test]
    fn non_binary_truth_is_rejected() {
        let p = Tensor::<f64>::filled(&[1, 1], 0.5);
        let y = Tensor::<f64>::filled(&[1, 1], 0.5);
        assert!(mae(&p, &y).is_err());
    }

    #[test]
    fn json_report_uses_stable_field_names() {
        let report = EvalReport {
            mae: 0.1,
            precision: 0.9,
            recall: 0.8,
            f_measure: 0.85,
            pr_curve: vec![(0.0, 1.0, 1.0)],
        };
        let json = serde_json::to_string(&report).unwrap();
        for key in ["\"mae\"", "\"precision\"", "\"recall\"", "\"f_measure\"", "\"pr_curve\""] {
            assert!(json.contains(key), "{json}");
        }
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.mae, report.mae);
    }

    #[test]
    fn text_table_lists_all_four_metrics() {
        let report = EvalReport {
            mae: 0.1,
            precision: 0.9,
            recall: 0.8,
            f_measure: 0.85,
            pr_curve: vec![],
        };
        let text = report.render_text();
        for key in ["mae", "precision", "recall", "f_measure"] {
            assert!(text.contains(key));
        }
        assert!(report.pr_curve_csv().starts_with("threshold,precision,recall\n"));
    }
}
