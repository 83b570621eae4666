//! Central finite-difference verification of the backward kernels.
//!
//! The probe objective is `J = sum(y * u)` for a fixed random `u`, whose
//! exact gradient w.r.t. `y` is `u` itself. Every parameter and input
//! element is perturbed by +-`step` and the analytic gradient is compared
//! under the relative error `|a - n| / max(1, |n|)`. Checks run in f64 only;
//! f32 rounding would drown the signal.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{backward, forward, LayerKind, LayerParams};

/// Outcome of one finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked elements.
    pub max_rel_err: f64,
    /// Human-readable location of that element, e.g. `conv3x3 weights[17]`.
    pub worst_site: String,
    /// Number of scalar gradient entries compared.
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Verifies one layer's backward pass against central differences.
///
/// `seed` fixes the probe direction `u`. Layers with gradient
/// discontinuities (relu at 0, maxpool at ties) are fine as long as the
/// supplied inputs keep a margin wider than `step` from the kink, which
/// random continuous inputs do with probability ~1.
pub fn grad_check(
    kind: LayerKind,
    params: Option<&LayerParams<f64>>,
    inputs: &[&Tensor<f64>],
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let y0 = forward(kind, params, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(-1.0f64, 1.0);
    let u = Tensor::from_vec(
        y0.shape(),
        (0..y0.len()).map(|_| dist.sample(&mut rng)).collect(),
    )?;

    // Analytic pass: fresh gradient accumulators, one backward call.
    let mut aparams = params.cloned();
    if let Some(p) = aparams.as_mut() {
        p.zero_grads();
    }
    let owned: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
    let refs: Vec<&Tensor<f64>> = owned.iter().collect();
    let input_grads = backward(kind, aparams.as_mut(), &refs, &u)?;

    let objective = |p: Option<&LayerParams<f64>>, ins: &[&Tensor<f64>]| -> Result<f64> {
        let y = forward(kind, p, ins)?;
        Ok(y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_site: String::new(),
        checked: 0,
        tol,
    };
    let record = |site: String, a: f64, n: f64, report: &mut GradCheckReport| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst_site = site;
        }
    };

    fn poke(p: &mut LayerParams<f64>, which: &str, k: usize, v: f64) {
        if which == "weights" {
            p.weights.data_mut()[k] = v;
        } else {
            p.bias.data_mut()[k] = v;
        }
    }

    if let Some(p0) = params {
        let analytic = aparams.as_ref().expect("params cloned above");
        for (tensor_name, grad) in [
            ("weights", &analytic.weight_grad),
            ("bias", &analytic.bias_grad),
        ] {
            for k in 0..grad.len() {
                let mut pp = p0.clone();
                let base = if tensor_name == "weights" {
                    pp.weights.data()[k]
                } else {
                    pp.bias.data()[k]
                };
                poke(&mut pp, tensor_name, k, base + step);
                let jp = objective(Some(&pp), &refs)?;
                poke(&mut pp, tensor_name, k, base - step);
                let jm = objective(Some(&pp), &refs)?;
                let numeric = (jp - jm) / (2.0 * step);
                record(
                    format!("{} {tensor_name}[{k}]", kind.name()),
                    grad.data()[k],
                    numeric,
                    &mut report,
                );
            }
        }
    }

    for (idx, grad) in input_grads.iter().enumerate() {
        for k in 0..grad.len() {
            let mut perturbed = owned.clone();
            let base = perturbed[idx].data()[k];
            perturbed[idx].data_mut()[k] = base + step;
            let prefs: Vec<&Tensor<f64>> = perturbed.iter().collect();
            let jp = objective(params, &prefs)?;
            perturbed[idx].data_mut()[k] = base - step;
            let prefs: Vec<&Tensor<f64>> = perturbed.iter().collect();
            let jm = objective(params, &prefs)?;
            let numeric = (jp - jm) / (2.0 * step);
            record(
                format!("{} input{idx}[{k}]", kind.name()),
                grad.data()[k],
                numeric,
                &mut report,
            );
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn every_layer_passes_a_quick_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random_tensor(&[3, 4, 4], &mut rng);
        let cases: Vec<(LayerKind, Option<LayerParams<f64>>)> = vec![
            (LayerKind::Conv3x3, Some(LayerParams::conv3x3(3, 2, &mut rng))),
            (LayerKind::Conv1x1, Some(LayerParams::conv1x1(3, 5, &mut rng))),
            (
                LayerKind::FullyConnected,
                Some(LayerParams::fully_connected(48, 6, &mut rng)),
            ),
            (LayerKind::Relu, None),
            (LayerKind::Sigmoid, None),
            (LayerKind::MaxPool2, None),
            (LayerKind::Upsample2, None),
        ];
        for (kind, params) in cases {
            let report = grad_check(kind, params.as_ref(), &[&x], 1e-5, 1e-4, 7).unwrap();
            assert!(
                report.passed(),
                "{}: {} at {}",
                kind.name(),
                report.max_rel_err,
                report.worst_site
            );
        }
    }

    #[test]
    fn concat_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&[2, 3, 3], &mut rng);
        let b = random_tensor(&[1, 3, 3], &mut rng);
        let report = grad_check(LayerKind::Concat, None, &[&a, &b], 1e-5, 1e-4, 11).unwrap();
        assert!(report.passed(), "{}", report.max_rel_err);
    }

    #[test]
    fn sweep_covers_every_element_and_names_a_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&[2, 2, 2], &mut rng);
        let report = grad_check(LayerKind::Sigmoid, None, &[&x], 1e-5, 1e-4, 3).unwrap();
        assert_eq!(report.checked, x.len());
        assert!(report.worst_site.starts_with("sigmoid input0["));
        assert!(report.passed());
    }
}
