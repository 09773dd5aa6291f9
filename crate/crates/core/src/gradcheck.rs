//! Central-difference gradient checking in 64-bit precision.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, l1_mean, l1_mean_grad,
    leaky_relu, leaky_relu_backward, tanh, tanh_backward, Conv2dOptions,
};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Maximum number of coordinates probed per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 200;

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Result of one [`grad_check`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum was observed.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients from `f` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// `f` returns the loss and its gradient with respect to every entry of the
/// parameter set. At most [`MAX_COORDS_PER_TENSOR`] coordinates per tensor
/// are probed, chosen from a stream seeded with `seed`. The relative error
/// uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(
    f: F,
    params: &ParameterSet<f64>,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet<f64>) -> Result<(f64, ParameterSet<f64>)>,
{
    let (_, analytic) = f(params)?;
    if !analytic.same_layout(params) {
        return Err(Error::Invalid(
            "gradient set does not match parameter layout".into(),
        ));
    }
    for (name, g) in analytic.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.require(&name)?.len();
        let coords: Vec<usize> = if len <= MAX_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            sample(&mut rng, len, MAX_COORDS_PER_TENSOR).into_vec()
        };
        let grad = analytic.require(&name)?;
        for idx in coords {
            let original = params.require(&name)?.data()[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(&name).expect("cloned layout").data_mut()[idx] = v;
                Ok(f(&probe)?.0)
            };
            let plus = eval_at(original + eps)?;
            let minus = eval_at(original - eps)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// One entry of [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    for (n, t) in entries {
        p.insert(n, t).expect("unique names");
    }
    p
}

type LossFn<'a> = dyn Fn(&ParameterSet<f64>) -> Result<(f64, ParameterSet<f64>)> + 'a;

/// Gradient checks for every primitive in isolation and for a two-layer
/// conv → LeakyReLU → transposed-conv composite, all on `1x2x8x8` inputs.
pub fn run_suite(seed: u64, slope: f64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = Conv2dOptions::default();
    let eps = 1e-6;
    let mut cases = Vec::new();
    let mut run = |name: &'static str,
                   params: ParameterSet<f64>,
                   f: &LossFn<'_>|
     -> Result<()> {
        let start = Instant::now();
        let report = grad_check(f, &params, eps, seed)?;
        cases.push(SuiteCase {
            name,
            report,
            elapsed: start.elapsed(),
        });
        Ok(())
    };

    let target = random(&[1, 3, 4, 4], &mut rng);
    run(
        "conv2d",
        set(vec![
            ("x", random(&[1, 2, 8, 8], &mut rng)),
            ("w", random(&[3, 2, 4, 4], &mut rng)),
            ("b", random(&[3], &mut rng)),
        ]),
        &|p| {
            let (x, w) = (p.require("x")?, p.require("w")?);
            let y = conv2d(x, w, p.require("b")?, opts)?;
            let g = l1_mean_grad(&y, &target, 1.0)?;
            let cg = conv2d_backward(x, w, &g, opts, true)?;
            Ok((
                l1_mean(&y, &target)?,
                set(vec![("x", cg.input.expect("requested")), ("w", cg.weight), ("b", cg.bias)]),
            ))
        },
    )?;

    let target = random(&[1, 3, 16, 16], &mut rng);
    run(
        "conv_transpose2d",
        set(vec![
            ("x", random(&[1, 2, 8, 8], &mut rng)),
            ("w", random(&[2, 3, 4, 4], &mut rng)),
            ("b", random(&[3], &mut rng)),
        ]),
        &|p| {
            let (x, w) = (p.require("x")?, p.require("w")?);
            let y = conv_transpose2d(x, w, p.require("b")?, opts)?;
            let g = l1_mean_grad(&y, &target, 1.0)?;
            let cg = conv_transpose2d_backward(x, w, &g, opts, true)?;
            Ok((
                l1_mean(&y, &target)?,
                set(vec![("x", cg.input.expect("requested")), ("w", cg.weight), ("b", cg.bias)]),
            ))
        },
    )?;

    let weights = random(&[1, 2, 8, 8], &mut rng);
    run(
        "leaky_relu",
        set(vec![("x", random(&[1, 2, 8, 8], &mut rng))]),
        &|p| {
            let x = p.require("x")?;
            let y = leaky_relu(x, slope);
            Ok((
                y.dot(&weights)?,
                set(vec![("x", leaky_relu_backward(x, &weights, slope)?)]),
            ))
        },
    )?;

    let weights = random(&[1, 2, 8, 8], &mut rng);
    run(
        "tanh",
        set(vec![("x", random(&[1, 2, 8, 8], &mut rng))]),
        &|p| {
            let y = tanh(p.require("x")?);
            Ok((y.dot(&weights)?, set(vec![("x", tanh_backward(&y, &weights)?)])))
        },
    )?;

    let target = random(&[1, 2, 8, 8], &mut rng);
    run(
        "l1_mean",
        set(vec![("x", random(&[1, 2, 8, 8], &mut rng))]),
        &|p| {
            let x = p.require("x")?;
            Ok((
                l1_mean(x, &target)?,
                set(vec![("x", l1_mean_grad(x, &target, 1.0)?)]),
            ))
        },
    )?;

    let target = random(&[1, 3, 8, 8], &mut rng);
    run(
        "composite",
        set(vec![
            ("x", random(&[1, 2, 8, 8], &mut rng)),
            ("w1", random(&[4, 2, 4, 4], &mut rng)),
            ("b1", random(&[4], &mut rng)),
            ("w2", random(&[4, 3, 4, 4], &mut rng)),
            ("b2", random(&[3], &mut rng)),
        ]),
        &|p| {
            let (x, w1, w2) = (p.require("x")?, p.require("w1")?, p.require("w2")?);
            let h = leaky_relu(&conv2d(x, w1, p.require("b1")?, opts)?, slope);
            let y = conv_transpose2d(&h, w2, p.require("b2")?, opts)?;
            let gy = l1_mean_grad(&y, &target, 1.0)?;
            let c2 = conv_transpose2d_backward(&h, w2, &gy, opts, true)?;
            let gh = leaky_relu_backward(&h, &c2.input.expect("requested"), slope)?;
            let c1 = conv2d_backward(x, w1, &gh, opts, true)?;
            Ok((
                l1_mean(&y, &target)?,
                set(vec![
                    ("x", c1.input.expect("requested")),
                    ("w1", c1.weight),
                    ("b1", c1.bias),
                    ("w2", c2.weight),
                    ("b2", c2.bias),
                ]),
            ))
        },
    )?;

    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = set(vec![("p", random(&[30], &mut rng))]);
        let report = grad_check(
            |p| {
                let x = p.require("p")?;
                Ok((0.5 * x.dot(x)?, set(vec![("p", x.clone())])))
            },
            &params,
            1e-4,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6);
        assert_eq!(report.coords_checked, 30);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let params = set(vec![("p", Tensor::full(&[5], 0.3))]);
        let report = grad_check(
            |p| Ok((4.0, p.zeros_like())),
            &params,
            1e-4,
            0,
        )
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let params = set(vec![("p", Tensor::full(&[4], 1.0))]);
        let report = grad_check(
            |p| {
                let x = p.require("p")?;
                Ok((x.dot(x)?, set(vec![("p", x.clone())])))
            },
            &params,
            1e-4,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error > 0.4);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let params = set(vec![("weights", Tensor::full(&[2], 1.0))]);
        let err = grad_check(
            |_| Ok((0.0, set(vec![("weights", Tensor::full(&[2], f64::NAN))]))),
            &params,
            1e-4,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn sampling_caps_coordinates() {
        let params = set(vec![("p", Tensor::full(&[1000], 0.5))]);
        let report = grad_check(
            |p| {
                let x = p.require("p")?;
                Ok((0.5 * x.dot(x)?, set(vec![("p", x.clone())])))
            },
            &params,
            1e-4,
            0,
        )
        .unwrap();
        assert_eq!(report.coords_checked, MAX_COORDS_PER_TENSOR);
    }

    #[test]
    fn suite_passes() {
        for case in run_suite(0, 0.2).unwrap() {
            assert!(case.passed(), "{}: {:?}", case.name, case.report);
        }
    }
}
