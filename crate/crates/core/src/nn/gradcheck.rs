//! Central finite differences for verifying analytic gradients.

use ndarray::Array2;

use super::{decisions, multihead_cross_entropy, Activation, Parameterized, Sequential};
use crate::error::Result;
use crate::symptom::{SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};

/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    let plus = f(x + eps);
    let minus = f(x - eps);
    (plus - minus) / (2.0 * eps)
}

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Analytic and numeric gradients of a scalar loss over every parameter of `model`.
///
/// `backward` must accumulate the analytic gradient into the model's `grad`
/// buffers; they are cleared beforehand. Parameter values are restored after
/// each probe.
pub fn gradient_pair<M, L, B>(model: &mut M, loss: L, backward: B, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    M: Parameterized + ?Sized,
    L: Fn(&M) -> Result<f64>,
    B: FnOnce(&mut M) -> Result<()>,
{
    piecewise_gradient_pair(model, |m| Ok((loss(m)?, Vec::new())), backward, eps)
}

/// Like [`gradient_pair`] for piecewise-smooth losses.
///
/// `loss` also reports the discrete decisions taken (see
/// [`decisions`](super::decisions)). When a probe at `±eps` lands on a
/// different piece than the unperturbed point, the step is shrunk by 10x, up to
/// three times, so the difference quotient does not straddle a kink.
pub fn piecewise_gradient_pair<M, L, B>(model: &mut M, loss: L, backward: B, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    M: Parameterized + ?Sized,
    L: Fn(&M) -> Result<(f64, Vec<usize>)>,
    B: FnOnce(&mut M) -> Result<()>,
{
    model.zero_grad();
    backward(model)?;
    let analytic = model.flat_grads();
    let base = loss(model)?.1;
    let mut numeric = Vec::with_capacity(analytic.len());
    for idx in 0..analytic.len() {
        let orig = model.set_flat(idx, 0.0);
        let mut h = eps;
        let mut estimate = 0.0;
        for _ in 0..4 {
            model.set_flat(idx, orig + h);
            let (plus, dp) = loss(model)?;
            model.set_flat(idx, orig - h);
            let (minus, dm) = loss(model)?;
            estimate = (plus - minus) / (2.0 * h);
            if dp == base && dm == base {
                break;
            }
            h /= 10.0;
        }
        model.set_flat(idx, orig);
        numeric.push(estimate);
    }
    Ok((analytic, numeric))
}

/// Max relative gradient error of a network whose 54 outputs are read as
/// `18 x 3` logits under the multi-head cross-entropy.
pub fn grad_check(net: &mut Sequential, input: &Activation, target: &SymptomVector, eps: f64) -> Result<f64> {
    let logits = |out: Activation| -> Result<Array2<f64>> {
        out
            .into_flat()?
            .into_shape_with_order((NUM_SYMPTOMS, NUM_CLASSES))
            .map_err(|e| crate::Error::Shape(format!("network output: {e}")))
    };
    let loss = |n: &Sequential| -> Result<(f64, Vec<usize>)> {
        let (out, caches) = n.forward(input.clone())?;
        let l = logits(out)?;
        Ok((multihead_cross_entropy(l.view(), target)?.0, decisions(&caches)))
    };
    let backward = |n: &mut Sequential| -> Result<()> {
        let (out, caches) = n.forward(input.clone())?;
        let (_, g) = multihead_cross_entropy(logits(out)?.view(), target)?;
        n.backward(&caches, Activation::Flat(g.into_iter().collect()))?;
        Ok(())
    };
    let (a, num) = piecewise_gradient_pair(net, loss, backward, eps)?;
    Ok(max_relative_error(&a, &num))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, PoolMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(seed: u64) -> SymptomVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<u8> = (0..NUM_SYMPTOMS).map(|_| rng.gen_range(0..3)).collect();
        SymptomVector::from_slice(&v).unwrap()
    }

    #[test]
    fn linear_network_is_exact() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Sequential::from_specs(
                "t",
                &[LayerSpec::Linear {
                    in_features: 6,
                    out_features: 54,
                }],
                &mut rng,
            );
            let x = Activation::Flat((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let err = grad_check(&mut net, &x, &target(seed), 1e-4).unwrap();
            assert!(err < 1e-8, "seed {seed}: {err}");
        }
    }

    fn conv_net(rng: &mut ChaCha8Rng, mode: PoolMode) -> Sequential {
        let pool = match mode {
            PoolMode::Max => LayerSpec::Maxpool2d { kernel: 2 },
            PoolMode::Avg => LayerSpec::Avgpool2d { kernel: 2 },
        };
        Sequential::from_specs(
            "c",
            &[
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                },
                LayerSpec::Relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 2 * 3 * 2,
                    out_features: 54,
                },
            ],
            rng,
        )
    }

    #[test]
    fn conv_pool_linear_network() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = conv_net(&mut rng, PoolMode::Max);
            let x = Activation::Spatial(ndarray::Array3::from_shape_fn((1, 8, 6), |_| rng.gen_range(-1.0..1.0)));
            let err = grad_check(&mut net, &x, &target(seed), 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = conv_net(&mut rng, PoolMode::Avg);
        let x = Activation::Spatial(ndarray::Array3::from_shape_fn((1, 8, 6), |_| rng.gen_range(-1.0..1.0)));
        let t = target(5);
        let loss = |n: &Sequential| -> Result<f64> {
            let l = n.infer(x.clone())?.into_flat()?.into_shape_with_order((18, 3)).unwrap();
            Ok(multihead_cross_entropy(l.view(), &t)?.0)
        };
        let backward = |n: &mut Sequential| -> Result<()> {
            let (out, caches) = n.forward(x.clone())?;
            let l = out.into_flat()?.into_shape_with_order((18, 3)).unwrap();
            let (_, g) = multihead_cross_entropy(l.view(), &t)?;
            n.backward(&caches, Activation::Flat(g.into_iter().collect()))?;
            // planted fault: last-layer bias gradients doubled
            let last = n.params_mut().pop().unwrap();
            last.grad.iter_mut().for_each(|v| *v *= 2.0);
            Ok(())
        };
        let (a, num) = gradient_pair(&mut net, loss, backward, 1e-5).unwrap();
        assert!(max_relative_error(&a, &num) > 1e-2);
    }

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x * x * x, 2.0, 1e-5);
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 1.0]), 0.5);
    }
}
