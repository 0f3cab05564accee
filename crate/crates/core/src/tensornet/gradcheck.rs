//! Central finite differences, used to verify analytic gradients.

use rand::seq::index::sample;

use super::graph::{ParamSet, Sequential};
use super::ops::softmax_cross_entropy;
use super::tensor::Tensor;
use crate::rng::rng_from_seed;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = f(&x);
            x[i] = orig - eps;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Symmetric relative error `|a - b| / max(|a| + |b|, floor)`. The floor
/// keeps coordinates whose true gradient is zero from dividing noise by
/// noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-8;
    (a - b).abs() / (a.abs() + b.abs()).max(FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Parameter coordinates `(layer, in_bias, index)` to probe, at most
/// `per_tensor` from every weight and bias tensor, chosen with `seed`.
pub fn sample_coordinates(params: &ParamSet<f64>, per_tensor: usize, seed: u64) -> Vec<(usize, bool, usize)> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();
    for (layer, p) in params.0.iter().enumerate() {
        let Some(p) = p else { continue };
        for (is_bias, t) in [(false, &p.weight), (true, &p.bias)] {
            let n = t.len();
            let picks = sample(&mut rng, n, per_tensor.min(n));
            let mut picks = picks.into_vec();
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|i| (layer, is_bias, i)));
        }
    }
    out
}

fn coord_mut(params: &mut ParamSet<f64>, (layer, is_bias, i): (usize, bool, usize)) -> &mut f64 {
    let p = params.layer_mut(layer).expect("sampled from a parameterized layer");
    if is_bias {
        &mut p.bias.data_mut()[i]
    } else {
        &mut p.weight.data_mut()[i]
    }
}

fn coord(params: &ParamSet<f64>, (layer, is_bias, i): (usize, bool, usize)) -> f64 {
    let p = params.layer(layer).expect("sampled from a parameterized layer");
    if is_bias {
        p.bias.data()[i]
    } else {
        p.weight.data()[i]
    }
}

/// Largest relative error between analytic and central-difference parameter
/// gradients of softmax cross-entropy on a small network, over a seeded
/// subsample of at most 64 coordinates per tensor.
pub fn gradient_check(graph: &Sequential<f64>, input: &Tensor<f64>, label: usize, epsilon: f64) -> crate::Result<f64> {
    let (logits, trace) = graph.forward_traced(input)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, label)?;
    let mut grads = graph.zero_grads();
    graph.backward(&trace, &dlogits, &mut grads, false)?;

    let coords = sample_coordinates(graph.params(), 64, 0x6772_6164);
    let analytic: Vec<f64> = coords.iter().map(|&c| coord(&grads, c)).collect();
    let start: Vec<f64> = coords.iter().map(|&c| coord(graph.params(), c)).collect();

    let mut probe = graph.clone();
    let numeric = central_difference(
        |x| {
            for (&c, &v) in coords.iter().zip(x) {
                *coord_mut(probe.params_mut(), c) = v;
            }
            let logits = probe.forward(input).expect("shapes already validated");
            softmax_cross_entropy(&logits, label).expect("label already validated").0
        },
        &start,
        epsilon,
    );
    Ok(max_relative_error(&analytic, &numeric))
}
