//! Helpers shared by the integration suites.
#![allow(dead_code)]

use jigsaw::cfn::{gradient_check as cfn_gradient_check, CfnConfig, CfnModel};
use jigsaw::permset::{Objective, PermutationSet};
use jigsaw::rng::rng_from_seed;
use jigsaw::tensornet::{
    central_difference, concat, conv2d, conv2d_backward, gradient_check, linear, linear_backward, max_relative_error,
    maxpool, maxpool_backward, relu, relu_backward, softmax_cross_entropy, split, ConvParams, Init, LayerSpec,
    Sequential, Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error of `analytic` against central differences of
/// `loss` around `x`.
fn check(x: &Tensor<f64>, analytic: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let shape = x.shape().to_vec();
    let numeric = central_difference(|v| loss(&Tensor::from_vec(&shape, v.to_vec()).unwrap()), x.data(), 1e-6);
    max_relative_error(analytic.data(), &numeric)
}

const EPS_NET: f64 = 1e-6;

/// Per-operator max relative errors for one random draw of shapes and
/// values. Each loss is `<r, op(x)>` for a random `r`.
pub fn operator_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();

    // convolution, possibly grouped, strided and padded
    let groups = rng.random_range(1..=2);
    let cin = groups * rng.random_range(1..=3);
    let cout = groups * rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let p = ConvParams { stride: rng.random_range(1..=2), padding: rng.random_range(0..=1), groups };
    let (h, w) = (rng.random_range(k + 2..=8), rng.random_range(k + 2..=8));
    let x = randn(&[cin, h, w], &mut rng);
    let wt = randn(&[cout, cin / groups, k, k], &mut rng);
    let b = randn(&[cout], &mut rng);
    let y = conv2d(&x, &wt, &b, p).unwrap();
    let r = randn(y.shape(), &mut rng);
    let g = conv2d_backward(&x, &wt, &r, p, true).unwrap();
    let e_in = check(&x, g.input.as_ref().unwrap(), |x| dot(&conv2d(x, &wt, &b, p).unwrap(), &r));
    let e_w = check(&wt, &g.weight, |w| dot(&conv2d(&x, w, &b, p).unwrap(), &r));
    let e_b = check(&b, &g.bias, |b| dot(&conv2d(&x, &wt, b, p).unwrap(), &r));
    out.push(("conv2d", e_in.max(e_w).max(e_b)));

    // max pooling
    let (win, stride) = (rng.random_range(2..=3), rng.random_range(1..=2));
    let x = randn(&[rng.random_range(1..=3), rng.random_range(win..=8), rng.random_range(win..=8)], &mut rng);
    let (y, arg) = maxpool(&x, win, stride).unwrap();
    let r = randn(y.shape(), &mut rng);
    let dx = maxpool_backward(x.shape(), &arg, &r).unwrap();
    out.push(("maxpool", check(&x, &dx, |x| dot(&maxpool(x, win, stride).unwrap().0, &r))));

    // relu
    let x = randn(&[rng.random_range(1..=40)], &mut rng);
    let r = randn(x.shape(), &mut rng);
    let dx = relu_backward(&x, &r).unwrap();
    out.push(("relu", check(&x, &dx, |x| dot(&relu(x), &r))));

    // linear
    let (i, o) = (rng.random_range(1..=20), rng.random_range(1..=10));
    let x = randn(&[i], &mut rng);
    let wt = randn(&[o, i], &mut rng);
    let b = randn(&[o], &mut rng);
    let r = randn(&[o], &mut rng);
    let g = linear_backward(&x, &wt, &r).unwrap();
    let e = check(&x, &g.input, |x| dot(&linear(x, &wt, &b).unwrap(), &r))
        .max(check(&wt, &g.weight, |w| dot(&linear(&x, w, &b).unwrap(), &r)))
        .max(check(&b, &g.bias, |b| dot(&linear(&x, &wt, b).unwrap(), &r)));
    out.push(("linear", e));

    // concat: the gradient of each part is its segment of the upstream gradient
    let sizes: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=5)).collect();
    let parts: Vec<_> = sizes.iter().map(|&n| randn(&[n], &mut rng)).collect();
    let r = randn(&[sizes.iter().sum()], &mut rng);
    let segs = split(&r, &sizes).unwrap();
    let mut e: f64 = 0.0;
    for (j, part) in parts.iter().enumerate() {
        e = e.max(check(part, &segs[j], |p| {
            let mut ps = parts.clone();
            ps[j] = p.clone();
            dot(&concat(&ps).unwrap(), &r)
        }));
    }
    out.push(("concat", e));

    // softmax cross-entropy with respect to the logits
    let n = rng.random_range(2..=10);
    let z = randn(&[n], &mut rng);
    let label = rng.random_range(0..n);
    let (_, dz) = softmax_cross_entropy(&z, label).unwrap();
    out.push(("softmax_cross_entropy", check(&z, &dz, |z| softmax_cross_entropy(z, label).unwrap().0)));

    // a small sequential stack, parameter gradients through every layer type
    let c = rng.random_range(1..=3);
    let side = rng.random_range(7..=10);
    let specs = vec![
        LayerSpec::conv(4, 3, 1, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::Flatten,
        LayerSpec::linear(6),
        LayerSpec::Relu,
        LayerSpec::linear(5),
    ];
    let mut net = Sequential::<f64>::new(&[c, side, side], specs).unwrap();
    net.init(Init::FanIn, &mut rng);
    let x = randn(&[c, side, side], &mut rng);
    out.push(("sequential", gradient_check(&net, &x, rng.random_range(0..5), EPS_NET).unwrap()));
    out
}

/// Toy CFN in f64: analytic vs numeric gradient error.
pub fn cfn_error(seed: u64) -> f64 {
    let cfg = CfnConfig::toy(8);
    let model = CfnModel::<f64>::build(cfg.clone(), seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0x7469);
    let tiles: Vec<_> = (0..cfg.num_branches).map(|_| randn(&cfg.tile_shape(), &mut rng)).collect();
    cfn_gradient_check(&model, &tiles, (seed % 8) as usize, EPS_NET, 6, seed).unwrap()
}

/// All permutations of `1..=n` in lexicographic order, via the classic
/// next-permutation step.
pub fn lexicographic_perms(n: usize) -> Vec<Vec<u8>> {
    let mut cur: Vec<u8> = (1..=n as u8).collect();
    let mut all = vec![cur.clone()];
    while let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) {
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
        all.push(cur.clone());
    }
    all
}

/// Checks every greedy step of `set` against a brute-force scan of the
/// remaining pool: the chosen entry must have the extreme summed Hamming
/// distance to all earlier picks, ties to the lowest pool index.
pub fn greedy_oracle_mismatch(set: &PermutationSet, objective: Objective) -> Option<String> {
    let pool = lexicographic_perms(set.cells());
    let index_of = |p: &[u8]| pool.iter().position(|q| q.as_slice() == p);
    let picks: Vec<usize> = set.entries().iter().map(|p| index_of(p.as_slice()).expect("entry in pool")).collect();
    let mismatches = |a: &[u8], b: &[u8]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    for step in 1..picks.len() {
        let chosen = &picks[..step];
        let mut best: Option<(usize, usize)> = None;
        for (k, cand) in pool.iter().enumerate() {
            if chosen.contains(&k) {
                continue;
            }
            let score: usize = chosen.iter().map(|&c| mismatches(cand, &pool[c])).sum();
            let better = match (best, objective) {
                (None, _) => true,
                (Some((_, b)), Objective::Max) => score > b,
                (Some((_, b)), _) => score < b,
            };
            if better {
                best = Some((k, score));
            }
        }
        let (want, _) = best.unwrap();
        if picks[step] != want {
            return Some(format!("step {step}: picked pool index {} but brute force gives {want}", picks[step]));
        }
    }
    None
}
