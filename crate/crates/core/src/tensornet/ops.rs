//! Forward and backward kernels for single samples laid out as `[C, H, W]`.
//!
//! Convolutions are cross-correlations computed with im2col and a matrix
//! product per channel group. Reductions that produce a scalar or a bias
//! gradient are accumulated in `f64`.

use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

/// Output side length of a sliding window, or `None` when the window does
/// not fit.
pub fn window_output(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, p: ConvParams) -> Result<Self> {
        let &[c, h, w] = input.shape() else {
            return Err(invalid!("conv input must be [C,H,W], got {:?}", input.shape()));
        };
        let &[o, cg, k, k2] = weight.shape() else {
            return Err(invalid!("conv weight must be [O,C/g,k,k], got {:?}", weight.shape()));
        };
        if k != k2 {
            return Err(invalid!("non-square kernel {k}x{k2}"));
        }
        if p.groups == 0 || c % p.groups != 0 || o % p.groups != 0 {
            return Err(invalid!("channels {c}->{o} not divisible by {} groups", p.groups));
        }
        if cg != c / p.groups {
            return Err(invalid!("weight expects {cg} channels per group, input has {}", c / p.groups));
        }
        let (Some(ho), Some(wo)) = (window_output(h, k, p.stride, p.padding), window_output(w, k, p.stride, p.padding))
        else {
            return Err(invalid!("kernel {k} stride {} does not fit {h}x{w} (pad {})", p.stride, p.padding));
        };
        Ok(Self { c, h, w, o, k, ho, wo, stride: p.stride, pad: p.padding, groups: p.groups })
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cg() * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, group: usize, cols: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let sp = g.spatial();
    for ci in 0..g.cg() {
        let plane = &x[(group * g.cg() + ci) * g.h * g.w..][..g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * sp..][..sp];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - pad;
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, group: usize, dx: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let sp = g.spatial();
    for ci in 0..g.cg() {
        let plane = &mut dx[(group * g.cg() + ci) * g.h * g.w..][..g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * sp..][..sp];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for (ox, &v) in row[oy * g.wo..][..g.wo].iter().enumerate() {
                        let ix = (ox * s + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is `[O, C/groups, k, k]`, `bias` is `[O]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, params)?;
    if bias.shape() != [g.o] {
        return Err(invalid!("bias shape {:?} does not match {} outputs", bias.shape(), g.o));
    }
    let sp = g.spatial();
    let rows = g.col_rows();
    let mut out = Tensor::zeros(&[g.o, g.ho, g.wo]);
    let mut cols = vec![T::zero(); rows * sp];
    for group in 0..g.groups {
        im2col(input.data(), &g, group, &mut cols);
        let w = &weight.data()[group * g.og() * rows..][..g.og() * rows];
        let o = &mut out.data_mut()[group * g.og() * sp..][..g.og() * sp];
        T::gemm(
            g.og(),
            rows,
            sp,
            T::one(),
            (w, rows as isize, 1),
            (&cols, sp as isize, 1),
            T::zero(),
            (o, sp as isize, 1),
        );
    }
    for (plane, &b) in out.data_mut().chunks_mut(sp).zip(bias.data()) {
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    params: ConvParams,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, params)?;
    if dout.shape() != [g.o, g.ho, g.wo] {
        return Err(invalid!(
            "upstream gradient {:?} does not match output [{}, {}, {}]",
            dout.shape(),
            g.o,
            g.ho,
            g.wo
        ));
    }
    let sp = g.spatial();
    let rows = g.col_rows();
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); rows * sp];
    let mut dcols = vec![T::zero(); rows * sp];
    for group in 0..g.groups {
        im2col(input.data(), &g, group, &mut cols);
        let dy = &dout.data()[group * g.og() * sp..][..g.og() * sp];
        let dwg = &mut dw.data_mut()[group * g.og() * rows..][..g.og() * rows];
        // dW = dY · colsᵀ
        T::gemm(
            g.og(),
            sp,
            rows,
            T::one(),
            (dy, sp as isize, 1),
            (&cols, 1, sp as isize),
            T::zero(),
            (dwg, rows as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            let w = &weight.data()[group * g.og() * rows..][..g.og() * rows];
            // dcols = Wᵀ · dY
            T::gemm(
                rows,
                g.og(),
                sp,
                T::one(),
                (w, 1, rows as isize),
                (dy, sp as isize, 1),
                T::zero(),
                (&mut dcols, sp as isize, 1),
            );
            col2im_add(&dcols, &g, group, dx.data_mut());
        }
    }
    let db = dout.data().chunks(sp).map(|plane| T::of(plane.iter().map(|v| v.as_f64()).sum())).collect();
    Ok(ConvGrads { input: dx, weight: dw, bias: Tensor::vector(db) })
}

/// Max-pooling output plus the flat input index that produced each value.
pub fn maxpool<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let &[c, h, w] = input.shape() else {
        return Err(invalid!("maxpool input must be [C,H,W], got {:?}", input.shape()));
    };
    let (Some(ho), Some(wo)) = (window_output(h, window, stride, 0), window_output(w, window, stride, 0)) else {
        return Err(invalid!("pool window {window} stride {stride} does not fit {h}x{w}"));
    };
    let x = input.data();
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut arg = vec![0u32; c * ho * wo];
    let o = out.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = ch * h * w + oy * stride * w + ox * stride;
                let mut best = x[best_i];
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        // strict comparison keeps the first maximum in scan order
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let oi = (ch * ho + oy) * wo + ox;
                o[oi] = best;
                arg[oi] = best_i as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward<T: Scalar>(input_shape: &[usize], argmax: &[u32], dout: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != dout.len() {
        return Err(invalid!("argmax has {} entries for {} gradients", argmax.len(), dout.len()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        d[i as usize] = d[i as usize] + g;
    }
    Ok(dx)
}

/// NaN inputs pass through unchanged so non-finite values stay visible.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != dout.shape() {
        return Err(invalid!("relu gradient shape {:?} vs input {:?}", dout.shape(), input.shape()));
    }
    let data = input.data().iter().zip(dout.data()).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(input.shape(), data)
}

/// `y = W x + b` for `W: [out, in]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[out, inp] = weight.shape() else {
        return Err(invalid!("linear weight must be [out,in], got {:?}", weight.shape()));
    };
    if input.len() != inp || input.shape().len() != 1 {
        return Err(invalid!("linear expects a vector of {inp}, got {:?}", input.shape()));
    }
    if bias.shape() != [out] {
        return Err(invalid!("bias shape {:?} does not match {out} outputs", bias.shape()));
    }
    let mut y = bias.clone();
    T::gemm(
        out,
        inp,
        1,
        T::one(),
        (weight.data(), inp as isize, 1),
        (input.data(), 1, 1),
        T::one(),
        (y.data_mut(), 1, 1),
    );
    Ok(y)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, dout: &Tensor<T>) -> Result<LinearGrads<T>> {
    let &[out, inp] = weight.shape() else {
        return Err(invalid!("linear weight must be [out,in], got {:?}", weight.shape()));
    };
    if input.len() != inp || dout.len() != out {
        return Err(invalid!(
            "linear backward shapes: input {:?}, dout {:?}, weight {:?}",
            input.shape(),
            dout.shape(),
            weight.shape()
        ));
    }
    let mut dw = Tensor::zeros(&[out, inp]);
    T::gemm(
        out,
        1,
        inp,
        T::one(),
        (dout.data(), 1, 1),
        (input.data(), 1, 1),
        T::zero(),
        (dw.data_mut(), inp as isize, 1),
    );
    let mut dx = Tensor::zeros(&[inp]);
    T::gemm(
        inp,
        out,
        1,
        T::one(),
        (weight.data(), 1, inp as isize),
        (dout.data(), 1, 1),
        T::zero(),
        (dx.data_mut(), 1, 1),
    );
    Ok(LinearGrads { input: dx, weight: dw, bias: dout.clone().reshape(&[out])? })
}

pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::vector(input.data().to_vec())
}

/// Join vectors end to end, in argument order.
pub fn concat<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.iter().any(|p| p.shape().len() != 1) {
        return Err(invalid!("concat joins 1-D vectors only"));
    }
    Ok(Tensor::vector(parts.iter().flat_map(|p| p.data().iter().copied()).collect()))
}

/// Inverse of [`concat`] for gradients: split into segments of `sizes`.
pub fn split<T: Scalar>(joined: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if sizes.iter().sum::<usize>() != joined.len() {
        return Err(invalid!("segments {:?} do not cover {} values", sizes, joined.len()));
    }
    let mut offset = 0;
    Ok(sizes
        .iter()
        .map(|&n| {
            let seg = Tensor::vector(joined.data()[offset..offset + n].to_vec());
            offset += n;
            seg
        })
        .collect())
}

/// Probabilities from logits, computed in `f64` after subtracting the max.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let max = logits.data().iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Loss `-log p[label]` and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(f64, Tensor<T>)> {
    let n = logits.len();
    if label >= n {
        return Err(invalid!("label {label} out of range for {n} classes"));
    }
    let max = logits.data().iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.data().iter().map(|v| v.as_f64() - max).collect();
    let log_z = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    let loss = (log_z - shifted[label]).max(0.0);
    let grad = shifted
        .iter()
        .enumerate()
        .map(|(i, s)| T::of((s - log_z).exp() - if i == label { 1.0 } else { 0.0 }))
        .collect();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}
