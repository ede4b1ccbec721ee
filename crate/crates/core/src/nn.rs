//! Layer vocabulary: patch embedding, 1D/2D depthwise convolutions,
//! pointwise mixing over a channel slice, normalization, activations,
//! pooling, the linear head and the classification loss.
//!
//! Every op records itself on a [`Tape`] and has a backward rule.

use std::ops::Range;

use crate::autodiff::{Op, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, Axis};
use crate::tensor::{Element, Fill, Shape4, Tensor4};

/// BatchNorm defaults of the reference framework.
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Per-channel statistics over batch and spatial positions.
    Batch,
    /// Per-position statistics over the channel dimension.
    Layer,
}

/// Weight and bias of a convolution-like layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    /// Registers a Kaiming-initialized weight and a zero bias of `out` channels.
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        weight_dims: [usize; 4],
        fan_in: usize,
        seed: u64,
    ) -> Result<Self> {
        let weight = Tensor4::alloc_dims(weight_dims, Fill::Kaiming { fan_in, seed })?;
        let out = weight_dims[0];
        let bias = Tensor4::alloc_dims([1, out, 1, 1], Fill::Constant(0.0))?;
        Ok(Self {
            weight: store.register(format!("{prefix}.weight"), weight, true),
            bias: store.register(format!("{prefix}.bias"), bias, false),
        })
    }

    pub fn vars<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> (Var, Var) {
        (tape.param(store, self.weight), tape.param(store, self.bias))
    }
}

/// Normalization layer: affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> NormState<T> {
    pub fn register(store: &mut ParamStore<T>, prefix: &str, kind: NormKind, channels: usize) -> Result<Self> {
        let ones = Tensor4::alloc_dims([1, channels, 1, 1], Fill::Constant(1.0))?;
        let zeros = Tensor4::alloc_dims([1, channels, 1, 1], Fill::Constant(0.0))?;
        Ok(Self {
            kind,
            gamma: store.register(format!("{prefix}.gamma"), ones, false),
            beta: store.register(format!("{prefix}.beta"), zeros, false),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: NORM_MOMENTUM,
            eps: NORM_EPS,
        })
    }

    pub fn apply(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match self.kind {
            NormKind::Batch => batchnorm(tape, x, g, b, self, mode),
            NormKind::Layer => layernorm(tape, x, g, b, self.eps),
        }
    }
}

/// What a norm op keeps for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormSaved<T> {
    kind: NormKind,
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Statistics were computed from the input itself (and so depend on it).
    from_input: bool,
}

fn bias_like(c: usize) -> Shape4 {
    Shape4 { n: 1, c, h: 1, w: 1 }
}

fn expect_param_shape<T: Element>(tape: &Tape<T>, v: Var, want: Shape4, what: &str) -> Result<()> {
    let got = tape.shape(v);
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want}, got {got}")));
    }
    Ok(())
}

/// Strided `p x p` convolution from `c` image channels to `h` hidden channels.
pub fn patch_embed<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var, p: usize) -> Result<Var> {
    let xs = tape.shape(x);
    if p == 0 || !xs.h.is_multiple_of(p) || !xs.w.is_multiple_of(p) {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide input {}x{}",
            xs.h, xs.w
        )));
    }
    let ws = tape.shape(weight);
    if ws.c != xs.c || ws.h != p || ws.w != p {
        return Err(Error::Shape(format!("patch weight {ws} incompatible with input {xs} and p={p}")));
    }
    expect_param_shape(tape, bias, bias_like(ws.n), "patch bias")?;
    let y = kernels::patch_embed_forward(tape.value(x), tape.value(weight), tape.value(bias), p);
    Ok(tape.push(
        y,
        Op::PatchEmbed {
            x,
            w: weight,
            b: bias,
            patch: p,
        },
    ))
}

/// Depthwise 1D convolution along `axis` with zero same-padding.
///
/// Weight shape is `(c,1,1,k)` for [`Axis::Width`] and `(c,1,k,1)` for [`Axis::Height`].
pub fn depthwise1d<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var, axis: Axis) -> Result<Var> {
    let ws = tape.shape(weight);
    let k = match axis {
        Axis::Width => ws.w,
        Axis::Height => ws.h,
    };
    let other = match axis {
        Axis::Width => ws.h,
        Axis::Height => ws.w,
    };
    if other != 1 {
        return Err(Error::Shape(format!("1D depthwise weight {ws} is not 1-dimensional along {axis:?}")));
    }
    depthwise_checked(tape, x, weight, bias, k)
}

/// Depthwise `k x k` convolution (ConvMixer spatial mixing).
pub fn depthwise2d<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let ws = tape.shape(weight);
    if ws.h != ws.w {
        return Err(Error::Shape(format!("2D depthwise weight {ws} is not square")));
    }
    depthwise_checked(tape, x, weight, bias, ws.h)
}

fn depthwise_checked<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var, k: usize) -> Result<Var> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
    }
    let xs = tape.shape(x);
    let ws = tape.shape(weight);
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::Shape(format!("depthwise weight {ws} does not match {} channels", xs.c)));
    }
    expect_param_shape(tape, bias, bias_like(xs.c), "depthwise bias")?;
    let y = kernels::depthwise_forward(tape.value(x), tape.value(weight), tape.value(bias));
    Ok(tape.push(y, Op::Depthwise { x, w: weight, b: bias }))
}

/// 1x1 convolution over channels `range`; channels outside pass through unchanged.
pub fn pointwise_slice<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    range: Range<usize>,
) -> Result<Var> {
    let xs = tape.shape(x);
    if range.start >= range.end || range.end > xs.c {
        return Err(Error::Shape(format!(
            "channel slice {}..{} invalid for {} channels",
            range.start, range.end, xs.c
        )));
    }
    let d = range.end - range.start;
    expect_param_shape(tape, weight, Shape4 { n: d, c: d, h: 1, w: 1 }, "pointwise weight")?;
    expect_param_shape(tape, bias, bias_like(d), "pointwise bias")?;
    let y = kernels::pointwise_slice_forward(tape.value(x), tape.value(weight), tape.value(bias), range.start);
    Ok(tape.push(
        y,
        Op::PointwiseSlice {
            x,
            w: weight,
            b: bias,
            start: range.start,
        },
    ))
}

/// Channel-strided 3D convolution with `d` shared kernels of channel extent `d`.
///
/// Output channels come out kernel-major: kernel `j` on segment `i` lands at `j*s + i`.
pub fn strided_channel_conv<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(weight);
    let d = ws.n;
    if ws.c != d || ws.h != 1 || ws.w != 1 || d == 0 || !xs.c.is_multiple_of(d) {
        return Err(Error::Shape(format!("3D channel kernel {ws} incompatible with {} channels", xs.c)));
    }
    expect_param_shape(tape, bias, bias_like(d), "3D channel bias")?;
    let y = kernels::strided3d_forward(tape.value(x), tape.value(weight), tape.value(bias));
    Ok(tape.push(y, Op::Strided3d { x, w: weight, b: bias }))
}

/// Output channel `c` takes input channel `perm[c]`.
pub fn permute_channels<T: Element>(tape: &mut Tape<T>, x: Var, perm: &[usize]) -> Result<Var> {
    let xs = tape.shape(x);
    let mut seen = vec![false; xs.c];
    if perm.len() != xs.c || perm.iter().any(|&p| p >= xs.c || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape(format!("not a permutation of {} channels", xs.c)));
    }
    let y = apply_permutation(tape.value(x), perm);
    Ok(tape.push(
        y,
        Op::Permute {
            x,
            perm: perm.to_vec(),
        },
    ))
}

pub(crate) fn apply_permutation<T: Element>(x: &Tensor4<T>, perm: &[usize]) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for (c, &src) in perm.iter().enumerate() {
            let from = (n * s.c + src) * plane;
            let to = (n * s.c + c) * plane;
            out.data_mut()[to..to + plane].copy_from_slice(&x.data()[from..from + plane]);
        }
    }
    out
}

pub(crate) fn permute_channels_inverse<T: Element>(g: &Tensor4<T>, perm: &[usize]) -> Tensor4<T> {
    let mut inv = vec![0; perm.len()];
    for (c, &p) in perm.iter().enumerate() {
        inv[p] = c;
    }
    apply_permutation(g, &inv)
}

fn batchnorm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut NormState<T>,
    mode: Mode,
) -> Result<Var> {
    let xs = tape.shape(x);
    expect_param_shape(tape, gamma, bias_like(xs.c), "norm gamma")?;
    expect_param_shape(tape, beta, bias_like(xs.c), "norm beta")?;
    let plane = xs.plane();
    let count = xs.n * plane;
    let eps = T::from_f64_lossy(state.eps);
    let (mean, inv_std, from_input) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Shape(format!(
                    "batchnorm in train mode needs >= 2 values per channel, got {count}"
                )));
            }
            let xv = tape.value(x).data();
            let mut mean = vec![T::zero(); xs.c];
            let mut var = vec![T::zero(); xs.c];
            for c in 0..xs.c {
                let mut s = 0.0f64;
                for n in 0..xs.n {
                    let o = (n * xs.c + c) * plane;
                    s += xv[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count as f64;
                let mut q = 0.0f64;
                for n in 0..xs.n {
                    let o = (n * xs.c + c) * plane;
                    q += xv[o..o + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[c] = T::from_f64_lossy(mu);
                var[c] = T::from_f64_lossy(q / count as f64);
            }
            let m = T::from_f64_lossy(state.momentum);
            let unbias = T::from_f64_lossy(count as f64 / (count as f64 - 1.0));
            for c in 0..xs.c {
                state.running_mean[c] = (T::one() - m) * state.running_mean[c] + m * mean[c];
                state.running_var[c] = (T::one() - m) * state.running_var[c] + m * var[c] * unbias;
            }
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv, true)
        }
        Mode::Eval => {
            let inv = state.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (state.running_mean.clone(), inv, false)
        }
    };
    let saved = NormSaved {
        kind: NormKind::Batch,
        mean,
        inv_std,
        from_input,
    };
    let y = norm_forward(tape.value(x), tape.value(gamma), tape.value(beta), &saved);
    Ok(tape.push(y, Op::Norm { x, gamma, beta, saved }))
}

fn layernorm<T: Element>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let xs = tape.shape(x);
    expect_param_shape(tape, gamma, bias_like(xs.c), "norm gamma")?;
    expect_param_shape(tape, beta, bias_like(xs.c), "norm beta")?;
    let plane = xs.plane();
    let xv = tape.value(x).data();
    let groups = xs.n * plane;
    let mut mean = vec![T::zero(); groups];
    let mut inv_std = vec![T::zero(); groups];
    for n in 0..xs.n {
        for p in 0..plane {
            let at = |c: usize| xv[(n * xs.c + c) * plane + p].as_f64();
            let mu = (0..xs.c).map(at).sum::<f64>() / xs.c as f64;
            let var = (0..xs.c).map(|c| (at(c) - mu).powi(2)).sum::<f64>() / xs.c as f64;
            mean[n * plane + p] = T::from_f64_lossy(mu);
            inv_std[n * plane + p] = T::from_f64_lossy(1.0 / (var + eps).sqrt());
        }
    }
    let saved = NormSaved {
        kind: NormKind::Layer,
        mean,
        inv_std,
        from_input: true,
    };
    let y = norm_forward(tape.value(x), tape.value(gamma), tape.value(beta), &saved);
    Ok(tape.push(y, Op::Norm { x, gamma, beta, saved }))
}

/// Index of the statistics group for element (n, c, p).
#[inline]
fn stat_index(kind: NormKind, s: Shape4, n: usize, c: usize, p: usize) -> usize {
    match kind {
        NormKind::Batch => c,
        NormKind::Layer => n * s.plane() + p,
    }
}

fn norm_forward<T: Element>(x: &Tensor4<T>, gamma: &Tensor4<T>, beta: &Tensor4<T>, saved: &NormSaved<T>) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut y = Tensor4::zeros(s);
    let (g, b) = (gamma.data(), beta.data());
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for p in 0..plane {
                let k = stat_index(saved.kind, s, n, c, p);
                let xhat = (x.data()[o + p] - saved.mean[k]) * saved.inv_std[k];
                y.data_mut()[o + p] = g[c] * xhat + b[c];
            }
        }
    }
    y
}

pub(crate) fn norm_backward<T: Element>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    saved: &NormSaved<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let s = x.shape();
    let plane = s.plane();
    let groups = saved.mean.len();
    let group_size = match saved.kind {
        NormKind::Batch => s.n * plane,
        NormKind::Layer => s.c,
    };
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let mut sum_dxhat = vec![T::zero(); groups];
    let mut sum_dxhat_xhat = vec![T::zero(); groups];
    let xhat = |n: usize, c: usize, p: usize| {
        let k = stat_index(saved.kind, s, n, c, p);
        (x.data()[(n * s.c + c) * plane + p] - saved.mean[k]) * saved.inv_std[k]
    };
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for p in 0..plane {
                let g = dy.data()[o + p];
                let xh = xhat(n, c, p);
                dgamma[c] += g * xh;
                dbeta[c] += g;
                let k = stat_index(saved.kind, s, n, c, p);
                let dxh = g * gamma.data()[c];
                sum_dxhat[k] += dxh;
                sum_dxhat_xhat[k] += dxh * xh;
            }
        }
    }
    let mut dx = Tensor4::zeros(s);
    let m = T::from_usize(group_size).expect("group size");
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for p in 0..plane {
                let k = stat_index(saved.kind, s, n, c, p);
                let dxh = dy.data()[o + p] * gamma.data()[c];
                dx.data_mut()[o + p] = if saved.from_input {
                    saved.inv_std[k] / m * (m * dxh - sum_dxhat[k] - xhat(n, c, p) * sum_dxhat_xhat[k])
                } else {
                    dxh * saved.inv_std[k]
                };
            }
        }
    }
    let bshape = bias_like(s.c);
    (
        dx,
        Tensor4::from_vec(bshape, dgamma).expect("shape"),
        Tensor4::from_vec(bshape, dbeta).expect("shape"),
    )
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU: `x * Phi(x)`.
pub fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    x * half * (T::one() + (x * T::from_f64_lossy(INV_SQRT_2)).erf())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(INV_SQRT_2)).erf());
    let pdf = T::from_f64_lossy(INV_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

pub fn activation<T: Element>(tape: &mut Tape<T>, x: Var, kind: ActivationKind) -> Var {
    let y = match kind {
        ActivationKind::Gelu => tape.value(x).map(gelu),
        ActivationKind::Relu => tape.value(x).map(|v| v.max(T::zero())),
    };
    tape.push(y, Op::Activation { x, kind })
}

pub(crate) fn activation_backward<T: Element>(x: &Tensor4<T>, kind: ActivationKind, dy: &Tensor4<T>) -> Tensor4<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| match kind {
            ActivationKind::Gelu => g * gelu_grad(v),
            ActivationKind::Relu => {
                if v > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
        })
        .collect();
    Tensor4::from_vec(x.shape(), data).expect("shape")
}

/// Mean over each channel plane, producing `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let s = xv.shape();
    let plane = s.plane();
    let inv = T::one() / T::from_usize(plane).expect("plane");
    let data = xv.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    let y = Tensor4::from_vec(Shape4 { n: s.n, c: s.c, h: 1, w: 1 }, data).expect("shape");
    tape.push(y, Op::GlobalAvgPool(x))
}

pub(crate) fn global_avg_pool_backward<T: Element>(shape: Shape4, dy: &Tensor4<T>) -> Tensor4<T> {
    let plane = shape.plane();
    let inv = T::one() / T::from_usize(plane).expect("plane");
    let mut data = Vec::with_capacity(shape.numel());
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor4::from_vec(shape, data).expect("shape")
}

/// Affine head: `x (n,h,1,1)`, `weight (classes,h,1,1)`, `bias (1,classes,1,1)` -> `(n,classes,1,1)`.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(weight);
    if xs.h != 1 || xs.w != 1 {
        return Err(Error::Shape(format!("linear expects pooled features, got {xs}")));
    }
    if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::Shape(format!("linear weight {ws} does not match {} features", xs.c)));
    }
    let classes = ws.n;
    expect_param_shape(tape, bias, bias_like(classes), "linear bias")?;
    let mut y = Tensor4::zeros(Shape4 {
        n: xs.n,
        c: classes,
        h: 1,
        w: 1,
    });
    for out in y.data_mut().chunks_mut(classes) {
        out.copy_from_slice(tape.value(bias).data());
    }
    T::gemm(
        xs.n,
        xs.c,
        classes,
        T::one(),
        tape.value(x).data(),
        xs.c,
        1,
        tape.value(weight).data(),
        1,
        xs.c,
        T::one(),
        y.data_mut(),
        classes,
        1,
    );
    Ok(tape.push(y, Op::Linear { x, w: weight, b: bias }))
}

pub(crate) fn linear_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let (n, h) = (x.shape().n, x.shape().c);
    let classes = w.shape().n;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    T::gemm(n, classes, h, T::one(), dy.data(), classes, 1, w.data(), h, 1, T::zero(), dx.data_mut(), h, 1);
    T::gemm(classes, n, h, T::one(), dy.data(), 1, classes, x.data(), h, 1, T::zero(), dw.data_mut(), h, 1);
    let mut db = vec![T::zero(); classes];
    for row in dy.data().chunks(classes) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (dx, dw, Tensor4::from_vec(bias_like(classes), db).expect("shape"))
}

/// Row-wise softmax of `(n, classes)` logits, max-subtracted.
pub fn softmax_rows<T: Element>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits);
    if s.h != 1 || s.w != 1 || labels.len() != s.n {
        return Err(Error::Shape(format!(
            "cross_entropy: logits {s} vs {} labels",
            labels.len()
        )));
    }
    let classes = s.c;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let lv = tape.value(logits).data();
    let mut total = 0.0f64;
    for (row, &label) in lv.chunks(classes).zip(labels) {
        let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
        total += lse - row[label].as_f64();
    }
    let probs = softmax_rows(lv, classes);
    let loss = Tensor4::scalar(T::from_f64_lossy(total / s.n as f64));
    Ok(tape.push(
        loss,
        Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        },
    ))
}

pub(crate) fn cross_entropy_backward<T: Element>(shape: Shape4, labels: &[usize], probs: &[T], upstream: T) -> Tensor4<T> {
    let classes = shape.c;
    let scale = upstream / T::from_usize(shape.n).expect("batch");
    let mut g: Vec<T> = probs.to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * classes + l] -= T::one();
    }
    g.iter_mut().for_each(|v| *v *= scale);
    Tensor4::from_vec(shape, g).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_dims(dims, v).unwrap()
    }

    #[test]
    fn patch_embed_shape_for_cifar_config() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor4::alloc_dims([2, 3, 32, 32], Fill::Constant(0.5)).unwrap());
        let w = tape.leaf(Tensor4::alloc_dims([256, 3, 2, 2], Fill::Kaiming { fan_in: 12, seed: 1 }).unwrap());
        let b = tape.leaf(Tensor4::alloc_dims([1, 256, 1, 1], Fill::Constant(0.0)).unwrap());
        let y = patch_embed(&mut tape, x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y).dims(), [2, 256, 16, 16]);
    }

    #[test]
    fn patch_embed_rejects_indivisible_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor4::alloc_dims([1, 1, 5, 4], Fill::Constant(1.0)).unwrap());
        let w = tape.leaf(Tensor4::alloc_dims([1, 1, 2, 2], Fill::Constant(1.0)).unwrap());
        let b = tape.leaf(Tensor4::alloc_dims([1, 1, 1, 1], Fill::Constant(0.0)).unwrap());
        assert!(matches!(patch_embed(&mut tape, x, w, b, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn depthwise_identity_kernel_and_even_k() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor4::alloc_dims([2, 3, 4, 5], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 3 }).unwrap();
        let x = tape.leaf(xv.clone());
        let w = tape.leaf(t([3, 1, 1, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
        let b = tape.leaf(Tensor4::zeros(bias_like(3)));
        let y = depthwise1d(&mut tape, x, w, b, Axis::Width).unwrap();
        assert_eq!(tape.value(y), &xv);

        let w_even = tape.leaf(Tensor4::zeros(Shape4::new(3, 1, 1, 4).unwrap()));
        assert!(matches!(
            depthwise1d(&mut tape, x, w_even, b, Axis::Width),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let xv = Tensor4::<f64>::alloc_dims([1, 3, 4, 4], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 9 }).unwrap();
        let wv = Tensor4::<f64>::alloc_dims([3, 1, 3, 1], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 10 }).unwrap();
        let run = |w: Tensor4<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let w = tape.leaf(w);
            let b = tape.leaf(Tensor4::zeros(bias_like(3)));
            let y = depthwise1d(&mut tape, x, w, b, Axis::Height).unwrap();
            tape.value(y).clone()
        };
        let base = run(wv.clone());
        let mut perturbed = wv;
        perturbed.data_mut()[0] += 0.5;
        let moved = run(perturbed);
        assert_ne!(base.plane(0, 0), moved.plane(0, 0));
        for c in 1..3 {
            assert_eq!(base.plane(0, c), moved.plane(0, c));
        }
    }

    #[test]
    fn pointwise_full_range_is_channel_mixing_and_slice_errors() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor4::alloc_dims([1, 4, 2, 2], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 4 }).unwrap();
        let x = tape.leaf(xv.clone());
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let w = tape.leaf(t([4, 4, 1, 1], eye));
        let b = tape.leaf(Tensor4::zeros(bias_like(4)));
        let y = pointwise_slice(&mut tape, x, w, b, 0..4).unwrap();
        assert_eq!(tape.value(y), &xv);
        assert!(matches!(pointwise_slice(&mut tape, x, w, b, 2..2), Err(Error::Shape(_))));
        assert!(matches!(pointwise_slice(&mut tape, x, w, b, 1..5), Err(Error::Shape(_))));
    }

    fn bn_run(values: Vec<f64>, dims: [usize; 4], gamma: f64, beta: f64) -> Tensor4<f64> {
        let mut store = ParamStore::new();
        let mut state = NormState::register(&mut store, "bn", NormKind::Batch, dims[1]).unwrap();
        store.value_mut(state.gamma).data_mut().fill(gamma);
        store.value_mut(state.beta).data_mut().fill(beta);
        let mut tape = Tape::new();
        let x = tape.leaf(t(dims, values));
        let y = state.apply(&mut tape, &store, x, Mode::Train).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn batchnorm_hand_values() {
        let y = bn_run(vec![5.0; 8], [2, 1, 2, 2], 1.0, 0.0);
        assert!(y.data().iter().all(|v| v.abs() <= 1e-3));

        let y = bn_run(vec![1.0, 3.0], [2, 1, 1, 1], 1.0, 0.0);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!((expect - 0.999995).abs() < 1e-6);

        let y = bn_run(vec![1.0, 2.0, 7.0, -3.0], [2, 1, 1, 2], 0.0, 5.0);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_only() {
        let mut store = ParamStore::<f64>::new();
        let mut state = NormState::register(&mut store, "bn", NormKind::Batch, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![3.0, -1.0]));
        let y = state.apply(&mut tape, &store, x, Mode::Eval).unwrap();
        // initial running stats: mean 0, var 1
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(tape.value(y).data(), &[3.0 * s, -s]);
        assert_eq!(state.running_mean, vec![0.0]);
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut store = ParamStore::<f64>::new();
        let mut state = NormState::register(&mut store, "bn", NormKind::Batch, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 1], vec![3.0]));
        assert!(state.apply(&mut tape, &store, x, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut state = NormState::register(&mut store, "bn", NormKind::Batch, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t([2, 1, 1, 1], vec![1.0, 3.0]));
        state.apply(&mut tape, &store, x, Mode::Train).unwrap();
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance of {1,3} is 2
        assert!((state.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn layernorm_normalizes_each_position_over_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut state = NormState::register(&mut store, "ln", NormKind::Layer, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::alloc_dims([2, 3, 2, 2], Fill::Uniform { lo: -2.0, hi: 2.0, seed: 5 }).unwrap());
        let y = state.apply(&mut tape, &store, x, Mode::Train).unwrap();
        let yv = tape.value(y);
        for n in 0..2 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let vals: Vec<f64> = (0..3).map(|c| yv.at(n, c, yy, xx)).collect();
                    let mu = vals.iter().sum::<f64>() / 3.0;
                    assert!(mu.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-9);
        assert!((gelu(10.0f64) / 10.0 - 1.0).abs() < 1e-9);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 1, 1], vec![-1.0]));
        let r = activation(&mut tape, x, ActivationKind::Relu);
        assert_eq!(tape.value(r).data(), &[0.0]);
    }

    #[test]
    fn pooling_hand_values_and_linearity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let p = global_avg_pool(&mut tape, x);
        assert_eq!(tape.value(p).data(), &[2.5]);

        let c = tape.leaf(Tensor4::alloc_dims([1, 2, 3, 3], Fill::Constant(3.0)).unwrap());
        let p = global_avg_pool(&mut tape, c);
        assert_eq!(tape.value(p).data(), &[3.0, 3.0]);

        let r = tape.leaf(t([1, 1, 2, 2], vec![0.5, 1.5, -2.0, 8.0]));
        let a = global_avg_pool(&mut tape, r);
        let a = tape.scale(a, 4.0);
        let s = tape.scale(r, 4.0);
        let b = global_avg_pool(&mut tape, s);
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::<f64>::new();
        let feats = t([2, 3, 1, 1], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = tape.leaf(feats.clone());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(t([3, 3, 1, 1], eye));
        let b = tape.leaf(Tensor4::zeros(bias_like(3)));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), feats.data());

        let wz = tape.leaf(Tensor4::zeros(Shape4::new(2, 3, 1, 1).unwrap()));
        let bz = tape.leaf(t([1, 2, 1, 1], vec![0.25, -0.75]));
        let y = linear(&mut tape, x, wz, bz).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -0.75, 0.25, -0.75]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut store = ParamStore::new();
        let w = store.register("w", t([2, 3, 1, 1], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]), true);
        let b = store.register("b", Tensor4::zeros(bias_like(2)), false);
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 3, 1, 1], vec![1.0, -2.0, 3.0]));
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = linear(&mut tape, x, wv, bv).unwrap();
        // loss = 2*y0 + 5*y1  => dlogits = (2, 5)
        let coeff = tape.leaf(t([1, 2, 1, 1], vec![2.0, 5.0]));
        let m = tape.mul(y, coeff).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g.param(w).data(), &[2.0, -4.0, 6.0, 5.0, -10.0, 15.0]);
        assert_eq!(g.param(b).data(), &[2.0, 5.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor4::zeros(Shape4::new(3, 10, 1, 1).unwrap()));
        let loss = cross_entropy(&mut tape, l, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut v = vec![0.0; 10];
        v[3] = 1e4;
        let l = tape.leaf(t([1, 10, 1, 1], v));
        let loss = cross_entropy(&mut tape, l, &[3]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);

        assert!(matches!(cross_entropy(&mut tape, l, &[10]), Err(Error::Data(_))));
    }

    #[test]
    fn permutation_round_trip() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor4::alloc_dims([2, 4, 1, 2], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
        let x = tape.leaf(xv.clone());
        let y = permute_channels(&mut tape, x, &[2, 0, 3, 1]).unwrap();
        assert_eq!(tape.value(y).plane(1, 0), xv.plane(1, 2));
        assert!(permute_channels(&mut tape, x, &[0, 0, 1, 2]).is_err());
        let mut inv = vec![0; 4];
        for (c, &p) in [2usize, 0, 3, 1].iter().enumerate() {
            inv[p] = c;
        }
        let z = permute_channels(&mut tape, y, &inv).unwrap();
        assert_eq!(tape.value(z), &xv);
    }
}
