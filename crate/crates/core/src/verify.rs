//! Independent oracles: central-difference gradients, a naive convolution, and
//! structural equivalence checks between mixer formulations.
//!
//! Oracles run in `f64`. Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.

use std::fmt::Write as _;
use std::ops::Range;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, Axis};
use crate::mixing::{interleave_permutation, Allocation, ChannelMixer, MixVariant, MixerSpec};
use crate::model::{Model, ModelConfig};
use crate::nn::{self, ActivationKind, Mode, NormKind, NormState};
use crate::tensor::{Fill, Shape4, Tensor4};

pub const GRAD_THRESHOLD: f64 = 1e-4;
pub const FORWARD_TOLERANCE: f64 = 1e-6;
/// Separable-kernel comparisons run in `f32` and sum `k` products twice.
pub const SEPARABLE_TOLERANCE: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference estimate at one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// The one-sided slopes disagree by an amount that does not shrink with the step:
    /// `f` is not differentiable here and the estimate should not be compared.
    pub kink: bool,
}

/// Step used at coordinate value `x`.
pub fn step_size(eps: f64, x: f64) -> f64 {
    eps * x.abs().max(1.0)
}

/// Estimates `df/dx_i` for every `i` from central differences at steps `h` and `h/2`,
/// `h = eps * max(1, |x_i|)`, combined by one Richardson step `(4 D(h/2) - D(h)) / 3`
/// so the `h^2` truncation term cancels. Gradients that a following normalization
/// nearly cancels are tiny next to the curvature, and the plain `D(h)` misses them.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<Estimate>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut point = x.to_vec();
    let mut eval = |p: &[f64]| -> Result<f64> {
        let v = f(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Oracle(format!("function value {v} is not finite")))
        }
    };
    let centre = eval(&point)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        let h = step_size(eps, orig);
        let mut at = |delta: f64, point: &mut Vec<f64>| -> Result<f64> {
            point[i] = orig + delta;
            let v = eval(point);
            point[i] = orig;
            v
        };
        let plus = at(h, &mut point)?;
        let minus = at(-h, &mut point)?;
        let plus_half = at(h / 2.0, &mut point)?;
        let minus_half = at(-h / 2.0, &mut point)?;
        let coarse = (plus - minus) / (2.0 * h);
        let fine = (plus_half - minus_half) / h;
        let value = (4.0 * fine - coarse) / 3.0;
        let gap = ((plus - centre) - (centre - minus)).abs() / h;
        let gap_half = ((plus_half - centre) - (centre - minus_half)).abs() / (h / 2.0);
        let kink = gap > 1e-6 * value.abs().max(1.0) && gap_half > 0.75 * gap;
        out.push(Estimate { value, kink });
    }
    Ok(out)
}

/// Agreement of one parameter's analytic gradient with the numeric estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub threshold: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() < self.threshold
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} (threshold {:e}): {}",
            self.label,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(out, "{:<28} {:>12} {:>12} {:>8} {:>8} {:>6}", "param", "max_rel", "mean_rel", "worst", "checked", "kinks");
        for p in &self.params {
            let _ = writeln!(
                out,
                "{:<28} {:>12.3e} {:>12.3e} {:>8} {:>8} {:>6}",
                p.name, p.max_rel, p.mean_rel, p.worst_index, p.checked, p.skipped_kinks
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,param,max_rel,mean_rel,worst_index,checked,skipped_kinks,pass\n");
        for p in &self.params {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{},{},{},{}",
                self.label,
                p.name,
                p.max_rel,
                p.mean_rel,
                p.worst_index,
                p.checked,
                p.skipped_kinks,
                p.max_rel < self.threshold
            );
        }
        out
    }
}

/// Compares tape gradients of a scalar `loss(store)` against central differences over
/// every coordinate of every parameter in `store`.
pub fn gradcheck_store<F>(label: &str, store: &mut ParamStore<f64>, eps: f64, threshold: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        tape.backward(l, store)?
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let x = store.value(id).data().to_vec();
        let estimates = numeric_gradient(
            |p| {
                store.value_mut(id).data_mut().copy_from_slice(p);
                let mut tape = Tape::new();
                let l = loss(&mut tape, store)?;
                Ok(tape.value(l).data()[0])
            },
            &x,
            eps,
        );
        store.value_mut(id).data_mut().copy_from_slice(&x);
        let estimates = estimates?;
        let g = analytic.param(id).data();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel: 0.0,
            mean_rel: 0.0,
            worst_index: 0,
            checked: 0,
            skipped_kinks: 0,
        };
        let mut sum = 0.0;
        for (i, e) in estimates.iter().enumerate() {
            if e.kink {
                check.skipped_kinks += 1;
                continue;
            }
            let r = relative_error(g[i], e.value);
            sum += r;
            check.checked += 1;
            if r > check.max_rel {
                check.max_rel = r;
                check.worst_index = i;
            }
        }
        check.mean_rel = if check.checked > 0 { sum / check.checked as f64 } else { 0.0 };
        params.push(check);
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        threshold,
        params,
    })
}

/// Full-model gradient check on a random batch in train mode.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, batch: usize, input_hw: (usize, usize)) -> Result<GradCheckReport> {
    let model = Model::<f64>::build(*config, seed)?;
    let x = Tensor4::alloc_dims(
        [batch, config.in_channels, input_hw.0, input_hw.1],
        Fill::Uniform {
            lo: 0.0,
            hi: 1.0,
            seed: seed ^ 0xA5A5,
        },
    )?;
    let labels: Vec<usize> = (0..batch).map(|i| (i * 7 + seed as usize) % config.classes).collect();
    let mut store = model.params.clone();
    let label = format!("{} seed {seed}", config.name());
    gradcheck_store(&label, &mut store, 1e-4, GRAD_THRESHOLD, |tape, s| {
        let mut m = model.clone();
        m.params = s.clone();
        let v = tape.leaf(x.clone());
        let logits = m.forward(tape, v, Mode::Train)?;
        nn::cross_entropy(tape, logits, &labels)
    })
}

fn uniform(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    Tensor4::alloc_dims(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).expect("non-zero dims")
}

/// Loss `sum(y * r)` with a fixed random `r`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = uniform(tape.shape(y).dims(), seed ^ 0x51);
    let rv = tape.leaf(r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

/// Gradient checks of every backward rule on random small shapes.
pub fn op_gradchecks(seed: u64) -> Result<Vec<GradCheckReport>> {
    type Build = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId], &[NormState<f64>]) -> Result<Var>>;
    let mut reports = Vec::new();
    let mut run = |label: &str, inputs: Vec<[usize; 4]>, norm: Option<(NormKind, Mode)>, build: Build| -> Result<()> {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .iter()
            .enumerate()
            .map(|(i, &d)| store.register(format!("in{i}"), uniform(d, seed.wrapping_mul(31).wrapping_add(i as u64)), true))
            .collect();
        let mut norms = Vec::new();
        if let Some((kind, mode)) = norm {
            let channels = inputs[0][1];
            let mut n = NormState::register(&mut store, "norm", kind, channels)?;
            let g = uniform([1, channels, 1, 1], seed ^ 0x77).map(|v| 1.0 + 0.5 * v);
            *store.value_mut(n.gamma) = g;
            *store.value_mut(n.beta) = uniform([1, channels, 1, 1], seed ^ 0x78);
            if mode == Mode::Eval {
                n.running_mean = uniform([1, channels, 1, 1], seed ^ 0x79).into_vec();
                n.running_var = uniform([1, channels, 1, 1], seed ^ 0x7A).map(|v| 1.0 + 0.5 * v).into_vec();
            }
            norms.push(n);
        }
        let report = gradcheck_store(&format!("{label} seed {seed}"), &mut store, 1e-4, GRAD_THRESHOLD, |tape, s| {
            let y = build(tape, s, &ids, &norms)?;
            weighted_sum(tape, y, seed)
        })?;
        reports.push(report);
        Ok(())
    };
    let vars = |tape: &mut Tape<f64>, s: &ParamStore<f64>, ids: &[ParamId]| -> Vec<Var> {
        ids.iter().map(|&id| tape.param(s, id)).collect()
    };

    run("add", vec![[2, 3, 2, 2], [2, 3, 2, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        t.add(v[0], v[1])
    }))?;
    run("sub", vec![[2, 3, 2, 2], [2, 3, 2, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        t.sub(v[0], v[1])
    }))?;
    run("mul", vec![[2, 3, 2, 2], [2, 3, 2, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        t.mul(v[0], v[1])
    }))?;
    run("scale", vec![[2, 3, 2, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        Ok(t.scale(v[0], -1.7))
    }))?;
    run("add_channel", vec![[2, 3, 2, 2], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        t.add_channel(v[0], v[1])
    }))?;
    run("mul_channel", vec![[2, 3, 2, 2], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        t.mul_channel(v[0], v[1])
    }))?;
    run("sum", vec![[2, 3, 2, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        Ok(t.sum(v[0]))
    }))?;
    run("patch_embed", vec![[2, 3, 4, 6], [4, 3, 2, 2], [1, 4, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::patch_embed(t, v[0], v[1], v[2], 2)
    }))?;
    run("depthwise_width", vec![[2, 3, 4, 5], [3, 1, 1, 3], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::depthwise1d(t, v[0], v[1], v[2], Axis::Width)
    }))?;
    run("depthwise_height", vec![[2, 3, 5, 4], [3, 1, 5, 1], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::depthwise1d(t, v[0], v[1], v[2], Axis::Height)
    }))?;
    run("depthwise_2d", vec![[2, 3, 4, 4], [3, 1, 3, 3], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::depthwise2d(t, v[0], v[1], v[2])
    }))?;
    run("pointwise_slice", vec![[2, 6, 2, 3], [3, 3, 1, 1], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::pointwise_slice(t, v[0], v[1], v[2], 2..5)
    }))?;
    run("strided_3d", vec![[2, 6, 2, 2], [3, 3, 1, 1], [1, 3, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::strided_channel_conv(t, v[0], v[1], v[2])
    }))?;
    run("permute", vec![[2, 4, 2, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::permute_channels(t, v[0], &[2, 0, 3, 1])
    }))?;
    for (label, kind, mode) in [
        ("batchnorm_train", NormKind::Batch, Mode::Train),
        ("batchnorm_eval", NormKind::Batch, Mode::Eval),
        ("layernorm", NormKind::Layer, Mode::Train),
    ] {
        run(label, vec![[3, 4, 2, 3]], Some((kind, mode)), Box::new(move |t, s, ids, norms| {
            let v = vars(t, s, ids);
            let mut n = norms[0].clone();
            n.apply(t, s, v[0], mode)
        }))?;
    }
    for (label, kind) in [("gelu", ActivationKind::Gelu), ("relu", ActivationKind::Relu)] {
        run(label, vec![[2, 3, 2, 2]], None, Box::new(move |t, s, ids, _| {
            let v = vars(t, s, ids);
            Ok(nn::activation(t, v[0], kind))
        }))?;
    }
    run("global_avg_pool", vec![[2, 3, 3, 2]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        Ok(nn::global_avg_pool(t, v[0]))
    }))?;
    run("linear", vec![[3, 4, 1, 1], [5, 4, 1, 1], [1, 5, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::linear(t, v[0], v[1], v[2])
    }))?;
    run("cross_entropy", vec![[3, 5, 1, 1]], None, Box::new(move |t, s, ids, _| {
        let v = vars(t, s, ids);
        nn::cross_entropy(t, v[0], &[4, 0, 2])
    }))?;
    Ok(reports)
}

/// Naive grouped 2D convolution, PyTorch semantics: weight `(out, in/groups, kh, kw)`.
pub fn conv_bruteforce(
    x: &Tensor4<f64>,
    weight: &Tensor4<f64>,
    bias: Option<&[f64]>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<Tensor4<f64>> {
    let xs = x.shape();
    let ws = weight.shape();
    if groups == 0 || !xs.c.is_multiple_of(groups) || !ws.n.is_multiple_of(groups) || ws.c * groups != xs.c {
        return Err(Error::Shape(format!("groups={groups} incompatible with input {xs} and weight {ws}")));
    }
    if stride.0 == 0 || stride.1 == 0 || xs.h + 2 * padding.0 < ws.h || xs.w + 2 * padding.1 < ws.w {
        return Err(Error::Shape("kernel larger than padded input or zero stride".into()));
    }
    if bias.is_some_and(|b| b.len() != ws.n) {
        return Err(Error::Shape("bias length differs from output channels".into()));
    }
    let oh = (xs.h + 2 * padding.0 - ws.h) / stride.0 + 1;
    let ow = (xs.w + 2 * padding.1 - ws.w) / stride.1 + 1;
    let out_per_group = ws.n / groups;
    let mut y = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow)?);
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g = o / out_per_group;
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..ws.c {
                        let ic = g * ws.c + ci;
                        for a in 0..ws.h {
                            for b in 0..ws.w {
                                let iy = (r * stride.0 + a) as isize - padding.0 as isize;
                                let ix = (c * stride.1 + b) as isize - padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += weight.at(o, ci, a, b) * x.at(n, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.set(n, o, r, c, acc);
                }
            }
        }
    }
    Ok(y)
}

fn channels(x: &Tensor4<f64>, range: Range<usize>) -> Tensor4<f64> {
    let s = x.shape();
    let mut data = Vec::new();
    for n in 0..s.n {
        for c in range.clone() {
            data.extend_from_slice(x.plane(n, c));
        }
    }
    Tensor4::from_dims([s.n, range.len(), s.h, s.w], data).expect("non-empty range")
}

fn put_channel(dst: &mut Tensor4<f64>, dst_c: usize, src: &Tensor4<f64>, src_c: usize) {
    let s = dst.shape();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                dst.set(n, dst_c, y, x, src.at(n, src_c, y, x));
            }
        }
    }
}

/// Optimized convolution kernels that [`conv_oracle_case`] exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    Patch,
    DepthwiseWidth,
    DepthwiseHeight,
    PointwiseSlice,
    Strided3d,
}

impl ConvPath {
    pub const ALL: [ConvPath; 5] = [
        ConvPath::Patch,
        ConvPath::DepthwiseWidth,
        ConvPath::DepthwiseHeight,
        ConvPath::PointwiseSlice,
        ConvPath::Strided3d,
    ];
}

/// Runs one random small instance of `path` through the optimized `f32` kernel and the
/// `f64` naive convolution; returns the max absolute difference.
pub fn conv_oracle_case(path: ConvPath, seed: u64) -> Result<f64> {
    let pick = |lo: usize, hi: usize, salt: u64| -> usize {
        let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z ^= z >> 31;
        lo + (z % (hi - lo + 1) as u64) as usize
    };
    let rand32 = |dims: [usize; 4], salt: u64| -> Tensor4<f32> {
        Tensor4::alloc_dims(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed: seed ^ salt }).expect("dims")
    };
    let n = pick(1, 2, 1);
    let c = pick(1, 4, 2);
    let k = 2 * pick(1, 3, 3) + 1;
    let (fast, oracle) = match path {
        ConvPath::Patch => {
            let p = pick(1, 3, 4);
            let h = pick(1, 4, 5);
            let x = rand32([n, c, p * pick(1, 4, 6), p * pick(1, 4, 7)], 11);
            let w = rand32([h, c, p, p], 12);
            let b = rand32([1, h, 1, 1], 13);
            let fast = kernels::patch_embed_forward(&x, &w, &b, p);
            let b64: Vec<f64> = b.cast::<f64>().into_vec();
            (fast, conv_bruteforce(&x.cast(), &w.cast(), Some(&b64), (p, p), (0, 0), 1)?)
        }
        ConvPath::DepthwiseWidth | ConvPath::DepthwiseHeight => {
            let x = rand32([n, c, pick(1, 9, 8), pick(1, 9, 9)], 11);
            let dims = if path == ConvPath::DepthwiseWidth { [c, 1, 1, k] } else { [c, 1, k, 1] };
            let w = rand32(dims, 12);
            let b = rand32([1, c, 1, 1], 13);
            let fast = kernels::depthwise_forward(&x, &w, &b);
            let pad = if path == ConvPath::DepthwiseWidth { (0, k / 2) } else { (k / 2, 0) };
            let b64: Vec<f64> = b.cast::<f64>().into_vec();
            (fast, conv_bruteforce(&x.cast(), &w.cast(), Some(&b64), (1, 1), pad, c)?)
        }
        ConvPath::PointwiseSlice => {
            let h = pick(2, 8, 8);
            let start = pick(0, h - 1, 9);
            let d = pick(1, h - start, 10);
            let x = rand32([n, h, pick(1, 5, 14), pick(1, 5, 15)], 11);
            let w = rand32([d, d, 1, 1], 12);
            let b = rand32([1, d, 1, 1], 13);
            let fast = kernels::pointwise_slice_forward(&x, &w, &b, start);
            let x64 = x.cast::<f64>();
            let b64: Vec<f64> = b.cast::<f64>().into_vec();
            let mixed = conv_bruteforce(&channels(&x64, start..start + d), &w.cast(), Some(&b64), (1, 1), (0, 0), 1)?;
            let mut oracle = x64.clone();
            for j in 0..d {
                put_channel(&mut oracle, start + j, &mixed, j);
            }
            (fast, oracle)
        }
        ConvPath::Strided3d => {
            let d = pick(1, 4, 8);
            let s = pick(1, 4, 9);
            let x = rand32([n, d * s, pick(1, 5, 14), pick(1, 5, 15)], 11);
            let w = rand32([d, d, 1, 1], 12);
            let b = rand32([1, d, 1, 1], 13);
            let fast = kernels::strided3d_forward(&x, &w, &b);
            let x64 = x.cast::<f64>();
            let b64: Vec<f64> = b.cast::<f64>().into_vec();
            let mut oracle = Tensor4::zeros(x64.shape());
            for i in 0..s {
                let seg = conv_bruteforce(&channels(&x64, i * d..(i + 1) * d), &w.cast(), Some(&b64), (1, 1), (0, 0), 1)?;
                for j in 0..d {
                    put_channel(&mut oracle, j * s + i, &seg, j);
                }
            }
            (fast, oracle)
        }
    };
    fast.cast::<f64>().max_abs_diff(&oracle)
}

/// Builds a III mixer and a 3D mixer sharing one random weight, feeds both the same
/// random input and compares the 3D output with the permuted III output.
pub fn check_iii_equiv_3d(h: usize, s: usize, seed: u64) -> Result<f64> {
    equiv_3d_impl(h, s, seed, true, false)
}

/// [`check_iii_equiv_3d`] with extra knobs: `permute = false` skips the interleave
/// (a negative control); `identity` uses identity weights and zero biases.
pub fn equiv_3d_impl(h: usize, s: usize, seed: u64, permute: bool, identity: bool) -> Result<f64> {
    let spec = |variant| MixerSpec {
        variant,
        h,
        alpha: None,
        segments: Some(s),
        block_index: 0,
    };
    let mut store = ParamStore::<f64>::new();
    let iii = ChannelMixer::register(&mut store, "iii", spec(MixVariant::III), Allocation::All, seed)?;
    let conv = ChannelMixer::register(&mut store, "conv3d", spec(MixVariant::Conv3D), Allocation::All, seed)?;
    let shared = iii.sets[0].expect("allocated");
    let other = conv.sets[0].expect("allocated");
    let d = h / s;
    let (w, b) = if identity {
        let mut w = Tensor4::zeros(Shape4::new(d, d, 1, 1)?);
        for i in 0..d {
            w.set(i, i, 0, 0, 1.0);
        }
        (w, Tensor4::zeros(Shape4::new(1, d, 1, 1)?))
    } else {
        (uniform([d, d, 1, 1], seed ^ 0x3D), uniform([1, d, 1, 1], seed ^ 0x3E))
    };
    for p in [shared, other] {
        *store.value_mut(p.weight) = w.clone();
        *store.value_mut(p.bias) = b.clone();
    }
    let x = uniform([2, h, 3, 3], seed ^ 0x3F);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let a = iii.forward(&mut tape, &store, xv)?;
    let c = conv.forward(&mut tape, &store, xv)?;
    let a = if permute {
        let perm = interleave_permutation(h, s)?;
        nn::permute_channels(&mut tape, a, &perm)?
    } else {
        a
    };
    tape.value(a).max_abs_diff(tape.value(c))
}

/// How the two 1D kernels of [`check_separable_with`] are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeparableCase {
    /// Random `u`, `v`; the 2D kernel is `v u^T`.
    Rank1,
    /// `u` is a centred one-hot.
    OneHotWidth,
    /// The 2D kernel is an unrelated random full-rank matrix (negative control).
    FullRank,
}

/// Width conv with `u` then height conv with `v`, versus one 2D depthwise conv, in `f32`.
pub fn check_separable(k: usize, h: usize, seed: u64) -> Result<f64> {
    check_separable_with(k, h, seed, SeparableCase::Rank1)
}

pub fn check_separable_with(k: usize, h: usize, seed: u64, case: SeparableCase) -> Result<f64> {
    let rand = |dims: [usize; 4], salt: u64| -> Result<Tensor4<f32>> {
        Tensor4::alloc_dims(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed: seed ^ salt })
    };
    let mut u = rand([h, 1, 1, k], 1)?;
    let v = rand([h, 1, k, 1], 2)?;
    if case == SeparableCase::OneHotWidth {
        u = Tensor4::zeros(u.shape());
        for c in 0..h {
            u.set(c, 0, 0, k / 2, 1.0);
        }
    }
    let mut full = Tensor4::zeros(Shape4::new(h, 1, k, k)?);
    for c in 0..h {
        for a in 0..k {
            for b in 0..k {
                full.set(c, 0, a, b, v.at(c, 0, a, 0) * u.at(c, 0, 0, b));
            }
        }
    }
    if case == SeparableCase::FullRank {
        full = rand([h, 1, k, k], 3)?;
    }
    let zero = Tensor4::zeros(Shape4::new(1, h, 1, 1)?);
    let x = rand([2, h, k + 3, k + 4], 4)?;
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x);
    let (uv, vv, fv, bv) = (tape.leaf(u), tape.leaf(v), tape.leaf(full), tape.leaf(zero));
    let wide = nn::depthwise1d(&mut tape, xv, uv, bv, Axis::Width)?;
    let composed = nn::depthwise1d(&mut tape, wide, vv, bv, Axis::Height)?;
    let direct = nn::depthwise2d(&mut tape, xv, fv, bv)?;
    tape.value(composed).max_abs_diff(tape.value(direct))
}
