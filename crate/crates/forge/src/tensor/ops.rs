//! Forward implementations of the differentiable primitives.
//!
//! Every function validates shapes, computes the forward value, and records
//! the op on the tape so [`Tape::backward`](super::Tape::backward) can replay
//! it. Functions taking an axis or geometry return descriptive errors rather
//! than panicking.

use super::tape::{ConvGeom, Op, PoolGeom};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{ForgeError, Result};

pub fn add<S: Scalar>(t: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    if t.shape(a) != t.shape(b) {
        return Err(ForgeError::shape(format!(
            "add operands differ: {:?} vs {:?}",
            t.shape(a),
            t.shape(b)
        )));
    }
    let data: Vec<S> = t.data(a).iter().zip(t.data(b)).map(|(x, y)| *x + *y).collect();
    let shape = t.shape(a).to_vec();
    let out = t.output(data, shape, &[a, b]);
    t.record(Op::Add { a, b, out }, out);
    Ok(out)
}

/// Hadamard product.
pub fn mul<S: Scalar>(t: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    if t.shape(a) != t.shape(b) {
        return Err(ForgeError::shape(format!(
            "mul operands differ: {:?} vs {:?}",
            t.shape(a),
            t.shape(b)
        )));
    }
    let data: Vec<S> = t.data(a).iter().zip(t.data(b)).map(|(x, y)| *x * *y).collect();
    let shape = t.shape(a).to_vec();
    let out = t.output(data, shape, &[a, b]);
    t.record(Op::Mul { a, b, out }, out);
    Ok(out)
}

/// Multiply by a constant.
pub fn scale<S: Scalar>(t: &mut Tape<S>, x: Var, c: f64) -> Var {
    let c = S::from_f64(c);
    let data: Vec<S> = t.data(x).iter().map(|v| *v * c).collect();
    let shape = t.shape(x).to_vec();
    let out = t.output(data, shape, &[x]);
    t.record(Op::Scale { x, c, out }, out);
    out
}

/// Add a constant to every element.
pub fn add_const<S: Scalar>(t: &mut Tape<S>, x: Var, c: f64) -> Var {
    let c = S::from_f64(c);
    let data: Vec<S> = t.data(x).iter().map(|v| *v + c).collect();
    let shape = t.shape(x).to_vec();
    let out = t.output(data, shape, &[x]);
    t.record(Op::AddConst { x, out }, out);
    out
}

pub fn relu<S: Scalar>(t: &mut Tape<S>, x: Var) -> Var {
    let data: Vec<S> = t.data(x).iter().map(|v| v.maxv(S::ZERO)).collect();
    let shape = t.shape(x).to_vec();
    let out = t.output(data, shape, &[x]);
    t.record(Op::Relu { x, out }, out);
    out
}

/// Sum every element into a scalar.
pub fn sum<S: Scalar>(t: &mut Tape<S>, x: Var) -> Var {
    let mut acc = S::ZERO;
    for v in t.data(x) {
        acc += *v;
    }
    let out = t.output(vec![acc], vec![1], &[x]);
    t.record(Op::Sum { x, out }, out);
    out
}

/// Mean of every element.
pub fn mean<S: Scalar>(t: &mut Tape<S>, x: Var) -> Var {
    let n = t.numel(x) as f64;
    let s = sum(t, x);
    scale(t, s, 1.0 / n)
}

/// Pick one element as a 1-element tensor.
pub fn index<S: Scalar>(t: &mut Tape<S>, x: Var, i: usize) -> Result<Var> {
    if i >= t.numel(x) {
        return Err(ForgeError::shape(format!("index {} out of range {}", i, t.numel(x))));
    }
    let v = t.data(x)[i];
    let out = t.output(vec![v], vec![1], &[x]);
    t.record(Op::Index { x, i, out }, out);
    Ok(out)
}

/// Multiply a tensor by a 1-element tensor.
pub fn scale_by_scalar<S: Scalar>(t: &mut Tape<S>, x: Var, s: Var) -> Result<Var> {
    if t.numel(s) != 1 {
        return Err(ForgeError::shape(format!("scale_by_scalar needs a scalar, got {:?}", t.shape(s))));
    }
    let sv = t.data(s)[0];
    let data: Vec<S> = t.data(x).iter().map(|v| *v * sv).collect();
    let shape = t.shape(x).to_vec();
    let out = t.output(data, shape, &[x, s]);
    t.record(Op::ScaleByScalar { x, s, out }, out);
    Ok(out)
}

/// Per-channel scaling along the leading axis: out[c, ..] = x[c, ..] * s[c].
pub fn scale_channels<S: Scalar>(t: &mut Tape<S>, x: Var, s: Var) -> Result<Var> {
    let c = t.shape(x)[0];
    if t.numel(s) != c {
        return Err(ForgeError::shape(format!(
            "channel scale has {} entries, leading axis is {}",
            t.numel(s),
            c
        )));
    }
    let per = t.numel(x) / c;
    let mut data = vec![S::ZERO; t.numel(x)];
    for ci in 0..c {
        let sv = t.data(s)[ci];
        for j in 0..per {
            data[ci * per + j] = t.data(x)[ci * per + j] * sv;
        }
    }
    let shape = t.shape(x).to_vec();
    let out = t.output(data, shape, &[x, s]);
    t.record(Op::ScaleChannels { x, s, out }, out);
    Ok(out)
}

pub fn reshape<S: Scalar>(t: &mut Tape<S>, x: Var, shape: Vec<usize>) -> Result<Var> {
    let numel: usize = shape.iter().product();
    if numel != t.numel(x) {
        return Err(ForgeError::shape(format!(
            "cannot reshape {:?} to {:?}",
            t.shape(x),
            shape
        )));
    }
    let data = t.data(x).to_vec();
    let out = t.output(data, shape, &[x]);
    t.record(Op::Reshape { x, out }, out);
    Ok(out)
}

/// Collapse all axes after the batch axis: [N, ...] -> [N, prod(...)].
pub fn flatten<S: Scalar>(t: &mut Tape<S>, x: Var) -> Result<Var> {
    let shape = t.shape(x);
    if shape.is_empty() {
        return Err(ForgeError::shape("flatten needs a batch axis".to_string()));
    }
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    reshape(t, x, vec![n, rest])
}

pub fn concat<S: Scalar>(t: &mut Tape<S>, xs: &[Var], axis: usize) -> Result<Var> {
    if xs.is_empty() {
        return Err(ForgeError::shape("concat of zero tensors".to_string()));
    }
    let first = t.shape(xs[0]).to_vec();
    if axis >= first.len() {
        return Err(ForgeError::shape(format!("concat axis {} out of range for {:?}", axis, first)));
    }
    let mut total_axis = 0;
    for x in xs {
        let s = t.shape(*x);
        if s.len() != first.len()
            || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(ForgeError::shape(format!(
                "concat operand {:?} incompatible with {:?} on axis {}",
                s, first, axis
            )));
        }
        total_axis += s[axis];
    }
    let mut shape = first.clone();
    shape[axis] = total_axis;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = vec![S::ZERO; shape.iter().product()];
    let mut offset = 0;
    for x in xs {
        let ax = t.shape(*x)[axis];
        for o in 0..outer {
            for a in 0..ax {
                let src = (o * ax + a) * inner;
                let dst = (o * total_axis + offset + a) * inner;
                data[dst..dst + inner].copy_from_slice(&t.data(*x)[src..src + inner]);
            }
        }
        offset += ax;
    }
    let out = t.output(data, shape, xs);
    t.record(Op::Concat { xs: xs.to_vec(), axis, out }, out);
    Ok(out)
}

/// Fully-connected layer: x[N,F] . w[O,F]^T + b[O].
pub fn linear<S: Scalar>(t: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = t.shape(x);
    let ws = t.shape(w);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(ForgeError::shape(format!(
            "linear: input {:?} incompatible with weight {:?}",
            xs, ws
        )));
    }
    let (n, f) = (xs[0], xs[1]);
    let o = ws[0];
    if let Some(b) = b {
        if t.shape(b) != [o] {
            return Err(ForgeError::shape(format!(
                "linear bias {:?}, expected [{}]",
                t.shape(b),
                o
            )));
        }
    }
    let mut data = vec![S::ZERO; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = S::ZERO;
            for k in 0..f {
                acc += t.data(x)[i * f + k] * t.data(w)[j * f + k];
            }
            if let Some(b) = b {
                acc += t.data(b)[j];
            }
            data[i * o + j] = acc;
        }
    }
    let mut inputs = vec![x, w];
    inputs.extend(b);
    let out = t.output(data, vec![n, o], &inputs);
    t.record(Op::Linear { x, w, b, out }, out);
    Ok(out)
}

/// 2-D cross-correlation with stride, symmetric zero padding and channel groups.
///
/// Input [N,Cin,H,W], weight [Cout,Cin/groups,Kh,Kw]. `groups == Cin == Cout`
/// gives depthwise behaviour.
pub fn conv2d<S: Scalar>(
    t: &mut Tape<S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<Var> {
    let xs = t.shape(x).to_vec();
    let ws = t.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(ForgeError::shape(format!(
            "conv2d: input {:?} / weight {:?} must be 4-d",
            xs, ws
        )));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(ForgeError::shape(format!(
            "conv2d: groups {} must divide Cin {} and Cout {}",
            groups, cin, cout
        )));
    }
    if wcin != cin / groups {
        return Err(ForgeError::shape(format!(
            "conv2d: weight expects {} input channels per group, input has {}",
            wcin,
            cin / groups
        )));
    }
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if sh == 0 || sw == 0 {
        return Err(ForgeError::shape("conv2d: zero stride".to_string()));
    }
    if h + 2 * ph < kh || wd + 2 * pw < kw {
        return Err(ForgeError::shape(format!(
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * ph,
            wd + 2 * pw
        )));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (wd + 2 * pw - kw) / sw + 1;
    if let Some(b) = b {
        if t.shape(b) != [cout] {
            return Err(ForgeError::shape(format!(
                "conv2d bias {:?}, expected [{}]",
                t.shape(b),
                cout
            )));
        }
    }

    let cing = cin / groups;
    let coutg = cout / groups;
    let mut data = vec![S::ZERO; n * cout * oh * ow];
    for ni in 0..n {
        for grp in 0..groups {
            for cog in 0..coutg {
                let co = grp * coutg + cog;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = S::ZERO;
                        for cig in 0..cing {
                            let ci = grp * cing + cig;
                            for khi in 0..kh {
                                let ih = ohi * sh + khi;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                let ih = ih - ph;
                                for kwi in 0..kw {
                                    let iw = owi * sw + kwi;
                                    if iw < pw || iw - pw >= wd {
                                        continue;
                                    }
                                    let iw = iw - pw;
                                    acc += t.data(x)[((ni * cin + ci) * h + ih) * wd + iw]
                                        * t.data(w)[((co * cing + cig) * kh + khi) * kw + kwi];
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += t.data(b)[co];
                        }
                        data[((ni * cout + co) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
    }
    let geom = ConvGeom { n, cin, h, w: wd, cout, kh, kw, sh, sw, ph, pw, groups, oh, ow };
    let mut inputs = vec![x, w];
    inputs.extend(b);
    let out = t.output(data, vec![n, cout, oh, ow], &inputs);
    t.record(Op::Conv2d { x, w, b, out, geom }, out);
    Ok(out)
}

fn pool_geom<S: Scalar>(
    t: &Tape<S>,
    x: Var,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<PoolGeom> {
    let xs = t.shape(x);
    if xs.len() != 4 {
        return Err(ForgeError::shape(format!("pool input {:?} must be 4-d", xs)));
    }
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(ForgeError::shape("pool: zero kernel or stride".to_string()));
    }
    if xs[2] < kh || xs[3] < kw {
        return Err(ForgeError::shape(format!(
            "pool kernel {}x{} larger than input {}x{}",
            kh, kw, xs[2], xs[3]
        )));
    }
    Ok(PoolGeom {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh,
        kw,
        sh,
        sw,
        oh: (xs[2] - kh) / sh + 1,
        ow: (xs[3] - kw) / sw + 1,
    })
}

pub fn maxpool2d<S: Scalar>(
    t: &mut Tape<S>,
    x: Var,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Var> {
    let g = pool_geom(t, x, kernel, stride)?;
    let mut data = vec![S::ZERO; g.n * g.c * g.oh * g.ow];
    let mut argmax = vec![0u32; data.len()];
    for n in 0..g.n {
        for c in 0..g.c {
            for oh in 0..g.oh {
                for ow in 0..g.ow {
                    let mut best = None::<(S, usize)>;
                    for kh in 0..g.kh {
                        for kw in 0..g.kw {
                            let idx = ((n * g.c + c) * g.h + oh * g.sh + kh) * g.w + ow * g.sw + kw;
                            let v = t.data(x)[idx];
                            if best.map_or(true, |(bv, _)| v > bv) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("non-empty window");
                    let o = ((n * g.c + c) * g.oh + oh) * g.ow + ow;
                    data[o] = v;
                    argmax[o] = idx as u32;
                }
            }
        }
    }
    let out = t.output(data, vec![g.n, g.c, g.oh, g.ow], &[x]);
    t.record(Op::MaxPool { x, out, argmax }, out);
    Ok(out)
}

pub fn avgpool2d<S: Scalar>(
    t: &mut Tape<S>,
    x: Var,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Var> {
    let g = pool_geom(t, x, kernel, stride)?;
    let inv = S::ONE / S::from_f64((g.kh * g.kw) as f64);
    let mut data = vec![S::ZERO; g.n * g.c * g.oh * g.ow];
    for n in 0..g.n {
        for c in 0..g.c {
            for oh in 0..g.oh {
                for ow in 0..g.ow {
                    let mut acc = S::ZERO;
                    for kh in 0..g.kh {
                        for kw in 0..g.kw {
                            acc += t.data(x)
                                [((n * g.c + c) * g.h + oh * g.sh + kh) * g.w + ow * g.sw + kw];
                        }
                    }
                    data[((n * g.c + c) * g.oh + oh) * g.ow + ow] = acc * inv;
                }
            }
        }
    }
    let out = t.output(data, vec![g.n, g.c, g.oh, g.ow], &[x]);
    t.record(Op::AvgPool { x, out, geom: g }, out);
    Ok(out)
}

/// Average over all spatial positions: [N,C,H,W] -> [N,C].
pub fn global_avgpool<S: Scalar>(t: &mut Tape<S>, x: Var) -> Result<Var> {
    let xs = t.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(ForgeError::shape(format!("global_avgpool input {:?} must be 4-d", xs)));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let inv = S::ONE / S::from_f64(hw as f64);
    let mut data = vec![S::ZERO; n * c];
    for i in 0..n {
        for ci in 0..c {
            let mut acc = S::ZERO;
            for j in 0..hw {
                acc += t.data(x)[(i * c + ci) * hw + j];
            }
            data[i * c + ci] = acc * inv;
        }
    }
    let out = t.output(data, vec![n, c], &[x]);
    t.record(Op::GlobalAvgPool { x, out }, out);
    Ok(out)
}

/// Batch statistics produced by a train-mode batch norm, for updating the
/// running buffers outside the tape.
pub struct BnBatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Batch normalization over the channel axis (axis 1) of a [N,C,...] tensor.
///
/// Train mode normalizes with batch statistics and reports them so the caller
/// can update its running buffers; eval mode normalizes with the provided
/// running statistics. Biased variance is used throughout.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<S: Scalar>(
    t: &mut Tape<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
    train: bool,
) -> Result<(Var, Option<BnBatchStats<S>>)> {
    let xs = t.shape(x).to_vec();
    if xs.len() < 2 {
        return Err(ForgeError::shape(format!("batchnorm input {:?} needs a channel axis", xs)));
    }
    let c = xs[1];
    if t.numel(gamma) != c || t.numel(beta) != c || running_mean.len() != c || running_var.len() != c
    {
        return Err(ForgeError::shape(format!(
            "batchnorm parameter length mismatch for {} channels",
            c
        )));
    }
    let per = t.numel(x) / c;
    let epss = S::from_f64(eps);

    let (mean, var) = if train {
        let mut mean = vec![S::ZERO; c];
        let mut var = vec![S::ZERO; c];
        for_each_channel_idx(&xs, |ci, idx| mean[ci] += t.data(x)[idx]);
        let m = S::from_f64(per as f64);
        for v in mean.iter_mut() {
            *v = *v / m;
        }
        for_each_channel_idx(&xs, |ci, idx| {
            let d = t.data(x)[idx] - mean[ci];
            var[ci] += d * d;
        });
        for v in var.iter_mut() {
            *v = *v / m;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<S> = var.iter().map(|v| S::ONE / (*v + epss).sqrt()).collect();
    let mut data = vec![S::ZERO; t.numel(x)];
    let mut xhat = vec![S::ZERO; t.numel(x)];
    for_each_channel_idx(&xs, |ci, idx| {
        let h = (t.data(x)[idx] - mean[ci]) * inv_std[ci];
        xhat[idx] = h;
        data[idx] = t.data(gamma)[ci] * h + t.data(beta)[ci];
    });
    let out = t.output(data, xs, &[x, gamma, beta]);
    if train {
        t.record(
            Op::BatchNormTrain { x, gamma, beta, out, xhat, inv_std: inv_std.clone() },
            out,
        );
        Ok((out, Some(BnBatchStats { mean, var })))
    } else {
        t.record(Op::BatchNormEval { x, gamma, beta, out, inv_std, mean }, out);
        Ok((out, None))
    }
}

fn for_each_channel_idx(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    for ni in 0..n {
        for ci in 0..c {
            for j in 0..inner {
                f(ci, (ni * c + ci) * inner + j);
            }
        }
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax<S: Scalar>(t: &mut Tape<S>, x: Var) -> Result<Var> {
    let xs = t.shape(x).to_vec();
    let cols = *xs.last().ok_or_else(|| ForgeError::shape("softmax of 0-d tensor".to_string()))?;
    let rows = t.numel(x) / cols;
    let mut data = vec![S::ZERO; t.numel(x)];
    for r in 0..rows {
        let row = &t.data(x)[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for v in row {
            mx = mx.maxv(*v);
        }
        let mut denom = S::ZERO;
        for (j, v) in row.iter().enumerate() {
            let e = (*v - mx).exp();
            data[r * cols + j] = e;
            denom += e;
        }
        for j in 0..cols {
            data[r * cols + j] = data[r * cols + j] / denom;
        }
    }
    let out = t.output(data, xs, &[x]);
    t.record(Op::Softmax { x, out, cols }, out);
    Ok(out)
}

/// Mean cross-entropy between logits [N,C] and class labels.
pub fn cross_entropy<S: Scalar>(t: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let xs = t.shape(logits).to_vec();
    if xs.len() != 2 {
        return Err(ForgeError::shape(format!("cross_entropy logits {:?} must be [N,C]", xs)));
    }
    let (n, c) = (xs[0], xs[1]);
    if labels.len() != n {
        return Err(ForgeError::shape(format!(
            "cross_entropy: {} labels for batch of {}",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(ForgeError::shape(format!(
            "cross_entropy: label {} out of range for {} classes",
            bad, c
        )));
    }
    let mut probs = vec![S::ZERO; n * c];
    let mut loss = S::ZERO;
    for i in 0..n {
        let row = &t.data(logits)[i * c..(i + 1) * c];
        let mut mx = row[0];
        for v in row {
            mx = mx.maxv(*v);
        }
        let mut denom = S::ZERO;
        for (j, v) in row.iter().enumerate() {
            let e = (*v - mx).exp();
            probs[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            probs[i * c + j] = probs[i * c + j] / denom;
        }
        loss -= probs[i * c + labels[i]].ln();
    }
    loss = loss / S::from_f64(n as f64);
    let out = t.output(vec![loss], vec![1], &[logits]);
    t.record(Op::CrossEntropy { logits, labels: labels.to_vec(), out, probs }, out);
    Ok(out)
}

/// Binarize against a threshold: 1 where theta >= threshold, else 0.
/// Ties keep the channel. Backward is the identity straight-through estimator.
pub fn heaviside_ste<S: Scalar>(t: &mut Tape<S>, theta: Var, threshold: f64) -> Var {
    let thr = S::from_f64(threshold);
    let data: Vec<S> =
        t.data(theta).iter().map(|v| if *v >= thr { S::ONE } else { S::ZERO }).collect();
    let shape = t.shape(theta).to_vec();
    let out = t.output(data, shape, &[theta]);
    t.record(Op::HeavisideSte { theta, out }, out);
    out
}

/// Tempered softmax of (logits + noise) / tau.
///
/// With `noise` drawn i.i.d. standard Gumbel this is Gumbel-Softmax sampling;
/// with `noise` omitted it degenerates to the deterministic tempered softmax
/// used on evaluation and export paths.
pub fn gumbel_softmax<S: Scalar>(
    t: &mut Tape<S>,
    logits: Var,
    tau: f64,
    noise: Option<&[S]>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(ForgeError::config(format!("gumbel_softmax: tau must be positive, got {}", tau)));
    }
    let x = match noise {
        Some(g) => {
            if g.len() != t.numel(logits) {
                return Err(ForgeError::shape(format!(
                    "gumbel noise length {} != logits length {}",
                    g.len(),
                    t.numel(logits)
                )));
            }
            let shape = t.shape(logits).to_vec();
            let gv = t.constant(Tensor::from_vec(shape, g.to_vec())?);
            add(t, logits, gv)?
        }
        None => logits,
    };
    let scaled = scale(t, x, 1.0 / tau);
    softmax(t, scaled)
}

/// Draw standard Gumbel samples: -ln(-ln(u)), u ~ U(0,1).
pub fn sample_gumbel<S: Scalar>(rng: &mut impl rand::Rng, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            // Clamp away from 0 and 1 to keep the double log finite.
            let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
            S::from_f64(-(-u.ln()).ln())
        })
        .collect()
}

/// Symmetric min-max fake quantization of a weight tensor.
///
/// s = max|w| / (2^(bits-1) - 1), with s = 1 for an all-zero tensor; values
/// are rounded to the grid and clamped to the signed integer range. Backward
/// passes gradients straight through inside the clamp range.
pub fn fake_quant_weight_minmax<S: Scalar>(t: &mut Tape<S>, w: Var, bits: u32) -> Result<Var> {
    if bits < 2 {
        return Err(ForgeError::config(format!("fake_quant_weight_minmax: bits {} < 2", bits)));
    }
    let qmax = S::from_f64(((1u64 << (bits - 1)) - 1) as f64);
    let qmin = S::from_f64(-((1u64 << (bits - 1)) as f64));
    let mut absmax = S::ZERO;
    for v in t.data(w) {
        absmax = absmax.maxv(v.abs());
    }
    let s = if absmax == S::ZERO { S::ONE } else { absmax / qmax };
    let n = t.numel(w);
    let mut data = vec![S::ZERO; n];
    let mut pass = vec![false; n];
    for (i, v) in t.data(w).iter().enumerate() {
        let q = (*v / s).round_ties();
        pass[i] = q >= qmin && q <= qmax;
        data[i] = q.maxv(qmin).minv(qmax) * s;
    }
    let shape = t.shape(w).to_vec();
    let out = t.output(data, shape, &[w]);
    t.record(Op::FakeQuantMinMax { w, out, pass }, out);
    Ok(out)
}

/// PACT fake quantization of an activation tensor with learned clip `alpha`.
///
/// y = round(clamp(x, 0, alpha) / s) * s with s = alpha / (2^bits - 1).
/// Gradients pass straight through to x inside [0, alpha]; the gradient
/// w.r.t. alpha is 1 where x >= alpha and 0 elsewhere.
pub fn fake_quant_act_pact<S: Scalar>(t: &mut Tape<S>, x: Var, alpha: Var, bits: u32) -> Result<Var> {
    if bits < 2 {
        return Err(ForgeError::config(format!("fake_quant_act_pact: bits {} < 2", bits)));
    }
    if t.numel(alpha) != 1 {
        return Err(ForgeError::shape("pact alpha must be a 1-element tensor".to_string()));
    }
    let a = t.data(alpha)[0];
    if !(a > S::ZERO) {
        return Err(ForgeError::config(format!(
            "pact alpha must be positive, got {}",
            a.to_f64()
        )));
    }
    let levels = S::from_f64(((1u64 << bits) - 1) as f64);
    let s = a / levels;
    let data: Vec<S> = t
        .data(x)
        .iter()
        .map(|v| ((*v).maxv(S::ZERO).minv(a) / s).round_ties() * s)
        .collect();
    let shape = t.shape(x).to_vec();
    let out = t.output(data, shape, &[x, alpha]);
    t.record(Op::FakeQuantPact { x, alpha, out }, out);
    Ok(out)
}
