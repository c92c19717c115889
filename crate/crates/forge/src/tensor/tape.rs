use super::{Scalar, Tensor};
use crate::error::{ForgeError, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Entry<S> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
    /// True if gradients should flow to or through this entry.
    pub tracked: bool,
}

/// Geometry of a recorded convolution, saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

/// One recorded primitive. Saved intermediates live inline.
pub(crate) enum Op<S> {
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    /// out = c * x for a compile-time constant c.
    Scale { x: Var, c: S, out: Var },
    /// out = x + c; gradient passes through unchanged.
    AddConst { x: Var, out: Var },
    Relu { x: Var, out: Var },
    /// Full reduction to a single element.
    Sum { x: Var, out: Var },
    /// out = x[i] as a 1-element tensor.
    Index { x: Var, i: usize, out: Var },
    /// out = x * s where s is a 1-element tensor.
    ScaleByScalar { x: Var, s: Var, out: Var },
    /// out[c, ..] = x[c, ..] * s[c]; s has length shape(x)[0].
    ScaleChannels { x: Var, s: Var, out: Var },
    Reshape { x: Var, out: Var },
    Concat { xs: Vec<Var>, axis: usize, out: Var },
    Linear { x: Var, w: Var, b: Option<Var>, out: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, out: Var, geom: ConvGeom },
    /// argmax holds, per output element, the flat input index of the max.
    MaxPool { x: Var, out: Var, argmax: Vec<u32> },
    AvgPool { x: Var, out: Var, geom: PoolGeom },
    GlobalAvgPool { x: Var, out: Var },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        inv_std: Vec<S>,
        mean: Vec<S>,
    },
    /// Row-wise softmax over the last axis; backward reads the saved output.
    Softmax { x: Var, out: Var, cols: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, out: Var, probs: Vec<S> },
    /// Binarize; backward is the identity straight-through estimator.
    HeavisideSte { theta: Var, out: Var },
    /// Symmetric min-max fake quantization; straight-through inside the clamp range.
    FakeQuantMinMax { w: Var, out: Var, pass: Vec<bool> },
    /// PACT fake quantization with learned clip alpha (1-element tensor).
    FakeQuantPact { x: Var, alpha: Var, out: Var },
}

/// Wengert list: ordered record of executed primitives plus the tensor arena
/// they operate on. Replaying the record backward visits every op exactly once
/// in reverse topological order.
pub struct Tape<S: Scalar = f32> {
    pub(crate) entries: Vec<Entry<S>>,
    pub(crate) ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
    recording: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), ops: Vec::new(), grads: Vec::new(), recording: true, backward_done: false }
    }

    /// A tape that keeps values but records no operations (evaluation mode).
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry { data, shape, tracked: tracked && self.recording });
        self.grads.push(None);
        Var(self.entries.len() - 1)
    }

    /// Record a tensor that does not take gradients.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, false)
    }

    /// Record a trainable leaf.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, true)
    }

    pub(crate) fn output(&mut self, data: Vec<S>, shape: Vec<usize>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.entries[v.0].tracked);
        self.push(data, shape, tracked)
    }

    pub(crate) fn record(&mut self, op: Op<S>, out: Var) {
        if self.recording && self.entries[out.0].tracked {
            self.ops.push(op);
        }
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.entries[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.entries[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.entries[v.0].data.len()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::from_vec(self.shape(v).to_vec(), self.data(v).to_vec()).expect("tape entry is self-consistent")
    }

    /// Scalar value of a 1-element entry.
    pub fn item(&self, v: Var) -> S {
        debug_assert_eq!(self.numel(v), 1);
        self.entries[v.0].data[0]
    }

    /// Number of recorded operations.
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// Number of arena entries.
    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a tracked entry, zeros if nothing flowed to it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![S::ZERO; self.entries[v.0].data.len()],
        }
    }

    fn accumulate(&mut self, v: Var, add: &[S]) {
        if !self.entries[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi += *ai;
                }
            }
            None => self.grads[v.0] = Some(add.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = 1 and
    /// accumulates gradients into every tracked entry that reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(ForgeError::runtime("backward called twice on one tape"));
        }
        if self.numel(loss) != 1 {
            return Err(ForgeError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![S::ONE]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<S>) {
        use Op::*;
        match op {
            Add { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    self.accumulate(*a, &d);
                    self.accumulate(*b, &d);
                }
            }
            Mul { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let da: Vec<S> =
                        d.iter().zip(&self.entries[b.0].data).map(|(d, b)| *d * *b).collect();
                    let db: Vec<S> =
                        d.iter().zip(&self.entries[a.0].data).map(|(d, a)| *d * *a).collect();
                    self.accumulate(*a, &da);
                    self.accumulate(*b, &db);
                }
            }
            Scale { x, c, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<S> = d.iter().map(|d| *d * *c).collect();
                    self.accumulate(*x, &dx);
                }
            }
            AddConst { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    self.accumulate(*x, &d);
                }
            }
            Relu { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<S> = d
                        .iter()
                        .zip(&self.entries[x.0].data)
                        .map(|(d, x)| if *x > S::ZERO { *d } else { S::ZERO })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Sum { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx = vec![d[0]; self.entries[x.0].data.len()];
                    self.accumulate(*x, &dx);
                }
            }
            Index { x, i, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                    dx[*i] = d[0];
                    self.accumulate(*x, &dx);
                }
            }
            ScaleByScalar { x, s, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let sv = self.entries[s.0].data[0];
                    let dx: Vec<S> = d.iter().map(|d| *d * sv).collect();
                    let mut ds = S::ZERO;
                    for (d, x) in d.iter().zip(&self.entries[x.0].data) {
                        ds += *d * *x;
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*s, &[ds]);
                }
            }
            ScaleChannels { x, s, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let c = self.entries[s.0].data.len();
                    let per = self.entries[x.0].data.len() / c;
                    let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                    let mut ds = vec![S::ZERO; c];
                    for ci in 0..c {
                        let sv = self.entries[s.0].data[ci];
                        for j in 0..per {
                            let idx = ci * per + j;
                            dx[idx] = d[idx] * sv;
                            ds[ci] += d[idx] * self.entries[x.0].data[idx];
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*s, &ds);
                }
            }
            Reshape { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    self.accumulate(*x, &d);
                }
            }
            Concat { xs, axis, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let out_shape = self.entries[out.0].shape.clone();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total_axis = out_shape[*axis];
                    let mut offset = 0;
                    for x in xs {
                        let ax = self.entries[x.0].shape[*axis];
                        let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                        for o in 0..outer {
                            for a in 0..ax {
                                let src = (o * total_axis + offset + a) * inner;
                                let dst = (o * ax + a) * inner;
                                dx[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                            }
                        }
                        self.accumulate(*x, &dx);
                        offset += ax;
                    }
                }
            }
            Linear { x, w, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let (n, f) = (self.entries[x.0].shape[0], self.entries[x.0].shape[1]);
                    let o = self.entries[w.0].shape[0];
                    let xd = &self.entries[x.0].data;
                    let wd = &self.entries[w.0].data;
                    // dx = d . W
                    let mut dx = vec![S::ZERO; n * f];
                    for i in 0..n {
                        for j in 0..o {
                            let dij = d[i * o + j];
                            if dij == S::ZERO {
                                continue;
                            }
                            for k in 0..f {
                                dx[i * f + k] += dij * wd[j * f + k];
                            }
                        }
                    }
                    // dw = d^T . x
                    let mut dw = vec![S::ZERO; o * f];
                    for i in 0..n {
                        for j in 0..o {
                            let dij = d[i * o + j];
                            if dij == S::ZERO {
                                continue;
                            }
                            for k in 0..f {
                                dw[j * f + k] += dij * xd[i * f + k];
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*w, &dw);
                    if let Some(b) = b {
                        let mut db = vec![S::ZERO; o];
                        for i in 0..n {
                            for j in 0..o {
                                db[j] += d[i * o + j];
                            }
                        }
                        self.accumulate(*b, &db);
                    }
                }
            }
            Conv2d { x, w, b, out, geom } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let g = geom;
                    let xd = &self.entries[x.0].data;
                    let wd = &self.entries[w.0].data;
                    let cing = g.cin / g.groups;
                    let coutg = g.cout / g.groups;
                    let mut dx = vec![S::ZERO; xd.len()];
                    let mut dw = vec![S::ZERO; wd.len()];
                    for n in 0..g.n {
                        for grp in 0..g.groups {
                            for cog in 0..coutg {
                                let co = grp * coutg + cog;
                                for oh in 0..g.oh {
                                    for ow in 0..g.ow {
                                        let dv = d[((n * g.cout + co) * g.oh + oh) * g.ow + ow];
                                        if dv == S::ZERO {
                                            continue;
                                        }
                                        for cig in 0..cing {
                                            let ci = grp * cing + cig;
                                            for kh in 0..g.kh {
                                                let ih = oh * g.sh + kh;
                                                if ih < g.ph || ih - g.ph >= g.h {
                                                    continue;
                                                }
                                                let ih = ih - g.ph;
                                                for kw in 0..g.kw {
                                                    let iw = ow * g.sw + kw;
                                                    if iw < g.pw || iw - g.pw >= g.w {
                                                        continue;
                                                    }
                                                    let iw = iw - g.pw;
                                                    let xi = ((n * g.cin + ci) * g.h + ih) * g.w + iw;
                                                    let wi =
                                                        ((co * cing + cig) * g.kh + kh) * g.kw + kw;
                                                    dx[xi] += dv * wd[wi];
                                                    dw[wi] += dv * xd[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*w, &dw);
                    if let Some(b) = b {
                        let mut db = vec![S::ZERO; g.cout];
                        for n in 0..g.n {
                            for co in 0..g.cout {
                                for i in 0..g.oh * g.ow {
                                    db[co] += d[(n * g.cout + co) * g.oh * g.ow + i];
                                }
                            }
                        }
                        self.accumulate(*b, &db);
                    }
                }
            }
            MaxPool { x, out, argmax } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += d[o];
                    }
                    self.accumulate(*x, &dx);
                }
            }
            AvgPool { x, out, geom } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let g = geom;
                    let inv = S::ONE / S::from_f64((g.kh * g.kw) as f64);
                    let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                    for n in 0..g.n {
                        for c in 0..g.c {
                            for oh in 0..g.oh {
                                for ow in 0..g.ow {
                                    let dv = d[((n * g.c + c) * g.oh + oh) * g.ow + ow] * inv;
                                    for kh in 0..g.kh {
                                        for kw in 0..g.kw {
                                            let ih = oh * g.sh + kh;
                                            let iw = ow * g.sw + kw;
                                            dx[((n * g.c + c) * g.h + ih) * g.w + iw] += dv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            GlobalAvgPool { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let shape = &self.entries[x.0].shape;
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let inv = S::ONE / S::from_f64(hw as f64);
                    let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                    for i in 0..n {
                        for ci in 0..c {
                            let dv = d[i * c + ci] * inv;
                            for j in 0..hw {
                                dx[(i * c + ci) * hw + j] = dv;
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            BatchNormTrain { x, gamma, beta, out, xhat, inv_std } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let shape = self.entries[x.0].shape.clone();
                    let c = shape[1];
                    let per = self.entries[x.0].data.len() / c;
                    let m = S::from_f64(per as f64);
                    let gd = self.entries[gamma.0].data.clone();
                    let mut dgamma = vec![S::ZERO; c];
                    let mut dbeta = vec![S::ZERO; c];
                    let mut sum_d = vec![S::ZERO; c];
                    let mut sum_dx = vec![S::ZERO; c];
                    for_each_channel(&shape, |ci, idx| {
                        dgamma[ci] += d[idx] * xhat[idx];
                        dbeta[ci] += d[idx];
                        sum_d[ci] += d[idx];
                        sum_dx[ci] += d[idx] * xhat[idx];
                    });
                    let mut dx = vec![S::ZERO; self.entries[x.0].data.len()];
                    for_each_channel(&shape, |ci, idx| {
                        dx[idx] = gd[ci] * inv_std[ci] / m
                            * (m * d[idx] - sum_d[ci] - xhat[idx] * sum_dx[ci]);
                    });
                    self.accumulate(*x, &dx);
                    self.accumulate(*gamma, &dgamma);
                    self.accumulate(*beta, &dbeta);
                }
            }
            BatchNormEval { x, gamma, beta, out, inv_std, mean } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let shape = self.entries[x.0].shape.clone();
                    let c = shape[1];
                    let gd = self.entries[gamma.0].data.clone();
                    let xd = self.entries[x.0].data.clone();
                    let mut dx = vec![S::ZERO; xd.len()];
                    let mut dgamma = vec![S::ZERO; c];
                    let mut dbeta = vec![S::ZERO; c];
                    for_each_channel(&shape, |ci, idx| {
                        dx[idx] = d[idx] * gd[ci] * inv_std[ci];
                        dgamma[ci] += d[idx] * (xd[idx] - mean[ci]) * inv_std[ci];
                        dbeta[ci] += d[idx];
                    });
                    self.accumulate(*x, &dx);
                    self.accumulate(*gamma, &dgamma);
                    self.accumulate(*beta, &dbeta);
                }
            }
            Softmax { x, out, cols } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let od = &self.entries[out.0].data;
                    let rows = od.len() / cols;
                    let mut dx = vec![S::ZERO; od.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = S::ZERO;
                        for j in 0..*cols {
                            dot += d[base + j] * od[base + j];
                        }
                        for j in 0..*cols {
                            dx[base + j] = od[base + j] * (d[base + j] - dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            CrossEntropy { logits, labels, out, probs } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = d[0] / S::from_f64(n as f64);
                    let mut dl = vec![S::ZERO; probs.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == y { S::ONE } else { S::ZERO };
                            dl[i * c + j] = (probs[i * c + j] - ind) * scale;
                        }
                    }
                    self.accumulate(*logits, &dl);
                }
            }
            HeavisideSte { theta, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    // Identity straight-through: the step contributes no jacobian.
                    self.accumulate(*theta, &d);
                }
            }
            FakeQuantMinMax { w, out, pass } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dw: Vec<S> = d
                        .iter()
                        .zip(pass)
                        .map(|(d, p)| if *p { *d } else { S::ZERO })
                        .collect();
                    self.accumulate(*w, &dw);
                }
            }
            FakeQuantPact { x, alpha, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let a = self.entries[alpha.0].data[0];
                    let xd = self.entries[x.0].data.clone();
                    let mut dx = vec![S::ZERO; xd.len()];
                    let mut da = S::ZERO;
                    for (i, &xi) in xd.iter().enumerate() {
                        if xi >= S::ZERO && xi <= a {
                            dx[i] = d[i];
                        }
                        if xi >= a {
                            da += d[i];
                        }
                    }
                    self.accumulate(*x, &dx);
                    self.accumulate(*alpha, &[da]);
                }
            }
        }
    }
}

/// Iterate the elements of a [N,C,...] tensor, reporting (channel, flat index).
fn for_each_channel(shape: &[usize], mut f: impl FnMut(usize, usize)) {
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
