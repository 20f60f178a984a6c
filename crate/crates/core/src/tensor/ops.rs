//! Differentiable ops: forward methods on [`Tape`] and their adjoints.

use super::kernels::{self, ConvGeom};
use super::tape::{Op, Tape, Var};
use super::{Result, Tensor, TensorError, BN_EPS, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel mean and (biased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    /// Fresh running statistics: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward `batch`.
    pub fn update(&mut self, batch: &ChannelStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Numerically safe logistic function, kept strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Contract(format!(
            "{op}: shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mismatch(op: &'static str, dim: &'static str, expected: usize, found: usize) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        dim,
        expected,
        found,
    }
}

impl Tape {
    fn record(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = self.any_grad(&op.inputs());
        Ok(self.push(value, op))
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = self.value(x).dims4(OP)?;
        let [cout, win, kh, kw] = self.value(w).dims4(OP)?;
        if win != cin {
            return Err(mismatch(OP, "C", win, cin));
        }
        if self.value(b).numel() != cout {
            return Err(mismatch(OP, "bias", cout, self.value(b).numel()));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d: stride must be positive".into()));
        }
        if h + 2 * pad < kh {
            return Err(mismatch(OP, "H", kh, h + 2 * pad));
        }
        if wd + 2 * pad < kw {
            return Err(mismatch(OP, "W", kw, wd + 2 * pad));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) {
            return Err(TensorError::Divisibility {
                op: OP,
                what: "H + 2*pad - kh",
                value: h + 2 * pad - kh,
                divisor: stride,
            });
        }
        if !(wd + 2 * pad - kw).is_multiple_of(stride) {
            return Err(TensorError::Divisibility {
                op: OP,
                what: "W + 2*pad - kw",
                value: wd + 2 * pad - kw,
                divisor: stride,
            });
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &g,
        );
        self.record(
            &[n, cout, g.out_h(), g.out_w()],
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "maxpool2x";
        let dims @ [n, c, h, w] = self.value(x).dims4(OP)?;
        for (what, v) in [("H", h), ("W", w)] {
            if v % 2 != 0 {
                return Err(TensorError::Divisibility {
                    op: OP,
                    what,
                    value: v,
                    divisor: 2,
                });
            }
        }
        let (y, argmax) = kernels::maxpool2x(self.value(x).data(), dims);
        self.record(&[n, c, h / 2, w / 2], y, Op::MaxPool2x { x, argmax })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(x).dims4("upsample_nearest2x")?;
        let y = kernels::upsample2x(self.value(x).data(), dims);
        self.record(&[n, c, 2 * h, 2 * w], y, Op::Upsample2x { x })
    }

    /// Non-overlapping `factor×factor` mean pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "avg_pool";
        let dims @ [n, c, h, w] = self.value(x).dims4(OP)?;
        if factor == 0 {
            return Err(TensorError::Contract("avg_pool: factor must be positive".into()));
        }
        for (what, v) in [("H", h), ("W", w)] {
            if v % factor != 0 {
                return Err(TensorError::Divisibility {
                    op: OP,
                    what,
                    value: v,
                    divisor: factor,
                });
            }
        }
        let y = kernels::avgpool(self.value(x).data(), dims, factor);
        self.record(&[n, c, h / factor, w / factor], y, Op::AvgPool { x, factor })
    }

    /// Per-channel batch normalization followed by `gamma·x̂ + beta`.
    ///
    /// In [`BnMode::Train`] the returned statistics are the batch mean and
    /// biased variance; the caller decides whether to fold them into
    /// `running`. A single element per channel normalizes to exactly zero.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &ChannelStats,
        mode: BnMode,
    ) -> Result<(Var, Option<ChannelStats>)> {
        const OP: &str = "batchnorm2d";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        for (dim, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(mismatch(OP, dim, c, self.value(v).numel()));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(mismatch(OP, "running stats", c, running.mean.len()));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xs = self.value(x).data();

        let stats = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xs[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for b in 0..n {
                        for v in &xs[(b * c + ch) * plane..][..plane] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                Some(ChannelStats { mean, var })
            }
            BnMode::Eval => None,
        };
        let used = stats.as_ref().unwrap_or(running);
        let inv_std: Vec<f64> = used.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xs[i] - used.mean[ch]) * inv_std[ch];
                    y[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let var = self.record(
            &[n, c, h, w],
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        )?;
        Ok((var, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        match kind {
            Activation::Relu => {
                let y = src.data().iter().map(|v| v.max(0.0)).collect();
                self.record(&shape, y, Op::Relu { x })
            }
            Activation::Sigmoid => {
                let y = src.data().iter().map(|v| sigmoid(*v)).collect();
                self.record(&shape, y, Op::Sigmoid { x })
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Concatenates rank-4 tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let Some(&first) = xs.first() else {
            return Err(TensorError::Contract("concat_channels: no inputs".into()));
        };
        let [n, _, h, w] = self.value(first).dims4(OP)?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let [vn, vc, vh, vw] = self.value(v).dims4(OP)?;
            for (dim, expected, found) in [("N", n, vn), ("H", h, vh), ("W", w, vw)] {
                if expected != found {
                    return Err(mismatch(OP, dim, expected, found));
                }
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut y = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &c) in xs.iter().zip(&channels) {
                y.extend_from_slice(&self.value(v).data()[b * c * plane..][..c * plane]);
            }
        }
        self.record(&[n, total, h, w], y, Op::Concat { xs: xs.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let y = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let y = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p * q)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, y, Op::Mul { a, b })
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, y, Op::Scale { x, factor })
    }

    /// Multiplies channel plane `c` by `a[c]`. `a` is either `C` (shared across
    /// the batch) or `N×C` (per sample).
    pub fn channel_scale(&mut self, x: Var, a: Var) -> Result<Var> {
        const OP: &str = "channel_scale";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        let per_sample = match self.shape(a) {
            [ac] if *ac == c => false,
            [an, ac] if *an == n && *ac == c => true,
            _ => return Err(mismatch(OP, "scale length", c, self.value(a).numel())),
        };
        let plane = h * w;
        let av = self.value(a).data();
        let y = self
            .value(x)
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let s = if per_sample { av[i] } else { av[i % c] };
                chunk.iter().map(move |v| v * s)
            })
            .collect();
        self.record(&[n, c, h, w], y, Op::ChannelScale { x, a })
    }

    /// Sums each run of `k` adjacent channels into one.
    pub fn channel_group_sum(&mut self, x: Var, k: usize) -> Result<Var> {
        const OP: &str = "channel_group_sum";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if k == 0 || c % k != 0 {
            return Err(TensorError::Divisibility {
                op: OP,
                what: "C",
                value: c,
                divisor: k,
            });
        }
        let plane = h * w;
        let groups = c / k;
        let xs = self.value(x).data();
        let mut y = vec![0.0; n * groups * plane];
        for b in 0..n {
            for z in 0..groups {
                let dst = &mut y[(b * groups + z) * plane..][..plane];
                for i in 0..k {
                    let src = &xs[(b * c + z * k + i) * plane..][..plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        self.record(&[n, groups, h, w], y, Op::ChannelGroupSum { x, k })
    }

    /// Per-channel spatial mean, `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let area = (h * w) as f64;
        let y = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        self.record(&[n, c], y, Op::GlobalAvgPool { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(&[1], vec![s], Op::Sum { x })
    }

    /// Mean binary cross-entropy with `p` clamped to `[eps, 1 − eps]`.
    pub fn bce_loss(&mut self, p: Var, y: Var, eps: f64) -> Result<Var> {
        same_shape("bce_loss", self.value(p), self.value(y))?;
        if !(eps > 0.0 && eps < 0.5) {
            return Err(TensorError::Contract(format!(
                "bce_loss: clamp eps {eps} outside (0, 0.5)"
            )));
        }
        let pv = self.value(p).data();
        let yv = self.value(y).data();
        let total: f64 = pv
            .iter()
            .zip(yv)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln()
            })
            .sum();
        let loss = total / pv.len() as f64;
        self.record(&[1], vec![loss], Op::Bce { p, y, eps })
    }

    /// Mean absolute error.
    pub fn mae_loss(&mut self, p: Var, y: Var) -> Result<Var> {
        same_shape("mae_loss", self.value(p), self.value(y))?;
        let pv = self.value(p).data();
        let yv = self.value(y).data();
        let total: f64 = pv.iter().zip(yv).map(|(p, y)| (p - y).abs()).sum();
        let loss = total / pv.len() as f64;
        self.record(&[1], vec![loss], Op::Mae { p, y })
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient. Inputs that do not require gradient are skipped.
    pub(crate) fn backward_op(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let needs = |v: Var| self.requires_grad(v);
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [n, cin, h, wd] = self.value(*x).dims4("conv2d").expect("checked in forward");
                let [cout, _, kh, kw] = self.value(*w).dims4("conv2d").expect("checked in forward");
                let geom = ConvGeom {
                    n,
                    cin,
                    h,
                    w: wd,
                    cout,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                };
                let grads =
                    kernels::conv2d_backward(val(*x), val(*w), g, &geom, [needs(*x), needs(*w), needs(*b)]);
                out.extend(grads.dx.map(|d| (*x, d)));
                out.extend(grads.dw.map(|d| (*w, d)));
                out.extend(grads.db.map(|d| (*b, d)));
            }
            Op::MaxPool2x { x, argmax } => {
                if needs(*x) {
                    let mut dx = vec![0.0; val(*x).len()];
                    for (&src, &gj) in argmax.iter().zip(g) {
                        dx[src] += gj;
                    }
                    out.push((*x, dx));
                }
            }
            Op::Upsample2x { x } => {
                if needs(*x) {
                    let dims = self.value(*x).dims4("upsample").expect("checked in forward");
                    out.push((*x, kernels::upsample2x_backward(g, dims)));
                }
            }
            Op::AvgPool { x, factor } => {
                if needs(*x) {
                    let dims = self.value(*x).dims4("avg_pool").expect("checked in forward");
                    out.push((*x, kernels::avgpool_backward(g, dims, *factor)));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = self.value(*x).dims4("batchnorm2d").expect("checked in forward");
                let plane = h * w;
                let m = (n * plane) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for j in off..off + plane {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if needs(*x) {
                    let gv = val(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for j in off..off + plane {
                                dx[j] = if *batch_stats {
                                    k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if needs(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let dx = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gj)| if v > 0.0 { gj } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let s = self.nodes[i].value.data();
                    let dx = s.iter().zip(g).map(|(&s, &gj)| gj * s * (1.0 - s)).collect();
                    out.push((*x, dx));
                }
            }
            Op::Concat { xs } => {
                let [n, _, h, w] = self.nodes[i].value.dims4("concat").expect("rank 4");
                let plane = h * w;
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if needs(v) {
                        let mut dx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            dx.extend_from_slice(&g[(b * total + offset) * plane..][..c * plane]);
                        }
                        out.push((v, dx));
                    }
                    offset += c;
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(gj, q)| gj * q).collect()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(gj, p)| gj * p).collect()));
                }
            }
            Op::Scale { x, factor } => {
                if needs(*x) {
                    out.push((*x, g.iter().map(|gj| gj * factor).collect()));
                }
            }
            Op::ChannelScale { x, a } => {
                let [_, c, h, w] = self.value(*x).dims4("channel_scale").expect("rank 4");
                let plane = h * w;
                let av = val(*a);
                let per_sample = av.len() != c;
                let sample_of = |plane_idx: usize| if per_sample { plane_idx } else { plane_idx % c };
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (pi, (dst, src)) in dx.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                        let s = av[sample_of(pi)];
                        for (d, gj) in dst.iter_mut().zip(src) {
                            *d = gj * s;
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*a) {
                    let mut da = vec![0.0; av.len()];
                    for (pi, (gp, xp)) in g.chunks(plane).zip(val(*x).chunks(plane)).enumerate() {
                        da[sample_of(pi)] += gp.iter().zip(xp).map(|(p, q)| p * q).sum::<f64>();
                    }
                    out.push((*a, da));
                }
            }
            Op::ChannelGroupSum { x, k } => {
                if needs(*x) {
                    let [n, c, h, w] = self.value(*x).dims4("channel_group_sum").expect("rank 4");
                    let plane = h * w;
                    let groups = c / k;
                    let mut dx = vec![0.0; n * c * plane];
                    for b in 0..n {
                        for ch in 0..c {
                            let src = &g[(b * groups + ch / k) * plane..][..plane];
                            dx[(b * c + ch) * plane..][..plane].copy_from_slice(src);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs(*x) {
                    let [_, _, h, w] = self.value(*x).dims4("global_avg_pool").expect("rank 4");
                    let area = (h * w) as f64;
                    let dx = g
                        .iter()
                        .flat_map(|gj| std::iter::repeat_n(gj / area, h * w))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    out.push((*x, vec![g[0]; val(*x).len()]));
                }
            }
            Op::Bce { p, y, eps } => {
                let scale = g[0] / val(*p).len() as f64;
                let pairs = val(*p).iter().zip(val(*y));
                if needs(*p) {
                    let dp = pairs
                        .clone()
                        .map(|(&p, &y)| {
                            if p > *eps && p < 1.0 - eps {
                                scale * (-y / p + (1.0 - y) / (1.0 - p))
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.push((*p, dp));
                }
                if needs(*y) {
                    let dy = pairs
                        .map(|(&p, _)| {
                            let pc = p.clamp(*eps, 1.0 - eps);
                            scale * ((1.0 - pc).ln() - pc.ln())
                        })
                        .collect();
                    out.push((*y, dy));
                }
            }
            Op::Mae { p, y } => {
                let scale = g[0] / val(*p).len() as f64;
                let sign: Vec<f64> = val(*p)
                    .iter()
                    .zip(val(*y))
                    .map(|(p, y)| {
                        let d = p - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if needs(*y) {
                    out.push((*y, sign.iter().map(|s| -s).collect()));
                }
                if needs(*p) {
                    out.push((*p, sign));
                }
            }
        }
        out
    }
}
