//! Network layers with explicit forward caches and reverse-mode backward passes.
//!
//! Parameters live in one flat buffer; each layer only records offsets into it,
//! so gradients, optimizer moments and checkpoints share a single layout.

use super::real::{add_flops, gemm, sigmoid, Mat, Real, Strided};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

/// Ordered list of named parameter segments inside the flat buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub len: usize,
}

impl Layout {
    pub fn take(&mut self, name: impl Into<String>, len: usize, init: Init) -> usize {
        let offset = self.len;
        self.segments.push(Segment { name: name.into(), offset, len, init });
        self.len += len;
        offset
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weight stored `out x inp`; `y = x W^T + b`.
    pub fn new(layout: &mut Layout, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = layout.take(format!("{name}.weight"), inp * out, Init::Uniform { fan_in: inp });
        let b = bias.then(|| layout.take(format!("{name}.bias"), out, Init::Zeros));
        Self { w, b, inp, out }
    }

    fn weight<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w..self.w + self.inp * self.out]
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.inp, "linear input width");
        let mut y = Mat::zeros(x.rows, self.out);
        let beta = match self.b {
            Some(b) => {
                for r in 0..x.rows {
                    y.row_mut(r).copy_from_slice(&p[b..b + self.out]);
                }
                T::one()
            }
            None => T::zero(),
        };
        gemm(
            x.rows,
            self.inp,
            self.out,
            T::one(),
            &x.data,
            Strided::rows(self.inp),
            self.weight(p),
            Strided::transposed(self.inp),
            beta,
            &mut y.data,
            Strided::rows(self.out),
        );
        y
    }

    /// Accumulates weight and bias gradients.
    pub fn grad_params<T: Real>(&self, x: &Mat<T>, dy: &Mat<T>, g: &mut [T]) {
        gemm(
            self.out,
            x.rows,
            self.inp,
            T::one(),
            &dy.data,
            Strided::transposed(self.out),
            &x.data,
            Strided::rows(self.inp),
            T::one(),
            &mut g[self.w..self.w + self.inp * self.out],
            Strided::rows(self.inp),
        );
        if let Some(b) = self.b {
            let gb = &mut g[b..b + self.out];
            for r in 0..dy.rows {
                for (acc, v) in gb.iter_mut().zip(dy.row(r)) {
                    *acc += *v;
                }
            }
        }
    }

    pub fn grad_input<T: Real>(&self, p: &[T], dy: &Mat<T>) -> Mat<T> {
        let mut dx = Mat::zeros(dy.rows, self.inp);
        gemm(
            dy.rows,
            self.out,
            self.inp,
            T::one(),
            &dy.data,
            Strided::rows(self.out),
            self.weight(p),
            Strided::rows(self.inp),
            T::zero(),
            &mut dx.data,
            Strided::rows(self.inp),
        );
        dx
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &Mat<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        self.grad_params(x, dy, g);
        self.grad_input(p, dy)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        let gamma = layout.take(format!("{name}.gamma"), dim, Init::Ones);
        let beta = layout.take(format!("{name}.beta"), dim, Init::Zeros);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let d = self.dim;
        let inv_d = T::of(1.0 / d as f64);
        let gamma = &p[self.gamma..self.gamma + d];
        let beta = &p[self.beta..self.beta + d];
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let yr = y.row_mut(r);
            for i in 0..d {
                yr[i] = xh[i] * gamma[i] + beta[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, p: &[T], cache: &LnCache<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        let d = self.dim;
        let inv_d = T::of(1.0 / d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for i in 0..d {
                g[self.gamma + i] += dyr[i] * xh[i];
                g[self.beta + i] += dyr[i];
                dxhat[i] = dyr[i] * p[self.gamma + i];
            }
            let sum_d = dxhat.iter().copied().sum::<T>();
            let sum_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            let rs = cache.rstd[r];
            let dxr = dx.row_mut(r);
            for i in 0..d {
                dxr[i] = rs * (dxhat[i] - (sum_d + xh[i] * sum_dx) * inv_d);
            }
        }
        dx
    }
}

fn swish<T: Real>(x: &Mat<T>) -> Mat<T> {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v * sigmoid(v)).collect())
}

/// `dy * d swish(x) / dx`.
fn swish_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}

/// Pre-norm position-wise feed-forward module (expansion x4, swish).
#[derive(Clone, Debug)]
pub struct FeedForward {
    ln: LayerNorm,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<T> {
    ln: LnCache<T>,
    xn: Mat<T>,
    h: Mat<T>,
    a: Mat<T>,
}

impl FeedForward {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, expansion: usize) -> Self {
        Self {
            ln: LayerNorm::new(layout, &format!("{name}.norm"), dim),
            up: Linear::new(layout, &format!("{name}.up"), dim, dim * expansion, true),
            down: Linear::new(layout, &format!("{name}.down"), dim * expansion, dim, true),
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> (Mat<T>, FeedForwardCache<T>) {
        let (xn, ln) = self.ln.forward(p, x);
        let h = self.up.forward(p, &xn);
        let a = swish(&h);
        let y = self.down.forward(p, &a);
        (y, FeedForwardCache { ln, xn, h, a })
    }

    pub fn backward<T: Real>(&self, p: &[T], c: &FeedForwardCache<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        let da = self.down.backward(p, &c.a, dy, g);
        let dh = swish_backward(&c.h, &da);
        let dxn = self.up.backward(p, &c.xn, &dh, g);
        self.ln.backward(p, &c.ln, &dxn, g)
    }
}

/// Pre-norm bidirectional multi-head self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    ln: LayerNorm,
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    ln: LnCache<T>,
    xn: Mat<T>,
    qkv: Mat<T>,
    probs: Vec<T>,
    ctx: Mat<T>,
}

impl SelfAttention {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln: LayerNorm::new(layout, &format!("{name}.norm"), dim),
            qkv: Linear::new(layout, &format!("{name}.qkv"), dim, 3 * dim, true),
            out: Linear::new(layout, &format!("{name}.out"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> (Mat<T>, AttentionCache<T>) {
        let (d, h_count, t) = (self.dim, self.heads, x.rows);
        let dh = d / h_count;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (xn, ln) = self.ln.forward(p, x);
        let qkv = self.qkv.forward(p, &xn);
        let mut probs = vec![T::zero(); h_count * t * t];
        let mut ctx = Mat::zeros(t, d);
        let row3 = Strided::rows(3 * d);
        for h in 0..h_count {
            let pr = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                t,
                dh,
                t,
                scale,
                &qkv.data,
                row3.at(h * dh),
                &qkv.data,
                Strided::transposed(3 * d).at(d + h * dh),
                T::zero(),
                pr,
                Strided::rows(t),
            );
            for row in pr.chunks_exact_mut(t) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            gemm(
                t,
                t,
                dh,
                T::one(),
                pr,
                Strided::rows(t),
                &qkv.data,
                row3.at(2 * d + h * dh),
                T::zero(),
                &mut ctx.data,
                Strided::rows(d).at(h * dh),
            );
        }
        let y = self.out.forward(p, &ctx);
        (y, AttentionCache { ln, xn, qkv, probs, ctx })
    }

    pub fn backward<T: Real>(&self, p: &[T], c: &AttentionCache<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        let (d, h_count, t) = (self.dim, self.heads, dy.rows);
        let dh = d / h_count;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dctx = self.out.backward(p, &c.ctx, dy, g);
        let mut dqkv = Mat::zeros(t, 3 * d);
        let mut dp = vec![T::zero(); t * t];
        let row3 = Strided::rows(3 * d);
        for h in 0..h_count {
            let pr = &c.probs[h * t * t..(h + 1) * t * t];
            // dP = dctx_h V_h^T
            gemm(
                t,
                dh,
                t,
                T::one(),
                &dctx.data,
                Strided::rows(d).at(h * dh),
                &c.qkv.data,
                Strided::transposed(3 * d).at(2 * d + h * dh),
                T::zero(),
                &mut dp,
                Strided::rows(t),
            );
            // dV_h = P^T dctx_h
            gemm(
                t,
                t,
                dh,
                T::one(),
                pr,
                Strided::transposed(t),
                &dctx.data,
                Strided::rows(d).at(h * dh),
                T::zero(),
                &mut dqkv.data,
                row3.at(2 * d + h * dh),
            );
            // Softmax backward, folding in the score scale.
            for (prow, drow) in pr.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            // dQ_h = dS K_h, dK_h = dS^T Q_h
            gemm(
                t,
                t,
                dh,
                T::one(),
                &dp,
                Strided::rows(t),
                &c.qkv.data,
                row3.at(d + h * dh),
                T::zero(),
                &mut dqkv.data,
                row3.at(h * dh),
            );
            gemm(
                t,
                t,
                dh,
                T::one(),
                &dp,
                Strided::transposed(t),
                &c.qkv.data,
                row3.at(h * dh),
                T::zero(),
                &mut dqkv.data,
                row3.at(d + h * dh),
            );
        }
        let dxn = self.qkv.backward(p, &c.xn, &dqkv, g);
        self.ln.backward(p, &c.ln, &dxn, g)
    }
}

/// Pre-norm convolution module: pointwise + GLU, depthwise conv with symmetric
/// padding, layer norm, swish, pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    ln: LayerNorm,
    expand: Linear,
    dw_weight: usize,
    dw_bias: usize,
    kernel: usize,
    norm: LayerNorm,
    project: Linear,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    ln: LnCache<T>,
    xn: Mat<T>,
    u: Mat<T>,
    glu: Mat<T>,
    norm: LnCache<T>,
    nrm: Mat<T>,
    act: Mat<T>,
}

impl ConvModule {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, kernel: usize) -> Self {
        let ln = LayerNorm::new(layout, &format!("{name}.norm_in"), dim);
        let expand = Linear::new(layout, &format!("{name}.expand"), dim, 2 * dim, true);
        // Depthwise weights stored tap-major (`kernel x dim`).
        let dw_weight = layout.take(format!("{name}.depthwise.weight"), kernel * dim, Init::Uniform { fan_in: kernel });
        let dw_bias = layout.take(format!("{name}.depthwise.bias"), dim, Init::Zeros);
        let norm = LayerNorm::new(layout, &format!("{name}.norm_mid"), dim);
        let project = Linear::new(layout, &format!("{name}.project"), dim, dim, true);
        Self { ln, expand, dw_weight, dw_bias, kernel, norm, project, dim }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> (Mat<T>, ConvCache<T>) {
        let (d, t, k) = (self.dim, x.rows, self.kernel);
        let pad = k / 2;
        let (xn, ln) = self.ln.forward(p, x);
        let u = self.expand.forward(p, &xn);
        let mut glu = Mat::zeros(t, d);
        for r in 0..t {
            let ur = u.row(r);
            let gr = glu.row_mut(r);
            for c in 0..d {
                gr[c] = ur[c] * sigmoid(ur[d + c]);
            }
        }
        let w = &p[self.dw_weight..self.dw_weight + k * d];
        let bias = &p[self.dw_bias..self.dw_bias + d];
        let mut conv = Mat::zeros(t, d);
        for r in 0..t {
            let out = &mut conv.data[r * d..(r + 1) * d];
            out.copy_from_slice(bias);
            for tap in 0..k {
                let src = r + tap;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xin = glu.row(src - pad);
                let wt = &w[tap * d..(tap + 1) * d];
                for c in 0..d {
                    out[c] += wt[c] * xin[c];
                }
            }
        }
        add_flops(2 * (t * d * k) as u64);
        let (nrm, norm) = self.norm.forward(p, &conv);
        let act = swish(&nrm);
        let y = self.project.forward(p, &act);
        (y, ConvCache { ln, xn, u, glu, norm, nrm, act })
    }

    pub fn backward<T: Real>(&self, p: &[T], c: &ConvCache<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        let (d, t, k) = (self.dim, dy.rows, self.kernel);
        let pad = k / 2;
        let dact = self.project.backward(p, &c.act, dy, g);
        let dnrm = swish_backward(&c.nrm, &dact);
        let dconv = self.norm.backward(p, &c.norm, &dnrm, g);
        let w = &p[self.dw_weight..self.dw_weight + k * d];
        let mut dglu = Mat::<T>::zeros(t, d);
        for r in 0..t {
            let dout = dconv.row(r);
            for (acc, &v) in g[self.dw_bias..self.dw_bias + d].iter_mut().zip(dout) {
                *acc += v;
            }
            for tap in 0..k {
                let src = r + tap;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                let wt = &w[tap * d..(tap + 1) * d];
                let xin = c.glu.row(s);
                let gw = &mut g[self.dw_weight + tap * d..self.dw_weight + (tap + 1) * d];
                for ch in 0..d {
                    gw[ch] += dout[ch] * xin[ch];
                }
                let dg = &mut dglu.data[s * d..(s + 1) * d];
                for ch in 0..d {
                    dg[ch] += wt[ch] * dout[ch];
                }
            }
        }
        add_flops(4 * (t * d * k) as u64);
        let mut du = Mat::zeros(t, 2 * d);
        for r in 0..t {
            let ur = c.u.row(r);
            let dg = dglu.row(r);
            let dur = du.row_mut(r);
            for ch in 0..d {
                let s = sigmoid(ur[d + ch]);
                dur[ch] = dg[ch] * s;
                dur[d + ch] = dg[ch] * ur[ch] * s * (T::one() - s);
            }
        }
        let dxn = self.expand.backward(p, &c.xn, &du, g);
        self.ln.backward(p, &c.ln, &dxn, g)
    }
}

/// Macaron conformer layer: half-step FF, attention, convolution, half-step FF,
/// final layer norm; residual around each sub-module.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    ff1: FeedForward,
    attention: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ConformerLayerCache<T> {
    ff1: FeedForwardCache<T>,
    attention: AttentionCache<T>,
    conv: ConvCache<T>,
    ff2: FeedForwardCache<T>,
    ln: LnCache<T>,
}

impl ConformerLayer {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize, kernel: usize) -> Self {
        Self {
            ff1: FeedForward::new(layout, &format!("{name}.ff1"), dim, 4),
            attention: SelfAttention::new(layout, &format!("{name}.attention"), dim, heads),
            conv: ConvModule::new(layout, &format!("{name}.conv"), dim, kernel),
            ff2: FeedForward::new(layout, &format!("{name}.ff2"), dim, 4),
            ln: LayerNorm::new(layout, &format!("{name}.norm_out"), dim),
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> (Mat<T>, ConformerLayerCache<T>) {
        let half = T::of(0.5);
        let (f1, ff1) = self.ff1.forward(p, x);
        let mut h = x.clone();
        h.add_scaled(&f1, half);
        let (a, attention) = self.attention.forward(p, &h);
        h.add_assign(&a);
        let (cv, conv) = self.conv.forward(p, &h);
        h.add_assign(&cv);
        let (f2, ff2) = self.ff2.forward(p, &h);
        h.add_scaled(&f2, half);
        let (y, ln) = self.ln.forward(p, &h);
        (y, ConformerLayerCache { ff1, attention, conv, ff2, ln })
    }

    pub fn backward<T: Real>(&self, p: &[T], c: &ConformerLayerCache<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        let half = T::of(0.5);
        let mut dh = self.ln.backward(p, &c.ln, dy, g);
        let d = self.ff2.backward(p, &c.ff2, &dh.scaled(half), g);
        dh.add_assign(&d);
        let d = self.conv.backward(p, &c.conv, &dh, g);
        dh.add_assign(&d);
        let d = self.attention.backward(p, &c.attention, &dh, g);
        dh.add_assign(&d);
        let d = self.ff1.backward(p, &c.ff1, &dh.scaled(half), g);
        dh.add_assign(&d);
        dh
    }
}

/// A stack of conformer layers; shape-preserving on `T x D` sequences.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    layers: Vec<ConformerLayer>,
}

pub type ConformerBlockCache<T> = Vec<ConformerLayerCache<T>>;

impl ConformerBlock {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize, kernel: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| ConformerLayer::new(layout, &format!("{name}.layer{i}"), dim, heads, kernel))
                .collect(),
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> (Mat<T>, ConformerBlockCache<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(p, &h);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    pub fn backward<T: Real>(&self, p: &[T], c: &ConformerBlockCache<T>, dy: &Mat<T>, g: &mut [T]) -> Mat<T> {
        let mut d = dy.clone();
        for (layer, cache) in self.layers.iter().zip(c).rev() {
            d = layer.backward(p, cache, &d, g);
        }
        d
    }
}

/// Transform-average-concatenate across channel streams:
/// `out_m = [ReLU(A x_m), mean_mu ReLU(B x_mu)]`.
#[derive(Clone, Debug)]
pub struct TacLayer {
    a: Linear,
    b: Linear,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct TacCache<T> {
    inputs: Vec<Mat<T>>,
    pre_a: Vec<Mat<T>>,
    pre_b: Vec<Mat<T>>,
}

impl TacLayer {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        assert!(dim % 2 == 0, "TAC width must be even");
        Self {
            a: Linear::new(layout, &format!("{name}.a"), dim, dim / 2, false),
            b: Linear::new(layout, &format!("{name}.b"), dim, dim / 2, false),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward<T: Real>(&self, p: &[T], streams: &[Mat<T>]) -> (Vec<Mat<T>>, TacCache<T>) {
        let half = self.dim / 2;
        let frames = streams[0].rows;
        let pre_a: Vec<Mat<T>> = streams.iter().map(|x| self.a.forward(p, x)).collect();
        let pre_b: Vec<Mat<T>> = streams.iter().map(|x| self.b.forward(p, x)).collect();
        let inv_m = T::of(1.0 / streams.len() as f64);
        let mut mean = Mat::zeros(frames, half);
        for pb in &pre_b {
            for (acc, &v) in mean.data.iter_mut().zip(&pb.data) {
                *acc += v.max(T::zero());
            }
        }
        mean.data.iter_mut().for_each(|v| *v *= inv_m);
        let outputs = pre_a
            .iter()
            .map(|pa| {
                let mut out = Mat::zeros(frames, self.dim);
                for r in 0..frames {
                    let row = out.row_mut(r);
                    for (o, &v) in row[..half].iter_mut().zip(pa.row(r)) {
                        *o = v.max(T::zero());
                    }
                    row[half..].copy_from_slice(mean.row(r));
                }
                out
            })
            .collect();
        (outputs, TacCache { inputs: streams.to_vec(), pre_a, pre_b })
    }

    pub fn backward<T: Real>(&self, p: &[T], c: &TacCache<T>, dys: &[Mat<T>], g: &mut [T]) -> Vec<Mat<T>> {
        let half = self.dim / 2;
        let frames = dys[0].rows;
        let inv_m = T::of(1.0 / dys.len() as f64);
        // Every stream receives the same mean, so its gradient is the sum.
        let mut dmean = Mat::<T>::zeros(frames, half);
        for dy in dys {
            for r in 0..frames {
                for (acc, &v) in dmean.row_mut(r).iter_mut().zip(&dy.row(r)[half..]) {
                    *acc += v;
                }
            }
        }
        let mut dxs = Vec::with_capacity(dys.len());
        for ((dy, x), (pa, pb)) in dys.iter().zip(&c.inputs).zip(c.pre_a.iter().zip(&c.pre_b)) {
            let mut da = Mat::zeros(frames, half);
            let mut db = Mat::zeros(frames, half);
            for r in 0..frames {
                let dyr = dy.row(r);
                let (par, pbr, dmr) = (pa.row(r), pb.row(r), dmean.row(r));
                for j in 0..half {
                    if par[j] > T::zero() {
                        da.data[r * half + j] = dyr[j];
                    }
                    if pbr[j] > T::zero() {
                        db.data[r * half + j] = dmr[j] * inv_m;
                    }
                }
            }
            let mut dx = self.a.backward(p, x, &da, g);
            dx.add_assign(&self.b.backward(p, x, &db, g));
            dxs.push(dx);
        }
        dxs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(layout: &Layout, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..layout.len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Checks `<u, J v>` from the backward pass against central differences,
    /// both for an input direction and for a parameter direction.
    fn check_layer<F, B, C>(layout: &Layout, rows: usize, dim: usize, fwd: F, bwd: B)
    where
        F: Fn(&[f64], &Mat<f64>) -> (Mat<f64>, C),
        B: Fn(&[f64], &C, &Mat<f64>, &mut [f64]) -> Mat<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = random_params(layout, 7);
        let x = random_mat(rows, dim, &mut rng);
        let (y, cache) = fwd(&p, &x);
        let u = random_mat(y.rows, y.cols, &mut rng);
        let mut g = vec![0.0; p.len()];
        let dx = bwd(&p, &cache, &u, &mut g);
        let h = 1e-6;

        let v = random_mat(rows, dim, &mut rng);
        let mut xp = x.clone();
        xp.add_scaled(&v, h);
        let mut xm = x.clone();
        xm.add_scaled(&v, -h);
        let fd = (dot(&u, &fwd(&p, &xp).0) - dot(&u, &fwd(&p, &xm).0)) / (2.0 * h);
        let an = dot(&dx, &v);
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "input jvp {an} vs fd {fd}");

        let dir: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pp: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
        let pm: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
        let fd = (dot(&u, &fwd(&pp, &x).0) - dot(&u, &fwd(&pm, &x).0)) / (2.0 * h);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "param jvp {an} vs fd {fd}");
    }

    #[test]
    fn linear_gradients() {
        let mut l = Layout::default();
        let lin = Linear::new(&mut l, "lin", 5, 3, true);
        check_layer(&l, 4, 5, |p, x| (lin.forward(p, x), x.clone()), |p, x, dy, g| lin.backward(p, x, dy, g));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut l = Layout::default();
        let ln = LayerNorm::new(&mut l, "ln", 6);
        check_layer(&l, 3, 6, |p, x| ln.forward(p, x), |p, c, dy, g| ln.backward(p, c, dy, g));
    }

    #[test]
    fn feed_forward_gradients() {
        let mut l = Layout::default();
        let ff = FeedForward::new(&mut l, "ff", 4, 4);
        check_layer(&l, 5, 4, |p, x| ff.forward(p, x), |p, c, dy, g| ff.backward(p, c, dy, g));
    }

    #[test]
    fn attention_gradients() {
        let mut l = Layout::default();
        let att = SelfAttention::new(&mut l, "att", 8, 2);
        check_layer(&l, 6, 8, |p, x| att.forward(p, x), |p, c, dy, g| att.backward(p, c, dy, g));
    }

    #[test]
    fn conv_module_gradients() {
        let mut l = Layout::default();
        let conv = ConvModule::new(&mut l, "conv", 4, 5);
        check_layer(&l, 7, 4, |p, x| conv.forward(p, x), |p, c, dy, g| conv.backward(p, c, dy, g));
        // Kernel wider than the sequence.
        check_layer(&l, 2, 4, |p, x| conv.forward(p, x), |p, c, dy, g| conv.backward(p, c, dy, g));
    }

    #[test]
    fn tac_hand_example() {
        let mut l = Layout::default();
        let tac = TacLayer::new(&mut l, "tac", 4);
        // Both A and B select the top half of the input.
        let mut p = vec![0.0; l.len];
        for half in 0..2 {
            let base = half * 8;
            p[base] = 1.0;
            p[base + 5] = 1.0;
        }
        let o1 = Mat::from_vec(1, 4, vec![1.0, -1.0, 0.0, 0.0]);
        let o2 = Mat::from_vec(1, 4, vec![3.0, 5.0, 0.0, 0.0]);
        let (out, _) = tac.forward(&p, &[o1.clone(), o2.clone()]);
        assert_eq!(out[0].data, vec![1.0, 0.0, 2.0, 2.5]);
        assert_eq!(out[1].data, vec![3.0, 5.0, 2.0, 2.5]);
        // A single stream: mean of one element is itself.
        let (single, _) = tac.forward(&p, &[o1]);
        assert_eq!(single[0].data, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn tac_gradients_and_equivariance() {
        let mut l = Layout::default();
        let tac = TacLayer::new(&mut l, "tac", 6);
        let p = random_params(&l, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Mat<f64>> = (0..3).map(|_| random_mat(4, 6, &mut rng)).collect();
        let (out, cache) = tac.forward(&p, &xs);
        let perm = [2, 0, 1];
        let permuted: Vec<Mat<f64>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let (pout, _) = tac.forward(&p, &permuted);
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in pout[k].data.iter().zip(&out[i].data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let us: Vec<Mat<f64>> = (0..3).map(|_| random_mat(4, 6, &mut rng)).collect();
        let mut g = vec![0.0; p.len()];
        let dxs = tac.backward(&p, &cache, &us, &mut g);
        let objective = |p: &[f64], xs: &[Mat<f64>]| -> f64 {
            let (o, _) = tac.forward(p, xs);
            o.iter().zip(&us).map(|(a, b)| dot(a, b)).sum()
        };
        let h = 1e-6;
        let vs: Vec<Mat<f64>> = (0..3).map(|_| random_mat(4, 6, &mut rng)).collect();
        let shift = |s: f64| -> Vec<Mat<f64>> {
            xs.iter()
                .zip(&vs)
                .map(|(x, v)| {
                    let mut y = x.clone();
                    y.add_scaled(v, s);
                    y
                })
                .collect()
        };
        let fd = (objective(&p, &shift(h)) - objective(&p, &shift(-h))) / (2.0 * h);
        let an: f64 = dxs.iter().zip(&vs).map(|(a, b)| dot(a, b)).sum();
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3));
        let dir: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pp: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
        let pm: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
        let fd = (objective(&pp, &xs) - objective(&pm, &xs)) / (2.0 * h);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3));
    }
}
