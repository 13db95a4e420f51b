//! Layers with hand-written backward passes.
//!
//! Every `forward` returns the output together with whatever the matching
//! `backward` needs. Backward passes accumulate into a [`Grads`] buffer and
//! return the gradient with respect to the layer input.

use rand::Rng;

use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const LN_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s + x * s * (S::one() - s)
}

pub fn silu_mat<S: Scalar>(x: &Mat<S>) -> Mat<S> {
    Mat { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| silu(v)).collect() }
}

/// `dy * silu'(x)` elementwise, where `x` is the pre-activation.
pub fn silu_backward<S: Scalar>(x: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
    Mat { rows: x.rows, cols: x.cols, data: x.data.iter().zip(&dy.data).map(|(&a, &g)| g * silu_grad(a)).collect() }
}

/// Row-wise softmax.
pub fn softmax_rows<S: Scalar>(x: &mut Mat<S>) {
    for r in 0..x.rows {
        let row = x.row_mut(r);
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `Softmax(q k^T / sqrt(d'))`, one row per query.
pub fn attention_scores<S: Scalar>(q: &Mat<S>, k: &Mat<S>) -> Mat<S> {
    let scale = S::one() / S::c(q.cols as f64).sqrt();
    let mut s = q.matmul_t(k);
    s.data.iter_mut().for_each(|v| *v *= scale);
    softmax_rows(&mut s);
    s
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        trainable: bool,
        gain: f64,
    ) -> Self {
        let std = gain / (inp as f64).sqrt();
        let w = store.add(format!("{name}.weight"), &[inp, out], Init::Normal(std), trainable, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), &[out], Init::Zeros, trainable, rng));
        Linear { w, b, inp, out }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Mat<S>) -> Mat<S> {
        assert_eq!(x.cols, self.inp, "linear input width");
        let mut y = Mat::zeros(x.rows, self.out);
        S::gemm(x.rows, self.inp, self.out, S::one(), &x.data, false, p.get(self.w), false, S::zero(), &mut y.data);
        if let Some(b) = self.b {
            let b = p.get(b);
            for r in 0..y.rows {
                for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        y
    }

    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, g: &mut Grads<S>, x: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
        x.t_matmul_acc(dy, g.get_mut(self.w));
        if let Some(b) = self.b {
            let gb = g.get_mut(b);
            for r in 0..dy.rows {
                for (acc, &v) in gb.iter_mut().zip(dy.row(r)) {
                    *acc += v;
                }
            }
        }
        let mut dx = Mat::zeros(x.rows, self.inp);
        S::gemm(dy.rows, self.out, self.inp, S::one(), &dy.data, false, p.get(self.w), true, S::zero(), &mut dx.data);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Mat<S>,
    inv_std: Vec<S>,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, dim: usize, trainable: bool) -> Self {
        let gain = store.add(format!("{name}.gain"), &[dim], Init::Ones, trainable, rng);
        let bias = store.add(format!("{name}.bias"), &[dim], Init::Zeros, trainable, rng);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Mat<S>) -> (Mat<S>, LayerNormCache<S>) {
        assert_eq!(x.cols, self.dim, "layer norm width");
        let n = S::c(self.dim as f64);
        let eps = S::c(LN_EPS);
        let gain = p.get(self.gain);
        let bias = p.get(self.bias);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let yr = y.row_mut(r);
            for i in 0..self.dim {
                yr[i] = xhat.data[r * self.dim + i] * gain[i] + bias[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, g: &mut Grads<S>, cache: &LayerNormCache<S>, dy: &Mat<S>) -> Mat<S> {
        let gain = p.get(self.gain);
        let n = S::c(self.dim as f64);
        {
            let gg = g.get_mut(self.gain);
            for r in 0..dy.rows {
                for ((acc, &d), &xh) in gg.iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                    *acc += d * xh;
                }
            }
        }
        {
            let gb = g.get_mut(self.bias);
            for r in 0..dy.rows {
                for (acc, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *acc += d;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let d = dy.row(r);
            let mut mean_dxh = S::zero();
            let mut mean_dxh_xh = S::zero();
            for i in 0..self.dim {
                let dxh = d[i] * gain[i];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[i];
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            let is = cache.inv_std[r];
            let out = dx.row_mut(r);
            for i in 0..self.dim {
                out[i] = is * (d[i] * gain[i] - mean_dxh - xh[i] * mean_dxh_xh);
            }
        }
        dx
    }
}

/// Same-padded 2-D convolution (kernel 1 or 3) over an `(h*w) x cin` map.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Mat<S>,
    h: usize,
    w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        trainable: bool,
        gain: f64,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let fan_in = kernel * kernel * cin;
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), &[fan_in, cout], Init::Normal(std), trainable, rng);
        let b = store.add(format!("{name}.bias"), &[cout], Init::Zeros, trainable, rng);
        Conv2d { w, b, kernel, cin, cout }
    }

    fn im2col<S: Scalar>(&self, x: &Mat<S>, h: usize, w: usize) -> Mat<S> {
        if self.kernel == 1 {
            return x.clone();
        }
        let cin = self.cin;
        let mut cols = Mat::zeros(h * w, 9 * cin);
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row_mut(y * w + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = x.row(sy as usize * w + sx as usize);
                        let off = (ky * 3 + kx) * cin;
                        row[off..off + cin].copy_from_slice(src);
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, dcols: &Mat<S>, h: usize, w: usize) -> Mat<S> {
        if self.kernel == 1 {
            return dcols.clone();
        }
        let cin = self.cin;
        let mut dx = Mat::zeros(h * w, cin);
        for y in 0..h {
            for xx in 0..w {
                let row = dcols.row(y * w + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let off = (ky * 3 + kx) * cin;
                        let dst = dx.row_mut(sy as usize * w + sx as usize);
                        for (d, &v) in dst.iter_mut().zip(&row[off..off + cin]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Mat<S>, h: usize, w: usize) -> (Mat<S>, ConvCache<S>) {
        assert_eq!(x.cols, self.cin, "conv input channels");
        assert_eq!(x.rows, h * w, "conv spatial size");
        let cols = self.im2col(x, h, w);
        let mut y = Mat::zeros(h * w, self.cout);
        let b = p.get(self.b);
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(b);
        }
        S::gemm(h * w, cols.cols, self.cout, S::one(), &cols.data, false, p.get(self.w), false, S::one(), &mut y.data);
        (y, ConvCache { cols, h, w })
    }

    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, g: &mut Grads<S>, cache: &ConvCache<S>, dy: &Mat<S>) -> Mat<S> {
        cache.cols.t_matmul_acc(dy, g.get_mut(self.w));
        {
            let gb = g.get_mut(self.b);
            for r in 0..dy.rows {
                for (acc, &v) in gb.iter_mut().zip(dy.row(r)) {
                    *acc += v;
                }
            }
        }
        let mut dcols = Mat::zeros(dy.rows, cache.cols.cols);
        S::gemm(dy.rows, self.cout, cache.cols.cols, S::one(), &dy.data, false, p.get(self.w), true, S::zero(), &mut dcols.data);
        self.col2im(&dcols, cache.h, cache.w)
    }
}

/// 2x2 average pooling.
pub fn avg_pool2<S: Scalar>(x: &Mat<S>, h: usize, w: usize) -> Mat<S> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::c(0.25);
    let mut y = Mat::zeros(oh * ow, x.cols);
    for oy in 0..oh {
        for ox in 0..ow {
            let out = y.row_mut(oy * ow + ox);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = x.row((2 * oy + dy) * w + 2 * ox + dx);
                for (o, &v) in out.iter_mut().zip(src) {
                    *o += v * quarter;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(dy: &Mat<S>, h: usize, w: usize) -> Mat<S> {
    let ow = w / 2;
    let quarter = S::c(0.25);
    let mut dx = Mat::zeros(h * w, dy.cols);
    for y in 0..h {
        for x in 0..w {
            let src = dy.row((y / 2) * ow + x / 2);
            for (d, &v) in dx.row_mut(y * w + x).iter_mut().zip(src) {
                *d = v * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of an `(h*w) x c` map.
pub fn upsample2<S: Scalar>(x: &Mat<S>, h: usize, w: usize) -> Mat<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Mat::zeros(oh * ow, x.cols);
    for oy in 0..oh {
        for ox in 0..ow {
            y.row_mut(oy * ow + ox).copy_from_slice(x.row((oy / 2) * w + ox / 2));
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(dy: &Mat<S>, h: usize, w: usize) -> Mat<S> {
    let ow = 2 * w;
    let mut dx = Mat::zeros(h * w, dy.cols);
    for oy in 0..2 * h {
        for ox in 0..ow {
            let src = dy.row(oy * ow + ox);
            for (d, &v) in dx.row_mut((oy / 2) * w + ox / 2).iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    dx
}

/// Column-wise concatenation `[a | b]`.
pub fn concat_cols<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    assert_eq!(a.rows, b.rows, "concat rows");
    let mut y = Mat::zeros(a.rows, a.cols + b.cols);
    for r in 0..a.rows {
        let out = y.row_mut(r);
        out[..a.cols].copy_from_slice(a.row(r));
        out[a.cols..].copy_from_slice(b.row(r));
    }
    y
}

pub fn split_cols<S: Scalar>(y: &Mat<S>, left: usize) -> (Mat<S>, Mat<S>) {
    let right = y.cols - left;
    let mut a = Mat::zeros(y.rows, left);
    let mut b = Mat::zeros(y.rows, right);
    for r in 0..y.rows {
        a.row_mut(r).copy_from_slice(&y.row(r)[..left]);
        b.row_mut(r).copy_from_slice(&y.row(r)[left..]);
    }
    (a, b)
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal<S: Scalar>(pos: f64, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = S::c((pos * freq).sin());
        out[half + i] = S::c((pos * freq).cos());
    }
    out
}

/// Single-head cross-attention: queries from spatial features, keys and
/// values from the conditioning rows. The layer output is meant to be added
/// back onto its input.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub attn_dim: usize,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionCache<S> {
    norm: LayerNormCache<S>,
    hn: Mat<S>,
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    o: Mat<S>,
    pub attn: Mat<S>,
}

impl CrossAttention {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, channels: usize, cond_dim: usize, attn_dim: usize, out_gain: f64) -> Self {
        CrossAttention {
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), channels, true),
            wq: Linear::new(store, rng, &format!("{name}.q"), channels, attn_dim, false, true, 1.0),
            wk: Linear::new(store, rng, &format!("{name}.k"), cond_dim, attn_dim, false, true, 1.0),
            wv: Linear::new(store, rng, &format!("{name}.v"), cond_dim, attn_dim, false, true, 1.0),
            wo: Linear::new(store, rng, &format!("{name}.out"), attn_dim, channels, true, true, out_gain),
            attn_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, h: &Mat<S>, cond: &Mat<S>) -> (Mat<S>, CrossAttentionCache<S>) {
        let (hn, norm) = self.norm.forward(p, h);
        let q = self.wq.forward(p, &hn);
        let k = self.wk.forward(p, cond);
        let v = self.wv.forward(p, cond);
        let attn = attention_scores(&q, &k);
        let o = attn.matmul(&v);
        let out = self.wo.forward(p, &o);
        (out, CrossAttentionCache { norm, hn, q, k, v, o, attn })
    }

    /// Returns `(d input features, d conditioning)`. `extra_dattn` carries
    /// gradient arriving directly at the attention map (localization loss).
    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        cache: &CrossAttentionCache<S>,
        cond: &Mat<S>,
        dout: &Mat<S>,
        extra_dattn: Option<&Mat<S>>,
    ) -> (Mat<S>, Mat<S>) {
        let d_o = self.wo.backward(p, g, &cache.o, dout);
        let mut dattn = d_o.matmul_t(&cache.v);
        if let Some(extra) = extra_dattn {
            dattn.add_assign(extra);
        }
        // dv = A^T do
        let mut dv = Mat::zeros(cache.v.rows, cache.v.cols);
        cache.attn.t_matmul_acc(&d_o, &mut dv.data);
        // softmax backward, then the 1/sqrt(d') scale
        let scale = S::one() / S::c(self.attn_dim as f64).sqrt();
        let mut ds = Mat::zeros(dattn.rows, dattn.cols);
        for r in 0..dattn.rows {
            let a = cache.attn.row(r);
            let da = dattn.row(r);
            let dot: S = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
            for ((o, &x), &y) in ds.row_mut(r).iter_mut().zip(a).zip(da) {
                *o = x * (y - dot) * scale;
            }
        }
        let dq = ds.matmul(&cache.k);
        let mut dk = Mat::zeros(cache.k.rows, cache.k.cols);
        ds.t_matmul_acc(&cache.q, &mut dk.data);
        let dhn = self.wq.backward(p, g, &cache.hn, &dq);
        let dh = self.norm.backward(p, g, &cache.norm, &dhn);
        let mut dcond = self.wk.backward(p, g, cond, &dk);
        dcond.add_assign(&self.wv.backward(p, g, cond, &dv));
        (dh, dcond)
    }
}

/// Pre-norm residual block conditioned on the time embedding:
/// `x + conv1x1(silu(conv3x3(silu(LN(x))) + W t))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm: LayerNorm,
    pub conv1: Conv2d,
    pub temb: Linear,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<S> {
    norm: LayerNormCache<S>,
    pre1: Mat<S>,
    conv1: ConvCache<S>,
    pre2: Mat<S>,
    conv2: ConvCache<S>,
}

impl ResBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, channels: usize, temb_dim: usize, out_gain: f64) -> Self {
        ResBlock {
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), channels, true),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 3, channels, channels, true, 1.0),
            temb: Linear::new(store, rng, &format!("{name}.temb"), temb_dim, channels, true, true, 1.0),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), 1, channels, channels, true, out_gain),
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Mat<S>, h: usize, w: usize, temb: &Mat<S>) -> (Mat<S>, ResBlockCache<S>) {
        let (xn, norm) = self.norm.forward(p, x);
        let pre1 = xn;
        let a = silu_mat(&pre1);
        let (mut b, conv1) = self.conv1.forward(p, &a, h, w);
        let t = self.temb.forward(p, temb);
        for r in 0..b.rows {
            for (v, &tv) in b.row_mut(r).iter_mut().zip(&t.data) {
                *v += tv;
            }
        }
        let pre2 = b;
        let c = silu_mat(&pre2);
        let (mut y, conv2) = self.conv2.forward(p, &c, h, w);
        y.add_assign(x);
        (y, ResBlockCache { norm, pre1, conv1, pre2, conv2 })
    }

    /// Returns `(dx, d temb)`.
    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, g: &mut Grads<S>, cache: &ResBlockCache<S>, temb: &Mat<S>, dy: &Mat<S>) -> (Mat<S>, Mat<S>) {
        let dc = self.conv2.backward(p, g, &cache.conv2, dy);
        let db = silu_backward(&cache.pre2, &dc);
        let mut dt = Mat::zeros(1, db.cols);
        for r in 0..db.rows {
            for (acc, &v) in dt.data.iter_mut().zip(db.row(r)) {
                *acc += v;
            }
        }
        let dtemb = self.temb.backward(p, g, temb, &dt);
        let da = self.conv1.backward(p, g, &cache.conv1, &db);
        let dxn = silu_backward(&cache.pre1, &da);
        let mut dx = self.norm.backward(p, g, &cache.norm, &dxn);
        dx.add_assign(dy);
        (dx, dtemb)
    }
}
