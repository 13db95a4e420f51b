//! Two-level U-Net noise predictor with recorded cross-attention maps.
//!
//! The input grid is folded into `patch x patch` cells (space-to-depth), so
//! the network works at `H/p` and `H/2p`. Cross-attention sits at the lower
//! level, at the bottleneck, and at the upper level of the decoder; the two
//! lower-resolution layers are the inner blocks used for localization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat_cols, silu_backward, silu_mat, sinusoidal, split_cols, upsample2,
    upsample2_backward, Conv2d, ConvCache, CrossAttention, CrossAttentionCache, LayerNorm, LayerNormCache, Linear,
    ResBlock, ResBlockCache,
};
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{GridShape, LatentGrid, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image: GridShape,
    pub patch: usize,
    /// Channel widths at the upper and lower level.
    pub widths: [usize; 2],
    pub time_dim: usize,
    pub temb_dim: usize,
    pub cond_dim: usize,
    pub attn_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let GridShape { height, width, channels } = self.image;
        if height == 0 || width == 0 || channels == 0 || self.patch == 0 {
            return Err(CoreError::Config("denoiser dimensions must be positive".into()));
        }
        if height % (2 * self.patch) != 0 || width % (2 * self.patch) != 0 {
            return Err(CoreError::Config(format!(
                "image {height}x{width} must be divisible by twice the patch size {}",
                self.patch
            )));
        }
        if self.widths.contains(&0) || self.time_dim % 2 != 0 || self.attn_dim == 0 || self.cond_dim == 0 {
            return Err(CoreError::Config("invalid denoiser widths".into()));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        (self.image.height / self.patch, self.image.width / self.patch)
    }

    fn cell_channels(&self) -> usize {
        self.image.channels * self.patch * self.patch
    }
}

/// One cross-attention map `A` (`(h*w) x n`) with its layer metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<S> {
    pub layer_id: String,
    pub resolution: (usize, usize),
    pub map: Mat<S>,
    pub is_inner_block: bool,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput<S> {
    pub eps_hat: LatentGrid<S>,
    pub attention: Vec<AttentionRecord<S>>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    res_d0: ResBlock,
    down: Conv2d,
    res_d1: ResBlock,
    attn_d1: CrossAttention,
    res_mid: ResBlock,
    attn_mid: CrossAttention,
    up: Conv2d,
    merge: Conv2d,
    res_u0: ResBlock,
    attn_u0: CrossAttention,
    out_norm: LayerNorm,
    out: Conv2d,
    /// Time-dependent scalar times the input, added to the prediction. At
    /// high noise levels the noise is almost the input itself.
    skip: Linear,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct DenoiserCache<S> {
    t_in: Mat<S>,
    t_pre: Mat<S>,
    t_act: Mat<S>,
    temb: Mat<S>,
    stem: ConvCache<S>,
    res_d0: ResBlockCache<S>,
    down: ConvCache<S>,
    res_d1: ResBlockCache<S>,
    attn_d1: CrossAttentionCache<S>,
    res_mid: ResBlockCache<S>,
    attn_mid: CrossAttentionCache<S>,
    up: ConvCache<S>,
    merge: ConvCache<S>,
    res_u0: ResBlockCache<S>,
    attn_u0: CrossAttentionCache<S>,
    out_norm: LayerNormCache<S>,
    out_pre: Mat<S>,
    out: ConvCache<S>,
    z_t: LatentGrid<S>,
}

/// Folds `p x p` pixel cells into channels: `(H/p * W/p) x (C p p)`.
pub fn space_to_depth<S: Scalar>(g: &LatentGrid<S>, p: usize) -> Mat<S> {
    let (h, w, c) = (g.height() / p, g.width() / p, g.channels());
    let mut m = Mat::zeros(h * w, c * p * p);
    for y in 0..h {
        for x in 0..w {
            let row = m.row_mut(y * w + x);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let px = g.pixel(y * p + dy, x * p + dx);
                    row[k..k + c].copy_from_slice(px);
                    k += c;
                }
            }
        }
    }
    m
}

pub fn depth_to_space<S: Scalar>(m: &Mat<S>, shape: GridShape, p: usize) -> LatentGrid<S> {
    let (h, w, c) = (shape.height / p, shape.width / p, shape.channels);
    let mut g = LatentGrid::zeros(shape);
    for y in 0..h {
        for x in 0..w {
            let row = m.row(y * w + x);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let i = g.index(y * p + dy, x * p + dx, 0);
                    g.data[i..i + c].copy_from_slice(&row[k..k + c]);
                    k += c;
                }
            }
        }
    }
    g
}

impl Denoiser {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1] = cfg.widths;
        let (te, d, da) = (cfg.temb_dim, cfg.cond_dim, cfg.attn_dim);
        let cc = cfg.cell_channels();
        Ok(Denoiser {
            time1: Linear::new(store, rng, "unet.time1", cfg.time_dim, te, true, true, 1.0),
            time2: Linear::new(store, rng, "unet.time2", te, te, true, true, 1.0),
            stem: Conv2d::new(store, rng, "unet.stem", 3, cc, c0, true, 1.0),
            res_d0: ResBlock::new(store, rng, "unet.down0.res", c0, te, 0.5),
            down: Conv2d::new(store, rng, "unet.down", 1, c0, c1, true, 1.0),
            res_d1: ResBlock::new(store, rng, "unet.down1.res", c1, te, 0.5),
            attn_d1: CrossAttention::new(store, rng, "unet.down1.attn", c1, d, da, 0.5),
            res_mid: ResBlock::new(store, rng, "unet.mid.res", c1, te, 0.5),
            attn_mid: CrossAttention::new(store, rng, "unet.mid.attn", c1, d, da, 0.5),
            up: Conv2d::new(store, rng, "unet.up", 1, c1, c0, true, 1.0),
            merge: Conv2d::new(store, rng, "unet.merge", 3, 2 * c0, c0, true, 1.0),
            res_u0: ResBlock::new(store, rng, "unet.up0.res", c0, te, 0.5),
            attn_u0: CrossAttention::new(store, rng, "unet.up0.attn", c0, d, da, 0.5),
            out_norm: LayerNorm::new(store, rng, "unet.out_norm", c0, true),
            out: Conv2d::new(store, rng, "unet.out", 3, c0, cc, true, 0.5),
            skip: Linear::new(store, rng, "unet.skip", te, 1, true, true, 0.1),
            cfg,
        })
    }

    /// `(resolution, is_inner)` of each attention layer, in record order.
    pub fn attention_layout(&self) -> Vec<(String, (usize, usize), bool)> {
        let (h, w) = self.cfg.grid();
        vec![
            ("down1".to_string(), (h / 2, w / 2), true),
            ("mid".to_string(), (h / 2, w / 2), true),
            ("up0".to_string(), (h, w), false),
        ]
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, z_t: &LatentGrid<S>, t: usize, cond: &Mat<S>) -> Result<(DenoiserOutput<S>, DenoiserCache<S>)> {
        if z_t.shape != self.cfg.image {
            return Err(CoreError::Shape(format!("denoiser input {:?}, expected {:?}", z_t.shape, self.cfg.image)));
        }
        if cond.cols != self.cfg.cond_dim || cond.rows == 0 {
            return Err(CoreError::Shape(format!(
                "conditioning is {}x{}, expected n x {}",
                cond.rows, cond.cols, self.cfg.cond_dim
            )));
        }
        let (h, w) = self.cfg.grid();
        let (lh, lw) = (h / 2, w / 2);

        let t_in = Mat::from_vec(1, self.cfg.time_dim, sinusoidal(t as f64, self.cfg.time_dim));
        let t_pre = self.time1.forward(p, &t_in);
        let t_act = silu_mat(&t_pre);
        let temb = self.time2.forward(p, &t_act);

        let x = space_to_depth(z_t, self.cfg.patch);
        let (h0, stem) = self.stem.forward(p, &x, h, w);
        let (h0b, res_d0) = self.res_d0.forward(p, &h0, h, w, &temb);
        let pooled = avg_pool2(&h0b, h, w);
        let (h1, down) = self.down.forward(p, &pooled, lh, lw);
        let (mut h1b, res_d1) = self.res_d1.forward(p, &h1, lh, lw, &temb);
        let (o1, attn_d1) = self.attn_d1.forward(p, &h1b, cond);
        h1b.add_assign(&o1);
        let (mut h2, res_mid) = self.res_mid.forward(p, &h1b, lh, lw, &temb);
        let (o2, attn_mid) = self.attn_mid.forward(p, &h2, cond);
        h2.add_assign(&o2);
        let (u, up) = self.up.forward(p, &h2, lh, lw);
        let u_up = upsample2(&u, lh, lw);
        let cat = concat_cols(&u_up, &h0b);
        let (m1, merge) = self.merge.forward(p, &cat, h, w);
        let (mut m2, res_u0) = self.res_u0.forward(p, &m1, h, w, &temb);
        let (o3, attn_u0) = self.attn_u0.forward(p, &m2, cond);
        m2.add_assign(&o3);
        let (out_pre, out_norm) = self.out_norm.forward(p, &m2);
        let (y, out) = self.out.forward(p, &silu_mat(&out_pre), h, w);
        let mut eps_hat = depth_to_space(&y, self.cfg.image, self.cfg.patch);
        let gate = self.skip.forward(p, &temb).data[0];
        for (e, &z) in eps_hat.data.iter_mut().zip(&z_t.data) {
            *e += gate * z;
        }

        let layout = self.attention_layout();
        let maps = [&attn_d1.attn, &attn_mid.attn, &attn_u0.attn];
        let attention = layout
            .into_iter()
            .zip(maps)
            .map(|((layer_id, resolution, is_inner_block), map)| AttentionRecord { layer_id, resolution, map: map.clone(), is_inner_block })
            .collect();
        let cache = DenoiserCache {
            t_in,
            t_pre,
            t_act,
            temb,
            stem,
            res_d0,
            down,
            res_d1,
            attn_d1,
            res_mid,
            attn_mid,
            up,
            merge,
            res_u0,
            attn_u0,
            out_norm,
            out_pre,
            out,
            z_t: z_t.clone(),
        };
        Ok((DenoiserOutput { eps_hat, attention }, cache))
    }

    /// Backpropagates `d eps_hat` (plus optional direct gradients on each
    /// attention map, in record order). Returns `d conditioning`.
    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        cache: &DenoiserCache<S>,
        cond: &Mat<S>,
        d_eps: &LatentGrid<S>,
        d_attn: &[Option<Mat<S>>],
    ) -> Mat<S> {
        let (h, w) = self.cfg.grid();
        let (lh, lw) = (h / 2, w / 2);
        let extra = |i: usize| d_attn.get(i).and_then(|o| o.as_ref());
        let [c0, _] = self.cfg.widths;

        let d_gate = d_eps.data.iter().zip(&cache.z_t.data).fold(S::zero(), |a, (&d, &z)| a + d * z);
        let d_temb_skip = self.skip.backward(p, g, &cache.temb, &Mat::from_vec(1, 1, vec![d_gate]));
        let dy = space_to_depth(d_eps, self.cfg.patch);
        let d_act = self.out.backward(p, g, &cache.out, &dy);
        let d_pre = silu_backward(&cache.out_pre, &d_act);
        let mut dm2 = self.out_norm.backward(p, g, &cache.out_norm, &d_pre);
        let (dm2_attn, mut dcond) = self.attn_u0.backward(p, g, &cache.attn_u0, cond, &dm2, extra(2));
        dm2.add_assign(&dm2_attn);
        let (dm1, mut dtemb) = self.res_u0.backward(p, g, &cache.res_u0, &cache.temb, &dm2);
        let dcat = self.merge.backward(p, g, &cache.merge, &dm1);
        let (du_up, dh0b_skip) = split_cols(&dcat, c0);
        let du = upsample2_backward(&du_up, lh, lw);
        let mut dh2 = self.up.backward(p, g, &cache.up, &du);
        let (dh2_attn, dc2) = self.attn_mid.backward(p, g, &cache.attn_mid, cond, &dh2, extra(1));
        dcond.add_assign(&dc2);
        dh2.add_assign(&dh2_attn);
        let (mut dh1b, dt) = self.res_mid.backward(p, g, &cache.res_mid, &cache.temb, &dh2);
        dtemb.add_assign(&dt);
        let (dh1b_attn, dc1) = self.attn_d1.backward(p, g, &cache.attn_d1, cond, &dh1b, extra(0));
        dcond.add_assign(&dc1);
        dh1b.add_assign(&dh1b_attn);
        let (dh1, dt) = self.res_d1.backward(p, g, &cache.res_d1, &cache.temb, &dh1b);
        dtemb.add_assign(&dt);
        let dpooled = self.down.backward(p, g, &cache.down, &dh1);
        let mut dh0b = avg_pool2_backward(&dpooled, h, w);
        dh0b.add_assign(&dh0b_skip);
        let (dh0, dt) = self.res_d0.backward(p, g, &cache.res_d0, &cache.temb, &dh0b);
        dtemb.add_assign(&dt);
        let _ = self.stem.backward(p, g, &cache.stem, &dh0);

        dtemb.add_assign(&d_temb_skip);
        let d_act_t = self.time2.backward(p, g, &cache.t_act, &dtemb);
        let d_pre_t = silu_backward(&cache.t_pre, &d_act_t);
        let _ = self.time1.backward(p, g, &cache.t_in, &d_pre_t);
        dcond
    }
}
