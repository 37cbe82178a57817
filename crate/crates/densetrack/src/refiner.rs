//! Recurrent refinement of flow / visibility / confidence fields.
//!
//! Each iteration fuses correlation patches, motion, sigmoided visibility
//! and confidence, and appearance features (context ‖ hidden) into a
//! single map, runs interleaved spatial (ConvNeXt-style, per timestep) and
//! temporal (pixel-aligned attention over the window axis) blocks, and
//! decodes additive revisions plus a new hidden state. Weights are shared
//! across iterations.
//!
//! Units: `flow` is stored in full-resolution pixel units everywhere. The
//! position used for correlation sampling is meshgrid + flow/8 (level-0
//! cell units); convex upsampling therefore never rescales flow values.

use serde::{Deserialize, Serialize};

use crate::correlation::{corr_patch_features, patch_vector_len};
use crate::error::{Error, Result};
use crate::numerics::ops::conv::ConvSpec;
use crate::numerics::parallel;
use crate::numerics::{
    concat, gelu, relu, sigmoid, softmax, Conv2d, Element, InitCtx, LayerNorm, LayerScale, Linear,
    MultiHeadAttention, Tensor,
};

pub const UPSAMPLE_FACTOR: usize = 8;
/// 8×8 fine slots per coarse cell, 9 neighbor weights each.
pub const UPSAMPLE_WEIGHTS: usize = UPSAMPLE_FACTOR * UPSAMPLE_FACTOR * 9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Space-time block count.
    pub n_blocks: usize,
    /// Spatial depthwise kernel size.
    pub kernel: usize,
    pub heads: usize,
    /// MLP expansion factor of the spatial block.
    pub expansion: usize,
    pub corr_radius: usize,
    pub corr_levels: usize,
    /// Refinement iterations K.
    pub iters: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            n_blocks: 3,
            kernel: 7,
            heads: 8,
            expansion: 4,
            corr_radius: 4,
            corr_levels: 5,
            iters: 4,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self, ctx_dim: usize) -> Result<()> {
        let dim = 2 * ctx_dim;
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::config(format!(
                "refiner dim {dim} not divisible by {} heads",
                self.heads
            )));
        }
        if self.n_blocks == 0 || self.iters == 0 || self.corr_levels == 0 {
            return Err(Error::config("refiner needs blocks, iters and levels >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("spatial kernel must be odd"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        patch_vector_len(self.corr_levels, self.corr_radius)
    }

    /// Total channels entering the input encoder:
    /// corr patches + motion (2) + vis (1) + conf (1) + appearance (2·ctx).
    pub fn input_channels(&self, ctx_dim: usize) -> usize {
        self.patch_len() + 2 + 1 + 1 + 2 * ctx_dim
    }
}

/// Low-resolution tracking state for one window.
#[derive(Clone)]
pub struct TrackState<E: Element> {
    /// [S,2,h,w], full-resolution pixel units, x then y.
    pub flow: Tensor<E>,
    /// [S,1,h,w] raw logits; sigmoid applied only on input/output paths.
    pub vis_logit: Tensor<E>,
    /// [S,1,h,w] raw logits.
    pub conf_logit: Tensor<E>,
    /// [S,ctx,h,w] recurrent state.
    pub hidden: Tensor<E>,
}

impl<E: Element> TrackState<E> {
    pub fn window_len(&self) -> usize {
        self.flow.shape()[0]
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.flow.shape()[2], self.flow.shape()[3])
    }
}

/// Additive revisions decoded from the block stack.
pub struct Revisions<E: Element> {
    pub dflow: Tensor<E>,
    pub dvis: Tensor<E>,
    pub dconf: Tensor<E>,
    pub new_hidden: Tensor<E>,
}

/// x_new = x_old + δx for flow and logits; hidden is replaced.
pub fn apply_revisions<E: Element>(state: &TrackState<E>, rev: &Revisions<E>) -> TrackState<E> {
    TrackState {
        flow: state.flow.add(&rev.dflow),
        vis_logit: state.vis_logit.add(&rev.dvis),
        conf_logit: state.conf_logit.add(&rev.dconf),
        hidden: rev.new_hidden.clone(),
    }
}

/// Interleaved sin/cos over the window axis; [S, dim] constants added to
/// the context features once per window, broadcast spatially.
pub fn time_embedding<E: Element>(s: usize, dim: usize) -> Tensor<E> {
    let pairs = dim / 2;
    let mut data = vec![E::zero(); s * dim];
    for t in 0..s {
        for i in 0..pairs {
            let omega = 1.0 / 10000f64.powf(i as f64 / pairs.max(1) as f64);
            let phase = t as f64 * omega;
            data[t * dim + 2 * i] = E::from_f64(phase.sin());
            data[t * dim + 2 * i + 1] = E::from_f64(phase.cos());
        }
        if dim % 2 == 1 {
            data[t * dim + dim - 1] = E::from_f64((t as f64).sin());
        }
    }
    Tensor::new(&[s, dim], data)
}

/// x[s,c,i,j] + bias[s,c]; the bias is a constant (no gradient).
pub fn add_time_bias<E: Element>(x: &Tensor<E>, bias: &Tensor<E>) -> Tensor<E> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4);
    assert_eq!(bias.shape(), &[s[0], s[1]], "time bias must be [S,C]");
    let hw = s[2] * s[3];
    let mut data = x.to_vec();
    {
        let bd = bias.data();
        for sc in 0..s[0] * s[1] {
            let b = bd[sc];
            for v in &mut data[sc * hw..(sc + 1) * hw] {
                *v += b;
            }
        }
    }
    let px = x.clone();
    Tensor::from_op(&s, data, &[x], move |g| {
        px.accum_grad(g);
    })
}

/// Query-frame cell-coordinate meshgrid tiled over the window:
/// [S,2,h,w] with channel 0 = x (column), channel 1 = y (row).
pub fn cell_meshgrid<E: Element>(s: usize, h: usize, w: usize) -> Tensor<E> {
    let mut one = vec![E::zero(); 2 * h * w];
    for i in 0..h {
        for j in 0..w {
            one[i * w + j] = E::from_f64(j as f64);
            one[h * w + i * w + j] = E::from_f64(i as f64);
        }
    }
    let mut data = Vec::with_capacity(s * 2 * h * w);
    for _ in 0..s {
        data.extend_from_slice(&one);
    }
    Tensor::new(&[s, 2, h, w], data)
}

// ----------------------------------------------------------------------
// Input encoding
// ----------------------------------------------------------------------

struct InputEncoder<E: Element> {
    corr1: Conv2d<E>,
    corr2: Conv2d<E>,
    motion1: Conv2d<E>,
    motion2: Conv2d<E>,
    merge1: Conv2d<E>,
    merge2: Conv2d<E>,
}

impl<E: Element> InputEncoder<E> {
    fn new(ctx: &mut InitCtx<E>, path: &str, cfg: &RefinerConfig, ctx_dim: usize) -> Self {
        let dim = 2 * ctx_dim;
        let corr_mid = scale_dim(96, ctx_dim);
        let motion_mid = scale_dim(48, ctx_dim);
        let merge_mid = ctx_dim;
        let p3 = ConvSpec { stride: 1, padding: 1, groups: 1 };
        let p1 = ConvSpec::default();
        InputEncoder {
            corr1: Conv2d::new(ctx, &format!("{path}.corr1"), cfg.patch_len(), corr_mid, 3, p3),
            corr2: Conv2d::new(ctx, &format!("{path}.corr2"), corr_mid, corr_mid, 3, p3),
            motion1: Conv2d::new(ctx, &format!("{path}.motion1"), 2, motion_mid, 3, p3),
            motion2: Conv2d::new(ctx, &format!("{path}.motion2"), motion_mid, motion_mid, 3, p3),
            merge1: Conv2d::new(
                ctx,
                &format!("{path}.merge1"),
                corr_mid + motion_mid,
                merge_mid,
                1,
                p1,
            ),
            merge2: Conv2d::new(
                ctx,
                &format!("{path}.merge2"),
                merge_mid + 1 + 1 + 2 * ctx_dim,
                dim,
                1,
                p1,
            ),
        }
    }

    /// Parallel 2-layer stems on correlation and motion, a 1×1 merge, then
    /// a second 1×1 merge with vis, conf and appearance, to 2·ctx channels.
    fn forward(
        &self,
        corr: &Tensor<E>,
        motion: &Tensor<E>,
        vis: &Tensor<E>,
        conf: &Tensor<E>,
        appearance: &Tensor<E>,
    ) -> Tensor<E> {
        let c = relu(&self.corr2.forward(&relu(&self.corr1.forward(corr))));
        let m = relu(&self.motion2.forward(&relu(&self.motion1.forward(motion))));
        let f = relu(&self.merge1.forward(&concat(&[&c, &m], 1)));
        self.merge2.forward(&concat(&[&f, vis, conf, appearance], 1))
    }
}

fn scale_dim(base_at_128: usize, ctx_dim: usize) -> usize {
    ((base_at_128 * ctx_dim) as f64 / 128.0 / 4.0).round().max(1.0) as usize * 4
}

// ----------------------------------------------------------------------
// Space-time block
// ----------------------------------------------------------------------

struct SpaceTimeBlock<E: Element> {
    dwconv: Conv2d<E>,
    sp_norm: LayerNorm<E>,
    sp_pw1: Linear<E>,
    sp_pw2: Linear<E>,
    sp_scale: LayerScale<E>,
    sp_post: Linear<E>,
    t_norm: LayerNorm<E>,
    attn: MultiHeadAttention<E>,
    t_scale: LayerScale<E>,
    t_post: Linear<E>,
}

impl<E: Element> SpaceTimeBlock<E> {
    fn new(ctx: &mut InitCtx<E>, path: &str, cfg: &RefinerConfig, dim: usize) -> Result<Self> {
        let k = cfg.kernel;
        Ok(SpaceTimeBlock {
            dwconv: Conv2d::new(
                ctx,
                &format!("{path}.dwconv"),
                dim,
                dim,
                k,
                ConvSpec { stride: 1, padding: k / 2, groups: dim },
            ),
            sp_norm: LayerNorm::new(ctx, &format!("{path}.sp_norm"), dim),
            sp_pw1: Linear::new(ctx, &format!("{path}.sp_pw1"), dim, cfg.expansion * dim),
            sp_pw2: Linear::new(ctx, &format!("{path}.sp_pw2"), cfg.expansion * dim, dim),
            sp_scale: LayerScale::new(ctx, &format!("{path}.sp_scale"), dim),
            sp_post: Linear::new(ctx, &format!("{path}.sp_post"), dim, dim),
            t_norm: LayerNorm::new(ctx, &format!("{path}.t_norm"), dim),
            attn: MultiHeadAttention::new(ctx, &format!("{path}.attn"), dim, cfg.heads)?,
            t_scale: LayerScale::new(ctx, &format!("{path}.t_scale"), dim),
            t_post: Linear::new(ctx, &format!("{path}.t_post"), dim, dim),
        })
    }

    /// Spatial sub-block per timestep, then pixel-aligned temporal
    /// attention over the S axis. The temporal part never mixes spatial
    /// positions.
    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let shape = x.shape().to_vec();
        let (s, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);

        // spatial: layer-scaled k×k grouped conv -> LN -> MLP -> residual -> linear
        let y = self.dwconv.forward(x);
        let yp = y.permute(&[0, 2, 3, 1]); // [S,h,w,C]
        let t = self.sp_norm.forward(&yp);
        let t = self.sp_pw1.forward(&t);
        let t = gelu(&t);
        let t = self.sp_pw2.forward(&t);
        let t = self.sp_scale.forward(&t);
        let xp = x.permute(&[0, 2, 3, 1]);
        let sp = self.sp_post.forward(&xp.add(&t)); // [S,h,w,C]

        // temporal: attention along S independently per pixel
        let z = sp.permute(&[1, 2, 0, 3]).reshape(&[h * w, s, c]);
        let t = self.t_norm.forward(&z);
        let t = self.attn.forward(&t);
        let t = self.t_scale.forward(&t);
        let z = self.t_post.forward(&z.add(&t));
        z.reshape(&[h, w, s, c]).permute(&[2, 3, 0, 1])
    }
}

// ----------------------------------------------------------------------
// Refiner
// ----------------------------------------------------------------------

pub struct Refiner<E: Element> {
    pub cfg: RefinerConfig,
    pub ctx_dim: usize,
    input_enc: InputEncoder<E>,
    blocks: Vec<SpaceTimeBlock<E>>,
    hidden_head: Conv2d<E>,
    revision_head: Conv2d<E>,
    mask1: Conv2d<E>,
    mask2: Conv2d<E>,
}

impl<E: Element> Refiner<E> {
    pub fn new(ctx: &mut InitCtx<E>, path: &str, cfg: &RefinerConfig, ctx_dim: usize) -> Result<Self> {
        cfg.validate(ctx_dim)?;
        let dim = 2 * ctx_dim;
        let input_enc = InputEncoder::new(ctx, &format!("{path}.input"), cfg, ctx_dim);
        let blocks = (0..cfg.n_blocks)
            .map(|i| SpaceTimeBlock::new(ctx, &format!("{path}.block{i}"), cfg, dim))
            .collect::<Result<Vec<_>>>()?;
        let p1 = ConvSpec::default();
        let hidden_head = Conv2d::new(ctx, &format!("{path}.head.hidden"), dim, ctx_dim, 1, p1);
        // Zero-initialized so the first training iteration is the identity
        // update on flow and logits.
        let revision_head = Conv2d::new(ctx, &format!("{path}.head.revision"), dim, 4, 1, p1);
        revision_head.weight.update_data(|d| d.iter_mut().for_each(|v| *v = E::zero()));
        let mask1 = Conv2d::new(
            ctx,
            &format!("{path}.mask1"),
            ctx_dim,
            2 * ctx_dim,
            3,
            ConvSpec { stride: 1, padding: 1, groups: 1 },
        );
        let mask2 = Conv2d::new(ctx, &format!("{path}.mask2"), 2 * ctx_dim, UPSAMPLE_WEIGHTS, 1, p1);
        Ok(Refiner {
            cfg: cfg.clone(),
            ctx_dim,
            input_enc,
            blocks,
            hidden_head,
            revision_head,
            mask1,
            mask2,
        })
    }

    /// Output channels of the decode head: ctx (next hidden) + 4 revisions.
    pub fn decode_channels(&self) -> usize {
        self.ctx_dim + 4
    }

    /// Fuse per-iteration inputs into a [S, 2·ctx, h, w] map.
    pub fn encode_inputs(
        &self,
        corr: &Tensor<E>,
        motion: &Tensor<E>,
        vis: &Tensor<E>,
        conf: &Tensor<E>,
        appearance: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let expect = self.cfg.patch_len();
        if corr.shape()[1] != expect {
            return Err(Error::config(format!(
                "correlation field has {} channels, config expects {expect}",
                corr.shape()[1]
            )));
        }
        if appearance.shape()[1] != 2 * self.ctx_dim {
            return Err(Error::config(format!(
                "appearance has {} channels, expected {}",
                appearance.shape()[1],
                2 * self.ctx_dim
            )));
        }
        Ok(self.input_enc.forward(corr, motion, vis, conf, appearance))
    }

    pub fn space_time_block(&self, i: usize, x: &Tensor<E>) -> Tensor<E> {
        self.blocks[i].forward(x)
    }

    /// Decode the block output into revisions + next hidden state.
    pub fn decode_revisions(&self, x: &Tensor<E>) -> Revisions<E> {
        let hidden = self.hidden_head.forward(x);
        let rev = self.revision_head.forward(x);
        Revisions {
            dflow: rev.slice(1, 0, 2),
            dvis: rev.slice(1, 2, 1),
            dconf: rev.slice(1, 3, 1),
            new_hidden: hidden,
        }
    }

    /// Per coarse cell: 64 fine slots × 9 neighbor weights, softmaxed over
    /// the 9 neighbors.
    pub fn decode_upsample_weights(&self, hidden: &Tensor<E>) -> Tensor<E> {
        let logits = self.mask2.forward(&relu(&self.mask1.forward(hidden)));
        let s = logits.shape().to_vec();
        let grouped = logits.reshape(&[s[0], UPSAMPLE_FACTOR * UPSAMPLE_FACTOR, 9, s[2], s[3]]);
        softmax(&grouped, 2)
            .expect("softmax over neighbor axis")
            .reshape(&s)
    }

    /// One full refinement pass: K iterations, all intermediate states
    /// returned (training supervises every step; inference keeps the last).
    pub fn refine(
        &self,
        state: TrackState<E>,
        query: &Tensor<E>,
        pyramid: &[Tensor<E>],
        context: &Tensor<E>,
        iters: usize,
    ) -> Result<Vec<TrackState<E>>> {
        let (h, w) = state.cells();
        let s = state.window_len();
        let grid = cell_meshgrid::<E>(s, h, w);
        let mut cur = state;
        let mut out = Vec::with_capacity(iters);
        for _ in 0..iters {
            let pos = grid.add(&cur.flow.scale(1.0 / UPSAMPLE_FACTOR as f64));
            let mut levels = Vec::with_capacity(pyramid.len());
            for (l, feats) in pyramid.iter().enumerate() {
                let pos_l = pos.scale(1.0 / (1 << l) as f64);
                levels.push(corr_patch_features(query, feats, &pos_l, self.cfg.corr_radius)?);
            }
            let level_refs: Vec<&Tensor<E>> = levels.iter().collect();
            let corr = concat(&level_refs, 1);
            let vis = sigmoid(&cur.vis_logit);
            let conf = sigmoid(&cur.conf_logit);
            let appearance = concat(&[context, &cur.hidden], 1);
            let mut x = self.encode_inputs(&corr, &cur.flow, &vis, &conf, &appearance)?;
            for b in &self.blocks {
                x = b.forward(&x);
            }
            let rev = self.decode_revisions(&x);
            cur = apply_revisions(&cur, &rev);
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Convex-upsample flow and logits of a state to full resolution.
    /// Returns ([S,2,H,W] flow, [S,1,H,W] vis logit, [S,1,H,W] conf logit).
    pub fn upsample_state(&self, st: &TrackState<E>) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
        let weights = self.decode_upsample_weights(&st.hidden);
        let fields = concat(&[&st.flow, &st.vis_logit, &st.conf_logit], 1);
        let up = convex_upsample(&fields, &weights);
        (up.slice(1, 0, 2), up.slice(1, 2, 1), up.slice(1, 3, 1))
    }
}

// ----------------------------------------------------------------------
// Convex upsampling
// ----------------------------------------------------------------------

/// Upsample [S,C,h,w] to [S,C,8h,8w]: each fine pixel is a convex
/// combination of its coarse cell's 3×3 neighborhood (edge-clamped), with
/// weights [S,576,h,w] laid out as slot-major (slot = (fi%8)*8 + fj%8,
/// then 9 neighbors row-major). Weights are assumed softmaxed over the 9.
pub fn convex_upsample<E: Element>(field: &Tensor<E>, weights: &Tensor<E>) -> Tensor<E> {
    let fs = field.shape().to_vec();
    let ws = weights.shape().to_vec();
    assert_eq!(fs.len(), 4);
    let (s, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    assert_eq!(
        ws,
        vec![s, UPSAMPLE_WEIGHTS, h, w],
        "upsample weights shape"
    );
    let (hh, ww) = (h * UPSAMPLE_FACTOR, w * UPSAMPLE_FACTOR);
    let mut out = vec![E::zero(); s * c * hh * ww];
    {
        let f_ref = field.data();
        let w_ref = weights.data();
        let fd: &[E] = &f_ref;
        let wd: &[E] = &w_ref;
        parallel::for_each_chunk(&mut out, hh * ww, |plane, op| {
            let (si, ci) = (plane / c, plane % c);
            let fplane = &fd[(si * c + ci) * h * w..(si * c + ci + 1) * h * w];
            let wbase = si * UPSAMPLE_WEIGHTS * h * w;
            for fi in 0..hh {
                let cy = fi / UPSAMPLE_FACTOR;
                let di = fi % UPSAMPLE_FACTOR;
                for fj in 0..ww {
                    let cx = fj / UPSAMPLE_FACTOR;
                    let dj = fj % UPSAMPLE_FACTOR;
                    let slot = di * UPSAMPLE_FACTOR + dj;
                    let mut acc = E::zero();
                    for t in 0..9 {
                        let ny = (cy as isize + (t / 3) as isize - 1).clamp(0, h as isize - 1);
                        let nx = (cx as isize + (t % 3) as isize - 1).clamp(0, w as isize - 1);
                        let wv = wd[wbase + (slot * 9 + t) * h * w + cy * w + cx];
                        acc += wv * fplane[ny as usize * w + nx as usize];
                    }
                    op[fi * ww + fj] = acc;
                }
            }
        });
    }
    let (pf, pw) = (field.clone(), weights.clone());
    Tensor::from_op(&[s, c, hh, ww], out, &[field, weights], move |g| {
        let fdv = pf.data();
        let wdv = pw.data();
        let mut dfield = vec![E::zero(); s * c * h * w];
        let mut dweights = vec![E::zero(); s * UPSAMPLE_WEIGHTS * h * w];
        for si in 0..s {
            let wbase = si * UPSAMPLE_WEIGHTS * h * w;
            for ci in 0..c {
                let fplane = &fdv[(si * c + ci) * h * w..(si * c + ci + 1) * h * w];
                let dfplane_base = (si * c + ci) * h * w;
                let gplane = &g[(si * c + ci) * hh * ww..(si * c + ci + 1) * hh * ww];
                for fi in 0..hh {
                    let cy = fi / UPSAMPLE_FACTOR;
                    let di = fi % UPSAMPLE_FACTOR;
                    for fj in 0..ww {
                        let gv = gplane[fi * ww + fj];
                        if gv == E::zero() {
                            continue;
                        }
                        let cx = fj / UPSAMPLE_FACTOR;
                        let dj = fj % UPSAMPLE_FACTOR;
                        let slot = di * UPSAMPLE_FACTOR + dj;
                        for t in 0..9 {
                            let ny = (cy as isize + (t / 3) as isize - 1).clamp(0, h as isize - 1);
                            let nx = (cx as isize + (t % 3) as isize - 1).clamp(0, w as isize - 1);
                            let widx = wbase + (slot * 9 + t) * h * w + cy * w + cx;
                            dfield[dfplane_base + ny as usize * w + nx as usize] += gv * wdv[widx];
                            dweights[widx] += gv * fplane[ny as usize * w + nx as usize];
                        }
                    }
                }
            }
        }
        if pf.requires_grad() {
            pf.accum_grad(&dfield);
        }
        if pw.requires_grad() {
            pw.accum_grad(&dweights);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> RefinerConfig {
        RefinerConfig {
            n_blocks: 2,
            kernel: 7,
            heads: 2,
            expansion: 4,
            corr_radius: 1,
            corr_levels: 2,
            iters: 2,
        }
    }

    fn build(ctx_dim: usize) -> (Refiner<f32>, ParamSet<f32>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Refiner::new(
            &mut InitCtx::new(&mut ps, &mut rng),
            "refiner",
            &tiny_cfg(),
            ctx_dim,
        )
        .unwrap();
        (r, ps)
    }

    #[test]
    fn full_scale_channel_arithmetic() {
        let cfg = RefinerConfig::default();
        assert_eq!(cfg.patch_len(), 405);
        assert_eq!(cfg.input_channels(128), 665);
        let (r, _) = {
            let mut ps = ParamSet::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = Refiner::new(&mut InitCtx::new(&mut ps, &mut rng), "refiner", &cfg, 128).unwrap();
            (r, ps)
        };
        assert_eq!(r.decode_channels(), 132);
    }

    #[test]
    fn zero_init_head_gives_zero_revisions() {
        let (r, _) = build(8);
        let x = Tensor::new(&[1, 16, 2, 2], (0..64).map(|i| i as f32 * 0.1).collect::<Vec<_>>());
        let rev = r.decode_revisions(&x);
        assert!(rev.dflow.to_vec().iter().all(|&v| v == 0.0));
        assert!(rev.dvis.to_vec().iter().all(|&v| v == 0.0));
        assert!(rev.dconf.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(rev.new_hidden.shape(), &[1, 8, 2, 2]);
        assert_eq!(
            rev.new_hidden.shape()[1] + rev.dflow.shape()[1] + rev.dvis.shape()[1] + rev.dconf.shape()[1],
            r.decode_channels()
        );
    }

    #[test]
    fn apply_revisions_is_additive() {
        let st = TrackState {
            flow: Tensor::<f32>::zeros(&[1, 2, 2, 2]),
            vis_logit: Tensor::zeros(&[1, 1, 2, 2]),
            conf_logit: Tensor::zeros(&[1, 1, 2, 2]),
            hidden: Tensor::zeros(&[1, 4, 2, 2]),
        };
        let rev = Revisions {
            dflow: Tensor::new(&[1, 2, 2, 2], vec![1.5f32, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]),
            dvis: Tensor::ones(&[1, 1, 2, 2]),
            dconf: Tensor::zeros(&[1, 1, 2, 2]),
            new_hidden: Tensor::ones(&[1, 4, 2, 2]),
        };
        let st2 = apply_revisions(&st, &rev);
        assert_eq!(st2.flow.to_vec()[0], 1.5);
        assert_eq!(st2.flow.to_vec()[4], -2.0);
        // two applications equal one application of the sum on flow/logits
        let st3 = apply_revisions(&st2, &rev);
        assert_eq!(st3.flow.to_vec()[0], 3.0);
        assert_eq!(st3.vis_logit.to_vec()[0], 2.0);
        // zero revision leaves state unchanged
        let zero = Revisions {
            dflow: Tensor::zeros(&[1, 2, 2, 2]),
            dvis: Tensor::zeros(&[1, 1, 2, 2]),
            dconf: Tensor::zeros(&[1, 1, 2, 2]),
            new_hidden: st3.hidden.clone(),
        };
        let st4 = apply_revisions(&st3, &zero);
        assert_eq!(st4.flow.to_vec(), st3.flow.to_vec());
    }

    #[test]
    fn upsample_weights_softmax_property() {
        let (r, _) = build(8);
        let hidden = Tensor::new(&[1, 8, 2, 2], (0..32).map(|i| (i as f32).sin()).collect::<Vec<_>>());
        let w = r.decode_upsample_weights(&hidden);
        assert_eq!(w.shape(), &[1, 576, 2, 2]);
        let d = w.to_vec();
        for slot in 0..64 {
            for cell in 0..4 {
                let s: f32 = (0..9).map(|t| d[(slot * 9 + t) * 4 + cell]).sum();
                assert!((s - 1.0).abs() < 1e-5, "slot {slot} cell {cell}: {s}");
            }
        }
    }

    #[test]
    fn convex_upsample_preserves_constants() {
        // any softmaxed weights: use uniform 1/9
        let field = Tensor::<f32>::new(&[1, 1, 2, 2], vec![3.25; 4]);
        let weights = Tensor::new(&[1, 576, 2, 2], vec![1.0 / 9.0; 576 * 4]);
        let up = convex_upsample(&field, &weights);
        assert_eq!(up.shape(), &[1, 1, 16, 16]);
        assert!(up.to_vec().iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn one_hot_center_weights_replicate_cells() {
        let field = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut wdata = vec![0.0f32; 576 * 4];
        for slot in 0..64 {
            for cell in 0..4 {
                wdata[(slot * 9 + 4) * 4 + cell] = 1.0; // center neighbor
            }
        }
        let up = convex_upsample(&field, &Tensor::new(&[1, 576, 2, 2], wdata));
        let d = up.to_vec();
        for fi in 0..16 {
            for fj in 0..16 {
                let expect = field.to_vec()[(fi / 8) * 2 + fj / 8];
                assert_eq!(d[fi * 16 + fj], expect);
            }
        }
    }

    #[test]
    fn upsampled_values_stay_in_neighborhood_envelope() {
        let field = Tensor::<f32>::new(&[1, 1, 2, 3], vec![0.0, 5.0, -1.0, 2.0, 7.0, 3.0]);
        // random-ish softmaxed weights
        let mut wdata = vec![0.0f32; 576 * 6];
        for slot in 0..64 {
            for cell in 0..6 {
                let mut sum = 0.0;
                let mut vals = [0.0f32; 9];
                for (t, v) in vals.iter_mut().enumerate() {
                    *v = ((slot * 9 + t + cell * 31) % 7) as f32 + 0.1;
                    sum += *v;
                }
                for (t, v) in vals.iter().enumerate() {
                    wdata[(slot * 9 + t) * 6 + cell] = v / sum;
                }
            }
        }
        let up = convex_upsample(&field, &Tensor::new(&[1, 576, 2, 3], wdata));
        let fmin = -1.0;
        let fmax = 7.0;
        assert!(up.to_vec().iter().all(|&v| v >= fmin && v <= fmax));
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e = time_embedding::<f32>(5, 8);
        assert_eq!(e.shape(), &[5, 8]);
        assert!(e.to_vec().iter().all(|v| v.abs() <= 1.0));
        // t=0 rows: sin->0, cos->1
        let d = e.to_vec();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
    }

    #[test]
    fn temporal_block_is_pixel_aligned() {
        // inputs differing at one spatial cell differ only at that cell after
        // the full block (the spatial conv mixes, so test with kernel 1).
        let cfg = RefinerConfig {
            kernel: 1,
            n_blocks: 1,
            heads: 2,
            corr_levels: 1,
            corr_radius: 1,
            ..tiny_cfg()
        };
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Refiner::new(&mut InitCtx::new(&mut ps, &mut rng), "r", &cfg, 4).unwrap();
        let base: Vec<f32> = (0..2 * 8 * 9).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut bumped = base.clone();
        bumped[4] += 1.0; // (s=0, c=0, cell 4)
        let y0 = r.space_time_block(0, &Tensor::new(&[2, 8, 3, 3], base));
        let y1 = r.space_time_block(0, &Tensor::new(&[2, 8, 3, 3], bumped));
        let d0 = y0.to_vec();
        let d1 = y1.to_vec();
        for s in 0..2 {
            for c in 0..8 {
                for cell in 0..9 {
                    let i = (s * 8 + c) * 9 + cell;
                    if cell == 4 {
                        continue;
                    }
                    assert!(
                        (d0[i] - d1[i]).abs() < 1e-6,
                        "s={s} c={c} cell={cell} changed"
                    );
                }
            }
        }
    }
}
