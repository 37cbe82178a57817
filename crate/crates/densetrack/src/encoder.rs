//! Frame encoding: stride-8 appearance features per frame.
//!
//! Two backbones share the output contract (S,3,H,W) -> (S,D,H/8,W/8):
//!
//! * `convnext_main` — the first three stages of a ConvNeXt, with the
//!   stage-3 downsampler converted from a 2×2 stride-2 kernel to a 3×3
//!   stride-1 kernel (bicubic resample of the weights, rescaled by 4/9 for
//!   the area change), which turns the nominal stride 16 into stride 8.
//!   A learned 1×1 projection maps the last stage to the feature dim D.
//! * `basic_tiny` — a residual encoder with instance norm, stride 8 by
//!   construction, whose output is used directly as D-channel features.
//!
//! The query frame's features are split channel-wise into "context"
//! (conditioning for the refiner) and "hidden" (recurrent-state init);
//! `basic_tiny` reuses the whole map for both roles rather than splitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::conv::ConvSpec;
use crate::numerics::{
    bicubic_resize, gelu, instance_norm2d, relu, Conv2d, Element, InitCtx, LayerNorm, LayerScale,
    Tensor,
};

/// Fixed per-channel input normalization (RGB in [0,1]).
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ConvnextMain,
    BasicTiny,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output channel count D at scale 1.
    pub feature_dim: usize,
    pub stage_dims: [usize; 3],
    pub block_depths: [usize; 3],
    /// Global width multiplier for desk-scale runs.
    pub scale: f64,
}

impl BackboneConfig {
    pub fn convnext_main() -> Self {
        BackboneConfig {
            kind: BackboneKind::ConvnextMain,
            feature_dim: 256,
            stage_dims: [96, 192, 384],
            block_depths: [3, 3, 9],
            scale: 1.0,
        }
    }

    pub fn basic_tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::BasicTiny,
            feature_dim: 128,
            stage_dims: [96, 144, 192],
            block_depths: [2, 2, 2],
            scale: 1.0,
        }
    }

    fn scaled(&self, v: usize) -> usize {
        ((v as f64 * self.scale / 4.0).round() as usize).max(1) * 4
    }

    pub fn dim(&self, stage: usize) -> usize {
        self.scaled(self.stage_dims[stage])
    }

    /// Feature channels D after scaling.
    pub fn out_dim(&self) -> usize {
        self.scaled(self.feature_dim)
    }

    /// Channels of the context (and hidden) half of the query features.
    pub fn context_dim(&self) -> usize {
        match self.kind {
            BackboneKind::ConvnextMain => self.out_dim() / 2,
            BackboneKind::BasicTiny => self.out_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BackboneKind::ConvnextMain && self.out_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "feature dim {} must be even to split into context/hidden",
                self.out_dim()
            )));
        }
        if self.scale <= 0.0 {
            return Err(Error::config("backbone scale must be positive"));
        }
        Ok(())
    }
}

/// Per-window feature state: target features for every frame plus the
/// context/hidden split of the query features.
pub struct FeatureBundle<E: Element> {
    /// [S, D, H/8, W/8]
    pub frame_feats: Tensor<E>,
    /// [ctx, H/8, W/8]
    pub query_context: Tensor<E>,
    /// [ctx, H/8, W/8]
    pub query_hidden_init: Tensor<E>,
}

// ----------------------------------------------------------------------
// ConvNeXt pieces
// ----------------------------------------------------------------------

struct ConvNextBlock<E: Element> {
    dwconv: Conv2d<E>,
    norm: LayerNorm<E>,
    pw1: crate::numerics::Linear<E>,
    pw2: crate::numerics::Linear<E>,
    scale: LayerScale<E>,
}

impl<E: Element> ConvNextBlock<E> {
    fn new(ctx: &mut InitCtx<E>, path: &str, dim: usize) -> Self {
        ConvNextBlock {
            dwconv: Conv2d::new(
                ctx,
                &format!("{path}.dwconv"),
                dim,
                dim,
                7,
                ConvSpec { stride: 1, padding: 3, groups: dim },
            ),
            norm: LayerNorm::new(ctx, &format!("{path}.norm"), dim),
            pw1: crate::numerics::Linear::new(ctx, &format!("{path}.pw1"), dim, 4 * dim),
            pw2: crate::numerics::Linear::new(ctx, &format!("{path}.pw2"), 4 * dim, dim),
            scale: LayerScale::new(ctx, &format!("{path}.scale"), dim),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let y = self.dwconv.forward(x);
        // channels-last for norm + MLP
        let yp = y.permute(&[0, 2, 3, 1]);
        let yp = self.norm.forward(&yp);
        let yp = self.pw1.forward(&yp);
        let yp = gelu(&yp);
        let yp = self.pw2.forward(&yp);
        let yp = self.scale.forward(&yp);
        x.add(&yp.permute(&[0, 3, 1, 2]))
    }
}

/// Layer norm applied to an NCHW tensor (permutes to channels-last inside).
struct NormCf<E: Element>(LayerNorm<E>);

impl<E: Element> NormCf<E> {
    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        self.0
            .forward(&x.permute(&[0, 2, 3, 1]))
            .permute(&[0, 3, 1, 2])
    }
}

struct ConvNextEncoder<E: Element> {
    stem_conv: Conv2d<E>,
    stem_norm: NormCf<E>,
    stage1: Vec<ConvNextBlock<E>>,
    down1_norm: NormCf<E>,
    down1_conv: Conv2d<E>,
    stage2: Vec<ConvNextBlock<E>>,
    down2_norm: NormCf<E>,
    down2_conv: Conv2d<E>, // converted: 3x3 stride 1
    stage3: Vec<ConvNextBlock<E>>,
}

impl<E: Element> ConvNextEncoder<E> {
    fn new(ctx: &mut InitCtx<E>, path: &str, cfg: &BackboneConfig) -> Self {
        let (d0, d1, d2) = (cfg.dim(0), cfg.dim(1), cfg.dim(2));
        let stage = |ctx: &mut InitCtx<E>, name: &str, dim: usize, depth: usize| {
            (0..depth)
                .map(|i| ConvNextBlock::new(ctx, &format!("{path}.{name}.{i}"), dim))
                .collect::<Vec<_>>()
        };
        ConvNextEncoder {
            stem_conv: Conv2d::new(
                ctx,
                &format!("{path}.stem.conv"),
                3,
                d0,
                4,
                ConvSpec { stride: 4, padding: 0, groups: 1 },
            ),
            stem_norm: NormCf(LayerNorm::new(ctx, &format!("{path}.stem.norm"), d0)),
            stage1: stage(ctx, "stage1", d0, cfg.block_depths[0]),
            down1_norm: NormCf(LayerNorm::new(ctx, &format!("{path}.down1.norm"), d0)),
            down1_conv: Conv2d::new(
                ctx,
                &format!("{path}.down1.conv"),
                d0,
                d1,
                2,
                ConvSpec { stride: 2, padding: 0, groups: 1 },
            ),
            stage2: stage(ctx, "stage2", d1, cfg.block_depths[1]),
            down2_norm: NormCf(LayerNorm::new(ctx, &format!("{path}.down2.norm"), d1)),
            // The stride-1 replacement of the stage-3 downsampler. Built as
            // 3x3 directly; convert_stride2_kernel reproduces these weights
            // from a 2x2 stride-2 kernel when importing such weights.
            down2_conv: Conv2d::new(
                ctx,
                &format!("{path}.down2.conv"),
                d1,
                d2,
                3,
                ConvSpec { stride: 1, padding: 1, groups: 1 },
            ),
            stage3: stage(ctx, "stage3", d2, cfg.block_depths[2]),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let mut y = self.stem_norm.forward(&self.stem_conv.forward(x));
        for b in &self.stage1 {
            y = b.forward(&y);
        }
        y = self.down1_conv.forward(&self.down1_norm.forward(&y));
        for b in &self.stage2 {
            y = b.forward(&y);
        }
        y = self.down2_conv.forward(&self.down2_norm.forward(&y));
        for b in &self.stage3 {
            y = b.forward(&y);
        }
        y
    }
}

// ----------------------------------------------------------------------
// Residual (basic) pieces
// ----------------------------------------------------------------------

const INSTANCE_NORM_EPS: f64 = 1e-5;

struct ResBlock<E: Element> {
    conv1: Conv2d<E>,
    conv2: Conv2d<E>,
    shortcut: Option<Conv2d<E>>,
}

impl<E: Element> ResBlock<E> {
    fn new(ctx: &mut InitCtx<E>, path: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(
                ctx,
                &format!("{path}.conv1"),
                in_c,
                out_c,
                3,
                ConvSpec { stride, padding: 1, groups: 1 },
            ),
            conv2: Conv2d::new(
                ctx,
                &format!("{path}.conv2"),
                out_c,
                out_c,
                3,
                ConvSpec { stride: 1, padding: 1, groups: 1 },
            ),
            shortcut: (in_c != out_c || stride != 1).then(|| {
                Conv2d::new(
                    ctx,
                    &format!("{path}.shortcut"),
                    in_c,
                    out_c,
                    1,
                    ConvSpec { stride, padding: 0, groups: 1 },
                )
            }),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let y = relu(&instance_norm2d(&self.conv1.forward(x), INSTANCE_NORM_EPS));
        let y = instance_norm2d(&self.conv2.forward(&y), INSTANCE_NORM_EPS);
        let short = match &self.shortcut {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        relu(&y.add(&short))
    }
}

struct BasicEncoder<E: Element> {
    conv1: Conv2d<E>,
    layers: Vec<ResBlock<E>>,
    proj: Conv2d<E>,
}

impl<E: Element> BasicEncoder<E> {
    fn new(ctx: &mut InitCtx<E>, path: &str, cfg: &BackboneConfig) -> Self {
        let (d0, d1, d2) = (cfg.dim(0), cfg.dim(1), cfg.dim(2));
        let mut layers = Vec::new();
        for i in 0..cfg.block_depths[0] {
            layers.push(ResBlock::new(ctx, &format!("{path}.layer1.{i}"), d0, d0, 1));
        }
        for i in 0..cfg.block_depths[1] {
            let (ic, s) = if i == 0 { (d0, 2) } else { (d1, 1) };
            layers.push(ResBlock::new(ctx, &format!("{path}.layer2.{i}"), ic, d1, s));
        }
        for i in 0..cfg.block_depths[2] {
            let (ic, s) = if i == 0 { (d1, 2) } else { (d2, 1) };
            layers.push(ResBlock::new(ctx, &format!("{path}.layer3.{i}"), ic, d2, s));
        }
        BasicEncoder {
            conv1: Conv2d::new(
                ctx,
                &format!("{path}.conv1"),
                3,
                d0,
                7,
                ConvSpec { stride: 2, padding: 3, groups: 1 },
            ),
            layers,
            proj: Conv2d::new(
                ctx,
                &format!("{path}.proj"),
                d2,
                cfg.out_dim(),
                1,
                ConvSpec::default(),
            ),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let mut y = relu(&instance_norm2d(&self.conv1.forward(x), INSTANCE_NORM_EPS));
        for b in &self.layers {
            y = b.forward(&y);
        }
        self.proj.forward(&y)
    }
}

// ----------------------------------------------------------------------
// Public encoder
// ----------------------------------------------------------------------

enum Body<E: Element> {
    ConvNext {
        backbone: ConvNextEncoder<E>,
        proj: Conv2d<E>,
    },
    Basic(BasicEncoder<E>),
}

pub struct Encoder<E: Element> {
    pub cfg: BackboneConfig,
    body: Body<E>,
}

impl<E: Element> Encoder<E> {
    /// Registers parameters under `{path}.backbone.*` (counted as backbone
    /// budget) and `{path}.proj.*` for the feature projection.
    pub fn new(ctx: &mut InitCtx<E>, path: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.kind {
            BackboneKind::ConvnextMain => Body::ConvNext {
                backbone: ConvNextEncoder::new(ctx, &format!("{path}.backbone"), cfg),
                proj: Conv2d::new(
                    ctx,
                    &format!("{path}.proj"),
                    cfg.dim(2),
                    cfg.out_dim(),
                    1,
                    ConvSpec::default(),
                ),
            },
            BackboneKind::BasicTiny => Body::Basic(BasicEncoder::new(
                ctx,
                &format!("{path}.backbone"),
                cfg,
            )),
        };
        Ok(Encoder {
            cfg: cfg.clone(),
            body,
        })
    }

    /// (S,3,H,W) in [0,1] RGB -> (S,D,H/8,W/8). H and W must be multiples
    /// of 8 (the tracker pads beforehand).
    pub fn encode_frames(&self, frames: &Tensor<E>) -> Result<Tensor<E>> {
        let s = frames.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("frames", "[S,3,H,W]", format!("{s:?}"), "encode_frames"));
        }
        let (h, w) = (s[2], s[3]);
        if h % STRIDE != 0 {
            return Err(Error::arg(format!("frame height {h} not a multiple of {STRIDE}")));
        }
        if w % STRIDE != 0 {
            return Err(Error::arg(format!("frame width {w} not a multiple of {STRIDE}")));
        }
        let x = normalize_frames(frames);
        let y = match &self.body {
            Body::ConvNext { backbone, proj } => proj.forward(&backbone.forward(&x)),
            Body::Basic(b) => b.forward(&x),
        };
        debug_assert_eq!(y.shape()[2], h / STRIDE);
        debug_assert_eq!(y.shape()[3], w / STRIDE);
        Ok(y)
    }
}

/// Subtract the fixed channel means and divide by the stds. Frames are
/// inputs, never differentiated through.
fn normalize_frames<E: Element>(frames: &Tensor<E>) -> Tensor<E> {
    let s = frames.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = frames.to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let mean = E::from_f64(INPUT_MEAN[ci]);
            let inv_std = E::from_f64(1.0 / INPUT_STD[ci]);
            for v in &mut data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                *v = (*v - mean) * inv_std;
            }
        }
    }
    Tensor::new(&s, data)
}

/// Split query features into context/hidden halves along channels.
/// `basic_tiny` reuses the whole map for both roles.
pub fn split_context_hidden<E: Element>(
    query_feat: &Tensor<E>,
    kind: BackboneKind,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let s = query_feat.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("query_feat", "[D,h,w]", format!("{s:?}"), "split_context_hidden"));
    }
    let d = s[0];
    match kind {
        BackboneKind::ConvnextMain => {
            if d % 2 != 0 {
                return Err(Error::config(format!(
                    "cannot split odd feature dim {d} into context/hidden"
                )));
            }
            Ok((
                query_feat.slice(0, 0, d / 2),
                query_feat.slice(0, d / 2, d / 2),
            ))
        }
        BackboneKind::BasicTiny => Ok((query_feat.clone(), query_feat.clone())),
    }
}

/// S identical copies of the query feature map: [D,h,w] -> [S,D,h,w].
pub fn tile_query<E: Element>(query_feat: &Tensor<E>, s: usize) -> Tensor<E> {
    query_feat.tile_outer(s)
}

/// Convert a 2×2 stride-2 downsampling kernel into the 3×3 stride-1 kernel
/// used at stride 8: bicubic resample onto a 3×3 grid spanning the same
/// support, scaled by 4/9 for the area change.
pub fn convert_stride2_kernel<E: Element>(w: &Tensor<E>) -> Result<Tensor<E>> {
    let s = w.shape().to_vec();
    if s.len() != 4 || s[2] != 2 || s[3] != 2 {
        return Err(Error::arg(format!(
            "convert_stride2_kernel expects [O,C,2,2], got {s:?}"
        )));
    }
    let (o, c) = (s[0], s[1]);
    let mut out = vec![E::zero(); o * c * 9];
    let scale = E::from_f64(4.0 / 9.0);
    {
        let wd = w.data();
        for oc in 0..o * c {
            let k = bicubic_resize(&wd[oc * 4..(oc + 1) * 4], 2, 2, 3, 3);
            for (dst, v) in out[oc * 9..(oc + 1) * 9].iter_mut().zip(k) {
                *dst = v * scale;
            }
        }
    }
    Ok(Tensor::new(&[o, c, 3, 3], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<E: Element>(cfg: &BackboneConfig) -> (Encoder<E>, ParamSet<E>) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut InitCtx::new(&mut ps, &mut rng), "encoder", cfg).unwrap();
        (enc, ps)
    }

    #[test]
    fn convnext_backbone_parameter_budget() {
        let (_, ps) = build::<f32>(&BackboneConfig::convnext_main());
        let n = ps.total_values_with_prefix("encoder.backbone") as f64;
        let target = 12.72e6;
        assert!(
            (n - target).abs() / target < 0.01,
            "backbone params {n} not within 1% of {target}"
        );
    }

    #[test]
    fn shape_contract_stride_8() {
        let cfg = BackboneConfig {
            scale: 0.25,
            ..BackboneConfig::basic_tiny()
        };
        let (enc, _) = build::<f32>(&cfg);
        let frames = Tensor::zeros(&[2, 3, 64, 96]);
        let y = enc.encode_frames(&frames).unwrap();
        assert_eq!(y.shape(), &[2, cfg.out_dim(), 8, 12]);
    }

    #[test]
    fn rejects_unpadded_input() {
        let (enc, _) = build::<f32>(&BackboneConfig {
            scale: 0.25,
            ..BackboneConfig::basic_tiny()
        });
        assert!(enc.encode_frames(&Tensor::zeros(&[1, 3, 60, 64])).is_err());
    }

    #[test]
    fn identical_frames_identical_features() {
        let cfg = BackboneConfig {
            scale: 0.25,
            ..BackboneConfig::basic_tiny()
        };
        let (enc, _) = build::<f32>(&cfg);
        let mut frame = Vec::new();
        for i in 0..3 * 32 * 32 {
            frame.push(((i * 31) % 255) as f32 / 255.0);
        }
        let mut two = frame.clone();
        two.extend_from_slice(&frame);
        let y = enc
            .encode_frames(&Tensor::new(&[2, 3, 32, 32], two))
            .unwrap();
        let d = y.to_vec();
        let half = d.len() / 2;
        assert_eq!(d[..half], d[half..]);
    }

    #[test]
    fn split_halves_and_rejoin() {
        let q = Tensor::<f32>::new(&[4, 2, 2], (0..16).map(|i| i as f32).collect());
        let (ctx, hid) = split_context_hidden(&q, BackboneKind::ConvnextMain).unwrap();
        assert_eq!(ctx.shape(), &[2, 2, 2]);
        let rejoined = crate::numerics::concat(&[&ctx, &hid], 0);
        assert_eq!(rejoined.to_vec(), q.to_vec());
    }

    #[test]
    fn basic_tiny_shares_context_and_hidden() {
        let q = Tensor::<f32>::new(&[3, 2, 2], (0..12).map(|i| i as f32).collect());
        let (ctx, hid) = split_context_hidden(&q, BackboneKind::BasicTiny).unwrap();
        assert_eq!(ctx.to_vec(), q.to_vec());
        assert_eq!(hid.to_vec(), q.to_vec());
    }

    #[test]
    fn tile_query_slices_identical() {
        let q = Tensor::<f32>::new(&[2, 2, 2], (0..8).map(|i| i as f32).collect());
        let t = tile_query(&q, 16);
        assert_eq!(t.shape(), &[16, 2, 2, 2]);
        let d = t.to_vec();
        for s in 0..16 {
            assert_eq!(d[s * 8..(s + 1) * 8], d[..8]);
        }
    }

    #[test]
    fn stride2_conversion_constant_kernel() {
        let w = Tensor::<f64>::new(&[1, 1, 2, 2], vec![3.0; 4]);
        let out = convert_stride2_kernel(&w).unwrap();
        let d = out.to_vec();
        assert!(d.iter().all(|&v| (v - 3.0 * 4.0 / 9.0).abs() < 1e-12));
        let total: f64 = d.iter().sum();
        assert!((total - 12.0).abs() < 1e-9); // output sum equals input sum 4c
    }

    #[test]
    fn stride2_conversion_is_linear() {
        let w1 = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let w2 = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.2, 0.4, -1.0, 2.0]);
        let combo = Tensor::<f64>::new(
            &[1, 1, 2, 2],
            w1.to_vec()
                .iter()
                .zip(w2.to_vec())
                .map(|(&a, b)| 2.0 * a - 3.0 * b)
                .collect::<Vec<_>>(),
        );
        let c1 = convert_stride2_kernel(&w1).unwrap().to_vec();
        let c2 = convert_stride2_kernel(&w2).unwrap().to_vec();
        let cc = convert_stride2_kernel(&combo).unwrap().to_vec();
        for i in 0..9 {
            assert!((cc[i] - (2.0 * c1[i] - 3.0 * c2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn stride2_conversion_rejects_other_sizes() {
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        assert!(convert_stride2_kernel(&w).is_err());
    }
}
