//! Procedural sprite videos with analytically exact ground truth.
//!
//! A scene is a stack of textured sprites (plus a textured background
//! plane) with one invertible affine transform per frame mapping sprite-
//! local coordinates into the image. Everything downstream is closed
//! form: the pixel p owned by sprite s at frame 0 maps to
//! A_t(A_0⁻¹(p)) at frame t, its flow is that minus p, and it is visible
//! iff the mapped point is in bounds and no strictly nearer sprite covers
//! it. Rendering, dense ground truth and sparse tracks all evaluate the
//! same transforms, so labels are exact rather than rendered-and-matched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

// ----------------------------------------------------------------------
// Affine transforms
// ----------------------------------------------------------------------

/// Row-major 2×3: [x'; y'] = [[a b]; [d e]]·[x; y] + [c; f].
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine { a: 1.0, b: 0.0, c: 0.0, d: 0.0, e: 1.0, f: 0.0 }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine { a: 1.0, b: 0.0, c: tx, d: 0.0, e: 1.0, f: ty }
    }

    /// Similarity about a center point: scale, rotate, then translate.
    pub fn similarity(center: (f64, f64), scale: f64, angle: f64, shift: (f64, f64)) -> Self {
        let (s, c) = (angle.sin(), angle.cos());
        let (a, b, d, e) = (scale * c, -scale * s, scale * s, scale * c);
        // T(center + shift) ∘ R·S ∘ T(−center)
        let cx = center.0 + shift.0 - (a * center.0 + b * center.1);
        let cy = center.1 + shift.1 - (d * center.0 + e * center.1);
        Affine { a, b, c: cx, d, e, f: cy }
    }

    #[inline]
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a * p.0 + self.b * p.1 + self.c,
            self.d * p.0 + self.e * p.1 + self.f,
        )
    }

    pub fn det(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn inverse(&self) -> Option<Affine> {
        let det = self.det();
        if det.abs() < 1e-9 {
            return None;
        }
        let (ia, ib, id, ie) = (self.e / det, -self.b / det, -self.d / det, self.a / det);
        Some(Affine {
            a: ia,
            b: ib,
            c: -(ia * self.c + ib * self.f),
            d: id,
            e: ie,
            f: -(id * self.c + ie * self.f),
        })
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &Affine) -> Affine {
        Affine {
            a: self.a * other.a + self.b * other.d,
            b: self.a * other.b + self.b * other.e,
            c: self.a * other.c + self.b * other.f + self.c,
            d: self.d * other.a + self.e * other.d,
            e: self.d * other.b + self.e * other.e,
            f: self.d * other.c + self.e * other.f + self.f,
        }
    }
}

// ----------------------------------------------------------------------
// Scene
// ----------------------------------------------------------------------

pub struct Sprite {
    /// RGB texture, [3, th, tw], values in [0,1].
    pub tex: Vec<f64>,
    pub th: usize,
    pub tw: usize,
    /// Per-frame transform, sprite-local -> image coordinates.
    pub transforms: Vec<Affine>,
    /// Smaller = nearer; the background carries the largest depth.
    pub depth: usize,
}

impl Sprite {
    /// Local support: full texture rectangle with a valid bilinear patch.
    #[inline]
    fn covers_local(&self, p: (f64, f64)) -> bool {
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (self.tw - 1) as f64 && p.1 <= (self.th - 1) as f64
    }

    fn sample(&self, p: (f64, f64), ch: usize) -> f64 {
        let x = p.0.clamp(0.0, (self.tw - 1) as f64);
        let y = p.1.clamp(0.0, (self.th - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.tw - 1);
        let y1 = (y0 + 1).min(self.th - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let plane = &self.tex[ch * self.th * self.tw..(ch + 1) * self.th * self.tw];
        (1.0 - fx) * (1.0 - fy) * plane[y0 * self.tw + x0]
            + fx * (1.0 - fy) * plane[y0 * self.tw + x1]
            + (1.0 - fx) * fy * plane[y1 * self.tw + x0]
            + fx * fy * plane[y1 * self.tw + x1]
    }
}

/// Opaque square pasted over frames [t0, t0+frames) (an augmentation; it
/// occludes but is never tracked).
#[derive(Clone, Copy, Debug)]
pub struct SquareOccluder {
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
    pub t0: usize,
    pub frames: usize,
    pub color: [f64; 3],
}

impl SquareOccluder {
    fn active(&self, t: usize) -> bool {
        t >= self.t0 && t < self.t0 + self.frames
    }

    fn covers(&self, t: usize, p: (f64, f64)) -> bool {
        self.active(t)
            && p.0 >= self.x0
            && p.0 < self.x0 + self.size
            && p.1 >= self.y0
            && p.1 < self.y0 + self.size
    }
}

pub struct SpriteScene {
    pub sprites: Vec<Sprite>,
    pub occluders: Vec<SquareOccluder>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl SpriteScene {
    /// Front-most sprite covering image point p at frame t.
    pub fn owner_at(&self, p: (f64, f64), t: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.sprites.iter().enumerate() {
            let Some(inv) = s.transforms[t].inverse() else {
                continue;
            };
            if s.covers_local(inv.apply(p)) {
                best = match best {
                    Some(j) if self.sprites[j].depth <= s.depth => Some(j),
                    _ => Some(i),
                };
            }
        }
        best
    }

    /// Frame-0 position p owned by sprite `owner` maps to this point at t.
    pub fn map_point(&self, owner: usize, p0: (f64, f64), t: usize) -> (f64, f64) {
        let s = &self.sprites[owner];
        let local = s.transforms[0].inverse().expect("invertible").apply(p0);
        s.transforms[t].apply(local)
    }

    /// Visibility of a frame-0 point at frame t, split into the occlusion
    /// part (a strictly nearer sprite or a pasted square covers it) and the
    /// in-bounds part.
    pub fn point_visibility(&self, owner: usize, p0: (f64, f64), t: usize) -> (bool, bool) {
        let pt = self.map_point(owner, p0, t);
        let in_bounds =
            pt.0 >= 0.0 && pt.1 >= 0.0 && pt.0 <= (self.w - 1) as f64 && pt.1 <= (self.h - 1) as f64;
        let depth = self.sprites[owner].depth;
        let mut covered = false;
        for s in &self.sprites {
            if s.depth >= depth {
                continue;
            }
            if let Some(inv) = s.transforms[t].inverse() {
                if s.covers_local(inv.apply(pt)) {
                    covered = true;
                    break;
                }
            }
        }
        if !covered {
            covered = self.occluders.iter().any(|o| o.covers(t, pt));
        }
        (covered, in_bounds)
    }

    /// Render all frames: [T,3,H,W] in [0,1].
    pub fn render(&self) -> Vec<f32> {
        let (t, h, w) = (self.t, self.h, self.w);
        let mut video = vec![0.0f32; t * 3 * h * w];
        for ti in 0..t {
            let inverses: Vec<Option<Affine>> = self
                .sprites
                .iter()
                .map(|s| s.transforms[ti].inverse())
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let p = (x as f64, y as f64);
                    let mut color = [0.0f64; 3];
                    let mut best_depth = usize::MAX;
                    let mut found = false;
                    for (i, s) in self.sprites.iter().enumerate() {
                        if s.depth >= best_depth && found {
                            continue;
                        }
                        let Some(inv) = &inverses[i] else { continue };
                        let local = inv.apply(p);
                        if s.covers_local(local) && (!found || s.depth < best_depth) {
                            for (ch, c) in color.iter_mut().enumerate() {
                                *c = s.sample(local, ch);
                            }
                            best_depth = s.depth;
                            found = true;
                        }
                    }
                    for o in &self.occluders {
                        if o.covers(ti, p) {
                            color = o.color;
                        }
                    }
                    for ch in 0..3 {
                        video[((ti * 3 + ch) * h + y) * w + x] = color[ch] as f32;
                    }
                }
            }
        }
        video
    }

    /// Dense frame0→t flow [T,2,H,W] and visibility [T,H,W].
    pub fn dense_gt(&self) -> (Vec<f32>, Vec<f32>) {
        let (t, h, w) = (self.t, self.h, self.w);
        let mut flow = vec![0.0f32; t * 2 * h * w];
        let mut vis = vec![0.0f32; t * h * w];
        // ownership decided once, on frame 0
        let mut owners = vec![0usize; h * w];
        for y in 0..h {
            for x in 0..w {
                owners[y * w + x] = self
                    .owner_at((x as f64, y as f64), 0)
                    .expect("background covers every pixel");
            }
        }
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let p0 = (x as f64, y as f64);
                    let owner = owners[y * w + x];
                    let pt = self.map_point(owner, p0, ti);
                    flow[((ti * 2) * h + y) * w + x] = (pt.0 - p0.0) as f32;
                    flow[((ti * 2 + 1) * h + y) * w + x] = (pt.1 - p0.1) as f32;
                    let (covered, in_bounds) = self.point_visibility(owner, p0, ti);
                    vis[(ti * h + y) * w + x] = if !covered && in_bounds { 1.0 } else { 0.0 };
                }
            }
        }
        (flow, vis)
    }

    /// Compose a global transform onto every frame (augmentation).
    pub fn transformed(&self, b: &Affine) -> SpriteScene {
        SpriteScene {
            sprites: self
                .sprites
                .iter()
                .map(|s| Sprite {
                    tex: s.tex.clone(),
                    th: s.th,
                    tw: s.tw,
                    transforms: s.transforms.iter().map(|a| b.compose(a)).collect(),
                    depth: s.depth,
                })
                .collect(),
            occluders: self.occluders.clone(),
            t: self.t,
            h: self.h,
            w: self.w,
        }
    }
}

// ----------------------------------------------------------------------
// Generation
// ----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Sprites on top of the background (inclusive range).
    pub sprites_min: usize,
    pub sprites_max: usize,
    /// Max per-frame translation speed, pixels.
    pub max_speed: f64,
    /// Max per-frame rotation, radians.
    pub rot_jitter: f64,
    /// Max per-frame relative scale change.
    pub scale_jitter: f64,
    /// Background per-frame speed cap.
    pub background_speed: f64,
    /// Sprite side length range, pixels.
    pub sprite_size: (usize, usize),
    /// Sparse track points to sample.
    pub n_points: usize,
    /// Box-blur passes over the white-noise textures.
    pub smooth_passes: usize,
}

impl SceneConfig {
    /// Multi-sprite scenes with occlusions (the training distribution).
    pub fn multi_sprite(t: usize, h: usize, w: usize) -> Self {
        SceneConfig {
            t,
            h,
            w,
            sprites_min: 1,
            sprites_max: 3,
            max_speed: 8.0,
            rot_jitter: 0.02,
            scale_jitter: 0.01,
            background_speed: 3.0,
            sprite_size: (h / 3, 2 * h / 3),
            n_points: 128,
            smooth_passes: 2,
        }
    }

    /// Background-only scene translating at a constant velocity.
    pub fn pure_translation(t: usize, h: usize, w: usize, speed: f64) -> Self {
        SceneConfig {
            sprites_min: 0,
            sprites_max: 0,
            max_speed: speed,
            rot_jitter: 0.0,
            scale_jitter: 0.0,
            background_speed: speed,
            ..SceneConfig::multi_sprite(t, h, w)
        }
    }
}

/// One generated sample: video, dense ground truth, sparse tracks, and the
/// underlying scene (kept so augmentation can stay exact).
pub struct Sample {
    pub scene: SpriteScene,
    pub video: Vec<f32>,
    pub flow: Vec<f32>,
    pub vis: Vec<f32>,
    pub tracks: TrackSet,
}

/// Sparse exact tracks for one video; query frame is 0.
#[derive(Clone, Debug)]
pub struct TrackSet {
    pub t: usize,
    pub n: usize,
    pub query_index: usize,
    pub queries: Vec<(f64, f64)>,
    /// [t*n] positions.
    pub positions: Vec<(f64, f64)>,
    /// [t*n] point covered by a nearer sprite or a pasted square.
    pub occluded: Vec<bool>,
    /// [t*n] mapped point inside the frame.
    pub in_bounds: Vec<bool>,
    /// [t*n] annotation exists.
    pub valid: Vec<bool>,
}

impl TrackSet {
    pub fn visible(&self, t: usize, i: usize) -> bool {
        let k = t * self.n + i;
        !self.occluded[k] && self.in_bounds[k]
    }
}

impl Sample {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.scene.t, self.scene.h, self.scene.w)
    }

    pub fn video_tensor<E: Element>(&self) -> Tensor<E> {
        let (t, h, w) = self.dims();
        Tensor::new(
            &[t, 3, h, w],
            self.video.iter().map(|&v| E::from_f64(v as f64)).collect(),
        )
    }

    /// Ground-truth flow of one frame as interleaved (fx, fy) pairs.
    pub fn flow_pairs(&self, t: usize) -> Vec<f32> {
        let (_, h, w) = self.dims();
        let mut out = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                out.push(self.flow[((t * 2) * h + y) * w + x]);
                out.push(self.flow[((t * 2 + 1) * h + y) * w + x]);
            }
        }
        out
    }
}

fn noise_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, passes: usize) -> Vec<f64> {
    let mut tex = vec![0.0f64; 3 * h * w];
    for v in tex.iter_mut() {
        *v = rng.gen::<f64>();
    }
    // band-limit with box blurs so subpixel matching is well-posed
    let mut tmp = vec![0.0f64; h * w];
    for _ in 0..passes {
        for ch in 0..3 {
            let plane = &mut tex[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let yy = y as isize + dy;
                            let xx = x as isize + dx;
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += plane[yy as usize * w + xx as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    tmp[y * w + x] = acc / cnt;
                }
            }
            plane.copy_from_slice(&tmp);
        }
    }
    // stretch contrast into [0.05, 0.95]
    for ch in 0..3 {
        let plane = &mut tex[ch * h * w..(ch + 1) * h * w];
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for &v in plane.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-9);
        for v in plane.iter_mut() {
            *v = 0.05 + 0.9 * (*v - lo) / span;
        }
    }
    tex
}

/// Random per-frame motion chain for one sprite: constant base velocity
/// plus bounded rotation/scale drift about the sprite center. Degenerate
/// draws are resampled a bounded number of times.
fn motion_chain(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    init: Affine,
    center0: (f64, f64),
    speed_cap: f64,
) -> Result<Vec<Affine>> {
    let vx = rng.gen_range(-speed_cap..=speed_cap);
    let vy = rng.gen_range(-speed_cap..=speed_cap);
    let mut out = vec![init];
    let mut center = center0;
    for _ in 1..cfg.t {
        let mut ok = false;
        for _retry in 0..16 {
            let dth = if cfg.rot_jitter > 0.0 {
                rng.gen_range(-cfg.rot_jitter..=cfg.rot_jitter)
            } else {
                0.0
            };
            let ds = if cfg.scale_jitter > 0.0 {
                1.0 + rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter)
            } else {
                1.0
            };
            let step = Affine::similarity(center, ds, dth, (vx, vy));
            let next = step.compose(out.last().unwrap());
            if next.det().abs() > 1e-6 {
                out.push(next);
                center = (center.0 + vx, center.1 + vy);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::arg("could not draw an invertible sprite motion"));
        }
    }
    Ok(out)
}

/// Deterministic per seed. Textures are band-limited noise; sparse tracks
/// are sampled uniformly over the frame (hitting sprites and background in
/// proportion to their coverage) with exact positions and visibility.
pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<Sample> {
    if cfg.t < 1 {
        return Err(Error::arg("need at least one frame"));
    }
    if !cfg.max_speed.is_finite() || !cfg.background_speed.is_finite() {
        return Err(Error::arg("motion ranges must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, h, w) = (cfg.t, cfg.h, cfg.w);

    // background plane large enough to cover the frame for all t
    let margin = (cfg.background_speed * t as f64).ceil() as usize + 8;
    let (bh, bw) = (h + 2 * margin, w + 2 * margin);
    let b_init = Affine::translation(-(margin as f64), -(margin as f64));
    let mut sprites = vec![Sprite {
        tex: noise_texture(&mut rng, bh, bw, cfg.smooth_passes),
        th: bh,
        tw: bw,
        transforms: motion_chain(
            &mut rng,
            cfg,
            b_init,
            (w as f64 / 2.0, h as f64 / 2.0),
            cfg.background_speed,
        )?,
        depth: usize::MAX,
    }];

    let n_sprites = if cfg.sprites_max > cfg.sprites_min {
        rng.gen_range(cfg.sprites_min..=cfg.sprites_max)
    } else {
        cfg.sprites_min
    };
    for i in 0..n_sprites {
        let size = rng.gen_range(cfg.sprite_size.0.max(4)..=cfg.sprite_size.1.max(5));
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let init = Affine::translation(cx - size as f64 / 2.0, cy - size as f64 / 2.0);
        sprites.push(Sprite {
            tex: noise_texture(&mut rng, size, size, cfg.smooth_passes),
            th: size,
            tw: size,
            transforms: motion_chain(&mut rng, cfg, init, (cx, cy), cfg.max_speed)?,
            depth: n_sprites - i, // later sprites are nearer
        });
    }

    let scene = SpriteScene {
        sprites,
        occluders: Vec::new(),
        t,
        h,
        w,
    };
    let tracks = sample_tracks_from(&scene, cfg.n_points, &mut rng);
    let video = scene.render();
    let (flow, vis) = scene.dense_gt();
    Ok(Sample {
        scene,
        video,
        flow,
        vis,
        tracks,
    })
}

fn sample_tracks_from(scene: &SpriteScene, n: usize, rng: &mut ChaCha8Rng) -> TrackSet {
    let (t, h, w) = (scene.t, scene.h, scene.w);
    let mut queries = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(t * n);
    let mut occluded = Vec::with_capacity(t * n);
    let mut in_bounds = Vec::with_capacity(t * n);
    for _ in 0..n {
        queries.push((
            rng.gen_range(0.0..(w - 1) as f64),
            rng.gen_range(0.0..(h - 1) as f64),
        ));
    }
    let owners: Vec<usize> = queries
        .iter()
        .map(|&q| scene.owner_at(q, 0).expect("background covers all"))
        .collect();
    for ti in 0..t {
        for (i, &q) in queries.iter().enumerate() {
            let p = scene.map_point(owners[i], q, ti);
            let (cov, ib) = scene.point_visibility(owners[i], q, ti);
            positions.push(p);
            occluded.push(cov);
            in_bounds.push(ib);
        }
    }
    TrackSet {
        t,
        n,
        query_index: 0,
        queries,
        positions,
        occluded,
        in_bounds,
        valid: vec![true; t * n],
    }
}

// ----------------------------------------------------------------------
// Augmentation
// ----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Max global shift, pixels.
    pub max_shift: f64,
    /// Global scale drawn from [1−r, 1+r].
    pub scale_range: f64,
    /// Per-channel multiplicative/additive jitter magnitude.
    pub color_jitter: f64,
    /// Pasted opaque squares (inclusive range).
    pub occluders_min: usize,
    pub occluders_max: usize,
    pub occluder_size: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift: 4.0,
            scale_range: 0.15,
            color_jitter: 0.08,
            occluders_min: 0,
            occluders_max: 2,
            occluder_size: (6.0, 14.0),
        }
    }
}

impl AugmentConfig {
    /// All magnitudes zero: augment() returns the sample unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            max_shift: 0.0,
            scale_range: 0.0,
            color_jitter: 0.0,
            occluders_min: 0,
            occluders_max: 0,
            occluder_size: (0.0, 0.0),
        }
    }
}

/// Re-render the scene under a global shift/scale (ground truth remapped
/// exactly through the transform), jitter colors (labels unchanged), and
/// paste opaque squares whose covered ground-truth points flip to
/// occluded for exactly the pasted frames.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, h, w) = sample.dims();

    let scale = if cfg.scale_range > 0.0 {
        1.0 + rng.gen_range(-cfg.scale_range..=cfg.scale_range)
    } else {
        1.0
    };
    let shift = if cfg.max_shift > 0.0 {
        (
            rng.gen_range(-cfg.max_shift..=cfg.max_shift),
            rng.gen_range(-cfg.max_shift..=cfg.max_shift),
        )
    } else {
        (0.0, 0.0)
    };
    let b = Affine::similarity((w as f64 / 2.0, h as f64 / 2.0), scale, 0.0, shift);

    let mut scene = sample.scene.transformed(&b);

    let n_occ = if cfg.occluders_max > cfg.occluders_min {
        rng.gen_range(cfg.occluders_min..=cfg.occluders_max)
    } else {
        cfg.occluders_min
    };
    for _ in 0..n_occ {
        let size = rng.gen_range(cfg.occluder_size.0..=cfg.occluder_size.1.max(cfg.occluder_size.0 + 1e-9));
        let t0 = rng.gen_range(0..t);
        let frames = rng.gen_range(1..=(t - t0));
        scene.occluders.push(SquareOccluder {
            x0: rng.gen_range(0.0..(w as f64 - size).max(1.0)),
            y0: rng.gen_range(0.0..(h as f64 - size).max(1.0)),
            size,
            t0,
            frames,
            color: [rng.gen(), rng.gen(), rng.gen()],
        });
    }

    // re-evaluate tracks at the transformed queries: same scene geometry,
    // so ownership is preserved and labels stay exact
    let queries: Vec<(f64, f64)> = sample.tracks.queries.iter().map(|&q| b.apply(q)).collect();
    let owners: Vec<Option<usize>> = queries.iter().map(|&q| scene.owner_at(q, 0)).collect();
    let n = queries.len();
    let mut positions = Vec::with_capacity(t * n);
    let mut occluded = Vec::with_capacity(t * n);
    let mut in_bounds = Vec::with_capacity(t * n);
    let mut valid = Vec::with_capacity(t * n);
    for ti in 0..t {
        for (i, &q) in queries.iter().enumerate() {
            match owners[i] {
                Some(o) => {
                    let p = scene.map_point(o, q, ti);
                    let (cov, ib) = scene.point_visibility(o, q, ti);
                    positions.push(p);
                    occluded.push(cov);
                    in_bounds.push(ib);
                    valid.push(true);
                }
                None => {
                    // query shifted out of every support: annotation dropped
                    positions.push((0.0, 0.0));
                    occluded.push(true);
                    in_bounds.push(false);
                    valid.push(false);
                }
            }
        }
    }

    let mut video = scene.render();
    if cfg.color_jitter > 0.0 {
        for ch in 0..3 {
            let gain = 1.0 + rng.gen_range(-cfg.color_jitter..=cfg.color_jitter);
            let bias = rng.gen_range(-cfg.color_jitter..=cfg.color_jitter);
            for ti in 0..t {
                let plane = &mut video[((ti * 3 + ch) * h * w)..((ti * 3 + ch + 1) * h * w)];
                for v in plane.iter_mut() {
                    *v = ((*v as f64) * gain + bias).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let (flow, vis) = scene.dense_gt();
    Ok(Sample {
        scene,
        video,
        flow,
        vis,
        tracks: TrackSet {
            t,
            n,
            query_index: 0,
            queries,
            positions,
            occluded,
            in_bounds,
            valid,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn translation_cfg(t: usize) -> SceneConfig {
        SceneConfig::pure_translation(t, 32, 32, 3.0)
    }

    #[test]
    fn zero_motion_zero_flow_full_visibility() {
        let cfg = SceneConfig::pure_translation(4, 24, 24, 0.0);
        let s = generate(&cfg, 7).unwrap();
        assert!(s.flow.iter().all(|&v| v == 0.0));
        assert!(s.vis.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn translation_flow_is_linear_in_time() {
        let s = generate(&translation_cfg(5), 3).unwrap();
        let (t, h, w) = s.dims();
        // background velocity: read from frame-1 flow at the center
        let vx = s.flow[(2 * h + h / 2) * w + w / 2];
        let vy = s.flow[(3 * h + h / 2) * w + w / 2];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let fx = s.flow[((ti * 2) * h + y) * w + x];
                    let fy = s.flow[((ti * 2 + 1) * h + y) * w + x];
                    assert!((fx - ti as f32 * vx).abs() < 1e-4);
                    assert!((fy - ti as f32 * vy).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = SceneConfig::multi_sprite(4, 24, 24);
        let a = generate(&cfg, 42).unwrap();
        let b = generate(&cfg, 42).unwrap();
        assert_eq!(a.video, b.video);
        assert_eq!(a.flow, b.flow);
        assert_eq!(a.tracks.positions, b.tracks.positions);
        let c = generate(&cfg, 43).unwrap();
        assert_ne!(a.video, c.video);
    }

    #[test]
    fn forward_consistency_of_flow() {
        let cfg = SceneConfig::multi_sprite(6, 32, 32);
        let s = generate(&cfg, 11).unwrap();
        let (t, h, w) = s.dims();
        for ti in [1, t - 1] {
            for y in (0..h).step_by(5) {
                for x in (0..w).step_by(5) {
                    let p0 = (x as f64, y as f64);
                    let owner = s.scene.owner_at(p0, 0).unwrap();
                    let fx = s.flow[((ti * 2) * h + y) * w + x] as f64;
                    let fy = s.flow[((ti * 2 + 1) * h + y) * w + x] as f64;
                    let pt = (p0.0 + fx, p0.1 + fy);
                    // invert the owner's motion: back to the frame-0 point
                    let local = s.scene.sprites[owner].transforms[ti].inverse().unwrap().apply(pt);
                    let back = s.scene.sprites[owner].transforms[0].apply(local);
                    assert!((back.0 - p0.0).abs() < 1e-4 && (back.1 - p0.1).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn occlusion_by_nearer_sprite() {
        // two-sprite construction: a far point passes under a near sprite
        let tex = |v: f64| vec![v; 3 * 9];
        let far = Sprite {
            tex: tex(0.2),
            th: 3,
            tw: 3,
            transforms: (0..5).map(|t| Affine::translation(t as f64 * 2.0, 4.0)).collect(),
            depth: 2,
        };
        let near = Sprite {
            tex: tex(0.8),
            th: 3,
            tw: 3,
            transforms: (0..5).map(|_| Affine::translation(4.0, 4.0)).collect(),
            depth: 1,
        };
        let bg = Sprite {
            tex: tex(0.5),
            th: 40,
            tw: 40,
            transforms: (0..5).map(|_| Affine::translation(-10.0, -10.0)).collect(),
            depth: usize::MAX,
        };
        let scene = SpriteScene {
            sprites: vec![bg, far, near],
            occluders: vec![],
            t: 5,
            h: 12,
            w: 12,
        };
        // the far sprite's center starts at (1,5), moves +2 px/frame in x
        let p0 = (1.0, 5.0);
        let owner = scene.owner_at(p0, 0).unwrap();
        assert_eq!(owner, 1); // the far sprite, not the background
        let visible: Vec<bool> = (0..5)
            .map(|t| {
                let (cov, ib) = scene.point_visibility(owner, p0, t);
                !cov && ib
            })
            .collect();
        // position continues by the affine law regardless of occlusion
        for t in 0..5 {
            let p = scene.map_point(owner, p0, t);
            assert!((p.0 - (1.0 + 2.0 * t as f64)).abs() < 1e-9);
        }
        // at t=2 the point (5,5) sits inside the near sprite [4,6]x[4,6]
        assert_eq!(visible, vec![true, true, false, false, true]);
    }

    #[test]
    fn identity_augmentation_is_a_noop() {
        let s = generate(&SceneConfig::multi_sprite(3, 24, 24), 5).unwrap();
        let a = augment(&s, &AugmentConfig::identity(), 99).unwrap();
        assert_eq!(s.video, a.video);
        assert_eq!(s.flow, a.flow);
        assert_eq!(s.tracks.positions, a.tracks.positions);
    }

    #[test]
    fn double_scale_doubles_flow() {
        let s = generate(&translation_cfg(3), 9).unwrap();
        let b = Affine::similarity((16.0, 16.0), 2.0, 0.0, (0.0, 0.0));
        let scene2 = s.scene.transformed(&b);
        let (flow2, _) = scene2.dense_gt();
        let (_, h, w) = s.dims();
        // compare at the fixed point of B (the center), where B(p)=p
        let (cx, cy) = (16usize, 16usize);
        for ti in 0..3 {
            let f1 = s.flow[((ti * 2) * h + cy) * w + cx];
            let f2 = flow2[((ti * 2) * h + cy) * w + cx];
            assert!((f2 - 2.0 * f1).abs() < 1e-4, "{f2} vs 2*{f1}");
        }
    }

    #[test]
    fn square_occluder_flips_visibility_for_exact_frames() {
        let s = generate(&SceneConfig::pure_translation(6, 24, 24, 0.0), 13).unwrap();
        let mut scene = s.scene;
        scene.occluders.push(SquareOccluder {
            x0: 8.0,
            y0: 8.0,
            size: 8.0,
            t0: 2,
            frames: 3,
            color: [0.0, 0.0, 0.0],
        });
        // zero motion: a point at (10,10) is under the square for t in [2,5)
        let owner = scene.owner_at((10.0, 10.0), 0).unwrap();
        for t in 0..6 {
            let (cov, ib) = scene.point_visibility(owner, (10.0, 10.0), t);
            assert!(ib);
            assert_eq!(cov, (2..5).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn zbuffer_render_agrees_with_analytic_visibility() {
        // independent check: per-pixel z-order loop over sprites
        let cfg = SceneConfig::multi_sprite(4, 24, 24);
        let s = generate(&cfg, 21).unwrap();
        let scene = &s.scene;
        let (t, h, w) = s.dims();
        for ti in 0..t {
            for (i, &q) in s.tracks.queries.iter().enumerate() {
                if !s.tracks.valid[ti * s.tracks.n + i] {
                    continue;
                }
                let p = s.tracks.positions[ti * s.tracks.n + i];
                let inb = p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (w - 1) as f64 && p.1 <= (h - 1) as f64;
                assert_eq!(inb, s.tracks.in_bounds[ti * s.tracks.n + i]);
                if !inb {
                    continue;
                }
                // nearest sprite covering p at ti, by brute force
                let mut best: Option<usize> = None;
                for (j, sp) in scene.sprites.iter().enumerate() {
                    let local = sp.transforms[ti].inverse().unwrap().apply(p);
                    if sp.covers_local(local) {
                        best = match best {
                            Some(k) if scene.sprites[k].depth <= sp.depth => Some(k),
                            _ => Some(j),
                        };
                    }
                }
                let owner0 = scene.owner_at(q, 0).unwrap();
                let covered = best.map(|b| scene.sprites[b].depth < scene.sprites[owner0].depth)
                    .unwrap_or(false);
                assert_eq!(
                    covered,
                    s.tracks.occluded[ti * s.tracks.n + i],
                    "t={ti} point {i}"
                );
            }
        }
        let _ = t;
    }
}
