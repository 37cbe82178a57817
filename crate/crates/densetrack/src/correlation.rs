//! Multi-scale appearance similarity.
//!
//! Feature maps become pyramids by repeated 2× average pooling; the query
//! feature map is dot-producted against each level, normalized by 1/√D.
//! The refiner never materializes the full 4-D score volumes: the fused
//! [`corr_patch_features`] kernel samples pooled *feature* vectors
//! bilinearly around each query cell's current position and dots them with
//! the query vector, which is algebraically identical to bilinear sampling
//! of the score maps (the dot product is linear in the target features and
//! both use zero padding), while keeping memory at one patch per cell.

use crate::error::{Error, Result};
use crate::numerics::parallel;
use crate::numerics::{avg_pool2d, Element, Tensor};

pub const DEFAULT_LEVELS: usize = 5;
pub const DEFAULT_RADIUS: usize = 4;

/// Flattened patch length: one (2R+1)² patch per level.
pub fn patch_vector_len(levels: usize, radius: usize) -> usize {
    let side = 2 * radius + 1;
    levels * side * side
}

/// Pyramid strides are 2^l for l in 0..levels.
pub fn pyramid_strides(levels: usize) -> Vec<usize> {
    (0..levels).map(|l| 1 << l).collect()
}

/// Level 0 is the input; level l is avg-pooled with k=2, l times.
/// Accepts [D,h,w] or batched [S,D,h,w].
///
/// The level count is bounded by the resolution: 2^(levels-1) must be
/// strictly below min(h, w), otherwise the coarsest level degenerates and
/// this is a configuration error naming the limiting dimension.
pub fn build_pyramid<E: Element>(feat: &Tensor<E>, levels: usize) -> Result<Vec<Tensor<E>>> {
    if levels < 1 {
        return Err(Error::config("pyramid needs at least 1 level"));
    }
    let rank = feat.shape().len();
    let (batched, h, w) = match rank {
        3 => (false, feat.shape()[1], feat.shape()[2]),
        4 => (true, feat.shape()[2], feat.shape()[3]),
        _ => {
            return Err(Error::shape(
                "feat",
                "[D,h,w] or [S,D,h,w]",
                format!("{:?}", feat.shape()),
                "build_pyramid",
            ))
        }
    };
    let reach = 1usize << (levels - 1);
    if reach >= h || reach >= w {
        let (axis, dim) = if h <= w { ("height", h) } else { ("width", w) };
        return Err(Error::config(format!(
            "{levels} correlation scales need feature {axis} > {reach}, got {dim}"
        )));
    }
    let base = if batched {
        feat.clone()
    } else {
        let s = feat.shape().to_vec();
        feat.reshape(&[1, s[0], s[1], s[2]])
    };
    let mut levels_out = vec![base.clone()];
    let mut cur = base;
    for _ in 1..levels {
        cur = avg_pool2d(&cur, 2)?;
        levels_out.push(cur.clone());
    }
    if !batched {
        levels_out = levels_out
            .into_iter()
            .map(|t| {
                let s = t.shape().to_vec();
                t.reshape(&[s[1], s[2], s[3]])
            })
            .collect();
    }
    Ok(levels_out)
}

/// Materialized scores for one level: out[i,j,v,u] = ⟨f_(i,j), g_(v,u)⟩/√D.
/// Query [D,h,w] against a level map [D,hl,wl] gives [h,w,hl,wl].
pub fn correlate<E: Element>(query: &Tensor<E>, level: &Tensor<E>) -> Result<Tensor<E>> {
    let qs = query.shape().to_vec();
    let ls = level.shape().to_vec();
    if qs.len() != 3 || ls.len() != 3 {
        return Err(Error::shape("features", "[D,h,w]", format!("{qs:?}/{ls:?}"), "correlate"));
    }
    if qs[0] != ls[0] {
        return Err(Error::shape("channels", qs[0], ls[0], "correlate"));
    }
    let (d, h, w) = (qs[0], qs[1], qs[2]);
    let (hl, wl) = (ls[1], ls[2]);
    let q2 = query.reshape(&[d, h * w]).permute(&[1, 0]); // [hw, D]
    let l2 = level.reshape(&[d, hl * wl]); // [D, hlwl]
    let scores = q2.matmul(&l2).scale(1.0 / (d as f64).sqrt());
    Ok(scores.reshape(&[h, w, hl, wl]))
}

/// Flatten per-level patches around position `p` (level-0 cell units) for
/// one query cell into a single vector, levels ascending, row-major within
/// each (2R+1)² patch. `scores[l]` are materialized [h,w,hl,wl] maps from
/// [`correlate`], `cell` = (row, col) of the query cell.
pub fn sample_patch<E: Element>(
    scores: &[Tensor<E>],
    cell: (usize, usize),
    p: (f64, f64),
    radius: usize,
) -> Result<Vec<E>> {
    if !p.0.is_finite() || !p.1.is_finite() {
        return Err(Error::arg("sample_patch: non-finite position"));
    }
    let side = 2 * radius + 1;
    let mut out = Vec::with_capacity(scores.len() * side * side);
    for (l, level) in scores.iter().enumerate() {
        let s = level.shape().to_vec();
        let (h, w, hl, wl) = (s[0], s[1], s[2], s[3]);
        assert!(cell.0 < h && cell.1 < w, "query cell out of range");
        let d = level.data();
        let plane = &d[(cell.0 * w + cell.1) * hl * wl..(cell.0 * w + cell.1 + 1) * hl * wl];
        let scale = 1.0 / (1usize << l) as f64;
        let (cx, cy) = (p.0 * scale, p.1 * scale);
        for dy in -(radius as isize)..=(radius as isize) {
            for dx in -(radius as isize)..=(radius as isize) {
                out.push(bilinear_tap(plane, hl, wl, cx + dx as f64, cy + dy as f64));
            }
        }
    }
    Ok(out)
}

fn bilinear_tap<E: Element>(plane: &[E], h: usize, w: usize, x: f64, y: f64) -> E {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize].as_f64()
        }
    };
    E::from_f64(
        (1.0 - fx) * (1.0 - fy) * tap(y0, x0)
            + fx * (1.0 - fy) * tap(y0, x0 + 1)
            + (1.0 - fx) * fy * tap(y0 + 1, x0)
            + fx * fy * tap(y0 + 1, x0 + 1),
    )
}

/// Fused correlation-patch sampler for one pyramid level.
///
/// query: [D,h,w] (query-frame features), feats: [S,D,hl,wl] (pooled
/// target features), pos: [S,2,h,w] positions in *this level's* cell units
/// (callers scale the level-0 position by 2^-l). Output: [S,(2R+1)²,h,w],
/// entry k = ⟨query_(i,j), bilinear(feats_s, pos+offset_k)⟩/√D.
///
/// Differentiable w.r.t. query, feats and pos.
pub fn corr_patch_features<E: Element>(
    query: &Tensor<E>,
    feats: &Tensor<E>,
    pos: &Tensor<E>,
    radius: usize,
) -> Result<Tensor<E>> {
    let qs = query.shape().to_vec();
    let fs = feats.shape().to_vec();
    let ps = pos.shape().to_vec();
    if qs.len() != 3 {
        return Err(Error::shape("query", "[D,h,w]", format!("{qs:?}"), "corr_patch_features"));
    }
    if fs.len() != 4 || fs[1] != qs[0] {
        return Err(Error::shape("feats", format!("[S,{},hl,wl]", qs[0]), format!("{fs:?}"), "corr_patch_features"));
    }
    if ps.len() != 4 || ps[1] != 2 || ps[2] != qs[1] || ps[3] != qs[2] {
        return Err(Error::shape("pos", format!("[S,2,{},{}]", qs[1], qs[2]), format!("{ps:?}"), "corr_patch_features"));
    }
    if pos.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("corr_patch_features: non-finite position"));
    }
    let (d, h, w) = (qs[0], qs[1], qs[2]);
    let (s, hl, wl) = (fs[0], fs[2], fs[3]);
    let side = 2 * radius + 1;
    let pp = side * side;
    let hw = h * w;
    let inv_sqrt_d = E::from_f64(1.0 / (d as f64).sqrt());

    let mut out = vec![E::zero(); s * pp * hw];
    {
        let q_ref = query.data();
        let f_ref = feats.data();
        let p_ref = pos.data();
        let qd: &[E] = &q_ref;
        let fd: &[E] = &f_ref;
        let pd: &[E] = &p_ref;
        // one chunk per (s, k) plane — disjoint writes
        parallel::for_each_chunk(&mut out, hw, |plane, op| {
            let (si, k) = (plane / pp, plane % pp);
            let dy = (k / side) as isize - radius as isize;
            let dx = (k % side) as isize - radius as isize;
            let fplane = &fd[si * d * hl * wl..(si + 1) * d * hl * wl];
            for ij in 0..hw {
                let px = pd[si * 2 * hw + ij].as_f64() + dx as f64;
                let py = pd[si * 2 * hw + hw + ij].as_f64() + dy as f64;
                op[ij] = dot_query_tap(qd, fplane, d, h, w, hl, wl, ij, px, py) * inv_sqrt_d;
            }
        });
    }

    let (pq, pf, pp_t) = (query.clone(), feats.clone(), pos.clone());
    Ok(Tensor::from_op(
        &[s, pp, h, w],
        out,
        &[query, feats, pos],
        move |g| {
            let qd = pq.data();
            let fd = pf.data();
            let pd = pp_t.data();
            let mut dq = vec![E::zero(); d * hw];
            let mut df = vec![E::zero(); s * d * hl * wl];
            let mut dp = vec![E::zero(); s * 2 * hw];
            for si in 0..s {
                let fplane = &fd[si * d * hl * wl..(si + 1) * d * hl * wl];
                let dfplane = &mut df[si * d * hl * wl..(si + 1) * d * hl * wl];
                for k in 0..pp {
                    let dy = (k / side) as isize - radius as isize;
                    let dx = (k % side) as isize - radius as isize;
                    let gplane = &g[(si * pp + k) * hw..(si * pp + k + 1) * hw];
                    for ij in 0..hw {
                        let gv = gplane[ij];
                        if gv == E::zero() {
                            continue;
                        }
                        let gv = gv * inv_sqrt_d;
                        let px = pd[si * 2 * hw + ij].as_f64() + dx as f64;
                        let py = pd[si * 2 * hw + hw + ij].as_f64() + dy as f64;
                        let x0f = px.floor();
                        let y0f = py.floor();
                        let fx = E::from_f64(px - x0f);
                        let fy = E::from_f64(py - y0f);
                        let (x0, y0) = (x0f as isize, y0f as isize);
                        let w00 = (E::one() - fx) * (E::one() - fy);
                        let w01 = fx * (E::one() - fy);
                        let w10 = (E::one() - fx) * fy;
                        let w11 = fx * fy;
                        let taps = [
                            (y0, x0, w00),
                            (y0, x0 + 1, w01),
                            (y0 + 1, x0, w10),
                            (y0 + 1, x0 + 1, w11),
                        ];
                        let mut gx = E::zero();
                        let mut gy = E::zero();
                        for ch in 0..d {
                            let qv = qd[ch * hw + ij];
                            let fch = &fplane[ch * hl * wl..(ch + 1) * hl * wl];
                            // dquery and dfeats via the 4 taps
                            let mut sampled = E::zero();
                            for &(yy, xx, wv) in &taps {
                                if yy >= 0 && xx >= 0 && yy < hl as isize && xx < wl as isize {
                                    let idx = yy as usize * wl + xx as usize;
                                    sampled += wv * fch[idx];
                                    dfplane[ch * hl * wl + idx] += gv * wv * qv;
                                }
                            }
                            dq[ch * hw + ij] += gv * sampled;
                            // position gradient through the bilinear weights
                            let v00 = tap_or_zero(fch, hl, wl, y0, x0);
                            let v01 = tap_or_zero(fch, hl, wl, y0, x0 + 1);
                            let v10 = tap_or_zero(fch, hl, wl, y0 + 1, x0);
                            let v11 = tap_or_zero(fch, hl, wl, y0 + 1, x0 + 1);
                            gx += qv * ((E::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                            gy += qv * ((E::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        dp[si * 2 * hw + ij] += gv * gx;
                        dp[si * 2 * hw + hw + ij] += gv * gy;
                    }
                }
            }
            if pq.requires_grad() {
                pq.accum_grad(&dq);
            }
            if pf.requires_grad() {
                pf.accum_grad(&df);
            }
            if pp_t.requires_grad() {
                pp_t.accum_grad(&dp);
            }
        },
    ))
}

#[inline]
fn tap_or_zero<E: Element>(plane: &[E], h: usize, w: usize, y: isize, x: isize) -> E {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        E::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn dot_query_tap<E: Element>(
    qd: &[E],
    fplane: &[E],
    d: usize,
    _h: usize,
    _w: usize,
    hl: usize,
    wl: usize,
    ij: usize,
    x: f64,
    y: f64,
) -> E {
    let hw = qd.len() / d;
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = E::from_f64(x - x0f);
    let fy = E::from_f64(y - y0f);
    let (x0, y0) = (x0f as isize, y0f as isize);
    let w00 = (E::one() - fx) * (E::one() - fy);
    let w01 = fx * (E::one() - fy);
    let w10 = (E::one() - fx) * fy;
    let w11 = fx * fy;
    let mut acc = E::zero();
    for ch in 0..d {
        let fch = &fplane[ch * hl * wl..(ch + 1) * hl * wl];
        let v = w00 * tap_or_zero(fch, hl, wl, y0, x0)
            + w01 * tap_or_zero(fch, hl, wl, y0, x0 + 1)
            + w10 * tap_or_zero(fch, hl, wl, y0 + 1, x0)
            + w11 * tap_or_zero(fch, hl, wl, y0 + 1, x0 + 1);
        acc += qd[ch * hw + ij] * v;
    }
    acc
}
