//! Differentiable map sampling.
//!
//! Conventions shared by every sampler in the crate:
//!   * integer coordinate (x, y) lands exactly on pixel column x, row y;
//!   * samples fully outside the map read 0, partially outside use
//!     zero-padded neighbors;
//!   * nearest-neighbor rounding is half-away-from-zero.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::tensor::Tensor;

#[inline]
fn tap<E: Element>(plane: &[E], h: usize, w: usize, y: isize, x: isize) -> E {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        E::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear interpolation of map [C,H,W] at n (x, y) pixel coordinates,
/// differentiable w.r.t. both the map and the coordinates.
pub fn bilinear_sample<E: Element>(map: &Tensor<E>, coords: &Tensor<E>) -> Result<Tensor<E>> {
    let ms = map.shape().to_vec();
    if ms.len() != 3 {
        return Err(Error::shape("map", "[C,H,W]", format!("{ms:?}"), "bilinear_sample"));
    }
    let cs = coords.shape().to_vec();
    if cs.len() != 2 || cs[1] != 2 {
        return Err(Error::shape("coords", "[n,2]", format!("{cs:?}"), "bilinear_sample"));
    }
    if coords.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("bilinear_sample: non-finite coordinate"));
    }
    let (c, h, w) = (ms[0], ms[1], ms[2]);
    let n = cs[0];

    let mut out = vec![E::zero(); n * c];
    {
        let md = map.data();
        let cd = coords.data();
        for i in 0..n {
            let x = cd[i * 2].as_f64();
            let y = cd[i * 2 + 1].as_f64();
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = E::from_f64(x - x0);
            let fy = E::from_f64(y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let w00 = (E::one() - fx) * (E::one() - fy);
            let w01 = fx * (E::one() - fy);
            let w10 = (E::one() - fx) * fy;
            let w11 = fx * fy;
            for ci in 0..c {
                let plane = &md[ci * h * w..(ci + 1) * h * w];
                out[i * c + ci] = w00 * tap(plane, h, w, y0, x0)
                    + w01 * tap(plane, h, w, y0, x0 + 1)
                    + w10 * tap(plane, h, w, y0 + 1, x0)
                    + w11 * tap(plane, h, w, y0 + 1, x0 + 1);
            }
        }
    }

    let (pm, pc) = (map.clone(), coords.clone());
    Ok(Tensor::from_op(&[n, c], out, &[map, coords], move |g| {
        let md = pm.data();
        let cd = pc.data();
        let mut dmap = if pm.requires_grad() {
            vec![E::zero(); c * h * w]
        } else {
            Vec::new()
        };
        let mut dcoords = if pc.requires_grad() {
            vec![E::zero(); n * 2]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let x = cd[i * 2].as_f64();
            let y = cd[i * 2 + 1].as_f64();
            let x0f = x.floor();
            let y0f = y.floor();
            let fx = E::from_f64(x - x0f);
            let fy = E::from_f64(y - y0f);
            let (x0, y0) = (x0f as isize, y0f as isize);
            let w00 = (E::one() - fx) * (E::one() - fy);
            let w01 = fx * (E::one() - fy);
            let w10 = (E::one() - fx) * fy;
            let w11 = fx * fy;
            let mut dgx = E::zero();
            let mut dgy = E::zero();
            for ci in 0..c {
                let gv = g[i * c + ci];
                let plane = &md[ci * h * w..(ci + 1) * h * w];
                let v00 = tap(plane, h, w, y0, x0);
                let v01 = tap(plane, h, w, y0, x0 + 1);
                let v10 = tap(plane, h, w, y0 + 1, x0);
                let v11 = tap(plane, h, w, y0 + 1, x0 + 1);
                if !dmap.is_empty() {
                    let dp = &mut dmap[ci * h * w..(ci + 1) * h * w];
                    let mut add = |yy: isize, xx: isize, wv: E| {
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            dp[yy as usize * w + xx as usize] += gv * wv;
                        }
                    };
                    add(y0, x0, w00);
                    add(y0, x0 + 1, w01);
                    add(y0 + 1, x0, w10);
                    add(y0 + 1, x0 + 1, w11);
                }
                if !dcoords.is_empty() {
                    // d/dx = (1-fy)(v01-v00) + fy(v11-v10); d/dy symmetric.
                    dgx += gv * ((E::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                    dgy += gv * ((E::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if !dcoords.is_empty() {
                dcoords[i * 2] = dgx;
                dcoords[i * 2 + 1] = dgy;
            }
        }
        if !dmap.is_empty() {
            pm.accum_grad(&dmap);
        }
        if !dcoords.is_empty() {
            pc.accum_grad(&dcoords);
        }
    }))
}

/// Round half away from zero (the crate-wide nearest-neighbor convention).
#[inline]
pub fn round_half_away(v: f64) -> isize {
    v.round() as isize
}

/// Nearest-neighbor sampling of map [C,H,W] at n (x, y) coordinates.
/// Out-of-bounds samples read 0. Differentiable w.r.t. the map only.
pub fn nearest_sample<E: Element>(map: &Tensor<E>, coords: &Tensor<E>) -> Result<Tensor<E>> {
    let ms = map.shape().to_vec();
    if ms.len() != 3 {
        return Err(Error::shape("map", "[C,H,W]", format!("{ms:?}"), "nearest_sample"));
    }
    let cs = coords.shape().to_vec();
    if cs.len() != 2 || cs[1] != 2 {
        return Err(Error::shape("coords", "[n,2]", format!("{cs:?}"), "nearest_sample"));
    }
    if coords.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("nearest_sample: non-finite coordinate"));
    }
    let (c, h, w) = (ms[0], ms[1], ms[2]);
    let n = cs[0];
    let mut picks = vec![(-1isize, -1isize); n];
    let mut out = vec![E::zero(); n * c];
    {
        let md = map.data();
        let cd = coords.data();
        for i in 0..n {
            let x = round_half_away(cd[i * 2].as_f64());
            let y = round_half_away(cd[i * 2 + 1].as_f64());
            picks[i] = (x, y);
            for ci in 0..c {
                out[i * c + ci] = tap(&md[ci * h * w..(ci + 1) * h * w], h, w, y, x);
            }
        }
    }
    let pm = map.clone();
    Ok(Tensor::from_op(&[n, c], out, &[map], move |g| {
        let mut dmap = vec![E::zero(); c * h * w];
        for (i, &(x, y)) in picks.iter().enumerate() {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            for ci in 0..c {
                dmap[ci * h * w + y as usize * w + x as usize] += g[i * c + ci];
            }
        }
        pm.accum_grad(&dmap);
    }))
}
