//! Pointwise activations, softmax, layer-scale and binary cross entropy.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::tensor::Tensor;

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| v.max(E::zero())).collect();
    let p = x.clone();
    Tensor::from_op(x.shape(), data, &[x], move |g| {
        let d: Vec<E> = g
            .iter()
            .zip(p.data().iter())
            .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
            .collect();
        p.accum_grad(&d);
    })
}

/// Exact-erf GELU: x·Φ(x) with Φ the standard normal CDF.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|&v| v * half * (E::one() + (v * inv_sqrt2).erf()))
        .collect();
    let p = x.clone();
    Tensor::from_op(x.shape(), data, &[x], move |g| {
        let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let d: Vec<E> = g
            .iter()
            .zip(p.data().iter())
            .map(|(&g, &v)| {
                let phi = half * (E::one() + (v * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-v * v * half).exp();
                g * (phi + v * pdf)
            })
            .collect();
        p.accum_grad(&d);
    })
}

pub fn sigmoid<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|&v| E::one() / (E::one() + (-v).exp()))
        .collect();
    let saved = data.clone();
    let p = x.clone();
    Tensor::from_op(x.shape(), data, &[x], move |g| {
        let d: Vec<E> = g
            .iter()
            .zip(&saved)
            .map(|(&g, &s)| g * s * (E::one() - s))
            .collect();
        p.accum_grad(&d);
    })
}

pub fn tanh<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| v.tanh()).collect();
    let saved = data.clone();
    let p = x.clone();
    Tensor::from_op(x.shape(), data, &[x], move |g| {
        let d: Vec<E> = g
            .iter()
            .zip(&saved)
            .map(|(&g, &t)| g * (E::one() - t * t))
            .collect();
        p.accum_grad(&d);
    })
}

/// Softmax along `axis`. Scores are shifted by the slice max before
/// exponentiation; outputs are nonnegative and sum to 1 along the axis.
pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    if shape[axis] == 0 {
        return Err(Error::arg("softmax over empty axis"));
    }
    let outer: usize = shape[..axis].iter().product();
    let ax = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();

    let mut data = x.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ax * inner + i;
            let mut m = data[base];
            for j in 1..ax {
                m = m.max(data[base + j * inner]);
            }
            let mut s = E::zero();
            for j in 0..ax {
                let e = (data[base + j * inner] - m).exp();
                data[base + j * inner] = e;
                s += e;
            }
            let inv = E::one() / s;
            for j in 0..ax {
                data[base + j * inner] *= inv;
            }
        }
    }
    let probs = data.clone();
    let p = x.clone();
    Ok(Tensor::from_op(&shape, data, &[x], move |g| {
        let mut d = vec![E::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ax * inner + i;
                let mut dotv = E::zero();
                for j in 0..ax {
                    let k = base + j * inner;
                    dotv += probs[k] * g[k];
                }
                for j in 0..ax {
                    let k = base + j * inner;
                    d[k] = probs[k] * (g[k] - dotv);
                }
            }
        }
        p.accum_grad(&d);
    }))
}

/// Per-channel scaling over the last axis: y[..., c] = x[..., c] · γ[c].
pub fn scale_lastdim<E: Element>(x: &Tensor<E>, gamma: &Tensor<E>) -> Tensor<E> {
    let c = *x.shape().last().expect("scale_lastdim: rank >= 1");
    assert_eq!(gamma.numel(), c, "scale_lastdim: gamma length");
    let rows = x.numel() / c;
    let mut data = x.to_vec();
    {
        let gd = gamma.data();
        for r in 0..rows {
            for (v, &g) in data[r * c..(r + 1) * c].iter_mut().zip(gd.iter()) {
                *v *= g;
            }
        }
    }
    let (px, pg) = (x.clone(), gamma.clone());
    Tensor::from_op(x.shape(), data, &[x, gamma], move |g| {
        if px.requires_grad() {
            let gd = pg.data();
            let mut d = vec![E::zero(); g.len()];
            for r in 0..rows {
                for j in 0..c {
                    d[r * c + j] = g[r * c + j] * gd[j];
                }
            }
            px.accum_grad(&d);
        }
        if pg.requires_grad() {
            let xd = px.data();
            let mut d = vec![E::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    d[j] += g[r * c + j] * xd[r * c + j];
                }
            }
            pg.accum_grad(&d);
        }
    })
}

/// Mean binary cross entropy over masked elements.
///
/// Probabilities are clamped to [1e-6, 1−1e-6] before the log; the clamp
/// also zeroes the gradient outside that range. `targets` and `mask` are
/// constants. Returns 0 when the mask is empty.
pub fn bce_mean<E: Element>(probs: &Tensor<E>, targets: &Tensor<E>, mask: &Tensor<E>) -> Tensor<E> {
    assert_eq!(probs.shape(), targets.shape());
    assert_eq!(probs.shape(), mask.shape());
    let lo = E::from_f64(1e-6);
    let hi = E::one() - lo;
    let count: f64 = mask.data().iter().map(|&m| m.as_f64()).sum();
    if count == 0.0 {
        return Tensor::scalar(E::zero());
    }
    let inv_n = E::from_f64(1.0 / count);
    let mut acc = E::zero();
    {
        let pd = probs.data();
        let td = targets.data();
        let md = mask.data();
        for ((&p, &t), &m) in pd.iter().zip(td.iter()).zip(md.iter()) {
            if m > E::zero() {
                let pc = p.max(lo).min(hi);
                acc += -(t * pc.ln() + (E::one() - t) * (E::one() - pc).ln());
            }
        }
    }
    let loss = acc * inv_n;
    let (pp, pt, pm) = (probs.clone(), targets.clone(), mask.clone());
    Tensor::from_op(&[1], vec![loss], &[probs], move |g| {
        let pd = pp.data();
        let td = pt.data();
        let md = pm.data();
        let mut d = vec![E::zero(); pd.len()];
        for i in 0..pd.len() {
            if md[i] > E::zero() && pd[i] > lo && pd[i] < hi {
                let p = pd[i];
                let t = td[i];
                d[i] = g[0] * inv_n * ((p - t) / (p * (E::one() - p)));
            }
        }
        pp.accum_grad(&d);
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::<f64>::new(&[2], vec![0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::new(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect());
        let y = softmax(&x, 1).unwrap();
        let d = y.to_vec();
        for r in 0..3 {
            let s: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(d[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::<f64>::new(&[2, 3, 2], (0..12).map(|i| i as f64 * 0.3).collect());
        let y = softmax(&x, 1).unwrap();
        let d = y.to_vec();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| d[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        let x = Tensor::<f64>::new(&[1], vec![0.0]);
        assert_eq!(gelu(&x).item(), 0.0);
    }

    #[test]
    fn bce_half_prob() {
        let p = Tensor::<f64>::new(&[2], vec![0.5, 0.5]);
        let t = Tensor::<f64>::new(&[2], vec![1.0, 0.0]);
        let m = Tensor::<f64>::ones(&[2]);
        let l = bce_mean(&p, &t, &m).item();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn bce_exact_labels_hit_clamp_floor() {
        let p = Tensor::<f64>::new(&[2], vec![1.0, 0.0]);
        let t = Tensor::<f64>::new(&[2], vec![1.0, 0.0]);
        let m = Tensor::<f64>::ones(&[2]);
        let l = bce_mean(&p, &t, &m).item();
        assert!(l.abs() < 1.1e-6);
    }

    #[test]
    fn bce_empty_mask_is_zero() {
        let p = Tensor::<f64>::new(&[2], vec![0.3, 0.7]);
        let t = Tensor::<f64>::new(&[2], vec![1.0, 0.0]);
        let m = Tensor::<f64>::zeros(&[2]);
        assert_eq!(bce_mean(&p, &t, &m).item(), 0.0);
    }
}
