//! Linear maps and normalization kernels.

use crate::numerics::element::Element;
use crate::numerics::matmul::{mm_nn, mm_nt, mm_tn};
use crate::numerics::tensor::Tensor;

/// y[..., out] = x[..., in] · Wᵀ + b, with W shaped [out, in].
pub fn linear<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Tensor<E> {
    let in_dim = *x.shape().last().expect("linear: rank >= 1");
    let (out_dim, w_in) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(in_dim, w_in, "linear: input dim vs weight");
    assert_eq!(bias.numel(), out_dim, "linear: bias dim");
    let rows = x.numel() / in_dim;

    let mut data = vec![E::zero(); rows * out_dim];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        mm_nt(rows, in_dim, out_dim, &xd, &wd, &mut data);
        for r in 0..rows {
            for (v, &b) in data[r * out_dim..(r + 1) * out_dim].iter_mut().zip(bd.iter()) {
                *v += b;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = out_dim;

    let (px, pw, pb) = (x.clone(), weight.clone(), bias.clone());
    Tensor::from_op(&out_shape, data, &[x, weight, bias], move |g| {
        if px.requires_grad() {
            let wd = pw.data();
            let mut dx = vec![E::zero(); rows * in_dim];
            mm_nn(rows, out_dim, in_dim, g, &wd, &mut dx);
            px.accum_grad(&dx);
        }
        if pw.requires_grad() {
            let xd = px.data();
            let mut dw = vec![E::zero(); out_dim * in_dim];
            mm_tn(out_dim, rows, in_dim, g, &xd, &mut dw);
            pw.accum_grad(&dw);
        }
        if pb.requires_grad() {
            let mut db = vec![E::zero(); out_dim];
            for r in 0..rows {
                for (o, &gv) in db.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                    *o += gv;
                }
            }
            pb.accum_grad(&db);
        }
    })
}

/// Layer norm over the last axis with learnable affine.
///
/// Per row: (x − μ)/√(σ² + ε) · γ + β, with biased variance and ε inside
/// the square root. A constant row therefore normalizes to β.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Tensor<E> {
    let c = *x.shape().last().expect("layer_norm: rank >= 1");
    assert!(c > 0, "layer_norm over empty axis");
    assert_eq!(gamma.numel(), c);
    assert_eq!(beta.numel(), c);
    let rows = x.numel() / c;
    let epsv = E::from_f64(eps);
    let inv_c = E::from_f64(1.0 / c as f64);

    let mut data = vec![E::zero(); rows * c];
    let mut xhat = vec![E::zero(); rows * c];
    let mut inv_std = vec![E::zero(); rows];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu: E = row.iter().copied().sum::<E>() * inv_c;
            let var: E = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() * inv_c;
            let istd = E::one() / (var + epsv).sqrt();
            inv_std[r] = istd;
            for j in 0..c {
                let xh = (row[j] - mu) * istd;
                xhat[r * c + j] = xh;
                data[r * c + j] = xh * gd[j] + bd[j];
            }
        }
    }
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(x.shape(), data, &[x, gamma, beta], move |g| {
        let gd = pg.data();
        if px.requires_grad() {
            let mut dx = vec![E::zero(); rows * c];
            for r in 0..rows {
                // dxhat, then the two mean corrections from μ and σ².
                let mut mean_dxh = E::zero();
                let mut mean_dxh_xh = E::zero();
                for j in 0..c {
                    let dxh = g[r * c + j] * gd[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xhat[r * c + j];
                }
                mean_dxh *= inv_c;
                mean_dxh_xh *= inv_c;
                for j in 0..c {
                    let dxh = g[r * c + j] * gd[j];
                    dx[r * c + j] =
                        inv_std[r] * (dxh - mean_dxh - xhat[r * c + j] * mean_dxh_xh);
                }
            }
            px.accum_grad(&dx);
        }
        if pg.requires_grad() {
            let mut dgm = vec![E::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    dgm[j] += g[r * c + j] * xhat[r * c + j];
                }
            }
            pg.accum_grad(&dgm);
        }
        if pb.requires_grad() {
            let mut db = vec![E::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    db[j] += g[r * c + j];
                }
            }
            pb.accum_grad(&db);
        }
    })
}

/// Instance norm without affine: normalize each (n, c) plane of a
/// [N, C, H, W] tensor over its spatial extent.
pub fn instance_norm2d<E: Element>(x: &Tensor<E>, eps: f64) -> Tensor<E> {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 4, "instance_norm2d expects [N,C,H,W]");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    assert!(hw > 0, "instance_norm2d over empty plane");
    let planes = n * c;
    let epsv = E::from_f64(eps);
    let inv_hw = E::from_f64(1.0 / hw as f64);

    let mut data = vec![E::zero(); planes * hw];
    let mut xhat = vec![E::zero(); planes * hw];
    let mut inv_std = vec![E::zero(); planes];
    {
        let xd = x.data();
        for p in 0..planes {
            let row = &xd[p * hw..(p + 1) * hw];
            let mu: E = row.iter().copied().sum::<E>() * inv_hw;
            let var: E = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() * inv_hw;
            let istd = E::one() / (var + epsv).sqrt();
            inv_std[p] = istd;
            for j in 0..hw {
                let v = (row[j] - mu) * istd;
                xhat[p * hw + j] = v;
                data[p * hw + j] = v;
            }
        }
    }
    let px = x.clone();
    Tensor::from_op(&shape, data, &[x], move |g| {
        let mut dx = vec![E::zero(); planes * hw];
        for p in 0..planes {
            let mut mean_g = E::zero();
            let mut mean_g_xh = E::zero();
            for j in 0..hw {
                mean_g += g[p * hw + j];
                mean_g_xh += g[p * hw + j] * xhat[p * hw + j];
            }
            mean_g *= inv_hw;
            mean_g_xh *= inv_hw;
            for j in 0..hw {
                dx[p * hw + j] =
                    inv_std[p] * (g[p * hw + j] - mean_g - xhat[p * hw + j] * mean_g_xh);
            }
        }
        px.accum_grad(&dx);
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let weight = Tensor::<f64>::new(&[3, 3], w);
        let bias = Tensor::<f64>::zeros(&[3]);
        let y = linear(&x, &weight, &bias);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn layer_norm_constant_row_gives_beta() {
        let x = Tensor::<f64>::new(&[1, 4], vec![3.0; 4]);
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-6);
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::<f64>::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = layer_norm(&x, &g, &b, 1e-12).to_vec();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn instance_norm_per_plane() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 10.0, 10.0]);
        let y = instance_norm2d(&x, 1e-6).to_vec();
        let m0: f64 = y[..3].iter().sum::<f64>() / 3.0;
        assert!(m0.abs() < 1e-9);
        assert!(y[3..].iter().all(|&v| v.abs() < 1e-3)); // zero-variance plane
    }
}
