//! Fused multi-head scaled dot-product self-attention.
//!
//! Operates on [B, S, D] where attention runs along S independently for
//! every batch row. The softmax probabilities are kept for the backward
//! pass (S is small — a window length — so this is cheap).

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::parallel;
use crate::numerics::tensor::Tensor;

/// Softmax(q·kᵀ/√dh)·v per (batch row, head). q, k, v: [B, S, D].
pub fn multi_head_sdpa<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
) -> Result<Tensor<E>> {
    let shape = q.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("q", "[B,S,D]", format!("{shape:?}"), "attention"));
    }
    if k.shape() != &shape[..] || v.shape() != &shape[..] {
        return Err(Error::shape("k/v", format!("{shape:?}"), format!("{:?}", k.shape()), "attention"));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "attention: model dim {d} not divisible by heads {heads}"
        )));
    }
    let dh = d / heads;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());

    let mut out = vec![E::zero(); b * s * d];
    let mut probs = vec![E::zero(); b * heads * s * s];
    {
        let q_ref = q.data();
        let k_ref = k.data();
        let v_ref = v.data();
        let qd: &[E] = &q_ref;
        let kd: &[E] = &k_ref;
        let vd: &[E] = &v_ref;
        // Two disjoint output buffers; split over batch rows by hand so both
        // can be filled in one pass.
        let probs_cell = &mut probs;
        let out_rows = &mut out;
        let work = |bi: usize, orow: &mut [E], prow: &mut [E]| {
            for h in 0..heads {
                let ph = &mut prow[h * s * s..(h + 1) * s * s];
                // scores
                for i in 0..s {
                    let qrow = &qd[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                    for j in 0..s {
                        let krow = &kd[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                        let mut acc = E::zero();
                        for t in 0..dh {
                            acc += qrow[t] * krow[t];
                        }
                        ph[i * s + j] = acc * scale;
                    }
                }
                // softmax rows
                for i in 0..s {
                    let row = &mut ph[i * s..(i + 1) * s];
                    let mut m = row[0];
                    for &x in row.iter() {
                        m = m.max(x);
                    }
                    let mut sum = E::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        sum += *x;
                    }
                    let inv = E::one() / sum;
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
                // out = P · V
                for i in 0..s {
                    let orow_i = &mut orow[i * d + h * dh..i * d + (h + 1) * dh];
                    for j in 0..s {
                        let p = ph[i * s + j];
                        let vrow = &vd[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                        for t in 0..dh {
                            orow_i[t] += p * vrow[t];
                        }
                    }
                }
            }
        };
        if parallel::threads() > 1 && b > 1 {
            // Disjoint splits of both buffers per batch row.
            let o_chunks: Vec<&mut [E]> = out_rows.chunks_mut(s * d).collect();
            let p_chunks: Vec<&mut [E]> = probs_cell.chunks_mut(heads * s * s).collect();
            let pairs: Vec<(usize, (&mut [E], &mut [E]))> =
                o_chunks.into_iter().zip(p_chunks).enumerate().collect();
            parallel::scope_for_each(pairs, |(bi, (o, p))| work(bi, o, p));
        } else {
            for bi in 0..b {
                work(
                    bi,
                    &mut out_rows[bi * s * d..(bi + 1) * s * d],
                    &mut probs_cell[bi * heads * s * s..(bi + 1) * heads * s * s],
                );
            }
        }
    }

    let (pq, pk, pv) = (q.clone(), k.clone(), v.clone());
    Ok(Tensor::from_op(&shape, out, &[q, k, v], move |g| {
        let qd = pq.data();
        let kd = pk.data();
        let vd = pv.data();
        let mut dq = vec![E::zero(); b * s * d];
        let mut dk = vec![E::zero(); b * s * d];
        let mut dv = vec![E::zero(); b * s * d];
        for bi in 0..b {
            for h in 0..heads {
                let ph = &probs[(bi * heads + h) * s * s..(bi * heads + h + 1) * s * s];
                // dV = Pᵀ · dO
                for j in 0..s {
                    let dvrow = &mut dv[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                    for i in 0..s {
                        let p = ph[i * s + j];
                        let grow = &g[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        for t in 0..dh {
                            dvrow[t] += p * grow[t];
                        }
                    }
                }
                // dP then dS (softmax backward), then dQ, dK.
                for i in 0..s {
                    let grow = &g[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                    let mut dp = vec![E::zero(); s];
                    for j in 0..s {
                        let vrow = &vd[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                        let mut acc = E::zero();
                        for t in 0..dh {
                            acc += grow[t] * vrow[t];
                        }
                        dp[j] = acc;
                    }
                    let mut dot = E::zero();
                    for j in 0..s {
                        dot += dp[j] * ph[i * s + j];
                    }
                    for j in 0..s {
                        let ds = ph[i * s + j] * (dp[j] - dot) * scale;
                        let krow = &kd[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                        let qrow = &qd[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        let dqrow =
                            &mut dq[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        for t in 0..dh {
                            dqrow[t] += ds * krow[t];
                        }
                        let dkrow =
                            &mut dk[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                        for t in 0..dh {
                            dkrow[t] += ds * qrow[t];
                        }
                    }
                }
            }
        }
        if pq.requires_grad() {
            pq.accum_grad(&dq);
        }
        if pk.requires_grad() {
            pk.accum_grad(&dk);
        }
        if pv.requires_grad() {
            pv.accum_grad(&dv);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attends_to_itself() {
        let x = Tensor::<f64>::new(&[1, 1, 4], vec![0.5, -1.0, 2.0, 0.0]);
        let y = multi_head_sdpa(&x, &x, &x, 2).unwrap();
        // With one token, softmax weight is 1 and the output equals v.
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let token = [0.3, 1.2, -0.7, 0.1];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&token);
        }
        let x = Tensor::<f64>::new(&[1, 5, 4], data);
        let y = multi_head_sdpa(&x, &x, &x, 2).unwrap();
        let d = y.to_vec();
        for i in 1..5 {
            for t in 0..4 {
                assert!((d[i * 4 + t] - d[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_head_count() {
        let x = Tensor::<f64>::ones(&[1, 2, 6]);
        assert!(multi_head_sdpa(&x, &x, &x, 4).is_err());
    }
}
