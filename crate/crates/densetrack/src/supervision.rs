//! Training losses over sparse annotations.
//!
//! Trajectories get a weighted L1 loss over all refinement steps with a
//! geometric step weighting (later steps weigh more); visibility and
//! confidence get sigmoid-then-BCE. Confidence targets are recomputed per
//! step as "prediction within 12 px of ground truth" and are constants —
//! no gradient flows through the indicator.

use crate::error::{Error, Result};
use crate::numerics::{bce_mean, bilinear_sample, concat, nearest_sample, sigmoid, Element, Tensor};

/// Per-window sparse ground truth. `visibility` is absent for flow-style
/// data; visibility and confidence losses are skipped entirely then.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Window length (frames) and point count.
    pub t: usize,
    pub n: usize,
    /// Query coordinates on the query frame, pixel units, length n.
    pub queries: Vec<(f64, f64)>,
    /// [t*n] target positions (x, y) in pixels.
    pub positions: Vec<(f64, f64)>,
    /// [t*n] binary visibility labels, when the dataset has them.
    pub visibility: Option<Vec<bool>>,
    /// [t*n] whether an annotation exists at all.
    pub valid: Vec<bool>,
}

impl GroundTruth {
    pub fn has_visibility(&self) -> bool {
        self.visibility.is_some()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    /// Relative weight of occluded points in the trajectory loss.
    pub occluded_weight: f64,
    /// Confidence positive threshold, pixels (strict inequality).
    pub conf_threshold_px: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.05,
            gamma: 0.8,
            occluded_weight: 1.0 / 5.0,
            conf_threshold_px: 12.0,
        }
    }
}

/// Sparse predictions sampled from one refinement step's full-resolution
/// maps: bilinear for trajectories, nearest-neighbor for vis/conf.
pub struct SparsePreds<E: Element> {
    /// [t*n, 2] predicted positions (query + sampled flow).
    pub positions: Tensor<E>,
    /// [t*n] probabilities (sigmoid applied).
    pub vis_prob: Tensor<E>,
    /// [t*n] probabilities.
    pub conf_prob: Tensor<E>,
    /// Points whose query fell outside the image (excluded and counted).
    pub excluded: usize,
    /// [t*n] sampling validity: gt valid AND in bounds.
    pub usable: Vec<bool>,
}

/// Sample per-point predictions from dense full-resolution maps.
/// flow: [S,2,H,W]; vis/conf logits: [S,1,H,W].
pub fn sample_sparse<E: Element>(
    flow: &Tensor<E>,
    vis_logit: &Tensor<E>,
    conf_logit: &Tensor<E>,
    gt: &GroundTruth,
) -> Result<SparsePreds<E>> {
    let fs = flow.shape().to_vec();
    if fs.len() != 4 || fs[1] != 2 {
        return Err(Error::shape("flow", "[S,2,H,W]", format!("{fs:?}"), "sample_sparse"));
    }
    let (s, h, w) = (fs[0], fs[2], fs[3]);
    if s != gt.t {
        return Err(Error::shape("frames", gt.t, s, "sample_sparse"));
    }
    let n = gt.n;
    let mut excluded = 0usize;
    let mut usable = vec![false; s * n];
    let mut coord_data = Vec::with_capacity(n * 2);
    for &(qx, qy) in &gt.queries {
        let inside = (0.0..=(w - 1) as f64).contains(&qx) && (0.0..=(h - 1) as f64).contains(&qy);
        if !inside {
            excluded += 1;
        }
        coord_data.push(E::from_f64(qx));
        coord_data.push(E::from_f64(qy));
    }
    for t in 0..s {
        for i in 0..n {
            let (qx, qy) = gt.queries[i];
            let inside =
                (0.0..=(w - 1) as f64).contains(&qx) && (0.0..=(h - 1) as f64).contains(&qy);
            usable[t * n + i] = inside && gt.valid[t * n + i];
        }
    }
    let coords = Tensor::new(&[n, 2], coord_data);

    let mut pos_frames = Vec::with_capacity(s);
    let mut vis_frames = Vec::with_capacity(s);
    let mut conf_frames = Vec::with_capacity(s);
    for t in 0..s {
        let fmap = flow.slice(0, t, 1).reshape(&[2, h, w]);
        let sampled = bilinear_sample(&fmap, &coords)?; // [n,2] flow
        let offsets = sampled.add(&coords); // position = query + flow
        pos_frames.push(offsets);
        let vmap = vis_logit.slice(0, t, 1).reshape(&[1, h, w]);
        vis_frames.push(nearest_sample(&vmap, &coords)?.reshape(&[n]));
        let cmap = conf_logit.slice(0, t, 1).reshape(&[1, h, w]);
        conf_frames.push(nearest_sample(&cmap, &coords)?.reshape(&[n]));
    }
    let pos_refs: Vec<&Tensor<E>> = pos_frames.iter().collect();
    let vis_refs: Vec<&Tensor<E>> = vis_frames.iter().collect();
    let conf_refs: Vec<&Tensor<E>> = conf_frames.iter().collect();
    Ok(SparsePreds {
        positions: concat(&pos_refs, 0), // [s*n, 2]
        vis_prob: sigmoid(&concat(&vis_refs, 0)),
        conf_prob: sigmoid(&concat(&conf_refs, 0)),
        excluded,
        usable,
    })
}

/// Weighted multi-step trajectory loss:
/// α · Σ_k γ^(K−k) · mean over valid points of w_p·‖P_k − P̂‖₁,
/// with w_p = 1 for visible points and `occluded_weight` for occluded ones
/// (1 everywhere when the dataset has no visibility labels).
pub fn track_loss<E: Element>(
    steps: &[SparsePreds<E>],
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Tensor<E> {
    let k_total = steps.len();
    assert!(k_total >= 1, "track_loss needs at least one step");
    let tn = gt.t * gt.n;

    let mut point_weight = vec![E::zero(); tn * 2];
    let mut count = 0usize;
    for i in 0..tn {
        if !steps[0].usable[i] {
            continue;
        }
        count += 1;
        let w = match &gt.visibility {
            Some(v) => {
                if v[i] {
                    1.0
                } else {
                    weights.occluded_weight
                }
            }
            None => 1.0,
        };
        point_weight[i * 2] = E::from_f64(w);
        point_weight[i * 2 + 1] = E::from_f64(w);
    }
    if count == 0 {
        eprintln!("warning: track_loss over zero valid points");
        return Tensor::scalar(E::zero());
    }
    let weight_t = Tensor::new(&[tn, 2], point_weight);
    let mut gt_pos = Vec::with_capacity(tn * 2);
    for &(x, y) in &gt.positions {
        gt_pos.push(E::from_f64(x));
        gt_pos.push(E::from_f64(y));
    }
    let gt_t = Tensor::new(&[tn, 2], gt_pos);

    let mut total = Tensor::scalar(E::zero());
    for (k, step) in steps.iter().enumerate() {
        let per_point = step.positions.sub(&gt_t).abs().mul(&weight_t).sum();
        let step_w = weights.gamma.powi((k_total - 1 - k) as i32) / count as f64;
        total = total.add(&per_point.scale(step_w));
    }
    total.scale(weights.alpha)
}

/// Σ_k BCE(V_k, V̂), mean over valid labeled points per step.
/// Returns zero when the dataset has no visibility labels.
pub fn vis_loss<E: Element>(steps: &[SparsePreds<E>], gt: &GroundTruth) -> Tensor<E> {
    let Some(vis) = &gt.visibility else {
        return Tensor::scalar(E::zero());
    };
    let tn = gt.t * gt.n;
    let targets = Tensor::new(
        &[tn],
        vis.iter()
            .map(|&v| if v { E::one() } else { E::zero() })
            .collect::<Vec<_>>(),
    );
    let mut total = Tensor::scalar(E::zero());
    for step in steps {
        let mask = usable_mask::<E>(&step.usable);
        total = total.add(&bce_mean(&step.vis_prob, &targets, &mask));
    }
    total
}

/// Σ_k BCE(C_k, 1[‖X_k − X̂‖₂ < threshold]); the target is recomputed per
/// step from that step's predictions (strict inequality at the boundary).
pub fn conf_loss<E: Element>(
    steps: &[SparsePreds<E>],
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Tensor<E> {
    if gt.visibility.is_none() {
        return Tensor::scalar(E::zero());
    }
    let tn = gt.t * gt.n;
    let mut total = Tensor::scalar(E::zero());
    for step in steps {
        let pos = step.positions.data();
        let mut targets = vec![E::zero(); tn];
        for i in 0..tn {
            let dx = pos[i * 2].as_f64() - gt.positions[i].0;
            let dy = pos[i * 2 + 1].as_f64() - gt.positions[i].1;
            if (dx * dx + dy * dy).sqrt() < weights.conf_threshold_px {
                targets[i] = E::one();
            }
        }
        drop(pos);
        let targets = Tensor::new(&[tn], targets);
        let mask = usable_mask::<E>(&step.usable);
        total = total.add(&bce_mean(&step.conf_prob, &targets, &mask));
    }
    total
}

fn usable_mask<E: Element>(usable: &[bool]) -> Tensor<E> {
    Tensor::new(
        &[usable.len()],
        usable
            .iter()
            .map(|&u| if u { E::one() } else { E::zero() })
            .collect::<Vec<_>>(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds_from_positions<E: Element>(
        positions: &[(f64, f64)],
        vis_prob: &[f64],
        conf_prob: &[f64],
    ) -> SparsePreds<E> {
        let n = positions.len();
        let mut p = Vec::new();
        for &(x, y) in positions {
            p.push(E::from_f64(x));
            p.push(E::from_f64(y));
        }
        SparsePreds {
            positions: Tensor::new(&[n, 2], p),
            vis_prob: Tensor::new(&[n], vis_prob.iter().map(|&v| E::from_f64(v)).collect::<Vec<_>>()),
            conf_prob: Tensor::new(&[n], conf_prob.iter().map(|&v| E::from_f64(v)).collect::<Vec<_>>()),
            excluded: 0,
            usable: vec![true; n],
        }
    }

    fn single_point_gt(pos: (f64, f64), visible: bool) -> GroundTruth {
        GroundTruth {
            t: 1,
            n: 1,
            queries: vec![(0.0, 0.0)],
            positions: vec![pos],
            visibility: Some(vec![visible]),
            valid: vec![true],
        }
    }

    #[test]
    fn perfect_predictions_zero_loss() {
        let gt = single_point_gt((3.0, 4.0), true);
        let step = preds_from_positions::<f64>(&[(3.0, 4.0)], &[1.0], &[1.0]);
        let l = track_loss(&[step], &gt, &LossWeights::default());
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn single_step_visible_point_arithmetic() {
        // one visible point, error (2,0): loss = 0.05 · 2 = 0.1
        let gt = single_point_gt((1.0, 1.0), true);
        let step = preds_from_positions::<f64>(&[(3.0, 1.0)], &[0.5], &[0.5]);
        let l = track_loss(&[step], &gt, &LossWeights::default());
        assert!((l.item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn occluded_point_weights_one_fifth() {
        let w = LossWeights::default();
        let gt_vis = single_point_gt((0.0, 0.0), true);
        let gt_occ = single_point_gt((0.0, 0.0), false);
        let step = || preds_from_positions::<f64>(&[(5.0, 0.0)], &[0.5], &[0.5]);
        let lv = track_loss(&[step()], &gt_vis, &w).item();
        let lo = track_loss(&[step()], &gt_occ, &w).item();
        assert!((lo * 5.0 - lv).abs() < 1e-12);
    }

    #[test]
    fn step_weights_are_powers_of_gamma() {
        // error 1 px in x at every step; per-step base loss = 0.05
        let gt = single_point_gt((0.0, 0.0), true);
        let steps: Vec<SparsePreds<f64>> = (0..4)
            .map(|_| preds_from_positions(&[(1.0, 0.0)], &[0.5], &[0.5]))
            .collect();
        let l = track_loss(&steps, &gt, &LossWeights::default()).item();
        let expect = 0.05 * (0.512 + 0.64 + 0.8 + 1.0);
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
    }

    #[test]
    fn vis_loss_half_prob() {
        let gt = single_point_gt((0.0, 0.0), true);
        let step = preds_from_positions::<f64>(&[(0.0, 0.0)], &[0.5], &[0.5]);
        let l = vis_loss(&[step], &gt).item();
        assert!((l - 0.6931471805599453).abs() < 1e-9);
    }

    #[test]
    fn conf_targets_threshold_is_strict() {
        let w = LossWeights::default();
        // error exactly 12 px -> target 0; conf prob 1.0 should be punished
        let gt = single_point_gt((0.0, 0.0), true);
        let step = preds_from_positions::<f64>(&[(12.0, 0.0)], &[0.5], &[1.0 - 1e-7]);
        let l_at = conf_loss(&[step], &gt, &w).item();
        assert!(l_at > 5.0, "target must be 0 at the boundary, loss {l_at}");
        // error just inside -> target 1, high conf is right
        let step = preds_from_positions::<f64>(&[(11.999, 0.0)], &[0.5], &[1.0 - 1e-7]);
        let l_in = conf_loss(&[step], &gt, &w).item();
        assert!(l_in < 1e-5, "{l_in}");
    }

    #[test]
    fn flow_only_batches_skip_vis_conf() {
        let mut gt = single_point_gt((1.0, 0.0), true);
        gt.visibility = None;
        let step = preds_from_positions::<f64>(&[(3.0, 0.0)], &[0.9], &[0.9]);
        assert_eq!(vis_loss(&[step], &gt).item(), 0.0);
        let step = preds_from_positions::<f64>(&[(3.0, 0.0)], &[0.9], &[0.9]);
        assert_eq!(conf_loss(&[step], &gt, &LossWeights::default()).item(), 0.0);
        let step = preds_from_positions::<f64>(&[(3.0, 0.0)], &[0.9], &[0.9]);
        assert!(track_loss(&[step], &gt, &LossWeights::default()).item() > 0.0);
    }

    #[test]
    fn empty_valid_set_returns_zero() {
        let mut gt = single_point_gt((0.0, 0.0), true);
        gt.valid = vec![false];
        let mut step = preds_from_positions::<f64>(&[(5.0, 0.0)], &[0.5], &[0.5]);
        step.usable = vec![false];
        assert_eq!(track_loss(&[step], &gt, &LossWeights::default()).item(), 0.0);
    }

    #[test]
    fn sample_sparse_conventions() {
        // flow map with constant (1, 2): position = query + (1,2);
        // vis logit step between columns exercises nearest-neighbor rounding
        let (h, w) = (4, 4);
        let mut flow = vec![0.0f64; 2 * h * w];
        for i in 0..h * w {
            flow[i] = 1.0;
            flow[h * w + i] = 2.0;
        }
        let flow = Tensor::new(&[1, 2, h, w], flow);
        let mut vl = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                vl[y * w + x] = if x >= 2 { 5.0 } else { -5.0 };
            }
        }
        let vis_logit = Tensor::new(&[1, 1, h, w], vl.clone());
        let conf_logit = Tensor::new(&[1, 1, h, w], vl);
        let gt = GroundTruth {
            t: 1,
            n: 2,
            queries: vec![(1.49, 1.0), (1.51, 1.0)],
            positions: vec![(0.0, 0.0), (0.0, 0.0)],
            visibility: Some(vec![true, true]),
            valid: vec![true, true],
        };
        let preds = sample_sparse(&flow, &vis_logit, &conf_logit, &gt).unwrap();
        let pos = preds.positions.to_vec();
        assert!((pos[0] - 2.49).abs() < 1e-9 && (pos[1] - 3.0).abs() < 1e-9);
        // nearest at x=1.49 picks column 1 (logit -5), at 1.51 picks column 2 (+5)
        let vp = preds.vis_prob.to_vec();
        assert!(vp[0] < 0.01 && vp[1] > 0.99);
    }
}
