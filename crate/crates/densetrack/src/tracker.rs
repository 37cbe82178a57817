//! Sliding-window inference over a whole video.
//!
//! Windows of S frames advance at stride S/2 starting at the query frame;
//! a window that would overrun the video is replaced by one end-aligned
//! window, and videos shorter than S get a single window padded by
//! repeating the last frame (padded outputs discarded). State carries
//! over: the overlapping timesteps copy the previous window's estimates
//! and the tail replicates the last of them. Frames before the query are
//! covered by tracking the time-reversed prefix. Where windows overlap,
//! the later window's estimate wins.

use crate::error::{Error, Result};
use crate::model::{QueryEncoding, TrackModel};
use crate::numerics::{no_grad, sigmoid, Element, Tensor};
use crate::refiner::{TrackState, UPSAMPLE_FACTOR};

/// Window schedule for one direction of tracking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub starts: Vec<usize>,
    pub window_len: usize,
    pub stride: usize,
    pub total_frames: usize,
    pub query_index: usize,
    /// Video shorter than one window: repeat the last frame, discard pads.
    pub padded: bool,
}

/// Starts begin at the query frame and advance by S/2; a window that would
/// overrun is replaced by the end-aligned start T−S.
pub fn plan_windows(t: usize, s: usize, query_index: usize) -> Result<WindowPlan> {
    if t == 0 {
        return Err(Error::arg("plan_windows: empty video"));
    }
    if query_index >= t {
        return Err(Error::arg(format!(
            "query index {query_index} outside video of {t} frames"
        )));
    }
    if s < 2 || s % 2 != 0 {
        return Err(Error::arg(format!("window length {s} must be even and >= 2")));
    }
    let remaining = t - query_index;
    if remaining < s {
        return Ok(WindowPlan {
            starts: vec![query_index],
            window_len: s,
            stride: s / 2,
            total_frames: t,
            query_index,
            padded: true,
        });
    }
    let mut starts = vec![query_index];
    loop {
        let last = *starts.last().unwrap();
        if last + s >= t {
            break;
        }
        let mut next = last + s / 2;
        if next + s > t {
            next = t - s;
        }
        starts.push(next);
    }
    Ok(WindowPlan {
        starts,
        window_len: s,
        stride: s / 2,
        total_frames: t,
        query_index,
        padded: false,
    })
}

/// Initialize the tracking state for the next window from the previous
/// window's final state: overlapping timesteps are copied, the rest
/// replicate the last overlapped estimate. Hidden state carries the same
/// way. Runs on plain data (no gradient flows across windows).
pub fn carry_state<E: Element>(
    prev: &TrackState<E>,
    prev_start: usize,
    next_start: usize,
) -> Result<TrackState<E>> {
    let s = prev.window_len();
    if next_start <= prev_start || next_start - prev_start > s {
        return Err(Error::arg(format!(
            "window plan violation: carry from start {prev_start} to {next_start} with S={s}"
        )));
    }
    let shift = next_start - prev_start;
    let carry = |t: &Tensor<E>| -> Tensor<E> {
        let shape = t.shape().to_vec();
        let per = t.numel() / s;
        let d = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for k in 0..s {
            let src = (k + shift).min(s - 1);
            out.extend_from_slice(&d[src * per..(src + 1) * per]);
        }
        Tensor::new(&shape, out)
    };
    Ok(TrackState {
        flow: carry(&prev.flow),
        vis_logit: carry(&prev.vis_logit),
        conf_logit: carry(&prev.conf_logit),
        hidden: carry(&prev.hidden),
    })
}

/// Fresh state for the first window (flow 0 = meshgrid positions, logits
/// 0, hidden tiled from the query features).
pub fn init_first_window<E: Element>(
    model: &TrackModel<E>,
    s: usize,
    h: usize,
    w: usize,
    query: &QueryEncoding<E>,
) -> TrackState<E> {
    model.init_state(s, h, w, query)
}

/// Dense per-video result: [T,H,W,4] with channels (flow x, flow y,
/// visibility, confidence), probabilities already sigmoided.
pub struct TrackerOutput<E: Element> {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major [T][H][W][4].
    pub data: Vec<E>,
}

impl<E: Element> TrackerOutput<E> {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        TrackerOutput {
            t,
            h,
            w,
            data: vec![E::zero(); t * h * w * 4],
        }
    }

    #[inline]
    pub fn value(&self, t: usize, y: usize, x: usize, c: usize) -> E {
        self.data[((t * self.h + y) * self.w + x) * 4 + c]
    }

    /// Interleaved (fx, fy) pairs for one frame, row-major.
    pub fn flow_pairs(&self, t: usize) -> Vec<E> {
        let mut out = Vec::with_capacity(self.h * self.w * 2);
        for y in 0..self.h {
            for x in 0..self.w {
                out.push(self.value(t, y, x, 0));
                out.push(self.value(t, y, x, 1));
            }
        }
        out
    }

    /// Bilinear sample of one channel at pixel coordinates (zero padded).
    fn sample_bilinear(&self, t: usize, c: usize, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let tap = |yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= self.h as isize || xx >= self.w as isize {
                0.0
            } else {
                self.value(t, yy as usize, xx as usize, c).as_f64()
            }
        };
        (1.0 - fx) * (1.0 - fy) * tap(y0, x0)
            + fx * (1.0 - fy) * tap(y0, x0 + 1)
            + (1.0 - fx) * fy * tap(y0 + 1, x0)
            + fx * fy * tap(y0 + 1, x0 + 1)
    }

    fn sample_nearest(&self, t: usize, c: usize, x: f64, y: f64) -> f64 {
        let xx = crate::numerics::round_half_away(x);
        let yy = crate::numerics::round_half_away(y);
        if xx < 0 || yy < 0 || xx >= self.w as isize || yy >= self.h as isize {
            return 0.0;
        }
        self.value(t, yy as usize, xx as usize, c).as_f64()
    }
}

/// One sampled trajectory with per-frame visibility and confidence.
#[derive(Clone, Debug)]
pub struct PointTrack {
    pub positions: Vec<(f64, f64)>,
    pub visibility: Vec<f64>,
    pub confidence: Vec<f64>,
}

/// Sample per-point trajectories out of the dense output: bilinear for
/// flow, nearest-neighbor for visibility and confidence.
pub fn sample_tracks<E: Element>(
    out: &TrackerOutput<E>,
    queries: &[(f64, f64)],
) -> Result<Vec<PointTrack>> {
    let mut tracks = Vec::with_capacity(queries.len());
    for &(qx, qy) in queries {
        if !(0.0..out.w as f64).contains(&qx) || !(0.0..out.h as f64).contains(&qy) {
            return Err(Error::arg(format!(
                "query ({qx},{qy}) outside image {}x{}",
                out.w, out.h
            )));
        }
        let mut track = PointTrack {
            positions: Vec::with_capacity(out.t),
            visibility: Vec::with_capacity(out.t),
            confidence: Vec::with_capacity(out.t),
        };
        for t in 0..out.t {
            let fx = out.sample_bilinear(t, 0, qx, qy);
            let fy = out.sample_bilinear(t, 1, qx, qy);
            track.positions.push((qx + fx, qy + fy));
            track.visibility.push(out.sample_nearest(t, 2, qx, qy));
            track.confidence.push(out.sample_nearest(t, 3, qx, qy));
        }
        tracks.push(track);
    }
    Ok(tracks)
}

#[derive(Clone, Copy, Debug)]
pub struct TrackOptions {
    /// Window length S (even).
    pub window: usize,
    /// Refinement iterations per window.
    pub iters: usize,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions {
            window: 16,
            iters: 4,
        }
    }
}

/// Track every pixel of the query frame through the whole video.
///
/// Frames: [T,3,H,W] RGB in [0,1]. The input is padded internally to
/// multiples of 8 (edge replication) and outputs are cropped back. Windows
/// stream: the peak working set is one window's features plus the output
/// buffer.
pub fn track<E: Element>(
    model: &TrackModel<E>,
    frames: &Tensor<E>,
    query_index: usize,
    opts: TrackOptions,
) -> Result<TrackerOutput<E>> {
    let s = frames.shape().to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("frames", "[T,3,H,W]", format!("{s:?}"), "track"));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    if query_index >= t {
        return Err(Error::arg(format!(
            "query index {query_index} outside video of {t} frames"
        )));
    }
    no_grad(|| {
        let padded = pad_to_multiple_of_8(frames);
        let mut out = TrackerOutput::zeros(t, h, w);
        track_forward_into(model, &padded, query_index, t, opts, &mut out, false)?;
        if query_index > 0 {
            let back = reverse_track_padded(model, &padded, query_index, opts)?;
            // back covers original frames [0, query_index)
            let n = back.t * h * w * 4;
            out.data[..n].copy_from_slice(&back.data[..n]);
        }
        Ok(out)
    })
}

/// Track frames before the query by running on the time-reversed prefix
/// and reversing the result. Covers exactly frames [0, query_index).
pub fn reverse_track<E: Element>(
    model: &TrackModel<E>,
    frames: &Tensor<E>,
    query_index: usize,
    opts: TrackOptions,
) -> Result<TrackerOutput<E>> {
    if query_index == 0 {
        return Ok(TrackerOutput::zeros(0, frames.shape()[2], frames.shape()[3]));
    }
    no_grad(|| {
        let padded = pad_to_multiple_of_8(frames);
        reverse_track_padded(model, &padded, query_index, opts)
    })
}

struct PaddedVideo<E: Element> {
    frames: Tensor<E>, // [T,3,Hp,Wp]
    orig_h: usize,
    orig_w: usize,
}

fn pad_to_multiple_of_8<E: Element>(frames: &Tensor<E>) -> PaddedVideo<E> {
    let s = frames.shape().to_vec();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hp = h.div_ceil(8) * 8;
    let wp = w.div_ceil(8) * 8;
    if hp == h && wp == w {
        return PaddedVideo {
            frames: frames.clone(),
            orig_h: h,
            orig_w: w,
        };
    }
    let d = frames.data();
    let mut out = vec![E::zero(); t * c * hp * wp];
    for tc in 0..t * c {
        for y in 0..hp {
            let sy = y.min(h - 1);
            for x in 0..wp {
                let sx = x.min(w - 1);
                out[tc * hp * wp + y * wp + x] = d[tc * h * w + sy * w + sx];
            }
        }
    }
    PaddedVideo {
        frames: Tensor::new(&[t, c, hp, wp], out),
        orig_h: h,
        orig_w: w,
    }
}

fn frame_slice<E: Element>(video: &Tensor<E>, idx: usize) -> Tensor<E> {
    video.slice(0, idx, 1)
}

/// Assemble window frames [S,3,H,W] for a start index, repeating the last
/// frame when the plan is padded.
fn window_frames<E: Element>(video: &Tensor<E>, start: usize, s: usize, t: usize) -> Tensor<E> {
    let shape = video.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let d = video.data();
    let mut out = Vec::with_capacity(s * per);
    for k in 0..s {
        let idx = (start + k).min(t - 1);
        out.extend_from_slice(&d[idx * per..(idx + 1) * per]);
    }
    Tensor::new(&[s, c, h, w], out)
}

/// Forward tracking over [query_index, T) into `out` at absolute frame
/// indices. If `reversed_axis` is set, frame k of the padded video maps to
/// output frame (T−1−k) — used by the reverse pass.
fn track_forward_into<E: Element>(
    model: &TrackModel<E>,
    video: &PaddedVideo<E>,
    query_index: usize,
    t: usize,
    opts: TrackOptions,
    out: &mut TrackerOutput<E>,
    reversed_axis: bool,
) -> Result<()> {
    let query = model.encode_query(&frame_slice(&video.frames, query_index))?;

    // Degenerate video: only the query frame. Self-correspondence at
    // initialization: zero flow, probability one-half.
    if t - query_index == 1 {
        let half = E::from_f64(0.5);
        let dst = if reversed_axis { t - 1 - query_index } else { query_index };
        for y in 0..out.h {
            for x in 0..out.w {
                let base = ((dst * out.h + y) * out.w + x) * 4;
                out.data[base + 2] = half;
                out.data[base + 3] = half;
            }
        }
        return Ok(());
    }

    let plan = plan_windows(t, opts.window, query_index)?;
    let (hp, wp) = (video.frames.shape()[2], video.frames.shape()[3]);
    let (hc, wc) = (hp / UPSAMPLE_FACTOR, wp / UPSAMPLE_FACTOR);
    let mut prev: Option<(TrackState<E>, usize)> = None;
    for &start in &plan.starts {
        let frames = window_frames(&video.frames, start, plan.window_len, t);
        let bundle = model.encode_window(&frames, &query)?;
        let init = match &prev {
            None => init_first_window(model, plan.window_len, hc, wc, &query),
            Some((state, prev_start)) => carry_state(state, *prev_start, start)?,
        };
        let states = model.refine_window(&bundle, init, opts.iters)?;
        let last = states.last().expect("at least one iteration");
        let (flow, vis_logit, conf_logit) = model.refiner.upsample_state(last);
        let vis = sigmoid(&vis_logit);
        let conf = sigmoid(&conf_logit);
        write_window(out, &flow, &vis, &conf, start, t, video, reversed_axis);
        prev = Some((detach_state(last), start));
    }
    Ok(())
}

fn detach_state<E: Element>(st: &TrackState<E>) -> TrackState<E> {
    TrackState {
        flow: st.flow.detach(),
        vis_logit: st.vis_logit.detach(),
        conf_logit: st.conf_logit.detach(),
        hidden: st.hidden.detach(),
    }
}

#[allow(clippy::too_many_arguments)]
fn write_window<E: Element>(
    out: &mut TrackerOutput<E>,
    flow: &Tensor<E>,
    vis: &Tensor<E>,
    conf: &Tensor<E>,
    start: usize,
    t: usize,
    video: &PaddedVideo<E>,
    reversed_axis: bool,
) {
    let s = flow.shape()[0];
    let (hp, wp) = (flow.shape()[2], flow.shape()[3]);
    let fd = flow.data();
    let vd = vis.data();
    let cd = conf.data();
    let (h, w) = (video.orig_h, video.orig_w);
    for k in 0..s {
        let abs = start + k;
        if abs >= t {
            break; // padded slots are discarded
        }
        let dst = if reversed_axis { t - 1 - abs } else { abs };
        if dst >= out.t {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let base = ((dst * out.h + y) * out.w + x) * 4;
                out.data[base] = fd[((k * 2) * hp + y) * wp + x];
                out.data[base + 1] = fd[((k * 2 + 1) * hp + y) * wp + x];
                out.data[base + 2] = vd[(k * hp + y) * wp + x];
                out.data[base + 3] = cd[(k * hp + y) * wp + x];
            }
        }
    }
}

/// Reverse tracking: run the forward pipeline on the reversed prefix
/// [0..=query_index] (query at reversed position 0) and un-reverse.
fn reverse_track_padded<E: Element>(
    model: &TrackModel<E>,
    video: &PaddedVideo<E>,
    query_index: usize,
    opts: TrackOptions,
) -> Result<TrackerOutput<E>> {
    let prefix_len = query_index + 1;
    let shape = video.frames.shape().to_vec();
    let (c, hp, wp) = (shape[1], shape[2], shape[3]);
    let per = c * hp * wp;
    let mut rev = Vec::with_capacity(prefix_len * per);
    {
        let d = video.frames.data();
        for k in (0..prefix_len).rev() {
            rev.extend_from_slice(&d[k * per..(k + 1) * per]);
        }
    }
    let rev_video = PaddedVideo {
        frames: Tensor::new(&[prefix_len, c, hp, wp], rev),
        orig_h: video.orig_h,
        orig_w: video.orig_w,
    };
    // The reverse pass writes reversed frame k to original index
    // prefix_len-1-k, so `full` is already in original frame order.
    let mut full = TrackerOutput::zeros(prefix_len, video.orig_h, video.orig_w);
    track_forward_into(model, &rev_video, 0, prefix_len, opts, &mut full, true)?;
    // Drop the duplicate query frame (original index query_index).
    let mut out = TrackerOutput::zeros(query_index, video.orig_h, video.orig_w);
    let n = query_index * video.orig_h * video.orig_w * 4;
    out.data.copy_from_slice(&full.data[..n]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_t40_s16() {
        let plan = plan_windows(40, 16, 0).unwrap();
        assert_eq!(plan.starts, vec![0, 8, 16, 24]);
        assert!(!plan.padded);
    }

    #[test]
    fn schedule_exact_fit() {
        let plan = plan_windows(16, 16, 0).unwrap();
        assert_eq!(plan.starts, vec![0]);
    }

    #[test]
    fn schedule_end_aligned() {
        let plan = plan_windows(20, 16, 0).unwrap();
        assert_eq!(plan.starts, vec![0, 4]);
    }

    #[test]
    fn schedule_short_video_pads() {
        let plan = plan_windows(5, 8, 0).unwrap();
        assert_eq!(plan.starts, vec![0]);
        assert!(plan.padded);
    }

    #[test]
    fn schedule_rejects_bad_query() {
        assert!(plan_windows(10, 8, 10).is_err());
        assert!(plan_windows(0, 8, 0).is_err());
        assert!(plan_windows(10, 7, 0).is_err());
    }

    #[test]
    fn schedule_covers_every_frame() {
        for t in 1..100 {
            for q in [0usize, 1, t / 2, t.saturating_sub(1)] {
                if q >= t {
                    continue;
                }
                let plan = plan_windows(t, 8, q).unwrap();
                let mut covered = vec![false; t];
                for &s in &plan.starts {
                    for k in 0..plan.window_len {
                        if s + k < t {
                            covered[s + k] = true;
                        }
                    }
                }
                assert!(
                    covered[q..].iter().all(|&c| c),
                    "t={t} q={q} starts {:?}",
                    plan.starts
                );
            }
        }
    }

    fn state(s: usize, flow: Vec<f32>) -> TrackState<f32> {
        TrackState {
            flow: Tensor::new(&[s, 2, 1, 1], flow),
            vis_logit: Tensor::zeros(&[s, 1, 1, 1]),
            conf_logit: Tensor::zeros(&[s, 1, 1, 1]),
            hidden: Tensor::zeros(&[s, 3, 1, 1]),
        }
    }

    #[test]
    fn carry_copies_overlap_and_replicates_tail() {
        // constant-velocity flow t·v with v=(1,2): carried tail stays flat
        let s = 4;
        let mut flow = Vec::new();
        for t in 0..s {
            flow.push(t as f32); // x
            flow.push(2.0 * t as f32); // y
        }
        let st = state(s, flow);
        let carried = carry_state(&st, 0, 2).unwrap();
        let f = carried.flow.to_vec();
        // slots 0,1 = prev slots 2,3; slots 2,3 replicate prev slot 3
        assert_eq!(f, vec![2.0, 4.0, 3.0, 6.0, 3.0, 6.0, 3.0, 6.0]);
    }

    #[test]
    fn carry_zero_stays_zero() {
        let st = state(4, vec![0.0; 8]);
        let carried = carry_state(&st, 8, 12).unwrap();
        assert!(carried.flow.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn carry_rejects_disjoint_windows() {
        let st = state(4, vec![0.0; 8]);
        assert!(carry_state(&st, 0, 5).is_err());
        assert!(carry_state(&st, 4, 4).is_err());
    }

    #[test]
    fn sample_tracks_zero_flow_is_constant() {
        let out = TrackerOutput::<f32>::zeros(3, 8, 8);
        let tracks = sample_tracks(&out, &[(2.5, 3.5)]).unwrap();
        assert_eq!(tracks[0].positions, vec![(2.5, 3.5); 3]);
    }

    #[test]
    fn sample_tracks_constant_flow_offsets() {
        let mut out = TrackerOutput::<f32>::zeros(1, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let base = ((y * 4) + x) * 4;
                out.data[base] = 1.25;
                out.data[base + 1] = -0.5;
            }
        }
        let tracks = sample_tracks(&out, &[(1.0, 2.0)]).unwrap();
        assert_eq!(tracks[0].positions[0], (2.25, 1.5));
    }

    #[test]
    fn sample_tracks_rejects_out_of_bounds() {
        let out = TrackerOutput::<f32>::zeros(1, 4, 4);
        assert!(sample_tracks(&out, &[(4.0, 0.0)]).is_err());
    }
}
