//! Contextual windows over a session timeline.
//!
//! Segment `k` predicts the core frames `[k·s, min((k+1)·s, T))` from the
//! window `[k·s − l, k·s + s + l)`. Window frames outside `[0, T)` are filled
//! by repeating the first or last real frame. Cores tile `[0, T)` exactly, so
//! reassembly just concatenates each segment's core predictions.

use crate::data::{Role, SessionRecord};
use crate::error::{DatError, Result};
use crate::features::FeatureBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub index: usize,
    /// Window start in session coordinates; negative when padded on the left.
    pub window_start: isize,
    pub window_end: isize,
    pub core_start: usize,
    pub core_end: usize,
    pub left_pad: usize,
    pub right_pad: usize,
    pub core_len: usize,
    pub context_len: usize,
}

impl Segment {
    pub fn window_len(&self) -> usize {
        (self.window_end - self.window_start) as usize
    }

    /// Number of real frames in the core.
    pub fn core_valid(&self) -> usize {
        self.core_end - self.core_start
    }

    /// Offset of the first core frame inside the window.
    pub fn core_offset(&self) -> usize {
        self.context_len
    }

    /// Padded frames at the end of the core (window positions past `T`).
    pub fn core_pad(&self) -> usize {
        self.core_len - self.core_valid()
    }

    /// Session frame feeding each window position, with edge replication.
    pub fn frame_indices(&self, num_frames: usize) -> Vec<usize> {
        let last = num_frames as isize - 1;
        (self.window_start..self.window_end)
            .map(|f| f.clamp(0, last) as usize)
            .collect()
    }

    /// Per-window-position loss weight: 1 on real core frames, 0 on context
    /// and padding.
    pub fn core_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.window_len()];
        let o = self.core_offset();
        m[o..o + self.core_valid()].iter_mut().for_each(|v| *v = 1.0);
        m
    }
}

/// `ceil(T / s)` segments covering a session of `num_frames` frames.
pub fn make_segments(num_frames: usize, core_len: usize, context_len: usize) -> Result<Vec<Segment>> {
    if num_frames == 0 {
        return Err(DatError::InvalidArgument("cannot segment an empty session".into()));
    }
    if core_len == 0 {
        return Err(DatError::InvalidArgument("core length s must be >= 1".into()));
    }
    let (t, s, l) = (num_frames as isize, core_len as isize, context_len as isize);
    let count = num_frames.div_ceil(core_len);
    Ok((0..count)
        .map(|k| {
            let start = k as isize * s;
            let window_start = start - l;
            let window_end = start + s + l;
            Segment {
                index: k,
                window_start,
                window_end,
                core_start: start as usize,
                core_end: (start + s).min(t) as usize,
                left_pad: (-window_start).max(0) as usize,
                right_pad: (window_end - t).max(0) as usize,
                core_len,
                context_len,
            }
        })
        .collect())
}

/// Feature rows for `role` over the segment window.
pub fn extract_window(session: &SessionRecord, segment: &Segment, role: Role) -> Result<FeatureBundle> {
    let data = session.role(role)?;
    let t = session.num_frames();
    if segment.core_start >= t {
        return Err(DatError::InvalidArgument(format!(
            "segment {} starts at frame {} past session end {t}",
            segment.index, segment.core_start
        )));
    }
    Ok(data.features.gather_rows(&segment.frame_indices(t)))
}

/// Any per-frame series over the segment window, with edge replication.
pub fn extract_series(series: &[f64], segment: &Segment) -> Vec<f64> {
    segment
        .frame_indices(series.len())
        .into_iter()
        .map(|i| series[i])
        .collect()
}

/// Stitches per-window predictions back into a length-`num_frames` series
/// by reading each segment's core.
pub fn reassemble(predictions: &[Vec<f64>], segments: &[Segment], num_frames: usize) -> Result<Vec<f64>> {
    if predictions.len() != segments.len() {
        return Err(DatError::InvalidArgument(format!(
            "{} predictions for {} segments",
            predictions.len(),
            segments.len()
        )));
    }
    let mut out = Vec::with_capacity(num_frames);
    for (pred, seg) in predictions.iter().zip(segments) {
        if pred.len() != seg.window_len() {
            return Err(DatError::InvalidArgument(format!(
                "segment {} prediction has {} frames, window has {}",
                seg.index,
                pred.len(),
                seg.window_len()
            )));
        }
        if seg.core_start != out.len() {
            return Err(DatError::InvalidArgument(format!(
                "segment {} core starts at {} but {} frames are filled",
                seg.index,
                seg.core_start,
                out.len()
            )));
        }
        let o = seg.core_offset();
        out.extend_from_slice(&pred[o..o + seg.core_valid()]);
    }
    if out.len() != num_frames {
        return Err(DatError::InvalidArgument(format!(
            "segments cover {} frames, expected {num_frames}",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_six_frames() {
        let segs = make_segments(96, 32, 32).unwrap();
        assert_eq!(segs.len(), 3);
        let cores: Vec<_> = segs.iter().map(|s| (s.core_start, s.core_end)).collect();
        assert_eq!(cores, vec![(0, 32), (32, 64), (64, 96)]);
        let windows: Vec<_> = segs.iter().map(|s| (s.window_start, s.window_end)).collect();
        assert_eq!(windows, vec![(-32, 64), (0, 96), (32, 128)]);
        assert!(segs.iter().all(|s| s.window_len() == 96));
    }

    #[test]
    fn no_context() {
        let segs = make_segments(32, 32, 0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].window_start, segs[0].window_end), (0, 32));
        assert_eq!((segs[0].core_start, segs[0].core_end), (0, 32));
    }

    #[test]
    fn ragged_tail() {
        let segs = make_segments(40, 32, 32).unwrap();
        assert_eq!(segs.len(), 2);
        let s = segs[1];
        assert_eq!((s.core_start, s.core_end), (32, 40));
        assert_eq!(s.core_pad(), 24);
        let mask = s.core_mask();
        assert_eq!(mask.iter().sum::<f64>(), 8.0);
        assert_eq!(mask[32..40], [1.0; 8]);
        let preds: Vec<Vec<f64>> = segs.iter().map(|s| vec![0.5; s.window_len()]).collect();
        assert_eq!(reassemble(&preds, &segs, 40).unwrap().len(), 40);
    }

    #[test]
    fn single_short_segment_reads_central_slice() {
        let segs = make_segments(5, 8, 3).unwrap();
        let pred: Vec<f64> = (0..14).map(f64::from).collect();
        let out = reassemble(&[pred], &segs, 5).unwrap();
        assert_eq!(out, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn edge_replication() {
        let segs = make_segments(10, 4, 2).unwrap();
        let idx = segs[0].frame_indices(10);
        assert_eq!(idx, vec![0, 0, 0, 1, 2, 3, 4, 5]);
        let idx = segs[2].frame_indices(10);
        assert_eq!(idx, vec![6, 7, 8, 9, 9, 9, 9, 9]);
    }

    #[test]
    fn errors() {
        assert!(make_segments(0, 4, 1).is_err());
        assert!(make_segments(4, 0, 1).is_err());
        let segs = make_segments(10, 4, 1).unwrap();
        assert!(reassemble(&[vec![0.0; 6]], &segs, 10).is_err());
    }
}
