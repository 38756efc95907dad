//! Division of a needle path into per-breath-hold segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{path_length, Arc};

pub const DEFAULT_SEGMENT_LEN: f64 = 10.0;

/// Remainders shorter than this are folded into the previous segment.
const MERGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    pub index: usize,
    /// Arclength range along the full path.
    pub s_start: f64,
    pub s_end: f64,
    pub arcs: Vec<Arc>,
}

impl PathSegment {
    pub fn arclength(&self) -> f64 {
        self.s_end - self.s_start
    }
}

/// Partitions `path` by arclength into pieces of exactly `seg_len`, the last
/// piece taking the remainder.
pub fn segment_plan(path: &[Arc], seg_len: f64) -> Result<Vec<PathSegment>> {
    if !(seg_len > 0.0) {
        return Err(Error::Precondition(format!(
            "segment length must be > 0, got {seg_len}"
        )));
    }
    let total = path_length(path);
    if path.is_empty() || total <= 0.0 {
        return Ok(Vec::new());
    }
    let mut bounds = Vec::new();
    let mut i = 0usize;
    loop {
        let a = i as f64 * seg_len;
        let b = (i + 1) as f64 * seg_len;
        if b >= total - MERGE_EPS {
            bounds.push((a, total));
            break;
        }
        bounds.push((a, b));
        i += 1;
    }
    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(index, (a, b))| PathSegment {
            index,
            s_start: a,
            s_end: b,
            arcs: slice_path(path, a, b),
        })
        .collect())
}

/// Arcs covering `[a, b]` of the path, cut at the boundaries.
pub fn slice_path(path: &[Arc], a: f64, b: f64) -> Vec<Arc> {
    let mut out = Vec::new();
    let mut offset = 0.0;
    for arc in path {
        let lo = offset;
        let hi = offset + arc.arclength;
        offset = hi;
        let from = a.max(lo);
        let to = b.min(hi);
        if to - from <= 0.0 {
            continue;
        }
        let start = arc.pose_at(from - lo);
        out.push(Arc::new(start, arc.curvature, arc.roll, to - from));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    fn straight(len: f64) -> Vec<Arc> {
        vec![Arc::new(Pose::identity(), 0.0, 0.0, len)]
    }

    #[test]
    fn forty_three_mm() {
        let segs = segment_plan(&straight(43.0), 10.0).unwrap();
        let lens: Vec<f64> = segs.iter().map(PathSegment::arclength).collect();
        assert_eq!(lens, vec![10.0, 10.0, 10.0, 10.0, 3.0]);
    }

    #[test]
    fn exact_multiple() {
        assert_eq!(segment_plan(&straight(10.0), 10.0).unwrap().len(), 1);
        assert_eq!(segment_plan(&straight(38.0), 10.0).unwrap().len(), 4);
        assert_eq!(segment_plan(&straight(48.0), 10.0).unwrap().len(), 5);
    }

    #[test]
    fn slices_chain_back_together() {
        let path = vec![Arc::new(Pose::identity(), 0.02, 0.3, 7.0)];
        let path = {
            let mut p = path;
            let e = p[0].end();
            p.push(Arc::new(e, 0.01, -1.0, 15.0));
            p
        };
        let segs = segment_plan(&path, 10.0).unwrap();
        assert_eq!(segs.len(), 3);
        let end = segs.last().unwrap().arcs.last().unwrap().end();
        assert!(end.max_abs_diff(&path[1].end()) < 1e-12);
        for w in segs.windows(2) {
            let a = w[0].arcs.last().unwrap().end();
            assert!(a.max_abs_diff(&w[1].arcs[0].start) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_length() {
        assert!(segment_plan(&straight(5.0), 0.0).is_err());
    }
}
