//! Path-comparison metrics for navigation episodes.
//!
//! All metrics compare a followed node path against a reference node path
//! in the same environment, working on node coordinates in meters. The
//! success radius (`d_th`) defaults to [`SUCCESS_RADIUS_M`].

use serde::{Deserialize, Serialize};

use crate::traj::path_length;
use crate::world::{Environment, Point};
use crate::{Error, Result};

/// Success radius in meters: an episode succeeds when it stops within
/// this distance of the reference goal.
pub const SUCCESS_RADIUS_M: f64 = 3.0;

/// The full score record of one navigation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavScores {
    /// Navigation error: final distance to the reference goal, meters.
    pub ne: f64,
    /// Success: stopped within `d_th` of the goal (0 or 1).
    pub sr: f64,
    /// Oracle success: any visited point within `d_th` of the goal.
    pub osr: f64,
    /// Success weighted by path length.
    pub spl: f64,
    /// Dynamic time warping distance between the paths, meters.
    pub dtw: f64,
    /// Normalized DTW in `(0, 1]`.
    pub ndtw: f64,
    /// Success-gated nDTW.
    pub sdtw: f64,
}

/// Dynamic time warping distance between two point sequences under
/// Euclidean ground cost: the minimum over monotone alignments (using
/// steps right, down, and diagonal) of summed pairwise distances, with
/// both full sequences aligned end to end.
pub fn dtw(query: &[Point], reference: &[Point]) -> Result<f64> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("dtw path"));
    }
    let n = query.len();
    let m = reference.len();
    // Rolling single row of the (n+1) x (m+1) DP table.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut row = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        row[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = query[i - 1].dist(&reference[j - 1]);
            let best = prev[j].min(row[j - 1]).min(prev[j - 1]);
            row[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut row);
    }
    Ok(prev[m])
}

/// nDTW: DTW squashed to `(0, 1]` against the reference scale.
pub fn ndtw_from_dtw(dtw_value: f64, reference_points: usize, d_th: f64) -> f64 {
    (-dtw_value / (reference_points as f64 * d_th)).exp()
}

/// Coordinates of a node path.
fn points(env: &Environment, path: &[u32]) -> Result<Vec<Point>> {
    path.iter().map(|&id| Ok(env.node(id)?.pos)).collect()
}

/// Score one episode: a followed node path against a reference node path.
///
/// `reference` is treated as ground truth; the optimal length for SPL is
/// recomputed as the shortest-path distance between its endpoints, so a
/// reference that is itself a shortest path yields the textbook formula.
pub fn score_episode(
    env: &Environment,
    followed: &[u32],
    reference: &[u32],
    d_th: f64,
) -> Result<NavScores> {
    if followed.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("episode path"));
    }
    if !(d_th > 0.0) {
        return Err(Error::MetricInput(format!("d_th = {d_th} must be positive")));
    }
    let followed_pts = points(env, followed)?;
    let reference_pts = points(env, reference)?;
    let goal = *reference_pts.last().expect("non-empty");

    let ne = followed_pts.last().expect("non-empty").dist(&goal);
    let sr = if ne <= d_th { 1.0 } else { 0.0 };
    let osr = if followed_pts.iter().any(|p| p.dist(&goal) <= d_th) {
        1.0
    } else {
        0.0
    };

    let optimal = env.shortest_path(reference[0], *reference.last().expect("non-empty"))?;
    let l = path_length(env, &optimal)?;
    let p = path_length(env, followed)?;
    let spl = if l == 0.0 { sr } else { sr * l / p.max(l) };

    let dtw_value = dtw(&followed_pts, &reference_pts)?;
    let ndtw = ndtw_from_dtw(dtw_value, reference_pts.len(), d_th);
    Ok(NavScores {
        ne,
        sr,
        osr,
        spl,
        dtw: dtw_value,
        ndtw,
        sdtw: sr * ndtw,
    })
}
