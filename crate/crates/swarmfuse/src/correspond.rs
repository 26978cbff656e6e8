//! Dense pairwise feature matching between two agents.
//!
//! For every feature cell of agent A the module scores every cell of agent
//! B by L2 distance, appends a no-match score (the distance of A's cell to
//! the zero feature), flattens the result into per-cell fibers, and
//! normalizes each fiber with a softmax over the negated scores. Low
//! distance then means high probability, and the final channel is the
//! probability that no cell of B corresponds at all.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// How far a `SimilarityVolume` has been processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// Nonnegative raw L2 distances.
    RawDistance,
    /// Per-fiber softmax of the negated distances.
    Normalized,
    /// Output of the smoothing network.
    Smoothed,
}

/// Per-cell match distribution between an (A, B) agent pair.
///
/// `var` holds fibers `[h_a * w_a, h_b * w_b + 1]`; channel `c` of a fiber
/// scores B's cell `(c / w_b, c % w_b)` and the final channel is no-match.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityVolume {
    pub var: Var,
    pub kind: VolumeKind,
    pub h_a: usize,
    pub w_a: usize,
    pub h_b: usize,
    pub w_b: usize,
    /// (primary agent id, auxiliary agent id).
    pub pair: (usize, usize),
}

impl SimilarityVolume {
    pub fn cells_a(&self) -> usize {
        self.h_a * self.w_a
    }

    pub fn channels(&self) -> usize {
        self.h_b * self.w_b + 1
    }

    /// Channel index meaning "no matching cell in B".
    pub fn no_match_channel(&self) -> usize {
        self.h_b * self.w_b
    }
}

/// 4-D pairwise distances `[h_a, w_a, h_b, w_b]` between two `[k, h, w]`
/// feature grids; differentiable w.r.t. both.
pub fn distance_volume(g: &mut Graph, f_a: Var, f_b: Var) -> Result<Var> {
    g.distance_volume(f_a, f_b)
}

/// Per-cell distance to the zero feature, `[h_a, w_a]`.
pub fn no_match_scores(g: &mut Graph, f_a: Var) -> Result<Var> {
    g.feature_norms(f_a)
}

/// Flatten distances and the no-match column into fibers and softmax the
/// negated scores (temperature `tau`).
pub fn assemble_and_normalize(
    g: &mut Graph,
    distances: Var,
    no_match: Var,
    tau: f32,
    pair: (usize, usize),
) -> Result<SimilarityVolume> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
    }
    let ds = g.value(distances).shape().to_vec();
    let ns = g.value(no_match).shape().to_vec();
    if ds.len() != 4 || ns.len() != 2 || ds[0] != ns[0] || ds[1] != ns[1] {
        return Err(Error::shapes("assemble_and_normalize", &ds, &ns));
    }
    let (h_a, w_a, h_b, w_b) = (ds[0], ds[1], ds[2], ds[3]);
    let cells_a = h_a * w_a;
    let flat = g.reshape(distances, &[cells_a, h_b * w_b])?;
    let nm = g.reshape(no_match, &[cells_a, 1])?;
    let stacked = g.concat(&[flat, nm], 1)?;
    let negated = g.scale(stacked, -1.0 / tau);
    let probs = g.softmax(negated, 1)?;
    Ok(SimilarityVolume { var: probs, kind: VolumeKind::Normalized, h_a, w_a, h_b, w_b, pair })
}

/// Distance volume, no-match scores and normalization in one call.
pub fn build_normalized_volume(
    g: &mut Graph,
    f_a: Var,
    f_b: Var,
    tau: f32,
    pair: (usize, usize),
) -> Result<SimilarityVolume> {
    let d = distance_volume(g, f_a, f_b)?;
    let nm = no_match_scores(g, f_a)?;
    assemble_and_normalize(g, d, nm, tau, pair)
}
