//! Cross-agent feature sampling and hard-selection fusion.
//!
//! A smoothed similarity volume is reduced to a per-cell correspondence map
//! by channel argmax, the auxiliary agent's features are warped into the
//! primary grid along that map, and each cell then keeps either its own
//! feature or the strongest incoming one, decided by match probabilities.
//! Selection is routing, not blending: the winning feature is forwarded
//! bit for bit and gradients flow only through the chosen branch.

use crate::correspond::{build_normalized_volume, SimilarityVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::smooth::{one_hot_collapse, smooth_volume};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// Where a cell's match in agent B lands, if anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellMatch {
    /// Row and column of the matched cell in B's grid.
    Cell(usize, usize),
    NoMatch,
}

/// Per-cell argmax decisions over one smoothed (or bypassed) volume.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub entries: Vec<CellMatch>,
    /// Probability of the best *match* channel per cell (excluding
    /// no-match), even when no-match wins the argmax.
    pub best_prob: Vec<f32>,
    /// Probability of the no-match channel per cell.
    pub no_match_prob: Vec<f32>,
    pub h_a: usize,
    pub w_a: usize,
    pub h_b: usize,
    pub w_b: usize,
    pub pair: (usize, usize),
}

impl CorrespondenceMap {
    pub fn cells(&self) -> usize {
        self.h_a * self.w_a
    }

    /// Channel labels in `[0, h_b*w_b]` per cell, the last value meaning
    /// no-match; directly comparable against ground-truth labels.
    pub fn channel_labels(&self) -> Vec<u16> {
        let no_match = (self.h_b * self.w_b) as u16;
        self.entries
            .iter()
            .map(|m| match m {
                CellMatch::Cell(r, c) => (r * self.w_b + c) as u16,
                CellMatch::NoMatch => no_match,
            })
            .collect()
    }
}

/// Argmax a volume's fibers into a correspondence map (ties to the lowest
/// channel). Channel `c` decodes to cell `(c / w_b, c % w_b)`.
pub fn to_correspondence_map(g: &Graph, vol: &SimilarityVolume) -> Result<CorrespondenceMap> {
    if vol.kind == VolumeKind::RawDistance {
        return Err(Error::Config("correspondence map needs a normalized or smoothed volume".into()));
    }
    let channels = vol.channels();
    let nb = vol.no_match_channel();
    let data = g.value(vol.var).data();
    let cells = vol.cells_a();
    let mut entries = Vec::with_capacity(cells);
    let mut best_prob = Vec::with_capacity(cells);
    let mut no_match_prob = Vec::with_capacity(cells);
    for cell in 0..cells {
        let fiber = &data[cell * channels..(cell + 1) * channels];
        let mut best_c = 0usize;
        let mut best_p = f32::NEG_INFINITY;
        for (c, &p) in fiber[..nb].iter().enumerate() {
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        let nm = fiber[nb];
        entries.push(if nm > best_p {
            CellMatch::NoMatch
        } else {
            CellMatch::Cell(best_c / vol.w_b, best_c % vol.w_b)
        });
        best_prob.push(best_p);
        no_match_prob.push(nm);
    }
    Ok(CorrespondenceMap {
        entries,
        best_prob,
        no_match_prob,
        h_a: vol.h_a,
        w_a: vol.w_a,
        h_b: vol.h_b,
        w_b: vol.w_b,
        pair: vol.pair,
    })
}

/// Sample agent B's features into A's grid along a correspondence map.
///
/// Matched cells copy B's feature vector (differentiably, so training
/// gradients reach B's encoder through the gather); no-match cells are
/// zero-filled and flagged invalid in the returned mask.
pub fn warp_features(g: &mut Graph, map: &CorrespondenceMap, f_b: Var) -> Result<(Var, Vec<u8>)> {
    let fs = g.value(f_b).shape().to_vec();
    if fs.len() != 3 || fs[1] != map.h_b || fs[2] != map.w_b {
        return Err(Error::shapes("warp_features grid", &fs, &[fs[0], map.h_b, map.w_b]));
    }
    let k = fs[0];
    let nb = map.h_b * map.w_b;
    let cells = map.cells();
    let mut indices = Vec::with_capacity(cells);
    let mut validity = Vec::with_capacity(cells);
    for m in &map.entries {
        match m {
            CellMatch::Cell(r, c) => {
                indices.push(r * map.w_b + c);
                validity.push(1u8);
            }
            CellMatch::NoMatch => {
                indices.push(0);
                validity.push(0u8);
            }
        }
    }
    let rows = g.reshape(f_b, &[k, nb])?;
    let cellwise = g.permute(rows, &[1, 0])?;
    let gathered = g.index_select(cellwise, 0, &indices)?;
    let back = g.permute(gathered, &[1, 0])?;
    let grid = g.reshape(back, &[k, map.h_a, map.w_a])?;
    let mut mask_data = vec![0.0f32; k * cells];
    for kk in 0..k {
        for (cell, &v) in validity.iter().enumerate() {
            mask_data[kk * cells + cell] = v as f32;
        }
    }
    let mask = g.constant(Tensor::from_vec(&[k, map.h_a, map.w_a], mask_data)?);
    let warped = g.mul(grid, mask)?;
    Ok((warped, validity))
}

/// Who supplied the feature a cell forwards to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceLabel {
    Own,
    Agent(usize),
}

/// Result of per-cell hard selection.
pub struct FusedFeatures {
    pub features: Var,
    pub sources: Vec<SourceLabel>,
}

/// Per-cell winner-take-all among the agent's own features and all warped
/// candidates.
///
/// The own feature's score at a cell is the strongest no-match vote across
/// candidates; each candidate scores its best-match probability, with
/// no-match cells excluded. Ties keep the own feature first, then the
/// lowest agent id (candidates are scanned in the given order).
pub fn hard_select(
    g: &mut Graph,
    own: Var,
    candidates: &[(Var, &CorrespondenceMap, usize)],
) -> Result<FusedFeatures> {
    let shape = g.value(own).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("hard_select wants [k,h,w] features, got {shape:?}")));
    }
    let cells = shape[1] * shape[2];
    if candidates.is_empty() {
        return Ok(FusedFeatures { features: own, sources: vec![SourceLabel::Own; cells] });
    }
    for (cand, map, _) in candidates {
        if g.value(*cand).shape() != shape {
            return Err(Error::shapes("hard_select candidate", &shape, g.value(*cand).shape()));
        }
        if map.cells() != cells {
            return Err(Error::Dimension(format!(
                "hard_select map has {} cells for {cells}-cell grid",
                map.cells()
            )));
        }
    }

    let mut winners = vec![0u32; cells];
    let mut sources = vec![SourceLabel::Own; cells];
    for cell in 0..cells {
        let mut own_score = f32::NEG_INFINITY;
        for (_, map, _) in candidates {
            own_score = own_score.max(map.no_match_prob[cell]);
        }
        let mut best_score = own_score;
        for (branch, (_, map, agent)) in candidates.iter().enumerate() {
            if map.entries[cell] == CellMatch::NoMatch {
                continue;
            }
            if map.best_prob[cell] > best_score {
                best_score = map.best_prob[cell];
                winners[cell] = branch as u32 + 1;
                sources[cell] = SourceLabel::Agent(*agent);
            }
        }
    }

    let mut branches = vec![own];
    branches.extend(candidates.iter().map(|(v, _, _)| *v));
    let features = g.select_per_cell(&branches, &winners)?;
    Ok(FusedFeatures { features, sources })
}

// ── The full exchange stage ───────────────────────────────────────────────

/// How the similarity volume reaches the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingMode {
    /// Normalize, smooth, argmax.
    Learned,
    /// Skip the smoothing network; argmax the normalized volume directly.
    Bypass,
    /// Collapse the normalized volume to one-hot, then smooth.
    OneHotFirst,
}

#[derive(Debug, Clone, Copy)]
pub struct ExchangeOptions {
    pub tau: f32,
    pub mode: SmoothingMode,
}

/// Everything produced while matching one auxiliary agent.
pub struct PairArtifacts {
    pub aux_agent: usize,
    pub normalized: SimilarityVolume,
    /// Absent in bypass mode.
    pub smoothed: Option<SimilarityVolume>,
    pub map: CorrespondenceMap,
    pub warped: Var,
    pub validity: Vec<u8>,
}

/// Output of the exchange stage for one receiving agent.
pub struct FusedArtifacts {
    pub fused: Var,
    pub sources: Vec<SourceLabel>,
    pub pairs: Vec<PairArtifacts>,
}

/// Match, smooth, warp and fuse all incoming feature grids into the
/// receiver's grid. `own` and each auxiliary entry are `[k, h_s, w_s]`
/// feature grids; auxiliary entries carry the sender's agent id.
pub fn exchange_and_fuse(
    g: &mut Graph,
    params: &ParamSet,
    own_agent: usize,
    own: Var,
    aux: &[(usize, Var)],
    opts: ExchangeOptions,
) -> Result<FusedArtifacts> {
    let mut pairs = Vec::with_capacity(aux.len());
    for &(agent, f_aux) in aux {
        let normalized = build_normalized_volume(g, own, f_aux, opts.tau, (own_agent, agent))?;
        let (smoothed, decision) = match opts.mode {
            SmoothingMode::Learned => {
                let s = smooth_volume(g, params, &normalized)?;
                (Some(s), s)
            }
            SmoothingMode::Bypass => (None, normalized),
            SmoothingMode::OneHotFirst => {
                let collapsed = one_hot_collapse(g, &normalized)?;
                let s = smooth_volume(g, params, &collapsed)?;
                (Some(s), s)
            }
        };
        let map = to_correspondence_map(g, &decision)?;
        let (warped, validity) = warp_features(g, &map, f_aux)?;
        pairs.push(PairArtifacts { aux_agent: agent, normalized, smoothed, map, warped, validity });
    }
    let candidates: Vec<(Var, &CorrespondenceMap, usize)> =
        pairs.iter().map(|p| (p.warped, &p.map, p.aux_agent)).collect();
    let fused = hard_select(g, own, &candidates)?;
    Ok(FusedArtifacts { fused: fused.features, sources: fused.sources, pairs })
}
