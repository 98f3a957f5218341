//! Grounding accuracy and the beam-search dense baseline.

use std::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{iou3d, Box3D, GeometryError, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no predictions to score")]
    Empty,
    #[error("{preds} predictions for {gts} ground-truth boxes")]
    Misaligned { preds: usize, gts: usize },
    #[error("sentence {0} has no candidates")]
    NoCandidates(usize),
    #[error("beam width must be positive")]
    ZeroBeam,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Fraction of pairs whose IoU is strictly greater than `m`.
pub fn acc_at_iou(preds: &[Box3D], gts: &[Box3D], m: f64) -> Result<f64, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::Misaligned { preds: preds.len(), gts: gts.len() });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut hits = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if iou3d(p, g)? > m {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Sum of the per-axis population variances of `centers`, i.e. the trace
/// of their covariance.
pub fn center_spread(centers: &[Vec3]) -> f64 {
    if centers.len() < 2 {
        return 0.0;
    }
    let n = centers.len() as f64;
    (0..3)
        .map(|d| {
            let mean = centers.iter().map(|c| c[d]).sum::<f64>() / n;
            centers.iter().map(|c| (c[d] - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

#[derive(Clone, Debug)]
struct Partial {
    picks: Vec<usize>,
    spread: f64,
    score: f64,
}

/// Lower spread first, then higher score sum, then the lexicographically
/// smaller index sequence.
fn rank(a: &Partial, b: &Partial) -> Ordering {
    a.spread
        .total_cmp(&b.spread)
        .then(b.score.total_cmp(&a.score))
        .then_with(|| a.picks.cmp(&b.picks))
}

/// Chooses one candidate per sentence so that the chosen centers are as
/// concentrated as possible. Partial assignments are extended sentence by
/// sentence and the best `beam` are kept after each extension.
pub fn beam_search(candidates: &[Vec<(Box3D, f64)>], beam: usize) -> Result<Vec<usize>, MetricError> {
    if beam == 0 {
        return Err(MetricError::ZeroBeam);
    }
    if candidates.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(k) = candidates.iter().position(Vec::is_empty) {
        return Err(MetricError::NoCandidates(k));
    }
    let mut frontier = vec![Partial { picks: vec![], spread: 0.0, score: 0.0 }];
    for cands in candidates {
        let mut next = Vec::with_capacity(frontier.len() * cands.len());
        for p in &frontier {
            for (j, (_, s)) in cands.iter().enumerate() {
                let mut picks = p.picks.clone();
                picks.push(j);
                let centers: Vec<Vec3> = picks
                    .iter()
                    .zip(candidates)
                    .map(|(&i, c)| c[i].0.center)
                    .collect();
                next.push(Partial { picks, spread: center_spread(&centers), score: p.score + s });
            }
        }
        next.sort_by(rank);
        next.truncate(beam);
        frontier = next;
    }
    Ok(frontier.swap_remove(0).picks)
}

/// Keeps the `width` highest-scoring candidates, best first; ties go to
/// the lower index.
pub fn top_candidates(cands: &[(Box3D, f64)], width: usize) -> Vec<(Box3D, f64)> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&a, &b| cands[b].1.total_cmp(&cands[a].1).then(a.cmp(&b)));
    idx.into_iter().take(width).map(|i| cands[i]).collect()
}
