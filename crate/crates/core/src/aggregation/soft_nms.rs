use std::fmt;
use std::str::FromStr;

use crate::bbox::iou;
use crate::error::{Error, Result};
use crate::types::Detection;

use super::ObjectGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftNmsMethod {
    /// Scores decay by `exp(-iou^2 / sigma)`.
    Gaussian,
    /// Scores decay by `1 - iou` once `iou > iou_cut`.
    Linear,
}

impl FromStr for SoftNmsMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SoftNmsMethod::Gaussian),
            "linear" => Ok(SoftNmsMethod::Linear),
            other => Err(Error::Config(format!("unknown Soft-NMS method `{other}`"))),
        }
    }
}

impl fmt::Display for SoftNmsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftNmsMethod::Gaussian => "gaussian",
            SoftNmsMethod::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftNmsConfig {
    pub method: SoftNmsMethod,
    pub sigma: f64,
    pub iou_cut: f64,
    pub score_prune: f64,
}

impl SoftNmsConfig {
    pub const DEFAULT_SIGMA: f64 = 0.5;
    pub const DEFAULT_IOU_CUT: f64 = 0.5;
    pub const DEFAULT_SCORE_PRUNE: f64 = 0.001;

    pub fn new(method: SoftNmsMethod, sigma: f64, iou_cut: f64, score_prune: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("Soft-NMS sigma {sigma} must be > 0")));
        }
        if !(0.0..=1.0).contains(&iou_cut) {
            return Err(Error::Config(format!("Soft-NMS iou cut {iou_cut} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&score_prune) {
            return Err(Error::Config(format!(
                "Soft-NMS prune threshold {score_prune} outside [0, 1]"
            )));
        }
        Ok(SoftNmsConfig {
            method,
            sigma,
            iou_cut,
            score_prune,
        })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(
            SoftNmsMethod::Gaussian,
            sigma,
            Self::DEFAULT_IOU_CUT,
            Self::DEFAULT_SCORE_PRUNE,
        )
    }

    fn decay(&self, overlap: f64) -> f64 {
        match self.method {
            SoftNmsMethod::Gaussian => (-(overlap * overlap) / self.sigma).exp(),
            SoftNmsMethod::Linear if overlap > self.iou_cut => 1.0 - overlap,
            SoftNmsMethod::Linear => 1.0,
        }
    }
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig {
            method: SoftNmsMethod::Gaussian,
            sigma: Self::DEFAULT_SIGMA,
            iou_cut: Self::DEFAULT_IOU_CUT,
            score_prune: Self::DEFAULT_SCORE_PRUNE,
        }
    }
}

/// Soft-NMS over one object group.
///
/// Repeatedly moves the best remaining detection to the output and decays the
/// scores of the rest by their overlap with it. Ties on the current score go
/// to the lexicographically smaller model id, then to the earlier member.
/// Detections whose decayed score drops below `score_prune` are discarded.
/// The output is in selection order, which is non-increasing in final score.
pub fn soft_nms(group: &ObjectGroup, cfg: &SoftNmsConfig) -> Vec<Detection> {
    soft_nms_detections(group.members(), cfg)
}

pub(crate) fn soft_nms_detections(members: &[Detection], cfg: &SoftNmsConfig) -> Vec<Detection> {
    // (insertion index, current score)
    let mut pending: Vec<(usize, f64)> = members
        .iter()
        .enumerate()
        .map(|(i, d)| (i, d.score))
        .collect();
    let mut out = Vec::with_capacity(members.len());

    while !pending.is_empty() {
        let best = (0..pending.len())
            .min_by(|&a, &b| {
                let (ia, sa) = pending[a];
                let (ib, sb) = pending[b];
                sb.total_cmp(&sa)
                    .then_with(|| members[ia].model.cmp(&members[ib].model))
                    .then_with(|| ia.cmp(&ib))
            })
            .expect("pending is nonempty");
        let (idx, score) = pending.swap_remove(best);
        // swap_remove perturbs order; restore insertion order for stable ties
        pending.sort_unstable_by_key(|&(i, _)| i);

        let chosen = &members[idx];
        for (i, s) in pending.iter_mut() {
            *s *= cfg.decay(iou(&chosen.bbox, &members[*i].bbox));
        }
        pending.retain(|&(_, s)| s >= cfg.score_prune);

        out.push(Detection {
            score,
            ..chosen.clone()
        });
    }
    out
}
