//! Weighted map voting across phases and binary localization cues.

use crate::error::{Error, Result};
use crate::network::HeatMapSet;
use crate::suppression::{check_fraction, relative_threshold};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FusedHeatMapSet {
    /// (class_count, h, w)
    pub maps: Tensor,
    /// Phase of the winning set per class and pixel; ties go to the earliest set.
    pub provenance: Vec<usize>,
}

impl FusedHeatMapSet {
    pub fn class_map(&self, class: usize) -> Tensor {
        self.maps.slice_outer(class)
    }
}

/// Per class and pixel, the maximum over sets of `p^c · H^c(u)`.
pub fn weighted_map_voting(sets: &[HeatMapSet]) -> Result<FusedHeatMapSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("weighted_map_voting", "no heat-map sets to fuse"))?;
    let (classes, _, _) = match first.maps.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::invalid("weighted_map_voting", format!("maps must be rank 3, got {other:?}"))),
    };
    for s in sets {
        if s.maps.shape() != first.maps.shape() {
            return Err(Error::shape("weighted_map_voting", first.maps.shape(), s.maps.shape()));
        }
        if s.probs.len() != classes {
            return Err(Error::shape("weighted_map_voting probs", &[classes], &[s.probs.len()]));
        }
    }
    let area = first.maps.len() / classes;
    let mut maps = Tensor::filled(first.maps.shape(), f32::NEG_INFINITY);
    let mut provenance = vec![first.phase; first.maps.len()];
    for s in sets {
        for c in 0..classes {
            let p = s.probs[c];
            let src = s.maps.outer(c);
            let dst = &mut maps.data_mut()[c * area..(c + 1) * area];
            let prov = &mut provenance[c * area..(c + 1) * area];
            for ((d, pr), &h) in dst.iter_mut().zip(prov).zip(src) {
                let v = p * h;
                if v > *d {
                    *d = v;
                    *pr = s.phase;
                }
            }
        }
    }
    Ok(FusedHeatMapSet { maps, provenance })
}

/// One where `H > fraction · max(H)`; empty when `max(H) ≤ 0`.
pub fn extract_cues(heatmap: &Tensor, fraction: f64) -> Result<Tensor> {
    check_fraction("extract_cues", fraction)?;
    heatmap.dims2("extract_cues")?;
    let Some(threshold) = relative_threshold(heatmap, fraction) else {
        return Ok(Tensor::zeros(heatmap.shape()));
    };
    Ok(heatmap.map(|v| if v as f64 > threshold { 1.0 } else { 0.0 }))
}

pub const DEFAULT_CUE_FRACTION: f64 = 0.2;
