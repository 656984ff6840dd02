//! Binary suppression masks built from a frozen model's heat maps.
//!
//! A pixel is suppressed (0) when its heat-map response is strictly above
//! `fraction · max`; masks from several present classes (or several earlier
//! phases) are combined by elementwise product.

use crate::error::{Error, Result};
use crate::network::FcnModel;
use crate::ops::bilinear_resize;
use crate::tensor::Tensor;

/// Binary (h, w) grid: 0 = suppressed, 1 = pass-through.
#[derive(Clone, Debug, PartialEq)]
pub struct SuppressionMask {
    pub grid: Tensor,
    pub source_phase: usize,
    pub threshold_fraction: f64,
}

impl SuppressionMask {
    pub fn pass_through(size: usize, source_phase: usize, threshold_fraction: f64) -> Self {
        SuppressionMask {
            grid: Tensor::ones(&[size, size]),
            source_phase,
            threshold_fraction,
        }
    }

    /// Fraction of grid cells that are suppressed.
    pub fn suppressed_fraction(&self) -> f64 {
        let zeros = self.grid.data().iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.grid.len() as f64
    }
}

pub(crate) fn check_fraction(op: &'static str, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(op, format!("fraction must lie in (0, 1), got {fraction}")));
    }
    Ok(())
}

/// Threshold `fraction · max(H)` or `None` when the map has no positive maximum.
pub(crate) fn relative_threshold(heatmap: &Tensor, fraction: f64) -> Option<f64> {
    let max = heatmap.max() as f64;
    (max > 0.0).then_some(fraction * max)
}

/// Zero where `H > fraction · max(H)`, one elsewhere; all ones when `max(H) ≤ 0`.
pub fn binarize_heatmap(heatmap: &Tensor, fraction: f64) -> Result<Tensor> {
    check_fraction("binarize_heatmap", fraction)?;
    heatmap.dims2("binarize_heatmap")?;
    let Some(threshold) = relative_threshold(heatmap, fraction) else {
        return Ok(Tensor::ones(heatmap.shape()));
    };
    Ok(heatmap.map(|v| if v as f64 > threshold { 0.0 } else { 1.0 }))
}

/// Logical AND of binary grids; an empty list yields all ones of `shape`.
pub fn combine_masks(grids: &[Tensor], shape: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::ones(shape);
    for g in grids {
        if g.shape() != shape {
            return Err(Error::shape("combine_masks", shape, g.shape()));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(g.data()) {
            *o *= v;
        }
    }
    Ok(out)
}

fn present_classes(labels: &[f32]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != 0.0)
        .map(|(c, _)| c)
        .collect()
}

fn class_grid(model: &FcnModel, image: &Tensor, labels: &[f32], fraction: f64) -> Result<Tensor> {
    check_fraction("build_suppression_mask", fraction)?;
    if labels.len() != model.config.class_count {
        return Err(Error::shape(
            "build_suppression_mask labels",
            &[model.config.class_count],
            &[labels.len()],
        ));
    }
    let present = present_classes(labels);
    if present.is_empty() {
        return Err(Error::invalid(
            "build_suppression_mask",
            "image has no positive label to suppress",
        ));
    }
    let size = model.config.feedback_size();
    let heat = model.compute_heatmaps(image, 0)?;
    let grids = present
        .into_iter()
        .map(|c| {
            let mut map = heat.class_map(c);
            if map.shape() != [size, size] {
                map = bilinear_resize(&map, size, size)?;
            }
            binarize_heatmap(&map, fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_masks(&grids, &[size, size])
}

/// Mask for one training image from a frozen model: every present class's
/// heat map is binarized at `fraction`, and the results are ANDed.
pub fn build_suppression_mask(
    frozen: &FcnModel,
    image: &Tensor,
    labels: &[f32],
    fraction: f64,
    source_phase: usize,
) -> Result<SuppressionMask> {
    Ok(SuppressionMask {
        grid: class_grid(frozen, image, labels, fraction)?,
        source_phase,
        threshold_fraction: fraction,
    })
}

/// AND of the masks of several frozen phases, each at its own fraction.
///
/// `stages[j]` is the phase-`j+1` model and the fraction applied to its maps.
pub fn build_cumulative_mask(
    stages: &[(&FcnModel, f64)],
    image: &Tensor,
    labels: &[f32],
) -> Result<SuppressionMask> {
    let (last_model, last_fraction) = stages
        .last()
        .ok_or_else(|| Error::invalid("build_cumulative_mask", "no frozen phases given"))?;
    let size = last_model.config.feedback_size();
    let grids = stages
        .iter()
        .map(|(model, fraction)| {
            if model.config.feedback_size() != size {
                return Err(Error::invalid(
                    "build_cumulative_mask",
                    "frozen phases disagree on the feedback resolution",
                ));
            }
            class_grid(model, image, labels, *fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuppressionMask {
        grid: combine_masks(&grids, &[size, size])?,
        source_phase: stages.len(),
        threshold_fraction: *last_fraction,
    })
}
