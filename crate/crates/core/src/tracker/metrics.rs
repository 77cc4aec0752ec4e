//! Sequence evaluation: center-error precision and overlap success curves.

use crate::error::{Error, Result};

use super::{iou, BBox};

/// Distance thresholds of the precision curve, in pixels.
pub const PRECISION_THRESHOLDS: std::ops::RangeInclusive<usize> = 0..=50;

/// Headline threshold of the precision metric.
pub const PRECISION_AT: usize = 20;

/// Fraction of frames whose predicted center lies within each threshold of
/// the ground truth. Returns the value at 20 pixels plus the whole curve
/// (thresholds 0..=50).
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<(f32, Vec<f32>)> {
    check_sequences(pred, gt)?;
    let dists: Vec<f32> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.center_distance(g))
        .collect();
    let curve: Vec<f32> = PRECISION_THRESHOLDS
        .map(|theta| {
            dists.iter().filter(|&&d| d <= theta as f32).count() as f32 / dists.len() as f32
        })
        .collect();
    Ok((curve[PRECISION_AT], curve))
}

/// Success AUC: the fraction of frames with IoU strictly above each
/// threshold in `0.00..=1.00` step `0.05`, averaged over the 21 thresholds.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f32> {
    check_sequences(pred, gt)?;
    let overlaps: Vec<f32> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let mut acc = 0.0f32;
    for i in 0..=20 {
        let theta = i as f32 * 0.05;
        acc += overlaps.iter().filter(|&&o| o > theta).count() as f32 / overlaps.len() as f32;
    }
    Ok(acc / 21.0)
}

fn check_sequences(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySequence("tracking metrics"));
    }
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "sequences differ in length: {} predictions vs {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}
