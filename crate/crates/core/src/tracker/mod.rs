//! The tracking pipeline on top of the engine: head map decoding with
//! quality-reweighted scores, box geometry, the training losses with
//! analytic gradients, benchmark metrics, and the synthetic label
//! convention used by the harness.

use crate::engine::{track_forward, EngineConfig};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, CLS_SCORE_ID, QUALITY_ID, REG_OFFSETS_ID};
use crate::tensor::Tensor;

pub mod loss;
pub mod metrics;

pub use loss::{total_loss, LossGrads, LossWeights};
pub use metrics::{precision_curve, success_auc};

/// Axis-aligned box as center plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn x1(&self) -> f32 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f32 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f32 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f32 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn center_distance(&self, other: &BBox) -> f32 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// Areas are computed from the corner coordinates so identical boxes give
/// exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let area = |x: &BBox| (x.x2() - x.x1()) * (x.y2() - x.y1());
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Raw head outputs of one tracking step.
#[derive(Debug, Clone)]
pub struct HeadMaps {
    /// `(1, 1, s, s)` classification logits.
    pub cls: Tensor,
    /// `(1, 1, s, s)` quality logits.
    pub quality: Tensor,
    /// `(1, 4, s, s)` raw regression outputs; decoded distances are
    /// `total_stride * exp(raw)` per side (left, top, right, bottom).
    pub reg: Tensor,
}

impl HeadMaps {
    pub fn spatial(&self) -> usize {
        self.cls.height()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Image coordinate of score-map cell 0 so the map sits centered on the
/// search image.
pub fn map_offset(search_size: usize, map_size: usize, total_stride: usize) -> f32 {
    (search_size as f32 - 1.0 - (map_size as f32 - 1.0) * total_stride as f32) / 2.0
}

/// Pick the argmax of `sigmoid(cls) * sigmoid(quality)` and decode the box
/// at that cell. The raw regression value is capped before the exponential
/// so decoded extents stay finite. Returns the box, the winning cell, and
/// its reweighted score.
pub fn decode_head_maps(
    maps: &HeadMaps,
    search_size: usize,
    total_stride: usize,
) -> Result<(BBox, (usize, usize), f32)> {
    let s = maps.spatial();
    if maps.quality.height() != s || maps.reg.height() != s || maps.reg.channels() != 4 {
        return Err(Error::ShapeMismatch {
            context: "decode_head_maps".into(),
            expected: format!("1x1x{s}x{s} cls/quality and 1x4x{s}x{s} reg"),
            actual: format!(
                "quality {:?}, reg {:?}",
                maps.quality.shape(),
                maps.reg.shape()
            ),
        });
    }
    let mut best = (0usize, 0usize, f32::NEG_INFINITY);
    for i in 0..s {
        for j in 0..s {
            let score = sigmoid(maps.cls.get(0, 0, i, j)) * sigmoid(maps.quality.get(0, 0, i, j));
            if score > best.2 {
                best = (i, j, score);
            }
        }
    }
    let (i, j, score) = best;
    let offset = map_offset(search_size, s, total_stride);
    let x = offset + j as f32 * total_stride as f32;
    let y = offset + i as f32 * total_stride as f32;
    let dist = |c: usize| total_stride as f32 * maps.reg.get(0, c, i, j).min(20.0).exp();
    let (l, t, r, b) = (dist(0), dist(1), dist(2), dist(3));
    let bbox = BBox {
        cx: x + (r - l) / 2.0,
        cy: y + (b - t) / 2.0,
        w: l + r,
        h: t + b,
    };
    Ok((bbox, (i, j), score))
}

/// Run both branches through the model, couple them (depthwise by default),
/// and decode the best-scoring box.
pub fn track_step(
    model: &ModelGraph,
    template: &Tensor,
    search: &Tensor,
) -> Result<(BBox, HeadMaps)> {
    track_step_with(model, template, search, EngineConfig::default())
}

pub fn track_step_with(
    model: &ModelGraph,
    template: &Tensor,
    search: &Tensor,
    cfg: EngineConfig,
) -> Result<(BBox, HeadMaps)> {
    let fwd = track_forward(model, template, search, &Default::default(), cfg)?;
    let take = |id: &str| {
        fwd.outputs
            .get(id)
            .cloned()
            .ok_or_else(|| Error::InvalidModel(format!("model produced no `{id}` output")))
    };
    let maps = HeadMaps {
        cls: take(CLS_SCORE_ID)?,
        quality: take(QUALITY_ID)?,
        reg: take(REG_OFFSETS_ID)?,
    };
    let (bbox, _, _) = decode_head_maps(&maps, model.meta.search_size, model.meta.total_stride)?;
    Ok((bbox, maps))
}

/// Target maps for the loss: `p* in {0,1}`, center-ness `q*` and per-side
/// distances `t*` defined on positive cells.
#[derive(Debug, Clone)]
pub struct LabelMaps {
    /// `(1, 1, s, s)` of 0/1.
    pub p_star: Tensor,
    /// `(1, 1, s, s)`; meaningful only where `p_star > 0`.
    pub q_star: Tensor,
    /// `(1, 4, s, s)` target distances; meaningful only where `p_star > 0`.
    pub t_star: Tensor,
}

impl LabelMaps {
    pub fn n_pos(&self) -> usize {
        self.p_star.data().iter().filter(|&&v| v > 0.0).count()
    }
}

/// Synthetic label assignment: a cell is positive when its image point falls
/// inside the ground-truth box shrunk by half around its center; `q*` is the
/// center-ness (geometric mean of the per-axis side ratios) and `t*` the
/// distances to the full box edges.
pub fn make_labels(
    gt: &BBox,
    map_size: usize,
    search_size: usize,
    total_stride: usize,
) -> LabelMaps {
    let s = map_size;
    let offset = map_offset(search_size, s, total_stride);
    let mut p_star = Tensor::zeros([1, 1, s, s]);
    let mut q_star = Tensor::zeros([1, 1, s, s]);
    let mut t_star = Tensor::zeros([1, 4, s, s]);
    for i in 0..s {
        for j in 0..s {
            let x = offset + j as f32 * total_stride as f32;
            let y = offset + i as f32 * total_stride as f32;
            let inside_core = (x - gt.cx).abs() <= gt.w / 4.0 && (y - gt.cy).abs() <= gt.h / 4.0;
            if !inside_core {
                continue;
            }
            let (l, t, r, b) = (x - gt.x1(), y - gt.y1(), gt.x2() - x, gt.y2() - y);
            if l <= 0.0 || t <= 0.0 || r <= 0.0 || b <= 0.0 {
                continue;
            }
            p_star.set(0, 0, i, j, 1.0);
            let centerness = ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt();
            q_star.set(0, 0, i, j, centerness);
            for (c, v) in [l, t, r, b].into_iter().enumerate() {
                t_star.set(0, c, i, j, v);
            }
        }
    }
    LabelMaps {
        p_star,
        q_star,
        t_star,
    }
}
