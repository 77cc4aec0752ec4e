//! Synthetic desk-scale tracking sequence: a textured square translating
//! over a noise background, with ground-truth boxes, plus the per-frame
//! tracking driver used by `smoke` and `sweep`.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prunekit_core::engine::EngineConfig;
use prunekit_core::model::{ModelGraph, ModelMeta};
use prunekit_core::tensor::Tensor;
use prunekit_core::tracker::{decode_head_maps, track_step_with, BBox};

pub struct SyntheticSequence {
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
    /// Crop of the first frame centered on the target.
    pub template: Tensor,
}

fn target_texture(c: usize, u: usize, v: usize) -> f32 {
    let s = (0.7 * u as f32 + 1.3 * c as f32).sin() * (0.9 * v as f32 - 0.5 * c as f32).cos();
    0.5 + 0.5 * s
}

/// Deterministic sequence of `n_frames` search-size frames. The target is a
/// textured square of side about a sixth of the frame, translating linearly
/// between fixed fractions of the frame.
pub fn synthetic_sequence(meta: &ModelMeta, n_frames: usize, seed: u64) -> SyntheticSequence {
    let size = meta.search_size;
    let side = (size / 6).max(6);
    let mut frames = Vec::with_capacity(n_frames);
    let mut gt = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let t = if n_frames > 1 {
            f as f32 / (n_frames - 1) as f32
        } else {
            0.0
        };
        let cx = (0.32 + 0.36 * t) * size as f32;
        let cy = (0.36 + 0.28 * t) * size as f32;
        let x0 = (cx - side as f32 / 2.0).round().max(0.0) as usize;
        let y0 = (cy - side as f32 / 2.0).round().max(0.0) as usize;
        let x0 = x0.min(size - side);
        let y0 = y0.min(size - side);

        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (f as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
        let mut frame = Tensor::from_fn([1, 3, size, size], |_, _, _, _| rng.gen_range(0.0..1.0));
        for c in 0..3 {
            for v in 0..side {
                for u in 0..side {
                    frame.set(0, c, y0 + v, x0 + u, target_texture(c, u, v));
                }
            }
        }
        frames.push(frame);
        gt.push(BBox::new(
            x0 as f32 + side as f32 / 2.0,
            y0 as f32 + side as f32 / 2.0,
            side as f32,
            side as f32,
        ));
    }

    // template: first-frame crop around the target
    let tpl = meta.template_size;
    let gt0 = gt[0];
    let tx = (gt0.cx - tpl as f32 / 2.0)
        .round()
        .clamp(0.0, (size - tpl) as f32) as usize;
    let ty = (gt0.cy - tpl as f32 / 2.0)
        .round()
        .clamp(0.0, (size - tpl) as f32) as usize;
    let template = Tensor::from_fn([1, 3, tpl, tpl], |_, c, y, x| {
        frames[0].get(0, c, ty + y, tx + x)
    });

    SyntheticSequence {
        frames,
        gt,
        template,
    }
}

/// Reweighted score map of one frame plus its peak score.
pub struct FrameScores {
    pub map: Vec<f64>,
    pub score: f32,
}

fn clamp_box(b: BBox, size: f32) -> BBox {
    let x1 = b.x1().clamp(0.0, size - 1.0);
    let y1 = b.y1().clamp(0.0, size - 1.0);
    let x2 = b.x2().clamp(x1 + 1.0, size);
    let y2 = b.y2().clamp(y1 + 1.0, size);
    BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Track every frame with the first-frame template. Decoded boxes are
/// clamped to the image bounds.
pub fn track_sequence(
    model: &ModelGraph,
    seq: &SyntheticSequence,
    cfg: EngineConfig,
) -> Result<(Vec<BBox>, Vec<FrameScores>)> {
    let mut boxes = Vec::with_capacity(seq.frames.len());
    let mut scores = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let (_, maps) = track_step_with(model, &seq.template, frame, cfg)?;
        let (bbox, _, peak) =
            decode_head_maps(&maps, model.meta.search_size, model.meta.total_stride)?;
        boxes.push(clamp_box(bbox, model.meta.search_size as f32));
        let map: Vec<f64> = maps
            .cls
            .data()
            .iter()
            .zip(maps.quality.data())
            .map(|(&c, &q)| (sigmoid(c) * sigmoid(q)) as f64)
            .collect();
        scores.push(FrameScores { map, score: peak });
    }
    Ok((boxes, scores))
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
