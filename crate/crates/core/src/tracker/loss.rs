//! The tracking loss: focal classification over every cell plus, on positive
//! cells only, binary cross-entropy on the quality logit and `-ln(IoU)` on
//! the decoded regression distances, averaged over max(N_pos, 1).
//!
//! Gradients with respect to the raw map values are analytic. The arithmetic
//! core runs on f64 slices (`total_loss_f64`) so finite-difference checks can
//! run at full precision; the tensor-facing wrapper converts f32 maps in and
//! out.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{HeadMaps, LabelMaps};

pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Gradients of the total loss with respect to the raw head maps.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub cls: Tensor,
    pub quality: Tensor,
    pub reg: Tensor,
}

/// Flat f64 view of one loss instance. `reg` and `t_star` are laid out as
/// four planes of `cells` values (left, top, right, bottom), matching the
/// tensor layout.
pub struct LossInputs<'a> {
    pub cls: &'a [f64],
    pub quality: &'a [f64],
    pub reg: &'a [f64],
    pub p_star: &'a [f64],
    pub q_star: &'a [f64],
    pub t_star: &'a [f64],
    pub stride: f64,
}

pub struct LossOutput {
    pub loss: f64,
    pub d_cls: Vec<f64>,
    pub d_quality: Vec<f64>,
    pub d_reg: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Clamped probability and the derivative factor dp/dx (zero when clamped).
fn clamped_sigmoid(x: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if p < PROB_CLAMP {
        (PROB_CLAMP, 0.0)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

/// Focal term and its derivative with respect to the logit.
fn focal(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (p, dp_dx) = clamped_sigmoid(x);
    if positive {
        let loss = -alpha * (1.0 - p).powf(gamma) * p.ln();
        let dl_dp =
            -alpha * (-gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() + (1.0 - p).powf(gamma) / p);
        (loss, dl_dp * dp_dx)
    } else {
        let loss = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
        let dl_dp = -(1.0 - alpha)
            * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p));
        (loss, dl_dp * dp_dx)
    }
}

/// Binary cross-entropy on a logit against a soft target.
fn bce(x: f64, target: f64) -> (f64, f64) {
    let (q, dq_dx) = clamped_sigmoid(x);
    let loss = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
    let dl_dq = -target / q + (1.0 - target) / (1.0 - q);
    (loss, dl_dq * dq_dx)
}

/// `-ln(IoU)` between the decoded distances `d = stride * exp(raw)` and the
/// target distances, plus gradients with respect to the four raw values.
fn iou_loss(raw: [f64; 4], target: [f64; 4], stride: f64) -> (f64, [f64; 4]) {
    let d: [f64; 4] = std::array::from_fn(|i| stride * raw[i].min(20.0).exp());
    let (l, t, r, b) = (d[0], d[1], d[2], d[3]);
    let (ls, ts, rs, bs) = (target[0], target[1], target[2], target[3]);
    let iw = l.min(ls) + r.min(rs);
    let ih = t.min(ts) + b.min(bs);
    let inter = iw * ih;
    let area = (l + r) * (t + b);
    let area_star = (ls + rs) * (ts + bs);
    let union = area + area_star - inter;
    let loss = union.ln() - inter.ln();
    // d(inter)/dv is the opposite extent when v is the binding side
    let di = [
        if l < ls { ih } else { 0.0 },
        if t < ts { iw } else { 0.0 },
        if r < rs { ih } else { 0.0 },
        if b < bs { iw } else { 0.0 },
    ];
    let da = [t + b, l + r, t + b, l + r];
    let mut grads = [0.0f64; 4];
    for i in 0..4 {
        let du = da[i] - di[i];
        let dl_dd = du / union - di[i] / inter;
        // chain through d = stride * exp(raw): d(d)/d(raw) = d, zero if capped
        let dd_draw = if raw[i] < 20.0 { d[i] } else { 0.0 };
        grads[i] = dl_dd * dd_draw;
    }
    (loss, grads)
}

/// Evaluate the loss and analytic gradients on flat f64 slices.
pub fn total_loss_f64(inputs: &LossInputs, w: &LossWeights) -> Result<LossOutput> {
    if w.lambda1 < 0.0 || w.lambda2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got lambda1={} lambda2={}",
            w.lambda1, w.lambda2
        )));
    }
    let cells = inputs.cls.len();
    if inputs.quality.len() != cells
        || inputs.p_star.len() != cells
        || inputs.q_star.len() != cells
        || inputs.reg.len() != 4 * cells
        || inputs.t_star.len() != 4 * cells
    {
        return Err(Error::ShapeMismatch {
            context: "total_loss".into(),
            expected: format!("{cells} cells with 4-plane regression"),
            actual: format!(
                "quality {}, reg {}, p* {}, q* {}, t* {}",
                inputs.quality.len(),
                inputs.reg.len(),
                inputs.p_star.len(),
                inputs.q_star.len(),
                inputs.t_star.len()
            ),
        });
    }
    for (name, vals) in [
        ("cls", inputs.cls),
        ("quality", inputs.quality),
        ("reg", inputs.reg),
        ("p_star", inputs.p_star),
        ("q_star", inputs.q_star),
        ("t_star", inputs.t_star),
    ] {
        if vals.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFiniteInput(format!("total_loss {name} map")));
        }
    }

    let n_pos = inputs.p_star.iter().filter(|&&p| p > 0.0).count();
    let denom = n_pos.max(1) as f64;

    let mut loss = 0.0;
    let mut d_cls = vec![0.0f64; cells];
    let mut d_quality = vec![0.0f64; cells];
    let mut d_reg = vec![0.0f64; 4 * cells];
    for z in 0..cells {
        let positive = inputs.p_star[z] > 0.0;
        let (lc, gc) = focal(inputs.cls[z], positive, w.focal_alpha, w.focal_gamma);
        loss += lc;
        d_cls[z] = gc / denom;
        if positive {
            let (lq, gq) = bce(inputs.quality[z], inputs.q_star[z]);
            loss += w.lambda1 * lq;
            d_quality[z] = w.lambda1 * gq / denom;

            let raw = std::array::from_fn(|c| inputs.reg[c * cells + z]);
            let target = std::array::from_fn(|c| inputs.t_star[c * cells + z]);
            let (lr, gr) = iou_loss(raw, target, inputs.stride);
            loss += w.lambda2 * lr;
            for c in 0..4 {
                d_reg[c * cells + z] = w.lambda2 * gr[c] / denom;
            }
        }
    }

    Ok(LossOutput {
        loss: loss / denom,
        d_cls,
        d_quality,
        d_reg,
    })
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn from_f64(shape: [usize; 4], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).expect("shape match")
}

/// Overall loss over the head maps plus analytic gradients with respect to
/// the raw map values. `stride` is the model's total stride (the regression
/// activation scale).
pub fn total_loss(
    maps: &HeadMaps,
    labels: &LabelMaps,
    w: &LossWeights,
    stride: usize,
) -> Result<(f64, LossGrads)> {
    if maps.cls.shape() != labels.p_star.shape() || maps.reg.shape() != labels.t_star.shape() {
        return Err(Error::ShapeMismatch {
            context: "total_loss maps vs labels".into(),
            expected: format!("{:?} / {:?}", maps.cls.shape(), maps.reg.shape()),
            actual: format!("{:?} / {:?}", labels.p_star.shape(), labels.t_star.shape()),
        });
    }
    let inputs = LossInputs {
        cls: &to_f64(&maps.cls),
        quality: &to_f64(&maps.quality),
        reg: &to_f64(&maps.reg),
        p_star: &to_f64(&labels.p_star),
        q_star: &to_f64(&labels.q_star),
        t_star: &to_f64(&labels.t_star),
        stride: stride as f64,
    };
    let out = total_loss_f64(&inputs, w)?;
    Ok((
        out.loss,
        LossGrads {
            cls: from_f64(maps.cls.shape(), &out.d_cls),
            quality: from_f64(maps.quality.shape(), &out.d_quality),
            reg: from_f64(maps.reg.shape(), &out.d_reg),
        },
    ))
}

#[cfg(test)]
pub(crate) mod testsupport {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Instance {
        pub cls: Vec<f64>,
        pub quality: Vec<f64>,
        pub reg: Vec<f64>,
        pub p_star: Vec<f64>,
        pub q_star: Vec<f64>,
        pub t_star: Vec<f64>,
        pub stride: f64,
    }

    impl Instance {
        pub fn inputs(&self) -> LossInputs<'_> {
            LossInputs {
                cls: &self.cls,
                quality: &self.quality,
                reg: &self.reg,
                p_star: &self.p_star,
                q_star: &self.q_star,
                t_star: &self.t_star,
                stride: self.stride,
            }
        }
    }

    /// Random instance with the requested number of positive cells.
    pub fn random_instance(seed: u64, cells: usize, n_pos: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p_star = vec![0.0; cells];
        let mut picks: Vec<usize> = (0..cells).collect();
        for k in 0..n_pos.min(cells) {
            let j = rng.gen_range(k..cells);
            picks.swap(k, j);
            p_star[picks[k]] = 1.0;
        }
        Instance {
            cls: (0..cells).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            quality: (0..cells).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            reg: (0..4 * cells).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            p_star,
            q_star: (0..cells).map(|_| rng.gen_range(0.0..1.0)).collect(),
            t_star: (0..4 * cells).map(|_| rng.gen_range(1.0..40.0)).collect(),
            stride: 8.0,
        }
    }

    /// Central finite differences of the f64 loss for every input entry;
    /// returns the worst relative error against the analytic gradient.
    pub fn gradient_check(instance: &Instance, w: &LossWeights) -> f64 {
        let analytic = total_loss_f64(&instance.inputs(), w).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let eval = |inst: &Instance| total_loss_f64(&inst.inputs(), w).unwrap().loss;
        let mut check = |field: fn(&mut Instance) -> &mut Vec<f64>, grads: &[f64]| {
            let mut inst = Instance {
                cls: instance.cls.clone(),
                quality: instance.quality.clone(),
                reg: instance.reg.clone(),
                p_star: instance.p_star.clone(),
                q_star: instance.q_star.clone(),
                t_star: instance.t_star.clone(),
                stride: instance.stride,
            };
            for i in 0..grads.len() {
                let orig = field(&mut inst)[i];
                field(&mut inst)[i] = orig + h;
                let up = eval(&inst);
                field(&mut inst)[i] = orig - h;
                let down = eval(&inst);
                field(&mut inst)[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = fd.abs().max(grads[i].abs());
                if denom > 1e-7 {
                    worst = worst.max((fd - grads[i]).abs() / denom);
                }
            }
        };
        check(|i| &mut i.cls, &analytic.d_cls);
        check(|i| &mut i.quality, &analytic.d_quality);
        check(|i| &mut i.reg, &analytic.d_reg);
        worst
    }
}
