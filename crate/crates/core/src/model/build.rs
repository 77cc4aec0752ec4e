//! Builders for the reference tracking architecture and a miniature variant
//! for fast tests.
//!
//! The reference plan (scale 1.0) is pinned in [`REFERENCE_PLAN`]: an
//! AlexNet-style five-conv backbone shared by both branches, one 3x3 neck
//! conv per task per branch (kept out of pruning), and two separate
//! three-conv 256-channel head towers followed by 3x3 output projections
//! (1-channel score, 1-channel quality, 4-channel offsets). This totals
//! 9,666,310 stored parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    BnWeights, Branch, ConvWeights, LayerKind, LayerSpec, ModelGraph, ModelMeta, Section,
    WeightStore,
};

/// Backbone conv output channels at scale 1.
pub const REFERENCE_PLAN: ReferencePlan = ReferencePlan {
    backbone: [96, 256, 384, 384, 256],
    backbone_kernels: [11, 5, 3, 3, 3],
    backbone_strides: [2, 1, 1, 1, 1],
    neck_channels: 256,
    tower_channels: 256,
    template_size: 127,
    search_size: 303,
    total_stride: 8,
};

#[derive(Debug, Clone, Copy)]
pub struct ReferencePlan {
    pub backbone: [usize; 5],
    pub backbone_kernels: [usize; 5],
    pub backbone_strides: [usize; 5],
    pub neck_channels: usize,
    pub tower_channels: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub total_stride: usize,
}

fn scaled(n: usize, scale: f64, what: &str) -> Result<usize> {
    let s = (n as f64 * scale + 0.5).floor() as usize;
    if s == 0 {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} shrinks {what} ({n} channels) to zero"
        )));
    }
    Ok(s)
}

struct Builder {
    layers: Vec<LayerSpec>,
    weights: WeightStore,
    rng: ChaCha8Rng,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        section: Section,
        branch: Option<Branch>,
        prunable: bool,
        input: Option<&str>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) {
        self.layers.push(LayerSpec {
            id: id.into(),
            kind: LayerKind::Conv {
                in_channels: in_c,
                out_channels: out_c,
                kernel: k,
                stride,
                padding,
            },
            section,
            branch,
            prunable,
            inputs: input.map(|s| vec![s.to_string()]).unwrap_or_default(),
        });
        // He-uniform fan-in initialization keeps activation magnitudes stable
        // through the stack.
        let fan_in = (in_c * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::from_fn([out_c, in_c, k, k], |_, _, _, _| {
            self.rng.gen_range(-bound..bound)
        });
        let bias = (0..out_c).map(|_| self.rng.gen_range(-0.1..0.1)).collect();
        self.weights
            .convs
            .insert(id.into(), ConvWeights { weight, bias });
    }

    fn bn(&mut self, id: &str, section: Section, input: &str, channels: usize) {
        self.layers.push(LayerSpec {
            id: id.into(),
            kind: LayerKind::BatchNorm { channels },
            section,
            branch: None,
            prunable: false,
            inputs: vec![input.into()],
        });
        self.weights.bns.insert(
            id.into(),
            BnWeights {
                gamma: vec![1.0; channels],
                beta: vec![0.0; channels],
                running_mean: vec![0.0; channels],
                running_var: vec![1.0; channels],
                eps: 1e-5,
            },
        );
    }

    fn relu(&mut self, id: &str, section: Section, input: &str) {
        self.layers.push(LayerSpec {
            id: id.into(),
            kind: LayerKind::Relu,
            section,
            branch: None,
            prunable: false,
            inputs: vec![input.into()],
        });
    }

    fn pool(&mut self, id: &str, section: Section, input: &str, k: usize, stride: usize) {
        self.layers.push(LayerSpec {
            id: id.into(),
            kind: LayerKind::MaxPool { kernel: k, stride },
            section,
            branch: None,
            prunable: false,
            inputs: vec![input.into()],
        });
    }

    fn corr(&mut self, id: &str, section: Section, template_in: &str, search_in: &str) {
        self.layers.push(LayerSpec {
            id: id.into(),
            kind: LayerKind::CrossCorrelationSite,
            section,
            branch: None,
            prunable: false,
            inputs: vec![template_in.into(), search_in.into()],
        });
    }

    /// Output projections start near zero so a freshly initialized model
    /// emits mid-range scores and desk-sized boxes instead of saturated
    /// logits.
    fn damp_output_projections(&mut self) {
        for id in [
            crate::model::CLS_SCORE_ID,
            crate::model::QUALITY_ID,
            crate::model::REG_OFFSETS_ID,
        ] {
            if let Some(w) = self.weights.convs.get_mut(id) {
                let damped: Vec<f32> = w.weight.data().iter().map(|v| v * 0.01).collect();
                w.weight = Tensor::new(w.weight.shape(), damped).expect("same shape");
                w.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }
}

/// Build the reference tracker at the given channel scale with seeded random
/// weights. `scale` must lie in `(0, 1]`; every layer must keep at least one
/// channel after scaling.
pub fn reference_model(scale: f64, seed: u64) -> Result<ModelGraph> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must lie in (0, 1], got {scale}"
        )));
    }
    let plan = REFERENCE_PLAN;
    let mut bb = [0usize; 5];
    for (i, base) in plan.backbone.iter().enumerate() {
        bb[i] = scaled(*base, scale, &format!("backbone.conv{}", i + 1))?;
    }
    let neck_c = scaled(plan.neck_channels, scale, "neck")?;
    let tower_c = scaled(plan.tower_channels, scale, "head towers")?;

    let mut b = Builder {
        layers: Vec::new(),
        weights: WeightStore::default(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    use Section::*;
    // backbone: pooling after convs 1-2, batch_norm+relu after convs 1-4
    b.conv(
        "backbone.conv1",
        Backbone,
        None,
        true,
        None,
        3,
        bb[0],
        plan.backbone_kernels[0],
        plan.backbone_strides[0],
        0,
    );
    b.bn("backbone.bn1", Backbone, "backbone.conv1", bb[0]);
    b.relu("backbone.relu1", Backbone, "backbone.bn1");
    b.pool("backbone.pool1", Backbone, "backbone.relu1", 3, 2);
    b.conv(
        "backbone.conv2",
        Backbone,
        None,
        true,
        Some("backbone.pool1"),
        bb[0],
        bb[1],
        plan.backbone_kernels[1],
        plan.backbone_strides[1],
        0,
    );
    b.bn("backbone.bn2", Backbone, "backbone.conv2", bb[1]);
    b.relu("backbone.relu2", Backbone, "backbone.bn2");
    b.pool("backbone.pool2", Backbone, "backbone.relu2", 3, 2);
    b.conv(
        "backbone.conv3",
        Backbone,
        None,
        true,
        Some("backbone.pool2"),
        bb[1],
        bb[2],
        plan.backbone_kernels[2],
        plan.backbone_strides[2],
        0,
    );
    b.bn("backbone.bn3", Backbone, "backbone.conv3", bb[2]);
    b.relu("backbone.relu3", Backbone, "backbone.bn3");
    b.conv(
        "backbone.conv4",
        Backbone,
        None,
        true,
        Some("backbone.relu3"),
        bb[2],
        bb[3],
        plan.backbone_kernels[3],
        plan.backbone_strides[3],
        0,
    );
    b.bn("backbone.bn4", Backbone, "backbone.conv4", bb[3]);
    b.relu("backbone.relu4", Backbone, "backbone.bn4");
    b.conv(
        "backbone.conv5",
        Backbone,
        None,
        true,
        Some("backbone.relu4"),
        bb[3],
        bb[4],
        plan.backbone_kernels[4],
        plan.backbone_strides[4],
        0,
    );

    // neck: one conv per task per branch, never pruned
    for (id, branch) in [
        ("neck.cls_z", Branch::Template),
        ("neck.cls_x", Branch::Search),
        ("neck.reg_z", Branch::Template),
        ("neck.reg_x", Branch::Search),
    ] {
        b.conv(
            id,
            Neck,
            Some(branch),
            false,
            Some("backbone.conv5"),
            bb[4],
            neck_c,
            3,
            1,
            0,
        );
    }

    b.corr("corr.cls", HeadCls, "neck.cls_z", "neck.cls_x");
    b.corr("corr.reg", HeadReg, "neck.reg_z", "neck.reg_x");

    for (section, prefix, corr) in [
        (HeadCls, "head_cls", "corr.cls"),
        (HeadReg, "head_reg", "corr.reg"),
    ] {
        let mut prev = corr.to_string();
        let mut in_c = neck_c;
        for i in 1..=3 {
            let conv_id = format!("{prefix}.conv{i}");
            let relu_id = format!("{prefix}.relu{i}");
            b.conv(
                &conv_id,
                section,
                None,
                true,
                Some(&prev),
                in_c,
                tower_c,
                3,
                1,
                1,
            );
            b.relu(&relu_id, section, &conv_id);
            prev = relu_id;
            in_c = tower_c;
        }
        if section == HeadCls {
            b.conv(
                "head_cls.score",
                section,
                None,
                false,
                Some(&prev),
                tower_c,
                1,
                3,
                1,
                1,
            );
            b.conv(
                "head_cls.quality",
                section,
                None,
                false,
                Some(&prev),
                tower_c,
                1,
                3,
                1,
                1,
            );
        } else {
            b.conv(
                "head_reg.offsets",
                section,
                None,
                false,
                Some(&prev),
                tower_c,
                4,
                3,
                1,
                1,
            );
        }
    }
    b.damp_output_projections();

    let model = ModelGraph {
        layers: b.layers,
        weights: b.weights,
        meta: ModelMeta {
            template_size: plan.template_size,
            search_size: plan.search_size,
            total_stride: plan.total_stride,
        },
    };
    model.validate()?;
    Ok(model)
}

/// Reference model with default weight seed 0.
pub fn build_reference_model(scale: f64) -> Result<ModelGraph> {
    reference_model(scale, 0)
}

/// Miniature Siamese model (template 32, search 64) with randomized channel
/// counts. Same topology family as the reference: shared two-conv backbone,
/// four neck convs, two correlation sites, one tower conv per head, and the
/// standard output projections. Useful wherever a full-size model would be
/// too slow.
pub fn toy_siamese(seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = rng.gen_range(3..7);
    let c2 = rng.gen_range(4..9);
    let neck_c = rng.gen_range(3..8);
    let tower_c = rng.gen_range(4..9);

    let mut b = Builder {
        layers: Vec::new(),
        weights: WeightStore::default(),
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b9)),
    };
    use Section::*;
    b.conv("backbone.conv1", Backbone, None, true, None, 3, c1, 5, 2, 0);
    b.bn("backbone.bn1", Backbone, "backbone.conv1", c1);
    b.relu("backbone.relu1", Backbone, "backbone.bn1");
    b.pool("backbone.pool1", Backbone, "backbone.relu1", 2, 2);
    b.conv(
        "backbone.conv2",
        Backbone,
        None,
        true,
        Some("backbone.pool1"),
        c1,
        c2,
        3,
        1,
        0,
    );
    b.relu("backbone.relu2", Backbone, "backbone.conv2");
    for (id, branch) in [
        ("neck.cls_z", Branch::Template),
        ("neck.cls_x", Branch::Search),
        ("neck.reg_z", Branch::Template),
        ("neck.reg_x", Branch::Search),
    ] {
        b.conv(
            id,
            Neck,
            Some(branch),
            false,
            Some("backbone.relu2"),
            c2,
            neck_c,
            3,
            1,
            0,
        );
    }
    b.corr("corr.cls", HeadCls, "neck.cls_z", "neck.cls_x");
    b.corr("corr.reg", HeadReg, "neck.reg_z", "neck.reg_x");
    b.conv(
        "head_cls.conv1",
        HeadCls,
        None,
        true,
        Some("corr.cls"),
        neck_c,
        tower_c,
        3,
        1,
        1,
    );
    b.relu("head_cls.relu1", HeadCls, "head_cls.conv1");
    b.conv(
        "head_cls.score",
        HeadCls,
        None,
        false,
        Some("head_cls.relu1"),
        tower_c,
        1,
        3,
        1,
        1,
    );
    b.conv(
        "head_cls.quality",
        HeadCls,
        None,
        false,
        Some("head_cls.relu1"),
        tower_c,
        1,
        3,
        1,
        1,
    );
    b.conv(
        "head_reg.conv1",
        HeadReg,
        None,
        true,
        Some("corr.reg"),
        neck_c,
        tower_c,
        3,
        1,
        1,
    );
    b.relu("head_reg.relu1", HeadReg, "head_reg.conv1");
    b.conv(
        "head_reg.offsets",
        HeadReg,
        None,
        false,
        Some("head_reg.relu1"),
        tower_c,
        4,
        3,
        1,
        1,
    );
    b.damp_output_projections();

    let model = ModelGraph {
        layers: b.layers,
        weights: b.weights,
        meta: ModelMeta {
            template_size: 32,
            search_size: 64,
            total_stride: 4,
        },
    };
    debug_assert!(model.validate().is_ok());
    model
}
