//! Property tests for the library invariants that hold over whole input
//! families rather than single examples.

use proptest::prelude::*;

use prunekit_core::model::{toy_siamese, LayerKind};
use prunekit_core::pruner::{predict_param_count, prune};
use prunekit_core::rank::PrunePlan;
use prunekit_core::tensor::{matrix_rank, Matrix, DEFAULT_RANK_REL_TOL};
use prunekit_core::tracker::{iou, BBox};

fn matrix_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..10, 1usize..10).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f32..10.0, r * c)
            .prop_map(move |data| Matrix::new(r, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn rank_never_exceeds_min_dim(m in matrix_strategy()) {
        let rank = matrix_rank(&m, DEFAULT_RANK_REL_TOL);
        prop_assert!(rank <= m.rows().min(m.cols()));
    }

    #[test]
    fn rank_matches_transpose(m in matrix_strategy()) {
        prop_assert_eq!(
            matrix_rank(&m, DEFAULT_RANK_REL_TOL),
            matrix_rank(&m.transpose(), DEFAULT_RANK_REL_TOL)
        );
    }

    #[test]
    fn rank_survives_positive_scaling(m in matrix_strategy(), scale in 0.01f32..100.0) {
        let scaled = Matrix::new(
            m.rows(),
            m.cols(),
            m.data().iter().map(|v| v * scale).collect(),
        )
        .unwrap();
        prop_assert_eq!(
            matrix_rank(&m, DEFAULT_RANK_REL_TOL),
            matrix_rank(&scaled, DEFAULT_RANK_REL_TOL)
        );
    }
}

fn bbox_strategy() -> impl Strategy<Value = BBox> {
    (-50.0f32..50.0, -50.0f32..50.0, 0.5f32..40.0, 0.5f32..40.0)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in bbox_strategy(), b in bbox_strategy()) {
        let ab = iou(&a, &b);
        let ba = iou(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn predicted_count_matches_surgery(
        seed in 0u64..500,
        keeps in proptest::collection::vec(1usize..9, 11),
    ) {
        let model = toy_siamese(seed);
        let mut plan = PrunePlan::all_keep(&model);
        for (i, id) in model.prunable_conv_ids().into_iter().enumerate() {
            let mask = plan.masks.get_mut(id).unwrap();
            let n = mask.len();
            let keep = keeps[i % keeps.len()].min(n).max(1);
            for j in keep..n {
                mask[j] = false;
            }
        }
        let predicted = predict_param_count(&model, &plan).unwrap();
        let pruned = prune(&model, &plan).unwrap();
        prop_assert_eq!(predicted, prunekit_core::model::param_count(&pruned));
        pruned.validate().unwrap();
    }
}

/// Corrupting any single structural field of a valid model must make the
/// validator reject it.
#[test]
fn validator_rejects_single_field_corruptions() {
    for seed in 0..6u64 {
        let base = toy_siamese(seed);
        base.validate().unwrap();
        let conv_id = "backbone.conv2";

        let mut corruptions: Vec<(&str, Box<dyn Fn(&mut prunekit_core::model::ModelGraph)>)> =
            Vec::new();
        corruptions.push((
            "duplicate id",
            Box::new(|m| {
                let dup = m.layers[0].clone();
                m.layers.push(dup);
            }),
        ));
        corruptions.push((
            "forward reference",
            Box::new(|m| {
                let last = m.layers.last().unwrap().id.clone();
                m.layers[0].inputs = vec![last];
            }),
        ));
        corruptions.push((
            "declared in_channels off by one",
            Box::new(move |m| {
                let l = m.layers.iter_mut().find(|l| l.id == conv_id).unwrap();
                if let LayerKind::Conv { in_channels, .. } = &mut l.kind {
                    *in_channels += 1;
                }
            }),
        ));
        corruptions.push((
            "declared out_channels off by one",
            Box::new(move |m| {
                let l = m.layers.iter_mut().find(|l| l.id == conv_id).unwrap();
                if let LayerKind::Conv { out_channels, .. } = &mut l.kind {
                    *out_channels += 1;
                }
            }),
        ));
        corruptions.push((
            "bias too short",
            Box::new(move |m| {
                m.weights.convs.get_mut(conv_id).unwrap().bias.pop();
            }),
        ));
        corruptions.push((
            "missing conv weights",
            Box::new(move |m| {
                m.weights.convs.remove(conv_id);
            }),
        ));
        corruptions.push((
            "bn vector length drift",
            Box::new(|m| {
                m.weights
                    .bns
                    .get_mut("backbone.bn1")
                    .unwrap()
                    .gamma
                    .push(1.0);
            }),
        ));
        corruptions.push((
            "non-finite weight",
            Box::new(move |m| {
                let w = m.weights.convs.get_mut(conv_id).unwrap();
                let mut data = w.weight.data().to_vec();
                data[0] = f32::NAN;
                w.weight = prunekit_core::tensor::Tensor::new(w.weight.shape(), data).unwrap();
            }),
        ));
        corruptions.push((
            "branch tag dropped from a neck conv",
            Box::new(|m| {
                m.layers
                    .iter_mut()
                    .find(|l| l.id == "neck.cls_z")
                    .unwrap()
                    .branch = None;
            }),
        ));
        corruptions.push((
            "prunable flag on a pool layer",
            Box::new(|m| {
                m.layers
                    .iter_mut()
                    .find(|l| matches!(l.kind, LayerKind::MaxPool { .. }))
                    .unwrap()
                    .prunable = true;
            }),
        ));
        corruptions.push((
            "head output renamed",
            Box::new(|m| {
                let l = m
                    .layers
                    .iter_mut()
                    .find(|l| l.id == "head_cls.score")
                    .unwrap();
                l.id = "head_cls.scores".into();
                let w = m.weights.convs.remove("head_cls.score").unwrap();
                m.weights.convs.insert("head_cls.scores".into(), w);
            }),
        ));

        for (what, corrupt) in &corruptions {
            let mut m = base.clone();
            corrupt(&mut m);
            assert!(
                m.validate().is_err(),
                "seed {seed}: validator accepted a model with {what}"
            );
        }
    }
}
