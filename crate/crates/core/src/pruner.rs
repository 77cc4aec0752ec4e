//! One-shot structural surgery: apply a [`PrunePlan`] to a model, dropping
//! pruned output filters, propagating the channel removals to every consumer
//! (through pool/relu, which are transparent), and inheriting the surviving
//! weights bit-identically. The bias of a pruned filter is discarded with it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph, WeightStore};
use crate::rank::PrunePlan;
use crate::tensor::Tensor;

fn validate_plan(model: &ModelGraph, plan: &PrunePlan) -> Result<()> {
    for layer in &model.layers {
        let LayerKind::Conv { out_channels, .. } = layer.kind else {
            continue;
        };
        let mask = plan
            .masks
            .get(&layer.id)
            .ok_or_else(|| Error::PlanMismatch(format!("no mask for conv layer `{}`", layer.id)))?;
        if mask.len() != out_channels {
            return Err(Error::PlanMismatch(format!(
                "mask for `{}` has {} entries, layer has {out_channels} filters",
                layer.id,
                mask.len()
            )));
        }
        let kept = mask.iter().filter(|&&k| k).count();
        if kept == 0 {
            return Err(Error::EmptyMask(layer.id.clone()));
        }
        if !layer.prunable && kept != out_channels {
            return Err(Error::NonPrunable(layer.id.clone()));
        }
    }
    for id in plan.masks.keys() {
        let layer = model
            .layer(id)
            .map_err(|_| Error::PlanMismatch(format!("plan covers unknown layer `{id}`")))?;
        if !layer.is_conv() {
            return Err(Error::PlanMismatch(format!(
                "plan covers `{id}` which is not a conv layer"
            )));
        }
    }
    // depthwise coupling: both sides of a correlation site must keep the
    // same channels
    for layer in &model.layers {
        if matches!(layer.kind, LayerKind::CrossCorrelationSite) {
            let masks: Vec<Option<&Vec<bool>>> = layer
                .inputs
                .iter()
                .map(|input| {
                    model
                        .channel_source(input)
                        .ok()
                        .flatten()
                        .and_then(|src| plan.masks.get(&src.id))
                })
                .collect();
            if let [Some(a), Some(b)] = masks.as_slice() {
                if a != b {
                    return Err(Error::PlanMismatch(format!(
                        "correlation site `{}`: template and search producers keep different channels",
                        layer.id
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Kept input-channel indices flowing into `id` (identity for the raw image).
fn input_keep(model: &ModelGraph, plan: &PrunePlan, id: &str) -> Result<Vec<usize>> {
    match model.channel_source(id)? {
        Some(src) => plan.kept_indices(&src.id),
        None => Ok((0..3).collect()),
    }
}

/// Closed-form parameter count of the pruned model, without surgery.
pub fn predict_param_count(model: &ModelGraph, plan: &PrunePlan) -> Result<u64> {
    validate_plan(model, plan)?;
    let mut total = 0u64;
    for layer in &model.layers {
        match layer.kind {
            LayerKind::Conv { kernel, .. } => {
                let kept_out = plan.kept_count(&layer.id)? as u64;
                let kept_in = input_keep(model, plan, &layer.id)?.len() as u64;
                total += kept_out * kept_in * (kernel * kernel) as u64 + kept_out;
            }
            LayerKind::BatchNorm { .. } => {
                let kept = input_keep(model, plan, &layer.id)?.len() as u64;
                total += 4 * kept;
            }
            _ => {}
        }
    }
    Ok(total)
}

fn slice_conv_weight(weight: &Tensor, keep_out: &[usize], keep_in: &[usize]) -> Tensor {
    let [_, _, kh, kw] = weight.shape();
    let mut out = Tensor::zeros([keep_out.len(), keep_in.len(), kh, kw]);
    for (no, &oc) in keep_out.iter().enumerate() {
        for (ni, &ic) in keep_in.iter().enumerate() {
            for ky in 0..kh {
                for kx in 0..kw {
                    out.set(no, ni, ky, kx, weight.get(oc, ic, ky, kx));
                }
            }
        }
    }
    out
}

fn slice_vec(v: &[f32], keep: &[usize]) -> Vec<f32> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Apply a prune plan, producing a new model with surviving weights
/// inherited bit-identically from the original.
pub fn prune(model: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    validate_plan(model, plan)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut weights = WeightStore::default();
    for layer in &model.layers {
        let mut spec = layer.clone();
        match layer.kind {
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let keep_out = plan.kept_indices(&layer.id)?;
                let keep_in = input_keep(model, plan, &layer.id)?;
                let w = &model.weights.convs[&layer.id];
                weights.convs.insert(
                    layer.id.clone(),
                    crate::model::ConvWeights {
                        weight: slice_conv_weight(&w.weight, &keep_out, &keep_in),
                        bias: slice_vec(&w.bias, &keep_out),
                    },
                );
                spec.kind = LayerKind::Conv {
                    in_channels: keep_in.len(),
                    out_channels: keep_out.len(),
                    kernel,
                    stride,
                    padding,
                };
            }
            LayerKind::BatchNorm { .. } => {
                let keep = input_keep(model, plan, &layer.id)?;
                let b = &model.weights.bns[&layer.id];
                weights.bns.insert(
                    layer.id.clone(),
                    crate::model::BnWeights {
                        gamma: slice_vec(&b.gamma, &keep),
                        beta: slice_vec(&b.beta, &keep),
                        running_mean: slice_vec(&b.running_mean, &keep),
                        running_var: slice_vec(&b.running_var, &keep),
                        eps: b.eps,
                    },
                );
                spec.kind = LayerKind::BatchNorm {
                    channels: keep.len(),
                };
            }
            _ => {}
        }
        layers.push(spec);
    }
    let pruned = ModelGraph {
        layers,
        weights,
        meta: model.meta.clone(),
    };
    pruned.validate()?;
    Ok(pruned)
}

/// Keep-ratio map applying `ratio` to every prunable conv layer.
pub fn uniform_ratios(model: &ModelGraph, ratio: f64) -> BTreeMap<String, f64> {
    model
        .prunable_conv_ids()
        .into_iter()
        .map(|id| (id.to_string(), ratio))
        .collect()
}
