//! Layer-graph representation of the Siamese tracking network: layer specs,
//! weight storage, the structural validator, shape inference, and parameter /
//! MAC accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv_output_hw;
use crate::tensor::Tensor;

pub mod build;
pub mod io;

pub use build::{build_reference_model, reference_model, toy_siamese};
pub use io::{
    load_model, load_model_full, model_hash, save_model, save_model_with_provenance, Provenance,
};

/// Network section a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Backbone,
    Neck,
    HeadCls,
    HeadReg,
}

/// Which input branch a branch-specific layer processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Template,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    CrossCorrelationSite,
}

/// One node of the layer graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub section: Section,
    /// Set on layers that only exist on one branch (the neck convs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    /// Whether the pruner may drop output filters of this conv.
    #[serde(default)]
    pub prunable: bool,
    /// Producer layer ids; empty means the raw image input.
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    pub fn out_channels_or(&self, incoming: usize) -> usize {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::CrossCorrelationSite => incoming,
            _ => incoming,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    /// `(out_channels, in_channels, kernel, kernel)`
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnWeights {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

/// Named weight tensors per layer id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightStore {
    pub convs: BTreeMap<String, ConvWeights>,
    pub bns: BTreeMap<String, BnWeights>,
}

/// Input geometry plus the well-known head output layer ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub template_size: usize,
    pub search_size: usize,
    pub total_stride: usize,
}

/// Conventional ids of the head output projections of a trackable model.
pub const CLS_SCORE_ID: &str = "head_cls.score";
pub const QUALITY_ID: &str = "head_cls.quality";
pub const REG_OFFSETS_ID: &str = "head_reg.offsets";

/// Ordered layer specifications with weights; immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub weights: WeightStore,
    pub meta: ModelMeta,
}

/// Execution context of a layer instance: template branch, search branch, or
/// the fused path after cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ctx {
    Template,
    Search,
    Fused,
}

/// Per-context inferred value shapes of each layer.
#[derive(Debug, Clone, Default)]
pub struct CtxShapes {
    pub template: Option<[usize; 4]>,
    pub search: Option<[usize; 4]>,
    pub fused: Option<[usize; 4]>,
}

impl CtxShapes {
    pub fn get(&self, ctx: Ctx) -> Option<[usize; 4]> {
        match ctx {
            Ctx::Template => self.template,
            Ctx::Search => self.search,
            Ctx::Fused => self.fused,
        }
    }

    fn set(&mut self, ctx: Ctx, s: [usize; 4]) {
        match ctx {
            Ctx::Template => self.template = Some(s),
            Ctx::Search => self.search = Some(s),
            Ctx::Fused => self.fused = Some(s),
        }
    }
}

impl ModelGraph {
    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLayer(id.into()))
    }

    pub fn conv_ids(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.is_conv())
            .map(|l| l.id.as_str())
            .collect()
    }

    pub fn prunable_conv_ids(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.is_conv() && l.prunable)
            .map(|l| l.id.as_str())
            .collect()
    }

    pub fn has_corr(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::CrossCorrelationSite))
    }

    /// Layer ids executed on the fused (post-correlation) path.
    pub fn fused_set(&self) -> BTreeSet<String> {
        let mut fused = BTreeSet::new();
        for l in &self.layers {
            if matches!(l.kind, LayerKind::CrossCorrelationSite)
                || l.inputs.iter().any(|i| fused.contains(i))
            {
                fused.insert(l.id.clone());
            }
        }
        fused
    }

    /// Contexts a layer executes in.
    pub fn contexts_of(&self, layer: &LayerSpec, fused: &BTreeSet<String>) -> Vec<Ctx> {
        if fused.contains(&layer.id) {
            vec![Ctx::Fused]
        } else if let Some(branch) = layer.branch {
            match branch {
                Branch::Template => vec![Ctx::Template],
                Branch::Search => vec![Ctx::Search],
            }
        } else if self.has_corr() {
            vec![Ctx::Template, Ctx::Search]
        } else {
            // single-input chain model: one pass
            vec![Ctx::Search]
        }
    }

    /// Walk back through shape-transparent layers to the conv (if any) that
    /// determines the channel count flowing into `id`. `None` means the raw
    /// image input. Correlation sites pass through their first input.
    pub fn channel_source(&self, id: &str) -> Result<Option<&LayerSpec>> {
        let mut cur = self.layer(id)?;
        loop {
            let Some(prev_id) = cur.inputs.first() else {
                return Ok(None);
            };
            let prev = self.layer(prev_id)?;
            match prev.kind {
                LayerKind::Conv { .. } => return Ok(Some(prev)),
                _ => cur = prev,
            }
        }
    }

    /// Channels flowing into `id` (3 for the raw image input).
    pub fn in_channels_of(&self, id: &str) -> Result<usize> {
        Ok(match self.channel_source(id)? {
            Some(l) => match l.kind {
                LayerKind::Conv { out_channels, .. } => out_channels,
                _ => unreachable!(),
            },
            None => 3,
        })
    }

    /// Infer per-context output shapes for every layer, checking spatial and
    /// channel feasibility along the way. Chain models (no correlation site)
    /// run a single pass at `search_size`.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, CtxShapes>> {
        let fused = self.fused_set();
        let mut shapes: BTreeMap<String, CtxShapes> = BTreeMap::new();
        for layer in &self.layers {
            let mut entry = CtxShapes::default();
            for ctx in self.contexts_of(layer, &fused) {
                let input_shape = match layer.kind {
                    LayerKind::CrossCorrelationSite => {
                        let t_id = &layer.inputs[0];
                        let s_id = &layer.inputs[1];
                        let t = shapes
                            .get(t_id)
                            .and_then(|c| c.get(Ctx::Template))
                            .ok_or_else(|| {
                                Error::InvalidModel(format!(
                                    "correlation site `{}`: no template-side shape from `{t_id}`",
                                    layer.id
                                ))
                            })?;
                        let s = shapes
                            .get(s_id)
                            .and_then(|c| c.get(Ctx::Search))
                            .ok_or_else(|| {
                                Error::InvalidModel(format!(
                                    "correlation site `{}`: no search-side shape from `{s_id}`",
                                    layer.id
                                ))
                            })?;
                        if t[1] != s[1] {
                            return Err(Error::InvalidModel(format!(
                                "correlation site `{}`: channel mismatch {} vs {}",
                                layer.id, t[1], s[1]
                            )));
                        }
                        if t[2] > s[2] || t[3] > s[3] {
                            return Err(Error::InvalidModel(format!(
                                "correlation site `{}`: template {}x{} larger than search {}x{}",
                                layer.id, t[2], t[3], s[2], s[3]
                            )));
                        }
                        entry.set(ctx, [1, t[1], s[2] - t[2] + 1, s[3] - t[3] + 1]);
                        continue;
                    }
                    _ => match layer.inputs.first() {
                        Some(prev) => {
                            shapes.get(prev).and_then(|c| c.get(ctx)).ok_or_else(|| {
                                Error::InvalidModel(format!(
                                    "layer `{}`: producer `{prev}` has no value in its context",
                                    layer.id
                                ))
                            })?
                        }
                        None => {
                            let size = match ctx {
                                Ctx::Template => self.meta.template_size,
                                _ => self.meta.search_size,
                            };
                            [1, 3, size, size]
                        }
                    },
                };
                let out = match layer.kind {
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    } => {
                        if input_shape[1] != in_channels {
                            return Err(Error::InvalidModel(format!(
                                "layer `{}`: expects {in_channels} input channels, producer provides {}",
                                layer.id, input_shape[1]
                            )));
                        }
                        let (oh, ow) = conv_output_hw(
                            input_shape[2],
                            input_shape[3],
                            kernel,
                            kernel,
                            stride,
                            padding,
                        )
                        .map_err(|e| Error::InvalidModel(format!("layer `{}`: {e}", layer.id)))?;
                        [1, out_channels, oh, ow]
                    }
                    LayerKind::BatchNorm { channels } => {
                        if input_shape[1] != channels {
                            return Err(Error::InvalidModel(format!(
                                "layer `{}`: batch_norm over {channels} channels fed {}",
                                layer.id, input_shape[1]
                            )));
                        }
                        input_shape
                    }
                    LayerKind::Relu => input_shape,
                    LayerKind::MaxPool { kernel, stride } => {
                        if kernel > input_shape[2] || kernel > input_shape[3] {
                            return Err(Error::InvalidModel(format!(
                                "layer `{}`: {kernel}x{kernel} pool window larger than {}x{} input",
                                layer.id, input_shape[2], input_shape[3]
                            )));
                        }
                        [
                            input_shape[0],
                            input_shape[1],
                            (input_shape[2] - kernel) / stride + 1,
                            (input_shape[3] - kernel) / stride + 1,
                        ]
                    }
                    LayerKind::CrossCorrelationSite => unreachable!(),
                };
                entry.set(ctx, out);
            }
            shapes.insert(layer.id.clone(), entry);
        }
        Ok(shapes)
    }

    /// Structural validation: unique ids, topological order, arity, channel
    /// consistency, weight presence/shape, finite weights, and (for Siamese
    /// models) branch tags, head output convention, and equal head map sizes.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for layer in &self.layers {
            if layer.id.is_empty() {
                return Err(Error::InvalidModel("empty layer id".into()));
            }
            if !seen.insert(&layer.id) {
                return Err(Error::InvalidModel(format!(
                    "duplicate layer id `{}`",
                    layer.id
                )));
            }
            let arity = layer.inputs.len();
            match layer.kind {
                LayerKind::CrossCorrelationSite => {
                    if arity != 2 {
                        return Err(Error::InvalidModel(format!(
                            "correlation site `{}` needs exactly 2 inputs, has {arity}",
                            layer.id
                        )));
                    }
                }
                _ => {
                    if arity > 1 {
                        return Err(Error::InvalidModel(format!(
                            "layer `{}` has {arity} inputs, at most 1 allowed",
                            layer.id
                        )));
                    }
                }
            }
            for input in &layer.inputs {
                if !seen.contains(input.as_str()) {
                    return Err(Error::InvalidModel(format!(
                        "layer `{}` consumes `{input}` which is not defined earlier (graph must be topologically ordered and acyclic)",
                        layer.id
                    )));
                }
            }
        }

        // channel consistency and weight presence
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let incoming = self.in_channels_of(&layer.id)?;
                    if incoming != in_channels {
                        return Err(Error::InvalidModel(format!(
                            "layer `{}`: declared in_channels {in_channels} but producer provides {incoming}",
                            layer.id
                        )));
                    }
                    let w = self.weights.convs.get(&layer.id).ok_or_else(|| {
                        Error::InvalidModel(format!("conv `{}` has no weights", layer.id))
                    })?;
                    let expect = [out_channels, in_channels, kernel, kernel];
                    if w.weight.shape() != expect {
                        return Err(Error::InvalidModel(format!(
                            "conv `{}`: weight shape {:?} does not match spec {:?}",
                            layer.id,
                            w.weight.shape(),
                            expect
                        )));
                    }
                    if w.bias.len() != out_channels {
                        return Err(Error::InvalidModel(format!(
                            "conv `{}`: bias length {} does not match out_channels {out_channels}",
                            layer.id,
                            w.bias.len()
                        )));
                    }
                    if !w.weight.all_finite() || !w.bias.iter().all(|v| v.is_finite()) {
                        return Err(Error::InvalidModel(format!(
                            "conv `{}` has non-finite weights",
                            layer.id
                        )));
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    let incoming = self.in_channels_of(&layer.id)?;
                    if incoming != channels {
                        return Err(Error::InvalidModel(format!(
                            "batch_norm `{}`: {channels} channels but producer provides {incoming}",
                            layer.id
                        )));
                    }
                    let w = self.weights.bns.get(&layer.id).ok_or_else(|| {
                        Error::InvalidModel(format!("batch_norm `{}` has no weights", layer.id))
                    })?;
                    for (name, v) in [
                        ("gamma", &w.gamma),
                        ("beta", &w.beta),
                        ("running_mean", &w.running_mean),
                        ("running_var", &w.running_var),
                    ] {
                        if v.len() != channels {
                            return Err(Error::InvalidModel(format!(
                                "batch_norm `{}`: {name} length {} != {channels}",
                                layer.id,
                                v.len()
                            )));
                        }
                        if !v.iter().all(|x| x.is_finite()) {
                            return Err(Error::InvalidModel(format!(
                                "batch_norm `{}`: non-finite {name}",
                                layer.id
                            )));
                        }
                    }
                }
                _ => {}
            }
            if layer.prunable && !layer.is_conv() {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` is marked prunable but is not a conv",
                    layer.id
                )));
            }
        }

        // no orphan weights
        for id in self.weights.convs.keys().chain(self.weights.bns.keys()) {
            let l = self.layer(id)?;
            let ok = match l.kind {
                LayerKind::Conv { .. } => {
                    self.weights.convs.contains_key(id) && !self.weights.bns.contains_key(id)
                }
                LayerKind::BatchNorm { .. } => {
                    self.weights.bns.contains_key(id) && !self.weights.convs.contains_key(id)
                }
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidModel(format!(
                    "weights stored for `{id}` do not match its layer kind"
                )));
            }
        }

        if self.has_corr() {
            // corr sites must couple a template-side producer with a search-side one
            for layer in &self.layers {
                if matches!(layer.kind, LayerKind::CrossCorrelationSite) {
                    let t = self.layer(&layer.inputs[0])?;
                    let s = self.layer(&layer.inputs[1])?;
                    if t.branch != Some(Branch::Template) || s.branch != Some(Branch::Search) {
                        return Err(Error::InvalidModel(format!(
                            "correlation site `{}` must consume (template, search) tagged producers",
                            layer.id
                        )));
                    }
                }
            }
            // shared backbone: a single untagged chain feeding both branches
            for layer in &self.layers {
                if layer.section == Section::Backbone && layer.branch.is_some() {
                    return Err(Error::InvalidModel(format!(
                        "backbone layer `{}` must not be branch-specific (backbone is shared)",
                        layer.id
                    )));
                }
            }
            for id in [CLS_SCORE_ID, QUALITY_ID, REG_OFFSETS_ID] {
                if self.layers.iter().all(|l| l.id != id) {
                    return Err(Error::InvalidModel(format!(
                        "trackable model is missing output layer `{id}`"
                    )));
                }
            }
        }

        let shapes = self.infer_shapes()?;
        if self.has_corr() {
            let cls = shapes[CLS_SCORE_ID].fused.ok_or_else(|| {
                Error::InvalidModel("cls score layer never executes on fused path".into())
            })?;
            let qual = shapes[QUALITY_ID].fused.unwrap_or_default();
            let reg = shapes[REG_OFFSETS_ID].fused.unwrap_or_default();
            if cls[2..] != qual[2..] || cls[2..] != reg[2..] {
                return Err(Error::InvalidModel(format!(
                    "head output maps differ in spatial size: cls {:?}, quality {:?}, reg {:?}",
                    cls, qual, reg
                )));
            }
            if cls[1] != 1 || qual[1] != 1 || reg[1] != 4 {
                return Err(Error::InvalidModel(format!(
                    "head outputs must be 1/1/4 channels, got {}/{}/{}",
                    cls[1], qual[1], reg[1]
                )));
            }
        }
        Ok(())
    }
}

/// Total stored parameter elements: conv weights and biases plus the four
/// batch-norm vectors.
pub fn param_count(model: &ModelGraph) -> u64 {
    let mut total = 0u64;
    for w in model.weights.convs.values() {
        total += w.weight.len() as u64 + w.bias.len() as u64;
    }
    for b in model.weights.bns.values() {
        total += 4 * b.gamma.len() as u64;
    }
    total
}

/// Multiply-accumulate count of one forward pass with the given search-side
/// input size. Convs count `out_c * in_c * k^2 * out_h * out_w` per executed
/// instance (the shared backbone runs once per branch); correlation sites
/// count `channels * template_area * out_area`. Other layers contribute none.
pub fn mac_count(model: &ModelGraph, input_hw: (usize, usize)) -> Result<u64> {
    let scaled = if input_hw == (model.meta.search_size, model.meta.search_size) {
        model.clone()
    } else {
        let mut m = model.clone();
        m.meta.search_size = input_hw.0;
        if input_hw.0 != input_hw.1 {
            return Err(Error::InvalidArgument(
                "mac_count: only square inputs are supported".into(),
            ));
        }
        m
    };
    let fused = scaled.fused_set();
    let shapes = scaled.infer_shapes()?;
    let mut total = 0u64;
    for layer in &scaled.layers {
        for ctx in scaled.contexts_of(layer, &fused) {
            let Some(out) = shapes[&layer.id].get(ctx) else {
                continue;
            };
            match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    total += (out_channels * in_channels * kernel * kernel) as u64
                        * (out[2] * out[3]) as u64;
                }
                LayerKind::CrossCorrelationSite => {
                    let t = shapes[&layer.inputs[0]].template.unwrap();
                    total += (t[1] * t[2] * t[3]) as u64 * (out[2] * out[3]) as u64;
                }
                _ => {}
            }
        }
    }
    Ok(total)
}
