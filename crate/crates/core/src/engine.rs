//! Deterministic forward execution of a [`ModelGraph`]: branch feature
//! extraction, activation taps for calibration, and template/search coupling.
//!
//! The backbone is shared, so it executes once per provided branch input.
//! Taps capture post-convolution, pre-activation maps (batch-norm and relu
//! are separate graph nodes, so a conv's raw output is exactly the tap).
//! Identical inputs yield bit-identical outputs at any thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::kernels::{default_conv_kernel, default_corr_kernel, ConvKernel, CorrKernel};
use crate::model::{Branch, Ctx, LayerKind, ModelGraph, Section};
use crate::tensor::{batch_norm_apply, max_pool2d, relu, Tensor};

pub use crate::kernels::{cross_correlate, cross_correlate_depthwise};

/// Which kernel implementations the executor dispatches to.
#[derive(Clone, Copy)]
pub struct EngineConfig {
    pub conv: &'static dyn ConvKernel,
    pub corr: &'static dyn CorrKernel,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            conv: default_conv_kernel(),
            corr: default_corr_kernel(),
        }
    }
}

impl EngineConfig {
    pub fn reference() -> Self {
        EngineConfig {
            conv: crate::kernels::conv_kernel("direct").expect("registered"),
            corr: default_corr_kernel(),
        }
    }
}

/// Result of a full two-branch forward pass.
pub struct TrackForward {
    /// Pre-activation conv outputs for each requested tap id.
    pub taps: BTreeMap<String, Tensor>,
    /// Terminal layer outputs (layers nothing else consumes), keyed by id.
    pub outputs: BTreeMap<String, Tensor>,
}

fn ctx_code(ctx: Ctx) -> u8 {
    match ctx {
        Ctx::Template => 0,
        Ctx::Search => 1,
        Ctx::Fused => 2,
    }
}

/// The context whose value a tap of `layer` captures.
fn tap_ctx(model: &ModelGraph, fused: &BTreeSet<String>, id: &str, have_search: bool) -> Ctx {
    let layer = model.layer(id).expect("checked");
    if fused.contains(id) {
        Ctx::Fused
    } else if let Some(b) = layer.branch {
        match b {
            Branch::Template => Ctx::Template,
            Branch::Search => Ctx::Search,
        }
    } else if have_search {
        Ctx::Search
    } else {
        Ctx::Template
    }
}

struct Executor<'a> {
    model: &'a ModelGraph,
    cfg: EngineConfig,
    index: HashMap<&'a str, usize>,
    fused: BTreeSet<String>,
    values: HashMap<(usize, u8), Tensor>,
    remaining_reads: HashMap<(usize, u8), usize>,
}

impl<'a> Executor<'a> {
    fn new(model: &'a ModelGraph, cfg: EngineConfig) -> Self {
        let index = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        Executor {
            model,
            cfg,
            index,
            fused: model.fused_set(),
            values: HashMap::new(),
            remaining_reads: HashMap::new(),
        }
    }

    /// Instances each (layer, ctx) instance reads.
    fn reads_of(&self, li: usize, ctx: Ctx) -> Vec<(usize, Ctx)> {
        let layer = &self.model.layers[li];
        match layer.kind {
            LayerKind::CrossCorrelationSite => vec![
                (self.index[layer.inputs[0].as_str()], Ctx::Template),
                (self.index[layer.inputs[1].as_str()], Ctx::Search),
            ],
            _ => layer
                .inputs
                .first()
                .map(|i| vec![(self.index[i.as_str()], ctx)])
                .unwrap_or_default(),
        }
    }

    fn instances(&self, have_template: bool, have_search: bool) -> Vec<(usize, Ctx)> {
        let mut out = Vec::new();
        for (li, layer) in self.model.layers.iter().enumerate() {
            for ctx in self.model.contexts_of(layer, &self.fused) {
                let wanted = match ctx {
                    Ctx::Template => have_template,
                    Ctx::Search => have_search,
                    Ctx::Fused => have_template && have_search,
                };
                if wanted {
                    out.push((li, ctx));
                }
            }
        }
        out
    }

    fn run(
        &mut self,
        template: Option<&Tensor>,
        search: Option<&Tensor>,
        taps: &BTreeSet<String>,
        stop_at: Option<(usize, Ctx)>,
    ) -> Result<TrackForward> {
        let instances = self.instances(template.is_some(), search.is_some());
        for &(li, ctx) in &instances {
            for read in self.reads_of(li, ctx) {
                *self
                    .remaining_reads
                    .entry((read.0, ctx_code(read.1)))
                    .or_insert(0) += 1;
            }
        }

        let mut tapped = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        for &(li, ctx) in &instances {
            let layer = &self.model.layers[li];
            let value = match layer.kind {
                LayerKind::CrossCorrelationSite => {
                    let t = self.take_read(self.index[layer.inputs[0].as_str()], Ctx::Template)?;
                    let s = self.take_read(self.index[layer.inputs[1].as_str()], Ctx::Search)?;
                    self.cfg.corr.run(&t, &s).map_err(|e| {
                        Error::InvalidArgument(format!("at layer `{}`: {e}", layer.id))
                    })?
                }
                _ => {
                    let input = match layer.inputs.first() {
                        Some(prev) => self.take_read(self.index[prev.as_str()], ctx)?,
                        None => match ctx {
                            Ctx::Template => template.expect("instance gated on input").clone(),
                            _ => search.expect("instance gated on input").clone(),
                        },
                    };
                    self.apply(layer, &input)?
                }
            };
            if taps.contains(&layer.id)
                && ctx == tap_ctx(self.model, &self.fused, &layer.id, search.is_some())
            {
                tapped.insert(layer.id.clone(), value.clone());
            }
            let key = (li, ctx_code(ctx));
            if self.remaining_reads.get(&key).copied().unwrap_or(0) == 0 {
                outputs.insert(layer.id.clone(), value);
            } else {
                self.values.insert(key, value);
            }
            if stop_at == Some((li, ctx)) {
                let v = outputs
                    .remove(&layer.id)
                    .or_else(|| self.values.remove(&key))
                    .expect("just stored");
                outputs.clear();
                outputs.insert(layer.id.clone(), v);
                return Ok(TrackForward {
                    taps: tapped,
                    outputs,
                });
            }
        }
        Ok(TrackForward {
            taps: tapped,
            outputs,
        })
    }

    /// Read a stored value, dropping it once its last consumer has run.
    fn take_read(&mut self, li: usize, ctx: Ctx) -> Result<Tensor> {
        let key = (li, ctx_code(ctx));
        let remaining = self.remaining_reads.get_mut(&key).ok_or_else(|| {
            Error::InvalidModel(format!(
                "layer `{}` has no value in required context",
                self.model.layers[li].id
            ))
        })?;
        *remaining -= 1;
        if *remaining == 0 {
            self.values.remove(&key).ok_or_else(|| {
                Error::InvalidModel(format!(
                    "value of `{}` missing during execution",
                    self.model.layers[li].id
                ))
            })
        } else {
            self.values.get(&key).cloned().ok_or_else(|| {
                Error::InvalidModel(format!(
                    "value of `{}` missing during execution",
                    self.model.layers[li].id
                ))
            })
        }
    }

    fn apply(&self, layer: &crate::model::LayerSpec, input: &Tensor) -> Result<Tensor> {
        let wrap = |e: Error| Error::InvalidArgument(format!("at layer `{}`: {e}", layer.id));
        match layer.kind {
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let w = self.model.weights.convs.get(&layer.id).ok_or_else(|| {
                    Error::InvalidModel(format!("conv `{}` has no weights", layer.id))
                })?;
                self.cfg
                    .conv
                    .run(input, &w.weight, &w.bias, stride, padding)
                    .map_err(wrap)
            }
            LayerKind::BatchNorm { .. } => {
                let b = self.model.weights.bns.get(&layer.id).ok_or_else(|| {
                    Error::InvalidModel(format!("batch_norm `{}` has no weights", layer.id))
                })?;
                batch_norm_apply(
                    input,
                    &b.gamma,
                    &b.beta,
                    &b.running_mean,
                    &b.running_var,
                    b.eps,
                )
                .map_err(wrap)
            }
            LayerKind::Relu => Ok(relu(input)),
            LayerKind::MaxPool { kernel, stride } => {
                max_pool2d(input, kernel, stride).map_err(wrap)
            }
            LayerKind::CrossCorrelationSite => unreachable!("handled by caller"),
        }
    }
}

fn check_image(model: &ModelGraph, input: &Tensor, what: &str, expected_size: usize) -> Result<()> {
    let _ = model;
    if input.channels() != 3 || input.batch() != 1 {
        return Err(Error::ShapeMismatch {
            context: format!("{what} input"),
            expected: "1 batch, 3 channels".into(),
            actual: format!("{} batch, {} channels", input.batch(), input.channels()),
        });
    }
    if input.height() != expected_size || input.width() != expected_size {
        return Err(Error::ShapeMismatch {
            context: format!("{what} input"),
            expected: format!("{expected_size}x{expected_size}"),
            actual: format!("{}x{}", input.height(), input.width()),
        });
    }
    Ok(())
}

/// Branch the executor should treat a single input as, inferred from its
/// spatial size against the model meta.
fn infer_branch(model: &ModelGraph, input: &Tensor) -> Result<Ctx> {
    if !model.has_corr() {
        return Ok(Ctx::Search);
    }
    let hw = (input.height(), input.width());
    if hw == (model.meta.template_size, model.meta.template_size) {
        Ok(Ctx::Template)
    } else if hw == (model.meta.search_size, model.meta.search_size) {
        Ok(Ctx::Search)
    } else {
        Err(Error::ShapeMismatch {
            context: "forward input".into(),
            expected: format!(
                "{0}x{0} (template) or {1}x{1} (search)",
                model.meta.template_size, model.meta.search_size
            ),
            actual: format!("{}x{}", input.height(), input.width()),
        })
    }
}

fn single_branch_forward(
    model: &ModelGraph,
    input: &Tensor,
    taps: &BTreeSet<String>,
    stop_at: Option<(usize, Ctx)>,
    cfg: EngineConfig,
) -> Result<TrackForward> {
    if input.channels() != 3 {
        return Err(Error::ShapeMismatch {
            context: "forward input".into(),
            expected: "3 channels".into(),
            actual: format!("{}", input.channels()),
        });
    }
    let ctx = infer_branch(model, input)?;
    let mut exec = Executor::new(model, cfg);
    match ctx {
        Ctx::Template => exec.run(Some(input), None, taps, stop_at),
        _ => exec.run(None, Some(input), taps, stop_at),
    }
}

/// Output of the last layer of `section` for a single-branch pass. For
/// Siamese models the branch is inferred from the input size; head sections
/// need both branches and are rejected here (use [`track_forward`]).
pub fn forward_features(model: &ModelGraph, input: &Tensor, section: Section) -> Result<Tensor> {
    if input.channels() != 3 {
        return Err(Error::ShapeMismatch {
            context: "forward input".into(),
            expected: "3 channels".into(),
            actual: format!("{}", input.channels()),
        });
    }
    let ctx = infer_branch(model, input)?;
    let fused = model.fused_set();
    let target = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.section == section && model.contexts_of(l, &fused).contains(&ctx))
        .map(|(i, _)| i)
        .next_back()
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "section {section:?} has no layers reachable from a single {ctx:?} input"
            ))
        })?;
    let mut exec = Executor::new(model, EngineConfig::default());
    let result = match ctx {
        Ctx::Template => exec.run(Some(input), None, &BTreeSet::new(), Some((target, ctx)))?,
        _ => exec.run(None, Some(input), &BTreeSet::new(), Some((target, ctx)))?,
    };
    let id = &model.layers[target].id;
    result
        .outputs
        .into_iter()
        .find(|(k, _)| k == id)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::InvalidModel(format!("no output produced for `{id}`")))
}

/// Single-branch pass capturing pre-activation maps of the tapped convs.
/// Returns the taps plus the final output of the pass.
pub fn forward_with_taps(
    model: &ModelGraph,
    input: &Tensor,
    tap_ids: &BTreeSet<String>,
) -> Result<(BTreeMap<String, Tensor>, Tensor)> {
    validate_taps(model, tap_ids)?;
    let ctx = infer_branch(model, input)?;
    let fused = model.fused_set();
    for id in tap_ids {
        let layer = model.layer(id)?;
        if !model.contexts_of(layer, &fused).contains(&ctx) {
            return Err(Error::InvalidArgument(format!(
                "tap `{id}` does not execute on a single {ctx:?} input"
            )));
        }
    }
    let result = single_branch_forward(model, input, tap_ids, None, EngineConfig::default())?;
    let last = model
        .layers
        .iter()
        .rev()
        .find_map(|l| result.outputs.get(&l.id).cloned())
        .ok_or_else(|| Error::InvalidModel("forward produced no output".into()))?;
    Ok((result.taps, last))
}

fn validate_taps(model: &ModelGraph, tap_ids: &BTreeSet<String>) -> Result<()> {
    for id in tap_ids {
        let layer = model.layer(id)?;
        if !layer.is_conv() {
            return Err(Error::InvalidArgument(format!(
                "tap `{id}` is not a conv layer"
            )));
        }
    }
    Ok(())
}

/// Full two-branch forward with taps on any conv layer.
pub fn track_forward(
    model: &ModelGraph,
    template: &Tensor,
    search: &Tensor,
    tap_ids: &BTreeSet<String>,
    cfg: EngineConfig,
) -> Result<TrackForward> {
    if !model.has_corr() {
        return Err(Error::InvalidArgument(
            "track_forward needs a model with correlation sites".into(),
        ));
    }
    validate_taps(model, tap_ids)?;
    check_image(model, template, "template", model.meta.template_size)?;
    check_image(model, search, "search", model.meta.search_size)?;
    let mut exec = Executor::new(model, cfg);
    exec.run(Some(template), Some(search), tap_ids, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{conv2d, conv_kernel};
    use crate::model::{toy_siamese, BnWeights, ConvWeights, LayerSpec, ModelMeta, WeightStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn chain_model(rng: &mut ChaCha8Rng, with_bias: bool) -> ModelGraph {
        let (c1, c2) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let mut weights = WeightStore::default();
        weights.convs.insert(
            "backbone.conv1".into(),
            ConvWeights {
                weight: rand_tensor(rng, [c1, 3, 3, 3]),
                bias: if with_bias {
                    (0..c1).map(|_| rng.gen_range(-0.2..0.2)).collect()
                } else {
                    vec![0.0; c1]
                },
            },
        );
        weights.convs.insert(
            "backbone.conv2".into(),
            ConvWeights {
                weight: rand_tensor(rng, [c2, c1, 3, 3]),
                bias: if with_bias {
                    (0..c2).map(|_| rng.gen_range(-0.2..0.2)).collect()
                } else {
                    vec![0.0; c2]
                },
            },
        );
        let conv = |id: &str, in_c: usize, out_c: usize, input: Option<&str>| LayerSpec {
            id: id.into(),
            kind: LayerKind::Conv {
                in_channels: in_c,
                out_channels: out_c,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            section: Section::Backbone,
            branch: None,
            prunable: true,
            inputs: input.map(|s| vec![s.to_string()]).unwrap_or_default(),
        };
        ModelGraph {
            layers: vec![
                conv("backbone.conv1", 3, c1, None),
                LayerSpec {
                    id: "backbone.relu1".into(),
                    kind: LayerKind::Relu,
                    section: Section::Backbone,
                    branch: None,
                    prunable: false,
                    inputs: vec!["backbone.conv1".into()],
                },
                conv("backbone.conv2", c1, c2, Some("backbone.relu1")),
            ],
            weights,
            meta: ModelMeta {
                template_size: 12,
                search_size: 12,
                total_stride: 1,
            },
        }
    }

    #[test]
    fn zero_input_through_bias_free_stack_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let model = chain_model(&mut rng, false);
        let out =
            forward_features(&model, &Tensor::zeros([1, 3, 12, 12]), Section::Backbone).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = chain_model(&mut rng, true);
        let input = rand_tensor(&mut rng, [1, 3, 12, 12]);
        let a = forward_features(&model, &input, Section::Backbone).unwrap();
        let b = forward_features(&model, &input, Section::Backbone).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn two_layer_chain_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = chain_model(&mut rng, true);
        let input = rand_tensor(&mut rng, [1, 3, 12, 12]);
        let out = forward_features(&model, &input, Section::Backbone).unwrap();

        let w1 = &model.weights.convs["backbone.conv1"];
        let w2 = &model.weights.convs["backbone.conv2"];
        let manual = conv2d(
            &relu(&conv2d(&input, &w1.weight, &w1.bias, 1, 0).unwrap()),
            &w2.weight,
            &w2.bias,
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.shape(), manual.shape());
        for (a, b) in out.data().iter().zip(manual.data()) {
            let denom = a.abs().max(b.abs()).max(1.0);
            assert!((a - b).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn tap_of_first_conv_is_pre_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = chain_model(&mut rng, true);
        let input = rand_tensor(&mut rng, [1, 3, 12, 12]);
        let taps: BTreeSet<String> = ["backbone.conv1".to_string()].into();
        let (taps_out, _) = forward_with_taps(&model, &input, &taps).unwrap();
        let w1 = &model.weights.convs["backbone.conv1"];
        // bit-identical to the engine's own conv kernel, close to the
        // reference form
        let engine_conv = default_conv_kernel()
            .run(&input, &w1.weight, &w1.bias, 1, 0)
            .unwrap();
        assert_eq!(taps_out["backbone.conv1"], engine_conv);
        let direct = conv2d(&input, &w1.weight, &w1.bias, 1, 0).unwrap();
        for (a, b) in taps_out["backbone.conv1"].data().iter().zip(direct.data()) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1.0) < 1e-5);
        }
    }

    #[test]
    fn empty_tap_set_behaves_as_forward_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let model = chain_model(&mut rng, true);
        let input = rand_tensor(&mut rng, [1, 3, 12, 12]);
        let (taps, out) = forward_with_taps(&model, &input, &BTreeSet::new()).unwrap();
        assert!(taps.is_empty());
        let direct = forward_features(&model, &input, Section::Backbone).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn unknown_tap_id_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let model = chain_model(&mut rng, true);
        let input = rand_tensor(&mut rng, [1, 3, 12, 12]);
        let taps: BTreeSet<String> = ["nope".to_string()].into();
        assert!(matches!(
            forward_with_taps(&model, &input, &taps),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn backbone_taps_match_inferred_shapes() {
        let model = toy_siamese(1);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let search = rand_tensor(&mut rng, [1, 3, 64, 64]);
        let taps: BTreeSet<String> =
            ["backbone.conv1".to_string(), "backbone.conv2".to_string()].into();
        let (tapped, _) = forward_with_taps(&model, &search, &taps).unwrap();
        let shapes = model.infer_shapes().unwrap();
        for (id, t) in &tapped {
            assert_eq!(t.shape(), shapes[id].search.unwrap(), "tap {id}");
        }
    }

    #[test]
    fn shared_backbone_is_branch_agnostic() {
        // equal template/search sizes: the same image must produce the same
        // backbone output on either branch.
        let model = toy_siamese(2);
        let mut eq = model.clone();
        eq.meta.template_size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let img = rand_tensor(&mut rng, [1, 3, 64, 64]);
        // capture the backbone terminal per branch via two stop_at runs
        let idx = eq
            .layers
            .iter()
            .position(|l| l.id == "backbone.conv2")
            .unwrap();
        let mut e1 = Executor::new(&eq, EngineConfig::default());
        let t_out = e1
            .run(
                Some(&img),
                Some(&img),
                &BTreeSet::new(),
                Some((idx, Ctx::Template)),
            )
            .unwrap();
        let mut e2 = Executor::new(&eq, EngineConfig::default());
        let s_out = e2
            .run(
                Some(&img),
                Some(&img),
                &BTreeSet::new(),
                Some((idx, Ctx::Search)),
            )
            .unwrap();
        assert_eq!(
            t_out.outputs["backbone.conv2"].data(),
            s_out.outputs["backbone.conv2"].data()
        );
    }

    #[test]
    fn track_forward_produces_head_outputs() {
        let model = toy_siamese(3);
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let template = rand_tensor(&mut rng, [1, 3, 32, 32]);
        let search = rand_tensor(&mut rng, [1, 3, 64, 64]);
        let out = track_forward(
            &model,
            &template,
            &search,
            &BTreeSet::new(),
            EngineConfig::default(),
        )
        .unwrap();
        let cls = &out.outputs[crate::model::CLS_SCORE_ID];
        let qual = &out.outputs[crate::model::QUALITY_ID];
        let reg = &out.outputs[crate::model::REG_OFFSETS_ID];
        assert_eq!(cls.channels(), 1);
        assert_eq!(qual.channels(), 1);
        assert_eq!(reg.channels(), 4);
        assert_eq!(cls.height(), reg.height());
        assert!(cls.all_finite() && qual.all_finite() && reg.all_finite());
    }

    #[test]
    fn engine_kernels_agree_on_full_model() {
        let model = toy_siamese(4);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let template = rand_tensor(&mut rng, [1, 3, 32, 32]);
        let search = rand_tensor(&mut rng, [1, 3, 64, 64]);
        let a = track_forward(
            &model,
            &template,
            &search,
            &BTreeSet::new(),
            EngineConfig {
                conv: conv_kernel("direct").unwrap(),
                corr: default_corr_kernel(),
            },
        )
        .unwrap();
        let b = track_forward(
            &model,
            &template,
            &search,
            &BTreeSet::new(),
            EngineConfig {
                conv: conv_kernel("im2col").unwrap(),
                corr: default_corr_kernel(),
            },
        )
        .unwrap();
        for (id, ta) in &a.outputs {
            let tb = &b.outputs[id];
            for (x, y) in ta.data().iter().zip(tb.data()) {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / denom < 1e-5, "{id}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let model = toy_siamese(5);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let template = rand_tensor(&mut rng, [1, 3, 32, 32]);
        let search = rand_tensor(&mut rng, [1, 3, 64, 64]);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                track_forward(
                    &model,
                    &template,
                    &search,
                    &BTreeSet::new(),
                    EngineConfig::default(),
                )
                .unwrap()
            })
        };
        let a = run(1);
        let b = run(4);
        for (id, ta) in &a.outputs {
            assert_eq!(ta.data(), b.outputs[id].data(), "layer {id}");
        }
    }

    #[test]
    fn shape_mismatch_error_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut model = chain_model(&mut rng, true);
        // sabotage conv2's stored weight channel count after validation
        let w = model.weights.convs.get_mut("backbone.conv2").unwrap();
        let [oc, ic, kh, kw] = w.weight.shape();
        w.weight = Tensor::zeros([oc, ic + 1, kh, kw]);
        let input = rand_tensor(&mut rng, [1, 3, 12, 12]);
        let err = forward_features(&model, &input, Section::Backbone).unwrap_err();
        assert!(err.to_string().contains("backbone.conv2"), "{err}");
    }

    #[test]
    fn bn_layers_execute_with_stored_stats() {
        // chain with a batch_norm layer verifying executor dispatch
        let mut weights = WeightStore::default();
        weights.convs.insert(
            "backbone.conv1".into(),
            ConvWeights {
                weight: Tensor::filled([2, 3, 1, 1], 1.0),
                bias: vec![0.0; 2],
            },
        );
        weights.bns.insert(
            "backbone.bn1".into(),
            BnWeights {
                gamma: vec![2.0, 0.5],
                beta: vec![1.0, -1.0],
                running_mean: vec![0.5, 0.0],
                running_var: vec![1.0, 4.0],
                eps: 0.0,
            },
        );
        let model = ModelGraph {
            layers: vec![
                LayerSpec {
                    id: "backbone.conv1".into(),
                    kind: LayerKind::Conv {
                        in_channels: 3,
                        out_channels: 2,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                    },
                    section: Section::Backbone,
                    branch: None,
                    prunable: true,
                    inputs: vec![],
                },
                LayerSpec {
                    id: "backbone.bn1".into(),
                    kind: LayerKind::BatchNorm { channels: 2 },
                    section: Section::Backbone,
                    branch: None,
                    prunable: false,
                    inputs: vec!["backbone.conv1".into()],
                },
            ],
            weights,
            meta: ModelMeta {
                template_size: 4,
                search_size: 4,
                total_stride: 1,
            },
        };
        model.validate().unwrap();
        let input = Tensor::filled([1, 3, 4, 4], 1.0);
        let out = forward_features(&model, &input, Section::Backbone).unwrap();
        // conv output is 3.0 everywhere on both channels
        // ch0: (3-0.5)/1*2+1 = 6, ch1: (3-0)/2*0.5-1 = -0.25
        for v in out.plane(0, 0) {
            assert!((v - 6.0).abs() < 1e-6);
        }
        for v in out.plane(0, 1) {
            assert!((v - -0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn siamese_input_must_match_a_branch_size() {
        let model = toy_siamese(7);
        let odd = Tensor::zeros([1, 3, 40, 40]);
        let err = forward_features(&model, &odd, Section::Backbone).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("32x32") && msg.contains("64x64"), "{msg}");
        let flat = Tensor::zeros([1, 1, 64, 64]);
        assert!(forward_features(&model, &flat, Section::Backbone).is_err());
    }

    #[test]
    fn branch_specific_layer_runs_once() {
        let model = toy_siamese(6);
        let fused = model.fused_set();
        let neck = model.layer("neck.cls_z").unwrap();
        assert_eq!(model.contexts_of(neck, &fused), vec![Ctx::Template]);
        let head = model.layer("head_cls.conv1").unwrap();
        assert_eq!(model.contexts_of(head, &fused), vec![Ctx::Fused]);
    }
}
