//! Rank-based filter importance: estimate expected feature-map ranks over a
//! calibration batch, then pick the filters to keep per layer.
//!
//! For every conv layer the calibration pass captures the pre-activation map
//! of each filter per input, takes its numerical rank, and averages over the
//! batch (exact floating division, so reports are comparable across batch
//! sizes). Backbone maps come from the search branch; branch-specific neck
//! convs from their own branch; head convs from the fused path. Filters with
//! the lowest average rank get pruned first.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{forward_with_taps, track_forward, EngineConfig};
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph};
use crate::tensor::{matrix_rank, relu, Tensor, DEFAULT_RANK_REL_TOL};

/// Default calibration batch size.
pub const DEFAULT_CALIBRATION_G: usize = 16;

/// Where calibration inputs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Seeded uniform noise in `[0, 1)`.
    SyntheticNoise,
    /// Images from a directory, resized to the search size; the template is a
    /// center crop.
    ImageFolder(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    /// Number of calibration inputs `g`.
    pub batch_size: usize,
    pub rel_tol: f32,
    pub seed: u64,
    pub source: InputSource,
    /// Rank the activated map instead of the raw conv output.
    pub post_activation: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            batch_size: DEFAULT_CALIBRATION_G,
            rel_tol: DEFAULT_RANK_REL_TOL,
            seed: 0,
            source: InputSource::SyntheticNoise,
            post_activation: false,
        }
    }
}

/// A calibration input generator selected by name (`noise`, `folder`).
pub trait CalibrationSource: Send + Sync {
    fn name(&self) -> &'static str;
    /// Deterministic (template, search) image pair for sample `index`.
    fn sample(
        &self,
        index: usize,
        template_size: usize,
        search_size: usize,
    ) -> Result<(Tensor, Tensor)>;
}

pub struct NoiseSource {
    pub seed: u64,
}

impl CalibrationSource for NoiseSource {
    fn name(&self) -> &'static str {
        "noise"
    }

    fn sample(
        &self,
        index: usize,
        template_size: usize,
        search_size: usize,
    ) -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let template = Tensor::from_fn([1, 3, template_size, template_size], |_, _, _, _| {
            rng.gen_range(0.0..1.0)
        });
        let search = Tensor::from_fn([1, 3, search_size, search_size], |_, _, _, _| {
            rng.gen_range(0.0..1.0)
        });
        Ok((template, search))
    }
}

pub struct FolderSource {
    paths: Vec<PathBuf>,
}

impl FolderSource {
    pub fn new(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| {
            Error::CalibrationSource(format!("cannot read image folder {}: {e}", dir.display()))
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::CalibrationSource(format!(
                "image folder {} holds no png/jpg files",
                dir.display()
            )));
        }
        Ok(FolderSource { paths })
    }
}

impl CalibrationSource for FolderSource {
    fn name(&self) -> &'static str {
        "folder"
    }

    fn sample(
        &self,
        index: usize,
        template_size: usize,
        search_size: usize,
    ) -> Result<(Tensor, Tensor)> {
        let path = &self.paths[index % self.paths.len()];
        let img = image::open(path)
            .map_err(|e| Error::CalibrationSource(format!("cannot load {}: {e}", path.display())))?
            .resize_exact(
                search_size as u32,
                search_size as u32,
                image::imageops::FilterType::Triangle,
            )
            .to_rgb8();
        let search = Tensor::from_fn([1, 3, search_size, search_size], |_, c, y, x| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        let off = (search_size - template_size) / 2;
        let template = Tensor::from_fn([1, 3, template_size, template_size], |_, c, y, x| {
            search.get(0, c, y + off, x + off)
        });
        Ok((template, search))
    }
}

/// Instantiate the configured input source.
pub fn calibration_source(cfg: &CalibrationConfig) -> Result<Box<dyn CalibrationSource>> {
    Ok(match &cfg.source {
        InputSource::SyntheticNoise => Box::new(NoiseSource { seed: cfg.seed }),
        InputSource::ImageFolder(dir) => Box::new(FolderSource::new(dir)?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanks {
    /// Average rank per filter, `sum_t rank / g`.
    pub ranks: Vec<f32>,
    pub prunable: bool,
}

/// Per-layer, per-filter average feature-map ranks from one calibration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub g: usize,
    pub rel_tol: f32,
    pub seed: u64,
    pub layers: BTreeMap<String, LayerRanks>,
}

impl RankReport {
    /// Filter indices ordered by decreasing average rank; equal ranks keep
    /// the lower index first.
    pub fn sorted_indices(&self, layer: &str) -> Result<Vec<usize>> {
        let lr = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.into()))?;
        let mut idx: Vec<usize> = (0..lr.ranks.len()).collect();
        idx.sort_by(|&a, &b| {
            lr.ranks[b]
                .partial_cmp(&lr.ranks[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "# prunekit rank-report schema=1");
        let _ = writeln!(out, "# g={}", self.g);
        let _ = writeln!(out, "# rel_tol={}", self.rel_tol);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "layer_id,filter_index,avg_rank,prunable");
        for (id, lr) in &self.layers {
            for (j, r) in lr.ranks.iter().enumerate() {
                let _ = writeln!(out, "{id},{j},{r},{}", u8::from(lr.prunable));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut g = None;
        let mut rel_tol = None;
        let mut seed = 0u64;
        let mut layers: BTreeMap<String, LayerRanks> = BTreeMap::new();
        let bad = |line: &str, why: &str| {
            Error::InvalidArgument(format!("rank report line `{line}`: {why}"))
        };
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("g=") {
                    g = v.parse::<usize>().ok();
                } else if let Some(v) = rest.strip_prefix("rel_tol=") {
                    rel_tol = v.parse::<f32>().ok();
                } else if let Some(v) = rest.strip_prefix("seed=") {
                    seed = v.parse::<u64>().unwrap_or(0);
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with("layer_id") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(line, "expected 4 comma-separated fields"));
            }
            let idx: usize = fields[1]
                .parse()
                .map_err(|_| bad(line, "bad filter index"))?;
            let rank: f32 = fields[2].parse().map_err(|_| bad(line, "bad rank"))?;
            let prunable = fields[3].trim() == "1";
            let entry = layers.entry(fields[0].to_string()).or_insert(LayerRanks {
                ranks: Vec::new(),
                prunable,
            });
            if entry.ranks.len() != idx {
                return Err(bad(line, "filter indices must be dense and in order"));
            }
            entry.ranks.push(rank);
        }
        Ok(RankReport {
            g: g.ok_or_else(|| Error::InvalidArgument("rank report missing g header".into()))?,
            rel_tol: rel_tol.ok_or_else(|| {
                Error::InvalidArgument("rank report missing rel_tol header".into())
            })?,
            seed,
            layers,
        })
    }
}

fn per_sample_ranks(
    model: &ModelGraph,
    taps: &BTreeSet<String>,
    template: &Tensor,
    search: &Tensor,
    cfg: &CalibrationConfig,
) -> Result<BTreeMap<String, Vec<u32>>> {
    let tapped = if model.has_corr() {
        track_forward(model, template, search, taps, EngineConfig::default())?.taps
    } else {
        forward_with_taps(model, search, taps)?.0
    };
    let mut out = BTreeMap::new();
    for (id, map) in tapped {
        let map = if cfg.post_activation { relu(&map) } else { map };
        let ranks: Vec<u32> = (0..map.channels())
            .map(|j| matrix_rank(&map.plane_matrix(0, j), cfg.rel_tol) as u32)
            .collect();
        out.insert(id, ranks);
    }
    Ok(out)
}

/// Estimate per-filter average feature-map ranks over `cfg.batch_size`
/// calibration inputs. Deterministic given the seed: inputs are generated
/// up front and per-filter sums run in a fixed order regardless of how the
/// batch is parallelized.
pub fn calibrate_ranks(model: &ModelGraph, cfg: &CalibrationConfig) -> Result<RankReport> {
    if cfg.batch_size < 1 {
        return Err(Error::InvalidArgument(
            "calibration batch must be >= 1".into(),
        ));
    }
    if !(cfg.rel_tol > 0.0 && cfg.rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rel_tol must lie in (0, 1), got {}",
            cfg.rel_tol
        )));
    }
    model.validate()?;
    let source = calibration_source(cfg)?;
    let taps: BTreeSet<String> = model.conv_ids().iter().map(|s| s.to_string()).collect();

    let inputs: Vec<(Tensor, Tensor)> = (0..cfg.batch_size)
        .map(|t| source.sample(t, model.meta.template_size, model.meta.search_size))
        .collect::<Result<_>>()?;

    let per_sample: Vec<BTreeMap<String, Vec<u32>>> = inputs
        .par_iter()
        .map(|(template, search)| per_sample_ranks(model, &taps, template, search, cfg))
        .collect::<Result<_>>()?;

    let mut layers: BTreeMap<String, LayerRanks> = BTreeMap::new();
    for layer in &model.layers {
        if let LayerKind::Conv { out_channels, .. } = layer.kind {
            let mut sums = vec![0u64; out_channels];
            for sample in &per_sample {
                let ranks = &sample[&layer.id];
                for (s, r) in sums.iter_mut().zip(ranks) {
                    *s += *r as u64;
                }
            }
            let ranks = sums
                .iter()
                .map(|&s| s as f32 / cfg.batch_size as f32)
                .collect();
            layers.insert(
                layer.id.clone(),
                LayerRanks {
                    ranks,
                    prunable: layer.prunable,
                },
            );
        }
    }
    Ok(RankReport {
        g: cfg.batch_size,
        rel_tol: cfg.rel_tol,
        seed: cfg.seed,
        layers,
    })
}

/// Per-layer keep/drop decisions plus derived kept counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    /// Keep-mask per conv layer (`true` = keep). Non-prunable conv layers
    /// carry all-keep masks.
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl PrunePlan {
    pub fn all_keep(model: &ModelGraph) -> PrunePlan {
        let mut masks = BTreeMap::new();
        for layer in &model.layers {
            if let LayerKind::Conv { out_channels, .. } = layer.kind {
                masks.insert(layer.id.clone(), vec![true; out_channels]);
            }
        }
        PrunePlan { masks }
    }

    pub fn kept_count(&self, layer: &str) -> Result<usize> {
        Ok(self.mask(layer)?.iter().filter(|&&k| k).count())
    }

    pub fn pruned_count(&self, layer: &str) -> Result<usize> {
        Ok(self.mask(layer)?.iter().filter(|&&k| !k).count())
    }

    pub fn mask(&self, layer: &str) -> Result<&[bool]> {
        self.masks
            .get(layer)
            .map(|m| m.as_slice())
            .ok_or_else(|| Error::UnknownLayer(layer.into()))
    }

    pub fn kept_indices(&self, layer: &str) -> Result<Vec<usize>> {
        Ok(self
            .mask(layer)?
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect())
    }

    pub fn kept_indices_map(&self) -> BTreeMap<String, Vec<usize>> {
        self.masks
            .keys()
            .map(|id| (id.clone(), self.kept_indices(id).expect("own key")))
            .collect()
    }

    pub fn is_all_keep(&self) -> bool {
        self.masks.values().all(|m| m.iter().all(|&k| k))
    }
}

/// Round-half-up of `ratio * n`, clamped to `[1, n]`.
fn kept_of_ratio(ratio: f64, n: usize) -> usize {
    (((ratio * n as f64) + 0.5).floor() as usize).clamp(1, n)
}

/// Build a keep-plan from a rank report and per-layer keep ratios.
///
/// Every prunable layer needs a ratio in `(0, 1]`; a layer keeps its
/// `round(ratio * n)` highest-average-rank filters (ties keep the lower
/// index). Ratios on non-prunable layers are only accepted at exactly 1.0.
pub fn make_plan(report: &RankReport, ratios: &BTreeMap<String, f64>) -> Result<PrunePlan> {
    for (id, ratio) in ratios {
        let lr = report
            .layers
            .get(id)
            .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
        if !(*ratio > 0.0 && *ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep ratio for `{id}` must lie in (0, 1], got {ratio} (a ratio of 0 keeps no filters)"
            )));
        }
        if !lr.prunable && *ratio != 1.0 {
            return Err(Error::NonPrunable(id.clone()));
        }
    }
    let mut masks = BTreeMap::new();
    for (id, lr) in &report.layers {
        let n = lr.ranks.len();
        let keep = if lr.prunable {
            let ratio = ratios.get(id).ok_or_else(|| {
                Error::InvalidArgument(format!("prunable layer `{id}` has no keep ratio"))
            })?;
            kept_of_ratio(*ratio, n)
        } else {
            n
        };
        let order = report.sorted_indices(id)?;
        let mut mask = vec![false; n];
        for &j in order.iter().take(keep) {
            mask[j] = true;
        }
        masks.insert(id.clone(), mask);
    }
    Ok(PrunePlan { masks })
}

const BACKBONE_KEEP: [f64; 5] = [0.792, 0.875, 0.878, 0.870, 1.0];
const HEAD_CLS_KEEP: [f64; 3] = [0.898, 0.539, 0.875];
const HEAD_REG_KEEP: [f64; 3] = [0.887, 0.566, 0.875];

fn is_reference_architecture(model: &ModelGraph) -> bool {
    let ids: Vec<&str> = model.layers.iter().map(|l| l.id.as_str()).collect();
    let expected = [
        "backbone.conv1",
        "backbone.bn1",
        "backbone.relu1",
        "backbone.pool1",
        "backbone.conv2",
        "backbone.bn2",
        "backbone.relu2",
        "backbone.pool2",
        "backbone.conv3",
        "backbone.bn3",
        "backbone.relu3",
        "backbone.conv4",
        "backbone.bn4",
        "backbone.relu4",
        "backbone.conv5",
        "neck.cls_z",
        "neck.cls_x",
        "neck.reg_z",
        "neck.reg_x",
        "corr.cls",
        "corr.reg",
        "head_cls.conv1",
        "head_cls.relu1",
        "head_cls.conv2",
        "head_cls.relu2",
        "head_cls.conv3",
        "head_cls.relu3",
        "head_cls.score",
        "head_cls.quality",
        "head_reg.conv1",
        "head_reg.relu1",
        "head_reg.conv2",
        "head_reg.relu2",
        "head_reg.conv3",
        "head_reg.relu3",
        "head_reg.offsets",
    ];
    ids == expected
}

/// The published per-layer keep ratios for the reference architecture:
/// backbone `(0.792, 0.875, 0.878, 0.870, 1.0)`, classification tower
/// `(0.898, 0.539, 0.875)`, regression tower `(0.887, 0.566, 0.875)`;
/// neck convs are kept whole.
pub fn paper_preset_ratios(model: &ModelGraph) -> Result<BTreeMap<String, f64>> {
    if !is_reference_architecture(model) {
        return Err(Error::InvalidArgument(
            "paper preset ratios only apply to the reference architecture".into(),
        ));
    }
    let mut ratios = BTreeMap::new();
    for (i, r) in BACKBONE_KEEP.iter().enumerate() {
        ratios.insert(format!("backbone.conv{}", i + 1), *r);
    }
    for (i, r) in HEAD_CLS_KEEP.iter().enumerate() {
        ratios.insert(format!("head_cls.conv{}", i + 1), *r);
    }
    for (i, r) in HEAD_REG_KEEP.iter().enumerate() {
        ratios.insert(format!("head_reg.conv{}", i + 1), *r);
    }
    for id in ["neck.cls_z", "neck.cls_x", "neck.reg_z", "neck.reg_x"] {
        ratios.insert(id.to_string(), 1.0);
    }
    Ok(ratios)
}

/// Per-layer keep-set overlap `|A ∩ B| / |A|` between two reports at the
/// same ratios, over prunable layers.
pub fn keep_set_overlap_per_layer(
    a: &RankReport,
    b: &RankReport,
    ratios: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>> {
    let plan_a = make_plan(a, ratios)?;
    let plan_b = make_plan(b, ratios)?;
    let mut out = BTreeMap::new();
    for (id, lr) in &a.layers {
        if !lr.prunable {
            continue;
        }
        let ka: BTreeSet<usize> = plan_a.kept_indices(id)?.into_iter().collect();
        let kb: BTreeSet<usize> = plan_b.kept_indices(id)?.into_iter().collect();
        if ka.is_empty() {
            continue;
        }
        let inter = ka.intersection(&kb).count();
        out.insert(id.clone(), inter as f64 / ka.len() as f64);
    }
    Ok(out)
}

/// Worst per-layer keep-set overlap between two reports at the same ratios.
pub fn keep_set_overlap(
    a: &RankReport,
    b: &RankReport,
    ratios: &BTreeMap<String, f64>,
) -> Result<f64> {
    Ok(keep_set_overlap_per_layer(a, b, ratios)?
        .values()
        .fold(1.0f64, |acc, v| acc.min(*v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv2d;
    use crate::model::{
        build_reference_model, toy_siamese, Branch, ConvWeights, LayerSpec, ModelMeta, Section,
        WeightStore,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report_of(ranks: &[(&str, Vec<f32>, bool)]) -> RankReport {
        RankReport {
            g: 4,
            rel_tol: DEFAULT_RANK_REL_TOL,
            seed: 0,
            layers: ranks
                .iter()
                .map(|(id, r, p)| {
                    (
                        id.to_string(),
                        LayerRanks {
                            ranks: r.clone(),
                            prunable: *p,
                        },
                    )
                })
                .collect(),
        }
    }

    fn identity_1x1_chain(h: usize, w: usize) -> ModelGraph {
        let mut weights = WeightStore::default();
        weights.convs.insert(
            "backbone.conv1".into(),
            ConvWeights {
                weight: Tensor::new([1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap(),
                bias: vec![0.0],
            },
        );
        ModelGraph {
            layers: vec![LayerSpec {
                id: "backbone.conv1".into(),
                kind: LayerKind::Conv {
                    in_channels: 3,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                section: Section::Backbone,
                branch: None,
                prunable: true,
                inputs: vec![],
            }],
            weights,
            meta: ModelMeta {
                template_size: h.min(w),
                search_size: h.max(w),
                total_stride: 1,
            },
        }
    }

    #[test]
    fn zero_filter_reports_rank_zero() {
        let mut model = toy_siamese(11);
        {
            let w = model.weights.convs.get_mut("backbone.conv2").unwrap();
            let [oc, ic, kh, kw] = w.weight.shape();
            let mut data = w.weight.data().to_vec();
            // zero filter 1 (weights and bias)
            let per_filter = ic * kh * kw;
            for v in &mut data[per_filter..2 * per_filter] {
                *v = 0.0;
            }
            w.weight = Tensor::new([oc, ic, kh, kw], data).unwrap();
            w.bias[1] = 0.0;
        }
        let cfg = CalibrationConfig {
            batch_size: 2,
            ..Default::default()
        };
        let report = calibrate_ranks(&model, &cfg).unwrap();
        assert_eq!(report.layers["backbone.conv2"].ranks[1], 0.0);
    }

    #[test]
    fn identity_filter_rank_is_min_extent() {
        let model = identity_1x1_chain(12, 12);
        let cfg = CalibrationConfig {
            batch_size: 1,
            seed: 5,
            ..Default::default()
        };
        let report = calibrate_ranks(&model, &cfg).unwrap();
        assert_eq!(report.layers["backbone.conv1"].ranks[0], 12.0);
    }

    #[test]
    fn calibration_matches_from_scratch_recomputation() {
        // toy 2-layer chain; recompute with tensor primitives only
        let mut weights = WeightStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let w1 = Tensor::from_fn([3, 3, 3, 3], |_, _, _, _| rng.gen_range(-0.5..0.5));
        let b1: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let w2 = Tensor::from_fn([2, 3, 3, 3], |_, _, _, _| rng.gen_range(-0.5..0.5));
        let b2: Vec<f32> = (0..2).map(|_| rng.gen_range(-0.1..0.1)).collect();
        weights.convs.insert(
            "backbone.conv1".into(),
            ConvWeights {
                weight: w1.clone(),
                bias: b1.clone(),
            },
        );
        weights.convs.insert(
            "backbone.conv2".into(),
            ConvWeights {
                weight: w2.clone(),
                bias: b2.clone(),
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
        let model = ModelGraph {
            layers: vec![
                conv("backbone.conv1", 3, 3, None),
                LayerSpec {
                    id: "backbone.relu1".into(),
                    kind: LayerKind::Relu,
                    section: Section::Backbone,
                    branch: None,
                    prunable: false,
                    inputs: vec!["backbone.conv1".into()],
                },
                conv("backbone.conv2", 3, 2, Some("backbone.relu1")),
            ],
            weights,
            meta: ModelMeta {
                template_size: 14,
                search_size: 14,
                total_stride: 1,
            },
        };
        let cfg = CalibrationConfig {
            batch_size: 4,
            seed: 9,
            ..Default::default()
        };
        let report = calibrate_ranks(&model, &cfg).unwrap();

        // independent recomputation
        let source = NoiseSource { seed: 9 };
        let mut sums1 = vec![0u32; 3];
        let mut sums2 = vec![0u32; 2];
        for t in 0..4 {
            let (_, search) = source.sample(t, 14, 14).unwrap();
            let o1 = conv2d(&search, &w1, &b1, 1, 0).unwrap();
            let o2 = conv2d(&relu(&o1), &w2, &b2, 1, 0).unwrap();
            for j in 0..3 {
                sums1[j] += matrix_rank(&o1.plane_matrix(0, j), cfg.rel_tol) as u32;
            }
            for j in 0..2 {
                sums2[j] += matrix_rank(&o2.plane_matrix(0, j), cfg.rel_tol) as u32;
            }
        }
        for j in 0..3 {
            assert_eq!(
                report.layers["backbone.conv1"].ranks[j],
                sums1[j] as f32 / 4.0
            );
        }
        for j in 0..2 {
            assert_eq!(
                report.layers["backbone.conv2"].ranks[j],
                sums2[j] as f32 / 4.0
            );
        }
    }

    #[test]
    fn make_plan_keeps_top_ranks() {
        let report = report_of(&[("l", vec![3.0, 1.0, 2.0], true)]);
        let ratios = [("l".to_string(), 2.0 / 3.0)].into_iter().collect();
        let plan = make_plan(&report, &ratios).unwrap();
        assert_eq!(plan.kept_indices("l").unwrap(), vec![0, 2]);
    }

    #[test]
    fn make_plan_tie_break_keeps_lower_indices() {
        let report = report_of(&[("l", vec![2.0, 2.0, 2.0, 2.0], true)]);
        let ratios = [("l".to_string(), 0.5)].into_iter().collect();
        let plan = make_plan(&report, &ratios).unwrap();
        assert_eq!(plan.kept_indices("l").unwrap(), vec![0, 1]);
    }

    #[test]
    fn make_plan_matches_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let n = rng.gen_range(2..=12);
            let ranks: Vec<f32> = (0..n).map(|_| rng.gen_range(0..=40) as f32 / 4.0).collect();
            let keep = rng.gen_range(1..=n);
            let report = report_of(&[("l", ranks.clone(), true)]);
            let ratios = [("l".to_string(), keep as f64 / n as f64)]
                .into_iter()
                .collect();
            let plan = make_plan(&report, &ratios).unwrap();
            let kept = plan.kept_indices("l").unwrap();
            let plan_objective: f64 = (0..n)
                .filter(|j| !kept.contains(j))
                .map(|j| ranks[j] as f64)
                .sum();
            // exhaustive subset enumeration over pruned sets
            let n_keep = plan.kept_count("l").unwrap();
            let n_prune = n - n_keep;
            let mut best = f64::INFINITY;
            for bits in 0u32..(1 << n) {
                if bits.count_ones() as usize != n_prune {
                    continue;
                }
                let obj: f64 = (0..n)
                    .filter(|j| bits & (1 << j) != 0)
                    .map(|j| ranks[j] as f64)
                    .sum();
                best = best.min(obj);
            }
            assert!(
                (plan_objective - best).abs() < 1e-9,
                "plan {plan_objective} vs exhaustive {best}"
            );
        }
    }

    #[test]
    fn make_plan_monotone_in_keep_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10;
        let ranks: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..8.0)).collect();
        let report = report_of(&[("l", ranks, true)]);
        let mut prev: BTreeSet<usize> = BTreeSet::new();
        for keep in 1..=n {
            let ratios = [("l".to_string(), keep as f64 / n as f64)]
                .into_iter()
                .collect();
            let plan = make_plan(&report, &ratios).unwrap();
            let cur: BTreeSet<usize> = plan.kept_indices("l").unwrap().into_iter().collect();
            assert!(prev.is_subset(&cur));
            prev = cur;
        }
    }

    #[test]
    fn kept_ranks_dominate_pruned_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let n = rng.gen_range(2..14);
            let ranks: Vec<f32> = (0..n).map(|_| rng.gen_range(0..24) as f32 / 4.0).collect();
            let report = report_of(&[("l", ranks.clone(), true)]);
            let keep = rng.gen_range(1..=n);
            let ratios = [("l".to_string(), keep as f64 / n as f64)]
                .into_iter()
                .collect();
            let plan = make_plan(&report, &ratios).unwrap();
            let mask = plan.mask("l").unwrap();
            let min_kept = mask
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(j, _)| ranks[j])
                .fold(f32::INFINITY, f32::min);
            for (j, &k) in mask.iter().enumerate() {
                if !k {
                    assert!(ranks[j] <= min_kept);
                }
            }
        }
    }

    #[test]
    fn make_plan_rejects_bad_ratios() {
        let report = report_of(&[("l", vec![1.0, 2.0], true), ("n", vec![1.0], false)]);
        let bad0: BTreeMap<String, f64> = [("l".to_string(), 0.0)].into_iter().collect();
        assert!(make_plan(&report, &bad0).is_err());
        let unknown: BTreeMap<String, f64> = [("l".to_string(), 0.5), ("x".to_string(), 0.5)]
            .into_iter()
            .collect();
        assert!(matches!(
            make_plan(&report, &unknown),
            Err(Error::UnknownLayer(_))
        ));
        let nonprunable: BTreeMap<String, f64> = [("l".to_string(), 0.5), ("n".to_string(), 0.5)]
            .into_iter()
            .collect();
        assert!(matches!(
            make_plan(&report, &nonprunable),
            Err(Error::NonPrunable(_))
        ));
        let missing: BTreeMap<String, f64> = BTreeMap::new();
        assert!(make_plan(&report, &missing).is_err());
    }

    #[test]
    fn scale_invariance_of_keep_sets() {
        let mut model = toy_siamese(12);
        let cfg = CalibrationConfig {
            batch_size: 2,
            seed: 3,
            ..Default::default()
        };
        let before = calibrate_ranks(&model, &cfg).unwrap();
        {
            let w = model.weights.convs.get_mut("backbone.conv1").unwrap();
            let scaled: Vec<f32> = w.weight.data().iter().map(|v| v * 8.0).collect();
            w.weight = Tensor::new(w.weight.shape(), scaled).unwrap();
            let bias: Vec<f32> = w.bias.iter().map(|v| v * 8.0).collect();
            w.bias = bias;
        }
        let after = calibrate_ranks(&model, &cfg).unwrap();
        // ranks of conv1 maps unchanged by positive scaling
        assert_eq!(
            before.layers["backbone.conv1"].ranks,
            after.layers["backbone.conv1"].ranks
        );
    }

    #[test]
    fn paper_preset_covers_reference_layers() {
        let model = build_reference_model(0.05).unwrap();
        let ratios = paper_preset_ratios(&model).unwrap();
        assert_eq!(ratios["backbone.conv1"], 0.792);
        assert_eq!(ratios["backbone.conv5"], 1.0);
        assert_eq!(ratios["head_cls.conv2"], 0.539);
        assert_eq!(ratios["head_reg.conv2"], 0.566);
        assert_eq!(ratios["neck.cls_z"], 1.0);
        assert_eq!(ratios.len(), 15);
    }

    #[test]
    fn paper_preset_rejects_non_reference_model() {
        let model = toy_siamese(13);
        assert!(paper_preset_ratios(&model).is_err());
    }

    #[test]
    fn report_round_trips_through_csv() {
        let model = toy_siamese(14);
        let cfg = CalibrationConfig {
            batch_size: 2,
            seed: 7,
            ..Default::default()
        };
        let report = calibrate_ranks(&model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranks.csv");
        report.save(&path).unwrap();
        let loaded = RankReport::load(&path).unwrap();
        assert_eq!(report, loaded);
    }

    #[test]
    fn folder_source_loads_and_cycles_images() {
        let dir = tempfile::tempdir().unwrap();
        for (i, tint) in [40u8, 200u8].iter().enumerate() {
            let img = image::RgbImage::from_fn(20, 16, |x, y| {
                image::Rgb([*tint, (x * 12) as u8, (y * 15) as u8])
            });
            img.save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        let source = FolderSource::new(dir.path()).unwrap();
        let (template, search) = source.sample(0, 8, 14).unwrap();
        assert_eq!(template.shape(), [1, 3, 8, 8]);
        assert_eq!(search.shape(), [1, 3, 14, 14]);
        assert!(search.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // index cycles over the two files; same index is deterministic
        let (_, s0) = source.sample(0, 8, 14).unwrap();
        let (_, s2) = source.sample(2, 8, 14).unwrap();
        assert_eq!(search, s0);
        assert_eq!(search, s2);
        let (_, s1) = source.sample(1, 8, 14).unwrap();
        assert_ne!(search, s1);

        // end to end through calibration on a toy model
        let model = toy_siamese(17);
        let cfg = CalibrationConfig {
            batch_size: 3,
            source: InputSource::ImageFolder(dir.path().to_path_buf()),
            ..Default::default()
        };
        let report = calibrate_ranks(&model, &cfg).unwrap();
        assert_eq!(report.layers.len(), model.conv_ids().len());
    }

    #[test]
    fn post_activation_mode_ranks_activated_maps() {
        // a filter whose map is entirely negative ranks 0 after relu but
        // full before it
        let mut weights = WeightStore::default();
        weights.convs.insert(
            "backbone.conv1".into(),
            ConvWeights {
                weight: Tensor::new([1, 3, 1, 1], vec![-1.0, 0.0, 0.0]).unwrap(),
                bias: vec![0.0],
            },
        );
        let model = ModelGraph {
            layers: vec![LayerSpec {
                id: "backbone.conv1".into(),
                kind: LayerKind::Conv {
                    in_channels: 3,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                section: Section::Backbone,
                branch: None,
                prunable: true,
                inputs: vec![],
            }],
            weights,
            meta: ModelMeta {
                template_size: 10,
                search_size: 10,
                total_stride: 1,
            },
        };
        // noise inputs are in [0, 1), so the negated channel is <= 0
        let pre = calibrate_ranks(
            &model,
            &CalibrationConfig {
                batch_size: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let post = calibrate_ranks(
            &model,
            &CalibrationConfig {
                batch_size: 1,
                post_activation: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(pre.layers["backbone.conv1"].ranks[0], 10.0);
        assert_eq!(post.layers["backbone.conv1"].ranks[0], 0.0);
    }

    #[test]
    fn folder_source_missing_dir_errors() {
        let cfg = CalibrationConfig {
            source: InputSource::ImageFolder(PathBuf::from("/nonexistent/dir")),
            ..Default::default()
        };
        let model = toy_siamese(15);
        assert!(matches!(
            calibrate_ranks(&model, &cfg),
            Err(Error::CalibrationSource(_))
        ));
    }

    #[test]
    fn ranks_bounded_by_map_extent() {
        let model = toy_siamese(16);
        let cfg = CalibrationConfig {
            batch_size: 2,
            ..Default::default()
        };
        let report = calibrate_ranks(&model, &cfg).unwrap();
        let shapes = model.infer_shapes().unwrap();
        let fused = model.fused_set();
        for (id, lr) in &report.layers {
            let layer = model.layer(id).unwrap();
            let ctx = if fused.contains(id) {
                crate::model::Ctx::Fused
            } else if layer.branch == Some(Branch::Template) {
                crate::model::Ctx::Template
            } else {
                crate::model::Ctx::Search
            };
            let shape = shapes[id].get(ctx).unwrap();
            let bound = shape[2].min(shape[3]) as f32;
            for r in &lr.ranks {
                assert!(*r >= 0.0 && *r <= bound, "{id}: rank {r} exceeds {bound}");
            }
        }
    }
}
