//! Learned-parameter storage: a named-tensor registry validated against the
//! manifest implied by a [`ModelConfig`].
//!
//! The bundle holds every tensor of the point extractor, the image
//! extractor, and the two alignment-refinement parameter sets. Serialization
//! of the registry lives in the companion CLI crate; this module defines the
//! manifest (names, shapes, order) and the seeded initialization used for
//! untrained runs.

use std::collections::HashMap;

use super::ssm::softplus_inverse;
use super::SeqModelError;
use crate::rng::{seeded_rng, uniform_init};

/// Point-extractor dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointsConfig {
    /// Neighbors per token (self included).
    pub k: usize,
    /// Token embedding width.
    pub embed: usize,
    /// SSM state dimension.
    pub state: usize,
    /// Number of scan blocks.
    pub blocks: usize,
    /// Sinusoidal position-embedding width (divisible by 6, zero-padded up
    /// to `embed` when added).
    pub pos_dim: usize,
}

/// Image-extractor dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbConfig {
    /// Input image side length (square input).
    pub input: usize,
    /// First-stage patch side; later stages downsample by 2.
    pub patch: usize,
    /// Channel width per stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// SSM state dimension inside the grid scans.
    pub state: usize,
}

/// Alignment-refinement dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Log-distance buckets for the geometric attention bias.
    pub buckets: usize,
    /// Bucket range in meters.
    pub min_dist: f64,
    pub max_dist: f64,
}

impl AlignerConfig {
    pub fn validate(&self, channels: usize) -> Result<(), SeqModelError> {
        if channels % self.heads != 0 {
            return Err(SeqModelError::BadDimension(format!(
                "feature dim {} not divisible by {} heads",
                channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Full architecture description. The default is the desk-scale
/// configuration: 256-channel features, 2048-point clouds, 224x224 images.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Output feature channels, shared by both extractors.
    pub feature_dim: usize,
    /// Points per resampled cloud.
    pub cloud_points: usize,
    pub points: PointsConfig,
    pub rgb: RgbConfig,
    pub aligner: AlignerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 256,
            cloud_points: 2048,
            points: PointsConfig { k: 16, embed: 64, state: 16, blocks: 4, pos_dim: 48 },
            rgb: RgbConfig {
                input: 224,
                patch: 4,
                widths: vec![32, 64, 128, 256],
                blocks_per_stage: 2,
                state: 16,
            },
            aligner: AlignerConfig {
                blocks: 3,
                heads: 4,
                buckets: 16,
                min_dist: 1e-3,
                max_dist: 1.0,
            },
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast tests: same structure, tiny widths.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 32,
            cloud_points: 64,
            points: PointsConfig { k: 4, embed: 24, state: 4, blocks: 2, pos_dim: 24 },
            rgb: RgbConfig {
                input: 32,
                patch: 4,
                widths: vec![8, 16],
                blocks_per_stage: 1,
                state: 4,
            },
            aligner: AlignerConfig {
                blocks: 2,
                heads: 4,
                buckets: 16,
                min_dist: 1e-3,
                max_dist: 1.0,
            },
        }
    }

    pub fn token_dim(&self) -> usize {
        3 * self.points.k + 3
    }

    /// Side length of the stage-0 grid, which is also the fusion grid.
    pub fn rgb_grid(&self) -> usize {
        self.rgb.input / self.rgb.patch
    }

    pub fn rgb_fused_channels(&self) -> usize {
        self.rgb.widths.iter().sum()
    }
}

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a tensor is filled when building an untrained bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Seeded uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    Constant(f32),
    /// SSM decay diagonal: entry `(ch, s)` gets `-(1 + s)`.
    NegativeRamp { state: usize },
}

/// Manifest entry: name, shape, and untrained initialization.
struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear(name: String, out_dim: usize, in_dim: usize) -> Entry {
    Entry { name, shape: vec![out_dim, in_dim], init: Init::Uniform { fan_in: in_dim } }
}

fn bias(name: String, dim: usize) -> Entry {
    Entry { name, shape: vec![dim], init: Init::Zeros }
}

/// The per-block selective-scan tensors under a given prefix.
fn ssm_entries(prefix: &str, embed: usize, state: usize, delta0: f64) -> Vec<Entry> {
    vec![
        Entry {
            name: format!("{prefix}.ssm.a"),
            shape: vec![embed, state],
            init: Init::NegativeRamp { state },
        },
        linear(format!("{prefix}.ssm.delta_w"), embed, embed),
        Entry {
            name: format!("{prefix}.ssm.delta_b"),
            shape: vec![embed],
            init: Init::Constant(softplus_inverse(delta0) as f32),
        },
        linear(format!("{prefix}.ssm.b_w"), state, embed),
        bias(format!("{prefix}.ssm.b_b"), state),
        linear(format!("{prefix}.ssm.c_w"), state, embed),
        bias(format!("{prefix}.ssm.c_b"), state),
        Entry { name: format!("{prefix}.ssm.d"), shape: vec![embed], init: Init::Ones },
    ]
}

fn scan_block_entries(prefix: &str, width: usize, state: usize) -> Vec<Entry> {
    let mut entries = vec![
        Entry { name: format!("{prefix}.norm"), shape: vec![width], init: Init::Ones },
        linear(format!("{prefix}.in_w"), width, width),
        bias(format!("{prefix}.in_b"), width),
        linear(format!("{prefix}.gate_w"), width, width),
        bias(format!("{prefix}.gate_b"), width),
    ];
    entries.extend(ssm_entries(prefix, width, state, 0.01));
    entries.push(linear(format!("{prefix}.out_w"), width, width));
    entries.push(bias(format!("{prefix}.out_b"), width));
    entries
}

fn attention_entries(prefix: &str, channels: usize, heads: usize, buckets: usize) -> Vec<Entry> {
    let mut entries = Vec::new();
    for part in ["self", "cross"] {
        entries.push(Entry {
            name: format!("{prefix}.{part}.norm"),
            shape: vec![channels],
            init: Init::Ones,
        });
        for w in ["wq", "wk", "wv", "wo"] {
            entries.push(linear(format!("{prefix}.{part}.{w}"), channels, channels));
        }
    }
    entries.push(Entry {
        name: format!("{prefix}.self.bias"),
        shape: vec![heads, buckets],
        init: Init::Zeros,
    });
    entries
}

fn manifest(config: &ModelConfig) -> Vec<Entry> {
    let mut entries = Vec::new();
    let c = config.feature_dim;

    // Point extractor.
    let p = &config.points;
    entries.push(linear("points.embed.w".into(), p.embed, config.token_dim()));
    entries.push(bias("points.embed.b".into(), p.embed));
    for b in 0..p.blocks {
        entries.extend(scan_block_entries(&format!("points.block{b}"), p.embed, p.state));
    }
    entries.push(linear("points.head.w".into(), c, p.embed));
    entries.push(bias("points.head.b".into(), c));

    // Image extractor.
    let r = &config.rgb;
    for (s, &width) in r.widths.iter().enumerate() {
        let in_dim = if s == 0 {
            3 * r.patch * r.patch
        } else {
            4 * r.widths[s - 1]
        };
        entries.push(linear(format!("rgb.stage{s}.patch.w"), width, in_dim));
        entries.push(bias(format!("rgb.stage{s}.patch.b"), width));
        for b in 0..r.blocks_per_stage {
            entries.extend(scan_block_entries(
                &format!("rgb.stage{s}.block{b}"),
                width,
                r.state,
            ));
        }
    }
    entries.push(linear("rgb.fuse.w".into(), c, config.rgb_fused_channels()));
    entries.push(bias("rgb.fuse.b".into(), c));

    // The two alignment-refinement parameter sets ("initial" for the first
    // iteration, "iterative" for the rest; weights are not shared).
    let a = &config.aligner;
    for set in ["initial", "iterative"] {
        for b in 0..a.blocks {
            entries.extend(attention_entries(
                &format!("align.{set}.block{b}"),
                c,
                a.heads,
                a.buckets,
            ));
        }
    }
    entries
}

/// Expected manifest of `(name, shape)` pairs for a configuration, in
/// serialization order.
pub fn expected_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    manifest(config)
        .into_iter()
        .map(|e| (e.name, e.shape))
        .collect()
}

/// Immutable registry of every learned tensor. Shareable across threads.
#[derive(Debug, Clone)]
pub struct WeightBundle {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl WeightBundle {
    /// Untrained bundle: every projection weight drawn seeded-uniform in
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, structural tensors set to their
    /// fixed starting points (negative decay ramp, unit norms and skips,
    /// softplus bias for an initial step size of 0.01).
    pub fn seeded(config: ModelConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut tensors = Vec::new();
        for entry in manifest(&config) {
            let len: usize = entry.shape.iter().product();
            let data = match entry.init {
                Init::Uniform { fan_in } => uniform_init(&mut rng, fan_in, len),
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Constant(v) => vec![v; len],
                Init::NegativeRamp { state } => {
                    let mut data = Vec::with_capacity(len);
                    for _ch in 0..len / state {
                        for s in 0..state {
                            data.push(-(1.0 + s as f32));
                        }
                    }
                    data
                }
            };
            tensors.push(Tensor { name: entry.name, shape: entry.shape, data });
        }
        Self::from_tensors(config, tensors).expect("seeded bundle matches its own manifest")
    }

    /// Build from externally supplied tensors, validating names, shapes,
    /// order, and finiteness against the configuration's manifest.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<Tensor>,
    ) -> Result<Self, SeqModelError> {
        let expected = expected_manifest(&config);
        if tensors.len() != expected.len() {
            return Err(SeqModelError::BadWeights(format!(
                "bundle holds {} tensors, manifest expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        let mut index = HashMap::with_capacity(tensors.len());
        for (i, (tensor, (name, shape))) in tensors.iter().zip(&expected).enumerate() {
            if &tensor.name != name {
                return Err(SeqModelError::BadWeights(format!(
                    "tensor {i} is `{}`, manifest expects `{name}`",
                    tensor.name
                )));
            }
            if &tensor.shape != shape {
                return Err(SeqModelError::BadWeights(format!(
                    "tensor `{}` has shape {:?}, manifest expects {:?}",
                    tensor.name, tensor.shape, shape
                )));
            }
            if tensor.data.len() != tensor.len() {
                return Err(SeqModelError::BadWeights(format!(
                    "tensor `{}` holds {} values for shape {:?}",
                    tensor.name,
                    tensor.data.len(),
                    tensor.shape
                )));
            }
            if !tensor.data.iter().all(|v| v.is_finite()) {
                return Err(SeqModelError::BadWeights(format!(
                    "tensor `{}` contains non-finite values",
                    tensor.name
                )));
            }
            index.insert(tensor.name.clone(), i);
        }
        Ok(WeightBundle { config, tensors, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("tensor `{name}` not in bundle"));
        &self.tensors[i]
    }

    pub(crate) fn slice(&self, name: &str) -> &[f32] {
        &self.get(name).data
    }
}
