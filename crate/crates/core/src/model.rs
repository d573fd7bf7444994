//! The end-to-end forecaster: value/query/key towers, sequence-aware
//! attention, temporal alignment from `T` to `K` frames and an optional
//! residual refinement tower.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    anchor_combination, pseudo_autoregressive, score_matrix, select_anchors, AttentionConfig,
    MixMatrix, Strategy,
};
use crate::error::{Error, Result};
use crate::graph::{multigraph_for, PartitionedMultiGraph, SkeletonGraph};
use crate::layer::{validate_schedule, MgcnTower};
use crate::optim::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const VALUE_CHANNELS: [usize; 5] = [3, 64, 32, 64, 3];
pub const QUERY_KEY_CHANNELS: [usize; 6] = [3, 64, 32, 16, 16, 3];

fn default_anchor_count() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_value_channels() -> Vec<usize> {
    VALUE_CHANNELS.to_vec()
}
fn default_query_key_channels() -> Vec<usize> {
    QUERY_KEY_CHANNELS.to_vec()
}

/// Architecture hyperparameters. Every ablation axis is a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Observed frames `T`.
    pub input_frames: usize,
    /// Predicted frames `K`.
    pub output_frames: usize,
    /// Temporal span `L` of cross-frame edges.
    pub span: usize,
    /// Largest hop distance `D` with its own partition.
    pub max_hop: usize,
    pub strategy: Strategy,
    #[serde(default = "default_anchor_count")]
    pub anchor_count: usize,
    /// Score divisor; defaults to `sqrt(V)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_scale: Option<f64>,
    #[serde(default = "default_true")]
    pub refine: bool,
    #[serde(default = "default_value_channels")]
    pub value_channels: Vec<usize>,
    #[serde(default = "default_query_key_channels")]
    pub query_key_channels: Vec<usize>,
    #[serde(default = "default_value_channels")]
    pub refine_channels: Vec<usize>,
}

impl ModelConfig {
    /// Reference widths for the given strategy and sizes.
    pub fn new(
        input_frames: usize,
        output_frames: usize,
        span: usize,
        max_hop: usize,
        strategy: Strategy,
    ) -> Self {
        ModelConfig {
            input_frames,
            output_frames,
            span,
            max_hop,
            strategy,
            anchor_count: input_frames,
            score_scale: None,
            refine: true,
            value_channels: default_value_channels(),
            query_key_channels: default_query_key_channels(),
            refine_channels: default_value_channels(),
        }
    }

    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        self.value_channels = channels.to_vec();
        self.query_key_channels = channels.to_vec();
        self.refine_channels = channels.to_vec();
        self
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.input_frames == 0 {
            return Err(Error::config("model.input_frames", "must be at least 1"));
        }
        if self.output_frames == 0 {
            return Err(Error::config("model.output_frames", "must be at least 1"));
        }
        validate_schedule("model.value_channels", &self.value_channels)?;
        if self.strategy.uses_scores() {
            validate_schedule("model.query_key_channels", &self.query_key_channels)?;
        }
        if self.refine {
            validate_schedule("model.refine_channels", &self.refine_channels)?;
        }
        self.attention(joints).validate(self.input_frames)
    }

    pub fn attention(&self, joints: usize) -> AttentionConfig {
        AttentionConfig {
            strategy: self.strategy,
            anchor_count: self.anchor_count,
            scale: self.score_scale.unwrap_or((joints as f64).sqrt()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForecastOutput {
    /// `[batch, K, V, 3]`.
    pub predictions: Tensor,
    /// Attention output `[batch, T, V, 3]` before temporal alignment.
    pub intermediate: Tensor,
    /// Mixing weights, for the score-based strategies.
    pub mix: Option<MixMatrix>,
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    config: ModelConfig,
    skeleton: SkeletonGraph,
    params: ParamSet,
    v_tower: MgcnTower,
    q_tower: Option<MgcnTower>,
    k_tower: Option<MgcnTower>,
    tcn: ParamId,
    refine_tower: Option<MgcnTower>,
    input_graph: PartitionedMultiGraph,
    output_graph: PartitionedMultiGraph,
    attention: AttentionConfig,
}

impl ForecastModel {
    /// Builds and initializes a model; all configuration errors surface here.
    pub fn new(skeleton: SkeletonGraph, config: ModelConfig, seed: u64) -> Result<Self> {
        let joints = skeleton.joint_count();
        config.validate(joints)?;
        let (t, k) = (config.input_frames, config.output_frames);
        let input_graph = multigraph_for(&skeleton, t, config.span, config.max_hop)?;
        let output_graph = multigraph_for(&skeleton, k, config.span, config.max_hop)?;
        let parts = config.max_hop + 1;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let v_tower = MgcnTower::new(&mut params, "v_tower", &config.value_channels, parts, false, &mut rng)?;
        let (q_tower, k_tower) = if config.strategy.uses_scores() {
            let q = MgcnTower::new(&mut params, "q_tower", &config.query_key_channels, parts, false, &mut rng)?;
            let kt = MgcnTower::new(&mut params, "k_tower", &config.query_key_channels, parts, false, &mut rng)?;
            (Some(q), Some(kt))
        } else {
            (None, None)
        };
        let tcn = params.push("tcn", &[k, t], initial_alignment(k, t));
        let refine_tower = if config.refine {
            Some(MgcnTower::new(&mut params, "refine_tower", &config.refine_channels, parts, true, &mut rng)?)
        } else {
            None
        };
        let attention = config.attention(joints);
        Ok(ForecastModel {
            config,
            skeleton,
            params,
            v_tower,
            q_tower,
            k_tower,
            tcn,
            refine_tower,
            input_graph,
            output_graph,
            attention,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &SkeletonGraph {
        &self.skeleton
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn v_tower(&self) -> &MgcnTower {
        &self.v_tower
    }

    pub fn q_tower(&self) -> Option<&MgcnTower> {
        self.q_tower.as_ref()
    }

    pub fn k_tower(&self) -> Option<&MgcnTower> {
        self.k_tower.as_ref()
    }

    pub fn refine_tower(&self) -> Option<&MgcnTower> {
        self.refine_tower.as_ref()
    }

    pub fn tcn(&self) -> ParamId {
        self.tcn
    }

    pub fn input_graph(&self) -> &PartitionedMultiGraph {
        &self.input_graph
    }

    pub fn output_graph(&self) -> &PartitionedMultiGraph {
        &self.output_graph
    }

    pub fn attention(&self) -> &AttentionConfig {
        &self.attention
    }

    /// Exact learnable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    /// Forward pass with parameters bound by the caller (for training).
    pub fn forward(&self, bound: &Bound, x: &Tensor) -> Result<ForecastOutput> {
        let (t, v) = (self.config.input_frames, self.joint_count());
        let [b, xt, xv, 3] = *x.shape() else {
            return Err(Error::dim("forward", x.shape(), &[t, v, 3]));
        };
        if xt != t || xv != v {
            return Err(Error::dim("forward", x.shape(), &[b, t, v, 3]));
        }
        let as_poses = |h: Tensor| h.reshape(&[b, t, v, 3]);
        let values = as_poses(self.v_tower.forward(bound, x, &self.input_graph)?)?;

        let (intermediate, mix) = match self.attention.strategy {
            Strategy::PseudoAutoregressive => {
                let last = x.narrow(1, t - 1, 1)?.reshape(&[b, v, 3])?;
                (pseudo_autoregressive(&values, &last)?, None)
            }
            Strategy::Anchor | Strategy::Plain => {
                let (q_tower, k_tower) = self
                    .q_tower
                    .as_ref()
                    .zip(self.k_tower.as_ref())
                    .expect("score towers exist for score strategies");
                let q = as_poses(q_tower.forward(bound, x, &self.input_graph)?)?;
                let key = as_poses(k_tower.forward(bound, x, &self.input_graph)?)?;
                let mix = score_matrix(&q, &key, &self.attention)?;
                let anchors = select_anchors(&values, mix.anchor_count())?;
                (anchor_combination(&mix, &anchors)?, Some(mix))
            }
            Strategy::None => (values, None),
        };

        let mut predictions = temporal_align(&intermediate, bound.get(self.tcn))?;
        if let Some(refine) = &self.refine_tower {
            let k = self.config.output_frames;
            let correction = refine.forward(bound, &predictions, &self.output_graph)?;
            predictions = predictions.add(&correction.reshape(&[b, k, v, 3])?)?;
        }
        Ok(ForecastOutput {
            predictions,
            intermediate,
            mix,
        })
    }

    /// Inference with frozen parameters: `[batch, T, V, 3]` → `[batch, K, V, 3]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&self.params.bind_frozen(), x)?.predictions)
    }
}

/// Rows sum to one: mostly the matching attention frame (clamped to the
/// last one when `K > T`), plus a small uniform share.
fn initial_alignment(k: usize, t: usize) -> Vec<f64> {
    let mut w = vec![0.1 / t as f64; k * t];
    for row in 0..k {
        w[row * t + row.min(t - 1)] += 0.9;
    }
    w
}

/// Learned linear map over the time axis: `out[κ] = Σ_t tcn[κ, t] Z[t]`,
/// shared by all joints and coordinates.
pub fn temporal_align(z: &Tensor, tcn: &Tensor) -> Result<Tensor> {
    let [b, t, v, 3] = *z.shape() else {
        return Err(Error::dim("temporal_align", z.shape(), tcn.shape()));
    };
    let [k, tt] = *tcn.shape() else {
        return Err(Error::dim("temporal_align", z.shape(), tcn.shape()));
    };
    if tt != t {
        return Err(Error::dim("temporal_align", z.shape(), tcn.shape()));
    }
    tcn.matmul(&z.reshape(&[b, t, v * 3])?)?.reshape(&[b, k, v, 3])
}
