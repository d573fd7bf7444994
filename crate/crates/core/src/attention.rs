//! Sequence-aware attention.
//!
//! Scores are computed separately for each spatial dimension `d`:
//! `s_d(i, k) = Σ_v Q[i, v, d] · K[t_k, v, d] / scale`, where `t_k` runs over
//! the anchor frames. A masked softmax over `k` turns each of the three
//! score matrices into row-stochastic mixing weights, so every output
//! coordinate is a convex combination of anchor coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Last observed frame plus a running sum of predicted offsets.
    PseudoAutoregressive,
    /// Causally masked convex combination of anchor poses.
    Anchor,
    /// Unmasked attention over all frames.
    Plain,
    /// Tower output used directly.
    None,
}

impl Strategy {
    pub fn code(self) -> u8 {
        match self {
            Strategy::None => 0,
            Strategy::Plain => 1,
            Strategy::PseudoAutoregressive => 2,
            Strategy::Anchor => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Strategy::None,
            1 => Strategy::Plain,
            2 => Strategy::PseudoAutoregressive,
            3 => Strategy::Anchor,
            _ => return None,
        })
    }

    /// Whether query/key towers are needed.
    pub fn uses_scores(self) -> bool {
        matches!(self, Strategy::Anchor | Strategy::Plain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub strategy: Strategy,
    pub anchor_count: usize,
    /// Divisor applied to raw scores.
    pub scale: f64,
}

impl AttentionConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("model.score_scale", "must be a positive finite number"));
        }
        if self.strategy == Strategy::Anchor && !(1..=frames).contains(&self.anchor_count) {
            return Err(Error::config(
                "model.anchor_count",
                format!("must lie in 1..={frames} for the anchor strategy"),
            ));
        }
        Ok(())
    }

    /// Number of frames mixed per output row.
    pub fn mixed_frames(&self, frames: usize) -> usize {
        match self.strategy {
            Strategy::Anchor => self.anchor_count,
            _ => frames,
        }
    }

    /// The causal mask applies only when every input frame is an anchor.
    pub fn is_causal(&self, frames: usize) -> bool {
        self.strategy == Strategy::Anchor && self.anchor_count == frames
    }
}

/// Row-stochastic mixing weights, one `T x n_a` matrix per spatial
/// dimension: `weights` has shape `[batch, 3, T, n_a]`.
#[derive(Debug, Clone)]
pub struct MixMatrix {
    pub weights: Tensor,
    pub mask: Mask,
}

impl MixMatrix {
    pub fn anchor_count(&self) -> usize {
        self.weights.shape()[3]
    }

    /// Weights of output frame `i` in spatial dimension `d` of batch item `b`.
    pub fn row(&self, b: usize, d: usize, i: usize) -> &[f64] {
        let s = self.weights.shape();
        let (t, na) = (s[2], s[3]);
        let start = ((b * 3 + d) * t + i) * na;
        &self.weights.data()[start..start + na]
    }
}

/// `out[i] = X_T + Σ_{k<=i} offset_k`, i.e. lower-triangular ones times the
/// offsets, broadcast-added to the last observed frame.
pub fn pseudo_autoregressive(offsets: &Tensor, last_frame: &Tensor) -> Result<Tensor> {
    let [b, t, v, 3] = *offsets.shape() else {
        return Err(Error::dim("pseudo_autoregressive", offsets.shape(), &[0, 0, 0, 3]));
    };
    if last_frame.shape() != [b, v, 3] {
        return Err(Error::dim("pseudo_autoregressive", offsets.shape(), last_frame.shape()));
    }
    let lower: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |k| if k <= i { 1.0 } else { 0.0 }))
        .collect();
    let s = Tensor::new(lower, &[t, t])?;
    let cumulative = s.matmul(&offsets.reshape(&[b, t, v * 3])?)?;
    cumulative
        .add(&last_frame.reshape(&[b, 1, v * 3])?)?
        .reshape(&[b, t, v, 3])
}

/// Per-dimension masked-softmax mixing weights from query and key poses.
pub fn score_matrix(query: &Tensor, key: &Tensor, config: &AttentionConfig) -> Result<MixMatrix> {
    let [b, t, _, 3] = *query.shape() else {
        return Err(Error::dim("score_matrix", query.shape(), &[0, 0, 0, 3]));
    };
    if key.shape() != query.shape() {
        return Err(Error::dim("score_matrix", query.shape(), key.shape()));
    }
    config.validate(t)?;
    let na = config.mixed_frames(t);
    let key = select_anchors(key, na)?;
    let scores = query
        .permute(&[0, 3, 1, 2])?
        .matmul(&key.permute(&[0, 3, 2, 1])?)?
        .scale(1.0 / config.scale);
    let mask = if config.is_causal(t) {
        Mask::causal(&[b, 3], t, na)
    } else {
        Mask::full(&[b, 3, t, na])
    };
    let weights = scores.masked_softmax(&mask, 3)?;
    Ok(MixMatrix { weights, mask })
}

/// The last `count` frames of a `[batch, T, V, 3]` pose tensor.
pub fn select_anchors(poses: &Tensor, count: usize) -> Result<Tensor> {
    let t = poses.shape().get(1).copied().unwrap_or(0);
    if count == 0 || count > t {
        return Err(Error::dim("select_anchors", poses.shape(), &[count]));
    }
    poses.narrow(1, t - count, count)
}

/// `out[i, v, d] = Σ_k λ_d(i, k) anchor[k, v, d]`.
pub fn anchor_combination(mix: &MixMatrix, anchors: &Tensor) -> Result<Tensor> {
    let w = mix.weights.shape();
    match *anchors.shape() {
        [b, na, _, 3] if b == w[0] && na == w[3] => {}
        _ => return Err(Error::dim("anchor_combination", w, anchors.shape())),
    }
    mix.weights
        .matmul(&anchors.permute(&[0, 3, 1, 2])?)?
        .permute(&[0, 2, 3, 1])
}

/// Unmasked attention with `values` mixed directly over all frames.
pub fn plain_attention(query: &Tensor, key: &Tensor, values: &Tensor, scale: f64) -> Result<Tensor> {
    let config = AttentionConfig {
        strategy: Strategy::Plain,
        anchor_count: 0,
        scale,
    };
    let mix = score_matrix(query, key, &config)?;
    anchor_combination(&mix, values)
}
