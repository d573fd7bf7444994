//! Multi-graph convolution: `H' = σ(Σ_k Â_k H W_k)` and stacks thereof.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::PartitionedMultiGraph;
use crate::optim::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MgcnLayer {
    /// One `in_channels x out_channels` matrix per graph partition.
    pub weights: Vec<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub apply_activation: bool,
}

impl MgcnLayer {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        partitions: usize,
        in_channels: usize,
        out_channels: usize,
        apply_activation: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = (0..partitions)
            .map(|k| params.push_glorot(format!("{prefix}.w{k}"), in_channels, out_channels, rng))
            .collect();
        MgcnLayer {
            weights,
            in_channels,
            out_channels,
            apply_activation,
        }
    }

    /// `h` is `[batch, nodes, in_channels]`; the result is `[batch, nodes, out_channels]`.
    pub fn forward(&self, bound: &Bound, h: &Tensor, graph: &PartitionedMultiGraph) -> Result<Tensor> {
        let shape = h.shape();
        if shape.len() != 3 || shape[1] != graph.node_count() || shape[2] != self.in_channels {
            return Err(Error::dim(
                "layer_forward",
                shape,
                &[graph.node_count(), self.in_channels],
            ));
        }
        if self.weights.len() != graph.partition_count() {
            return Err(Error::dim(
                "layer_forward",
                &[self.weights.len()],
                &[graph.partition_count()],
            ));
        }
        let mut acc: Option<Tensor> = None;
        for (op, &w) in graph.sparse().iter().zip(&self.weights) {
            let term = h.propagate(op)?.matmul(bound.get(w))?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        let out = acc.expect("at least one partition");
        Ok(if self.apply_activation { out.tanh() } else { out })
    }
}

/// Stacked layers whose widths follow a channel schedule, coordinates in
/// and coordinates out. The last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MgcnTower {
    pub layers: Vec<MgcnLayer>,
    pub channels: Vec<usize>,
}

pub fn validate_schedule(field: &str, channels: &[usize]) -> Result<()> {
    if channels.len() < 2 {
        return Err(Error::config(field, "needs at least two channel widths"));
    }
    if channels[0] != 3 || channels[channels.len() - 1] != 3 {
        return Err(Error::config(field, "must start and end with 3 (x, y, z)"));
    }
    if channels.contains(&0) {
        return Err(Error::config(field, "channel widths must be positive"));
    }
    Ok(())
}

impl MgcnTower {
    /// With `zero_last`, the final layer starts at zero so the tower's
    /// initial output is exactly zero.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        channels: &[usize],
        partitions: usize,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate_schedule(prefix, channels)?;
        let depth = channels.len() - 1;
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let layer = MgcnLayer::new(
                    params,
                    &format!("{prefix}.layer{l}"),
                    partitions,
                    w[0],
                    w[1],
                    l + 1 < depth,
                    rng,
                );
                if zero_last && l + 1 == depth {
                    for &id in &layer.weights {
                        params.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                layer
            })
            .collect();
        Ok(MgcnTower {
            layers,
            channels: channels.to_vec(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Accepts `[batch, frames, joints, 3]` or `[batch, nodes, 3]`; returns
    /// `[batch, nodes, 3]`.
    pub fn forward(&self, bound: &Bound, x: &Tensor, graph: &PartitionedMultiGraph) -> Result<Tensor> {
        let mut h = match x.shape() {
            [b, t, v, 3] => x.reshape(&[*b, t * v, 3])?,
            [_, _, 3] => x.clone(),
            other => return Err(Error::dim("tower_forward", other, &[graph.node_count(), 3])),
        };
        for layer in &self.layers {
            h = layer.forward(bound, &h, graph)?;
        }
        Ok(h)
    }
}
