//! Shared fixtures for the criterion benches under `benches/`.

use mgcn_core::data::{make_windows, synth_kinematic};
use mgcn_core::{skeleton_preset, ForecastModel, ModelConfig, Strategy, SynthConfig, Tensor};

/// Model plus one batch of synthetic windows.
pub struct Fixture {
    pub model: ForecastModel,
    pub x: Tensor,
    pub y: Tensor,
}

pub fn fixture(skeleton: &str, frames: usize, batch: usize, strategy: Strategy) -> Fixture {
    let graph = skeleton_preset(skeleton).expect("known preset");
    let cfg = ModelConfig::new(frames, frames, 1, 2, strategy);
    let model = ForecastModel::new(graph.clone(), cfg, 1).expect("valid config");
    let seq = synth_kinematic(&SynthConfig {
        joints: graph.joint_count(),
        amplitude: 0.5,
        period: 20.0,
        frames: 2 * frames + batch,
        seed: 1,
        noise: 0.0,
        start_frame: 0,
    })
    .expect("synthetic sequence");
    let windows = make_windows(&[seq], &graph, frames, frames, 1).expect("windows");
    let idx: Vec<usize> = (0..batch).collect();
    let (x, y) = windows.batch(&idx);
    Fixture { model, x, y }
}
