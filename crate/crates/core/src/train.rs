//! MPJPE loss, the Adam training loop with step learning-rate decay, and
//! per-horizon evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::WindowSet;
use crate::model::ForecastModel;
use crate::optim::{adam_step, AdamState};
use crate::tensor::Tensor;

/// Mean over batch, frames and joints of the per-joint Euclidean error.
pub fn mpjpe_loss(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if pred.shape() != truth.shape() || pred.shape().last() != Some(&3) {
        return Err(Error::dim("mpjpe_loss", pred.shape(), truth.shape()));
    }
    Ok(pred.sub(truth)?.norm_last()?.mean())
}

fn default_decay_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epoch indices (0-based) at whose start the rate is multiplied by
    /// `lr_decay_factor`.
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Shuffle and batching seed. Run configs fill this from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl TrainConfig {
    /// The published schedule: 50 epochs, batch 256, rate 0.1 decaying at
    /// epochs 20, 35 and 45.
    pub fn reference() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            lr_initial: 0.1,
            lr_decay_epochs: vec![20, 35, 45],
            lr_decay_factor: 0.1,
            clip_norm: None,
            seed: 0,
        }
    }

    /// Small-batch defaults: same decay positions, rate 0.01, clipping at 1.
    pub fn desk(epochs: usize, batch_size: usize) -> Self {
        let mut decay: Vec<usize> = [20, 35, 45].map(|e| e * epochs / 50).into_iter().filter(|&e| e > 0).collect();
        decay.dedup();
        TrainConfig {
            epochs,
            batch_size,
            lr_initial: if batch_size < 64 { 0.01 } else { 0.1 },
            lr_decay_epochs: decay,
            lr_decay_factor: 0.1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::config("train.lr_initial", "must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::config("train.lr_decay_factor", "must be positive"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.lr_decay_epochs", "must be strictly increasing"));
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::config("train.lr_decay_epochs", "every entry must be below train.epochs"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr_initial * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|r| r.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.mean_loss)
    }
}

pub fn train(model: &mut ForecastModel, data: &WindowSet, config: &TrainConfig) -> Result<TrainLog> {
    train_with(model, data, config, |_| {})
}

/// Trains in place; `on_epoch` sees each record as it is produced.
pub fn train_with(
    model: &mut ForecastModel,
    data: &WindowSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    config.validate()?;
    check_dims(model, data)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = data.batch(batch);
            let bound = model.params().bind();
            let out = model.forward(&bound, &x)?;
            let loss = mpjpe_loss(&out.predictions, &y)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_index,
                    param_norm: model.params().l2_norm(),
                });
            }
            loss.backward()?;
            let mut grads = bound.gradients();
            if !grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_index,
                    param_norm: model.params().l2_norm(),
                });
            }
            if let Some(max) = config.clip_norm {
                grads.clip_global_norm(max);
            }
            adam_step(model.params_mut(), &grads, &mut adam, lr)?;
            total += value * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / data.len() as f64,
            lr,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(log)
}

fn check_dims(model: &ForecastModel, data: &WindowSet) -> Result<()> {
    let c = model.config();
    let want = [c.input_frames, c.output_frames, model.joint_count()];
    let got = [data.input_frames, data.output_frames, data.joint_count()];
    if want != got {
        return Err(Error::dim("dataset", &got, &want));
    }
    Ok(())
}

/// Mean per-joint error at individual predicted frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// 1-based frame offsets into the prediction.
    pub horizons: Vec<usize>,
    pub overall: BTreeMap<usize, f64>,
    pub per_action: BTreeMap<String, BTreeMap<usize, f64>>,
    pub windows: usize,
}

impl EvalReport {
    /// Horizon columns (milliseconds at `rate`), one row per action, then the
    /// average and any extra named rows.
    pub fn to_table(&self, rate: f64, extra: &[(&str, &EvalReport)]) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "msec");
        for &h in &self.horizons {
            let _ = write!(out, "{:>10}", format!("{}", (h as f64 * 1000.0 / rate).round()));
        }
        out.push('\n');
        let mut row = |name: &str, values: &BTreeMap<usize, f64>| {
            let _ = write!(out, "{name:<16}");
            for h in &self.horizons {
                let _ = write!(out, "{:>10.4}", values.get(h).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        };
        for (action, values) in &self.per_action {
            row(action, values);
        }
        row("average", &self.overall);
        for (name, report) in extra {
            row(name, &report.overall);
        }
        out
    }
}

/// Evaluates any predictor mapping `[n, T, V, 3]` to `[n, K, V, 3]`.
pub fn evaluate_with(
    data: &WindowSet,
    horizons: &[usize],
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalReport> {
    let k = data.output_frames;
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > k) {
        return Err(Error::HorizonOutOfRange { horizon: h, max: k });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = data.joint_count();
    let frame = v * 3;
    let mut sums: BTreeMap<Option<&str>, (Vec<f64>, usize)> = BTreeMap::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let (x, y) = data.batch(chunk);
        let pred = predict(&x)?;
        if pred.shape() != y.shape() {
            return Err(Error::dim("evaluate", pred.shape(), y.shape()));
        }
        for (n, &wi) in chunk.iter().enumerate() {
            let entry = sums
                .entry(data.windows[wi].label.as_deref())
                .or_insert_with(|| (vec![0.0; horizons.len()], 0));
            entry.1 += 1;
            for (slot, &h) in entry.0.iter_mut().zip(horizons) {
                let at = (n * k + h - 1) * frame;
                let p = &pred.data()[at..at + frame];
                let t = &y.data()[at..at + frame];
                *slot += joint_error(p, t);
            }
        }
    }
    let to_map = |s: &[f64], n: usize| -> BTreeMap<usize, f64> {
        horizons.iter().zip(s).map(|(&h, &e)| (h, e / n as f64)).collect()
    };
    let mut total = vec![0.0; horizons.len()];
    let mut per_action = BTreeMap::new();
    for (label, (s, n)) in &sums {
        for (t, x) in total.iter_mut().zip(s) {
            *t += x;
        }
        if let Some(label) = label {
            per_action.insert(label.to_string(), to_map(s, *n));
        }
    }
    Ok(EvalReport {
        horizons: horizons.to_vec(),
        overall: to_map(&total, data.len()),
        per_action,
        windows: data.len(),
    })
}

/// Mean over joints of the Euclidean distance between two flat `[V, 3]` poses.
fn joint_error(pred: &[f64], truth: &[f64]) -> f64 {
    let joints = pred.len() / 3;
    pred.chunks_exact(3)
        .zip(truth.chunks_exact(3))
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt())
        .sum::<f64>()
        / joints as f64
}

pub fn evaluate(model: &ForecastModel, data: &WindowSet, horizons: &[usize]) -> Result<EvalReport> {
    check_dims(model, data)?;
    let frozen = model.params().bind_frozen();
    evaluate_with(data, horizons, |x| Ok(model.forward(&frozen, x)?.predictions))
}

/// Repeats the last observed frame `output_frames` times.
pub fn zero_velocity_baseline(x: &Tensor, output_frames: usize) -> Result<Tensor> {
    let [b, t, v, 3] = *x.shape() else {
        return Err(Error::dim("zero_velocity_baseline", x.shape(), &[0, 0, 0, 3]));
    };
    if t == 0 {
        return Err(Error::dim("zero_velocity_baseline", x.shape(), &[b, 1, v, 3]));
    }
    let frame = v * 3;
    let mut out = Vec::with_capacity(b * output_frames * frame);
    for n in 0..b {
        let at = (n * t + t - 1) * frame;
        let last = &x.data()[at..at + frame];
        for _ in 0..output_frames {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(out, &[b, output_frames, v, 3])
}

pub fn evaluate_baseline(data: &WindowSet, horizons: &[usize]) -> Result<EvalReport> {
    evaluate_with(data, horizons, |x| zero_velocity_baseline(x, data.output_frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, skeleton_preset, PoseSequence};

    #[test]
    fn loss_cases() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 1, 1, 3]).unwrap();
        assert_eq!(mpjpe_loss(&a, &a).unwrap().item(), 0.0);
        let b = Tensor::new(vec![4.0, 6.0, 3.0], &[1, 1, 1, 3]).unwrap();
        assert_eq!(mpjpe_loss(&a, &b).unwrap().item(), 5.0);
        assert!(mpjpe_loss(&a, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::reference();
        let trace: Vec<f64> = [0, 19, 20, 34, 35, 44, 45, 49].iter().map(|&e| cfg.lr_at(e)).collect();
        let want = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001, 0.0001, 0.0001];
        for (a, b) in trace.iter().zip(want) {
            assert!((a - b).abs() < 1e-15 * b.max(1.0), "{trace:?}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::reference();
        assert!(cfg.validate().is_ok());
        cfg.lr_decay_epochs = vec![35, 20];
        assert!(cfg.validate().is_err());
        cfg.lr_decay_epochs = vec![20, 50];
        assert!(cfg.validate().is_err());
        let desk = TrainConfig::desk(50, 32);
        assert_eq!(desk.lr_initial, 0.01);
        assert_eq!(desk.lr_decay_epochs, vec![20, 35, 45]);
    }

    fn linear_motion(step: [f64; 3], frames: usize) -> PoseSequence {
        let coords = (0..frames)
            .flat_map(|f| [step[0] * f as f64, step[1] * f as f64, step[2] * f as f64, 1.0, 1.0, 1.0])
            .collect::<Vec<_>>();
        // joint 1 stays put, joint 0 moves
        PoseSequence::new(2, coords, 25.0, Some("linear".into())).unwrap()
    }

    #[test]
    fn baseline_error_grows_linearly() {
        let s = linear_motion([3.0, 0.0, 4.0], 30);
        let ws = make_windows(&[s], &skeleton_preset("chain_2").unwrap(), 5, 6, 1).unwrap();
        let r = evaluate_baseline(&ws, &[1, 2, 6]).unwrap();
        // joint 0 drifts 5 per frame, joint 1 is static: mean over joints is 2.5 h.
        for h in [1, 2, 6] {
            assert!((r.overall[&h] - 2.5 * h as f64).abs() < 1e-12);
        }
        assert_eq!(r.per_action["linear"], r.overall);
        assert!(matches!(
            evaluate_baseline(&ws, &[7]),
            Err(Error::HorizonOutOfRange { horizon: 7, max: 6 })
        ));
    }

    #[test]
    fn table_layout() {
        let s = linear_motion([1.0, 0.0, 0.0], 20);
        let ws = make_windows(&[s], &skeleton_preset("chain_2").unwrap(), 4, 4, 1).unwrap();
        let r = evaluate_baseline(&ws, &[2, 4]).unwrap();
        let table = r.to_table(25.0, &[("zero-velocity", &r)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("80") && lines[0].contains("160"));
        assert!(lines[3].starts_with("zero-velocity"));
    }
}
