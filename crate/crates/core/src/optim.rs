//! Named parameter storage and the Adam update rule.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Ordered collection of learnable arrays. Declaration order is the
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        self.params.push(Parameter {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight matrix: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn push_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.push(name, &[fan_in, fan_out], values)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total learnable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| &p.values)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Leaf tensors that collect gradients on backward.
    pub fn bind(&self) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| Tensor::parameter(p.values.clone(), &p.shape).expect("shape checked on push"))
                .collect(),
        )
    }

    /// Constant tensors for inference; no gradient bookkeeping.
    pub fn bind_frozen(&self) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| Tensor::new(p.values.clone(), &p.shape).expect("shape checked on push"))
                .collect(),
        )
    }
}

/// Parameters materialized as tensors for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Tensor>);

impl Bound {
    /// Tensors in parameter declaration order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Bound(tensors)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    /// Snapshot of gradients after backward, aligned with the parameter set.
    pub fn gradients(&self) -> Gradients {
        Gradients(self.0.iter().map(Tensor::grad).collect())
    }
}

/// Per-parameter gradients; `None` where backward never reached a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            self.0
                .iter_mut()
                .flatten()
                .flatten()
                .for_each(|g| *g *= s);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().flatten().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        AdamState {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place. Gradients are not modified.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.0.len() != params.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(Error::dim(
            "adam_step",
            &[params.len()],
            &[grads.0.len(), state.first_moment.len()],
        ));
    }
    for (p, (g, (m, v))) in params.iter().zip(
        grads
            .0
            .iter()
            .zip(state.first_moment.iter().zip(&state.second_moment)),
    ) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::UninitializedGradient(p.name.clone()))?;
        if g.len() != p.numel() || m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::dim("adam_step", &p.shape, &[g.len(), m.len()]));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(&grads.0).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        let g = g.as_ref().expect("checked above");
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("x", &[1], vec![x]);
        ps
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut ps = ParamSet::new();
        ps.push("w", &[2, 2], vec![1.0, -2.0, 3.5, 0.25]);
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let g = Gradients(vec![Some(vec![0.0; 4])]);
        for _ in 0..5 {
            adam_step(&mut ps, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(ps, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps).
        for g in [0.5, -3.0, 1e3] {
            let mut ps = single(1.0);
            let mut st = AdamState::new(&ps);
            adam_step(&mut ps, &Gradients(vec![Some(vec![g])]), &mut st, 0.01).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((ps.get(ParamId(0)).values[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ps = single(0.0);
        let mut st = AdamState::new(&ps);
        for _ in 0..2000 {
            let bound = ps.bind();
            let x = bound.get(ParamId(0));
            let d = x.sub(&Tensor::scalar(3.0)).unwrap();
            d.mul(&d).unwrap().sum().backward().unwrap();
            adam_step(&mut ps, &bound.gradients(), &mut st, 0.05).unwrap();
        }
        assert!((ps.get(ParamId(0)).values[0] - 3.0).abs() < 0.01);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = single(1.0);
        let mut st = AdamState::new(&ps);
        let err = adam_step(&mut ps, &Gradients(vec![None]), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::UninitializedGradient(ref n) if n == "x"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Gradients(vec![Some(vec![3.0, 4.0]), None]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
