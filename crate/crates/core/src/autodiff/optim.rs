//! Adam with coupled L2 weight decay.

use std::collections::BTreeMap;

use crate::autodiff::array::Array;
use crate::autodiff::params::{GradMap, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: BTreeMap<String, Array<T>>,
    v: BTreeMap<String, Array<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected Adam update. The decay term is coupled L2:
/// `g' = g + weight_decay * p` before the moment updates.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig<T>,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::one() - cfg.beta1.powi(t);
    let bc2 = T::one() - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        assert_eq!(
            g.shape(),
            p.shape(),
            "gradient shape mismatch for {name:?}"
        );
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.shape()));
        for i in 0..p.numel() {
            let pd = p.data_mut();
            let geff = g.data()[i] + cfg.weight_decay * pd[i];
            let md = m.data_mut();
            let vd = v.data_mut();
            md[i] = cfg.beta1 * md[i] + (T::one() - cfg.beta1) * geff;
            vd[i] = cfg.beta2 * vd[i] + (T::one() - cfg.beta2) * geff * geff;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", Array::scalar(value));
        ps
    }

    fn grad_of(value: f64) -> GradMap<f64> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Array::scalar(value));
        GradMap::new(m)
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut ps = one_param(1.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(1e-4, 0.0);
        adam_step(&mut ps, &grad_of(0.0), &mut state, &cfg);
        assert_eq!(ps.get("w").item(), 1.0);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form_with_decay() {
        // p=1, g=1, lr=1e-4, wd=1e-3: effective gradient 1.001, and the
        // bias-corrected first step is lr * g' / (sqrt(g'^2) + eps).
        let mut ps = one_param(1.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(1e-4, 1e-3);
        adam_step(&mut ps, &grad_of(1.0), &mut state, &cfg);
        let geff = 1.001f64;
        let expected = 1.0 - 1e-4 * geff / ((geff * geff).sqrt() + 1e-8);
        assert!((ps.get("w").item() - expected).abs() < 1e-15);
        assert!((ps.get("w").item() - 0.9999).abs() < 1e-6);
    }

    #[test]
    fn decay_alone_moves_by_about_lr() {
        // p=1, g=0, wd=1e-3: m_hat/sqrt(v_hat) is sign(g') so the first
        // update is -lr up to the eps correction.
        let mut ps = one_param(1.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig::new(1e-4, 1e-3);
        adam_step(&mut ps, &grad_of(0.0), &mut state, &cfg);
        let delta = 1.0 - ps.get("w").item();
        assert!((delta - 1e-4).abs() < 1e-9, "delta = {delta}");
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let run = || {
            let mut ps = one_param(0.7);
            let mut state = AdamState::new();
            let cfg = AdamConfig::new(3e-3, 1e-3);
            for _ in 0..25 {
                adam_step(&mut ps, &grad_of(0.3), &mut state, &cfg);
            }
            ps.get("w").item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    #[should_panic(expected = "missing gradient for parameter")]
    fn missing_gradient_key_panics() {
        let mut ps = one_param(1.0);
        let grads = GradMap::new(BTreeMap::new());
        adam_step(&mut ps, &grads, &mut AdamState::new(), &AdamConfig::new(1e-4, 0.0));
    }
}
