//! Adam with bias correction, and global-norm gradient clipping.

use ndarray::{ArrayD, Zip};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments for every trainable tensor, keyed by name in
/// visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<(String, ArrayD<T>)>,
    pub second: Vec<(String, ArrayD<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: Parameters<T> + ?Sized>(params: &P) -> Self {
        let mut first = Vec::new();
        params.visit("", &mut |name, kind, t| {
            if kind.is_trainable() {
                first.push((name.to_string(), ArrayD::zeros(t.raw_dim())));
            }
        });
        let second = first.clone();
        Self { step: 0, first, second }
    }
}

fn trainable_tensors<T: Scalar, P: Parameters<T> + ?Sized>(p: &P) -> Vec<(String, ArrayD<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, kind, t| {
        if kind.is_trainable() {
            out.push((name.to_string(), t.to_owned()));
        }
    });
    out
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step<T: Scalar, P: Parameters<T> + ?Sized>(
    params: &mut P,
    grad: &P,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = trainable_tensors(grad);
    if grads.len() != state.first.len() {
        return Err(Error::InvalidShape(format!(
            "optimizer tracks {} tensors, gradient has {}",
            state.first.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.epsilon));
    let mut i = 0;
    let mut mismatch = None;
    params.visit_mut("", &mut |name, kind, mut w| {
        if !kind.is_trainable() || mismatch.is_some() {
            return;
        }
        let (gname, g) = &grads[i];
        let m = &mut state.first[i].1;
        let v = &mut state.second[i].1;
        i += 1;
        if gname != name || g.shape() != w.shape() || m.shape() != w.shape() {
            mismatch = Some(name.to_string());
            return;
        }
        Zip::from(&mut w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    });
    match mismatch {
        Some(name) => Err(Error::InvalidShape(format!("optimizer state does not match tensor {name}"))),
        None => Ok(()),
    }
}

/// L2 norm over every trainable gradient entry.
pub fn global_norm<T: Scalar, P: Parameters<T> + ?Sized>(grad: &P) -> T {
    let mut acc = T::zero();
    grad.visit("", &mut |_, kind, t| {
        if kind.is_trainable() {
            acc += t.iter().fold(T::zero(), |a, &g| a + g * g);
        }
    });
    acc.sqrt()
}

/// Rescales `grad` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_gradients<T: Scalar, P: Parameters<T> + ?Sized>(grad: &mut P, max_norm: T) -> Result<T> {
    if !(max_norm > T::zero()) {
        return Err(Error::Config("clip norm must be positive".into()));
    }
    let norm = global_norm(grad);
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.visit_mut("", &mut |_, kind, mut t| {
            if kind.is_trainable() {
                t.mapv_inplace(|g| g * scale);
            }
        });
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadParams;
    use ndarray::{arr1, arr2};

    fn sample() -> HeadParams<f64> {
        HeadParams {
            weights: arr2(&[[0.5, -1.0], [2.0, 0.25]]),
            bias: arr1(&[0.1, -0.3]),
        }
    }

    fn filled(v: f64) -> HeadParams<f64> {
        let mut g = sample();
        g.weights.fill(v);
        g.bias.fill(v);
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = sample();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &filled(0.0), &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, sample());
        assert_eq!(s.step, 5);
    }

    #[test]
    fn constant_gradient_moves_by_at_most_the_rate() {
        let cfg = AdamConfig::default();
        let mut p = sample();
        let mut s = AdamState::new(&p);
        for _ in 0..20 {
            let before = p.clone();
            adam_step(&mut p, &filled(0.7), &mut s, &cfg).unwrap();
            for (a, b) in before.weights.iter().zip(p.weights.iter()) {
                assert!(b < a);
                assert!(a - b <= cfg.learning_rate * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = sample();
        let mut s = AdamState::new(&p);
        let mut g = filled(3.0);
        g.bias[1] = -0.01;
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert!((p.weights[[0, 0]] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((p.bias[1] - (-0.3 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut p = sample();
            let mut s = AdamState::new(&p);
            for k in 0..10 {
                adam_step(&mut p, &filled(0.1 * k as f64 - 0.4), &mut s, &AdamConfig::default()).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_rescales_only_large_norms() {
        // norm = sqrt(6 · v²)
        let mut g = filled(10.0 / 6f64.sqrt());
        let before = clip_gradients(&mut g, 5.0).unwrap();
        assert!((before - 10.0).abs() < 1e-12);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        assert!((g.bias[0] - 5.0 / 6f64.sqrt()).abs() < 1e-12);

        let mut small = filled(3.0 / 6f64.sqrt());
        let copy = small.clone();
        clip_gradients(&mut small, 5.0).unwrap();
        assert_eq!(small, copy);
    }

    #[test]
    fn non_positive_clip_is_rejected() {
        assert!(clip_gradients(&mut filled(1.0), 0.0).is_err());
    }
}
