//! Named parameter storage, initialization, and the Adam optimizer.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::num::Scalar;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Ordered name -> array map. Insertion order is part of the contract:
/// checkpoints serialize arrays in this order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    map: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of every array (shape and value).
    pub fn bitwise_eq(&self, other: &ParamSet<T>) -> bool {
        if self.map.len() != other.map.len() {
            return false;
        }
        self.map.iter().all(|(k, a)| match other.map.get(k) {
            Some(b) => {
                a.shape() == b.shape()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.real().to_bits() == y.real().to_bits())
            }
            None => false,
        })
    }

    /// Merge `other` under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Extract the sub-set whose names start with `prefix`, stripping it.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }
}

/// Differentiable leaves for every parameter, living on one tape.
pub struct ParamTensors<T: Scalar> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamTensors<T> {
    /// Trainable leaves (gradients flow).
    pub fn trainable(graph: &Graph<T>, params: &ParamSet<T>) -> Self {
        let map = params
            .iter()
            .map(|(k, v)| (k.clone(), graph.var(v.clone())))
            .collect();
        ParamTensors { map }
    }

    /// Frozen leaves (no gradients; used for the fixed backbone).
    pub fn frozen(graph: &Graph<T>, params: &ParamSet<T>) -> Self {
        let map = params
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        ParamTensors { map }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }
}

/// Unit Gaussian scaled by 1/sqrt(fan_in); biases start at zero.
pub fn normal_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = rng.sample(StandardNormal);
        T::from_real(v * scale)
    })
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Generator/discriminator training settings.
        AdamConfig {
            lr: 0.0025,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, keyed by parameter name.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &IndexMap<String, ArrayD<T>>,
    ) -> Result<()> {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, grad) in grads {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for {name}")));
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            for ((pi, gi), (mi, vi)) in p
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = gi.real();
                let mf = b1 * mi.real() + (1.0 - b1) * g;
                let vf = b2 * vi.real() + (1.0 - b2) * g * g;
                *mi = T::from_real(mf);
                *vi = T::from_real(vf);
                let mhat = mf / bc1;
                let vhat = vf / bc2;
                let upd = self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                *pi = T::from_real(pi.real() - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..200 {
            let grads: IndexMap<String, ArrayD<f64>> = [(
                "x".to_string(),
                params.get("x").unwrap().mapv(|v| 2.0 * v),
            )]
            .into_iter()
            .collect();
            opt.update(&mut params, &grads).unwrap();
        }
        assert!(params.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn init_scale_tracks_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: ArrayD<f64> = normal_init(&mut rng, &[64, 256], 256);
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 1.0 / 16.0).abs() < 0.01, "std {std}");
    }
}
