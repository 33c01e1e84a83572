//! Adaptive-moment (Adam) optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StoredTensor, OPTIMIZER_PREFIX};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let init = |_| None;
        Self {
            config,
            t: 0,
            m: (0..store.len()).map(init).collect(),
            v: (0..store.len()).map(init).collect(),
        }
    }

    /// One update of every trainable parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)]) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
        for &(id, g) in grads {
            by_id[id.0] = Some(g);
        }
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id).data_mut();
            let g = by_id[id.0].map(|g| g.data());
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }

    /// Moment tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<StoredTensor> {
        let mut out = Vec::new();
        for id in store.trainable_ids() {
            for (kind, slot) in [("m", &self.m[id.0]), ("v", &self.v[id.0])] {
                if let Some(t) = slot {
                    out.push(StoredTensor {
                        name: format!("{OPTIMIZER_PREFIX}{kind}.{}", store.name(id)),
                        shape: t.shape().to_vec(),
                        data: t.data().iter().map(|x| x.as_f64() as f32).collect(),
                    });
                }
            }
        }
        out
    }

    /// Restores moments and the update counter written by [`Self::export`].
    pub fn import(config: AdamConfig, t: u64, store: &ParamStore<T>, ck: &Checkpoint) -> Result<Self> {
        let mut adam = Self::new(config, store);
        adam.t = t;
        for id in store.trainable_ids() {
            for kind in ["m", "v"] {
                let name = format!("{OPTIMIZER_PREFIX}{kind}.{}", store.name(id));
                let Some(st) = ck.tensor(&name) else {
                    if t > 0 {
                        return Err(Error::Integrity(format!("missing optimizer state {name}")));
                    }
                    continue;
                };
                if st.shape != store.get(id).shape() {
                    return Err(Error::Integrity(format!("optimizer state {name} has wrong shape")));
                }
                let tensor = Tensor::from_vec(&st.shape, st.data.iter().map(|&x| T::lit(x as f64)).collect())?;
                let slot = if kind == "m" { &mut adam.m[id.0] } else { &mut adam.v[id.0] };
                *slot = Some(tensor);
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap(), true);
        let frozen = store.insert("u", Tensor::from_vec(&[1], vec![5.0]).unwrap(), false);
        let mut adam = Adam::new(AdamConfig::new(0.1), &store);
        let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[(id, &g)]);
        // bias-corrected first step is lr·sign(g) up to epsilon
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
        assert_eq!(store.get(frozen).data(), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::from_vec(&[1], vec![3.0]).unwrap(), true);
        let mut adam = Adam::new(AdamConfig::new(0.05), &store);
        for _ in 0..2000 {
            let x = store.get(id).data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (x - 1.0)]).unwrap();
            adam.step(&mut store, &[(id, &g)]);
        }
        assert!((store.get(id).data()[0] - 1.0).abs() < 1e-3);
    }
}
