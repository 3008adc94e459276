use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `t` is the 1-based
/// step count after this update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::dim("adam_step", &[n], &[grads.len(), m.len(), v.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..n {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            cfg: AdamConfig::default(),
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let g = store.grad(id).to_vec();
            let i = id.index();
            adam_step(
                store.get_mut(id).data_mut(),
                &g,
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                lr,
                &self.cfg,
            )?;
        }
        Ok(())
    }

    /// Clears the moments of selected rows of a matrix parameter.
    pub fn reset_rows(&mut self, id: ParamId, cols: usize, rows: &[usize]) {
        for &r in rows {
            self.m[id.index()][r * cols..(r + 1) * cols].fill(0.0);
            self.v[id.index()][r * cols..(r + 1) * cols].fill(0.0);
        }
    }

    pub fn to_named(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for id in store.ids() {
            let shape = store.get(id).shape().to_vec();
            let name = store.name(id);
            let i = id.index();
            out.insert(
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.m[i].clone()).expect("shape"),
            );
            out.insert(
                format!("adam.v.{name}"),
                Tensor::new(shape, self.v[i].clone()).expect("shape"),
            );
        }
        out
    }

    pub fn load_named(&mut self, store: &ParamStore, named: &BTreeMap<String, Tensor>, t: u64) -> Result<()> {
        for id in store.ids() {
            let name = store.name(id);
            for (kind, dst) in [("m", &mut self.m[id.index()]), ("v", &mut self.v[id.index()])] {
                let key = format!("adam.{kind}.{name}");
                let src = named
                    .get(&key)
                    .ok_or_else(|| Error::Contract(format!("checkpoint lacks {key}")))?;
                if src.len() != dst.len() {
                    return Err(Error::dim("adam state", &[dst.len()], &[src.len()]));
                }
                dst.copy_from_slice(src.data());
            }
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.5];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn descends_a_parabola() {
        let mut x = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut prev = x[0];
        for t in 1..=10 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut m, &mut v, t, 0.05, &AdamConfig::default()).unwrap();
            assert!(x[0].abs() < prev.abs());
            prev = x[0];
        }
    }
}
