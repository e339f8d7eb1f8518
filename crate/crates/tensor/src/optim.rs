//! Adam with bias correction.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for names absent from `params` are an error.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            p.expect_same_shape(g, "adam")?;
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
            }
            let m = self.m.get_mut(name)?;
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let m = self.m.get(name)?.clone();
            let v = self.v.get_mut(name)?;
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let v = self.v.get(name)?;
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
            if !p.all_finite() {
                return Err(TensorError::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("step", Tensor::scalar(self.step as f64));
        s.insert("hyper", Tensor::new(vec![4], vec![self.lr, self.beta1, self.beta2, self.eps]).expect("4 values"));
        s.extend_prefixed("m.", &self.m);
        s.extend_prefixed("v.", &self.v);
        s
    }

    pub fn from_state(state: &ParamStore) -> Result<Self> {
        let step = state.get("step")?.item()?;
        let h = state.get("hyper")?;
        if h.len() != 4 || step < 0.0 || step.fract() != 0.0 {
            return Err(TensorError::Checkpoint("malformed optimizer state".into()));
        }
        let d = h.data();
        Ok(Adam {
            lr: d[0],
            beta1: d[1],
            beta2: d[2],
            eps: d[3],
            step: step as u64,
            m: state.strip_prefix("m."),
            v: state.strip_prefix("v."),
        })
    }
}
