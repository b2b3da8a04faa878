use crate::error::Result;
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::{Scalar, Tensor};

/// Stochastic gradient descent with classical momentum and global-norm
/// gradient clipping:
///
/// ```text
/// g' = g * min(1, clip_norm / ||g||)
/// v  = momentum * v + g'
/// p  = p - lr * v
/// ```
///
/// Only parameters present in the gradient store are touched, so frozen
/// weights and batch-norm running statistics stay put.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-2,
            momentum: 0.9,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug)]
pub struct Sgd<S> {
    pub cfg: SgdConfig,
    velocity: ParameterStore<S>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: ParameterStore::new(),
        }
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        params: &mut ParameterStore<S>,
        grads: &ParameterStore<S>,
    ) -> Result<f64> {
        let norm = grads.global_norm();
        let scale = if norm > self.cfg.clip_norm && norm > 0.0 {
            S::from_f64(self.cfg.clip_norm / norm)
        } else {
            S::one()
        };
        let momentum = S::from_f64(self.cfg.momentum);
        let lr = S::from_f64(self.cfg.lr);
        for (name, g) in grads.iter() {
            if !self.velocity.contains(name) {
                self.velocity
                    .insert(name.to_string(), Tensor::zeros(g.shape()));
            }
            let v = self.velocity.get_mut(name)?;
            let p = params.get_mut(name)?;
            for ((vv, &gv), pv) in v
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.data_mut().iter_mut())
            {
                *vv = momentum * *vv + scale * gv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(norm)
    }
}
