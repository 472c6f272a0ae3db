//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW state. Moment buffers parallel the parameter store by index, so the
/// optimizer can be checkpointed alongside the parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update.
    ///
    /// `grads` is indexed by parameter position ([`crate::ParamId`] order);
    /// `trainable` masks parameters frozen for the current stage. Weight
    /// decay is decoupled (applied to the parameter, not the gradient) and
    /// only touches trainable parameters that received a gradient this step.
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        trainable: &[bool],
        lr: f64,
        weight_decay: f64,
        grad_clip: Option<f64>,
    ) -> f64 {
        assert_eq!(grads.len(), store.len());
        assert_eq!(trainable.len(), store.len());
        let mut sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if let (Some(g), true) = (g, trainable[i]) {
                sq += g.sq_norm();
            }
        }
        let norm = sq.sqrt();
        let clip_scale = match grad_clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), true) = (g, trainable[i]) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(crate::ParamId(i));
            for j in 0..g.len() {
                let gj = g.data()[j] * clip_scale;
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let pj = p.data()[j];
                p.data_mut()[j] = pj - lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * pj);
            }
        }
        norm
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Restores a checkpointed state. Shapes must match the current store.
    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        for (a, b) in m.iter().zip(&self.m) {
            assert_eq!(a.shape(), b.shape(), "moment shape mismatch");
        }
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
