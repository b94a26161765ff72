//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient keep their moments decaying
    /// and receive the momentum-only step. `lr = 0` leaves values bit-identical.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = self.lr / c1;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            if self.lr == 0.0 {
                // moments still advance so that a resumed run matches
                for (k, (mk, vk)) in m.iter_mut().zip(v.iter_mut()).enumerate() {
                    let gk = g.map_or(0.0, |g| g.data()[k].f64());
                    *mk = (b1 * *mk as f64 + (1.0 - b1) * gk) as f32;
                    *vk = (b2 * *vk as f64 + (1.0 - b2) * gk * gk) as f32;
                }
                continue;
            }
            let p = store.get_mut(id);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k].f64());
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let upd = step * mk / ((vk / c2).sqrt() + self.eps);
                *x = T::of(x.f64() - upd);
            }
        }
        Ok(())
    }
}
