use crate::autodiff::NdArray;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<NdArray<T>>,
    pub v: Vec<NdArray<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| NdArray::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Decay reaches only parameters flagged `decay`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[NdArray<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Length {
                op: "adamw",
                detail: format!("{} gradients, {} moments for {} parameters", grads.len(), self.m.len(), store.len()),
            });
        }
        for (p, g) in store.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adamw", p.value.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::lit(lr), T::lit(self.eps));
        let shrink = T::lit(lr * self.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = p.decay && self.weight_decay > 0.0;
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                if decay {
                    *w -= shrink * *w;
                }
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut [NdArray<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
