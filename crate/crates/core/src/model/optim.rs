use serde::{Deserialize, Serialize};

use super::{Float, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub settings: AdamSettings,
    pub m: Parameters<F>,
    pub v: Parameters<F>,
    pub t: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(params: &Parameters<F>, settings: AdamSettings) -> Self {
        AdamW {
            settings,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update of every tensor whose name passes `trainable`; other
    /// tensors and their moments are left untouched.
    pub fn step(
        &mut self,
        params: &mut Parameters<F>,
        grad: &Parameters<F>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let AdamSettings {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.settings;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (F::lit(beta1), F::lit(beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - beta1), F::lit(1.0 - beta2));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(eps);
        let decay = F::lit(lr * weight_decay);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            if !trainable(&name) {
                continue;
            }
            let decays = p.ndim() == 2;
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    if decays {
                        *p -= decay * *p;
                    }
                    *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}
