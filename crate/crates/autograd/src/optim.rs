//! AdamW with decoupled weight decay and an external learning-rate scale for
//! warmup schedules.

use std::collections::BTreeMap;

use crate::graph::Arr;
use crate::store::ParamStore;
use crate::Result;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over `grads` (name -> gradient). `lr_scale` multiplies the
    /// base learning rate, so warmup is `lr_scale = min(1, step/warmup)`.
    /// Weight decay is decoupled: it scales with the effective lr but not
    /// with the adaptive moments.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Arr>,
        lr_scale: f64,
    ) -> Result<()> {
        self.t += 1;
        let lr_t = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr_t * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
        Ok(())
    }

    /// Serializable view of the moment buffers, name-ordered.
    pub fn state(&self) -> (u64, &BTreeMap<String, Arr>, &BTreeMap<String, Arr>) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: BTreeMap<String, Arr>, v: BTreeMap<String, Arr>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
