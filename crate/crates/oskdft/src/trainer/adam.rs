//! Adam without weight decay, with three parameter groups mapped to the
//! per-module learning-rate curves.

use crate::error::{Error, Result};
use crate::store::{GradStore, ParameterStore};
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Which learning-rate curve a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Speaker head and pretraining heads — cosine base curve.
    Classifier,
    /// CNN + encoder stack — warmup/decay curve.
    Backbone,
    /// Bottleneck adapters — scaled base curve.
    Adapter,
}

pub fn group_of(name: &str) -> Group {
    if name.starts_with("head.") || name.starts_with("pretrain.") {
        Group::Classifier
    } else if name.starts_with("adapter.") {
        Group::Adapter
    } else {
        Group::Backbone
    }
}

/// Learning rate per group for the current epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLrs {
    pub classifier: f64,
    pub backbone: f64,
    pub adapter: f64,
}

impl GroupLrs {
    pub fn uniform(lr: f64) -> Self {
        Self { classifier: lr, backbone: lr, adapter: lr }
    }

    pub fn for_group(&self, g: Group) -> f64 {
        match g {
            Group::Classifier => self.classifier,
            Group::Backbone => self.backbone,
            Group::Adapter => self.adapter,
        }
    }
}

/// Adam state: first/second moments per parameter, global step count.
/// Moments are created lazily; parameters that never receive a gradient
/// keep no state. Frozen parameters are skipped entirely (no moment decay).
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step over every gradient in `grads`. `frozen` names
    /// parameters excluded from this phase of training.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &GradStore,
        lrs: &GroupLrs,
        frozen: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            if frozen(name) {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("gradient of {name}"),
                    detail: "non-finite at optimizer step".into(),
                });
            }
            let lr = lrs.for_group(group_of(name));
            let param = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + EPS);
                });
        }
        Ok(())
    }

    /// Serialize moments into a store as `adam.m.<name>` / `adam.v.<name>`.
    pub fn save_into(&self, store: &mut ParameterStore) {
        for (name, m) in &self.m {
            store.insert(format!("adam.m.{name}"), m.clone());
        }
        for (name, v) in &self.v {
            store.insert(format!("adam.v.{name}"), v.clone());
        }
    }

    /// Rebuild from a train-state store; strips the `adam.*` entries out.
    pub fn take_from(store: &mut ParameterStore, step: u64) -> Adam {
        let names: Vec<String> = store
            .names_with_prefix("adam.")
            .cloned()
            .collect();
        let mut adam = Adam { t: step, ..Default::default() };
        for full in names {
            let arr = store.remove(&full).expect("listed name");
            if let Some(name) = full.strip_prefix("adam.m.") {
                adam.m.insert(name.to_string(), arr);
            } else if let Some(name) = full.strip_prefix("adam.v.") {
                adam.v.insert(name.to_string(), arr);
            }
        }
        adam
    }
}
