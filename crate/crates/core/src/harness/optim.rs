//! Decoupled-weight-decay adaptive-moment optimizer: parameter-wise first
//! and second moment estimates with bias correction; weight decay applied
//! directly to parameters, not gradients.

use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct AdamW {
    pub weight_decay: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Completed update count (drives bias correction).
    pub t: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: f64) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).shape()))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).shape()))
            .collect();
        AdamW {
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    /// One update; `grads[i]` of `None` means zero gradient for param `i`
    /// (the parameter still decays).
    pub fn apply(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..store.len() {
            let p = store.get_mut(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.numel() {
                let g = grads[i]
                    .as_ref()
                    .map(|t| t.data()[j] as f64)
                    .unwrap_or(0.0);
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * g;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let pj = p.data()[j] as f64;
                let updated = pj - lr * (mhat / (vhat.sqrt() + EPS)) - lr * self.weight_decay * pj;
                p.data_mut()[j] = updated as f32;
            }
        }
    }

    /// Moment tensors as checkpoint records (`optim.m.*`, `optim.v.*`).
    pub fn to_records(&self, store: &ParamStore<f32>) -> Vec<Record> {
        let mut out = Vec::with_capacity(2 * store.len());
        for i in 0..store.len() {
            out.push(Record {
                name: format!("optim.m.{}", store.name(i)),
                dims: self.m[i].shape().to_vec(),
                data: self.m[i].data().to_vec(),
            });
            out.push(Record {
                name: format!("optim.v.{}", store.name(i)),
                dims: self.v[i].shape().to_vec(),
                data: self.v[i].data().to_vec(),
            });
        }
        out
    }

    pub fn restore(&mut self, store: &ParamStore<f32>, ckpt: &Checkpoint) -> Result<()> {
        for i in 0..store.len() {
            for (prefix, slot) in [("optim.m.", &mut self.m[i]), ("optim.v.", &mut self.v[i])] {
                let name = format!("{prefix}{}", store.name(i));
                let rec = ckpt.record(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimizer record `{name}`"))
                })?;
                if rec.dims != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer record `{name}` has dims {:?}, expected {:?}",
                        rec.dims,
                        slot.shape()
                    )));
                }
                *slot = Tensor::from_vec(&rec.dims, rec.data.clone())?;
            }
        }
        let t: usize = ckpt
            .config_value("optim_t")
            .ok_or_else(|| Error::Checkpoint("missing optim_t".into()))?
            .parse()
            .map_err(|_| Error::Checkpoint("bad optim_t".into()))?;
        self.t = t;
        Ok(())
    }
}
