//! Flat parameter storage and the AdamW optimizer.

use crate::error::{Error, Result};

/// A named slice of the flat parameter vector, column-major `rows x cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub slot: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub tensors: Vec<TensorInfo>,
}

impl ParamStore {
    pub fn from_layout(tensors: Vec<TensorInfo>) -> Self {
        let n = tensors
            .iter()
            .map(|t| t.slot.offset + t.slot.len())
            .max()
            .unwrap_or(0);
        Self {
            values: vec![0.0; n],
            grads: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            tensors,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Errors on the first tensor holding a non-finite value or gradient.
    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            let r = t.slot.range();
            if self.values[r.clone()]
                .iter()
                .chain(&self.grads[r])
                .any(|x| !x.is_finite())
            {
                return Err(Error::NonFinite {
                    layer: t.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// One AdamW step with decoupled weight decay.
    pub fn adamw_step(&mut self, opt: &AdamW) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let decay = 1.0 - opt.lr * opt.weight_decay;
        for i in 0..self.values.len() {
            let g = self.grads[i];
            self.values[i] *= decay;
            self.m[i] = opt.beta1 * self.m[i] + (1.0 - opt.beta1) * g;
            self.v[i] = opt.beta2 * self.v[i] + (1.0 - opt.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            self.values[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
        }
    }
}

/// Accumulates named tensors into consecutive slots.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    pub tensors: Vec<TensorInfo>,
    next: usize,
}

impl LayoutBuilder {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.next,
            rows,
            cols,
        };
        self.next += slot.len();
        self.tensors.push(TensorInfo {
            name: name.into(),
            slot,
        });
        slot
    }

    pub fn count(&self) -> usize {
        self.next
    }
}
