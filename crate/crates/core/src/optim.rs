//! Parameter storage and optimizers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with an optional accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// The parameters owned by one party, addressed by index.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Adds the gradients of bound leaves into each parameter's `grad`.
    pub fn accumulate(&mut self, vars: &[Var], grads: &mut Gradients) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.take(v) {
                match &mut p.grad {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Plain SGD with decoupled weight decay: `p ← p − lr·(grad + wd·p)`.
///
/// Every parameter must carry a gradient; gradients are cleared afterwards.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Param>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let params: Vec<&mut Param> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::contract(format!("parameter `{}` has no gradient", p.name)));
    }
    for p in params {
        let g = p.grad.take().expect("checked above");
        for (v, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * (gv + weight_decay * *v);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Adam with decoupled weight decay. One state slot per parameter, in the
/// order the parameters are passed to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract("Adam state does not match parameter count"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            // Parameters outside the active graph (dropped parties) skip the
            // moment update but still decay.
            let g = p.grad.take();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let vals = p.value.data_mut();
            match g {
                Some(g) => {
                    for j in 0..vals.len() {
                        let gj = g.data()[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                        vals[j] -= lr * (update + weight_decay * vals[j]);
                    }
                }
                None => {
                    for x in vals.iter_mut() {
                        *x -= lr * weight_decay * *x;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one call site.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::default()),
        }
    }

    /// Applies one update. Under SGD, parameters without a gradient (for
    /// example those of a dropped party) are given a zero gradient first.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd => {
                let mut params: Vec<&mut Param> = params.into_iter().collect();
                for p in params.iter_mut().filter(|p| p.grad.is_none()) {
                    p.grad = Some(Tensor::zeros(p.value.shape()));
                }
                sgd_step(params, lr, weight_decay)
            }
            Optimizer::Adam(adam) => adam.step(params, lr, weight_decay),
        }
    }
}
