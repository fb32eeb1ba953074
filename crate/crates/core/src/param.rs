//! Named parameter groups with paired gradient buffers and modality tags.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};

/// Which balancing coefficient applies to a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    /// Unimodal encoder of modality `i`; stepped with coefficient `k_i`.
    Encoder(usize),
    /// Unimodal classifier head of modality `i`; always stepped with k = 1.
    Head(usize),
    /// Shared fusion parameters; always stepped with k = 1.
    Fusion,
}

/// A named set of tensors with shape-matched gradient buffers.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<Matrix>,
    pub grads: Vec<Matrix>,
    pub tag: Option<GroupTag>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Matrix>, tag: GroupTag) -> Self {
        let grads = tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        ParamGroup {
            name: name.into(),
            tensors,
            grads,
            tag: Some(tag),
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }

    /// Copy all tensor entries into one flat vector (tensor order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`]: write a flat vector back into the tensors.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "unflatten: {} values for group '{}' with {} parameters",
                flat.len(),
                self.name,
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.rows() * t.cols();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flat view of the gradient buffers, same layout as [`flatten`].
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for g in &self.grads {
            out.extend_from_slice(g.data());
        }
        out
    }

    fn check_shapes(&self) -> Result<()> {
        if self.tensors.len() != self.grads.len() {
            return Err(Error::Contract(format!(
                "group '{}' has {} tensors but {} gradient buffers",
                self.name,
                self.tensors.len(),
                self.grads.len()
            )));
        }
        for (t, g) in self.tensors.iter().zip(&self.grads) {
            if t.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "group '{}' gradient shape {:?} does not match tensor shape {:?}",
                    self.name,
                    g.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One SGD update on a group: every tensor t <- t - lr_base·k·grad(t), then
/// the gradients are zeroed. `k` must stay positive; the coefficient design
/// never halts learning.
pub fn sgd_step(group: &mut ParamGroup, lr_base: f64, k: f64) -> Result<()> {
    if k <= 0.0 {
        return Err(Error::Contract(format!(
            "sgd_step: coefficient k = {k} must be > 0 (group '{}')",
            group.name
        )));
    }
    group.check_shapes()?;
    let step = lr_base * k;
    for (t, g) in group.tensors.iter_mut().zip(&group.grads) {
        for (tv, gv) in t.data_mut().iter_mut().zip(g.data()) {
            *tv -= step * gv;
        }
        if !t.is_finite() {
            return Err(Error::Contract(format!(
                "sgd_step: non-finite parameter in group '{}' after update",
                group.name
            )));
        }
    }
    group.zero_grads();
    Ok(())
}

/// Plain SGD with an optional classical momentum extension.
///
/// With momentum = 0 this delegates to [`sgd_step`] exactly. With momentum
/// mu > 0 the balancing coefficient multiplies the raw gradient before it
/// enters the buffer: v <- mu·v + k·g; t <- t - lr_base·v.
#[derive(Debug)]
pub struct Sgd {
    pub momentum: f64,
    buffers: Vec<Option<Vec<Matrix>>>,
}

impl Sgd {
    pub fn new(momentum: f64, n_groups: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum {momentum} must be in [0, 1)"
            )));
        }
        Ok(Sgd {
            momentum,
            buffers: (0..n_groups).map(|_| None).collect(),
        })
    }

    /// Step group `idx` with coefficient `k`.
    pub fn step(&mut self, idx: usize, group: &mut ParamGroup, lr_base: f64, k: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(group, lr_base, k);
        }
        if k <= 0.0 {
            return Err(Error::Contract(format!(
                "sgd_step: coefficient k = {k} must be > 0 (group '{}')",
                group.name
            )));
        }
        group.check_shapes()?;
        let buf = self.buffers[idx].get_or_insert_with(|| {
            group
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect()
        });
        for ((t, g), v) in group.tensors.iter_mut().zip(&group.grads).zip(buf) {
            for ((tv, gv), vv) in t.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + k * gv;
                *tv -= lr_base * *vv;
            }
        }
        group.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(theta: f64, grad: f64) -> ParamGroup {
        let mut g = ParamGroup::new(
            "w",
            vec![Matrix::from_vec(1, 1, vec![theta]).unwrap()],
            GroupTag::Fusion,
        );
        g.grads[0].set(0, 0, grad);
        g
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut g = scalar_group(1.0, 0.5);
        sgd_step(&mut g, 0.1, 1.0).unwrap();
        assert_eq!(g.tensors[0].get(0, 0), 0.95);

        let mut g = scalar_group(1.0, 0.5);
        sgd_step(&mut g, 0.1, 2.0).unwrap();
        assert_eq!(g.tensors[0].get(0, 0), 0.90);
    }

    #[test]
    fn sgd_step_zero_grad_leaves_params() {
        let mut g = scalar_group(1.0, 0.0);
        sgd_step(&mut g, 0.1, 3.0).unwrap();
        assert_eq!(g.tensors[0].get(0, 0), 1.0);
    }

    #[test]
    fn sgd_step_rejects_nonpositive_k() {
        let mut g = scalar_group(1.0, 0.5);
        assert!(matches!(
            sgd_step(&mut g, 0.1, 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            sgd_step(&mut g, 0.1, -1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sgd_step_zeroes_grads() {
        let mut g = scalar_group(1.0, 0.5);
        sgd_step(&mut g, 0.1, 1.0).unwrap();
        assert_eq!(g.grads[0].get(0, 0), 0.0);
    }

    #[test]
    fn coefficient_folds_into_lr_exactly() {
        // sgd_step with k=k0 equals sgd_step with lr_base·k0 and k=1, bit for bit.
        for &(theta, grad, lr, k0) in
            &[(1.0, 0.5, 0.1, 2.0), (-3.0, 0.25, 0.05, 7.8543), (2.0, -1.0, 0.01, 0.3)]
        {
            let mut a = scalar_group(theta, grad);
            let mut b = scalar_group(theta, grad);
            sgd_step(&mut a, lr, k0).unwrap();
            sgd_step(&mut b, lr * k0, 1.0).unwrap();
            assert_eq!(
                a.tensors[0].get(0, 0).to_bits(),
                b.tensors[0].get(0, 0).to_bits()
            );
        }
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let mut opt = Sgd::new(0.0, 1).unwrap();
        let mut a = scalar_group(1.0, 0.5);
        let mut b = scalar_group(1.0, 0.5);
        opt.step(0, &mut a, 0.1, 2.0).unwrap();
        sgd_step(&mut b, 0.1, 2.0).unwrap();
        assert_eq!(a.tensors[0], b.tensors[0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = Sgd::new(0.9, 1).unwrap();
        let mut g = scalar_group(0.0, 1.0);
        opt.step(0, &mut g, 0.1, 1.0).unwrap();
        // v = 1, theta = -0.1
        assert!((g.tensors[0].get(0, 0) + 0.1).abs() < 1e-15);
        g.grads[0].set(0, 0, 1.0);
        opt.step(0, &mut g, 0.1, 1.0).unwrap();
        // v = 0.9 + 1 = 1.9, theta = -0.1 - 0.19 = -0.29
        assert!((g.tensors[0].get(0, 0) + 0.29).abs() < 1e-15);
    }
}
