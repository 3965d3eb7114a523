//! Heavy-ball SGD with the learning rate folded into the velocity update.

use crate::autodiff::tensor::Element;

/// Solver hyperparameters. Weight decay is skipped per call for parameters
/// that must not shrink (batch norm gamma/beta).
#[derive(Debug, Clone, Copy)]
pub struct SgdHyper<E: Element = f32> {
    pub momentum: E,
    pub weight_decay: E,
}

/// One update: `v <- momentum*v + lr*(g + weight_decay*w)`, `w <- w - v`.
pub fn sgd_step<E: Element>(
    w: &mut [E],
    g: &[E],
    v: &mut [E],
    lr: E,
    hyper: &SgdHyper<E>,
    apply_decay: bool,
) {
    assert_eq!(w.len(), g.len(), "gradient length mismatch");
    assert_eq!(w.len(), v.len(), "velocity length mismatch");
    let wd = if apply_decay {
        hyper.weight_decay
    } else {
        E::zero()
    };
    for i in 0..w.len() {
        let vi = hyper.momentum * v[i] + lr * (g[i] + wd * w[i]);
        v[i] = vi;
        w[i] = w[i] - vi;
    }
}

/// Velocity buffers for an ordered parameter list, zero-initialized.
#[derive(Debug, Clone)]
pub struct SgdState<E: Element = f32> {
    velocities: Vec<Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        SgdState {
            velocities: sizes.into_iter().map(|n| vec![E::zero(); n]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn velocity(&self, i: usize) -> &[E] {
        &self.velocities[i]
    }

    pub fn step(
        &mut self,
        i: usize,
        w: &mut [E],
        g: &[E],
        lr: E,
        hyper: &SgdHyper<E>,
        apply_decay: bool,
    ) {
        sgd_step(w, g, &mut self.velocities[i], lr, hyper, apply_decay);
    }
}
