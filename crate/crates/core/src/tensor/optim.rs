use super::ParamStore;
use crate::scalar::Scalar;

/// One SGD update with momentum and L2 weight decay:
/// `v ← m·v + g + wd·w`, then `w ← w − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    assert!(param.len() == grad.len() && grad.len() == velocity.len());
    for ((w, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w = *w - lr * *v;
    }
}

/// Momentum buffers for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: T, weight_decay: T) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect(),
        }
    }

    /// Updates every parameter whose `frozen` flag is false.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: T, frozen: &[bool]) {
        for id in store.ids().collect::<Vec<_>>() {
            if frozen.get(id.0).copied().unwrap_or(false) {
                continue;
            }
            sgd_step(
                store.get_mut(id).data_mut(),
                &grads[id.0],
                &mut self.velocity[id.0],
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocity[index]
    }
}
