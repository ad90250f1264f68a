use std::collections::BTreeMap;

use reviewkd_tensor::{Gradients, ParamId, ParamStore, Tensor};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `g = ∇ + wd·p`, `buf = μ·buf + g` (`buf = g` on the first step),
/// `p -= lr·buf`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates every id in `ids` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId], lr: f64) {
        for &id in ids {
            let Some(grad) = grads.param(id) else { continue };
            let p = store.value_mut(id);
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                    *gv += self.weight_decay * pv;
                }
            }
            let buf = match self.buffers.get_mut(&id) {
                Some(buf) => {
                    for (b, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *b = self.momentum * *b + gv;
                    }
                    buf
                }
                None => self.buffers.entry(id).or_insert(g),
            };
            for (pv, b) in p.data_mut().iter_mut().zip(buf.data()) {
                *pv -= lr * b;
            }
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor> {
        self.buffers.get(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reviewkd_tensor::Graph;

    // f(p) = 0.5 a p², so ∇ = a p
    fn grads_for(store: &ParamStore, id: ParamId, a: f64) -> Gradients {
        let mut g = Graph::new();
        let p = g.param(store, id);
        let sq = g.mul(p, p).unwrap();
        let f = g.scale(sq, 0.5 * a);
        let l = g.sum_all(f);
        g.backward(l).unwrap()
    }

    #[test]
    fn momentum_recurrence_on_scalar_quadratic() {
        let (a, lr, mu, wd) = (2.0, 0.1, 0.9, 0.01);
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut sgd = Sgd::new(mu, wd);
        let (mut p, mut buf) = (1.0f64, 0.0f64);
        for step in 0..5 {
            let grads = grads_for(&store, id, a);
            sgd.step(&mut store, &grads, &[id], lr);
            let g = a * p + wd * p;
            buf = if step == 0 { g } else { mu * buf + g };
            p -= lr * buf;
            assert!((store.value(id).data()[0] - p).abs() < 1e-15);
            assert!((sgd.buffer(id).unwrap().data()[0] - buf).abs() < 1e-15);
        }
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(&[1], vec![1.0]).unwrap());
        let b = store.add("b", Tensor::new(&[1], vec![3.0]).unwrap());
        let grads = grads_for(&store, a, 1.0);
        let mut sgd = Sgd::new(0.9, 0.1);
        sgd.step(&mut store, &grads, &[a, b], 0.5);
        assert_eq!(store.value(b).data()[0], 3.0);
        assert!(sgd.buffer(b).is_none());
    }
}
