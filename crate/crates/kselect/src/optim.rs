//! Adam with decoupled weight decay.

use crate::params::{Gradients, Group, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Option<Moments>>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: Vec::new() }
    }

    /// Updates every parameter of an `active` group that has a gradient.
    /// Everything else, optimizer state included, is left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, active: impl Fn(Group) -> bool) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (id, group) in ids {
            let Some(g) = grads.get(id) else { continue };
            if !active(group) {
                continue;
            }
            let p = store.value_mut(id);
            let st = self.state[id.index()]
                .get_or_insert_with(|| Moments { m: Matrix::zeros(p.rows(), p.cols()), v: Matrix::zeros(p.rows(), p.cols()), t: 0 });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((x, &gv), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(st.m.data_mut()).zip(st.v.data_mut()) {
                *x *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                *x -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, Gradients) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add(Group::Policy, "a", 1, 2, Init::Ones, &mut rng);
        store.add(Group::Decoder, "b", 1, 1, Init::Ones, &mut rng);
        let grads = Gradients::from_vec(vec![Some(Matrix::row_vector(vec![0.5, -2.0])), None]);
        (store, grads)
    }

    #[test]
    fn matches_hand_computed_steps() {
        let (mut store, grads) = setup();
        let a = store.id("w.a").unwrap();
        let b = store.id("theta_d.b").unwrap();
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut store, &grads, |_| true);
        // first step: decay, then a move of lr * g / |g|
        let x = store.value(a).data();
        assert!((x[0] - (0.999 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((x[1] - (0.999 + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
        // no gradient: untouched, decay included
        assert_eq!(store.value(b).data(), &[1.0]);
        let x0 = x[0];
        opt.step(&mut store, &grads, |_| true);
        let m = 0.9 * 0.05 + 0.1 * 0.5;
        let v = 0.999 * 0.00025 + 0.001 * 0.25;
        let expect = x0 * 0.999 - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((store.value(a).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn inactive_groups_untouched() {
        let (mut store, grads) = setup();
        let before = store.clone();
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut store, &grads, |g| g.is_generator());
        assert_eq!(store, before);
        assert!(opt.state.iter().all(Option::is_none));
    }
}
