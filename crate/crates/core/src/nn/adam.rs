use crate::nn::{Matrix, ParamStore};

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`θ ← θ − lr·wd·θ` before the moment step). Gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, m), v) in store
        .params_mut()
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let decay = 1.0 - lr * weight_decay;
        let values = p.value.data_mut();
        let grads = p.grad.data_mut();
        for (((x, g), mi), vi) in values
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            if weight_decay != 0.0 {
                *x *= decay;
            }
            *mi = b1 * *mi + (1.0 - b1) * *g;
            *vi = b2 * *vi + (1.0 - b2) * *g * *g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: Matrix, grad: f64) -> (ParamStore, crate::nn::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", value.clone()).unwrap();
        s.accumulate(id, &Matrix::filled(value.rows(), value.cols(), grad))
            .unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let start = Matrix::from_fn(2, 3, |r, c| (r + c) as f64);
        let (mut s, id) = store_with(start.clone(), 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.001, 0.0);
        for (a, b) in s.value(id).data().iter().zip(start.data()) {
            assert!((a - b + 0.001).abs() <= 1e-6);
        }
        assert_eq!(s.grad(id).sum(), 0.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let start = Matrix::from_fn(2, 2, |r, c| r as f64 - c as f64 + 0.5);
        let (mut s, id) = store_with(start.clone(), 0.0);
        let mut st = AdamState::new(&s);
        for _ in 0..3 {
            adam_step(&mut s, &mut st, 0.01, 0.0);
        }
        assert_eq!(s.value(id), &start);
    }

    #[test]
    fn weight_decay_shrinks_parameters_with_zero_gradient() {
        let start = Matrix::from_rows(&[[2.0, -3.0]]).unwrap();
        let (mut s, id) = store_with(start.clone(), 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, 0.5);
        for (a, b) in s.value(id).data().iter().zip(start.data()) {
            assert!(a.abs() < b.abs());
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut s, id) = store_with(Matrix::filled(3, 3, 0.3), 0.0);
            let mut st = AdamState::new(&s);
            for k in 0..5 {
                let g = Matrix::from_fn(3, 3, |r, c| ((r * 3 + c + k) as f64).sin());
                s.accumulate(id, &g).unwrap();
                adam_step(&mut s, &mut st, 3e-3, 1e-2);
            }
            s.value(id).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
