//! Adam with bias correction, applied row-wise: rows whose gradient is
//! entirely zero are skipped (their moments are not decayed).

use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m1: Matrix,
    pub m2: Matrix,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        AdamState {
            m1: Matrix::zeros(rows, cols),
            m2: Matrix::zeros(rows, cols),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix) {
        assert_eq!(
            (params.rows(), params.cols()),
            (grads.rows(), grads.cols()),
            "adam: gradient shape"
        );
        assert_eq!((params.rows(), params.cols()), (self.m1.rows(), self.m1.cols()));
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for r in 0..params.rows() {
            let g = grads.row(r);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let m1 = self.m1.row_mut(r);
            for (m, &gi) in m1.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            }
            let m2 = self.m2.row_mut(r);
            for (v, &gi) in m2.iter_mut().zip(g) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            }
            let (m1, m2) = (self.m1.row(r), self.m2.row(r));
            for ((p, m), v) in params.row_mut(r).iter_mut().zip(m1).zip(m2) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps_hat);
            }
        }
    }
}

pub fn adam_step(params: &mut Matrix, grads: &Matrix, state: &mut AdamState) {
    state.step(params, grads);
}
