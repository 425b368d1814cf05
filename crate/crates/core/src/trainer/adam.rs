use crate::numcore::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }

    /// Forgets the moments of one row of parameter `index`.
    pub fn reset_row(&mut self, index: usize, row: usize) {
        let cols = self.m[index].cols();
        for buf in [&mut self.m[index], &mut self.v[index]] {
            buf.data_mut()[row * cols..(row + 1) * cols].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Matrix::row_vector(&[1.0, -2.0, 0.5]).unwrap();
        let g = Matrix::row_vector(&[3.0, -0.1, 0.0]).unwrap();
        let mut adam = Adam::new(&[p.shape()]);
        adam.update(&mut [&mut p], &[g], 0.01);
        // with bias correction the first step is lr * g / (|g| + eps)
        let want = [1.0 - 0.01 * 3.0 / (3.0 + EPSILON), -2.0 + 0.01 * 0.1 / (0.1 + EPSILON), 0.5];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_hand_rolled_second_step() {
        let mut p = Matrix::row_vector(&[0.0]).unwrap();
        let mut adam = Adam::new(&[(1, 1)]);
        let g1 = 0.5;
        let g2 = -1.5;
        adam.update(&mut [&mut p], &[Matrix::row_vector(&[g1]).unwrap()], 0.1);
        adam.update(&mut [&mut p], &[Matrix::row_vector(&[g2]).unwrap()], 0.1);

        let mut w = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, g1), (2, g2)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - w).abs() < 1e-15);
    }
}
