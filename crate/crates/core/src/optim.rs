//! ADAM with bias correction.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub const EPS: f64 = 1e-8;

    pub fn new(num_params: usize, lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: Self::EPS,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_two_iterates_on_quadratic() {
        // f(x, y) = x^2 + 3 y^2, gradient (2x, 6y)
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, lr, (b1, b2));
        let grad = |p: &[f64]| vec![2.0 * p[0], 6.0 * p[1]];

        // step 1 by hand: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        let g1 = grad(&p);
        let expect1: Vec<f64> = p
            .iter()
            .zip(&g1)
            .map(|(x, g)| x - lr * g / (g.abs() + eps))
            .collect();
        opt.step(&mut p, &g1);
        for (a, b) in p.iter().zip(&expect1) {
            assert!((a - b).abs() < 1e-12);
        }

        // step 2 by hand
        let g2 = grad(&p);
        let expect2: Vec<f64> = (0..2)
            .map(|i| {
                let m = b1 * ((1.0 - b1) * g1[i]) + (1.0 - b1) * g2[i];
                let v = b2 * ((1.0 - b2) * g1[i] * g1[i]) + (1.0 - b2) * g2[i] * g2[i];
                let m_hat = m / (1.0 - b1 * b1);
                let v_hat = v / (1.0 - b2 * b2);
                p[i] - lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect();
        opt.step(&mut p, &g2);
        for (a, b) in p.iter().zip(&expect2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = vec![3.0, -1.0];
        let mut opt = Adam::new(2, 0.05, (0.9, 0.999));
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 6.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }
}
