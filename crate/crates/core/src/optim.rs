use serde::{Deserialize, Serialize};

/// Adam with bias correction. Masked-out entries are left untouched,
/// moments included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn with_lr(n: usize, lr: f64) -> Self {
        Self::new(n, lr, 0.9, 0.999)
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], mask: Option<&[bool]>) {
        assert_eq!(x.len(), g.len());
        assert_eq!(x.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut a = Adam::with_lr(2, 0.1);
        let mut x = vec![1.0, 1.0];
        a.step(&mut x, &[3.0, -0.5], None);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((x[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-14);
        assert!((x[1] - (1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-14);
    }

    #[test]
    fn masked_entries_are_bitwise_frozen() {
        let mut a = Adam::with_lr(2, 0.1);
        let mut x = vec![0.3, 0.7];
        for _ in 0..5 {
            a.step(&mut x, &[1.0, 1.0], Some(&[true, false]));
        }
        assert_eq!(x[1].to_bits(), 0.7f64.to_bits());
        assert_eq!(a.m[1], 0.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut a = Adam::with_lr(3, 0.0);
        let mut x = vec![0.1, -2.0, 5.0];
        let before = x.clone();
        a.step(&mut x, &[1.0, -1.0, 0.5], None);
        assert_eq!(x, before);
    }
}
