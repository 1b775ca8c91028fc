/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    seen: Vec<i32>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            seen: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length differs from parameters");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Lazy variant for sparse gradients: entries with an exactly zero gradient keep their
    /// moments and value, and bias correction counts only the steps an entry took part in.
    pub fn step_lazy(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length differs from parameters");
        if self.seen.len() != params.len() {
            self.seen = vec![0; params.len()];
        }
        self.t += 1;
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            self.seen[i] += 1;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / (1.0 - self.beta1.powi(self.seen[i]));
            let vh = self.v[i] / (1.0 - self.beta2.powi(self.seen[i]));
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [1.0, -2.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(3, 0.05);
        let target = [0.3, -1.0, 2.0];
        let mut p = [0.0; 3];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            a.step(&mut p, &g);
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3);
        }
    }

    #[test]
    fn lazy_step_skips_unobserved_entries() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [1.0, 1.0];
        for _ in 0..20 {
            a.step_lazy(&mut p, &[1.0, 0.0]);
        }
        assert_eq!(p[1], 1.0);
        let before = p[0];
        a.step_lazy(&mut p, &[0.0, 5.0]);
        assert_eq!(p[0], before);
        assert!((p[1] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut a = Adam::new(2, 0.1);
        let mut p = [0.5, 0.25];
        a.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, [0.5, 0.25]);
    }
}
