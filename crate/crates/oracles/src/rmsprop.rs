/// Textbook RMSProp with the epsilon added after the square root.
pub struct RmsPropReference {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub square_avg: Vec<f64>,
}

impl RmsPropReference {
    pub fn new(n: usize, lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            square_avg: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for i in 0..params.len() {
            let g = grads[i];
            self.square_avg[i] = self.alpha * self.square_avg[i] + (1.0 - self.alpha) * g * g;
            params[i] -= self.lr * g / (self.square_avg[i].sqrt() + self.eps);
        }
    }
}
