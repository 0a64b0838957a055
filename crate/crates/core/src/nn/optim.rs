use ndarray::{Array2, Zip};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over `(value, grad)` slots. Slot order must be stable
    /// across calls; moment buffers are matched by position.
    pub fn step(&mut self, slots: Vec<(&mut Array2<f64>, &Array2<f64>)>) {
        if self.moments.is_empty() {
            self.moments = slots
                .iter()
                .map(|(v, _)| (Array2::zeros(v.raw_dim()), Array2::zeros(v.raw_dim())))
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            slots.len(),
            "parameter set changed between steps"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        for ((value, grad), (m, v)) in slots.into_iter().zip(self.moments.iter_mut()) {
            Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * wd * *w;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
