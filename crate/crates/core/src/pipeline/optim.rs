use crate::layers::Store;

/// Adaptive moments with decoupled weight decay. Decay applies to weight matrices and kernels only;
/// biases, norm scales, learned tokens and positional embeddings are left undecayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &Store, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0f32; p.value.len()]).collect::<Vec<_>>();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients. Gradients are left untouched.
    pub fn step(&mut self, store: &mut Store, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if is_weight(&p.name, p.value.rank()) { self.weight_decay } else { 0.0 };
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
        }
    }
}

fn is_weight(name: &str, rank: usize) -> bool {
    rank >= 2 && matches!(name.rsplit('.').next(), Some("w" | "dw"))
}
