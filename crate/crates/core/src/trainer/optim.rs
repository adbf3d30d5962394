use crate::model::Params;
use crate::numkernel::Tensor;

/// Adam with decoupled weight decay. Decay applies to matrices only; vectors (gains,
/// biases, the start query) are left alone.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(
        params: &Params<Tensor<f32>>,
        betas: [f64; 2],
        epsilon: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .slots()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            beta1: betas[0],
            beta2: betas[1],
            epsilon,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. `grads` follow the canonical slot order.
    pub fn step(&mut self, params: &mut Params<Tensor<f32>>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.epsilon as f32;
        let shrink = (1.0 - lr * self.weight_decay) as f32;
        for (((p, g), m), v) in params
            .slots_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = p.shape().len() == 2;
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if decay {
                    *w *= shrink;
                }
                *w -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients, computed in double precision.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}
