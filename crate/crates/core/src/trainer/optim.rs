use crate::network::{Conv, Model, Real};

/// Global L2 norm over all gradient tensors.
pub fn global_norm<T: Real>(grads: &[Conv<T>]) -> f64 {
    grads
        .iter()
        .map(|c| c.weight.sum_squares() + c.bias.sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Conv<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for c in grads.iter_mut() {
            c.weight.scale(s);
            c.bias.scale(s);
        }
    }
    norm
}

/// Step decay: `lr · decay^(epoch / every)` with integer division.
pub fn learning_rate(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    let drops = epoch.checked_div(every).unwrap_or(0);
    base * decay.powi(drops as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of a model.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Conv<f64>>,
    v: Vec<Conv<f64>>,
}

impl Adam {
    pub fn new<T: Real>(model: &Model<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Conv<f64>> = model.arch().convs().iter().map(Conv::zeros).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<T: Real>(&mut self, model: &mut Model<T>, grads: &[Conv<T>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let apply = |p: &mut [T], g: &[T], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = T::of(p[i].as_f64() - lr * mh / (vh.sqrt() + eps));
            }
        };
        for (i, conv) in model.convs_mut().iter_mut().enumerate() {
            apply(
                conv.weight.data_mut(),
                grads[i].weight.data(),
                self.m[i].weight.data_mut(),
                self.v[i].weight.data_mut(),
            );
            apply(
                conv.bias.data_mut(),
                grads[i].bias.data(),
                self.m[i].bias.data_mut(),
                self.v[i].bias.data_mut(),
            );
        }
    }
}
