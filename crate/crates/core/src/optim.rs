//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use crate::graph::{Gradients, Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Linear warmup to `max_lr`, then cosine decay to `min_lr` at
    /// `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.max_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Only matrices named `*.weight` are decayed.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, p)| Mat::zeros(p.raw_dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        let c = self.config;
        let norm = params
            .ids()
            .filter_map(|id| grads.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match c.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let decay = decays(params.name(id));
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            if decay && c.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * c.weight_decay));
            }
            let Some(g) = grads.get(id) else { continue };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            max_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr_at(9) - 1e-3).abs() < 1e-15);
        assert!(s.lr_at(0) < s.lr_at(5));
        assert!((s.lr_at(60) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
        assert!((s.lr_at(110) - 1e-5).abs() < 1e-15);
        assert!((s.lr_at(500) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x.weight", Mat::from_elem((1, 2), 3.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                grad_clip: None,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let val = g.value(x).clone();
                let loss = g.loss(val.iter().map(|v| v * v).sum(), vec![x], vec![val * 2.0]);
                g.backward(loss)
            };
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn decay_only_on_weights() {
        assert!(decays("head.embed.weight"));
        assert!(!decays("head.embed.bias"));
        assert!(!decays("image.ln_final.gamma"));
    }
}
