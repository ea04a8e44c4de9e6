use crate::backbone::{ParameterSet, Real};

use super::TrainConfig;

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// Scales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad
        .iter()
        .map(|&g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// One AdamW update (decoupled weight decay on matrices and embeddings,
/// bias-corrected moments). `t` is the 1-based update count.
pub fn adamw_update<T: Real>(
    params: &mut ParameterSet<T>,
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
    t: u64,
) {
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - config.beta1.powf(t as f64));
    let c2 = T::lit(1.0 - config.beta2.powf(t as f64));
    let lr_t = T::lit(lr);
    let eps = T::lit(config.eps);
    let wd = T::lit(config.weight_decay);
    let decayed: Vec<(usize, usize, bool)> = params
        .tensors()
        .iter()
        .map(|s| (s.offset, s.numel(), s.shape.len() >= 2))
        .collect();
    let data = params.as_mut_slice();
    for (offset, len, decay) in decayed {
        for i in offset..offset + len {
            let g = grad[i];
            state.m[i] = b1 * state.m[i] + (one - b1) * g;
            state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
            let mhat = state.m[i] / c1;
            let vhat = state.v[i] / c2;
            let mut update = mhat / (vhat.sqrt() + eps);
            if decay {
                update += wd * data[i];
            }
            data[i] -= lr_t * update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, BackboneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_scales_to_exact_norm() {
        let mut g = vec![6.0f64, 8.0, 0.0];
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![0.1f64, 0.2];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let cfg = BackboneConfig {
            d_model: 8,
            n_heads: 2,
            t_embed_dim: 8,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = init_params::<f64, _>(&cfg, &mut rng).unwrap();
        let before = p.clone();
        let tc = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let grad = p.zeros_like();
        let mut st = AdamState::zeros(p.len());
        let lr = 0.5;
        adamw_update(&mut p, &grad, &mut st, lr, &tc, 1);
        for spec in p.tensors() {
            for i in spec.range() {
                let want = if spec.shape.len() >= 2 {
                    before.as_slice()[i] * (1.0 - lr * 0.1)
                } else {
                    before.as_slice()[i]
                };
                assert!((p.as_slice()[i] - want).abs() < 1e-15, "{}", spec.name);
            }
        }
    }
}
