//! Adam with a single step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Add `weight_decay · param` to the gradient (L2) instead of applying
    /// it as a separate lr-scaled term.
    pub coupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 3e-4,
            coupled_weight_decay: false,
        }
    }
}

/// `base` until `decay_epoch`, then `base · factor` for good.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub decay_epoch: usize,
    pub factor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_epoch: 10,
            factor: 0.1,
        }
    }
}

impl StepSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.base_lr
        } else {
            self.base_lr * self.factor
        }
    }
}

/// Adam moments for a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            t: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn zero_grads(&self, store: &mut ParamStore) {
        store.zero_grads(&self.params);
    }

    /// One update of every owned parameter. A parameter without a gradient
    /// buffer is treated as having a zero gradient. Weight decay skips
    /// biases and batch-norm parameters.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            let e = store.entry(id);
            if let Some(g) = e.tensor.grad() {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        e.name.clone(),
                        format!("non-finite gradient {bad}"),
                    ));
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            coupled_weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, &id) in self.params.iter().enumerate() {
            let entry = store.entry(id);
            let wd = if entry.kind == ParamKind::Weight {
                weight_decay
            } else {
                0.0
            };
            let grad = entry.tensor.grad().map(<[f64]>::to_vec);
            let tensor = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let mut g = grad.as_ref().map_or(0.0, |g| g[i]);
                if coupled_weight_decay {
                    g += wd * data[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut update = m_hat / (v_hat.sqrt() + eps);
                if !coupled_weight_decay {
                    update += wd * data[i];
                }
                data[i] -= lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64, kind: ParamKind) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![value]), Group::Extractor, kind);
        store.get_mut(id).accumulate_grad(&[grad]);
        (store, id)
    }

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = one_param(1.0, 0.4, ParamKind::Weight);
        let mut opt = Adam::new(&store, vec![id], cfg(0.0));
        opt.step(&mut store).unwrap();
        let p = store.get(id).data()[0];
        // m̂ = 0.4, v̂ = 0.16 → update = 0.4 / (0.4 + 1e-8)
        let want = 1.0 - 1e-3 * 0.4 / (0.4 + 1e-8);
        assert!((p - want).abs() < 1e-15);
        assert!((p - 0.999).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = one_param(1.0, 0.0, ParamKind::Weight);
        let mut opt = Adam::new(&store, vec![id], cfg(0.0));
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    #[test]
    fn decay_only_step() {
        let (mut store, id) = one_param(1.0, 0.0, ParamKind::Weight);
        let mut opt = Adam::new(&store, vec![id], cfg(3e-4));
        opt.step(&mut store).unwrap();
        assert!((store.get(id).data()[0] - (1.0 - 3e-7)).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_biases_and_norm() {
        for kind in [ParamKind::Bias, ParamKind::Norm] {
            let (mut store, id) = one_param(1.0, 0.0, kind);
            let mut opt = Adam::new(&store, vec![id], cfg(3e-4));
            opt.step(&mut store).unwrap();
            assert_eq!(store.get(id).data()[0], 1.0);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, id) = one_param(1.0, f64::NAN, ParamKind::Weight);
        let mut opt = Adam::new(&store, vec![id], cfg(0.0));
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    #[test]
    fn schedule_decays_once() {
        let s = StepSchedule::default();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(9), 1e-3);
        assert!((s.lr(10) - 1e-4).abs() < 1e-18);
        assert_eq!(s.lr(50), s.lr(10));
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add(
            "p",
            Tensor::from_vec(vec![0.0]),
            Group::Extractor,
            ParamKind::Bias,
        );
        let mut opt = Adam::new(&store, vec![id], AdamConfig::default());
        let mut steps = 0;
        while steps < 5000 {
            let p = store.get(id).data()[0];
            if (p - 3.0).abs() < 1e-2 {
                break;
            }
            opt.zero_grads(&mut store);
            store.get_mut(id).accumulate_grad(&[2.0 * (p - 3.0)]);
            opt.step(&mut store).unwrap();
            steps += 1;
        }
        assert!((store.get(id).data()[0] - 3.0).abs() < 1e-2, "{steps}");
    }

    #[test]
    fn zero_grads_is_idempotent() {
        let (mut store, id) = one_param(1.0, 0.5, ParamKind::Weight);
        let opt = Adam::new(&store, vec![id], cfg(0.0));
        opt.zero_grads(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[0.0]);
        opt.zero_grads(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[0.0]);
    }
}
