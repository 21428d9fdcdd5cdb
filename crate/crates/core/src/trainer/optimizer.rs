//! AdamW with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qaa_agg::QaaParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 4e-5,
            weight_decay: 1e-3,
            warmup_iters: 4000,
            max_epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate at iteration `iter` (0-based): linear ramp from 0, then
    /// constant.
    pub fn lr_at(&self, iter: u64) -> f64 {
        if self.warmup_iters == 0 || iter >= self.warmup_iters {
            self.lr
        } else {
            self.lr * iter as f64 / self.warmup_iters as f64
        }
    }
}

/// Anything exposing its tensors by name in a fixed order.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &[f64])>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

impl ParamSet for QaaParams {
    fn named_tensors(&self) -> Vec<(String, &[f64])> {
        self.tensors()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.tensors_mut()
    }
}

impl ParamSet for Vec<f64> {
    fn named_tensors(&self) -> Vec<(String, &[f64])> {
        vec![("params".to_string(), self.as_slice())]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("params".to_string(), self.as_mut_slice())]
    }
}

/// First and second moments per tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One AdamW update. Fails without touching `params` if a gradient is
/// non-finite or shapes disagree.
pub fn optimizer_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    cfg: &OptimizerConfig,
    state: &mut AdamState,
    iter: u64,
) -> Result<()> {
    let g = grads.named_tensors();
    {
        let p = params.named_tensors();
        if p.len() != g.len() {
            return Err(Error::dim("optimizer_step", format!("{} tensors", p.len()), format!("{} grads", g.len())));
        }
        for ((pn, pt), (gn, gt)) in p.iter().zip(&g) {
            if pn != gn || pt.len() != gt.len() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("{pn}[{}]", pt.len()),
                    format!("{gn}[{}]", gt.len()),
                ));
            }
        }
    }
    if let Some((name, _)) = g.iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training(format!("non-finite gradient in {name}")));
    }
    if state.m.is_empty() {
        state.m = g.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        state.v = state.m.clone();
    }
    state.steps += 1;
    let t = state.steps as i32;
    let lr = cfg.lr_at(iter);
    let decay = 1.0 - lr * cfg.weight_decay;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (k, ((_, p), (_, gt))) in params.named_tensors_mut().into_iter().zip(&g).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            let gi = gt[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        let cfg = OptimizerConfig {
            lr: 1e-3,
            warmup_iters: 200,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert_eq!(cfg.lr_at(100), 5e-4);
        assert_eq!(cfg.lr_at(200), 1e-3);
        assert_eq!(cfg.lr_at(10_000), 1e-3);
    }

    #[test]
    fn zero_grads_no_decay_is_fixed_point() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            warmup_iters: 0,
            ..Default::default()
        };
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::default();
        for it in 0..5 {
            optimizer_step(&mut p, &vec![0.0, 0.0], &cfg, &mut st, it).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.5,
            warmup_iters: 0,
            ..Default::default()
        };
        let mut p = vec![2.0];
        optimizer_step(&mut p, &vec![0.0], &cfg, &mut AdamState::default(), 0).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = vec![1.0];
        let err = optimizer_step(&mut p, &vec![f64::NAN], &OptimizerConfig::default(), &mut AdamState::default(), 0)
            .unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("params")));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = OptimizerConfig {
            lr: 0.05,
            weight_decay: 0.0,
            warmup_iters: 0,
            ..Default::default()
        };
        let mut p = vec![4.0];
        let mut st = AdamState::default();
        for it in 0..500 {
            let g = vec![2.0 * (p[0] - 1.0)];
            optimizer_step(&mut p, &g, &cfg, &mut st, it).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3, "{}", p[0]);
    }
}
