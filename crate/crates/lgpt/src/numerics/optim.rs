use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Adam with decoupled weight decay and linear warmup to a constant peak.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moments plus the step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Optimizer {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Effective learning rate at a 1-indexed step: peak·min(s/W, 1).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 {
            return self.cfg.peak_lr;
        }
        let frac = (step as f64 / self.cfg.warmup_steps as f64).min(1.0);
        self.cfg.peak_lr * frac
    }

    /// One bias-corrected update over every parameter. Gradient keys must
    /// match parameter keys exactly.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        if params.len() != grads.len() || !params.keys().eq(grads.keys()) {
            let missing: Vec<&String> = params.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<&String> = grads.keys().filter(|k| !params.contains_key(*k)).collect();
            return Err(Error::KeyMismatch(format!(
                "params without grads {:?}, grads without params {:?}",
                missing, extra
            )));
        }
        self.step += 1;
        let lr = self.lr_at(self.step);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * pd[i]);
            }
        }
        Ok(())
    }

    /// Moment tensors flattened for checkpointing, prefixed `opt.m.`/`opt.v.`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("opt.m.{}", k), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("opt.v.{}", k), t.clone());
        }
        out.insert("opt.step".into(), Tensor::scalar(self.step as f64));
        out
    }

    pub fn restore_state(&mut self, tensors: &BTreeMap<String, Tensor>) {
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("opt.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                self.v.insert(name.to_string(), t.clone());
            } else if k == "opt.step" {
                self.step = t.data()[0] as u64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_moves_by_lr() {
        // g=1, β1=0.9, β2=0.999, lr=0.1 from param 0: bias correction gives
        // m̂=v̂=1, so the step is ≈ −0.1.
        let mut opt = Optimizer::new(AdamConfig {
            peak_lr: 0.1,
            warmup_steps: 0,
            ..AdamConfig::default()
        });
        let mut params = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        opt.update(&mut params, &grads).unwrap();
        assert!((params["p"].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = Optimizer::new(AdamConfig::default());
        let mut params = BTreeMap::from([("p".to_string(), Tensor::from_vec(vec![1.5, -2.0]))]);
        let grads = BTreeMap::from([("p".to_string(), Tensor::zeros(&[2]))]);
        opt.update(&mut params, &grads).unwrap();
        assert_eq!(params["p"].data(), &[1.5, -2.0]);
    }

    #[test]
    fn warmup_is_linear() {
        let opt = Optimizer::new(AdamConfig {
            peak_lr: 1.0,
            warmup_steps: 100,
            ..AdamConfig::default()
        });
        assert!((opt.lr_at(50) - 0.5).abs() < 1e-15);
        assert!((opt.lr_at(100) - 1.0).abs() < 1e-15);
        assert!((opt.lr_at(250) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn key_mismatch_rejected() {
        let mut opt = Optimizer::new(AdamConfig::default());
        let mut params = BTreeMap::from([("a".to_string(), Tensor::scalar(0.0))]);
        let grads = BTreeMap::from([("b".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(
            opt.update(&mut params, &grads),
            Err(Error::KeyMismatch(_))
        ));
    }
}
