use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{MspError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Adam with decoupled weight decay:
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(k, v)| (k.to_string(), vec![0.0; v.numel()])).collect();
        AdamWState { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// One update of every parameter from its grad buffer. Grads are left
    /// in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.step_with_lr(params, self.config.lr)
    }

    /// Same update at a scheduled learning rate. The configured base rate is
    /// left untouched, so a checkpointed state never depends on where in the
    /// schedule it was written.
    pub fn step_with_lr(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(MspError::Contract(format!("parameter '{name}' has no gradient")));
            }
            match self.first.get(name) {
                Some(m) if m.len() == t.numel() => {}
                _ => return Err(MspError::Contract(format!("optimizer moments do not match parameter '{name}'"))),
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let g = t.grad().expect("checked above").to_vec();
            let m = self.first.get_mut(name).expect("checked above");
            let v = self.second.get_mut(name).expect("checked above");
            for (i, theta) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * *theta;
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters under `prefix`:
/// `shadow <- decay * shadow + (1 - decay) * online`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTracker {
    pub prefix: String,
    pub decay: f64,
    pub shadow: ParamStore,
}

impl EmaTracker {
    pub fn new(online: &ParamStore, prefix: &str, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(MspError::InvalidSpec(format!("EMA decay {decay} outside [0,1]")));
        }
        let mut shadow = online.filter_prefix(prefix);
        for (_, t) in shadow.iter_mut() {
            t.set_requires_grad(false);
        }
        Ok(EmaTracker { prefix: prefix.to_string(), decay, shadow })
    }

    pub fn update(&mut self, online: &ParamStore) -> Result<()> {
        let tracked: Vec<&str> = online.names().filter(|n| n.starts_with(&self.prefix)).collect();
        if tracked.len() != self.shadow.len() || !tracked.iter().copied().eq(self.shadow.names()) {
            return Err(MspError::Contract("EMA shadow names do not mirror the online store".into()));
        }
        let m = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            let o = online.get(name)?;
            if o.shape() != s.shape() {
                return Err(MspError::Contract(format!("EMA shape mismatch for '{name}'")));
            }
            for (sv, ov) in s.data_mut().iter_mut().zip(o.data()) {
                *sv = m * *sv + (1.0 - m) * ov;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64, g: Option<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::full(&[3], v);
        if let Some(g) = g {
            t.set_grad(vec![g; 3]).unwrap();
        }
        s.insert("enc.w", t).unwrap();
        s
    }

    #[test]
    fn pure_decay() {
        let mut s = store(2.0, Some(0.0));
        let mut opt = AdamWState::new(AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() }, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("enc.w").unwrap().data(), &[2.0 * (1.0 - 0.01 * 0.1); 3]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_from_zero() {
        let mut s = store(0.0, Some(1.0));
        let mut opt = AdamWState::new(AdamWConfig { lr: 1e-3, ..Default::default() }, &s);
        opt.step(&mut s).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        for v in s.get("enc.w").unwrap().data() {
            assert!((v - expected).abs() < 1e-18);
        }
    }

    #[test]
    fn no_op_without_decay_or_grad() {
        let mut s = store(0.7, Some(0.0));
        let mut opt = AdamWState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("enc.w").unwrap().data(), &[0.7; 3]);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = store(0.0, None);
        let mut opt = AdamWState::new(AdamWConfig::default(), &s);
        let err = opt.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("enc.w"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut s = store(0.3, Some(-0.2));
            let mut opt = AdamWState::new(AdamWConfig::default(), &s);
            for _ in 0..5 {
                opt.step(&mut s).unwrap();
            }
            s.get("enc.w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ema_extremes() {
        let online = store(1.0, None);
        let mut keep = EmaTracker::new(&store(0.0, None), "enc.", 1.0).unwrap();
        keep.update(&online).unwrap();
        assert_eq!(keep.shadow.get("enc.w").unwrap().data(), &[0.0; 3]);
        let mut copy = EmaTracker::new(&store(0.0, None), "enc.", 0.0).unwrap();
        copy.update(&online).unwrap();
        assert_eq!(copy.shadow.get("enc.w").unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn ema_closed_form() {
        let online = store(1.0, None);
        let mut ema = EmaTracker::new(&store(0.0, None), "enc.", 0.999).unwrap();
        for _ in 0..100 {
            ema.update(&online).unwrap();
        }
        let expected = 1.0 - 0.999f64.powi(100);
        for v in ema.shadow.get("enc.w").unwrap().data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_mirror_violation() {
        let mut ema = EmaTracker::new(&store(0.0, None), "enc.", 0.5).unwrap();
        let mut other = ParamStore::new();
        other.insert("enc.w", Tensor::zeros(&[4])).unwrap();
        assert!(ema.update(&other).is_err());
        let mut extra = store(0.0, None);
        extra.insert("enc.z", Tensor::zeros(&[1])).unwrap();
        assert!(ema.update(&extra).is_err());
    }
}
