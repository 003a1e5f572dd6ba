//! Learning-rate schedule, AdamW and the EMA shadow.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Tri-stage schedule: linear warmup from `warmup_start·lr` to `lr`, a
/// constant hold, then cosine decay to `final_factor·lr`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainSchedule {
    pub total_steps: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub decay_frac: f64,
    pub warmup_start: f64,
    pub final_factor: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_steps: 5000,
            lr: 3e-4,
            warmup_frac: 0.05,
            hold_frac: 0.10,
            decay_frac: 0.85,
            warmup_start: 0.1,
            final_factor: 0.5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let sum = self.warmup_frac + self.hold_frac + self.decay_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("schedule fractions sum to {sum}, not 1")));
        }
        if [self.warmup_frac, self.hold_frac, self.decay_frac].iter().any(|f| *f < 0.0) {
            return Err(Error::Config("negative schedule fraction".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }

    /// Learning rate at `step`. Steps past the end hold the final value.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps as f64;
        let s = (step as f64).min(total);
        let warm_end = self.warmup_frac * total;
        let hold_end = warm_end + self.hold_frac * total;
        let lo = self.warmup_start * self.lr;
        let end = self.final_factor * self.lr;
        if step >= self.total_steps {
            return end;
        }
        if s < warm_end {
            return lo + (self.lr - lo) * s / warm_end;
        }
        if s < hold_end {
            return self.lr;
        }
        let span = total - hold_end;
        if span <= 0.0 {
            return end;
        }
        let frac = (s - hold_end) / span;
        end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Decoupled weight decay Adam. Decay applies only to parameters flagged
/// with `decay` (weights, not norm gains or biases).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads[i]` belongs to parameter `i`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} optimizer slots",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (param, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != param.value.len() {
                return Err(Error::shape("adamw", format!("gradient for {} has wrong size", param.name)));
            }
            let decay = if param.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in param.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 - decay)·params`.
pub fn update_ema(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::Contract("EMA shadow and parameters differ in count".into()));
    }
    for (s, p) in shadow.iter_mut().zip(params.iter()) {
        if s.value.shape() != p.value.shape() {
            return Err(Error::shape("update_ema", format!("{} changed shape", p.name)));
        }
        for (a, &b) in s.value.data_mut().iter_mut().zip(p.value.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn schedule_endpoints() {
        let s = TrainSchedule {
            total_steps: 1000,
            lr: 1.0,
            ..TrainSchedule::default()
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(50), 1.0);
        assert_eq!(s.lr_at(100), 1.0);
        assert_eq!(s.lr_at(149), 1.0);
        assert_eq!(s.lr_at(1000), 0.5);
        assert!((s.lr_at(25) - 0.55).abs() < 1e-12);
        assert!((s.lr_at(575) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = TrainSchedule::default();
        let lrs: Vec<f64> = (0..=5000).map(|k| s.lr_at(k)).collect();
        assert!(lrs[..250].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[250..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let s = TrainSchedule {
            hold_frac: 0.2,
            ..TrainSchedule::default()
        };
        assert!(s.validate().is_err());
        assert!(TrainSchedule::default().validate().is_ok());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut rng = Rng::new(0);
        let mut ps = ParamStore::new();
        ps.weight("w", 1, 3, 1.0, &mut rng);
        ps.bias("b", 2);
        let before: Vec<Tensor> = ps.iter().map(|p| p.value.clone()).collect();
        let mut opt = AdamW::new(&ps, 0.9, 0.95, 0.0);
        let grads = vec![Tensor::row(&[1.0, -2.0, 0.5]), Tensor::row(&[0.0, 3.0])];
        opt.update(&mut ps, &grads, 0.01).unwrap();
        let after: Vec<Tensor> = ps.iter().map(|p| p.value.clone()).collect();
        let moved: Vec<f64> = after[0].data().iter().zip(before[0].data()).map(|(a, b)| a - b).collect();
        for (d, g) in moved.iter().zip([1.0, -2.0, 0.5]) {
            assert!((d + 0.01 * f64::signum(g)).abs() < 1e-9);
        }
        assert_eq!(after[1].data()[0], 0.0);
    }

    #[test]
    fn decay_skips_flagged_parameters() {
        let mut rng = Rng::new(1);
        let mut ps = ParamStore::new();
        ps.weight("w", 1, 2, 1.0, &mut rng);
        ps.gain("g", 2);
        let before: Vec<Tensor> = ps.iter().map(|p| p.value.clone()).collect();
        let mut opt = AdamW::new(&ps, 0.9, 0.95, 0.5);
        opt.update(&mut ps, &[Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])], 0.1).unwrap();
        let w = ps.iter().next().unwrap().value.clone();
        for (a, b) in w.data().iter().zip(before[0].data()) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-12);
        }
        assert_eq!(ps.iter().nth(1).unwrap().value, before[1]);
    }

    #[test]
    fn ema_limits() {
        let mut rng = Rng::new(2);
        let mut a = ParamStore::new();
        a.weight("w", 2, 2, 1.0, &mut rng);
        let mut b = ParamStore::new();
        b.weight("w", 2, 2, 1.0, &mut rng);
        let mut shadow = a.clone();
        update_ema(&mut shadow, &b, 1.0).unwrap();
        assert_eq!(shadow.iter().next().unwrap().value, a.iter().next().unwrap().value);
        update_ema(&mut shadow, &b, 0.0).unwrap();
        assert_eq!(shadow.iter().next().unwrap().value, b.iter().next().unwrap().value);
    }
}
