//! AdamW with decoupled weight decay.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.lr.is_finite()
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW config {self:?}")))
        }
    }
}

/// First/second moments per parameter and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Step count (u64 LE), tensor count (u32 LE), then `m` and `v` snapshots.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            t.write_snapshot(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8)
            .and_then(|_| r.read_exact(&mut b4))
            .map_err(|e| Error::Format(format!("optimizer state header: {e}")))?;
        let n = u32::from_le_bytes(b4) as usize;
        let m = (0..n)
            .map(|_| Tensor::read_snapshot(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let v = (0..n)
            .map(|_| Tensor::read_snapshot(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Format("moment shapes disagree".into()));
        }
        Ok(Self {
            m,
            v,
            t: u64::from_le_bytes(b8),
        })
    }
}

/// One AdamW update of `params` in place.
///
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`, with the decay term using the
/// pre-update θ and independent of the gradient.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adamw_step(count)",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adamw_step", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() {
            return Err(Error::dim("adamw_step(state)", p.shape(), m.shape()));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            let old = *theta;
            *theta = old - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * old;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    /// Textbook Adam written out independently, scalar at a time.
    fn reference_adam(theta0: f64, grads: &[f64], c: &AdamWConfig) -> f64 {
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            th = th - c.lr * mh / (vh.sqrt() + c.eps) - c.lr * c.weight_decay * th;
        }
        th
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_hand_computation() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = OptimizerState::new(&[&p]);
        let c = cfg(0.1, 0.0);
        adamw_step(&mut [&mut p], &[Tensor::vector(vec![1.0])], &mut st, &c).unwrap();
        assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = Tensor::vector(vec![2.0]);
        let mut st = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[1])], &mut st, &cfg(0.1, 0.5)).unwrap();
        assert!((p.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // f(θ) = (θ-3)², g = 2(θ-3)
        let c = cfg(0.05, 0.01);
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = OptimizerState::new(&[&p]);
        let mut grads = Vec::new();
        for _ in 0..5 {
            let g = 2.0 * (p.data()[0] - 3.0);
            grads.push(g);
            adamw_step(&mut [&mut p], &[Tensor::vector(vec![g])], &mut st, &c).unwrap();
        }
        assert!((p.data()[0] - reference_adam(0.0, &grads, &c)).abs() < 1e-15);
    }

    #[test]
    fn without_decay_equals_adam_on_random_trajectories() {
        let c = cfg(1e-2, 0.0);
        for seed in 0..20 {
            let draws = Tensor::random_normal(&[50], 1.0, RngStream::new(seed, 0));
            let mut p = Tensor::vector(vec![0.3]);
            let mut st = OptimizerState::new(&[&p]);
            for &g in draws.data() {
                adamw_step(&mut [&mut p], &[Tensor::vector(vec![g])], &mut st, &c).unwrap();
            }
            assert!((p.data()[0] - reference_adam(0.3, draws.data(), &c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let mut st = OptimizerState::new(&[&p]);
        let r = adamw_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, &cfg(0.1, 0.0));
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn deterministic_and_serializable() {
        let run = || {
            let mut p = Tensor::random_normal(&[4, 3], 1.0, RngStream::new(1, 1));
            let mut st = OptimizerState::new(&[&p]);
            for i in 0..3 {
                let g = Tensor::random_normal(&[4, 3], 1.0, RngStream::new(2, i));
                adamw_step(&mut [&mut p], &[g], &mut st, &cfg(1e-3, 0.01)).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.to_snapshot_bytes(), b.to_snapshot_bytes());
        let mut bytes = Vec::new();
        sa.write_to(&mut bytes).unwrap();
        assert_eq!(OptimizerState::read_from(bytes.as_slice()).unwrap(), sb);
    }

    #[test]
    fn config_validation() {
        assert!(AdamWConfig::default().validate().is_ok());
        assert!(AdamWConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { eps: 0.0, ..Default::default() }.validate().is_err());
    }
}
