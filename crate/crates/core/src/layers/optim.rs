//! Adam with bias correction, step-decay learning rate, global-norm clipping.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    /// Zeroed moments for parameters of the given element counts.
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let b_ok = |b: f64| b > 0.0 && b < 1.0;
        if !b_ok(config.beta1) || !b_ok(config.beta2) {
            return Err(Error::Config(format!("adam betas must lie in (0, 1): {config:?}")));
        }
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Ok(Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        })
    }
}

/// Applies one bias-corrected Adam update in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "adam got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return shape_err(format!("adam slot {i}: param {:?} vs grad {:?}", p.shape(), g.shape()));
        }
    }
    state.step_count += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
            let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            *pv = T::from_f64(pv.to_f64() - step);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Piecewise-constant learning rate: `base_lr * decay_ratio^k` where `k` is
/// the number of milestones at or before the iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_ratio: f64,
    pub milestones: Vec<usize>,
    pub total_iters: usize,
}

impl LrSchedule {
    pub const FULL_TOTAL: usize = 100_000;
    pub const FULL_MILESTONES: [usize; 3] = [50_000, 75_000, 85_000];

    pub fn new(base_lr: f64, decay_ratio: f64, milestones: Vec<usize>, total_iters: usize) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly increasing: {milestones:?}")));
        }
        if milestones.last().is_some_and(|&m| m >= total_iters) {
            return Err(Error::Config(format!(
                "milestones {milestones:?} must be below total_iters {total_iters}"
            )));
        }
        if !(base_lr > 0.0) || !(decay_ratio > 0.0) {
            return Err(Error::Config("learning rate and decay ratio must be positive".into()));
        }
        Ok(Self {
            base_lr,
            decay_ratio,
            milestones,
            total_iters,
        })
    }

    /// 0.001 decayed by 0.1 at 50k/75k/85k over 100k iterations.
    pub fn full() -> Self {
        Self::new(0.001, 0.1, Self::FULL_MILESTONES.to_vec(), Self::FULL_TOTAL)
            .expect("reference schedule is valid")
    }

    /// The reference milestones scaled to `total_iters`.
    pub fn scaled(total_iters: usize) -> Self {
        let milestones: Vec<usize> = Self::FULL_MILESTONES
            .iter()
            .map(|&m| m * total_iters / Self::FULL_TOTAL)
            .filter(|&m| m > 0)
            .collect::<Vec<_>>();
        let mut dedup = milestones;
        dedup.dedup();
        Self::new(0.001, 0.1, dedup, total_iters.max(1)).expect("scaled schedule is valid")
    }

    pub fn lr_at(&self, iteration: usize) -> Result<f64> {
        if iteration >= self.total_iters {
            return Err(Error::Usage(format!(
                "iteration {iteration} outside schedule of {} iterations",
                self.total_iters
            )));
        }
        let passed = self.milestones.iter().filter(|&&m| m <= iteration).count();
        Ok(self.base_lr * self.decay_ratio.powi(passed as i32))
    }
}
