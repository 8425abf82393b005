//! Variance-preserving noise schedule, forward noising and the
//! noise-prediction training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::tensor::Tensor;

/// Linear-beta schedule settings; enough to rebuild a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 200 steps; betas are the usual 1e-4..0.02 range stretched by 1000/200
    /// so the terminal state is still noise dominated.
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    signal_coef: Vec<f64>,
    noise_coef: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.signal_coef.len()
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// `sqrt(alpha_bar_t)`.
    pub fn signal(&self, t: usize) -> f64 {
        self.signal_coef[t]
    }

    /// `sqrt(1 - alpha_bar_t)`.
    pub fn noise(&self, t: usize) -> f64 {
        self.noise_coef[t]
    }

    pub fn signal_coefs(&self) -> &[f64] {
        &self.signal_coef
    }

    pub fn noise_coefs(&self) -> &[f64] {
        &self.noise_coef
    }

    pub fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Index {
                index: t,
                len: self.steps(),
            });
        }
        Ok(())
    }

    /// Checks monotonicity, variance preservation and a noise-dominated end state.
    pub fn check_invariants(&self) -> Result<()> {
        for w in self.signal_coef.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Parameter("signal coefficients not strictly decreasing".into()));
            }
        }
        for w in self.noise_coef.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Parameter("noise coefficients not strictly increasing".into()));
            }
        }
        for (s, n) in self.signal_coef.iter().zip(&self.noise_coef) {
            if (s * s + n * n - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter("schedule is not variance preserving".into()));
            }
        }
        if *self.signal_coef.last().unwrap() > 0.05 {
            return Err(Error::Parameter(format!(
                "terminal signal coefficient {} exceeds 0.05",
                self.signal_coef.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps, with
/// `signal[t] = sqrt(prod_{i<=t} (1 - beta_i))`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end {
        return Err(Error::Parameter(format!(
            "need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut alpha_bar = 1.0;
    let mut signal_coef = Vec::with_capacity(steps);
    let mut noise_coef = Vec::with_capacity(steps);
    for i in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
        };
        alpha_bar *= 1.0 - beta;
        signal_coef.push(alpha_bar.sqrt());
        noise_coef.push((1.0 - alpha_bar).sqrt());
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        signal_coef,
        noise_coef,
    })
}

/// `signal[t] * y0 + noise[t] * epsilon`, elementwise.
pub fn forward_noise(y0: &Image, t: usize, epsilon: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    schedule.check_index(t)?;
    if y0.dims() != epsilon.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match image {:?}",
            epsilon.dims(),
            y0.dims()
        )));
    }
    let (a, s) = (schedule.signal(t), schedule.noise(t));
    let data = y0
        .data()
        .iter()
        .zip(epsilon.data())
        .map(|(y, e)| a * y + s * e)
        .collect();
    let (h, w, c) = y0.dims();
    Image::new(h, w, c, data)
}

/// Batched [`forward_noise`] over `[N, ...]` tensors with one timestep per sample.
pub fn forward_noise_batch(y0: &Tensor, t: &[usize], epsilon: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if y0.shape() != epsilon.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match batch {:?}",
            epsilon.shape(),
            y0.shape()
        )));
    }
    let n = y0.shape()[0];
    if t.len() != n {
        return Err(Error::Shape(format!("{} timesteps for a batch of {n}", t.len())));
    }
    let per = y0.len() / n;
    let mut out = Vec::with_capacity(y0.len());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_index(ti)?;
        let (a, s) = (schedule.signal(ti), schedule.noise(ti));
        let ys = &y0.data()[i * per..(i + 1) * per];
        let es = &epsilon.data()[i * per..(i + 1) * per];
        out.extend(ys.iter().zip(es).map(|(y, e)| a * y + s * e));
    }
    Tensor::from_vec(y0.shape(), out)
}

/// Noise-prediction loss: mean squared error between `predict(y_t)` and the
/// true noise, with `y_t` built from `target`, `t` and `epsilon`.
///
/// `predict` receives the noised batch and returns the predicted-noise node;
/// it captures whatever conditioning the predictor needs.
pub fn training_loss<F>(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    target: &Tensor,
    t: &[usize],
    epsilon: &Tensor,
    predict: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, &Tensor) -> Result<Var>,
{
    let noisy = forward_noise_batch(target, t, epsilon, schedule)?;
    let pred = predict(g, &noisy)?;
    if g.shape(pred) != epsilon.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs noise {:?}",
            g.shape(pred),
            epsilon.shape()
        )));
    }
    if !g.value(pred).is_finite() {
        return Err(Error::Numeric("predictor produced non-finite values".into()));
    }
    Ok(g.mse_loss(pred, epsilon))
}
