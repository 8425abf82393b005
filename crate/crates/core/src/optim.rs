//! AdamW with decoupled weight decay, global-norm gradient clipping and an
//! exponential moving average of weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        AdamW {
            config,
            step: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update of `params` given `grads` (same order and shapes).
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!("{:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let pd = p.data_mut();
            for (((w, &gr), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.first_moment.iter_mut().for_each(Tensor::round_to_f32);
        self.second_moment.iter_mut().for_each(Tensor::round_to_f32);
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(f));
    }
    norm
}

/// `shadow <- decay * shadow + (1 - decay) * current`, elementwise.
pub fn ema_update<'a, 'b>(
    shadow: impl IntoIterator<Item = &'a mut Tensor>,
    current: impl IntoIterator<Item = &'b Tensor>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Parameter(format!("EMA decay {decay} outside [0, 1]")));
    }
    let mut shadow = shadow.into_iter();
    let mut current = current.into_iter();
    loop {
        match (shadow.next(), current.next()) {
            (None, None) => return Ok(()),
            (Some(s), Some(c)) => {
                if s.shape() != c.shape() {
                    return Err(Error::Shape(format!("EMA shadow {:?} vs {:?}", s.shape(), c.shape())));
                }
                for (a, b) in s.data_mut().iter_mut().zip(c.data()) {
                    *a = decay * *a + (1.0 - decay) * b;
                }
            }
            _ => return Err(Error::Shape("EMA shadow and current differ in length".into())),
        }
    }
}
