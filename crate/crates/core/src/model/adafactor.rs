//! Adafactor with factored second moments, update clipping and relative
//! step sizes.

use serde::{Deserialize, Serialize};

use super::blocks::{Block, Blocks};
use crate::error::{Error, Result};

/// Added to the reconstructed second moment before the square root.
pub const PRECONDITION_EPS: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdafactorConfig {
    /// Fixed learning rate; `None` selects the relative step `min(1e-2, 1/sqrt(t))`.
    pub lr: Option<f64>,
    /// Multiply the step by `max(eps2, RMS(param))`.
    pub scale_parameter: bool,
    pub eps1: f64,
    pub eps2: f64,
    pub clip_threshold: f64,
    /// Second-moment decay `1 - t^-decay_rate`.
    pub decay_rate: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        AdafactorConfig {
            lr: None,
            scale_parameter: true,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            decay_rate: 0.8,
        }
    }
}

impl AdafactorConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config("clip_threshold must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config("decay_rate must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Second-moment accumulator for one block: row and column means of the
/// squared gradient for matrices, the full vector otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Moment {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full { v: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMoment {
    pub name: String,
    pub moment: Moment,
}

impl NamedMoment {
    fn zeros_for(block: &Block) -> Self {
        let moment = if block.is_matrix() {
            let (r, c) = block.dims2();
            Moment::Factored {
                row: vec![0.0; r],
                col: vec![0.0; c],
            }
        } else {
            Moment::Full {
                v: vec![0.0; block.data.len()],
            }
        };
        NamedMoment {
            name: block.name.clone(),
            moment,
        }
    }

    fn matches(&self, block: &Block) -> bool {
        if self.name != block.name {
            return false;
        }
        match &self.moment {
            Moment::Factored { row, col } => block.is_matrix() && block.dims2() == (row.len(), col.len()),
            Moment::Full { v } => !block.is_matrix() && v.len() == block.data.len(),
        }
    }

    /// Writes `g / sqrt(v_hat + eps)` into `out`.
    fn precondition_into(&self, g: &[f64], out: &mut [f64]) {
        match &self.moment {
            Moment::Full { v } => {
                for ((o, &gi), &vi) in out.iter_mut().zip(g).zip(v) {
                    *o = gi / (vi + PRECONDITION_EPS).sqrt();
                }
            }
            Moment::Factored { row, col } => {
                let mean_row = row.iter().sum::<f64>() / row.len() as f64;
                let cols = col.len();
                for (i, &r) in row.iter().enumerate() {
                    let rf = if mean_row > 0.0 { r / mean_row } else { 0.0 };
                    for (j, &c) in col.iter().enumerate() {
                        let k = i * cols + j;
                        out[k] = g[k] / (rf * c + PRECONDITION_EPS).sqrt();
                    }
                }
            }
        }
    }

    /// Per-component preconditioner weights `1 / (v_hat + eps)`, i.e. the
    /// factor that turns `<a, b>` into the dot product of the preconditioned
    /// vectors.
    pub fn inverse_second_moment(&self) -> Vec<f64> {
        match &self.moment {
            Moment::Full { v } => v.iter().map(|vi| 1.0 / (vi + PRECONDITION_EPS)).collect(),
            Moment::Factored { row, col } => {
                let mean_row = row.iter().sum::<f64>() / row.len() as f64;
                let mut out = Vec::with_capacity(row.len() * col.len());
                for &r in row {
                    let rf = if mean_row > 0.0 { r / mean_row } else { 0.0 };
                    out.extend(col.iter().map(|&c| 1.0 / (rf * c + PRECONDITION_EPS)));
                }
                out
            }
        }
    }

    fn accumulate(&mut self, g: &[f64], beta2: f64, eps1: f64) {
        match &mut self.moment {
            Moment::Full { v } => {
                for (vi, &gi) in v.iter_mut().zip(g) {
                    *vi = beta2 * *vi + (1.0 - beta2) * (gi * gi + eps1);
                }
            }
            Moment::Factored { row, col } => {
                let (rows, cols) = (row.len(), col.len());
                let mut row_mean = vec![0.0; rows];
                let mut col_mean = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let sq = g[i * cols + j] * g[i * cols + j] + eps1;
                        row_mean[i] += sq;
                        col_mean[j] += sq;
                    }
                }
                for (r, m) in row.iter_mut().zip(row_mean) {
                    *r = beta2 * *r + (1.0 - beta2) * m / cols as f64;
                }
                for (c, m) in col.iter_mut().zip(col_mean) {
                    *c = beta2 * *c + (1.0 - beta2) * m / rows as f64;
                }
            }
        }
    }
}

/// Optimizer state: the step counter and one accumulator per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdafactorState {
    pub step: u64,
    pub moments: Vec<NamedMoment>,
}

impl AdafactorState {
    pub fn new(params: &Blocks) -> Self {
        AdafactorState {
            step: 0,
            moments: params.iter().map(NamedMoment::zeros_for).collect(),
        }
    }

    pub fn moment(&self, name: &str) -> Result<&NamedMoment> {
        self.moments
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::MissingAccumulator(name.to_string()))
    }

    /// Fails unless there is exactly one well-shaped accumulator per block.
    pub fn check(&self, params: &Blocks) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} accumulators for {} blocks",
                self.moments.len(),
                params.len()
            )));
        }
        for (m, b) in self.moments.iter().zip(params.iter()) {
            if !m.matches(b) {
                return Err(Error::Shape(format!("accumulator {} does not match block {}", m.name, b.name)));
            }
        }
        Ok(())
    }

    /// `g / sqrt(v_hat + eps)` block by block, with the same reconstruction
    /// the optimizer uses for its update.
    pub fn precondition(&self, grads: &Blocks) -> Result<Blocks> {
        let mut out = Blocks::zeros_like(grads);
        for (i, block) in grads.iter().enumerate() {
            let moment = self.moment(&block.name)?;
            if !moment.matches(block) {
                return Err(Error::Shape(format!("accumulator {} does not match gradient shape", block.name)));
            }
            moment.precondition_into(&block.data, &mut out.at_mut(i).data);
        }
        Ok(out)
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Adafactor {
    pub config: AdafactorConfig,
}

impl Adafactor {
    pub fn new(config: AdafactorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adafactor { config })
    }

    fn step_size(&self, t: u64, param: &[f64]) -> f64 {
        let base = self
            .config
            .lr
            .unwrap_or_else(|| (1e-2f64).min(1.0 / (t as f64).sqrt()));
        if self.config.scale_parameter {
            base * self.config.eps2.max(rms(param))
        } else {
            base
        }
    }

    /// One update with gradient `grads`; advances the step counter.
    pub fn step(&self, params: &mut Blocks, state: &mut AdafactorState, grads: &Blocks) -> Result<()> {
        state.check(params)?;
        state.step += 1;
        let t = state.step;
        let beta2 = 1.0 - (t as f64).powf(-self.config.decay_rate);
        let mut update = Vec::new();
        for (i, moment) in state.moments.iter_mut().enumerate() {
            let g = &grads.at(i).data;
            moment.accumulate(g, beta2, self.config.eps1);
            update.resize(g.len(), 0.0);
            moment.precondition_into(g, &mut update);
            let denom = (rms(&update) / self.config.clip_threshold).max(1.0);
            let param = &mut params.at_mut(i).data;
            let alpha = self.step_size(t, param);
            for (p, u) in param.iter_mut().zip(&update) {
                *p -= alpha * u / denom;
            }
        }
        Ok(())
    }
}
