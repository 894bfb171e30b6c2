use crate::error::{config_err, Error, Result};
use crate::model::Parameter;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for every parameter, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(params: &[Parameter], weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamWState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            weight_decay,
        }
    }
}

/// One AdamW update with decay decoupled from the adaptive term:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`.
///
/// Gradients are checked before anything is written, so a rejected step
/// leaves parameters and state untouched.
pub fn adamw_step(params: &mut [Parameter], grads: &[&[f64]], state: &mut AdamWState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err!("learning rate must be positive and finite, got {lr}"));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.tensor.numel() {
            return Err(Error::Contract(format!(
                "gradient for {} has {} entries, parameter has {}",
                p.name,
                g.len(),
                p.tensor.numel()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {} is {} at index {i}",
                p.name, g[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let data = p.tensor.data_mut();
        for (((theta, &g), m), v) in data.iter_mut().zip(g.iter()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}

/// Half-cosine decay from `eta_max` at epoch 0 to `eta_min` at epoch `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, total_epochs: usize) -> Result<Self> {
        let s = CosineSchedule {
            eta_max,
            eta_min,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(config_err!(
                "need 0 <= lr_min <= lr_max, got lr_min {} and lr_max {}",
                self.eta_min,
                self.eta_max
            ));
        }
        if self.total_epochs == 0 {
            return Err(config_err!("schedule length must be at least one epoch"));
        }
        Ok(())
    }

    /// Endpoints are returned exactly; epochs past `T` clamp to `eta_min`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch == 0 {
            return self.eta_max;
        }
        if epoch >= self.total_epochs {
            return self.eta_min;
        }
        let phase = std::f64::consts::PI * epoch as f64 / self.total_epochs as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos())
    }
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            eta_max: 0.0005,
            eta_min: 1e-6,
            total_epochs: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the monitored value has failed to improve by more than
/// `min_delta` for more than `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    counter: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            patience,
            min_delta,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn check(&mut self, value: f64) -> StopDecision {
        if value < self.best - self.min_delta {
            self.best = value;
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        if self.counter > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

impl Default for EarlyStopper {
    fn default() -> Self {
        EarlyStopper::new(10, 1e-4)
    }
}
