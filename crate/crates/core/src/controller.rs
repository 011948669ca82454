//! Nonlinear PI scheduler for the router-loss weight λ.

use crate::error::{M2mError, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Which training signal the controller consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    #[default]
    Rmse,
    TotalLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// When false λ stays at `lambda0` for the whole run.
    pub enabled: bool,
    pub kp: f64,
    pub ki: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda0: f64,
    pub target: f64,
    pub feedback: Feedback,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kp: 0.001,
            ki: 0.001,
            lambda_min: 0.0,
            lambda_max: 1.0,
            lambda0: 0.0,
            target: 0.0,
            feedback: Feedback::Rmse,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.kp, self.ki, self.lambda_min, self.lambda_max, self.lambda0, self.target]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(M2mError::InvalidConfig("controller values must be finite".into()));
        }
        if self.lambda_min >= self.lambda_max {
            return Err(M2mError::InvalidConfig(format!(
                "lambda_min {} must be below lambda_max {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.kp <= 0.0 || self.ki < 0.0 {
            return Err(M2mError::InvalidConfig("controller needs kp > 0 and ki >= 0".into()));
        }
        if self.lambda0 < self.lambda_min || self.lambda0 > self.lambda_max {
            return Err(M2mError::InvalidConfig(format!(
                "lambda0 {} lies outside [{}, {}]",
                self.lambda0, self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }
}

/// Mutable controller state between epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub lambda: f64,
    pub integral: f64,
    /// Unclamped λ of the previous step; `None` before the first step.
    pub prev_raw: Option<f64>,
    pub t: usize,
}

impl ControllerState {
    pub fn new(config: &ControllerConfig) -> Self {
        Self {
            lambda: config.lambda0,
            integral: 0.0,
            prev_raw: None,
            t: 0,
        }
    }
}

/// One row of the controller trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub t: usize,
    pub loss: f64,
    pub e: f64,
    pub p: f64,
    pub i: f64,
    pub lambda: f64,
}

/// Proportional term `kp / (1 + exp(e))`.
pub fn proportional(kp: f64, e: f64) -> f64 {
    kp / (1.0 + e.exp())
}

/// Advances the controller by one feedback sample. Pure in `(config, state, loss)`.
pub fn step(config: &ControllerConfig, state: &ControllerState, loss: f64) -> Result<(ControllerState, ControllerRecord)> {
    if !loss.is_finite() {
        return Err(M2mError::NonFinite(format!("controller feedback {loss}")));
    }
    let t = state.t + 1;
    if !config.enabled {
        let next = ControllerState {
            lambda: config.lambda0,
            integral: state.integral,
            prev_raw: Some(config.lambda0),
            t,
        };
        let rec = ControllerRecord {
            t,
            loss,
            e: loss - config.target,
            p: 0.0,
            i: state.integral,
            lambda: config.lambda0,
        };
        return Ok((next, rec));
    }
    let e = loss - config.target;
    let p = proportional(config.kp, e);
    let inside = match state.prev_raw {
        None => true,
        Some(raw) => config.lambda_min < raw && raw < config.lambda_max,
    };
    let integral = if inside { state.integral - config.ki * e } else { state.integral };
    let raw = p + integral + config.lambda_min;
    let lambda = raw.clamp(config.lambda_min, config.lambda_max);
    let next = ControllerState {
        lambda,
        integral,
        prev_raw: Some(raw),
        t,
    };
    Ok((
        next,
        ControllerRecord {
            t,
            loss,
            e,
            p,
            i: integral,
            lambda,
        },
    ))
}

/// Stateful wrapper recording every step.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    state: ControllerState,
    trace: Vec<ControllerRecord>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let state = ControllerState::new(&config);
        Ok(Self {
            config,
            state,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn lambda(&self) -> f64 {
        self.state.lambda
    }

    pub fn trace(&self) -> &[ControllerRecord] {
        &self.trace
    }

    pub fn step(&mut self, loss: f64) -> Result<ControllerRecord> {
        let (state, rec) = step(&self.config, &self.state, loss)?;
        self.state = state;
        self.trace.push(rec);
        Ok(rec)
    }
}

/// Writes `t,loss,e,P,I,lambda` rows.
pub fn write_trace_csv<W: Write>(records: &[ControllerRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,loss,e,P,I,lambda")?;
    for r in records {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.t, r.loss, r.e, r.p, r.i, r.lambda)?;
    }
    Ok(())
}
