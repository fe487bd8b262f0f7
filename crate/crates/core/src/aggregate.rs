//! Server update rules.
//!
//! Every rule consumes one [`ClientUpdate`] together with the current model
//! `Θ^τ` and the client's origin model `Θ^t`, and produces the next global
//! model. [`Server`] wraps the rules behind one interface and owns the only
//! mutable strategy state (the FedBuff buffer and the DC-ASGD running mean).

use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::correction::{apply_correction, dcasgd_correct, orthodc_vector, CorrectionRule, CorrectionState};
use crate::curve::{arc_step, BezierParams};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::update::ClientUpdate;

/// Upper clamp on the staleness scale.
pub const S_MAX: f64 = 10.0;

/// Which model a pointwise client's displacement is applied to when forming
/// its learned position on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionBase {
    /// `Θ^t + dc`: the client's own endpoint, as trained.
    #[default]
    Origin,
    /// `Θ^τ + dc`: the displacement is re-based at the current model.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(rename = "fedasync")]
    FedAsync,
    #[serde(rename = "fedbuff")]
    FedBuff { buffer_k: usize },
    #[serde(rename = "dcasgd")]
    DcAsgd { lambda0: f64, adaptive: bool },
    /// FedAsync with gradient-surgery OrthoDC (`ϑ = 0`).
    #[serde(rename = "fedgs")]
    FedGs,
    /// FedAsync with orthogonalising OrthoDC (`ϑ = 1`).
    #[serde(rename = "fedortho")]
    FedOrtho,
    #[serde(rename = "asyncbezier")]
    AsyncBezier { alpha: f64, correction: CorrectionRule },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClientWeighting {
    /// `w_i = 1 / n_clients`.
    Uniform,
    /// `w_i = n_i / Σ n_j`.
    #[default]
    Proportional,
}

impl ClientWeighting {
    pub fn weights(&self, sizes: &[usize]) -> Vec<f64> {
        match self {
            ClientWeighting::Uniform => vec![1.0 / sizes.len() as f64; sizes.len()],
            ClientWeighting::Proportional => {
                let total: usize = sizes.iter().sum();
                sizes.iter().map(|&n| n as f64 / total as f64).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// Label used in output file names and summaries.
    pub name: String,
    pub kind: StrategyKind,
    pub eta_g: f64,
    pub client_weighting: ClientWeighting,
    #[serde(default)]
    pub position_base: PositionBase,
}

impl StrategyConfig {
    pub fn new(name: impl Into<String>, kind: StrategyKind, eta_g: f64) -> Self {
        StrategyConfig {
            name: name.into(),
            kind,
            eta_g,
            client_weighting: ClientWeighting::default(),
            position_base: PositionBase::default(),
        }
    }

    pub fn fedasync(eta_g: f64) -> Self {
        Self::new("fedasync", StrategyKind::FedAsync, eta_g)
    }

    pub fn asyncbezier(eta_g: f64, alpha: f64, vartheta: f64) -> Self {
        Self::new(
            "asyncbezier",
            StrategyKind::AsyncBezier { alpha, correction: CorrectionRule::orthodc(vartheta) },
            eta_g,
        )
    }

    pub fn with_weighting(mut self, w: ClientWeighting) -> Self {
        self.client_weighting = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_g >= 0.0 && self.eta_g.is_finite()) {
            return Err(Error::Config(format!("{}: eta_g = {} must be >= 0", self.name, self.eta_g)));
        }
        match self.kind {
            StrategyKind::FedBuff { buffer_k: 0 } => {
                Err(Error::Config(format!("{}: buffer_k must be >= 1", self.name)))
            }
            StrategyKind::AsyncBezier { alpha, correction } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("{}: alpha = {alpha} must lie in [0, 1]", self.name)));
                }
                correction.validate()
            }
            StrategyKind::DcAsgd { lambda0, .. } if !(lambda0 >= 0.0) => {
                Err(Error::Config(format!("{}: lambda0 = {lambda0} must be >= 0", self.name)))
            }
            _ => Ok(()),
        }
    }

    /// Whether clients fit curves (as opposed to single models).
    pub fn trains_curves(&self) -> bool {
        matches!(self.kind, StrategyKind::AsyncBezier { .. })
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Version bookkeeping for one applied update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessInfo {
    pub t_origin: u64,
    pub tau_now: u64,
    pub s_factor: f64,
}

impl StalenessInfo {
    pub fn staleness(&self) -> u64 {
        self.tau_now - self.t_origin
    }
}

/// Unclamped `1 + α(‖Θ^τ − Θ̂^τ‖ / ‖Θ^t − Θ^τ‖ − 1)`; exactly 1 when the
/// origin and current models coincide.
pub fn staleness_scale_raw(
    theta_t: &ParamVector,
    theta_tau: &ParamVector,
    theta_hat_tau: &ParamVector,
    alpha: f64,
) -> Result<f64> {
    let drift = theta_t.distance(theta_tau)?;
    if drift == 0.0 || alpha == 0.0 {
        return Ok(1.0);
    }
    let reach = theta_tau.distance(theta_hat_tau)?;
    Ok(1.0 + alpha * (reach / drift - 1.0))
}

/// Staleness scale clamped to `(0, S_MAX]`.
pub fn staleness_scale(
    theta_t: &ParamVector,
    theta_tau: &ParamVector,
    theta_hat_tau: &ParamVector,
    alpha: f64,
) -> Result<f64> {
    Ok(staleness_scale_raw(theta_t, theta_tau, theta_hat_tau, alpha)?.clamp(f64::MIN_POSITIVE, S_MAX))
}

/// Outcome of applying one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub theta: ParamVector,
    pub s_factor: f64,
    /// Fraction of the curve (or of the displacement) that was taken.
    pub step: f64,
    pub step_clamped: bool,
    pub scale_clamped: bool,
    pub arc_fallback: bool,
}

impl StepOutcome {
    fn linear(theta: ParamVector, step: f64) -> Self {
        StepOutcome { theta, s_factor: 1.0, step, step_clamped: false, scale_clamped: false, arc_fallback: false }
    }
}

fn finite_or_diverged(theta: &ParamVector, version: u64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { version: version + 1 })
    }
}

/// Curve step: correct the client's curve for drift, re-anchor it at `Θ^τ`
/// and move along it by chord length `min(S·w·η_g, 1)` of the full chord.
#[allow(clippy::too_many_arguments)]
pub fn asyncbezier_apply(
    theta_now: &ParamVector,
    theta_then: &ParamVector,
    version: u64,
    update: &ClientUpdate,
    alpha: f64,
    eta_g: f64,
    rule: &CorrectionRule,
    state: &mut CorrectionState,
) -> Result<StepOutcome> {
    let corrected = apply_correction(rule, update, version, theta_now, theta_then, state)?;
    let mut psi = BezierParams::point(theta_now).displaced(&corrected);
    psi.a = theta_now.clone();
    let theta_hat = psi.c.clone();
    let raw = staleness_scale_raw(theta_then, theta_now, &theta_hat, alpha)?;
    let s = raw.clamp(f64::MIN_POSITIVE, S_MAX);
    let scale_clamped = s != raw;
    let wanted = s * update.weight * eta_g;
    let step = wanted.min(1.0);
    let step_clamped = wanted > 1.0;
    if step_clamped {
        debug!("curve step {wanted} clamped to 1 (client {})", update.client);
    }
    if !(step > 0.0) {
        return Ok(StepOutcome {
            theta: theta_now.clone(),
            s_factor: s,
            step: 0.0,
            step_clamped,
            scale_clamped,
            arc_fallback: false,
        });
    }
    let arc = arc_step(theta_now, &psi, step)?;
    finite_or_diverged(&arc.point, version)?;
    Ok(StepOutcome { theta: arc.point, s_factor: s, step, step_clamped, scale_clamped, arc_fallback: arc.fallback })
}

/// Server-side displacement of a pointwise client: `Θ̂ − Θ^τ` for the
/// configured position base.
pub fn position_delta(
    theta_now: &ParamVector,
    theta_then: &ParamVector,
    update: &ClientUpdate,
    base: PositionBase,
) -> ParamVector {
    match base {
        PositionBase::Current => update.reparam.dc.clone(),
        PositionBase::Origin => &(theta_then + &update.reparam.dc) - theta_now,
    }
}

/// Position step `Θ^τ + η_g·w·(Θ̂ − Θ^τ)`, optionally passing the
/// displacement through OrthoDC against the drift `Θ^τ − Θ^t` first.
pub fn fedasync_apply(
    theta_now: &ParamVector,
    theta_then: &ParamVector,
    version: u64,
    update: &ClientUpdate,
    eta_g: f64,
    base: PositionBase,
    vartheta: Option<f64>,
) -> Result<StepOutcome> {
    let mut delta = position_delta(theta_now, theta_then, update, base);
    if let Some(vt) = vartheta {
        let drift = theta_now - theta_then;
        delta = orthodc_vector(&delta, &drift, vt)?.0;
    }
    let step = eta_g * update.weight;
    let mut theta = theta_now.clone();
    theta.axpy(step, &delta);
    finite_or_diverged(&theta, version)?;
    Ok(StepOutcome::linear(theta, step))
}

/// Tangent step with delay compensation: `u − λ·u⊙u⊙(Θ^τ − Θ^t)` applied
/// with weight `η_g·w`.
#[allow(clippy::too_many_arguments)]
pub fn dcasgd_apply(
    theta_now: &ParamVector,
    theta_then: &ParamVector,
    version: u64,
    update: &ClientUpdate,
    eta_g: f64,
    lambda0: f64,
    adaptive: bool,
    state: &mut CorrectionState,
) -> Result<StepOutcome> {
    let g = -&update.reparam.dc;
    let corrected = if adaptive {
        dcasgd_correct(&g, theta_now, theta_then, lambda0, Some(&mut state.dcasgd))?
    } else {
        dcasgd_correct(&g, theta_now, theta_then, lambda0, None)?
    };
    let step = eta_g * update.weight;
    let mut theta = theta_now.clone();
    theta.axpy(-step, &corrected);
    finite_or_diverged(&theta, version)?;
    Ok(StepOutcome::linear(theta, step))
}

/// A buffered FedBuff contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedDelta {
    pub delta: ParamVector,
    pub weight: f64,
}

/// `Θ^τ + η_g·Σ w_i·δ_i / Σ w_i` over the buffer.
pub fn fedbuff_apply(buffer: &[BufferedDelta], theta_now: &ParamVector, eta_g: f64) -> Result<ParamVector> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("flush of an empty FedBuff buffer".into()));
    }
    let total: f64 = buffer.iter().map(|b| b.weight).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("FedBuff weights sum to zero".into()));
    }
    let mut mean = ParamVector::zeros(theta_now.dim());
    for b in buffer {
        mean.axpy(b.weight / total, &b.delta);
    }
    let mut theta = theta_now.clone();
    theta.axpy(eta_g, &mean);
    Ok(theta)
}

/// Arithmetic mean of the last `window` models.
pub fn swa_tail_average(history: &[ParamVector], window: usize) -> Result<ParamVector> {
    if window == 0 {
        return Err(Error::InvalidArgument("SWA window must be >= 1".into()));
    }
    if history.len() < window {
        return Err(Error::InvalidArgument(format!("SWA window {window} exceeds history of {} models", history.len())));
    }
    let tail: Vec<&ParamVector> = history[history.len() - window..].iter().collect();
    ParamVector::mean(&tail)
}

/// Server-side strategy with its mutable state.
#[derive(Debug, Clone)]
pub struct Server {
    cfg: StrategyConfig,
    buffer: Vec<BufferedDelta>,
    correction: CorrectionState,
}

impl Server {
    pub fn new(cfg: StrategyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Server { cfg, buffer: Vec::new(), correction: CorrectionState::default() })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.cfg
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Handles an arrival. Returns `None` when the update was only buffered.
    pub fn receive(
        &mut self,
        update: &ClientUpdate,
        theta_now: &ParamVector,
        version: u64,
        theta_then: &ParamVector,
    ) -> Result<Option<StepOutcome>> {
        let eta = self.cfg.eta_g;
        let base = self.cfg.position_base;
        let out = match self.cfg.kind {
            StrategyKind::FedAsync => fedasync_apply(theta_now, theta_then, version, update, eta, base, None)?,
            StrategyKind::FedGs => fedasync_apply(theta_now, theta_then, version, update, eta, base, Some(0.0))?,
            StrategyKind::FedOrtho => fedasync_apply(theta_now, theta_then, version, update, eta, base, Some(1.0))?,
            StrategyKind::DcAsgd { lambda0, adaptive } => {
                dcasgd_apply(theta_now, theta_then, version, update, eta, lambda0, adaptive, &mut self.correction)?
            }
            StrategyKind::AsyncBezier { alpha, correction } => asyncbezier_apply(
                theta_now,
                theta_then,
                version,
                update,
                alpha,
                eta,
                &correction,
                &mut self.correction,
            )?,
            StrategyKind::FedBuff { buffer_k } => {
                self.buffer.push(BufferedDelta {
                    delta: position_delta(theta_now, theta_then, update, base),
                    weight: update.weight,
                });
                if self.buffer.len() < buffer_k {
                    return Ok(None);
                }
                return self.flush(theta_now, version);
            }
        };
        Ok(Some(out))
    }

    /// Applies whatever is buffered; a no-op for unbuffered strategies.
    pub fn flush(&mut self, theta_now: &ParamVector, version: u64) -> Result<Option<StepOutcome>> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let theta = fedbuff_apply(&self.buffer, theta_now, self.cfg.eta_g)?;
        self.buffer.clear();
        finite_or_diverged(&theta, version)?;
        Ok(Some(StepOutcome::linear(theta, self.cfg.eta_g)))
    }
}
