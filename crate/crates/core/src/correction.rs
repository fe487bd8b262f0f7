//! Server-side delay correction of stale client updates.
//!
//! A client's update was computed against `Θ^t`, but by the time it arrives
//! the server holds `Θ^τ`. The rules here map the stale update and the
//! `(Θ^t, Θ^τ)` pair to a corrected update that is re-based at `Θ^τ`.

use serde::{Deserialize, Serialize};

use crate::curve::ReparamVector;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::update::ClientUpdate;

/// Global model displacement between dispatch and arrival, replicated over
/// the three control points.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftVector {
    pub dg: ParamVector,
    pub flat: ParamVector,
}

impl DriftVector {
    /// Drift `theta_now − theta_then`.
    pub fn between(theta_then: &ParamVector, theta_now: &ParamVector) -> Result<Self> {
        if theta_then.dim() != theta_now.dim() {
            return Err(Error::DimensionMismatch { left: theta_then.dim(), right: theta_now.dim() });
        }
        let dg = theta_now - theta_then;
        let flat = ParamVector::concat(&[&dg, &dg, &dg]);
        Ok(DriftVector { dg, flat })
    }

    pub fn is_zero(&self) -> bool {
        self.dg.is_zero()
    }
}

/// Whether OrthoDC tests the whole curve update at once or each control
/// point on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrthoScope {
    #[default]
    Flat,
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectionRule {
    Identity,
    #[serde(rename = "orthodc")]
    OrthoDc {
        vartheta: f64,
        #[serde(default)]
        scope: OrthoScope,
    },
    #[serde(rename = "dcasgd")]
    DcAsgd {
        #[serde(default = "default_lambda0")]
        lambda0: f64,
        #[serde(default)]
        adaptive: bool,
    },
}

pub fn default_lambda0() -> f64 {
    2.0
}

impl CorrectionRule {
    pub fn orthodc(vartheta: f64) -> Self {
        CorrectionRule::OrthoDc { vartheta, scope: OrthoScope::Flat }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CorrectionRule::OrthoDc { vartheta, .. } if !(-1.0..=1.0).contains(&vartheta) => {
                Err(Error::Config(format!("vartheta = {vartheta} must lie in [-1, 1]")))
            }
            CorrectionRule::DcAsgd { lambda0, .. } if !(lambda0 >= 0.0 && lambda0.is_finite()) => {
                Err(Error::Config(format!("lambda0 = {lambda0} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

/// OrthoDC on flat vectors: when `cos(delta, drift) ≤ vartheta` the component
/// of `delta` along `drift` is removed, otherwise `delta` passes through. A
/// zero drift never triggers the projection. The flag reports whether the
/// projection fired.
pub fn orthodc_vector(delta: &ParamVector, drift: &ParamVector, vartheta: f64) -> Result<(ParamVector, bool)> {
    if !(-1.0..=1.0).contains(&vartheta) {
        return Err(Error::InvalidArgument(format!("vartheta = {vartheta} must lie in [-1, 1]")));
    }
    let cos = delta.cosine(drift)?;
    if drift.norm_sq() == 0.0 || cos > vartheta {
        return Ok((delta.clone(), false));
    }
    let proj = delta.project_onto(drift)?;
    Ok((delta - &proj, true))
}

/// OrthoDC applied to a curve update against the replicated drift.
pub fn orthodc(delta: &ReparamVector, drift: &DriftVector, vartheta: f64) -> Result<ReparamVector> {
    orthodc_scoped(delta, drift, vartheta, OrthoScope::Flat)
}

pub fn orthodc_scoped(
    delta: &ReparamVector,
    drift: &DriftVector,
    vartheta: f64,
    scope: OrthoScope,
) -> Result<ReparamVector> {
    if delta.dim() != drift.dg.dim() {
        return Err(Error::DimensionMismatch { left: delta.dim(), right: drift.dg.dim() });
    }
    match scope {
        OrthoScope::Flat => {
            let (out, _) = orthodc_vector(&delta.flatten(), &drift.flat, vartheta)?;
            ReparamVector::from_flat(&out)
        }
        OrthoScope::PerBlock => Ok(ReparamVector {
            da: orthodc_vector(&delta.da, &drift.dg, vartheta)?.0,
            db: orthodc_vector(&delta.db, &drift.dg, vartheta)?.0,
            dc: orthodc_vector(&delta.dc, &drift.dg, vartheta)?.0,
        }),
    }
}

const EMA_DECAY: f64 = 0.95;
const EMA_EPS: f64 = 1e-8;

/// Running mean of `g ⊙ g` used by adaptive DC-ASGD.
#[derive(Debug, Clone, Default)]
pub struct DcAsgdState {
    ema: Option<ParamVector>,
}

impl DcAsgdState {
    /// Folds `g ⊙ g` into the running average and returns the current mean.
    fn observe(&mut self, g: &ParamVector) -> f64 {
        let sq = g.hadamard(g);
        let ema = match self.ema.take() {
            None => sq,
            Some(prev) => {
                let mut next = prev.scaled(EMA_DECAY);
                next.axpy(1.0 - EMA_DECAY, &sq);
                next
            }
        };
        let mean = ema.mean_value();
        self.ema = Some(ema);
        mean
    }

    fn lambda(&mut self, g: &ParamVector, lambda0: f64, adaptive: bool) -> f64 {
        if adaptive {
            lambda0 / (EMA_EPS + self.observe(g))
        } else {
            lambda0
        }
    }
}

/// Delay-compensated gradient `g + λ_t·(g ⊙ g) ⊙ (theta_now − theta_then)`.
///
/// With `state` present, `λ_t = λ_0 / (ε + mean(EMA(g ⊙ g)))`; without it
/// `λ_t = λ_0`.
pub fn dcasgd_correct(
    g: &ParamVector,
    theta_now: &ParamVector,
    theta_then: &ParamVector,
    lambda0: f64,
    state: Option<&mut DcAsgdState>,
) -> Result<ParamVector> {
    if g.dim() != theta_now.dim() || theta_now.dim() != theta_then.dim() {
        return Err(Error::DimensionMismatch { left: g.dim(), right: theta_now.dim() });
    }
    let lambda = match state {
        Some(s) => s.lambda(g, lambda0, true),
        None => lambda0,
    };
    let shift = theta_now - theta_then;
    let mut out = g.clone();
    out.axpy(lambda, &g.hadamard(g).hadamard(&shift));
    Ok(out)
}

/// Mutable state owned by the server loop for rules that need it.
#[derive(Debug, Clone, Default)]
pub struct CorrectionState {
    pub dcasgd: DcAsgdState,
}

/// Corrects a client's curve update for the drift between its origin model
/// and the current one. The result is expressed relative to `theta_now`.
pub fn apply_correction(
    rule: &CorrectionRule,
    update: &ClientUpdate,
    current_version: u64,
    theta_now: &ParamVector,
    theta_then: &ParamVector,
    state: &mut CorrectionState,
) -> Result<ReparamVector> {
    if update.origin_version > current_version {
        return Err(Error::InvalidArgument(format!(
            "update origin version {} is ahead of the server ({current_version})",
            update.origin_version
        )));
    }
    rule.validate()?;
    let delta = &update.reparam;
    match *rule {
        CorrectionRule::Identity => Ok(delta.clone()),
        CorrectionRule::OrthoDc { vartheta, scope } => {
            let drift = DriftVector::between(theta_then, theta_now)?;
            orthodc_scoped(delta, &drift, vartheta, scope)
        }
        CorrectionRule::DcAsgd { lambda0, adaptive } => {
            // Displacements point downhill; the compensation acts on the
            // gradient-like quantity −u and is mapped back.
            let lambda = state.dcasgd.lambda(&-&delta.dc, lambda0, adaptive);
            let block = |u: &ParamVector| -> Result<ParamVector> {
                Ok(-&dcasgd_correct(&-u, theta_now, theta_then, lambda, None)?)
            };
            Ok(ReparamVector { da: block(&delta.da)?, db: block(&delta.db)?, dc: block(&delta.dc)? })
        }
    }
}
