//! Quadratic Bezier curves in parameter space: evaluation, client-side curve
//! fitting, arc-length stepping and loss profiles.
//!
//! A curve is anchored at the global model the client was dispatched with:
//! control point `A` never moves during local training, so the curve always
//! passes through that model at `t = 0`.

use std::io::{Read, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_accuracy, Batch, Dataset, LocalOptimizer, ModelSpec, Objective, OptimizerKind};
use crate::params::ParamVector;
use crate::rng::{stream_rng, Stream};

/// Control points `(A, B, C)` of a quadratic Bezier curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierParams {
    pub a: ParamVector,
    pub b: ParamVector,
    pub c: ParamVector,
}

/// Displacement of each control point from the point curve of the dispatch
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamVector {
    pub da: ParamVector,
    pub db: ParamVector,
    pub dc: ParamVector,
}

impl BezierParams {
    pub fn new(a: ParamVector, b: ParamVector, c: ParamVector) -> Result<Self> {
        for other in [&b, &c] {
            if other.dim() != a.dim() {
                return Err(Error::DimensionMismatch { left: a.dim(), right: other.dim() });
            }
        }
        Ok(BezierParams { a, b, c })
    }

    /// The degenerate curve with every control point at `theta`.
    pub fn point(theta: &ParamVector) -> Self {
        BezierParams { a: theta.clone(), b: theta.clone(), c: theta.clone() }
    }

    /// Straight segment from `a` to `c` traversed at uniform speed.
    pub fn line(a: &ParamVector, c: &ParamVector) -> Self {
        BezierParams { a: a.clone(), b: a.lerp(c, 0.5), c: c.clone() }
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn eval(&self, t: f64) -> Result<ParamVector> {
        decasteljau(self, t)
    }

    /// `self + v` control point by control point.
    pub fn displaced(&self, v: &ReparamVector) -> BezierParams {
        BezierParams { a: &self.a + &v.da, b: &self.b + &v.db, c: &self.c + &v.dc }
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector::concat(&[&self.a, &self.b, &self.c])
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }

    /// Writes the control points as three comma-separated rows `A`, `B`, `C`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in [&self.a, &self.b, &self.c] {
            let line: Vec<String> = row.as_slice().iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut rows = Vec::with_capacity(3);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for (col, field) in line.split(',').enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                    line: i as u64 + 1,
                    msg: format!("column {}: cannot parse `{}`", col + 1, field.trim()),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        line: i as u64 + 1,
                        msg: format!("column {}: non-finite value", col + 1),
                    });
                }
                row.push(v);
            }
            if let Some(first) = rows.first() {
                let first: &Vec<f64> = first;
                if row.len() != first.len() {
                    return Err(Error::Csv {
                        line: i as u64 + 1,
                        msg: format!("expected {} columns, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.len() != 3 {
            return Err(Error::Csv {
                line: rows.len() as u64,
                msg: format!("curve file needs exactly 3 rows, found {}", rows.len()),
            });
        }
        let c = ParamVector::from(rows.pop().unwrap());
        let b = ParamVector::from(rows.pop().unwrap());
        let a = ParamVector::from(rows.pop().unwrap());
        BezierParams::new(a, b, c)
    }

    /// Binary layout: magic `BZC1`, little-endian u64 dimension, then the
    /// `A`, `B`, `C` rows as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for row in [&self.a, &self.b, &self.c] {
            for x in row.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::InvalidArgument("not a binary curve file".into()));
        }
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        let dim = u64::from_le_bytes(dim) as usize;
        let mut read_row = || -> Result<ParamVector> {
            let mut row = Vec::with_capacity(dim);
            let mut buf = [0u8; 8];
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                row.push(f64::from_le_bytes(buf));
            }
            ParamVector::new(row)
        };
        let a = read_row()?;
        let b = read_row()?;
        let c = read_row()?;
        BezierParams::new(a, b, c)
    }
}

const BINARY_MAGIC: &[u8; 4] = b"BZC1";

impl ReparamVector {
    pub fn zeros(dim: usize) -> Self {
        ReparamVector { da: ParamVector::zeros(dim), db: ParamVector::zeros(dim), dc: ParamVector::zeros(dim) }
    }

    /// Displacement between two curves, `to − from`.
    pub fn between(from: &BezierParams, to: &BezierParams) -> Self {
        ReparamVector { da: &to.a - &from.a, db: &to.b - &from.b, dc: &to.c - &from.c }
    }

    pub fn dim(&self) -> usize {
        self.da.dim()
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector::concat(&[&self.da, &self.db, &self.dc])
    }

    pub fn from_flat(flat: &ParamVector) -> Result<Self> {
        let mut blocks = flat.split(3)?;
        let dc = blocks.pop().unwrap();
        let db = blocks.pop().unwrap();
        let da = blocks.pop().unwrap();
        Ok(ReparamVector { da, db, dc })
    }

    pub fn is_zero(&self) -> bool {
        self.da.is_zero() && self.db.is_zero() && self.dc.is_zero()
    }

    pub fn is_finite(&self) -> bool {
        self.da.is_finite() && self.db.is_finite() && self.dc.is_finite()
    }
}

/// Point of the quadratic Bezier curve at `t`, `(1−t)²A + 2t(1−t)B + t²C`.
///
/// Evaluated as `A + 2t(1−t)(B−A) + t²(C−A)` so that a point curve maps to
/// its point bitwise for every `t`; `t = 1` returns `C` exactly.
pub fn decasteljau(phi: &BezierParams, t: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(t));
    }
    if t == 0.0 {
        return Ok(phi.a.clone());
    }
    if t == 1.0 {
        return Ok(phi.c.clone());
    }
    let wb = 2.0 * t * (1.0 - t);
    let wc = t * t;
    let out = phi
        .a
        .as_slice()
        .iter()
        .zip(phi.b.as_slice())
        .zip(phi.c.as_slice())
        .map(|((a, b), c)| a + (wb * (b - a) + wc * (c - a)))
        .collect::<Vec<_>>();
    Ok(ParamVector::from(out))
}

/// Velocity of the curve at `t = 0`, `2(B − A)`.
pub fn curve_tangent_at_zero(phi: &BezierParams) -> ParamVector {
    (&phi.b - &phi.a).scaled(2.0)
}

/// Initial middle control point for the uniform-sampling phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BInit {
    /// Leave `B` where the endpoint phase left it (at the dispatch model).
    Global,
    /// Reset `B` to the chord midpoint `(A + C)/2`.
    #[default]
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveTrainConfig {
    /// Epochs with `t` fixed at 1 (plain proximal training of `C`).
    pub k_sgd: usize,
    /// Epochs with `t ~ U[0, 1]` per minibatch.
    pub k_curve: usize,
    /// Proximal coefficient towards the dispatch model.
    pub mu: f64,
    pub eta_l: f64,
    pub b_init: BInit,
    pub samples_per_batch_draw: usize,
    /// Minibatch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for CurveTrainConfig {
    fn default() -> Self {
        CurveTrainConfig {
            k_sgd: 2,
            k_curve: 2,
            mu: 0.001,
            eta_l: 0.001,
            b_init: BInit::Midpoint,
            samples_per_batch_draw: 1,
            batch_size: Some(32),
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl CurveTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_sgd == 0 && self.k_curve == 0 {
            return Err(Error::InvalidArgument("k_sgd and k_curve cannot both be 0".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu = {} must be >= 0", self.mu)));
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta_l = {} must be > 0", self.eta_l)));
        }
        if self.samples_per_batch_draw == 0 {
            return Err(Error::InvalidArgument("samples_per_batch_draw must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Identifies one local training round so every random draw in it comes
/// from streams keyed by (run seed, client, round, epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundKey {
    pub seed: u64,
    pub client: usize,
    pub round: u64,
}

impl RoundKey {
    pub fn new(seed: u64, client: usize, round: u64) -> Self {
        RoundKey { seed, client, round }
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = stream_rng(self.seed, Stream::Batching, &[self.client as u64, self.round, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }
}

fn minibatches(order: &[usize], batch_size: Option<usize>) -> Vec<&[usize]> {
    match batch_size {
        Some(bs) if bs < order.len() => order.chunks(bs).collect(),
        _ => vec![order],
    }
}

fn prox_eval<O: Objective>(
    objective: &O,
    theta: &ParamVector,
    anchor: &ParamVector,
    mu: f64,
    batch: &[usize],
) -> Result<(f64, ParamVector)> {
    let mut eval = objective.loss_and_grad(theta, Batch::Indices(batch))?;
    if mu > 0.0 {
        let diff = theta - anchor;
        eval.loss += 0.5 * mu * diff.norm_sq();
        eval.gradient.axpy(mu, &diff);
    }
    Ok((eval.loss, eval.gradient))
}

/// Runs `epochs` epochs of proximal minibatch training on a single point,
/// starting at epoch index `first_epoch` for the shuffling streams.
#[allow(clippy::too_many_arguments)]
fn point_epochs<O: Objective>(
    objective: &O,
    point: &mut ParamVector,
    anchor: &ParamVector,
    cfg: &CurveTrainConfig,
    opt: &mut LocalOptimizer,
    key: RoundKey,
    first_epoch: usize,
    epochs: usize,
) -> Result<()> {
    let n = objective.n_samples();
    for epoch in first_epoch..first_epoch + epochs {
        let order = key.epoch_order(n, epoch);
        for batch in minibatches(&order, cfg.batch_size) {
            let (_, grad) = prox_eval(objective, point, anchor, cfg.mu, batch)?;
            opt.step(point, &grad);
        }
        if !point.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    Ok(())
}

/// Proximal local training of a single model for `epochs` epochs; returns
/// the trained model. This is the client procedure of the pointwise
/// baselines and the endpoint phase of curve training.
pub fn train_local<O: Objective>(
    objective: &O,
    theta_global: &ParamVector,
    epochs: usize,
    cfg: &CurveTrainConfig,
    key: RoundKey,
) -> Result<ParamVector> {
    check_inputs(objective, theta_global)?;
    let mut point = theta_global.clone();
    let mut opt = LocalOptimizer::new(cfg.optimizer, cfg.eta_l, point.dim());
    point_epochs(objective, &mut point, theta_global, cfg, &mut opt, key, 0, epochs)?;
    Ok(point)
}

fn check_inputs<O: Objective>(objective: &O, theta: &ParamVector) -> Result<()> {
    if theta.dim() != objective.dim() {
        return Err(Error::DimensionMismatch { left: theta.dim(), right: objective.dim() });
    }
    theta.ensure_finite("dispatched global model")?;
    if objective.n_samples() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Loss and control-point gradients of the sampled curve objective at a
/// fixed `t`: `∂/∂B = 2t(1−t)·g`, `∂/∂C = t²·g`, with `g` the proximal
/// parameter-space gradient at the curve point.
pub fn curve_point_gradients<O: Objective>(
    objective: &O,
    phi: &BezierParams,
    anchor: &ParamVector,
    mu: f64,
    t: f64,
    batch: &[usize],
) -> Result<(f64, ParamVector, ParamVector)> {
    let point = decasteljau(phi, t)?;
    let (loss, g) = prox_eval(objective, &point, anchor, mu, batch)?;
    Ok((loss, g.scaled(2.0 * t * (1.0 - t)), g.scaled(t * t)))
}

/// Fits a curve anchored at `theta_global` on the client's objective.
///
/// Endpoint phase: `k_sgd` epochs with `t = 1`, which only moves `C`.
/// Curve phase: `B` is optionally reset to the chord midpoint, then `k_curve`
/// epochs draw `t ~ U[0, 1]` per minibatch and update `B` and `C` by the
/// chain rule. `A` stays at `theta_global`, and the proximal anchor is
/// `theta_global` throughout.
pub fn train_curve<O: Objective>(
    objective: &O,
    theta_global: &ParamVector,
    cfg: &CurveTrainConfig,
    key: RoundKey,
) -> Result<ReparamVector> {
    cfg.validate()?;
    check_inputs(objective, theta_global)?;
    let start = BezierParams::point(theta_global);
    let dim = theta_global.dim();

    let mut c = theta_global.clone();
    let mut opt_c = LocalOptimizer::new(cfg.optimizer, cfg.eta_l, dim);
    point_epochs(objective, &mut c, theta_global, cfg, &mut opt_c, key, 0, cfg.k_sgd)?;

    let mut phi = BezierParams { a: theta_global.clone(), b: theta_global.clone(), c };
    if cfg.k_curve > 0 {
        if cfg.b_init == BInit::Midpoint {
            phi.b = phi.a.lerp(&phi.c, 0.5);
        }
        let mut opt_b = LocalOptimizer::new(cfg.optimizer, cfg.eta_l, dim);
        let mut t_rng = stream_rng(key.seed, Stream::CurveSampling, &[key.client as u64, key.round]);
        let n = objective.n_samples();
        let draws = cfg.samples_per_batch_draw;
        for epoch in cfg.k_sgd..cfg.k_sgd + cfg.k_curve {
            let order = key.epoch_order(n, epoch);
            for batch in minibatches(&order, cfg.batch_size) {
                let mut gb = ParamVector::zeros(dim);
                let mut gc = ParamVector::zeros(dim);
                for _ in 0..draws {
                    let t: f64 = t_rng.random();
                    let (_, db, dc) = curve_point_gradients(objective, &phi, theta_global, cfg.mu, t, batch)?;
                    gb += &db;
                    gc += &dc;
                }
                if draws > 1 {
                    gb = gb.scaled(1.0 / draws as f64);
                    gc = gc.scaled(1.0 / draws as f64);
                }
                opt_b.step(&mut phi.b, &gb);
                opt_c.step(&mut phi.c, &gc);
            }
            if !phi.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
        }
    } else if cfg.b_init == BInit::Midpoint {
        phi.b = phi.a.lerp(&phi.c, 0.5);
    }
    if !phi.is_finite() {
        return Err(Error::TrainingDiverged { epoch: cfg.k_sgd + cfg.k_curve });
    }
    Ok(ReparamVector::between(&start, &phi))
}

/// Result of stepping along a curve by chord length.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcStep {
    pub point: ParamVector,
    /// Curve parameter that was used.
    pub s: f64,
    /// True when the chord length was not monotone in `s` and the step fell
    /// back to `s = step`.
    pub fallback: bool,
}

const MONOTONE_GRID: usize = 33;

/// Moves from `anchor` along `psi` to the point whose distance from `anchor`
/// is `step` times the distance of the far endpoint.
pub fn arc_step(anchor: &ParamVector, psi: &BezierParams, step: f64) -> Result<ArcStep> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!("arc step {step} outside (0, 1]")));
    }
    if anchor.dim() != psi.dim() {
        return Err(Error::DimensionMismatch { left: anchor.dim(), right: psi.dim() });
    }
    let total = psi.c.distance(anchor)?;
    if total == 0.0 {
        return Ok(ArcStep { point: anchor.clone(), s: 0.0, fallback: false });
    }
    if step == 1.0 {
        return Ok(ArcStep { point: psi.c.clone(), s: 1.0, fallback: false });
    }
    let chord = |s: f64| -> Result<f64> { decasteljau(psi, s)?.distance(anchor) };

    let mut grid = Vec::with_capacity(MONOTONE_GRID);
    for i in 0..MONOTONE_GRID {
        let s = i as f64 / (MONOTONE_GRID - 1) as f64;
        grid.push((s, chord(s)?));
    }
    let monotone = grid.windows(2).all(|w| w[1].1 >= w[0].1);
    if !monotone {
        warn!("chord length not monotone along curve; stepping linearly in s = {step}");
        return Ok(ArcStep { point: decasteljau(psi, step)?, s: step, fallback: true });
    }

    let target = step * total;
    let k = grid.iter().position(|&(_, d)| d >= target).unwrap_or(MONOTONE_GRID - 1);
    let (mut lo, mut hi) = (grid[k.saturating_sub(1)].0, grid[k].0);
    let tol = 1e-10 * target;
    let mut s = hi;
    for _ in 0..200 {
        s = 0.5 * (lo + hi);
        let d = chord(s)?;
        if (d - target).abs() <= tol || hi - lo <= f64::EPSILON {
            break;
        }
        if d < target {
            lo = s;
        } else {
            hi = s;
        }
    }
    Ok(ArcStep { point: decasteljau(psi, s)?, s, fallback: false })
}

/// Full-batch loss at `n_points` evenly spaced curve parameters.
pub fn loss_profile(spec: &ModelSpec, phi: &BezierParams, data: &Dataset, n_points: usize) -> Result<Vec<(f64, f64)>> {
    if n_points < 2 {
        return Err(Error::InvalidArgument("a loss profile needs at least 2 points".into()));
    }
    (0..n_points)
        .map(|i| {
            let t = i as f64 / (n_points - 1) as f64;
            let (loss, _) = loss_and_accuracy(spec, &decasteljau(phi, t)?, data)?;
            Ok((t, loss))
        })
        .collect()
}

/// `(t, curve loss, chord loss)` where the chord is the straight line
/// between the curve's endpoints.
pub fn compare_profiles(
    spec: &ModelSpec,
    phi: &BezierParams,
    data: &Dataset,
    n_points: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let curve = loss_profile(spec, phi, data, n_points)?;
    let line = loss_profile(spec, &BezierParams::line(&phi.a, &phi.c), data, n_points)?;
    Ok(curve.into_iter().zip(line).map(|((t, b), (_, l))| (t, b, l)).collect())
}
