//! Estimators for the number of fiber stages `r` and the wireless delay `tau`.
//!
//! Linear regime: the concentrated Gaussian log-likelihood is minimised over
//! a two-dimensional `(r, tau)` grid, with the complex amplitude projected
//! out in closed form. Frequency-selective fibers make the noise covariance
//! depend on `r`; those observations are prewhitened per candidate `r`.
//!
//! Nonlinear regime: a least-squares fit of the time-domain cascade model
//! over `[|A|, phi, tau, r]`, searched by particle swarm optimisation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::wrap_phase;
use crate::error::{Error, Result};
use crate::fiber::{b_factors, powered_response, FrequencyGrid, UnitFiberResponse};
use crate::signal::{
    effective_noise_variance, nonlinear_cascade, time_domain_input, wireless_input, PaParams, PilotSequence,
    WirelessLink,
};

/// Noise model used by the ML objective and the Fisher information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRegime {
    /// Unit loop gain in every bin: noise variance `(r + 1) sigma2`.
    Flat,
    /// Per-bin loop gain `b_k != 1`: geometric noise accumulation.
    Selective,
}

/// Everything the CU knows about a linear chain except `(A, tau, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub pilot: PilotSequence,
    pub fiber: UnitFiberResponse,
    pub gain: f64,
    pub noise_var: f64,
}

impl LinearModel {
    pub fn new(pilot: PilotSequence, fiber: UnitFiberResponse, gain: f64, noise_var: f64) -> Result<Self> {
        if pilot.len() != fiber.grid().len() {
            return Err(Error::invalid("pilot length differs from the fiber grid"));
        }
        if !(gain > 0.0) || !gain.is_finite() {
            return Err(Error::invalid("PA gain must be positive"));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::invalid("noise variance must be >= 0"));
        }
        Ok(Self {
            pilot,
            fiber,
            gain,
            noise_var,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        self.fiber.grid()
    }

    pub fn b_factors(&self) -> Vec<f64> {
        // Gain is validated at construction.
        b_factors(&self.fiber, self.gain).unwrap_or_default()
    }

    /// Per-bin noise variance of the chosen regime at `r` stages.
    pub fn noise_variance(&self, r: f64, regime: NoiseRegime) -> Result<Vec<f64>> {
        match regime {
            NoiseRegime::Flat => {
                if !(r >= 0.0) {
                    return Err(Error::invalid("r must be >= 0"));
                }
                Ok(vec![(r + 1.0) * self.noise_var; self.grid().len()])
            }
            NoiseRegime::Selective => effective_noise_variance(&self.b_factors(), r, self.noise_var),
        }
    }

    /// `G^(r+1) H_k^r s_k`: the delay-free part of the model vector.
    fn shaped_pilot(&self, r: f64) -> Result<Vec<Complex64>> {
        let hr = powered_response(&self.fiber, r)?;
        let g = self.gain.powf(r + 1.0);
        Ok(hr.iter().zip(self.pilot.symbols()).map(|(h, s)| g * h * s).collect())
    }
}

/// `g_k = G^(r+1) exp(-j 2 pi f_k tau) H_k^r s_k`.
pub fn g_vector(r: f64, tau: f64, model: &LinearModel) -> Result<Vec<Complex64>> {
    let base = model.shaped_pilot(r)?;
    Ok(base
        .iter()
        .zip(model.grid().freqs())
        .map(|(&b, &f)| b * Complex64::from_polar(1.0, -2.0 * PI * f * tau))
        .collect())
}

fn inner(g: &[Complex64], y: &[Complex64]) -> Complex64 {
    g.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// Least-squares amplitude `g^H y / ||g||^2`.
pub fn a_hat(y: &[Complex64], g: &[Complex64]) -> Result<Complex64> {
    if y.len() != g.len() {
        return Err(Error::invalid("y and g differ in length"));
    }
    let gg = norm_sqr(g);
    if !(gg > 0.0) {
        return Err(Error::DegenerateModel("model vector is zero".into()));
    }
    Ok(inner(g, y) / gg)
}

/// `||y - P_g y||^2` for the rank-one projector onto `g`.
pub fn projection_residual(y: &[Complex64], g: &[Complex64]) -> Result<f64> {
    let a = a_hat(y, g)?;
    Ok(y.iter().zip(g).map(|(yk, gk)| (yk - a * gk).norm_sqr()).sum())
}

/// Concentrated negative log-likelihood for a flat fiber:
/// `K ln((r + 1) pi sigma2) + ||y - P_g y||^2 / ((r + 1) sigma2)`.
pub fn ml_objective_flat(y: &[Complex64], r: f64, tau: f64, model: &LinearModel) -> Result<f64> {
    let var = (r + 1.0) * model.noise_var;
    if !(var > 0.0) {
        return Err(Error::DegenerateNoise("flat objective needs sigma2 > 0".into()));
    }
    let g = g_vector(r, tau, model)?;
    let k = y.len() as f64;
    Ok(k * (PI * var).ln() + projection_residual(y, &g)? / var)
}

/// Divides every bin of `y` and `g` by the square root of its variance.
pub fn prewhiten(y: &[Complex64], g: &[Complex64], variance: &[f64]) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if y.len() != variance.len() || g.len() != variance.len() {
        return Err(Error::invalid("prewhitening inputs differ in length"));
    }
    if variance.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateNoise("a bin has zero noise variance".into()));
    }
    let w: Vec<f64> = variance.iter().map(|v| v.sqrt().recip()).collect();
    Ok((
        y.iter().zip(&w).map(|(a, s)| a * s).collect(),
        g.iter().zip(&w).map(|(a, s)| a * s).collect(),
    ))
}

/// Concentrated negative log-likelihood with the `r`-dependent covariance:
/// `ln det(pi Sigma(r)) + ||y~ - P_g~ y~||^2` on prewhitened data.
pub fn ml_objective_selective(y: &[Complex64], r: f64, tau: f64, model: &LinearModel) -> Result<f64> {
    let var = model.noise_variance(r, NoiseRegime::Selective)?;
    let g = g_vector(r, tau, model)?;
    let (yw, gw) = prewhiten(y, &g, &var)?;
    let log_det: f64 = var.iter().map(|v| (PI * v).ln()).sum();
    Ok(log_det + projection_residual(&yw, &gw)?)
}

/// Rectangular `(r, tau)` search lattice. Points are `min + i * step` up to
/// `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid2D {
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_step: f64,
}

fn axis(min: f64, max: f64, step: f64) -> Vec<f64> {
    let n = ((max - min) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| min + i as f64 * step).collect()
}

impl SearchGrid2D {
    pub fn validate(&self) -> Result<()> {
        let all = [self.r_min, self.r_max, self.r_step, self.tau_min, self.tau_max, self.tau_step];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("search grid bounds must be finite"));
        }
        if self.r_min < 0.0 {
            return Err(Error::invalid("r_min must be >= 0"));
        }
        if !(self.r_min < self.r_max && self.tau_min < self.tau_max) {
            return Err(Error::invalid("search grid needs min < max on both axes"));
        }
        if !(self.r_step > 0.0 && self.tau_step > 0.0) {
            return Err(Error::invalid("search grid steps must be positive"));
        }
        if self.r_values().len() < 2 || self.tau_values().len() < 2 {
            return Err(Error::invalid("search grid needs at least two points per axis"));
        }
        Ok(())
    }

    pub fn r_values(&self) -> Vec<f64> {
        axis(self.r_min, self.r_max, self.r_step)
    }

    pub fn tau_values(&self) -> Vec<f64> {
        axis(self.tau_min, self.tau_max, self.tau_step)
    }

    /// Default resolutions: `dtau = 1 / (8 B)` and `dr = 0.1`.
    pub fn with_default_steps(grid: &FrequencyGrid, r_max: f64, tau_min: f64, tau_max: f64) -> Self {
        Self {
            r_min: 0.0,
            r_max,
            r_step: 0.1,
            tau_min,
            tau_max,
            tau_step: 1.0 / (8.0 * grid.bandwidth()),
        }
    }
}

/// Outcome of one estimator run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamEstimate {
    pub a_hat: Complex64,
    pub tau_hat: f64,
    pub r_hat: f64,
    pub r_hat_rounded: usize,
    pub objective: f64,
    pub evaluations: u64,
}

fn round_stages(r: f64) -> usize {
    r.max(0.0).round() as usize
}

/// Per-`r` sufficient statistics: with `c_k = conj(h_k) y_k / v_k`, the
/// objective at delay `tau` is `log_det + yy - |sum_k c_k e^{j 2 pi (f_k - f_0) tau}|^2 / hh`.
struct RSlice {
    log_det: f64,
    yy: f64,
    hh: f64,
    c: Vec<Complex64>,
}

fn r_slice(y: &[Complex64], r: f64, regime: NoiseRegime, model: &LinearModel) -> Result<RSlice> {
    let var = model.noise_variance(r, regime)?;
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateNoise("ML search needs sigma2 > 0".into()));
    }
    let h = model.shaped_pilot(r)?;
    let hh: f64 = h.iter().zip(&var).map(|(a, v)| a.norm_sqr() / v).sum();
    if !(hh > 0.0) {
        return Err(Error::DegenerateModel(format!("model vector vanishes at r = {r}")));
    }
    Ok(RSlice {
        log_det: var.iter().map(|v| (PI * v).ln()).sum(),
        yy: y.iter().zip(&var).map(|(a, v)| a.norm_sqr() / v).sum(),
        hh,
        c: h.iter().zip(y).zip(&var).map(|((a, b), v)| a.conj() * b / v).collect(),
    })
}

/// Exhaustive search of the concentrated likelihood over `search`.
///
/// Ties resolve to the smallest `r`, then the smallest `tau`. The amplitude
/// is the (prewhitened) projection at the winning cell.
pub fn ml_grid_search(
    y: &[Complex64],
    search: &SearchGrid2D,
    regime: NoiseRegime,
    model: &LinearModel,
) -> Result<ParamEstimate> {
    search.validate()?;
    if y.len() != model.grid().len() {
        return Err(Error::invalid("observation length differs from grid"));
    }
    let rs = search.r_values();
    let taus = search.tau_values();
    let f0 = model.grid().freqs()[0];
    let rel: Vec<f64> = model.grid().freqs().iter().map(|f| f - f0).collect();
    let phasors: Vec<Vec<Complex64>> = taus
        .iter()
        .map(|&t| rel.iter().map(|&f| Complex64::from_polar(1.0, 2.0 * PI * f * t)).collect())
        .collect();

    let per_r: Vec<(f64, usize)> = rs
        .par_iter()
        .map(|&r| -> Result<(f64, usize)> {
            let s = r_slice(y, r, regime, model)?;
            let base = s.log_det + s.yy;
            let mut best = (f64::INFINITY, 0);
            for (i, e) in phasors.iter().enumerate() {
                let z: Complex64 = s.c.iter().zip(e).map(|(a, b)| a * b).sum();
                let v = base - z.norm_sqr() / s.hh;
                if v < best.0 {
                    best = (v, i);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;

    let mut best = (f64::INFINITY, 0usize, 0usize);
    for (ri, &(v, ti)) in per_r.iter().enumerate() {
        if v < best.0 {
            best = (v, ri, ti);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::DegenerateModel("objective is not finite anywhere on the grid".into()));
    }
    let (r_hat, tau_hat) = (rs[best.1], taus[best.2]);
    let g = g_vector(r_hat, tau_hat, model)?;
    let var = model.noise_variance(r_hat, regime)?;
    let (yw, gw) = prewhiten(y, &g, &var)?;
    Ok(ParamEstimate {
        a_hat: a_hat(&yw, &gw)?,
        tau_hat,
        r_hat,
        r_hat_rounded: round_stages(r_hat),
        objective: best.0,
        evaluations: (rs.len() * taus.len()) as u64,
    })
}

/// Recentring passes allowed per zoom level.
const MAX_RECENTRES: usize = 64;

/// Grid search followed by `levels` zoom passes. Each pass searches a
/// 17 x 17 lattice at a quarter of the previous step, spanning two previous
/// steps either side of the incumbent and clipped to the original bounds.
/// While the best point sits on the lattice edge the lattice is recentred
/// at the same step, so long diagonal valleys are followed rather than cut.
pub fn ml_refined_search(
    y: &[Complex64],
    search: &SearchGrid2D,
    regime: NoiseRegime,
    model: &LinearModel,
    levels: usize,
) -> Result<ParamEstimate> {
    let mut est = ml_grid_search(y, search, regime, model)?;
    let mut evaluations = est.evaluations;
    let (mut dr, mut dt) = (search.r_step / 4.0, search.tau_step / 4.0);
    for _ in 0..levels {
        for _ in 0..MAX_RECENTRES {
            let r_lo = (est.r_hat - 8.0 * dr).max(search.r_min);
            let r_hi = (est.r_hat + 8.0 * dr).min(search.r_max);
            let t_lo = (est.tau_hat - 8.0 * dt).max(search.tau_min);
            let t_hi = (est.tau_hat + 8.0 * dt).min(search.tau_max);
            let zoom = SearchGrid2D {
                r_min: r_lo,
                r_max: r_hi.max(r_lo + dr),
                r_step: dr,
                tau_min: t_lo,
                tau_max: t_hi.max(t_lo + dt),
                tau_step: dt,
            };
            let next = ml_grid_search(y, &zoom, regime, model)?;
            evaluations += next.evaluations;
            if next.objective >= est.objective {
                break;
            }
            let interior = |v: f64, lo: f64, hi: f64, bound_lo: f64, bound_hi: f64, step: f64| {
                let tol = 0.5 * step;
                !((v - lo).abs() < tol && lo > bound_lo) && !((hi - v).abs() < tol && hi < bound_hi)
            };
            let settled = interior(next.r_hat, zoom.r_min, zoom.r_max, search.r_min, search.r_max, dr)
                && interior(next.tau_hat, zoom.tau_min, zoom.tau_max, search.tau_min, search.tau_max, dt);
            est = next;
            if settled {
                break;
            }
        }
        dr /= 4.0;
        dt /= 4.0;
    }
    est.evaluations = evaluations;
    Ok(est)
}

/// Everything the CU knows about a nonlinear chain except `[|A|, phi, tau, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearModel {
    pub pilot: PilotSequence,
    pub fiber: UnitFiberResponse,
    pub pa: PaParams,
}

impl NonlinearModel {
    pub fn new(pilot: PilotSequence, fiber: UnitFiberResponse, pa: PaParams) -> Result<Self> {
        if pilot.len() != fiber.grid().len() {
            return Err(Error::invalid("pilot length differs from the fiber grid"));
        }
        fiber.require_taps()?;
        Ok(Self { pilot, fiber, pa })
    }

    /// Noiseless CU samples for `theta = [|A|, phi, tau, r]`; `r` is rounded
    /// to the nearest non-negative integer.
    pub fn predict(&self, theta: &[f64; 4]) -> Result<Vec<Complex64>> {
        let link = WirelessLink {
            amplitude: theta[0],
            phase: theta[1],
            tau: theta[2],
            clock_offset: 0.0,
            distance: 0.0,
        };
        let grid = self.fiber.grid();
        let x = wireless_input(&link, &self.pilot, grid)?;
        let xt = time_domain_input(&x, grid, 1)?;
        nonlinear_cascade(&xt, &self.pa, &self.fiber, round_stages(theta[3]))
    }
}

/// `||y - f^r(PA(x(theta)))||^2`; the shorter sequence is zero-padded.
///
/// A compressive PA driven far past its peak makes the cubic term run away
/// over the cascade. Predictions that overflow score `f64::MAX`, the worst
/// finite fit, so a search can walk away from them.
pub fn nls_objective(theta: &[f64; 4], y_time: &[Complex64], model: &NonlinearModel) -> Result<f64> {
    let m = model.predict(theta)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Ok(f64::MAX);
    }
    let n = y_time.len().max(m.len());
    let zero = Complex64::new(0.0, 0.0);
    let cost: f64 = (0..n)
        .map(|i| (y_time.get(i).copied().unwrap_or(zero) - m.get(i).copied().unwrap_or(zero)).norm_sqr())
        .sum();
    Ok(if cost.is_infinite() { f64::MAX } else { cost })
}

/// Particle swarm settings. `bounds` holds one `[min, max]` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoConfig {
    pub iterations: usize,
    pub particles: usize,
    pub w_personal: f64,
    pub w_global: f64,
    pub inertia: f64,
    pub inertia_decay: f64,
    pub bounds: Vec<[f64; 2]>,
    pub seed: u64,
}

impl PsoConfig {
    /// 100 iterations, 1000 particles, weights 1 / 0.7, inertia 0.3 decaying by 0.7.
    pub fn with_defaults(bounds: Vec<[f64; 2]>, seed: u64) -> Self {
        Self {
            iterations: 100,
            particles: 1000,
            w_personal: 1.0,
            w_global: 0.7,
            inertia: 0.3,
            inertia_decay: 0.7,
            bounds,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.particles == 0 {
            return Err(Error::invalid("PSO needs at least one iteration and one particle"));
        }
        if self.bounds.is_empty() {
            return Err(Error::invalid("PSO needs at least one dimension"));
        }
        if self.bounds.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::invalid("PSO bounds must be finite with min < max"));
        }
        let w = [self.w_personal, self.w_global, self.inertia, self.inertia_decay];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("PSO weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Best point found by [`pso_optimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub position: Vec<f64>,
    pub cost: f64,
    pub evaluations: u64,
}

fn evaluate_swarm<F>(objective: &F, positions: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let costs: Vec<f64> = positions.par_iter().map(|p| objective(p)).collect();
    for (p, &c) in positions.iter().zip(&costs) {
        if !c.is_finite() {
            return Err(Error::OptimizationFailure {
                theta: p.clone(),
                value: c,
            });
        }
    }
    Ok(costs)
}

/// Bounded particle swarm minimisation.
///
/// Random numbers come from a ChaCha8 stream seeded by `config.seed`, drawn
/// in a fixed order: initial positions particle by particle, then per
/// iteration all personal-weight uniforms followed by all global-weight
/// uniforms. Costs are evaluated in parallel and merged in particle order,
/// so results do not depend on the thread count.
pub fn pso_optimize<F>(objective: F, config: &PsoConfig) -> Result<PsoOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    let n = config.bounds.len();
    let p = config.particles;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut theta: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            config
                .bounds
                .iter()
                .map(|&[lo, hi]| (hi - lo) * rng.random::<f64>() + lo)
                .collect()
        })
        .collect();
    let mut velocity = vec![vec![0.0; n]; p];
    let costs = evaluate_swarm(&objective, &theta)?;
    let mut evaluations = p as u64;

    let mut gbest_cost = f64::INFINITY;
    let mut gbest = theta[0].clone();
    for (pos, &c) in theta.iter().zip(&costs) {
        if c < gbest_cost {
            gbest_cost = c;
            gbest = pos.clone();
        }
    }
    let mut pbest = theta.clone();
    let mut pbest_cost = costs;

    let mut inertia = config.inertia;
    for _ in 0..config.iterations {
        let u1: Vec<f64> = (0..p * n).map(|_| rng.random()).collect();
        let u2: Vec<f64> = (0..p * n).map(|_| rng.random()).collect();
        for i in 0..p {
            for j in 0..n {
                let v = inertia * velocity[i][j]
                    + config.w_personal * u1[i * n + j] * (pbest[i][j] - theta[i][j])
                    + config.w_global * u2[i * n + j] * (gbest[j] - theta[i][j]);
                velocity[i][j] = v;
                let [lo, hi] = config.bounds[j];
                theta[i][j] = (theta[i][j] + v).clamp(lo, hi);
            }
        }
        let costs = evaluate_swarm(&objective, &theta)?;
        evaluations += p as u64;
        for i in 0..p {
            if costs[i] < pbest_cost[i] {
                pbest_cost[i] = costs[i];
                pbest[i].clone_from(&theta[i]);
            }
            if costs[i] < gbest_cost {
                gbest_cost = costs[i];
                gbest.clone_from(&theta[i]);
            }
        }
        inertia *= config.inertia_decay;
    }

    Ok(PsoOutcome {
        position: gbest,
        cost: gbest_cost,
        evaluations,
    })
}

/// Least-squares fit of the nonlinear cascade by particle swarm.
/// `config.bounds` must be `[|A|, phi, tau, r]`.
///
/// The swarm's phase coordinate is referenced to the lowest grid bin,
/// `phi - 2 pi f_0 tau`. With the carrier term folded in, the cost varies
/// with `tau` on the baseband scale `1 / B` instead of the carrier period,
/// which the swarm can actually resolve. The reported phase is mapped back.
pub fn estimate_nonlinear(y_time: &[Complex64], config: &PsoConfig, model: &NonlinearModel) -> Result<ParamEstimate> {
    if config.bounds.len() != 4 {
        return Err(Error::invalid("nonlinear estimation searches exactly four parameters"));
    }
    let f0 = model.fiber.grid().start();
    let absolute_phase = |t: &[f64]| t[1] + 2.0 * PI * f0 * t[2];
    let objective = |t: &[f64]| {
        let theta = [t[0], absolute_phase(t), t[2], t[3]];
        nls_objective(&theta, y_time, model).unwrap_or(f64::NAN)
    };
    let out = pso_optimize(objective, config).map_err(|e| match e {
        Error::OptimizationFailure { mut theta, value } if theta.len() == 4 => {
            theta[1] = wrap_phase(absolute_phase(&theta));
            Error::OptimizationFailure { theta, value }
        }
        other => other,
    })?;
    let t = &out.position;
    Ok(ParamEstimate {
        a_hat: Complex64::from_polar(t[0], wrap_phase(absolute_phase(t))),
        tau_hat: t[2],
        r_hat: t[3],
        r_hat_rounded: round_stages(t[3]),
        objective: out.cost,
        evaluations: out.evaluations,
    })
}
