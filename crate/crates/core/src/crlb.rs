//! Fisher information and Cramér-Rao bounds for `theta = [|A|, phi, tau, r]`
//! in the linear regime.

use std::f64::consts::PI;

use nalgebra::{Matrix4, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{g_vector, LinearModel, NoiseRegime};
use crate::signal::effective_noise_variance;

/// Parameter order used by every matrix and array in this module.
pub const AMPLITUDE: usize = 0;
pub const PHASE: usize = 1;
pub const DELAY: usize = 2;
pub const STAGES: usize = 3;

/// Scaled condition number above which the pseudo-inverse is used.
pub const CONDITION_LIMIT: f64 = 1e12;

const UNIT_GAIN_TOL: f64 = 1e-9;

/// The unknowns `[|A|, phi, tau, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub amplitude: f64,
    pub phase: f64,
    pub tau: f64,
    pub stages: f64,
}

impl ChannelParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.amplitude, self.phase, self.tau, self.stages]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            amplitude: v[0],
            phase: v[1],
            tau: v[2],
            stages: v[3],
        }
    }
}

/// Symmetric 4 x 4 information matrix in `[|A|, phi, tau, r]` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherMatrix {
    pub entries: Matrix4<f64>,
    pub regime: NoiseRegime,
    /// Frequency `f_ref` (Hz) of the re-referenced phase used for inversion.
    pub phase_reference: f64,
    /// The same information over `[|A|, phi - 2 pi f_ref tau, tau, r]`,
    /// assembled directly so no precision is lost to cancellation.
    pub referenced: Matrix4<f64>,
}

impl FisherMatrix {
    /// A matrix with no phase re-referencing.
    pub fn new(entries: Matrix4<f64>, regime: NoiseRegime) -> Self {
        Self {
            entries,
            regime,
            phase_reference: 0.0,
            referenced: entries,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.entries).eigenvalues.min()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }
}

/// Lower bounds on the variance of each parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrlbResult {
    /// `[|A|, phi (rad^2), tau (s^2), r]`.
    pub variances: [f64; 4],
    /// Condition number of the Jacobi-scaled FIM.
    pub condition_number: f64,
    pub pseudo_inverse_used: bool,
}

impl CrlbResult {
    /// Square roots of the variance bounds (bounds on RMSE).
    pub fn std_devs(&self) -> [f64; 4] {
        self.variances.map(|v| v.max(0.0).sqrt())
    }
}

/// `mu_k = G^(r+1) |A| |H_k|^r s_k exp(j(phi + r psi_k - 2 pi f_k tau))`.
pub fn mean_vector(theta: &ChannelParams, model: &LinearModel) -> Result<Vec<Complex64>> {
    let a = Complex64::from_polar(theta.amplitude, theta.phase);
    Ok(g_vector(theta.stages, theta.tau, model)?
        .into_iter()
        .map(|g| a * g)
        .collect())
}

/// `d mu / d theta_i` for the four parameters.
///
/// The `r` derivative is `(ln sqrt(b_k) + j psi_k) mu_k` for a selective
/// fiber; the flat form drops the magnitude term (`b_k = 1`).
pub fn mu_derivatives(theta: &ChannelParams, model: &LinearModel, regime: NoiseRegime) -> Result<[Vec<Complex64>; 4]> {
    let g = g_vector(theta.stages, theta.tau, model)?;
    let rot = Complex64::from_polar(1.0, theta.phase);
    let mu: Vec<Complex64> = g.iter().map(|v| theta.amplitude * rot * v).collect();
    let j = Complex64::new(0.0, 1.0);
    let freqs = model.grid().freqs();
    let psi = model.fiber.phase();
    let b = model.b_factors();

    let d_amp = g.iter().map(|v| rot * v).collect();
    let d_phase = mu.iter().map(|m| j * m).collect();
    let d_tau = mu.iter().zip(freqs).map(|(m, f)| -j * 2.0 * PI * f * m).collect();
    let d_r = mu
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mag = match regime {
                NoiseRegime::Flat => 0.0,
                NoiseRegime::Selective => 0.5 * b[k].ln(),
            };
            Complex64::new(mag, psi[k]) * m
        })
        .collect();
    Ok([d_amp, d_phase, d_tau, d_r])
}

fn band_centre(model: &LinearModel) -> f64 {
    let f = model.grid().freqs();
    0.5 * (f[0] + f[f.len() - 1])
}

fn check_theta(theta: &ChannelParams, model: &LinearModel) -> Result<()> {
    if !(model.noise_var > 0.0) {
        return Err(Error::DegenerateNoise("FIM needs sigma2 > 0".into()));
    }
    if !(theta.stages >= 0.0) || !theta.amplitude.is_finite() || !theta.tau.is_finite() {
        return Err(Error::invalid("theta needs r >= 0 and finite |A|, tau"));
    }
    Ok(())
}

/// Mean-term sums shared by both regimes. With per-bin weight
/// `w_k = 2 G^2 b_k^r |s_k|^2 / v_k` and `m_k` the log-magnitude factor of
/// the `r` derivative, the mean part of the FIM is
/// `2 Re(d_i^H C^-1 d_j)` written out entry by entry. Frequencies enter as
/// `f_k - f_shift`, which yields the phase re-referenced to `f_shift`.
fn mean_part(
    theta: &ChannelParams,
    model: &LinearModel,
    var: &[f64],
    log_mag: &[f64],
    f_shift: f64,
) -> Matrix4<f64> {
    let b = model.b_factors();
    let g2 = model.gain * model.gain;
    let r = theta.stages;
    let a = theta.amplitude;
    let a2 = a * a;
    let freqs = model.grid().freqs();
    let psi = model.fiber.phase();
    let s = model.pilot.symbols();

    let mut sum = [0.0f64; 7];
    for k in 0..var.len() {
        let w = 2.0 * g2 * b[k].powf(r) * s[k].norm_sqr() / var[k];
        let (f, p, m) = (freqs[k] - f_shift, psi[k], log_mag[k]);
        sum[0] += w;
        sum[1] += w * m;
        sum[2] += w * f;
        sum[3] += w * p;
        sum[4] += w * f * f;
        sum[5] += w * f * p;
        sum[6] += w * (m * m + p * p);
    }
    let aa = sum[0];
    let ar = a * sum[1];
    let pp = a2 * sum[0];
    let pt = -2.0 * PI * a2 * sum[2];
    let pr = a2 * sum[3];
    let tt = 4.0 * PI * PI * a2 * sum[4];
    let tr = -2.0 * PI * a2 * sum[5];
    let rr = a2 * sum[6];
    Matrix4::new(
        aa, 0.0, 0.0, ar, //
        0.0, pp, pt, pr, //
        0.0, pt, tt, tr, //
        ar, pr, tr, rr,
    )
}

/// Closed-form FIM for a flat fiber, noise covariance `(r + 1) sigma2 I`.
///
/// The covariance contributes `K / (r + 1)^2` to the `(r, r)` entry only.
pub fn fim_flat(theta: &ChannelParams, model: &LinearModel) -> Result<FisherMatrix> {
    check_theta(theta, model)?;
    let k = model.grid().len();
    let r = theta.stages;
    let var = vec![(r + 1.0) * model.noise_var; k];
    let no_mag = vec![0.0; k];
    let f_ref = band_centre(model);
    let mut entries = mean_part(theta, model, &var, &no_mag, 0.0);
    let mut referenced = mean_part(theta, model, &var, &no_mag, f_ref);
    let cov = k as f64 / (r + 1.0).powi(2);
    entries[(STAGES, STAGES)] += cov;
    referenced[(STAGES, STAGES)] += cov;
    Ok(FisherMatrix {
        entries,
        regime: NoiseRegime::Flat,
        phase_reference: f_ref,
        referenced,
    })
}

/// Closed-form FIM for a frequency-selective fiber (`b_k != 1` in every bin).
///
/// The covariance term of the `(r, r)` entry is
/// `sum_k (b_k^(r+1) ln b_k / (b_k^(r+1) - 1))^2`.
pub fn fim_selective(theta: &ChannelParams, model: &LinearModel) -> Result<FisherMatrix> {
    check_theta(theta, model)?;
    let b = model.b_factors();
    if let Some(k) = b.iter().position(|bk| (bk - 1.0).abs() <= UNIT_GAIN_TOL) {
        return Err(Error::RegimeViolation(format!(
            "b_{k} = {} is within 1e-9 of one; use the flat FIM",
            b[k]
        )));
    }
    let r = theta.stages;
    let var = effective_noise_variance(&b, r, model.noise_var)?;
    let log_mag: Vec<f64> = b.iter().map(|bk| 0.5 * bk.ln()).collect();
    let f_ref = band_centre(model);
    let mut entries = mean_part(theta, model, &var, &log_mag, 0.0);
    let mut referenced = mean_part(theta, model, &var, &log_mag, f_ref);
    let trace: f64 = b
        .iter()
        .map(|&bk| {
            let p = bk.powf(r + 1.0);
            (p * bk.ln() / (p - 1.0)).powi(2)
        })
        .sum();
    entries[(STAGES, STAGES)] += trace;
    referenced[(STAGES, STAGES)] += trace;
    Ok(FisherMatrix {
        entries,
        regime: NoiseRegime::Selective,
        phase_reference: f_ref,
        referenced,
    })
}

/// Which closed form applies to this model, if any: flat when every
/// `b_k` is within `1e-9` of one, selective when none is.
pub fn applicable_regime(model: &LinearModel) -> Option<NoiseRegime> {
    let b = model.b_factors();
    let unit = b.iter().filter(|bk| (*bk - 1.0).abs() <= UNIT_GAIN_TOL).count();
    if unit == b.len() {
        Some(NoiseRegime::Flat)
    } else if unit == 0 {
        Some(NoiseRegime::Selective)
    } else {
        None
    }
}

pub fn fim(theta: &ChannelParams, model: &LinearModel, regime: NoiseRegime) -> Result<FisherMatrix> {
    match regime {
        NoiseRegime::Flat => fim_flat(theta, model),
        NoiseRegime::Selective => fim_selective(theta, model),
    }
}

/// Inverts the FIM and returns its diagonal.
///
/// With the absolute carrier in every delay phasor, the phase and delay
/// columns are nearly parallel. Inversion therefore works on
/// `fim.referenced`, the equivalent parametrization
/// `[|A|, phi - 2 pi f_ref tau, tau, r]`, scaled to unit diagonal
/// (`S = D I D`); the covariance is mapped back exactly. If the
/// condition number of `S` exceeds [`CONDITION_LIMIT`] the eigenvalues below
/// `lambda_max / CONDITION_LIMIT` are dropped (pseudo-inverse).
pub fn crlb_from_fim(fim: &FisherMatrix) -> Result<CrlbResult> {
    let finite = |m: &Matrix4<f64>| m.iter().all(|v| v.is_finite());
    if !finite(&fim.entries) || !finite(&fim.referenced) || !fim.phase_reference.is_finite() {
        return Err(Error::invalid("FIM has non-finite entries"));
    }
    // theta = J theta', J = I except d phi / d tau' = 2 pi f_ref.
    let mut jac = Matrix4::identity();
    jac[(PHASE, DELAY)] = 2.0 * PI * fim.phase_reference;
    let m = fim.referenced;

    let mut d = [0.0; 4];
    for i in 0..4 {
        let v = m[(i, i)];
        if !(v > 0.0) {
            return Err(Error::DegenerateModel(format!("FIM diagonal entry {i} is {v}")));
        }
        d[i] = v.sqrt().recip();
    }
    let dm = Matrix4::from_diagonal(&d.into());
    let scaled = dm * m * dm;
    let eig = SymmetricEigen::new(scaled);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition_number = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let pseudo = condition_number > CONDITION_LIMIT;

    let inv_scaled = if pseudo {
        let cut = lmax / CONDITION_LIMIT;
        let inv = eig.eigenvalues.map(|l| if l > cut { l.recip() } else { 0.0 });
        eig.eigenvectors * Matrix4::from_diagonal(&inv) * eig.eigenvectors.transpose()
    } else {
        scaled
            .try_inverse()
            .ok_or_else(|| Error::DegenerateModel("scaled FIM is singular".into()))?
    };
    let inv = jac * (dm * inv_scaled * dm) * jac.transpose();
    Ok(CrlbResult {
        variances: [inv[(0, 0)], inv[(1, 1)], inv[(2, 2)], inv[(3, 3)]],
        condition_number,
        pseudo_inverse_used: pseudo,
    })
}

/// One row of a noise-variance sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrlbPoint {
    pub sigma2: f64,
    pub regime: NoiseRegime,
    pub bound: CrlbResult,
}

/// Evaluates the bound at every `sigma2` for each requested regime.
pub fn crlb_sweep(
    theta: &ChannelParams,
    model: &LinearModel,
    sigma2: &[f64],
    regimes: &[NoiseRegime],
) -> Result<Vec<CrlbPoint>> {
    let mut out = Vec::with_capacity(sigma2.len() * regimes.len());
    for &s in sigma2 {
        let m = LinearModel {
            noise_var: s,
            ..model.clone()
        };
        for &regime in regimes {
            let bound = crlb_from_fim(&fim(theta, &m, regime)?)?;
            out.push(CrlbPoint {
                sigma2: s,
                regime,
                bound,
            });
        }
    }
    Ok(out)
}
