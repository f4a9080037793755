//! Uplink signal generation through a RoF chain.
//!
//! The user's pilot crosses a line-of-sight wireless hop into the entry RU,
//! then `r` stages of fiber segment plus PA before reaching the CU. In the
//! linear regime this is modelled per frequency bin with noise accumulated
//! at every stage. In the nonlinear regime the chain runs in the time
//! domain with a third-order PA at each stage and noise injected at the
//! entry RU and at the CU only.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::fiber::{powered_response, FrequencyGrid, UnitFiberResponse};
use crate::SPEED_OF_LIGHT;

/// Branch threshold between the flat-gain and geometric noise formulas.
const UNIT_GAIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    Qpsk,
}

/// Known unit-amplitude pilot symbols, one per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSequence {
    symbols: Vec<Complex64>,
    modulation: Modulation,
}

impl PilotSequence {
    /// Random QPSK symbols `exp(j pi (2 m + 1) / 4)`.
    pub fn qpsk<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let symbols = (0..len)
            .map(|_| {
                let m: u32 = rng.random_range(0..4);
                Complex64::from_polar(1.0, PI * (2 * m + 1) as f64 / 4.0)
            })
            .collect();
        Self {
            symbols,
            modulation: Modulation::Qpsk,
        }
    }

    pub fn from_symbols(symbols: Vec<Complex64>, modulation: Modulation) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("pilot is empty"));
        }
        if symbols.iter().any(|s| (s.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::invalid("pilot symbols must have unit amplitude"));
        }
        Ok(Self {
            symbols,
            modulation,
        })
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Line-of-sight hop from the user to the entry RU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirelessLink {
    pub amplitude: f64,
    pub phase: f64,
    /// Total delay `d / c + clock_offset`, seconds.
    pub tau: f64,
    pub clock_offset: f64,
    pub distance: f64,
}

impl WirelessLink {
    pub fn from_geometry(amplitude: f64, phase: f64, distance: f64, clock_offset: f64) -> Result<Self> {
        if !(amplitude >= 0.0) || !(distance >= 0.0) {
            return Err(Error::invalid("amplitude and distance must be non-negative"));
        }
        Ok(Self {
            amplitude,
            phase,
            tau: distance / SPEED_OF_LIGHT + clock_offset,
            clock_offset,
            distance,
        })
    }

    /// `A = |A| exp(j phi)`.
    pub fn coefficient(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude, self.phase)
    }
}

/// Static third-order power amplifier `y = G (x + nonlin x |x|^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaParams {
    /// Linear amplitude gain.
    pub gain: f64,
    /// Third-order coefficient, 1/V^2. Zero is the linear regime.
    #[serde(default)]
    pub nonlin: f64,
}

impl PaParams {
    pub fn new(gain: f64, nonlin: f64) -> Result<Self> {
        if !(gain > 0.0) || !gain.is_finite() || !nonlin.is_finite() {
            return Err(Error::invalid("PA gain must be positive and nonlin finite"));
        }
        Ok(Self { gain, nonlin })
    }

    pub fn is_linear(&self) -> bool {
        self.nonlin == 0.0
    }
}

/// Amplitude gain for a value in dB (`10^(db / 20)`).
pub fn gain_from_db(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// A RoF chain seen from the entry RU.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    /// Number of fiber stages `r` between the entry RU and the CU.
    pub stages: f64,
    /// Noise variance per complex sample, per stage.
    pub noise_var: f64,
    pub pa: PaParams,
    pub fiber: UnitFiberResponse,
}

impl ChainParams {
    pub fn new(stages: f64, noise_var: f64, pa: PaParams, fiber: UnitFiberResponse) -> Result<Self> {
        if !(stages >= 0.0) || !stages.is_finite() {
            return Err(Error::invalid("stage count must be >= 0"));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::invalid("noise variance must be >= 0"));
        }
        Ok(Self {
            stages,
            noise_var,
            pa,
            fiber,
        })
    }

    /// The stage count as an integer, for time-domain simulation.
    pub fn integer_stages(&self) -> Result<usize> {
        if self.stages.fract() != 0.0 {
            return Err(Error::invalid(format!(
                "time-domain cascade needs an integer stage count, got {}",
                self.stages
            )));
        }
        Ok(self.stages as usize)
    }
}

/// Free-space path loss with log-normal shadowing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathlossParams {
    pub tx_gain: f64,
    pub rx_gain: f64,
    /// Carrier wavelength, metres.
    pub wavelength: f64,
    /// Standard deviation of the shadowing term, dB.
    pub shadow_sigma_db: f64,
}

impl PathlossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tx_gain > 0.0 && self.rx_gain > 0.0 && self.wavelength > 0.0) {
            return Err(Error::invalid("path-loss gains and wavelength must be positive"));
        }
        if !(self.shadow_sigma_db >= 0.0) {
            return Err(Error::invalid("shadowing deviation must be >= 0"));
        }
        Ok(())
    }

    /// `G_t G_r (wavelength / (2 pi d))^2`, without shadowing.
    pub fn free_space(&self, distance: f64) -> f64 {
        self.tx_gain * self.rx_gain * (self.wavelength / (2.0 * PI * distance)).powi(2)
    }
}

/// Draws `|A|`: the free-space term shifted in dB by a zero-mean Gaussian
/// of `shadow_sigma_db` (log-normal shadowing).
pub fn pathloss_amplitude<R: Rng + ?Sized>(p: &PathlossParams, distance: f64, rng: &mut R) -> Result<f64> {
    p.validate()?;
    if !(distance > 0.0) {
        return Err(Error::invalid("distance must be positive"));
    }
    let zeta_db = if p.shadow_sigma_db > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        p.shadow_sigma_db * z
    } else {
        0.0
    };
    Ok((p.free_space(distance) * 10f64.powf(zeta_db / 10.0)).max(0.0))
}

/// RoF input spectrum `x_k = |A| exp(j phi) exp(-j 2 pi f_k tau) s_k`.
pub fn wireless_input(link: &WirelessLink, pilot: &PilotSequence, grid: &FrequencyGrid) -> Result<Vec<Complex64>> {
    if pilot.len() != grid.len() {
        return Err(Error::invalid(format!(
            "pilot has {} symbols, grid has {} bins",
            pilot.len(),
            grid.len()
        )));
    }
    let a = link.coefficient();
    Ok(grid
        .freqs()
        .iter()
        .zip(pilot.symbols())
        .map(|(&f, &s)| a * Complex64::from_polar(1.0, -2.0 * PI * f * link.tau) * s)
        .collect())
}

/// Per-bin variance of the noise accumulated over `r` stages:
/// `sigma2 (b^(r+1) - 1) / (b - 1)`, or `(r + 1) sigma2` when `b` is within
/// `1e-9` of one. `r` may be fractional.
pub fn effective_noise_variance(b: &[f64], r: f64, sigma2: f64) -> Result<Vec<f64>> {
    if !(r >= 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::invalid("need r >= 0 and sigma2 >= 0"));
    }
    Ok(b.iter()
        .map(|&bk| {
            let d = bk - 1.0;
            if d.abs() <= UNIT_GAIN_TOL {
                (r + 1.0) * sigma2
            } else {
                sigma2 * ((r + 1.0) * d.ln_1p()).exp_m1() / d
            }
        })
        .collect())
}

/// Linear-regime propagation `y_k = G^(r+1) H_k^r x_k + w_k` with noise of
/// [`effective_noise_variance`]. `r` may be fractional.
pub fn propagate_linear<R: Rng + ?Sized>(x: &[Complex64], chain: &ChainParams, rng: &mut R) -> Result<Vec<Complex64>> {
    if !chain.pa.is_linear() {
        return Err(Error::WrongRegime(
            "PA is nonlinear; use propagate_nonlinear".into(),
        ));
    }
    if x.len() != chain.fiber.grid().len() {
        return Err(Error::invalid("spectrum length differs from grid"));
    }
    let r = chain.stages;
    let hr = powered_response(&chain.fiber, r)?;
    let g = chain.pa.gain.powf(r + 1.0);
    let b = crate::fiber::b_factors(&chain.fiber, chain.pa.gain)?;
    let var = effective_noise_variance(&b, r, chain.noise_var)?;
    Ok(x.iter()
        .zip(&hr)
        .zip(&var)
        .map(|((&xk, &hk), &v)| g * hk * xk + dsp::complex_gaussian(rng, v))
        .collect())
}

/// Time-domain samples of a spectrum:
/// `x_n = (1 / K) sum_k x_k exp(j 2 pi n k / M)`, `M = N * oversample`.
pub fn time_domain_input(x: &[Complex64], grid: &FrequencyGrid, oversample: usize) -> Result<Vec<Complex64>> {
    if oversample == 0 {
        return Err(Error::invalid("oversample must be >= 1"));
    }
    if x.len() != grid.len() {
        return Err(Error::invalid("spectrum length differs from grid"));
    }
    let k = grid.len() as f64;
    let mut out = dsp::padded_inverse_dft(x, grid.n_time() * oversample);
    for v in out.iter_mut() {
        *v /= k;
    }
    Ok(out)
}

/// Inverse of [`time_domain_input`] at the grid rate: the in-band DTFT bins
/// of `y`, scaled by `K / N`. Samples beyond `N` (cascade tails) are
/// included.
pub fn spectrum_from_time(y: &[Complex64], grid: &FrequencyGrid) -> Vec<Complex64> {
    let scale = grid.len() as f64 / grid.n_time() as f64;
    dsp::folded_dft(y, grid.n_time(), grid.len())
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

/// Elementwise PA `y = G (x + nonlin x |x|^2)`.
pub fn pa_apply(x: &[Complex64], pa: &PaParams) -> Vec<Complex64> {
    x.iter()
        .map(|&v| pa.gain * (v + pa.nonlin * v * v.norm_sqr()))
        .collect()
}

fn stage_with_taps(y: &[Complex64], taps: &[Complex64], pa: &PaParams) -> Vec<Complex64> {
    let u = dsp::convolve(taps, y);
    pa_apply(&u, pa)
}

/// One fiber segment followed by one PA.
///
/// The fiber is a causal FIR with zero history; the output keeps the full
/// convolution, `len(y) + L - 1` samples, so no energy is cut off.
pub fn stage_function(y: &[Complex64], chain: &ChainParams) -> Result<Vec<Complex64>> {
    let taps = chain.fiber.require_taps()?;
    Ok(stage_with_taps(y, taps, &chain.pa))
}

/// Noiseless nonlinear chain `f^r(PA(x))`.
pub fn nonlinear_cascade(
    x_time: &[Complex64],
    pa: &PaParams,
    fiber: &UnitFiberResponse,
    stages: usize,
) -> Result<Vec<Complex64>> {
    let taps = fiber.require_taps()?;
    let mut y = pa_apply(x_time, pa);
    for _ in 0..stages {
        y = stage_with_taps(&y, taps, pa);
    }
    Ok(y)
}

/// Nonlinear-regime propagation: `y0 = PA(x) + w0`, then `r` stages, then
/// `w_r` at the CU. Both noise terms are CN(0, sigma2) per sample.
pub fn propagate_nonlinear<R: Rng + ?Sized>(
    x_time: &[Complex64],
    chain: &ChainParams,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let r = chain.integer_stages()?;
    let taps = chain.fiber.require_taps()?;
    let var = chain.noise_var;
    let mut y: Vec<Complex64> = pa_apply(x_time, &chain.pa)
        .into_iter()
        .map(|v| v + dsp::complex_gaussian(rng, var))
        .collect();
    for _ in 0..r {
        y = stage_with_taps(&y, taps, &chain.pa);
    }
    for v in y.iter_mut() {
        *v += dsp::complex_gaussian(rng, var);
    }
    Ok(y)
}
