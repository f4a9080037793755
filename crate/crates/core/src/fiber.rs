//! Unit-length fiber responses and their cascades.
//!
//! A fiber segment of unit length is a linear time-invariant filter known on
//! a uniform grid of `K` frequencies. `r` segments in series multiply the
//! response `r` times in frequency and convolve the impulse response `r`
//! times in time. Fractional `r` is meaningful only in frequency.
//!
//! Impulse-response taps are complex-baseband, referenced to the lowest grid
//! frequency `f_0`, at the grid sample interval `T_s = 1 / (N * df)`, so that
//! `H_k = sum_l beta_l exp(-j 2 pi k l / N)` for the in-band bins `k < K`.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use num_complex::Complex64;

use crate::dsp;
use crate::error::{Error, Result};

/// Relative tolerance on uniform spacing of grid frequencies.
const SPACING_RTOL: f64 = 1e-9;
/// Fraction of tap energy that may be discarded when truncating taps.
const TAP_TAIL_FRACTION: f64 = 1e-4;
/// Allowed mismatch between stored taps and the stored spectrum, relative to
/// the spectral peak.
const TAP_CONSISTENCY_RTOL: f64 = 1e-6;

/// Uniform frequency grid shared by every spectrum in a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    freqs: Vec<f64>,
    sample_interval: f64,
    n_time: usize,
}

impl FrequencyGrid {
    /// Validates an explicit grid.
    ///
    /// Besides `K >= 2`, uniform spacing and `N >= K`, the time block must be
    /// an integer multiple of `K` and satisfy `N * T_s * df = 1` so that grid
    /// bins coincide with DFT bins of the `N`-sample block.
    pub fn new(freqs: Vec<f64>, sample_interval: f64, n_time: usize) -> Result<Self> {
        let k = freqs.len();
        if k < 2 {
            return Err(Error::invalid("frequency grid needs at least two bins"));
        }
        if freqs.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("non-finite grid frequency"));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid frequencies must be strictly increasing"));
        }
        let spacing = (freqs[k - 1] - freqs[0]) / (k - 1) as f64;
        for w in freqs.windows(2) {
            if ((w[1] - w[0]) - spacing).abs() > SPACING_RTOL * spacing {
                return Err(Error::invalid("grid frequencies are not uniformly spaced"));
            }
        }
        if !(sample_interval > 0.0 && sample_interval.is_finite()) {
            return Err(Error::invalid("sample interval must be positive"));
        }
        if n_time < k || n_time % k != 0 {
            return Err(Error::invalid(format!(
                "time block length {n_time} must be a positive multiple of the bin count {k}"
            )));
        }
        let product = n_time as f64 * sample_interval * spacing;
        if (product - 1.0).abs() > SPACING_RTOL.max(1e-9) {
            return Err(Error::invalid(format!(
                "N * T_s * df = {product}, expected 1"
            )));
        }
        Ok(Self {
            freqs,
            sample_interval,
            n_time,
        })
    }

    /// `bins` frequencies `f_start + k * spacing`, time block `bins * oversample`.
    pub fn uniform(f_start: f64, spacing: f64, bins: usize, oversample: usize) -> Result<Self> {
        if !(spacing > 0.0) || oversample == 0 {
            return Err(Error::invalid("spacing and oversample must be positive"));
        }
        let freqs = (0..bins).map(|k| f_start + k as f64 * spacing).collect();
        let n_time = bins * oversample;
        Self::new(freqs, 1.0 / (n_time as f64 * spacing), n_time)
    }

    /// `bins` subcarriers spanning `bandwidth` around `center`
    /// (spacing `bandwidth / bins`, lowest bin at `center - bandwidth / 2`).
    pub fn centered(center: f64, bandwidth: f64, bins: usize, oversample: usize) -> Result<Self> {
        if !(bandwidth > 0.0) || bins == 0 {
            return Err(Error::invalid("bandwidth and bin count must be positive"));
        }
        Self::uniform(center - bandwidth / 2.0, bandwidth / bins as f64, bins, oversample)
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.freqs[0]
    }

    pub fn spacing(&self) -> f64 {
        (self.freqs[self.len() - 1] - self.freqs[0]) / (self.len() - 1) as f64
    }

    /// Occupied bandwidth `K * df`.
    pub fn bandwidth(&self) -> f64 {
        self.len() as f64 * self.spacing()
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    /// Time-domain oversampling factor `N / K`.
    pub fn oversample(&self) -> usize {
        self.n_time / self.len()
    }
}

/// Measured magnitude and group delay of a unit-length fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurement {
    freqs: Vec<f64>,
    magnitude_db: Vec<f64>,
    group_delay: Vec<f64>,
}

const MEAS_HEADER: [&str; 3] = ["freq_hz", "magnitude_db", "group_delay_s"];
const CHANNEL_HEADER: [&str; 4] = ["freq_hz", "magnitude_db", "group_delay_s", "phase_rad"];

impl RawMeasurement {
    pub fn new(freqs: Vec<f64>, magnitude_db: Vec<f64>, group_delay: Vec<f64>) -> Result<Self> {
        if freqs.len() != magnitude_db.len() || freqs.len() != group_delay.len() {
            return Err(Error::invalid("measurement columns differ in length"));
        }
        if freqs.len() < 2 {
            return Err(Error::invalid("measurement needs at least two rows"));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("measurement frequencies must be strictly increasing"));
        }
        let all = freqs.iter().chain(&magnitude_db).chain(&group_delay);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in measurement"));
        }
        Ok(Self {
            freqs,
            magnitude_db,
            group_delay,
        })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn magnitude_db(&self) -> &[f64] {
        &self.magnitude_db
    }

    pub fn group_delay(&self) -> &[f64] {
        &self.group_delay
    }

    /// Median-smooths magnitude and group delay separately.
    pub fn smoothed(&self, window: usize) -> Result<Self> {
        Self::new(
            self.freqs.clone(),
            median_smooth(&self.magnitude_db, window)?,
            median_smooth(&self.group_delay, window)?,
        )
    }

    /// Parses `freq_hz, magnitude_db, group_delay_s` rows. A header row is
    /// required; lines starting with `#` are ignored.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let cols = read_columns(reader, &MEAS_HEADER)?;
        let mut it = cols.into_iter();
        let (f, m, g) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Self::new(f, m, g)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Parse {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&MEAS_HEADER.join(","));
        out.push('\n');
        for i in 0..self.freqs.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.freqs[i], self.magnitude_db[i], self.group_delay[i]
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::write_atomic(path.as_ref(), self.to_csv_string().as_bytes())
    }
}

fn read_columns<R: Read>(reader: R, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if found.len() < header.len() || found.iter().zip(header).any(|(a, b)| a != b) {
        return Err(Error::invalid(format!(
            "expected header `{}`, found `{}`",
            header.join(","),
            found.join(",")
        )));
    }
    let mut cols = vec![Vec::new(); header.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, col) in cols.iter_mut().enumerate() {
            let field = rec.get(c).ok_or_else(|| {
                Error::invalid(format!("row {} has too few columns", row + 2))
            })?;
            let v: f64 = field.parse().map_err(|_| {
                Error::invalid(format!("row {}: cannot parse `{field}` as a number", row + 2))
            })?;
            col.push(v);
        }
    }
    Ok(cols)
}

/// Frequency response of a unit-length fiber on a [`FrequencyGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFiberResponse {
    grid: FrequencyGrid,
    magnitude: Vec<f64>,
    phase: Vec<f64>,
    taps: Option<Vec<Complex64>>,
}

impl UnitFiberResponse {
    /// A response known only in frequency (no time-domain taps).
    pub fn frequency_only(grid: FrequencyGrid, magnitude: Vec<f64>, phase: Vec<f64>) -> Result<Self> {
        let k = grid.len();
        if magnitude.len() != k || phase.len() != k {
            return Err(Error::invalid("response length differs from grid"));
        }
        if magnitude.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("magnitude must be finite and non-negative"));
        }
        if phase.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite phase"));
        }
        Ok(Self {
            grid,
            magnitude,
            phase,
            taps: None,
        })
    }

    /// Attaches explicit taps, checking them against the stored spectrum.
    pub fn with_explicit_taps(mut self, taps: Vec<Complex64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("tap array is empty"));
        }
        let n = self.grid.n_time();
        let dft = dsp::folded_dft(&taps, n, self.grid.len());
        let peak = self.magnitude.iter().cloned().fold(0.0, f64::max);
        let h = self.response();
        let worst = dft
            .iter()
            .zip(&h)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        if worst > TAP_CONSISTENCY_RTOL * peak.max(f64::MIN_POSITIVE) {
            return Err(Error::invalid(format!(
                "taps disagree with spectrum by {worst:e}"
            )));
        }
        self.taps = Some(taps);
        Ok(self)
    }

    /// Builds a response from a complex spectrum and derives its taps.
    ///
    /// The `K`-point inverse DFT gives taps at the native spacing `1 / (K df)`;
    /// they are truncated to the shortest prefix whose discarded tail holds
    /// less than `1e-4` of the tap energy, then upsampled by zero insertion to
    /// the grid's sample interval. The stored spectrum is recomputed from the
    /// kept taps so both representations agree exactly; its phase is unwrapped
    /// against `reference_phase` when given, bin by bin otherwise.
    pub fn from_spectrum(
        grid: FrequencyGrid,
        spectrum: &[Complex64],
        reference_phase: Option<&[f64]>,
    ) -> Result<Self> {
        let k = grid.len();
        if spectrum.len() != k {
            return Err(Error::invalid("spectrum length differs from grid"));
        }
        if spectrum.iter().any(|h| !h.re.is_finite() || !h.im.is_finite()) {
            return Err(Error::invalid("non-finite spectrum value"));
        }
        if let Some(p) = reference_phase {
            if p.len() != k {
                return Err(Error::invalid("reference phase length differs from grid"));
            }
        }
        let mut coarse = dsp::padded_inverse_dft(spectrum, k);
        for c in coarse.iter_mut() {
            *c /= k as f64;
        }
        let total: f64 = coarse.iter().map(|c| c.norm_sqr()).sum();
        let mut keep = k;
        if total > 0.0 {
            let mut tail = 0.0;
            while keep > 1 {
                let next = tail + coarse[keep - 1].norm_sqr();
                if next >= TAP_TAIL_FRACTION * total {
                    break;
                }
                tail = next;
                keep -= 1;
            }
        } else {
            keep = 1;
        }
        coarse.truncate(keep);

        let os = grid.oversample();
        let mut taps = vec![Complex64::new(0.0, 0.0); (keep - 1) * os + 1];
        for (l, c) in coarse.iter().enumerate() {
            taps[l * os] = *c;
        }

        let h = dsp::folded_dft(&coarse, k, k);
        let magnitude: Vec<f64> = h.iter().map(|v| v.norm()).collect();
        let phase = match reference_phase {
            Some(reference) => h
                .iter()
                .zip(reference)
                .map(|(v, &p)| p + dsp::wrap_phase(v.arg() - p))
                .collect(),
            None => unwrap_sequence(h.iter().map(|v| v.arg())),
        };
        Ok(Self {
            grid,
            magnitude,
            phase,
            taps: Some(taps),
        })
    }

    /// Derives taps for a frequency-only response (see [`Self::from_spectrum`]).
    pub fn with_derived_taps(self) -> Result<Self> {
        let h = self.response();
        Self::from_spectrum(self.grid, &h, Some(&self.phase))
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    /// Unwrapped phase `psi_k`, radians.
    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn taps(&self) -> Option<&[Complex64]> {
        self.taps.as_deref()
    }

    pub(crate) fn require_taps(&self) -> Result<&[Complex64]> {
        self.taps
            .as_deref()
            .ok_or_else(|| Error::InvalidState("fiber response has no time-domain taps".into()))
    }

    /// `H_k = |H_k| exp(j psi_k)`.
    pub fn response(&self) -> Vec<Complex64> {
        self.magnitude
            .iter()
            .zip(&self.phase)
            .map(|(&m, &p)| Complex64::from_polar(m, p))
            .collect()
    }

    pub fn peak_magnitude(&self) -> f64 {
        self.magnitude.iter().cloned().fold(0.0, f64::max)
    }

    pub fn energy(&self) -> f64 {
        self.magnitude.iter().map(|m| m * m).sum()
    }

    /// Evaluates the tap model and its group delay at arbitrary frequencies.
    ///
    /// Returns `(H(f), tau_g(f))` with `tau_g = -(1 / 2 pi) d arg H / df`.
    pub fn evaluate_taps(&self, freq: f64) -> Result<(Complex64, f64)> {
        let taps = self.require_taps()?;
        let ts = self.grid.sample_interval();
        let f0 = self.grid.start();
        let mut h = Complex64::new(0.0, 0.0);
        let mut d = Complex64::new(0.0, 0.0);
        for (l, &b) in taps.iter().enumerate() {
            let t = l as f64 * ts;
            let e = b * Complex64::from_polar(1.0, -2.0 * PI * (freq - f0) * t);
            h += e;
            d += e * t;
        }
        let gd = if h.norm_sqr() > 0.0 { (d / h).re } else { 0.0 };
        Ok((h, gd))
    }

    /// Analytic magnitude (dB) and group delay of the tap model at `freqs`,
    /// in the measurement-file layout.
    pub fn export_measurement(&self, freqs: &[f64]) -> Result<RawMeasurement> {
        let mut mag = Vec::with_capacity(freqs.len());
        let mut gd = Vec::with_capacity(freqs.len());
        for &f in freqs {
            let (h, g) = self.evaluate_taps(f)?;
            mag.push(20.0 * h.norm().log10());
            gd.push(g);
        }
        RawMeasurement::new(freqs.to_vec(), mag, gd)
    }

    /// Group delay on the grid: analytic from taps when present, otherwise a
    /// finite-difference derivative of the stored phase.
    pub fn group_delay(&self) -> Vec<f64> {
        if self.taps.is_some() {
            return self
                .grid
                .freqs()
                .iter()
                .map(|&f| self.evaluate_taps(f).map(|(_, g)| g).unwrap_or(0.0))
                .collect();
        }
        let f = self.grid.freqs();
        let p = &self.phase;
        let k = f.len();
        (0..k)
            .map(|i| {
                let (a, b) = if i == 0 {
                    (0, 1)
                } else if i == k - 1 {
                    (k - 2, k - 1)
                } else {
                    (i - 1, i + 1)
                };
                -(p[b] - p[a]) / (2.0 * PI * (f[b] - f[a]))
            })
            .collect()
    }

    /// Channel export: measurement columns plus `phase_rad`.
    pub fn to_channel_csv_string(&self) -> String {
        let gd = self.group_delay();
        let mut out = CHANNEL_HEADER.join(",");
        out.push('\n');
        for (i, f) in self.grid.freqs().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                f,
                20.0 * self.magnitude[i].log10(),
                gd[i],
                self.phase[i]
            ));
        }
        out
    }

    pub fn write_channel_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::write_atomic(path.as_ref(), self.to_channel_csv_string().as_bytes())
    }
}

fn unwrap_sequence(phases: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for p in phases {
        match out.last() {
            Some(&prev) => out.push(prev + dsp::wrap_phase(p - prev)),
            None => out.push(p),
        }
    }
    out
}

/// Centered running median.
///
/// Even windows are widened by one. Near the edges the window shrinks
/// symmetrically so it stays centered on the sample.
pub fn median_smooth(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::invalid("cannot smooth an empty series"));
    }
    if window == 0 {
        return Err(Error::invalid("median window must be positive"));
    }
    let window = if window % 2 == 0 { window + 1 } else { window };
    if window > series.len() {
        return Err(Error::invalid(format!(
            "median window {window} exceeds series length {}",
            series.len()
        )));
    }
    let half = window / 2;
    let n = series.len();
    let mut buf = Vec::with_capacity(window);
    Ok((0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend_from_slice(&series[i - h..=i + h]);
            let mid = buf.len() / 2;
            *buf.select_nth_unstable_by(mid, f64::total_cmp).1
        })
        .collect())
}

/// Phase by trapezoidal integration of group delay:
/// `psi_k = -2 pi * integral_{f_0}^{f_k} tau_g df`, so `psi_0 = 0`.
pub fn phase_from_group_delay(freqs: &[f64], group_delay: &[f64]) -> Result<Vec<f64>> {
    if freqs.len() != group_delay.len() {
        return Err(Error::invalid("frequency and group-delay lengths differ"));
    }
    if freqs.len() < 2 {
        return Err(Error::invalid("need at least two frequencies"));
    }
    if freqs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("frequencies must be strictly increasing"));
    }
    let mut out = Vec::with_capacity(freqs.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..freqs.len() {
        acc += 0.5 * (group_delay[i] + group_delay[i - 1]) * (freqs[i] - freqs[i - 1]);
        out.push(-2.0 * PI * acc);
    }
    Ok(out)
}

/// Resamples a measurement onto `grid` and derives its taps.
///
/// Magnitude is interpolated linearly in dB and group delay linearly in
/// seconds; the phase is the exact integral of the interpolated group delay
/// (the trapezoid rule on measurement nodes), referenced to zero at the
/// lowest grid frequency.
pub fn build_unit_response(meas: &RawMeasurement, grid: &FrequencyGrid) -> Result<UnitFiberResponse> {
    let mf = meas.freqs();
    let (lo, hi) = (mf[0], mf[mf.len() - 1]);
    let tol = 1e-9 * grid.spacing();
    let gf = grid.freqs();
    if gf[0] < lo - tol || gf[gf.len() - 1] > hi + tol {
        return Err(Error::OutOfRange(format!(
            "grid [{}, {}] Hz is outside measurement span [{lo}, {hi}] Hz",
            gf[0],
            gf[gf.len() - 1]
        )));
    }
    let gd = meas.group_delay();
    let mut cumulative = Vec::with_capacity(mf.len());
    cumulative.push(0.0);
    for i in 1..mf.len() {
        let prev = cumulative[i - 1];
        cumulative.push(prev + 0.5 * (gd[i] + gd[i - 1]) * (mf[i] - mf[i - 1]));
    }

    let locate = |f: f64| -> (usize, f64) {
        let f = f.clamp(lo, hi);
        let i = match mf.binary_search_by(|x| x.total_cmp(&f)) {
            Ok(i) => i.min(mf.len() - 2),
            Err(i) => i.saturating_sub(1).min(mf.len() - 2),
        };
        (i, f - mf[i])
    };
    let integral = |f: f64| -> f64 {
        let (i, t) = locate(f);
        let slope = (gd[i + 1] - gd[i]) / (mf[i + 1] - mf[i]);
        cumulative[i] + gd[i] * t + 0.5 * slope * t * t
    };
    let interp_db = |f: f64| -> f64 {
        let (i, t) = locate(f);
        let db = meas.magnitude_db();
        db[i] + (db[i + 1] - db[i]) * t / (mf[i + 1] - mf[i])
    };

    let base = integral(gf[0]);
    let magnitude: Vec<f64> = gf.iter().map(|&f| 10f64.powf(interp_db(f) / 20.0)).collect();
    let phase: Vec<f64> = gf
        .iter()
        .map(|&f| -2.0 * PI * (integral(f) - base))
        .collect();
    let h: Vec<Complex64> = magnitude
        .iter()
        .zip(&phase)
        .map(|(&m, &p)| Complex64::from_polar(m, p))
        .collect();
    UnitFiberResponse::from_spectrum(grid.clone(), &h, Some(&phase))
}

/// Response of `r` unit lengths: `|H_k|^r exp(j r psi_k)`. `r` may be
/// fractional.
pub fn powered_response(unit: &UnitFiberResponse, r: f64) -> Result<Vec<Complex64>> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("cascade length must be >= 0, got {r}")));
    }
    Ok(unit
        .magnitude
        .iter()
        .zip(&unit.phase)
        .map(|(&m, &p)| {
            let mag = if r == 0.0 { 1.0 } else { m.powf(r) };
            Complex64::from_polar(mag, r * p)
        })
        .collect())
}

/// Impulse response of `r` unit lengths: the `r`-fold self-convolution of
/// the taps, length `r (L - 1) + 1`.
pub fn cascade_taps(unit: &UnitFiberResponse, r: usize) -> Result<Vec<Complex64>> {
    let taps = unit.require_taps()?;
    if r == 0 {
        return Err(Error::invalid("tap cascade needs r >= 1"));
    }
    let mut out = taps.to_vec();
    for _ in 1..r {
        out = dsp::convolve(&out, taps);
    }
    Ok(out)
}

/// Shape of a synthetic unit fiber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// Constant magnitude.
    Flat,
    /// `|H_k| ~ 1 + depth * cos(2 pi cycles k / K)`, `0 <= depth < 1`.
    Selective { depth: f64, cycles: usize },
}

/// Recipe for an artificial unit fiber with a prescribed total energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFiberSpec {
    pub kind: SyntheticKind,
    /// `sum_k |H_k|^2`.
    pub total_energy: f64,
    /// Bulk delay of the segment in native samples `1 / (K df)`; sets a
    /// linear phase `psi_k = -2 pi k delay / K`.
    pub delay_samples: usize,
}

/// Generates an artificial unit fiber on `grid`.
pub fn synth_fiber(params: &SyntheticFiberSpec, grid: &FrequencyGrid) -> Result<UnitFiberResponse> {
    if !(params.total_energy > 0.0) || !params.total_energy.is_finite() {
        return Err(Error::invalid("synthetic fiber energy must be positive"));
    }
    let k = grid.len();
    let shape: Vec<f64> = match params.kind {
        SyntheticKind::Flat => vec![1.0; k],
        SyntheticKind::Selective { depth, cycles } => {
            if !(0.0..1.0).contains(&depth) {
                return Err(Error::invalid("selective depth must lie in [0, 1)"));
            }
            (0..k)
                .map(|i| 1.0 + depth * (2.0 * PI * (cycles * i) as f64 / k as f64).cos())
                .collect()
        }
    };
    let norm: f64 = shape.iter().map(|s| s * s).sum();
    let scale = (params.total_energy / norm).sqrt();
    let d = params.delay_samples as f64;
    let phase: Vec<f64> = (0..k).map(|i| -2.0 * PI * i as f64 * d / k as f64).collect();
    let h: Vec<Complex64> = shape
        .iter()
        .zip(&phase)
        .map(|(&s, &p)| Complex64::from_polar(scale * s, p))
        .collect();
    UnitFiberResponse::from_spectrum(grid.clone(), &h, Some(&phase))
}

/// Per-bin squared loop gain `b_k = (G |H_k|)^2`.
pub fn b_factors(unit: &UnitFiberResponse, gain: f64) -> Result<Vec<f64>> {
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(Error::invalid("PA gain must be positive"));
    }
    Ok(unit.magnitude.iter().map(|m| (gain * m).powi(2)).collect())
}
