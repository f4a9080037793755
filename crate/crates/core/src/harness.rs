//! Scenario files, seeded Monte Carlo runs and result files.
//!
//! A scenario is a TOML document. Every trial owns a ChaCha8 stream derived
//! from `(seed, sweep point, trial)`, so results do not depend on the
//! number of worker threads. Result CSVs start with `# key=value` lines
//! that include the SHA-256 of the scenario; wall-clock data goes to a
//! sidecar `.log` file only.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crlb::{applicable_regime, crlb_from_fim, fim, ChannelParams, CrlbResult};
use crate::dsp::wrap_phase;
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_nonlinear, ml_grid_search, ml_refined_search, LinearModel, NoiseRegime, NonlinearModel, ParamEstimate,
    PsoConfig, SearchGrid2D,
};
use crate::fiber::{
    build_unit_response, synth_fiber, FrequencyGrid, RawMeasurement, SyntheticFiberSpec, SyntheticKind,
    UnitFiberResponse,
};
use crate::positioning::{
    read_trajectory_csv, trajectory_experiment, AmplitudeModel, DeploymentGeometry, TrajectoryReport,
    TrajectorySetup, UePosition,
};
use crate::signal::{
    gain_from_db, pathloss_amplitude, propagate_linear, propagate_nonlinear, time_domain_input, wireless_input,
    ChainParams, PaParams, PathlossParams, PilotSequence, WirelessLink,
};
use crate::SPEED_OF_LIGHT;

/// Oversampling used for nonlinear chains when the scenario leaves it unset.
pub const DEFAULT_NONLINEAR_OVERSAMPLE: usize = 4;
/// Largest tolerated fraction of failed trials per sweep point.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream for trial `trial` at sweep point `point`.
pub fn stream_seed(seed: u64, point: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ point) ^ trial)
}

pub fn trial_rng(seed: u64, point: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, point, trial))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub bins: usize,
    /// Time samples per bin; defaults to 4 for nonlinear chains, else 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oversample: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberSourceKind {
    Synthetic,
    Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberShape {
    Flat,
    Selective,
}

/// Fiber section. Synthetic fibers use `shape`, `total_energy`, `depth`,
/// `cycles` and `delay_samples`; measured fibers use `path` and
/// `smoothing_window`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    pub source: FiberSourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<FiberShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_energy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Fiber stages between the entry RU and the CU.
    pub stages: f64,
    pub noise_var: f64,
    /// PA gain; when absent the gain compensates the fiber's peak magnitude.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_db: Option<f64>,
    #[serde(default)]
    pub nonlin: f64,
}

/// Wireless hop. The delay is `tau_s` if given, else `distance_m / c +
/// clock_offset_s`. With `pathloss` the amplitude is drawn per trial at
/// `distance_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub phase: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default)]
    pub clock_offset_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathloss: Option<PathlossParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorConfig {
    /// Linear-regime grid search.
    Ml {
        regime: NoiseRegime,
        r_min: f64,
        r_max: f64,
        r_step: f64,
        tau_min: f64,
        tau_max: f64,
        tau_step: f64,
        #[serde(default)]
        refine_levels: usize,
    },
    /// Nonlinear least squares by particle swarm.
    Pso {
        iterations: usize,
        particles: usize,
        #[serde(default = "default_w_personal")]
        w_personal: f64,
        #[serde(default = "default_w_global")]
        w_global: f64,
        #[serde(default = "default_inertia")]
        inertia: f64,
        #[serde(default = "default_inertia_decay")]
        inertia_decay: f64,
        amplitude_bounds: [f64; 2],
        #[serde(default = "default_phase_bounds")]
        phase_bounds: [f64; 2],
        tau_bounds: [f64; 2],
        r_bounds: [f64; 2],
    },
}

fn default_w_personal() -> f64 {
    1.0
}
fn default_w_global() -> f64 {
    0.7
}
fn default_inertia() -> f64 {
    0.3
}
fn default_inertia_decay() -> f64 {
    0.7
}
fn default_phase_bounds() -> [f64; 2] {
    [-PI, PI]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma2,
    Amplitude,
    Bandwidth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sigma2 => "sigma2",
            SweepAxis::Amplitude => "amplitude",
            SweepAxis::Bandwidth => "bandwidth",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma2" => Ok(SweepAxis::Sigma2),
            "amplitude" => Ok(SweepAxis::Amplitude),
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            other => Err(Error::invalid(format!(
                "unknown sweep axis `{other}` (expected sigma2, amplitude or bandwidth)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositioningConfig {
    pub spacing: f64,
    pub rofs: usize,
    pub rus_per_rof: usize,
    pub ue_height: f64,
    /// Coarse position cell in metres; defaults to `c / (4 B)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_cell: Option<f64>,
    /// Inline trajectory `[[px, py], ...]`, used when no file is given.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<[f64; 2]>,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub trials: usize,
    pub grid: GridConfig,
    pub fiber: FiberConfig,
    pub chain: ChainConfig,
    pub link: LinkConfig,
    pub estimator: EstimatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positioning: Option<PositioningConfig>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn missing_field(message: &str) -> Option<String> {
    let start = message.find("missing field `")? + "missing field `".len();
    let end = message[start..].find('`')? + start;
    Some(message[start..end].to_owned())
}

fn finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(key, "must be finite"))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(key, "must be positive"))
    }
}

impl Scenario {
    /// Parses and validates a scenario; relative paths resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut sc: Scenario = toml::from_str(text).map_err(|e| {
            let message = e.to_string();
            match missing_field(&message) {
                Some(key) => Error::validation(key, format!("required key is missing ({})", message.trim())),
                None => Error::Parse {
                    path: origin.to_path_buf(),
                    message,
                },
            }
        })?;
        sc.base_dir = base_dir.into();
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize scenario: {e}")))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn is_nonlinear(&self) -> bool {
        self.chain.nonlin != 0.0 || matches!(self.estimator, EstimatorConfig::Pso { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::validation("trials", "must be >= 1"));
        }
        let g = &self.grid;
        positive("grid.center_hz", g.center_hz)?;
        positive("grid.bandwidth_hz", g.bandwidth_hz)?;
        if g.bins < 2 {
            return Err(Error::validation("grid.bins", "must be >= 2"));
        }
        if g.oversample == Some(0) {
            return Err(Error::validation("grid.oversample", "must be >= 1"));
        }

        let f = &self.fiber;
        match f.source {
            FiberSourceKind::Synthetic => {
                if f.shape.is_none() {
                    return Err(Error::validation("fiber.shape", "required for synthetic fibers"));
                }
                positive("fiber.total_energy", f.total_energy.unwrap_or(f64::NAN))?;
                if f.shape == Some(FiberShape::Selective) {
                    let d = f.depth.ok_or_else(|| Error::validation("fiber.depth", "required for selective fibers"))?;
                    if !(0.0..1.0).contains(&d) {
                        return Err(Error::validation("fiber.depth", "must lie in [0, 1)"));
                    }
                }
                if f.path.is_some() || f.smoothing_window.is_some() {
                    return Err(Error::validation("fiber.path", "only valid for measured fibers"));
                }
            }
            FiberSourceKind::Measurement => {
                let p = f.path.as_ref().ok_or_else(|| Error::validation("fiber.path", "required for measured fibers"))?;
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::validation("fiber.path", format!("{} does not exist", full.display())));
                }
                if f.smoothing_window == Some(0) {
                    return Err(Error::validation("fiber.smoothing_window", "must be >= 1"));
                }
            }
        }

        let c = &self.chain;
        if !(c.stages >= 0.0) || !c.stages.is_finite() {
            return Err(Error::validation("chain.stages", "must be finite and >= 0"));
        }
        if !(c.noise_var >= 0.0) || !c.noise_var.is_finite() {
            return Err(Error::validation("chain.noise_var", "must be finite and >= 0"));
        }
        if let Some(db) = c.gain_db {
            finite("chain.gain_db", db)?;
        }
        finite("chain.nonlin", c.nonlin)?;
        if self.is_nonlinear() && c.stages.fract() != 0.0 {
            return Err(Error::validation("chain.stages", "must be an integer for time-domain simulation"));
        }

        let l = &self.link;
        match (l.amplitude, &l.pathloss) {
            (Some(a), None) => {
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(Error::validation("link.amplitude", "must be finite and >= 0"));
                }
            }
            (None, Some(p)) => {
                p.validate().map_err(|e| Error::validation("link.pathloss", e.to_string()))?;
                positive("link.distance_m", l.distance_m.unwrap_or(f64::NAN))?;
            }
            (Some(_), Some(_)) => return Err(Error::validation("link.amplitude", "give either amplitude or pathloss")),
            (None, None) => return Err(Error::validation("link.amplitude", "give amplitude or pathloss")),
        }
        finite("link.phase", l.phase)?;
        finite("link.clock_offset_s", l.clock_offset_s)?;
        match (l.tau_s, l.distance_m) {
            (Some(t), _) => finite("link.tau_s", t)?,
            (None, Some(d)) => positive("link.distance_m", d)?,
            (None, None) if self.positioning.is_none() => {
                return Err(Error::validation("link.tau_s", "give tau_s or distance_m"));
            }
            _ => {}
        }

        match &self.estimator {
            EstimatorConfig::Ml { r_min, r_max, r_step, tau_min, tau_max, tau_step, .. } => {
                if c.nonlin != 0.0 {
                    return Err(Error::validation("estimator.kind", "ML search needs a linear chain (nonlin = 0)"));
                }
                let s = SearchGrid2D {
                    r_min: *r_min,
                    r_max: *r_max,
                    r_step: *r_step,
                    tau_min: *tau_min,
                    tau_max: *tau_max,
                    tau_step: *tau_step,
                };
                s.validate().map_err(|e| Error::validation("estimator", e.to_string()))?;
                // The objective repeats in tau with period 1 / bin spacing.
                let span = self.grid.bins as f64 / self.grid.bandwidth_hz;
                if tau_max - tau_min >= span {
                    warn!(
                        "tau window {:.3e} s reaches the unambiguous delay span {span:.3e} s; estimates may alias",
                        tau_max - tau_min
                    );
                }
            }
            EstimatorConfig::Pso { .. } => {
                self.pso_config(0)
                    .validate()
                    .map_err(|e| Error::validation("estimator", e.to_string()))?;
            }
        }

        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::validation("sweep.values", "must not be empty"));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("sweep.values", "must be finite"));
            }
            let bad = match s.axis {
                SweepAxis::Sigma2 => s.values.iter().any(|v| *v < 0.0),
                SweepAxis::Amplitude => s.values.iter().any(|v| *v < 0.0),
                SweepAxis::Bandwidth => s.values.iter().any(|v| *v <= 0.0),
            };
            if bad {
                return Err(Error::validation("sweep.values", "out of range for the sweep axis"));
            }
            if s.axis == SweepAxis::Amplitude && l.pathloss.is_some() {
                return Err(Error::validation("sweep.axis", "amplitude sweeps need a fixed link amplitude"));
            }
        }

        if let Some(p) = &self.positioning {
            self.geometry_of(p)
                .validate()
                .map_err(|e| Error::validation("positioning", e.to_string()))?;
            if !matches!(self.estimator, EstimatorConfig::Ml { .. }) {
                return Err(Error::validation("estimator.kind", "positioning uses the ML estimator"));
            }
            if let Some(cell) = p.position_cell {
                positive("positioning.position_cell", cell)?;
            }
        }
        Ok(())
    }

    fn geometry_of(&self, p: &PositioningConfig) -> DeploymentGeometry {
        DeploymentGeometry {
            spacing: p.spacing,
            rofs: p.rofs,
            rus_per_rof: p.rus_per_rof,
            ue_height: p.ue_height,
        }
    }

    /// Sweep values, or a single point without a sweep.
    pub fn sweep_points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    fn pso_config(&self, seed: u64) -> PsoConfig {
        match &self.estimator {
            EstimatorConfig::Pso {
                iterations,
                particles,
                w_personal,
                w_global,
                inertia,
                inertia_decay,
                amplitude_bounds,
                phase_bounds,
                tau_bounds,
                r_bounds,
            } => PsoConfig {
                iterations: *iterations,
                particles: *particles,
                w_personal: *w_personal,
                w_global: *w_global,
                inertia: *inertia,
                inertia_decay: *inertia_decay,
                bounds: vec![*amplitude_bounds, *phase_bounds, *tau_bounds, *r_bounds],
                seed,
            },
            EstimatorConfig::Ml { .. } => PsoConfig::with_defaults(vec![], seed),
        }
    }

    /// Builds the fully resolved setup for one sweep point.
    pub fn point_setup(&self, value: Option<f64>) -> Result<PointSetup> {
        let axis = self.sweep.as_ref().map(|s| s.axis);
        let mut bandwidth = self.grid.bandwidth_hz;
        let mut noise_var = self.chain.noise_var;
        let mut amplitude = self.link.amplitude;
        if let (Some(axis), Some(v)) = (axis, value) {
            match axis {
                SweepAxis::Sigma2 => noise_var = v,
                SweepAxis::Amplitude => amplitude = Some(v),
                SweepAxis::Bandwidth => bandwidth = v,
            }
        }
        let oversample = self.grid.oversample.unwrap_or(if self.chain.nonlin != 0.0 {
            DEFAULT_NONLINEAR_OVERSAMPLE
        } else {
            1
        });
        let grid = FrequencyGrid::centered(self.grid.center_hz, bandwidth, self.grid.bins, oversample)?;
        let fiber = self.build_fiber(&grid)?;
        let gain = match self.chain.gain_db {
            Some(db) => gain_from_db(db),
            None => 1.0 / fiber.peak_magnitude(),
        };
        let pa = PaParams::new(gain, self.chain.nonlin)?;
        let l = &self.link;
        let tau = match (l.tau_s, l.distance_m) {
            (Some(t), _) => t,
            (None, Some(d)) => d / SPEED_OF_LIGHT + l.clock_offset_s,
            (None, None) => l.clock_offset_s,
        };
        let amplitude = match (&l.pathloss, amplitude) {
            (Some(p), _) => LinkAmplitude::Pathloss {
                params: *p,
                distance: l.distance_m.unwrap_or(f64::NAN),
            },
            (None, Some(a)) => LinkAmplitude::Fixed(a),
            (None, None) => return Err(Error::validation("link.amplitude", "missing")),
        };
        Ok(PointSetup {
            value,
            grid,
            fiber,
            pa,
            noise_var,
            stages: self.chain.stages,
            amplitude,
            phase: l.phase,
            tau,
            estimator: self.estimator.clone(),
            pso: self.pso_config(0),
        })
    }

    fn build_fiber(&self, grid: &FrequencyGrid) -> Result<UnitFiberResponse> {
        let f = &self.fiber;
        match f.source {
            FiberSourceKind::Synthetic => {
                let kind = match f.shape {
                    Some(FiberShape::Selective) => SyntheticKind::Selective {
                        depth: f.depth.unwrap_or(0.0),
                        cycles: f.cycles.unwrap_or(1),
                    },
                    _ => SyntheticKind::Flat,
                };
                let params = SyntheticFiberSpec {
                    kind,
                    total_energy: f.total_energy.unwrap_or(grid.len() as f64),
                    delay_samples: f.delay_samples.unwrap_or(0),
                };
                synth_fiber(&params, grid)
            }
            FiberSourceKind::Measurement => {
                let path = self.resolve(f.path.as_deref().unwrap_or(Path::new("")));
                let mut meas = RawMeasurement::read_csv(&path)?;
                if let Some(w) = f.smoothing_window {
                    meas = meas.smoothed(w)?;
                }
                build_unit_response(&meas, grid)
            }
        }
    }

    /// Positioning setup from the `[positioning]` section.
    pub fn trajectory_setup(&self) -> Result<TrajectorySetup> {
        let p = self
            .positioning
            .as_ref()
            .ok_or_else(|| Error::validation("positioning", "section is required"))?;
        let setup = self.point_setup(None)?;
        let search = match &self.estimator {
            EstimatorConfig::Ml { r_min, r_max, r_step, tau_min, tau_max, tau_step, .. } => SearchGrid2D {
                r_min: *r_min,
                r_max: *r_max,
                r_step: *r_step,
                tau_min: *tau_min,
                tau_max: *tau_max,
                tau_step: *tau_step,
            },
            EstimatorConfig::Pso { .. } => return Err(Error::validation("estimator.kind", "positioning uses ML")),
        };
        let refine_levels = match self.estimator {
            EstimatorConfig::Ml { refine_levels, .. } => refine_levels,
            EstimatorConfig::Pso { .. } => 0,
        };
        let amplitude = match setup.amplitude {
            LinkAmplitude::Fixed(a) => AmplitudeModel::Fixed { amplitude: a },
            LinkAmplitude::Pathloss { params, .. } => AmplitudeModel::Pathloss(params),
        };
        Ok(TrajectorySetup {
            geometry: self.geometry_of(p),
            fiber: setup.fiber,
            gain: setup.pa.gain,
            noise_var: setup.noise_var,
            amplitude,
            clock_offset: self.link.clock_offset_s,
            search,
            refine_levels,
            position_cell: p.position_cell,
            trials: self.trials,
            seed: self.seed,
        })
    }

    /// Trajectory from the scenario's inline list.
    pub fn inline_trajectory(&self) -> Result<Vec<UePosition>> {
        let p = self
            .positioning
            .as_ref()
            .ok_or_else(|| Error::validation("positioning", "section is required"))?;
        let geom = self.geometry_of(p);
        if p.trajectory.is_empty() {
            return Err(Error::validation("positioning.trajectory", "no inline trajectory and no file given"));
        }
        Ok(p.trajectory.iter().map(|&[x, y]| UePosition::at_height(x, y, &geom)).collect())
    }

    pub fn geometry(&self) -> Result<DeploymentGeometry> {
        self.positioning
            .as_ref()
            .map(|p| self.geometry_of(p))
            .ok_or_else(|| Error::validation("positioning", "section is required"))
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Scenario::from_toml_str(&text, base, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkAmplitude {
    Fixed(f64),
    Pathloss { params: PathlossParams, distance: f64 },
}

impl LinkAmplitude {
    /// Amplitude used for the bound: the fixed value or the free-space term.
    pub fn nominal(&self) -> f64 {
        match *self {
            LinkAmplitude::Fixed(a) => a,
            LinkAmplitude::Pathloss { params, distance } => params.free_space(distance),
        }
    }
}

/// One sweep point with every derived quantity resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSetup {
    pub value: Option<f64>,
    pub grid: FrequencyGrid,
    pub fiber: UnitFiberResponse,
    pub pa: PaParams,
    pub noise_var: f64,
    pub stages: f64,
    pub amplitude: LinkAmplitude,
    pub phase: f64,
    pub tau: f64,
    pub estimator: EstimatorConfig,
    pub pso: PsoConfig,
}

impl PointSetup {
    fn is_nonlinear(&self) -> bool {
        !self.pa.is_linear() || matches!(self.estimator, EstimatorConfig::Pso { .. })
    }

    /// Linear-regime bound at the nominal parameters, when a closed form applies.
    pub fn crlb(&self) -> Option<CrlbResult> {
        if !self.pa.is_linear() || !(self.noise_var > 0.0) {
            return None;
        }
        let pilot = PilotSequence::from_symbols(
            vec![Complex64::from_polar(1.0, PI / 4.0); self.grid.len()],
            crate::signal::Modulation::Qpsk,
        )
        .ok()?;
        let model = LinearModel::new(pilot, self.fiber.clone(), self.pa.gain, self.noise_var).ok()?;
        let regime = applicable_regime(&model)?;
        let theta = ChannelParams {
            amplitude: self.amplitude.nominal(),
            phase: self.phase,
            tau: self.tau,
            stages: self.stages,
        };
        crlb_from_fim(&fim(&theta, &model, regime).ok()?).ok()
    }
}

/// Truth and estimate of one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub point: usize,
    pub trial: usize,
    pub amplitude: f64,
    pub phase: f64,
    pub tau: f64,
    pub stages: f64,
    pub estimate: Option<ParamEstimate>,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.estimate.is_none()
    }

    pub fn errors(&self) -> Option<[f64; 4]> {
        let e = self.estimate?;
        Some([
            e.a_hat.norm() - self.amplitude,
            wrap_phase(e.a_hat.arg() - self.phase),
            e.tau_hat - self.tau,
            e.r_hat - self.stages,
        ])
    }

    pub fn stage_miss(&self) -> Option<bool> {
        self.estimate.map(|e| e.r_hat_rounded as f64 != self.stages.round())
    }
}

/// Simulated observation of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub pilot: PilotSequence,
    pub amplitude: f64,
    /// Frequency-domain bins (linear) or time samples (nonlinear).
    pub samples: Vec<Complex64>,
}

/// Draws the pilot, amplitude and noise for one trial and propagates.
pub fn simulate_observation<R: Rng + ?Sized>(setup: &PointSetup, rng: &mut R) -> Result<Observation> {
    let pilot = PilotSequence::qpsk(setup.grid.len(), rng);
    let amplitude = match setup.amplitude {
        LinkAmplitude::Fixed(a) => a,
        LinkAmplitude::Pathloss { params, distance } => pathloss_amplitude(&params, distance, rng)?,
    };
    let link = WirelessLink {
        amplitude,
        phase: setup.phase,
        tau: setup.tau,
        clock_offset: 0.0,
        distance: 0.0,
    };
    let chain = ChainParams::new(setup.stages, setup.noise_var, setup.pa, setup.fiber.clone())?;
    let x = wireless_input(&link, &pilot, &setup.grid)?;
    let samples = if setup.is_nonlinear() {
        let xt = time_domain_input(&x, &setup.grid, 1)?;
        propagate_nonlinear(&xt, &chain, rng)?
    } else {
        propagate_linear(&x, &chain, rng)?
    };
    Ok(Observation {
        pilot,
        amplitude,
        samples,
    })
}

/// Runs the configured estimator on an observation.
pub fn estimate_observation(
    setup: &PointSetup,
    pilot: &PilotSequence,
    samples: &[Complex64],
    pso_seed: u64,
) -> Result<ParamEstimate> {
    match &setup.estimator {
        EstimatorConfig::Ml { regime, r_min, r_max, r_step, tau_min, tau_max, tau_step, refine_levels } => {
            let model = LinearModel::new(pilot.clone(), setup.fiber.clone(), setup.pa.gain, setup.noise_var)?;
            let search = SearchGrid2D {
                r_min: *r_min,
                r_max: *r_max,
                r_step: *r_step,
                tau_min: *tau_min,
                tau_max: *tau_max,
                tau_step: *tau_step,
            };
            if *refine_levels == 0 {
                ml_grid_search(samples, &search, *regime, &model)
            } else {
                ml_refined_search(samples, &search, *regime, &model, *refine_levels)
            }
        }
        EstimatorConfig::Pso { .. } => {
            let model = NonlinearModel::new(pilot.clone(), setup.fiber.clone(), setup.pa)?;
            let cfg = PsoConfig {
                seed: pso_seed,
                ..setup.pso.clone()
            };
            estimate_nonlinear(samples, &cfg, &model)
        }
    }
}

/// One full simulate-then-estimate cycle on its own stream.
pub fn run_trial(setup: &PointSetup, seed: u64, point: usize, trial: usize) -> Result<TrialRecord> {
    let mut rng = trial_rng(seed, point as u64, trial as u64);
    let obs = simulate_observation(setup, &mut rng)?;
    let pso_seed: u64 = rng.random();
    let estimate = match estimate_observation(setup, &obs.pilot, &obs.samples, pso_seed) {
        Ok(e) => Some(e),
        Err(e) => {
            debug!("point {point} trial {trial}: estimator failed: {e}");
            None
        }
    };
    Ok(TrialRecord {
        point,
        trial,
        amplitude: obs.amplitude,
        phase: setup.phase,
        tau: setup.tau,
        stages: setup.stages,
        estimate,
    })
}

/// Aggregates of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSummary {
    pub value: Option<f64>,
    pub trials: usize,
    pub failures: usize,
    /// `[|A|, phi, tau, r]` over successful trials.
    pub rmse: [f64; 4],
    pub error_rate: f64,
    pub crlb: Option<CrlbResult>,
}

/// Outcome of [`run_monte_carlo`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub axis: Option<SweepAxis>,
    pub points: Vec<PointSummary>,
    /// Per-trial records, ordered by point then trial.
    pub trials: Vec<TrialRecord>,
    pub wall_times: Vec<Duration>,
}

/// Execution options that do not affect results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn summarize(records: &[TrialRecord], value: Option<f64>, crlb: Option<CrlbResult>) -> PointSummary {
    let mut sq = [0.0; 4];
    let mut ok = 0usize;
    let mut misses = 0usize;
    for r in records {
        if let Some(err) = r.errors() {
            ok += 1;
            for (s, e) in sq.iter_mut().zip(err) {
                *s += e * e;
            }
            if r.stage_miss() == Some(true) {
                misses += 1;
            }
        }
    }
    let rmse = if ok > 0 {
        sq.map(|s| (s / ok as f64).sqrt())
    } else {
        [f64::NAN; 4]
    };
    PointSummary {
        value,
        trials: records.len(),
        failures: records.len() - ok,
        rmse,
        error_rate: if ok > 0 { misses as f64 / ok as f64 } else { f64::NAN },
        crlb,
    }
}

/// Runs `trials` seeded simulate-then-estimate cycles at every sweep point.
pub fn run_monte_carlo(scenario: &Scenario, options: RunOptions) -> Result<RunResult> {
    scenario.validate()?;
    let mut points = Vec::new();
    let mut trials = Vec::new();
    let mut wall_times = Vec::new();
    for (pi, value) in scenario.sweep_points().into_iter().enumerate() {
        let setup = scenario.point_setup(value)?;
        let start = Instant::now();
        let records: Vec<TrialRecord> = with_workers(options.workers, || {
            (0..scenario.trials)
                .into_par_iter()
                .map(|t| run_trial(&setup, scenario.seed, pi, t))
                .collect::<Result<Vec<_>>>()
        })??;
        let summary = summarize(&records, value, setup.crlb());
        if summary.failures as f64 > MAX_FAILURE_FRACTION * scenario.trials as f64 {
            return Err(Error::TooManyFailures {
                point: pi,
                failed: summary.failures,
                total: scenario.trials,
            });
        }
        if summary.failures > 0 {
            warn!("point {pi}: {} of {} trials failed", summary.failures, scenario.trials);
        }
        let elapsed = start.elapsed();
        info!("point {pi} done in {:.3} s", elapsed.as_secs_f64());
        points.push(summary);
        trials.extend(records);
        wall_times.push(elapsed);
    }
    Ok(RunResult {
        axis: scenario.sweep.as_ref().map(|s| s.axis),
        points,
        trials,
        wall_times,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// `# key=value` lines identifying the scenario.
pub fn csv_preamble(scenario: &Scenario, kind: &str) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# generator=rof-{}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# kind={kind}");
    let _ = writeln!(s, "# scenario_sha256={}", scenario.hash()?);
    let _ = writeln!(s, "# seed={}", scenario.seed);
    let _ = writeln!(s, "# trials={}", scenario.trials);
    if let Some(sw) = &scenario.sweep {
        let _ = writeln!(s, "# sweep_axis={}", sw.axis.name());
    }
    Ok(s)
}

/// Aggregate table, one row per sweep point. Bounds are square roots of
/// the variance bounds, comparable with the RMSE columns.
pub fn run_csv_body(result: &RunResult) -> String {
    let mut s = String::from(
        "point,sweep_value,trials,failures,rmse_amplitude,rmse_phase_rad,rmse_tau_s,rmse_r,error_rate,\
         bound_amplitude,bound_phase_rad,bound_tau_s,bound_r,fim_condition,pseudo_inverse\n",
    );
    for (i, p) in result.points.iter().enumerate() {
        let b = p.crlb.map(|c| c.std_devs());
        let _ = writeln!(
            s,
            "{i},{},{},{},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{},{}",
            opt(p.value),
            p.trials,
            p.failures,
            p.rmse[0],
            p.rmse[1],
            p.rmse[2],
            p.rmse[3],
            p.error_rate,
            opt(b.map(|v| v[0])),
            opt(b.map(|v| v[1])),
            opt(b.map(|v| v[2])),
            opt(b.map(|v| v[3])),
            opt(p.crlb.map(|c| c.condition_number)),
            p.crlb.map(|c| c.pseudo_inverse_used.to_string()).unwrap_or_default(),
        );
    }
    s
}

/// Per-trial rows with full precision.
pub fn trials_csv_body(result: &RunResult) -> String {
    let mut s = String::from(
        "point,trial,amplitude,phase_rad,tau_s,r,amplitude_hat,phase_hat_rad,tau_hat_s,r_hat,r_hat_rounded,objective,evaluations\n",
    );
    for t in &result.trials {
        let _ = write!(s, "{},{},{:e},{:e},{:e},{:e},", t.point, t.trial, t.amplitude, t.phase, t.tau, t.stages);
        match t.estimate {
            Some(e) => {
                let _ = writeln!(
                    s,
                    "{:e},{:e},{:e},{:e},{},{:e},{}",
                    e.a_hat.norm(),
                    e.a_hat.arg(),
                    e.tau_hat,
                    e.r_hat,
                    e.r_hat_rounded,
                    e.objective,
                    e.evaluations
                );
            }
            None => s.push_str(",,,,,,\n"),
        }
    }
    s
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes the aggregate CSV, the `.log` sidecar and, if requested, the
/// `.trials.csv` dump.
pub fn write_run(path: &Path, scenario: &Scenario, result: &RunResult, dump_trials: bool) -> Result<()> {
    let mut out = csv_preamble(scenario, "monte_carlo")?;
    out.push_str(&run_csv_body(result));
    write_atomic(path, out.as_bytes())?;
    if dump_trials {
        let mut t = csv_preamble(scenario, "trials")?;
        t.push_str(&trials_csv_body(result));
        write_atomic(&sidecar(path, ".trials.csv"), t.as_bytes())?;
    }
    let mut log = format!("finished_unix={}\n", timestamp());
    for (i, w) in result.wall_times.iter().enumerate() {
        let _ = writeln!(log, "point={i} wall_s={:.6}", w.as_secs_f64());
    }
    write_atomic(&sidecar(path, ".log"), log.as_bytes())
}

/// One bound per sweep value and applicable regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrlbRow {
    pub value: f64,
    pub regime: NoiseRegime,
    pub bound: CrlbResult,
}

/// Bounds across `axis` (values from the scenario's sweep, or the scenario
/// point itself).
pub fn crlb_table(scenario: &Scenario, axis: SweepAxis) -> Result<Vec<CrlbRow>> {
    let values: Vec<Option<f64>> = match &scenario.sweep {
        Some(s) if s.axis == axis => s.values.iter().map(|&v| Some(v)).collect(),
        _ => vec![None],
    };
    let mut sc = scenario.clone();
    sc.sweep = Some(SweepConfig {
        axis,
        values: values.iter().flatten().copied().collect::<Vec<_>>(),
    });
    if sc.sweep.as_ref().is_some_and(|s| s.values.is_empty()) {
        sc.sweep = None;
    }
    let mut rows = Vec::new();
    for v in values {
        let setup = sc.point_setup(v)?;
        if !setup.pa.is_linear() {
            return Err(Error::WrongRegime("bounds are only available for linear chains".into()));
        }
        let value = v.unwrap_or(match axis {
            SweepAxis::Sigma2 => setup.noise_var,
            SweepAxis::Amplitude => setup.amplitude.nominal(),
            SweepAxis::Bandwidth => setup.grid.bandwidth(),
        });
        let pilot = PilotSequence::from_symbols(
            vec![Complex64::from_polar(1.0, PI / 4.0); setup.grid.len()],
            crate::signal::Modulation::Qpsk,
        )?;
        let model = LinearModel::new(pilot, setup.fiber.clone(), setup.pa.gain, setup.noise_var)?;
        let regime = applicable_regime(&model).ok_or_else(|| {
            Error::RegimeViolation("some but not all bins have unit loop gain; no closed form applies".into())
        })?;
        let theta = ChannelParams {
            amplitude: setup.amplitude.nominal(),
            phase: setup.phase,
            tau: setup.tau,
            stages: setup.stages,
        };
        rows.push(CrlbRow {
            value,
            regime,
            bound: crlb_from_fim(&fim(&theta, &model, regime)?)?,
        });
    }
    Ok(rows)
}

pub fn crlb_csv_body(axis: SweepAxis, rows: &[CrlbRow]) -> String {
    let mut s = format!(
        "{},regime,var_amplitude,var_phase_rad2,var_tau_s2,var_r,condition_number,pseudo_inverse\n",
        axis.name()
    );
    for r in rows {
        let v = r.bound.variances;
        let regime = match r.regime {
            NoiseRegime::Flat => "flat",
            NoiseRegime::Selective => "selective",
        };
        let _ = writeln!(
            s,
            "{:e},{regime},{:e},{:e},{:e},{:e},{:e},{}",
            r.value, v[0], v[1], v[2], v[3], r.bound.condition_number, r.bound.pseudo_inverse_used
        );
    }
    s
}

/// Single-observation estimates: either of `samples` (one row), or of one
/// simulated trial per sweep point.
pub fn estimate_csv_body(rows: &[(usize, Option<TrialRecord>, ParamEstimate)]) -> String {
    let mut s = String::from(
        "point,amplitude,phase_rad,tau_s,r,amplitude_hat,phase_hat_rad,tau_hat_s,r_hat,r_hat_rounded,objective\n",
    );
    for (p, truth, e) in rows {
        let t = truth.as_ref();
        let _ = writeln!(
            s,
            "{p},{},{},{},{},{:e},{:e},{:e},{:e},{},{:e}",
            opt(t.map(|t| t.amplitude)),
            opt(t.map(|t| t.phase)),
            opt(t.map(|t| t.tau)),
            opt(t.map(|t| t.stages)),
            e.a_hat.norm(),
            e.a_hat.arg(),
            e.tau_hat,
            e.r_hat,
            e.r_hat_rounded,
            e.objective
        );
    }
    s
}

/// Estimates from a `re,im` sample file using the scenario's first point.
/// The pilot is regenerated from the scenario seed (stream of trial 0).
pub fn estimate_from_samples(scenario: &Scenario, samples: &[Complex64]) -> Result<ParamEstimate> {
    let setup = scenario.point_setup(scenario.sweep_points()[0])?;
    let mut rng = trial_rng(scenario.seed, 0, 0);
    let pilot = PilotSequence::qpsk(setup.grid.len(), &mut rng);
    estimate_observation(&setup, &pilot, samples, scenario.seed)
}

#[derive(Debug, Deserialize)]
struct SampleRecord {
    re: f64,
    im: f64,
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Complex64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let r: SampleRecord = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        out.push(Complex64::new(r.re, r.im));
    }
    Ok(out)
}

pub fn samples_csv_body(samples: &[Complex64]) -> String {
    let mut s = String::from("re,im\n");
    for v in samples {
        let _ = writeln!(s, "{:e},{:e}", v.re, v.im);
    }
    s
}

/// Runs the positioning experiment of the scenario.
pub fn run_positioning(scenario: &Scenario, trajectory_file: Option<&Path>, options: RunOptions) -> Result<TrajectoryReport> {
    let setup = scenario.trajectory_setup()?;
    let traj = match trajectory_file {
        Some(p) => read_trajectory_csv(p, &setup.geometry)?,
        None => scenario.inline_trajectory()?,
    };
    with_workers(options.workers, || trajectory_experiment(&traj, &setup))?
}
