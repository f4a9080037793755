//! Two-dimensional UE positioning from the delays seen by three RoFs.
//!
//! RoF `m` (1-based) runs along the x axis at `y = m * spacing`; its RU `r`
//! (1-based) hangs from the ceiling at `(r * spacing, m * spacing, 0)`. The
//! UE moves in the plane `z = -ue_height`. Every delay carries the same
//! unknown clock offset, which is removed by projecting the range
//! residuals onto the complement of the all-ones vector.
//!
//! With all serving RUs in one column the geometry is mirror-symmetric
//! about that column, so `x` is only determined up to reflection. The
//! search region decides which side is returned.

use std::io::Read;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{ml_refined_search, LinearModel, NoiseRegime, SearchGrid2D};
use crate::fiber::UnitFiberResponse;
use crate::harness::{trial_rng, write_atomic};
use crate::signal::{propagate_linear, wireless_input, ChainParams, PaParams, PilotSequence, WirelessLink};
use crate::SPEED_OF_LIGHT;

const GN_MAX_ITER: usize = 100;
const GN_STEP_TOL: f64 = 1e-13;

/// RU grid above the service area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentGeometry {
    /// RU pitch and RoF pitch, metres.
    pub spacing: f64,
    pub rofs: usize,
    pub rus_per_rof: usize,
    /// UE distance below the ceiling plane, metres.
    pub ue_height: f64,
}

impl DeploymentGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return Err(Error::invalid("RU spacing must be positive"));
        }
        if self.rofs < 3 {
            return Err(Error::invalid("positioning with a clock offset needs at least three RoFs"));
        }
        if self.rus_per_rof < 1 {
            return Err(Error::invalid("each RoF needs at least one RU"));
        }
        if !(self.ue_height >= 0.0) || !self.ue_height.is_finite() {
            return Err(Error::invalid("UE height must be finite and >= 0"));
        }
        Ok(())
    }

    /// Ceiling coordinates of RU `ru` on RoF `rof`, both 1-based.
    pub fn ru_position(&self, rof: usize, ru: usize) -> Result<(f64, f64)> {
        if rof == 0 || rof > self.rofs || ru == 0 || ru > self.rus_per_rof {
            return Err(Error::invalid(format!("RU ({rof}, {ru}) outside the deployment")));
        }
        Ok((ru as f64 * self.spacing, rof as f64 * self.spacing))
    }

    /// Fiber stages from entry RU `entry` to the CU behind the last RU.
    pub fn stages_from_entry(&self, entry: usize) -> Result<usize> {
        if entry == 0 || entry > self.rus_per_rof {
            return Err(Error::invalid(format!("entry RU {entry} outside 1..={}", self.rus_per_rof)));
        }
        Ok(self.rus_per_rof - entry + 1)
    }

    /// Inverse of [`Self::stages_from_entry`], clamped to valid RUs.
    pub fn entry_from_stages(&self, stages: usize) -> usize {
        let u = self.rus_per_rof;
        (u + 1).saturating_sub(stages).clamp(1, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UePosition {
    pub px: f64,
    pub py: f64,
    /// Negative below the ceiling.
    pub pz: f64,
}

impl UePosition {
    pub fn at_height(px: f64, py: f64, geom: &DeploymentGeometry) -> Self {
        Self { px, py, pz: -geom.ue_height }
    }
}

/// Delays measured on several RoFs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToaSet {
    /// Seconds, one per serving RoF.
    pub taus: Vec<f64>,
    /// 1-based RoF index of each delay.
    pub rofs: Vec<usize>,
    /// 1-based entry RU of each delay.
    pub entry_rus: Vec<usize>,
}

impl ToaSet {
    pub fn validate(&self, geom: &DeploymentGeometry) -> Result<()> {
        let m = self.taus.len();
        if self.rofs.len() != m || self.entry_rus.len() != m {
            return Err(Error::invalid("ToA set fields differ in length"));
        }
        if m < 3 {
            return Err(Error::invalid("positioning needs delays from at least three RoFs"));
        }
        if self.taus.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("delays must be finite"));
        }
        for (&rof, &ru) in self.rofs.iter().zip(&self.entry_rus) {
            geom.ru_position(rof, ru)?;
        }
        Ok(())
    }
}

/// Euclidean distance between the UE and RU `ru` of RoF `rof`.
pub fn ru_ue_distance(geom: &DeploymentGeometry, rof: usize, ru: usize, ue: &UePosition) -> Result<f64> {
    let (x, y) = geom.ru_position(rof, ru)?;
    Ok(((ue.px - x).powi(2) + (ue.py - y).powi(2) + ue.pz.powi(2)).sqrt())
}

/// Closest RU on RoF `rof`; ties go to the smaller index.
pub fn nearest_ru(geom: &DeploymentGeometry, rof: usize, ue: &UePosition) -> Result<usize> {
    let mut best = (f64::INFINITY, 0);
    for ru in 1..=geom.rus_per_rof {
        let d = ru_ue_distance(geom, rof, ru, ue)?;
        if d < best.0 {
            best = (d, ru);
        }
    }
    Ok(best.1)
}

/// The `count` RoFs closest to the UE (ties to the smaller index), in
/// ascending index order.
pub fn serving_rofs(geom: &DeploymentGeometry, ue: &UePosition, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (1..=geom.rofs).collect();
    all.sort_by(|&a, &b| {
        let da = (ue.py - a as f64 * geom.spacing).abs();
        let db = (ue.py - b as f64 * geom.spacing).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Least-squares clock offset: the mean of `tau - d / c`.
pub fn clock_offset_hat(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::invalid("no residuals"));
    }
    Ok(residuals.iter().sum::<f64>() / residuals.len() as f64)
}

/// Rectangle searched by [`position_solve`], with the coarse-grid cell size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
}

impl SearchRegion {
    /// Cell size `c / (4 B)`.
    pub fn for_bandwidth(x: [f64; 2], y: [f64; 2], bandwidth: f64) -> Self {
        Self {
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
            cell: SPEED_OF_LIGHT / (4.0 * bandwidth),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = [self.x_min, self.x_max, self.y_min, self.y_max, self.cell];
        if v.iter().any(|x| !x.is_finite()) || !(self.x_min <= self.x_max && self.y_min <= self.y_max) {
            return Err(Error::invalid("search region is empty"));
        }
        if !(self.cell > 0.0) {
            return Err(Error::invalid("search cell must be positive"));
        }
        Ok(())
    }

    fn axis(lo: f64, hi: f64, cell: f64) -> Vec<f64> {
        let n = ((hi - lo) / cell).floor() as usize;
        let mut v: Vec<f64> = (0..=n).map(|i| lo + i as f64 * cell).collect();
        if *v.last().unwrap_or(&lo) < hi {
            v.push(hi);
        }
        v
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

struct Anchors {
    xy: Vec<(f64, f64)>,
    ranges: Vec<f64>,
    height2: f64,
}

impl Anchors {
    fn new(toas: &ToaSet, geom: &DeploymentGeometry) -> Result<Self> {
        toas.validate(geom)?;
        let xy = toas
            .rofs
            .iter()
            .zip(&toas.entry_rus)
            .map(|(&m, &r)| geom.ru_position(m, r))
            .collect::<Result<_>>()?;
        Ok(Self {
            xy,
            // Centering first makes a common delay shift cancel exactly.
            ranges: {
                let mean = toas.taus.iter().sum::<f64>() / toas.taus.len() as f64;
                toas.taus.iter().map(|t| (t - mean) * SPEED_OF_LIGHT).collect()
            },
            height2: geom.ue_height * geom.ue_height,
        })
    }

    fn distances(&self, x: f64, y: f64) -> Vec<f64> {
        self.xy
            .iter()
            .map(|(ax, ay)| ((x - ax).powi(2) + (y - ay).powi(2) + self.height2).sqrt())
            .collect()
    }

    /// Range residual `c tau - d` with its mean removed.
    fn projected(&self, x: f64, y: f64) -> Vec<f64> {
        let rho: Vec<f64> = self.ranges.iter().zip(self.distances(x, y)).map(|(a, d)| a - d).collect();
        let mean = rho.iter().sum::<f64>() / rho.len() as f64;
        rho.into_iter().map(|v| v - mean).collect()
    }

    fn cost(&self, x: f64, y: f64) -> f64 {
        self.projected(x, y).iter().map(|v| v * v).sum()
    }

    /// Jacobian of [`Self::projected`] with respect to `(x, y)`.
    fn jacobian(&self, x: f64, y: f64) -> Vec<[f64; 2]> {
        let d = self.distances(x, y);
        let raw: Vec<[f64; 2]> = self
            .xy
            .iter()
            .zip(&d)
            .map(|((ax, ay), &dm)| {
                let dm = dm.max(f64::MIN_POSITIVE);
                [-(x - ax) / dm, -(y - ay) / dm]
            })
            .collect();
        let n = raw.len() as f64;
        let mx = raw.iter().map(|v| v[0]).sum::<f64>() / n;
        let my = raw.iter().map(|v| v[1]).sum::<f64>() / n;
        raw.into_iter().map(|v| [v[0] - mx, v[1] - my]).collect()
    }
}

/// `||R - mean(R)||^2` in seconds squared, `R = tau - d(px, py) / c`.
pub fn position_objective(toas: &ToaSet, geom: &DeploymentGeometry, px: f64, py: f64) -> Result<f64> {
    let a = Anchors::new(toas, geom)?;
    Ok(a.cost(px, py) / (SPEED_OF_LIGHT * SPEED_OF_LIGHT))
}

/// Minimises the offset-free range residual over `region`: a coarse grid
/// followed by damped Gauss-Newton steps kept inside the region.
pub fn position_solve(toas: &ToaSet, geom: &DeploymentGeometry, region: &SearchRegion) -> Result<(f64, f64)> {
    geom.validate()?;
    region.validate()?;
    let anchors = Anchors::new(toas, geom)?;

    let xs = SearchRegion::axis(region.x_min, region.x_max, region.cell);
    let ys = SearchRegion::axis(region.y_min, region.y_max, region.cell);
    // Best coarse cell of every x column. Starting the local search from
    // each column avoids the stationary line through the anchors' column,
    // where the x gradient vanishes.
    let starts: Vec<(f64, f64, f64)> = xs
        .iter()
        .map(|&x| {
            ys.iter().fold((f64::INFINITY, x, region.y_min), |best, &y| {
                let c = anchors.cost(x, y);
                if c < best.0 {
                    (c, x, y)
                } else {
                    best
                }
            })
        })
        .collect();

    let mut best = (f64::INFINITY, region.x_min, region.y_min);
    for start in starts {
        let (c, x, y) = levenberg_marquardt(&anchors, region, start)?;
        if c < best.0 {
            best = (c, x, y);
        }
    }
    let (_, x, y) = best;
    debug_assert!(region.contains(x, y));
    Ok((x, y))
}

/// Damped Gauss-Newton iterations clamped to `region`.
fn levenberg_marquardt(
    anchors: &Anchors,
    region: &SearchRegion,
    (mut cost, mut x, mut y): (f64, f64, f64),
) -> Result<(f64, f64, f64)> {
    let mut damping = 1e-6;
    for _ in 0..GN_MAX_ITER {
        let e = anchors.projected(x, y);
        let jac = anchors.jacobian(x, y);
        let mut jtj = Matrix2::zeros();
        let mut jte = Vector2::zeros();
        for (row, &ek) in jac.iter().zip(&e) {
            let v = Vector2::new(row[0], row[1]);
            jtj += v * v.transpose();
            jte += v * ek;
        }
        if jtj.norm() < 1e-24 {
            return Err(Error::DegenerateGeometry(
                "residual gradients are identical for every RoF".into(),
            ));
        }
        let mut accepted = false;
        let mut step_norm = 0.0;
        for _ in 0..30 {
            let scale = jtj.trace().max(1e-12) * damping;
            let lhs = jtj + Matrix2::identity() * scale;
            let Some(step) = lhs.try_inverse().map(|inv| -(inv * jte)) else {
                damping *= 10.0;
                continue;
            };
            let nx = (x + step[0]).clamp(region.x_min, region.x_max);
            let ny = (y + step[1]).clamp(region.y_min, region.y_max);
            let nc = anchors.cost(nx, ny);
            if nc <= cost {
                step_norm = ((nx - x).powi(2) + (ny - y).powi(2)).sqrt();
                x = nx;
                y = ny;
                cost = nc;
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted || step_norm < GN_STEP_TOL {
            break;
        }
    }
    Ok((cost, x, y))
}

/// How the wireless amplitude of each uplink is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum AmplitudeModel {
    Fixed { amplitude: f64 },
    Pathloss(crate::signal::PathlossParams),
}

/// Simulation settings for [`trajectory_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySetup {
    pub geometry: DeploymentGeometry,
    /// Unit fiber; its grid fixes the bandwidth.
    pub fiber: UnitFiberResponse,
    pub gain: f64,
    pub noise_var: f64,
    pub amplitude: AmplitudeModel,
    pub clock_offset: f64,
    pub search: SearchGrid2D,
    pub refine_levels: usize,
    /// Coarse position cell; `None` uses `c / (4 B)`.
    pub position_cell: Option<f64>,
    pub trials: usize,
    pub seed: u64,
}

/// One trajectory point in one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub point: usize,
    pub trial: usize,
    pub truth: UePosition,
    pub px_hat: f64,
    pub py_hat: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    /// Ordered by point, then trial.
    pub rows: Vec<TrajectoryRow>,
    pub rmse: f64,
}

fn run_point<R: Rng + ?Sized>(
    ue: &UePosition,
    setup: &TrajectorySetup,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let geom = &setup.geometry;
    let grid = setup.fiber.grid();
    let pa = PaParams::new(setup.gain, 0.0)?;
    let rofs = serving_rofs(geom, ue, 3);
    let mut taus = Vec::with_capacity(3);
    let mut entries = Vec::with_capacity(3);
    for &m in &rofs {
        let entry = nearest_ru(geom, m, ue)?;
        let d = ru_ue_distance(geom, m, entry, ue)?;
        let amplitude = match setup.amplitude {
            AmplitudeModel::Fixed { amplitude } => amplitude,
            AmplitudeModel::Pathloss(p) => crate::signal::pathloss_amplitude(&p, d, rng)?,
        };
        let phase = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let link = WirelessLink::from_geometry(amplitude, phase, d, setup.clock_offset)?;
        let pilot = PilotSequence::qpsk(grid.len(), rng);
        let stages = geom.stages_from_entry(entry)?;
        let chain = ChainParams::new(stages as f64, setup.noise_var, pa, setup.fiber.clone())?;
        let x = wireless_input(&link, &pilot, grid)?;
        let y = propagate_linear(&x, &chain, rng)?;
        let model = LinearModel::new(pilot, setup.fiber.clone(), setup.gain, setup.noise_var)?;
        let est = ml_refined_search(&y, &setup.search, NoiseRegime::Selective, &model, setup.refine_levels)?;
        taus.push(est.tau_hat);
        entries.push(geom.entry_from_stages(est.r_hat_rounded));
    }
    let toas = ToaSet {
        taus,
        rofs: rofs.clone(),
        entry_rus: entries.clone(),
    };
    // The estimated entry RUs and serving RoFs bound the UE to their cells.
    let s = geom.spacing;
    let lo_e = *entries.iter().min().unwrap_or(&1) as f64;
    let hi_e = *entries.iter().max().unwrap_or(&1) as f64;
    let lo_m = *rofs.first().unwrap_or(&1) as f64;
    let hi_m = *rofs.last().unwrap_or(&1) as f64;
    let cell = setup
        .position_cell
        .unwrap_or(SPEED_OF_LIGHT / (4.0 * grid.bandwidth()));
    let region = SearchRegion {
        x_min: (lo_e - 0.5) * s,
        x_max: (hi_e + 0.5) * s,
        y_min: (lo_m - 0.5) * s,
        y_max: (hi_m + 0.5) * s,
        cell,
    };
    position_solve(&toas, geom, &region)
}

/// Simulates three uplinks per trajectory point and trial, estimates each
/// delay by ML search and solves for the position.
pub fn trajectory_experiment(trajectory: &[UePosition], setup: &TrajectorySetup) -> Result<TrajectoryReport> {
    if trajectory.is_empty() {
        return Err(Error::invalid("trajectory is empty"));
    }
    if setup.trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    setup.geometry.validate()?;
    let jobs: Vec<(usize, usize)> = (0..trajectory.len())
        .flat_map(|p| (0..setup.trials).map(move |t| (p, t)))
        .collect();
    let rows: Vec<TrajectoryRow> = jobs
        .par_iter()
        .map(|&(p, t)| {
            let ue = trajectory[p];
            let mut rng = trial_rng(setup.seed, p as u64, t as u64);
            let (px_hat, py_hat) = run_point(&ue, setup, &mut rng)?;
            Ok(TrajectoryRow {
                point: p,
                trial: t,
                truth: ue,
                px_hat,
                py_hat,
                error: ((px_hat - ue.px).powi(2) + (py_hat - ue.py).powi(2)).sqrt(),
            })
        })
        .collect::<Result<_>>()?;
    let rmse = (rows.iter().map(|r| r.error * r.error).sum::<f64>() / rows.len() as f64).sqrt();
    Ok(TrajectoryReport { rows, rmse })
}

#[derive(Debug, Deserialize)]
struct TrajectoryRecord {
    px_m: f64,
    py_m: f64,
}

/// Reads `px_m,py_m` rows; `#` lines are comments.
pub fn read_trajectory<R: Read>(reader: R, geom: &DeploymentGeometry) -> Result<Vec<UePosition>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let r: TrajectoryRecord = rec?;
        if !(r.px_m.is_finite() && r.py_m.is_finite()) {
            return Err(Error::invalid("trajectory coordinates must be finite"));
        }
        out.push(UePosition::at_height(r.px_m, r.py_m, geom));
    }
    if out.is_empty() {
        return Err(Error::invalid("trajectory file has no points"));
    }
    Ok(out)
}

pub fn read_trajectory_csv(path: impl AsRef<Path>, geom: &DeploymentGeometry) -> Result<Vec<UePosition>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectory(file, geom).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Parse {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// `px_true,py_true,px_hat,py_hat,err_m` rows with full precision.
pub fn trajectory_csv_body(report: &TrajectoryReport) -> String {
    let mut s = String::from("point,trial,px_true,py_true,px_hat,py_hat,err_m\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}\n",
            r.point, r.trial, r.truth.px, r.truth.py, r.px_hat, r.py_hat, r.error
        ));
    }
    s
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, header: &str, report: &TrajectoryReport) -> Result<()> {
    let mut s = String::from(header);
    s.push_str(&trajectory_csv_body(report));
    write_atomic(path.as_ref(), s.as_bytes())
}
