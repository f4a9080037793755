//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rof_core::crlb::{mean_vector, ChannelParams};
use rof_core::estimation::{LinearModel, NoiseRegime};
use rof_core::fiber::{synth_fiber, FrequencyGrid, SyntheticFiberSpec, SyntheticKind, UnitFiberResponse};
use rof_core::signal::PilotSequence;
use rof_core::Complex64;

/// Term-by-term noise accumulation: `sigma2 * sum_{i=0..r} b^i`.
pub fn geometric_variance(b: f64, r: usize, sigma2: f64) -> f64 {
    let mut total = 0.0;
    let mut p = 1.0;
    for _ in 0..=r {
        total += p;
        p *= b;
    }
    sigma2 * total
}

/// Median of the window centred on `i`, shrunk symmetrically at the
/// edges, found by sorting (even windows are widened by one).
pub fn brute_median(series: &[f64], window: usize, i: usize) -> f64 {
    let window = window | 1;
    let h = (window / 2).min(i).min(series.len() - 1 - i);
    let mut w: Vec<f64> = series[i - h..=i + h].to_vec();
    w.sort_by(f64::total_cmp);
    w[w.len() / 2]
}

/// Per-bin noise variance and its `r` derivative, written out directly.
fn covariance(b: &[f64], r: f64, sigma2: f64, regime: NoiseRegime) -> (Vec<f64>, Vec<f64>) {
    match regime {
        NoiseRegime::Flat => (vec![(r + 1.0) * sigma2; b.len()], vec![sigma2; b.len()]),
        NoiseRegime::Selective => b
            .iter()
            .map(|&bk| {
                let v = sigma2 * (bk.powf(r + 1.0) - 1.0) / (bk - 1.0);
                let dv = sigma2 * bk.powf(r + 1.0) * bk.ln() / (bk - 1.0);
                (v, dv)
            })
            .unzip(),
    }
}

/// Step sizes matched to each parameter's natural scale.
fn steps(theta: &ChannelParams, model: &LinearModel) -> [f64; 4] {
    let f_max = model.grid().freqs().iter().fold(0.0f64, |m, f| m.max(f.abs()));
    [
        1e-6 * theta.amplitude.abs().max(1e-3),
        1e-6,
        1e-4 / (2.0 * PI * f_max),
        1e-6,
    ]
}

/// General Gaussian FIM for a diagonal covariance that depends only on
/// `r`: `2 Re(dmu_i^H C^-1 dmu_j) + tr(C^-1 dC_i C^-1 dC_j)`, with the
/// mean derivatives taken by central differences of the mean vector.
pub fn numeric_fim(theta: &ChannelParams, model: &LinearModel, regime: NoiseRegime) -> Matrix4<f64> {
    let h = steps(theta, model);
    let base = theta.to_array();
    let derivs: Vec<Vec<Complex64>> = (0..4)
        .map(|i| {
            let mut up = base;
            let mut dn = base;
            up[i] += h[i];
            dn[i] -= h[i];
            let mu_up = mean_vector(&ChannelParams::from_array(up), model).unwrap();
            let mu_dn = mean_vector(&ChannelParams::from_array(dn), model).unwrap();
            mu_up.iter().zip(&mu_dn).map(|(a, b)| (a - b) / (2.0 * h[i])).collect()
        })
        .collect();
    let (var, dvar) = covariance(&model.b_factors(), theta.stages, model.noise_var, regime);
    let mut f = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            let mean: f64 = (0..var.len())
                .map(|k| 2.0 * (derivs[i][k].conj() * derivs[j][k]).re / var[k])
                .sum();
            f[(i, j)] = mean;
        }
    }
    f[(3, 3)] += var.iter().zip(&dvar).map(|(v, d)| (d / v).powi(2)).sum::<f64>();
    f
}

pub fn grid(bins: usize, bandwidth: f64, oversample: usize) -> FrequencyGrid {
    FrequencyGrid::centered(140e9, bandwidth, bins, oversample).unwrap()
}

pub fn selective_fiber(g: &FrequencyGrid, depth: f64, total_energy: f64, delay_samples: usize) -> UnitFiberResponse {
    synth_fiber(
        &SyntheticFiberSpec { kind: SyntheticKind::Selective { depth, cycles: 1 }, total_energy, delay_samples },
        g,
    )
    .unwrap()
}

pub fn flat_fiber(g: &FrequencyGrid, total_energy: f64, delay_samples: usize) -> UnitFiberResponse {
    synth_fiber(&SyntheticFiberSpec { kind: SyntheticKind::Flat, total_energy, delay_samples }, g).unwrap()
}

pub fn qpsk(len: usize, seed: u64) -> PilotSequence {
    PilotSequence::qpsk(len, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Prints and returns the verdict line of an acceptance criterion.
pub fn verdict(id: u32, pass: bool, detail: &str) -> bool {
    println!("criterion {id:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
