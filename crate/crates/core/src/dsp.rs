//! Small signal-processing helpers shared across modules.

use std::cell::RefCell;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub(crate) fn convolve(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// `sum_k x[k] exp(+j 2 pi n k / m)` for `n < m` (unnormalized inverse DFT of
/// `x` zero-padded to length `m`).
pub(crate) fn padded_inverse_dft(x: &[Complex64], m: usize) -> Vec<Complex64> {
    debug_assert!(m >= x.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    buf[..x.len()].copy_from_slice(x);
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(m).process(&mut buf));
    buf
}

/// `sum_n y[n] exp(-j 2 pi k n / m)` for `k < bins`, over every sample of `y`
/// regardless of its length (the DTFT sampled on the `m`-point grid).
pub(crate) fn folded_dft(y: &[Complex64], m: usize, bins: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (n, &v) in y.iter().enumerate() {
        buf[n % m] += v;
    }
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(m).process(&mut buf));
    buf.truncate(bins);
    buf
}

/// One draw from CN(0, var): variance `var / 2` per real component.
pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    if var == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Wrap an angle to (-pi, pi].
pub(crate) fn wrap_phase(x: f64) -> f64 {
    use std::f64::consts::PI;
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dtft(y: &[Complex64], m: usize, k: usize) -> Complex64 {
        y.iter()
            .enumerate()
            .map(|(n, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * n) as f64 / m as f64))
            .sum()
    }

    #[test]
    fn convolve_by_hand() {
        let a = [Complex64::new(1.0, 0.0), Complex64::new(0.5, 0.0)];
        let c = convolve(&a, &a);
        assert_eq!(c.len(), 3);
        assert!((c[0] - 1.0).norm() < 1e-15);
        assert!((c[1] - 1.0).norm() < 1e-15);
        assert!((c[2] - 0.25).norm() < 1e-15);
    }

    #[test]
    fn folded_dft_matches_dtft_on_long_input() {
        let y: Vec<Complex64> = (0..23)
            .map(|n| Complex64::new((n as f64 * 0.7).sin(), (n as f64 * 0.3).cos()))
            .collect();
        let f = folded_dft(&y, 8, 5);
        for (k, v) in f.iter().enumerate() {
            assert!((v - naive_dtft(&y, 8, k)).norm() < 1e-12);
        }
    }

    #[test]
    fn wrap_phase_range() {
        for x in [-7.0, -PI, 0.0, PI, 3.5, 100.0] {
            let w = wrap_phase(x);
            assert!(w > -PI && w <= PI);
            assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
